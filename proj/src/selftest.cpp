#include "ssf/selftest.hpp"

#include <cmath>
#include <cstdio>

#include "ssf/episodes.hpp"
#include "ssf/model.hpp"
#include "ssf/training.hpp"

namespace ssf {

namespace {

// Reference mutual-NN selection: plain double loops, no shared code with
// mutual_mask beyond the tensor values.
void bruteforce_mutual(const std::vector<double>& r, int rows, int cols,
                       std::vector<int>& nq, std::vector<int>& ns, std::vector<int>& m) {
    nq.assign(rows, 0);
    ns.assign(rows, 0);
    m.assign(rows, 0);
    for (int i = 0; i < rows; ++i) {
        int best_col = 0;
        for (int j = 1; j < cols; ++j)
            if (r[static_cast<size_t>(i) * cols + j] > r[static_cast<size_t>(i) * cols + best_col])
                best_col = j;
        nq[i] = best_col;
        int best_row = 0;
        for (int k = 1; k < rows; ++k)
            if (r[static_cast<size_t>(k) * cols + best_col] >
                r[static_cast<size_t>(best_row) * cols + best_col])
                best_row = k;
        ns[i] = best_row;
        m[i] = best_row == i ? 1 : 0;
    }
}

bool check_mask_oracle(std::string& detail, int instances) {
    Rng rng(2024);
    for (int it = 0; it < instances; ++it) {
        int k = 1 + rng.uniform_int(8);
        int n = 1 + rng.uniform_int(4);
        int mk = (1 + rng.uniform_int(2)) * k;
        int cols = n * mk;
        Tensor r = Tensor::uniform({k, cols}, rng, -1, 1);
        MutualMask mm = mutual_mask(r);
        std::vector<int> nq, ns, m;
        bruteforce_mutual(r.value(), k, cols, nq, ns, m);
        for (int i = 0; i < k; ++i) {
            if (mm.nn_of_query[static_cast<size_t>(i)] != nq[static_cast<size_t>(i)] ||
                mm.back_pointer[static_cast<size_t>(i)] != ns[static_cast<size_t>(i)] ||
                static_cast<int>(mm.mask[static_cast<size_t>(i)]) != m[static_cast<size_t>(i)]) {
                detail = "mismatch at instance " + std::to_string(it) + " row " + std::to_string(i);
                return false;
            }
        }
    }
    detail = std::to_string(instances) + " random relation matrices";
    return true;
}

bool check_primitive_grads(std::string& detail) {
    Rng rng(7);
    double worst = 0.0;
    auto track = [&](double e) { worst = std::max(worst, e); };

    track(finite_diff_check([](const Tensor& t) { return sum(mul(t, tanh_op(t))); },
                            Tensor::uniform({3, 3}, rng, -1, 1), 1e-5));
    track(finite_diff_check(
        [](const Tensor& t) {
            Tensor b = Tensor::from({3, 2}, {0.2, -0.4, 0.6, 0.1, -0.3, 0.5});
            return sum(softmax_lastdim(matmul(t, b)));
        },
        Tensor::uniform({2, 3}, rng, -1, 1), 1e-5));
    track(finite_diff_check(
        [](const Tensor& t) {
            Tensor w = Tensor::from({2, 4}, {0.3, -0.2, 0.5, 0.1, 0.4, 0.2, -0.1, 0.6});
            return sum(mul(l2_normalize_rows(t), w));
        },
        Tensor::from({2, 4}, {0.5, -0.7, 0.3, 0.9, -0.4, 0.6, 0.8, -0.2}), 1e-5));
    track(finite_diff_check([](const Tensor& t) { return sum(rowwise_max(t)); },
                            Tensor::uniform({4, 5}, rng, -1, 1), 1e-5));
    track(finite_diff_check([](const Tensor& t) { return cross_entropy_logits(t, 1); },
                            Tensor::uniform({5}, rng, -2, 2), 1e-5));
    track(finite_diff_check(
        [](const Tensor& t) {
            Rng wr(3);
            Tensor w = Tensor::uniform({3, 2, 3, 3}, wr, -0.3, 0.3);
            Tensor b = Tensor::uniform({3}, wr, -0.1, 0.1);
            return sum(global_avg_pool(avgpool2x2(tanh_op(conv2d(t, w, b, 1, 1)))));
        },
        Tensor::uniform({1, 2, 4, 4}, rng, -1, 1), 1e-5));

    char buf[64];
    std::snprintf(buf, sizeof(buf), "max rel err %.2e", worst);
    detail = buf;
    return worst < 1e-4;
}

}  // namespace

Model tiny_gradcheck_model(Rng& rng) {
    ModelConfig cfg;
    cfg.grids.sizes = {2};  // K = 4
    cfg.grids.expansion = 2.0;
    cfg.image_side = 16;
    cfg.encoder_side = 8;
    cfg.channels = {4, 8};  // C = C' = 8
    cfg.dropout_rate = 0.0;
    return Model::init(cfg, rng);
}

Episode tiny_episode(std::vector<Image>& storage, Rng& rng) {
    // 2-way 1-shot with one query per class on random images.
    storage.clear();
    for (int i = 0; i < 4; ++i) {
        Image img(3, 16, 16);
        for (auto& v : img.data) v = rng.uniform();
        storage.push_back(std::move(img));
    }
    Episode ep;
    ep.n_way = 2;
    ep.m_shot = 1;
    ep.b_query = 1;
    ep.support = {{EpisodeItem{&storage[0], 0}}, {EpisodeItem{&storage[1], 1}}};
    ep.query = {{EpisodeItem{&storage[2], 2}}, {EpisodeItem{&storage[3], 3}}};
    return ep;
}

Model model_with_param(const Model& base, size_t index, const Tensor& replacement) {
    Model m = base;
    size_t nb = m.backbone.blocks.size() * 2;
    if (index < nb) {
        auto& blk = m.backbone.blocks[index / 2];
        (index % 2 == 0 ? blk.w : blk.b) = replacement;
    } else {
        Tensor* slots[6] = {&m.heads.wk, &m.heads.bk, &m.heads.wq,
                            &m.heads.bq, &m.heads.wv, &m.heads.bv};
        *slots[index - nb] = replacement;
    }
    return m;
}

Tensor episode_eval_loss(const Model& model, const Episode& ep) {
    EpisodeOutcome oc = run_episode(ep, model, false, nullptr, nullptr, true);
    return mean_scalars(oc.query_losses);
}

namespace {

bool check_end_to_end_grad(std::string& detail) {
    Rng rng(41);
    Model model = tiny_gradcheck_model(rng);
    std::vector<Image> storage;
    Episode ep = tiny_episode(storage, rng);

    std::vector<Tensor> params = model.parameters();
    double worst = 0.0;
    for (size_t i = 0; i < params.size(); ++i) {
        auto f = [&](const Tensor& t) {
            Tensor leaf = t;
            return episode_eval_loss(model_with_param(model, i, leaf), ep);
        };
        worst = std::max(worst, finite_diff_check(f, params[i].detach(), 1e-5));
    }
    char buf[80];
    std::snprintf(buf, sizeof(buf), "%zu parameter tensors, max rel err %.2e", params.size(), worst);
    detail = buf;
    return worst < 1e-3;
}

bool check_invariants(std::string& detail) {
    Rng rng(99);
    for (int it = 0; it < 50; ++it) {
        int k = 1 + rng.uniform_int(6);
        int n = 1 + rng.uniform_int(3);
        int mk = (1 + rng.uniform_int(2)) * k;
        int cp = 4;
        Tensor q_q = Tensor::uniform({k, cp}, rng, -1, 1);
        std::vector<Tensor> ks, vs;
        for (int c = 0; c < n; ++c) {
            ks.push_back(Tensor::uniform({mk, cp}, rng, -1, 1));
            vs.push_back(Tensor::uniform({mk, cp}, rng, -1, 1));
        }
        RelationSet rel = relation_matrices(q_q, ks);
        MutualMask mm = mutual_mask(rel.concat);

        // positive rescaling leaves the selection unchanged
        double s = rng.uniform(0.1, 10.0);
        MutualMask mm2 = mutual_mask(scale(rel.concat, s));
        if (mm.mask != mm2.mask || mm.nn_of_query != mm2.nn_of_query) {
            detail = "mask not scale invariant";
            return false;
        }

        auto protos = attend_and_align(rel, mm, vs, MaskMode::PreSoftmax, 0.0, false, nullptr);
        for (const auto& p : protos) {
            const auto& a = p.attention.value();
            int cols = p.attention.dim(1);
            for (int r = 0; r < p.attention.dim(0); ++r) {
                double rowsum = 0.0;
                for (int ccol = 0; ccol < cols; ++ccol)
                    rowsum += a[static_cast<size_t>(r) * cols + ccol];
                if (std::abs(rowsum - 1.0) > 1e-9) {
                    detail = "attention row sum off by " + std::to_string(rowsum - 1.0);
                    return false;
                }
            }
        }

        // perfect self-match score equals K
        AlignedPrototype self;
        self.prototype = q_q;
        self.attention = Tensor::zeros({k, mk});
        Tensor score = patch_to_class_score(patch_similarity_matrix(q_q, self));
        if (std::abs(score.item() - k) > 1e-9) {
            detail = "self-match score " + std::to_string(score.item()) + " != K";
            return false;
        }
    }
    detail = "50 random instances";
    return true;
}

}  // namespace

std::vector<SelfTestResult> run_selftest(bool verbose) {
    std::vector<SelfTestResult> results;
    auto run = [&](const char* name, bool (*fn)(std::string&)) {
        SelfTestResult r;
        r.name = name;
        r.passed = fn(r.detail);
        if (verbose)
            std::printf("%s %s (%s)\n", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                        r.detail.c_str());
        results.push_back(std::move(r));
    };
    run("mutual_mask vs brute force", [](std::string& d) { return check_mask_oracle(d, 200); });
    run("primitive gradients", check_primitive_grads);
    run("episode loss gradients", check_end_to_end_grad);
    run("attention and score invariants", check_invariants);
    return results;
}

}  // namespace ssf
