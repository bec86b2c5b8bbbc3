#include "ssf/episodes.hpp"

#include <algorithm>
#include <cmath>

#include "ssf/parallel.hpp"

namespace ssf {

void EpisodeConfig::validate() const {
    if (n_way < 1) throw ConfigError("episode: n_way must be >= 1");
    if (m_shot < 1 || b_query < 1) throw ConfigError("episode: m_shot and b_query must be >= 1");
    if (episode_count < 1) throw ConfigError("episode: episode_count must be >= 1");
    if (semi && pool_per_class < 1) throw ConfigError("episode: pool_per_class must be >= 1");
}

Episode sample_episode(const Dataset& ds, Split split, const EpisodeConfig& cfg, Rng& rng) {
    cfg.validate();
    const auto& classes = ds.split(split);
    int available = static_cast<int>(classes.size());
    if (available < cfg.n_way)
        throw DatasetError(std::string(split_name(split)) + " split has " +
                           std::to_string(available) + " classes, need " +
                           std::to_string(cfg.n_way));

    int per_class = cfg.m_shot + cfg.b_query + (cfg.semi ? cfg.pool_per_class : 0);
    Episode ep;
    ep.n_way = cfg.n_way;
    ep.m_shot = cfg.m_shot;
    ep.b_query = cfg.b_query;

    std::vector<int> picked = rng.sample_indices(available, cfg.n_way);
    for (int ci : picked) {
        const auto& cls = classes[static_cast<size_t>(ci)];
        int n_images = static_cast<int>(cls.images.size());
        if (n_images < per_class)
            throw DatasetError("class '" + cls.name + "' has " + std::to_string(n_images) +
                               " images, need " + std::to_string(per_class));
        std::vector<int> imgs = rng.sample_indices(n_images, per_class);
        auto item = [&](int slot) {
            EpisodeItem it;
            it.image = &cls.images[static_cast<size_t>(imgs[static_cast<size_t>(slot)])];
            it.uid = image_uid(split, ci, imgs[static_cast<size_t>(slot)]);
            return it;
        };
        std::vector<EpisodeItem> sup, que;
        for (int m = 0; m < cfg.m_shot; ++m) sup.push_back(item(m));
        for (int b = 0; b < cfg.b_query; ++b) que.push_back(item(cfg.m_shot + b));
        if (cfg.semi)
            for (int p = 0; p < cfg.pool_per_class; ++p)
                ep.unlabeled.push_back({item(cfg.m_shot + cfg.b_query + p), false});
        ep.support.push_back(std::move(sup));
        ep.query.push_back(std::move(que));
    }

    if (cfg.semi && cfg.distractors) {
        std::vector<int> outside;
        for (int ci = 0; ci < available; ++ci)
            if (std::find(picked.begin(), picked.end(), ci) == picked.end()) outside.push_back(ci);
        if (outside.empty())
            throw DatasetError(std::string(split_name(split)) +
                               " split has no classes outside the episode for distractors");
        int want = cfg.n_way * cfg.pool_per_class;
        for (int i = 0; i < want; ++i) {
            int ci = outside[static_cast<size_t>(rng.uniform_int(static_cast<int>(outside.size())))];
            const auto& cls = classes[static_cast<size_t>(ci)];
            int ii = rng.uniform_int(static_cast<int>(cls.images.size()));
            EpisodeItem it;
            it.image = &cls.images[static_cast<size_t>(ii)];
            it.uid = image_uid(split, ci, ii);
            ep.unlabeled.push_back({it, true});
        }
    }
    return ep;
}

Tensor FeatureCache::get_or_compute(int64_t uid, const std::function<Tensor()>& compute) {
    {
        std::lock_guard<std::mutex> lk(mu_);
        auto it = map_.find(uid);
        if (it != map_.end()) return it->second;
    }
    Tensor t = compute();
    std::lock_guard<std::mutex> lk(mu_);
    auto [it, inserted] = map_.emplace(uid, t);
    return it->second;
}

double SemiStats::in_class_rate() const {
    return in_class_considered == 0 ? 0.0
                                    : static_cast<double>(in_class_admitted) / in_class_considered;
}

double SemiStats::distractor_rate() const {
    return distractor_considered == 0
               ? 0.0
               : static_cast<double>(distractor_admitted) / distractor_considered;
}

SemiStats& SemiStats::operator+=(const SemiStats& o) {
    in_class_considered += o.in_class_considered;
    in_class_admitted += o.in_class_admitted;
    distractor_considered += o.distractor_considered;
    distractor_admitted += o.distractor_admitted;
    return *this;
}

Tensor extend_support_semi(const Tensor& class_rep, std::span<const DenseFeatureMap> pool,
                           const std::vector<bool>& pool_distractor_flags,
                           const ProjectionHeads& heads, SemiStats* stats) {
    if (pool.empty()) return class_rep;
    if (pool_distractor_flags.size() != pool.size())
        throw ContractError("extend_support_semi: one distractor flag per pool image required");

    std::vector<Tensor> pool_feats;
    std::vector<bool> patch_flags;
    pool_feats.reserve(pool.size());
    for (size_t i = 0; i < pool.size(); ++i) {
        pool_feats.push_back(pool[i].features);
        for (int k = 0; k < pool[i].features.dim(0); ++k)
            patch_flags.push_back(pool_distractor_flags[i]);
    }
    Tensor pool_all = vstack(pool_feats);

    // Mutual-perception test with the pool on the query side of the
    // relation matrix. Indices are constants; no gradient flows here.
    std::vector<int> admitted;
    {
        NoGradGuard ng;
        Tensor q_pool = add_rowvec(matmul(pool_all, heads.wq), heads.bq);
        Tensor k_class = add_rowvec(matmul(class_rep, heads.wk), heads.bk);
        double inv_scale = 1.0 / std::sqrt(static_cast<double>(heads.out_dim()));
        Tensor rel = scale(matmul_nt(q_pool, k_class), inv_scale);
        MutualMask mm = mutual_mask(rel);
        for (size_t i = 0; i < mm.mask.size(); ++i)
            if (mm.mask[i] != 0.0) admitted.push_back(static_cast<int>(i));
    }

    if (stats) {
        for (bool flag : patch_flags)
            (flag ? stats->distractor_considered : stats->in_class_considered) += 1;
        for (int i : admitted)
            (patch_flags[static_cast<size_t>(i)] ? stats->distractor_admitted
                                                 : stats->in_class_admitted) += 1;
    }
    if (admitted.empty()) return class_rep;

    int cols = class_rep.dim(1);
    std::vector<double> extra;
    extra.reserve(admitted.size() * static_cast<size_t>(cols));
    for (int i : admitted) {
        const double* row = pool_all.value().data() + static_cast<size_t>(i) * cols;
        extra.insert(extra.end(), row, row + cols);
    }
    std::vector<Tensor> parts{class_rep,
                              Tensor::from({static_cast<int>(admitted.size()), cols}, std::move(extra))};
    return vstack(parts);
}

EpisodeOutcome run_episode(const Episode& ep, const Model& model, bool training,
                           Rng* dropout_rng, FeatureCache* cache, bool want_losses) {
    auto features_of = [&](const EpisodeItem& it) {
        if (cache && it.uid >= 0)
            return cache->get_or_compute(
                it.uid, [&] { return model.extract(*it.image, it.uid).features; });
        return model.extract(*it.image, it.uid).features;
    };

    EpisodeOutcome out;

    std::vector<Tensor> class_reps;
    class_reps.reserve(ep.support.size());
    for (const auto& shots : ep.support) {
        std::vector<DenseFeatureMap> maps;
        maps.reserve(shots.size());
        for (const auto& it : shots) {
            DenseFeatureMap fm;
            fm.features = features_of(it);
            fm.image_id = it.uid;
            fm.grid = model.cfg.effective_grids();
            maps.push_back(std::move(fm));
        }
        class_reps.push_back(build_class_representation(maps));
    }

    if (!ep.unlabeled.empty()) {
        std::vector<DenseFeatureMap> pool;
        std::vector<bool> flags;
        pool.reserve(ep.unlabeled.size());
        for (const auto& pi : ep.unlabeled) {
            DenseFeatureMap fm;
            fm.features = features_of(pi.item);
            fm.image_id = pi.item.uid;
            fm.grid = model.cfg.effective_grids();
            pool.push_back(std::move(fm));
            flags.push_back(pi.distractor);
        }
        for (auto& rep : class_reps)
            rep = extend_support_semi(rep, pool, flags, model.heads, &out.semi);
    }

    int correct = 0, total = 0;
    for (int n = 0; n < ep.n_way; ++n) {
        for (const auto& q : ep.query[static_cast<size_t>(n)]) {
            Tensor qf = features_of(q);
            SimilarityResult res =
                classify_features(model, qf, class_reps, training, dropout_rng);
            if (res.predicted_class == n) ++correct;
            ++total;
            if (want_losses)
                out.query_losses.push_back(cross_entropy_logits(res.logits, n));
            out.labels.push_back(n);
            out.per_query.push_back(std::move(res));
        }
    }
    out.accuracy = total == 0 ? 0.0 : static_cast<double>(correct) / total;
    return out;
}

std::pair<double, double> mean_ci95(const std::vector<double>& xs) {
    if (xs.size() < 2) throw ContractError("mean_ci95: need at least 2 samples");
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size() - 1);
    double ci = 1.96 * std::sqrt(var) / std::sqrt(static_cast<double>(xs.size()));
    return {mean, ci};
}

EvalResult evaluate(const Dataset& ds, Split split, const Model& model,
                    const EpisodeConfig& cfg, uint64_t seed) {
    cfg.validate();
    if (cfg.episode_count < 2) throw ContractError("evaluate: need at least 2 episodes");

    std::vector<double> accs(static_cast<size_t>(cfg.episode_count));
    std::vector<SemiStats> stats(static_cast<size_t>(cfg.episode_count));
    FeatureCache cache;
    int chunks = std::max(kFixedChunks, thread_count());
    parallel_chunks(cfg.episode_count, chunks, [&](int, int begin, int end) {
        NoGradGuard ng;
        for (int i = begin; i < end; ++i) {
            Rng rng(Rng::mix(seed, static_cast<uint64_t>(i)));
            Episode ep = sample_episode(ds, split, cfg, rng);
            EpisodeOutcome oc = run_episode(ep, model, false, nullptr, &cache, false);
            accs[static_cast<size_t>(i)] = oc.accuracy;
            stats[static_cast<size_t>(i)] = oc.semi;
        }
    });

    EvalResult res;
    auto [mean, ci] = mean_ci95(accs);
    res.mean_acc = mean;
    res.ci95 = ci;
    res.episodes = cfg.episode_count;
    for (const auto& s : stats) res.semi += s;
    return res;
}

}  // namespace ssf
