#include "ssf/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace ssf {

void TrainConfig::validate() const {
    optim.validate();
    if (pretrain_epochs < 0 || epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (pretrain_batch < 1) throw ConfigError("train: pretrain batch must be >= 1");
    if (episodes_per_epoch < 1) throw ConfigError("train: episodes_per_epoch must be >= 1");
    if (n_way < 2) throw ConfigError("train: n_way must be >= 2");
    if (m_shot < 1 || b_query < 1) throw ConfigError("train: m_shot and b_query must be >= 1");
}

namespace {

Image augment_image(const Image& img, Rng& rng) {
    Image out = img;
    if (rng.uniform() < 0.5) out = hflip(out);
    int pad = 2;
    out = shifted_crop(out, pad, rng.uniform_int(2 * pad + 1), rng.uniform_int(2 * pad + 1));
    out = adjust_brightness(out, rng.uniform(0.8, 1.2));
    return out;
}

}  // namespace

double pretrain_backbone(const Dataset& ds, Model& model, const TrainConfig& cfg, uint64_t seed) {
    cfg.validate();
    const auto& classes = ds.split(Split::Train);
    if (classes.empty()) throw DatasetError("pretrain: train split is empty");
    int n_classes = static_cast<int>(classes.size());

    struct Sample {
        const Image* img;
        int label;
    };
    std::vector<Sample> samples;
    for (int ci = 0; ci < n_classes; ++ci)
        for (const auto& im : classes[static_cast<size_t>(ci)].images)
            samples.push_back({&im, ci});

    Rng rng(Rng::mix(seed, 0xBEEF));
    int c = model.cfg.feature_dim();
    Tensor head_w = Tensor::glorot({c, n_classes}, rng, c, n_classes);
    Tensor head_b = Tensor::zeros({n_classes});
    head_b.set_requires_grad(true);

    std::vector<Tensor> params = model.backbone.parameters();
    params.push_back(head_w);
    params.push_back(head_b);
    Optimizer opt(params, cfg.optim);

    int side = model.backbone.input_side;
    double last_epoch_acc = 0.0;
    long long step_id = 0;
    for (int epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
        opt.set_lr(opt.scheduled_lr(epoch));
        std::vector<int> order(samples.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        rng.shuffle(order);

        int correct = 0;
        for (size_t off = 0; off < order.size(); off += static_cast<size_t>(cfg.pretrain_batch)) {
            size_t take = std::min(order.size() - off, static_cast<size_t>(cfg.pretrain_batch));
            std::vector<Image> batch;
            std::vector<int> targets;
            for (size_t i = 0; i < take; ++i) {
                const Sample& s = samples[static_cast<size_t>(order[off + i])];
                batch.push_back(cfg.augment ? augment_image(*s.img, rng) : *s.img);
                targets.push_back(s.label);
            }
            Tensor emb = encode_batch(model.backbone, batch_from_images(batch, side));
            Tensor logits = add_rowvec(matmul(emb, head_w), head_b);
            Tensor loss = cross_entropy_rows(logits, targets);
            ++step_id;
            if (!all_finite(loss))
                throw TrainError("pretrain: non-finite loss at step " + std::to_string(step_id));
            backward(loss);
            opt.step();
            opt.zero_grad();

            std::vector<int> pred = rowwise_argmax(logits);
            for (size_t i = 0; i < take; ++i)
                if (pred[i] == targets[i]) ++correct;
        }
        last_epoch_acc = static_cast<double>(correct) / static_cast<double>(samples.size());
        if (cfg.verbose)
            std::printf("pretrain epoch %d/%d  train_acc %.3f\n", epoch + 1, cfg.pretrain_epochs,
                        last_epoch_acc);
    }
    return last_epoch_acc;
}

double meta_train_step(const Episode& ep, Model& model, Optimizer& opt, Rng& dropout_rng) {
    EpisodeOutcome oc = run_episode(ep, model, true, &dropout_rng, nullptr, true);
    Tensor loss = mean_scalars(oc.query_losses);
    if (!all_finite(loss)) throw TrainError("meta_train: non-finite loss");
    backward(loss);
    opt.step();
    opt.zero_grad();
    return loss.item();
}

void meta_train(const Dataset& ds, Model& model, const TrainConfig& cfg, uint64_t seed,
                std::vector<double>* loss_log) {
    cfg.validate();
    EpisodeConfig ep_cfg;
    ep_cfg.n_way = cfg.n_way;
    ep_cfg.m_shot = cfg.m_shot;
    ep_cfg.b_query = cfg.b_query;
    ep_cfg.episode_count = 1;

    Optimizer opt(model.parameters(), cfg.optim);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        opt.set_lr(opt.scheduled_lr(epoch));
        double epoch_loss = 0.0;
        for (int j = 0; j < cfg.episodes_per_epoch; ++j) {
            uint64_t stream = static_cast<uint64_t>(epoch) * 1000003ULL + static_cast<uint64_t>(j);
            Rng ep_rng(Rng::mix(seed, stream));
            Rng drop_rng(Rng::mix(seed ^ 0xD80BULL, stream));
            Episode ep = sample_episode(ds, Split::Train, ep_cfg, ep_rng);
            double loss;
            try {
                loss = meta_train_step(ep, model, opt, drop_rng);
            } catch (const TrainError& e) {
                throw TrainError(std::string(e.what()) + " (epoch " + std::to_string(epoch + 1) +
                                 ", episode " + std::to_string(j + 1) + ")");
            }
            epoch_loss += loss;
            if (loss_log) loss_log->push_back(loss);
        }
        if (cfg.verbose)
            std::printf("meta epoch %d/%d  mean_loss %.4f\n", epoch + 1, cfg.epochs,
                        epoch_loss / cfg.episodes_per_epoch);
    }
}

void train_full(const Dataset& ds, Model& model, const TrainConfig& cfg, uint64_t seed) {
    if (cfg.pretrain_epochs > 0) pretrain_backbone(ds, model, cfg, seed);
    if (cfg.epochs > 0) meta_train(ds, model, cfg, seed);
}

std::string AblationReport::table() const {
    std::ostringstream os;
    os << "variant     mean_acc   ci95     train_s\n";
    for (const auto& r : rows) {
        char line[128];
        std::snprintf(line, sizeof(line), "%-10s  %6.2f%%   %5.2f    %6.1f\n",
                      variant_name(r.variant), 100.0 * r.mean_acc, 100.0 * r.ci95,
                      r.train_seconds);
        os << line;
    }
    return os.str();
}

AblationReport run_ablation(const Dataset& ds, std::span<const Variant> variants,
                            const ModelConfig& base_cfg, const TrainConfig& train_cfg,
                            const EpisodeConfig& eval_cfg, uint64_t seed) {
    AblationReport report;
    for (Variant v : variants) {
        ModelConfig cfg = base_cfg;
        cfg.variant = v;
        Rng init_rng(Rng::mix(seed, 0x5EED));
        Model model = Model::init(cfg, init_rng);

        auto t0 = std::chrono::steady_clock::now();
        train_full(ds, model, train_cfg, seed);
        auto t1 = std::chrono::steady_clock::now();

        EvalResult ev = evaluate(ds, Split::Test, model, eval_cfg, Rng::mix(seed, 0xE7A1));
        AblationRow row;
        row.variant = v;
        row.mean_acc = ev.mean_acc;
        row.ci95 = ev.ci95;
        row.train_seconds = std::chrono::duration<double>(t1 - t0).count();
        report.rows.push_back(row);
    }
    return report;
}

}  // namespace ssf
