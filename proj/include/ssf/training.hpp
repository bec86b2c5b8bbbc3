#pragma once

#include <span>
#include <string>
#include <vector>

#include "ssf/episodes.hpp"
#include "ssf/model.hpp"
#include "ssf/optim.hpp"

namespace ssf {

struct TrainConfig {
    OptimConfig optim;
    int pretrain_epochs = 8;
    int pretrain_batch = 32;
    int epochs = 6;               // meta-training epochs
    int episodes_per_epoch = 80;
    int n_way = 5;
    int m_shot = 1;
    int b_query = 5;              // queries per class during meta-training
    bool augment = true;          // pretrain-stage augmentation
    bool verbose = false;

    void validate() const;
};

// Conventional classification warm-up of the encoder on whole images of the
// train split. The linear head is discarded; returns final-epoch training
// accuracy.
double pretrain_backbone(const Dataset& ds, Model& model, const TrainConfig& cfg, uint64_t seed);

// One episodic optimization step: mean query cross entropy on softmax(P/tau),
// a single optimizer update over backbone and heads jointly. Returns the
// loss value.
double meta_train_step(const Episode& ep, Model& model, Optimizer& opt, Rng& dropout_rng);

// Episodic fine-tuning on train-split tasks. Episode RNG streams are split
// per (epoch, index); same seed reproduces the same parameters.
void meta_train(const Dataset& ds, Model& model, const TrainConfig& cfg, uint64_t seed,
                std::vector<double>* loss_log = nullptr);

// Pretrain + meta-train under one budget.
void train_full(const Dataset& ds, Model& model, const TrainConfig& cfg, uint64_t seed);

struct AblationRow {
    Variant variant;
    double mean_acc = 0.0;
    double ci95 = 0.0;
    double train_seconds = 0.0;
};

struct AblationReport {
    std::vector<AblationRow> rows;
    std::string table() const;  // aligned text table, rows in input order
};

// Trains and evaluates each variant under identical seeds and budgets.
AblationReport run_ablation(const Dataset& ds, std::span<const Variant> variants,
                            const ModelConfig& base_cfg, const TrainConfig& train_cfg,
                            const EpisodeConfig& eval_cfg, uint64_t seed);

}  // namespace ssf
