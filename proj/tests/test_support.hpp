#pragma once

// Shared micro-scale fixtures for the episode/training/checkpoint tests.

#include "ssf/dataset.hpp"
#include "ssf/model.hpp"
#include "ssf/training.hpp"

namespace ssf::testing {

inline SyntheticSpec tiny_spec() {
    SyntheticSpec s;
    s.side = 16;
    s.glyph_side = 6;
    s.train_classes = 6;
    s.val_classes = 2;
    s.test_classes = 6;
    s.images_per_class = 12;
    s.noise_amplitude = 0.35;
    s.distractor_pool = 4;
    s.distractor_intensity = 0.6;
    return s;
}

inline ModelConfig tiny_model_config() {
    ModelConfig cfg;
    cfg.grids.sizes = {2};
    cfg.grids.expansion = 2.0;
    cfg.image_side = 16;
    cfg.encoder_side = 8;
    cfg.channels = {4, 8};
    cfg.dropout_rate = 0.1;
    return cfg;
}

inline Model tiny_model(uint64_t seed = 5) {
    Rng rng(seed);
    return Model::init(tiny_model_config(), rng);
}

inline TrainConfig micro_train_config() {
    TrainConfig tc;
    tc.optim.kind = OptimizerKind::Adam;
    tc.optim.lr = 2e-3;
    tc.pretrain_epochs = 2;
    tc.pretrain_batch = 16;
    tc.epochs = 2;
    tc.episodes_per_epoch = 30;
    tc.n_way = 4;
    tc.m_shot = 1;
    tc.b_query = 3;
    return tc;
}

inline Model micro_trained_model(const Dataset& ds, uint64_t seed = 5) {
    Model model = tiny_model(seed);
    train_full(ds, model, micro_train_config(), seed);
    return model;
}

}  // namespace ssf::testing
