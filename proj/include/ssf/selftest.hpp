#pragma once

#include <string>
#include <vector>

#include "ssf/episodes.hpp"
#include "ssf/model.hpp"

namespace ssf {

struct SelfTestResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

// Fast gradient-check and oracle suite: mutual-NN selection against a
// brute-force reference, finite-difference checks for every differentiable
// primitive and for the episode loss on a tiny task, and the exact
// attention/score invariants. Prints one line per check when verbose.
std::vector<SelfTestResult> run_selftest(bool verbose);

// Helpers shared with the gradient-check harness: a minimal model
// (2 blocks, K = 4, C = C' = 8), a 2-way 1-shot episode over random images
// backed by `storage`, structural parameter substitution, and the
// evaluation-mode episode loss.
Model tiny_gradcheck_model(Rng& rng);
Episode tiny_episode(std::vector<Image>& storage, Rng& rng);
Model model_with_param(const Model& base, size_t index, const Tensor& replacement);
Tensor episode_eval_loss(const Model& model, const Episode& ep);

}  // namespace ssf
