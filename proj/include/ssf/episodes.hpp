#pragma once

#include <functional>
#include <mutex>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ssf/dataset.hpp"
#include "ssf/model.hpp"

namespace ssf {

struct EpisodeConfig {
    int n_way = 5;
    int m_shot = 1;
    int b_query = 15;
    int episode_count = 600;
    bool semi = false;        // extend supports from an unlabeled pool
    bool distractors = false; // pool also draws from outside the episode classes
    int pool_per_class = 3;

    void validate() const;
};

struct EpisodeItem {
    const Image* image = nullptr;
    int64_t uid = -1;
};

// One N-way M-shot task. Labels are positions 0..N-1 in the class lists;
// support and query draws never share an image.
struct Episode {
    int n_way = 0, m_shot = 0, b_query = 0;
    std::vector<std::vector<EpisodeItem>> support;  // [N][M]
    std::vector<std::vector<EpisodeItem>> query;    // [N][B]
    struct PoolItem {
        EpisodeItem item;
        bool distractor = false;
    };
    std::vector<PoolItem> unlabeled;
};

Episode sample_episode(const Dataset& ds, Split split, const EpisodeConfig& cfg, Rng& rng);

// Thread-safe embedding reuse across evaluation episodes; valid only while
// the model parameters stay fixed.
class FeatureCache {
public:
    Tensor get_or_compute(int64_t uid, const std::function<Tensor()>& compute);

private:
    std::mutex mu_;
    std::unordered_map<int64_t, Tensor> map_;
};

// Unlabeled-pool admission counters, split by pool-image origin.
struct SemiStats {
    long long in_class_considered = 0;
    long long in_class_admitted = 0;
    long long distractor_considered = 0;
    long long distractor_admitted = 0;

    double in_class_rate() const;
    double distractor_rate() const;
    SemiStats& operator+=(const SemiStats& o);
};

// Grows one class representation with every pool patch that is a mutual
// nearest neighbor of its best class patch under the current projection
// heads. Raw feature rows are appended; projection happens downstream.
Tensor extend_support_semi(const Tensor& class_rep, std::span<const DenseFeatureMap> pool,
                           const std::vector<bool>& pool_distractor_flags,
                           const ProjectionHeads& heads, SemiStats* stats = nullptr);

struct EpisodeOutcome {
    std::vector<SimilarityResult> per_query;  // query-major: class 0's queries first
    std::vector<int> labels;
    double accuracy = 0.0;
    std::vector<Tensor> query_losses;  // filled when want_losses
    SemiStats semi;
};

EpisodeOutcome run_episode(const Episode& ep, const Model& model, bool training = false,
                           Rng* dropout_rng = nullptr, FeatureCache* cache = nullptr,
                           bool want_losses = false);

struct EvalResult {
    double mean_acc = 0.0;
    double ci95 = 0.0;
    int episodes = 0;
    SemiStats semi;
};

// Episode i is sampled from an RNG split on (seed, i), so results do not
// depend on scheduling order. Parallelism is capped by thread_count().
EvalResult evaluate(const Dataset& ds, Split split, const Model& model,
                    const EpisodeConfig& cfg, uint64_t seed);

// Mean and half-width of the 95% interval (1.96 * sd / sqrt(n)).
std::pair<double, double> mean_ci95(const std::vector<double>& xs);

}  // namespace ssf
