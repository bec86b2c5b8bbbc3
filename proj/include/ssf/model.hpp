#pragma once

#include <span>
#include <string>
#include <vector>

#include "ssf/backbone.hpp"
#include "ssf/pmm.hpp"
#include "ssf/sstl.hpp"

namespace ssf {

// Pipeline variants exercised by the ablation study.
//   Full:           patch pyramid -> sparse cross attention -> patch matching
//   NoSstl:         patch matching directly on projected support values
//   NoPmmUseCosine: attention alignment, then position-wise cosine scores
//   GlobalFeature:  single whole-image embedding (K = 1), rest unchanged
enum class Variant { Full = 0, NoSstl = 1, NoPmmUseCosine = 2, GlobalFeature = 3 };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct ModelConfig {
    GridSpec grids;
    int image_side = 32;
    int encoder_side = 16;
    std::vector<int> channels = {16, 32, 64};
    int proj_dim = 0;        // 0 -> feature dim
    double tau = 0.0;        // 0 -> K / 10
    double dropout_rate = 0.1;
    MaskMode mask_mode = MaskMode::PreSoftmax;
    Variant variant = Variant::Full;

    // GlobalFeature collapses the pyramid to one whole-image crop.
    GridSpec effective_grids() const;
    int patch_count() const { return effective_grids().patch_count(); }
    int feature_dim() const { return channels.back(); }
    int projection_dim() const { return proj_dim > 0 ? proj_dim : feature_dim(); }
    double temperature() const { return tau > 0.0 ? tau : patch_count() / 10.0; }
    void validate() const;
};

struct Model {
    ModelConfig cfg;
    BackboneParams backbone;
    ProjectionHeads heads;

    static Model init(const ModelConfig& cfg, Rng& rng);
    std::vector<Tensor> parameters() const;

    DenseFeatureMap extract(const Image& img, int64_t image_id = -1) const;
};

// Classifies one query feature map against raw (unprojected) class
// representations, honoring the configured variant. Pass a seeded RNG for
// attention dropout when training.
SimilarityResult classify_features(const Model& model, const Tensor& query_features,
                                   std::span<const Tensor> class_reps, bool training = false,
                                   Rng* dropout_rng = nullptr);

}  // namespace ssf
