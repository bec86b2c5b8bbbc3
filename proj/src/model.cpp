#include "ssf/model.hpp"

namespace ssf {

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::Full: return "full";
        case Variant::NoSstl: return "no_sstl";
        case Variant::NoPmmUseCosine: return "no_pmm";
        case Variant::GlobalFeature: return "global";
    }
    return "?";
}

Variant variant_from_name(const std::string& name) {
    for (Variant v : {Variant::Full, Variant::NoSstl, Variant::NoPmmUseCosine,
                      Variant::GlobalFeature})
        if (name == variant_name(v)) return v;
    throw ConfigError("unknown variant '" + name + "' (full, no_sstl, no_pmm, global)");
}

GridSpec ModelConfig::effective_grids() const {
    if (variant == Variant::GlobalFeature) {
        GridSpec g;
        g.sizes = {1};
        g.expansion = 1.0;
        return g;
    }
    return grids;
}

void ModelConfig::validate() const {
    effective_grids().validate(image_side);
    if (encoder_side < 4) throw ConfigError("model: encoder side too small");
    if (channels.empty()) throw ConfigError("model: need at least one conv block");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
        throw ConfigError("model: dropout rate must be in [0, 1)");
    if (tau < 0.0) throw ConfigError("model: tau must be non-negative");
}

Model Model::init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    m.backbone = BackboneParams::init(cfg.channels, cfg.encoder_side, rng);
    m.heads = ProjectionHeads::init(cfg.feature_dim(), cfg.projection_dim(), rng);
    return m;
}

std::vector<Tensor> Model::parameters() const {
    std::vector<Tensor> ps = backbone.parameters();
    for (const Tensor& t : heads.parameters()) ps.push_back(t);
    return ps;
}

DenseFeatureMap Model::extract(const Image& img, int64_t image_id) const {
    return extract_dense_features(img, cfg.effective_grids(), backbone, image_id);
}

namespace {

// Patch matching against raw projected support stacks (no alignment). The
// similarity matrix is K x M_n*K, so the score is assembled directly.
SimilarityResult classify_no_sstl(const ModelConfig& cfg, const Projected& proj) {
    SimilarityResult res;
    Tensor nq = l2_normalize_rows(proj.v_q);
    std::vector<Tensor> per_class;
    for (const Tensor& v_sn : proj.v_s) {
        Tensor d = clamp_unit(matmul_nt(nq, l2_normalize_rows(v_sn)));
        per_class.push_back(sum(rowwise_max(d)));
        res.patch_similarity.push_back(std::move(d));
    }
    res.scores = stack_scalars(per_class);
    res.logits = scale(res.scores, 1.0 / cfg.temperature());
    res.predicted_class = argmax_index(res.scores.value());
    return res;
}

}  // namespace

SimilarityResult classify_features(const Model& model, const Tensor& query_features,
                                   std::span<const Tensor> class_reps, bool training,
                                   Rng* dropout_rng) {
    const ModelConfig& cfg = model.cfg;
    Projected proj = project(query_features, class_reps, model.heads);
    if (cfg.variant == Variant::NoSstl) return classify_no_sstl(cfg, proj);

    RelationSet rel = relation_matrices(proj.q_q, proj.k_s);
    MutualMask mask = mutual_mask(rel.concat);
    std::vector<AlignedPrototype> protos =
        attend_and_align(rel, mask, proj.v_s, cfg.mask_mode, cfg.dropout_rate, training,
                         dropout_rng);

    if (cfg.variant == Variant::NoPmmUseCosine) {
        SimilarityResult res;
        res.scores = cosine_classifier_scores(proj.v_q, protos);
        res.logits = scale(res.scores, 1.0 / cfg.temperature());
        res.predicted_class = argmax_index(res.scores.value());
        return res;
    }
    return classify_query(proj.v_q, protos, cfg.temperature());
}

}  // namespace ssf
