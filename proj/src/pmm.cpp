#include "ssf/pmm.hpp"

namespace ssf {

int argmax_index(const std::vector<double>& v) {
    if (v.empty()) throw ContractError("argmax_index: empty vector");
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i)
        if (v[static_cast<size_t>(i)] > v[static_cast<size_t>(best)]) best = i;
    return best;
}

Tensor patch_similarity_matrix(const Tensor& v_q, const AlignedPrototype& proto) {
    if (v_q.rank() != 2 || proto.prototype.rank() != 2 ||
        v_q.shape() != proto.prototype.shape())
        throw ShapeError("patch_similarity_matrix: query " + shape_str(v_q.shape()) +
                         " vs prototype " + shape_str(proto.prototype.shape()));
    return clamp_unit(matmul_nt(l2_normalize_rows(v_q), l2_normalize_rows(proto.prototype)));
}

Tensor patch_to_class_score(const Tensor& similarity) {
    if (similarity.rank() != 2 || similarity.dim(0) != similarity.dim(1))
        throw ShapeError("patch_to_class_score: need a square matrix, got " +
                         shape_str(similarity.shape()));
    return sum(rowwise_max(similarity));
}

SimilarityResult classify_query(const Tensor& v_q, std::span<const AlignedPrototype> prototypes,
                                double tau) {
    if (prototypes.empty()) throw ContractError("classify_query: no prototypes");
    if (tau <= 0.0) throw ConfigError("classify_query: tau must be positive");
    SimilarityResult res;
    std::vector<Tensor> per_class;
    per_class.reserve(prototypes.size());
    for (const auto& proto : prototypes) {
        Tensor d = patch_similarity_matrix(v_q, proto);
        per_class.push_back(patch_to_class_score(d));
        res.patch_similarity.push_back(std::move(d));
    }
    res.scores = stack_scalars(per_class);
    res.logits = scale(res.scores, 1.0 / tau);
    res.predicted_class = argmax_index(res.scores.value());
    return res;
}

Tensor cosine_classifier_scores(const Tensor& v_q, std::span<const AlignedPrototype> prototypes) {
    if (prototypes.empty()) throw ContractError("cosine_classifier_scores: no prototypes");
    Tensor nq = l2_normalize_rows(v_q);
    std::vector<Tensor> per_class;
    per_class.reserve(prototypes.size());
    for (const auto& proto : prototypes) {
        if (proto.prototype.shape() != v_q.shape())
            throw ShapeError("cosine_classifier_scores: query " + shape_str(v_q.shape()) +
                             " vs prototype " + shape_str(proto.prototype.shape()));
        // positionwise: sum of diag of the cosine matrix
        per_class.push_back(sum(mul(nq, l2_normalize_rows(proto.prototype))));
    }
    return stack_scalars(per_class);
}

}  // namespace ssf
