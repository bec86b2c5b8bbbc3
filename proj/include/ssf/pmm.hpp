#pragma once

#include <span>
#include <vector>

#include "ssf/sstl.hpp"
#include "ssf/tensor.hpp"

namespace ssf {

// Outcome of matching one query against the N aligned class prototypes.
struct SimilarityResult {
    std::vector<Tensor> patch_similarity;  // per class, entries in [-1, 1]
    Tensor scores;                         // P, [N]
    Tensor logits;                         // P / tau, [N]
    int predicted_class = 0;               // argmax of P, ties to lowest index
};

// Cosine similarity between every query patch (rows) and every prototype
// patch (columns). Zero rows contribute cosine 0.
Tensor patch_similarity_matrix(const Tensor& v_q, const AlignedPrototype& proto);

// Sum over query patches of the best-matching prototype patch: a scalar in
// [-K, K]. Requires the square matrix produced by patch_similarity_matrix.
Tensor patch_to_class_score(const Tensor& similarity);

// Full patch-matching classification of one query.
SimilarityResult classify_query(const Tensor& v_q, std::span<const AlignedPrototype> prototypes,
                                double tau);

// Position-wise spatial cosine baseline: score_n = sum_i cos(v_q[i], proto_n[i]).
// Unlike patch matching it is not invariant to prototype row order.
Tensor cosine_classifier_scores(const Tensor& v_q, std::span<const AlignedPrototype> prototypes);

int argmax_index(const std::vector<double>& v);

}  // namespace ssf
