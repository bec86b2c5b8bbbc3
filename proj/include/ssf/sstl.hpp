#pragma once

#include <span>
#include <vector>

#include "ssf/rng.hpp"
#include "ssf/tensor.hpp"

namespace ssf {

// How the task-relevance mask enters the attention map.
//   PreSoftmax: zero masked rows of the relation matrix before the softmax;
//               suppressed rows end up with uniform attention.
//   HardZero:   softmax first, then zero the attention rows of suppressed
//               patches, so they contribute nothing downstream.
enum class MaskMode { PreSoftmax = 0, HardZero = 1 };

// Linear projection heads mapping C-dim patch embeddings to C'-dim keys,
// queries and values. The value head is shared by the query and support
// paths.
struct ProjectionHeads {
    Tensor wk, bk;  // [C x C'], [C']
    Tensor wq, bq;
    Tensor wv, bv;

    int in_dim() const { return wk.dim(0); }
    int out_dim() const { return wk.dim(1); }
    std::vector<Tensor> parameters() const { return {wk, bk, wq, bq, wv, bv}; }

    static ProjectionHeads init(int c, int c_prime, Rng& rng);
    static ProjectionHeads identity(int c);  // for tests: outputs equal inputs
};

// Projections of one query feature map and the per-class support stacks.
struct Projected {
    Tensor q_q;                 // [K x C']
    Tensor v_q;                 // [K x C']
    std::vector<Tensor> k_s;    // per class [M_n*K x C']
    std::vector<Tensor> v_s;    // per class [M_n*K x C']
};

Projected project(const Tensor& query_features, std::span<const Tensor> class_reps,
                  const ProjectionHeads& heads);

// Scaled dot-product relation matrices R_n = q_q k_{S_n}^T / sqrt(C') plus
// their column-wise concatenation over classes (detached; it only feeds the
// non-differentiable mask step).
struct RelationSet {
    std::vector<Tensor> per_class;  // [K x M_n*K]
    Tensor concat;                  // [K x sum(M_n*K)], no gradient path
};

RelationSet relation_matrices(const Tensor& q_q, std::span<const Tensor> k_s);

// Mutual-nearest-neighbor selection over the whole support set.
// nn_of_query[i] is the best support column for query row i, back_pointer[i]
// the best query row for that column, and mask[i] = 1 exactly when the two
// point at each other. Ties resolve to the lowest index.
struct MutualMask {
    std::vector<int> nn_of_query;
    std::vector<int> back_pointer;
    std::vector<double> mask;

    int selected_count() const;
};

MutualMask mutual_mask(const Tensor& relation_concat);

// Query-aligned class prototype and the attention map that produced it.
struct AlignedPrototype {
    Tensor prototype;  // [K x C']
    Tensor attention;  // [K x M_n*K]
};

// Applies the mask to each per-class relation matrix, normalizes rows with a
// softmax (plus dropout when training) and mixes the support values into a
// K x C' prototype per class.
std::vector<AlignedPrototype> attend_and_align(const RelationSet& relations,
                                               const MutualMask& mask,
                                               std::span<const Tensor> v_s, MaskMode mode,
                                               double dropout_rate, bool training, Rng* rng);

}  // namespace ssf
