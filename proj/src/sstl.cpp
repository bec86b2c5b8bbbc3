#include "ssf/sstl.hpp"

#include <cmath>

namespace ssf {

ProjectionHeads ProjectionHeads::init(int c, int c_prime, Rng& rng) {
    if (c < 1 || c_prime < 1) throw ConfigError("projection heads: dimensions must be positive");
    ProjectionHeads h;
    auto linear = [&](Tensor& w, Tensor& b) {
        w = Tensor::glorot({c, c_prime}, rng, c, c_prime);
        b = Tensor::zeros({c_prime});
        b.set_requires_grad(true);
    };
    linear(h.wk, h.bk);
    linear(h.wq, h.bq);
    linear(h.wv, h.bv);
    return h;
}

ProjectionHeads ProjectionHeads::identity(int c) {
    ProjectionHeads h;
    std::vector<double> eye(static_cast<size_t>(c) * c, 0.0);
    for (int i = 0; i < c; ++i) eye[static_cast<size_t>(i) * c + i] = 1.0;
    for (Tensor* w : {&h.wk, &h.wq, &h.wv}) *w = Tensor::from({c, c}, eye);
    for (Tensor* b : {&h.bk, &h.bq, &h.bv}) *b = Tensor::zeros({c});
    return h;
}

namespace {

Tensor apply_linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowvec(matmul(x, w), b);
}

}  // namespace

Projected project(const Tensor& query_features, std::span<const Tensor> class_reps,
                  const ProjectionHeads& heads) {
    int c = heads.in_dim();
    if (query_features.rank() != 2 || query_features.dim(1) != c)
        throw ContractError("project: query features must be [K x " + std::to_string(c) +
                            "], got " + shape_str(query_features.shape()));
    Projected out;
    out.q_q = apply_linear(query_features, heads.wq, heads.bq);
    out.v_q = apply_linear(query_features, heads.wv, heads.bv);
    out.k_s.reserve(class_reps.size());
    out.v_s.reserve(class_reps.size());
    for (const Tensor& rep : class_reps) {
        if (rep.rank() != 2 || rep.dim(1) != c)
            throw ContractError("project: class representation must be [MK x " +
                                std::to_string(c) + "], got " + shape_str(rep.shape()));
        out.k_s.push_back(apply_linear(rep, heads.wk, heads.bk));
        out.v_s.push_back(apply_linear(rep, heads.wv, heads.bv));
    }
    return out;
}

RelationSet relation_matrices(const Tensor& q_q, std::span<const Tensor> k_s) {
    if (k_s.empty()) throw ContractError("relation_matrices: no support classes");
    int cp = q_q.dim(1);
    double inv_scale = 1.0 / std::sqrt(static_cast<double>(cp));
    RelationSet rs;
    rs.per_class.reserve(k_s.size());
    std::vector<Tensor> detached;
    detached.reserve(k_s.size());
    for (const Tensor& k : k_s) {
        if (k.dim(1) != cp)
            throw ShapeError("relation_matrices: projection width mismatch " +
                             shape_str(q_q.shape()) + " vs " + shape_str(k.shape()));
        Tensor r = scale(matmul_nt(q_q, k), inv_scale);
        detached.push_back(r.detach());
        rs.per_class.push_back(std::move(r));
    }
    rs.concat = hstack(detached);
    return rs;
}

int MutualMask::selected_count() const {
    int n = 0;
    for (double m : mask) n += m != 0.0 ? 1 : 0;
    return n;
}

MutualMask mutual_mask(const Tensor& relation_concat) {
    if (relation_concat.rank() != 2 || relation_concat.dim(1) < 1)
        throw ShapeError("mutual_mask: need a non-empty relation matrix, got " +
                         shape_str(relation_concat.shape()));
    int k = relation_concat.dim(0);
    int cols = relation_concat.dim(1);
    const auto& r = relation_concat.value();

    MutualMask mm;
    mm.nn_of_query = rowwise_argmax(relation_concat);
    mm.back_pointer.resize(static_cast<size_t>(k));
    mm.mask.resize(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        int j = mm.nn_of_query[static_cast<size_t>(i)];
        int best = 0;
        for (int row = 1; row < k; ++row)
            if (r[static_cast<size_t>(row) * cols + j] > r[static_cast<size_t>(best) * cols + j])
                best = row;
        mm.back_pointer[static_cast<size_t>(i)] = best;
        mm.mask[static_cast<size_t>(i)] = best == i ? 1.0 : 0.0;
    }
    return mm;
}

std::vector<AlignedPrototype> attend_and_align(const RelationSet& relations,
                                               const MutualMask& mask,
                                               std::span<const Tensor> v_s, MaskMode mode,
                                               double dropout_rate, bool training, Rng* rng) {
    if (relations.per_class.size() != v_s.size())
        throw ContractError("attend_and_align: relation/value class count mismatch");
    if (training && dropout_rate > 0.0 && rng == nullptr)
        throw ContractError("attend_and_align: training dropout needs an RNG");

    std::vector<AlignedPrototype> out;
    out.reserve(v_s.size());
    for (size_t n = 0; n < v_s.size(); ++n) {
        const Tensor& r = relations.per_class[n];
        if (r.dim(0) != static_cast<int>(mask.mask.size()))
            throw ContractError("attend_and_align: mask length " +
                                std::to_string(mask.mask.size()) + " vs " +
                                std::to_string(r.dim(0)) + " relation rows");
        Tensor attn;
        if (mode == MaskMode::PreSoftmax) {
            // Masked rows become all-zero and the softmax spreads them
            // uniformly over the support patches.
            attn = softmax_lastdim(row_scale(r, mask.mask));
        } else {
            attn = row_scale(softmax_lastdim(r), mask.mask);
        }
        if (training && dropout_rate > 0.0) attn = dropout(attn, dropout_rate, *rng, true);
        AlignedPrototype ap;
        ap.attention = attn;
        ap.prototype = matmul(attn, v_s[n]);
        out.push_back(std::move(ap));
    }
    return out;
}

}  // namespace ssf
