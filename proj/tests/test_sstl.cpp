#include <doctest.h>

#include <cmath>

#include "ssf/sstl.hpp"

using namespace ssf;

namespace {

// Independent double-loop reference for the mutual-NN selection.
struct OracleOut {
    std::vector<int> nq, ns, m;
};

OracleOut oracle_mutual(const std::vector<double>& r, int rows, int cols) {
    OracleOut o;
    o.nq.resize(rows);
    o.ns.resize(rows);
    o.m.resize(rows);
    for (int i = 0; i < rows; ++i) {
        int bc = 0;
        for (int j = 0; j < cols; ++j)
            if (r[i * cols + j] > r[i * cols + bc]) bc = j;
        o.nq[i] = bc;
        int br = 0;
        for (int k = 0; k < rows; ++k)
            if (r[k * cols + bc] > r[br * cols + bc]) br = k;
        o.ns[i] = br;
        o.m[i] = br == i ? 1 : 0;
    }
    return o;
}

}  // namespace

TEST_CASE("projection heads: identity, zero and shapes") {
    Rng rng(1);
    int k = 13, c = 64, mk = 5;
    Tensor q = Tensor::uniform({k, c}, rng, -1, 1);
    std::vector<Tensor> reps = {Tensor::uniform({mk, c}, rng, -1, 1),
                                Tensor::uniform({2 * mk, c}, rng, -1, 1)};

    ProjectionHeads id = ProjectionHeads::identity(c);
    Projected p = project(q, reps, id);
    CHECK(p.q_q.value() == q.value());
    CHECK(p.v_q.value() == q.value());
    CHECK(p.k_s[0].value() == reps[0].value());
    CHECK(p.v_s[1].value() == reps[1].value());

    ProjectionHeads zero = ProjectionHeads::identity(c);
    for (Tensor* w : {&zero.wk, &zero.wq, &zero.wv})
        *w = Tensor::zeros({c, c});
    Projected pz = project(q, reps, zero);
    for (double v : pz.q_q.value()) CHECK(v == 0.0);
    for (double v : pz.k_s[0].value()) CHECK(v == 0.0);

    ProjectionHeads h = ProjectionHeads::init(c, c, rng);
    Projected pr = project(q, reps, h);
    CHECK(pr.q_q.shape() == Shape{13, 64});
    CHECK(pr.v_q.shape() == Shape{13, 64});
    CHECK(pr.k_s[0].shape() == Shape{5, 64});
    CHECK(pr.v_s[1].shape() == Shape{10, 64});
    CHECK(h.parameters().size() == 6);
}

TEST_CASE("relation matrices: scaled dot products and concatenation") {
    Tensor q = Tensor::from({1, 2}, {1, 0});
    std::vector<Tensor> ks = {Tensor::from({2, 2}, {0, 1, 1, 0})};
    RelationSet rs = relation_matrices(q, ks);
    CHECK(rs.per_class[0].at({0, 0}) == doctest::Approx(0.0));
    CHECK(rs.per_class[0].at({0, 1}) == doctest::Approx(0.70711).epsilon(1e-4));

    // identical support rows make every column of R identical
    Rng rng(2);
    Tensor qq = Tensor::uniform({4, 8}, rng, -1, 1);
    std::vector<double> row(8);
    for (auto& v : row) v = rng.uniform(-1, 1);
    std::vector<double> rep;
    for (int i = 0; i < 6; ++i) rep.insert(rep.end(), row.begin(), row.end());
    std::vector<Tensor> ks2 = {Tensor::from({6, 8}, rep)};
    RelationSet rs2 = relation_matrices(qq, ks2);
    for (int i = 0; i < 4; ++i)
        for (int j = 1; j < 6; ++j)
            CHECK(rs2.per_class[0].at({i, j}) == doctest::Approx(rs2.per_class[0].at({i, 0})));

    // concatenation across classes: N=2, MK=4 each, K=13 -> 13x8
    Tensor q13 = Tensor::uniform({13, 8}, rng, -1, 1);
    std::vector<Tensor> ks3 = {Tensor::uniform({4, 8}, rng, -1, 1),
                               Tensor::uniform({4, 8}, rng, -1, 1)};
    RelationSet rs3 = relation_matrices(q13, ks3);
    CHECK(rs3.concat.shape() == Shape{13, 8});
    CHECK_FALSE(rs3.concat.requires_grad());
}

TEST_CASE("mutual mask worked examples") {
    {
        Tensor r = Tensor::from({2, 3}, {0.9, 0.1, 0.2, 0.3, 0.8, 0.4});
        MutualMask mm = mutual_mask(r);
        CHECK(mm.nn_of_query == std::vector<int>{0, 1});
        CHECK(mm.back_pointer == std::vector<int>{0, 1});
        CHECK(mm.mask == std::vector<double>{1, 1});
    }
    {
        Tensor r = Tensor::from({2, 2}, {0.9, 0.1, 0.95, 0.2});
        MutualMask mm = mutual_mask(r);
        CHECK(mm.nn_of_query == std::vector<int>{0, 0});
        CHECK(mm.mask == std::vector<double>{0, 1});
    }
    {
        Tensor r = Tensor::from({1, 4}, {-3, -1, -2, -5});
        MutualMask mm = mutual_mask(r);
        CHECK(mm.mask == std::vector<double>{1});  // single query patch is always mutual
    }
}

TEST_CASE("mutual mask equals brute-force oracle on random matrices") {
    Rng rng(77);
    for (int it = 0; it < 300; ++it) {
        int k = 1 + rng.uniform_int(8);
        int n = 1 + rng.uniform_int(4);
        int m = 1 + rng.uniform_int(2);
        int cols = n * m * k;
        Tensor r = Tensor::uniform({k, cols}, rng, -1, 1);
        MutualMask mm = mutual_mask(r);
        OracleOut o = oracle_mutual(r.value(), k, cols);
        CHECK(mm.nn_of_query == o.nq);
        CHECK(mm.back_pointer == o.ns);
        for (int i = 0; i < k; ++i) CHECK(static_cast<int>(mm.mask[i]) == o.m[i]);

        // cardinality: each selected patch owns a distinct support column
        int selected = mm.selected_count();
        CHECK(selected <= std::min(k, cols));

        // bidirectionality restated
        for (int i = 0; i < k; ++i)
            if (mm.mask[i] != 0.0) {
                int col = mm.nn_of_query[i];
                int best = 0;
                const auto& rv = r.value();
                for (int row = 1; row < k; ++row)
                    if (rv[row * cols + col] > rv[best * cols + col]) best = row;
                CHECK(best == i);
            }

        // invariance under positive rescaling
        MutualMask mm2 = mutual_mask(scale(r, rng.uniform(0.1, 10.0)));
        CHECK(mm2.mask == mm.mask);
        CHECK(mm2.nn_of_query == mm.nn_of_query);
        CHECK(mm2.back_pointer == mm.back_pointer);
    }
}

TEST_CASE("attend_and_align worked examples") {
    // single support patch: softmax over one element is 1
    {
        RelationSet rs;
        rs.per_class.push_back(Tensor::from({2, 1}, {0.4, -0.3}));
        rs.concat = rs.per_class[0].detach();
        MutualMask mm = mutual_mask(rs.concat);
        std::vector<Tensor> vs = {Tensor::from({1, 3}, {1, 2, 3})};
        auto protos = attend_and_align(rs, mm, vs, MaskMode::PreSoftmax, 0.0, false, nullptr);
        REQUIRE(protos.size() == 1);
        for (int i = 0; i < 2; ++i) {
            CHECK(protos[0].prototype.at({i, 0}) == doctest::Approx(1));
            CHECK(protos[0].prototype.at({i, 2}) == doctest::Approx(3));
            CHECK(protos[0].attention.at({i, 0}) == doctest::Approx(1));
        }
    }
    // suppressed row turns into uniform attention over the support patches
    {
        RelationSet rs;
        rs.per_class.push_back(Tensor::from({1, 2}, {5, 1}));
        rs.concat = rs.per_class[0].detach();
        MutualMask mm;
        mm.nn_of_query = {0};
        mm.back_pointer = {0};
        mm.mask = {0.0};
        std::vector<Tensor> vs = {Tensor::from({2, 2}, {2, 0, 0, 4})};
        auto protos = attend_and_align(rs, mm, vs, MaskMode::PreSoftmax, 0.0, false, nullptr);
        CHECK(protos[0].attention.at({0, 0}) == doctest::Approx(0.5));
        CHECK(protos[0].attention.at({0, 1}) == doctest::Approx(0.5));
        CHECK(protos[0].prototype.at({0, 0}) == doctest::Approx(1.0));  // mean of value rows
        CHECK(protos[0].prototype.at({0, 1}) == doctest::Approx(2.0));

        // hard-zero mode suppresses the row entirely
        auto hz = attend_and_align(rs, mm, vs, MaskMode::HardZero, 0.0, false, nullptr);
        CHECK(hz[0].prototype.at({0, 0}) == 0.0);
        CHECK(hz[0].prototype.at({0, 1}) == 0.0);
    }
    // sharply peaked relations align the prototype with the query values
    {
        int k = 5, c = 6;
        // orthogonal patch features with norms well above 1 keep the scaled
        // softmax saturated on the diagonal
        std::vector<double> fd(static_cast<size_t>(k) * c, 0.0);
        for (int i = 0; i < k; ++i) fd[static_cast<size_t>(i) * c + i] = 1.5 + 0.1 * i;
        Tensor feats = Tensor::from({k, c}, fd);
        ProjectionHeads id = ProjectionHeads::identity(c);
        std::vector<Tensor> reps = {feats};
        Projected p = project(feats, reps, id);
        RelationSet rs = relation_matrices(p.q_q, p.k_s);
        rs.per_class[0] = scale(rs.per_class[0], 10.0);
        rs.concat = rs.per_class[0].detach();
        MutualMask mm = mutual_mask(rs.concat);
        for (double m : mm.mask) CHECK(m == 1.0);  // every patch is its own mutual NN
        auto protos = attend_and_align(rs, mm, p.v_s, MaskMode::PreSoftmax, 0.0, false, nullptr);
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < c; ++j)
                CHECK(protos[0].prototype.at({i, j}) ==
                      doctest::Approx(feats.at({i, j})).epsilon(1e-2));
    }
}

TEST_CASE("attention rows sum to one in evaluation mode") {
    Rng rng(21);
    for (int it = 0; it < 50; ++it) {
        int k = 1 + rng.uniform_int(6);
        int mk = 1 + rng.uniform_int(9);
        Tensor q_q = Tensor::uniform({k, 4}, rng, -1, 1);
        std::vector<Tensor> ks = {Tensor::uniform({mk, 4}, rng, -1, 1)};
        std::vector<Tensor> vs = {Tensor::uniform({mk, 4}, rng, -1, 1)};
        RelationSet rs = relation_matrices(q_q, ks);
        MutualMask mm = mutual_mask(rs.concat);
        auto protos = attend_and_align(rs, mm, vs, MaskMode::PreSoftmax, 0.0, false, nullptr);
        const auto& a = protos[0].attention.value();
        for (int r = 0; r < k; ++r) {
            double s = 0.0;
            for (int j = 0; j < mk; ++j) s += a[static_cast<size_t>(r) * mk + j];
            CHECK(std::abs(s - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("within-class support permutation leaves the prototype unchanged") {
    Rng rng(31);
    for (int it = 0; it < 30; ++it) {
        int k = 2 + rng.uniform_int(4);
        int mk = 2 + rng.uniform_int(6);
        Tensor q_q = Tensor::uniform({k, 5}, rng, -1, 1);
        Tensor ks = Tensor::uniform({mk, 5}, rng, -1, 1);
        Tensor vs = Tensor::uniform({mk, 5}, rng, -1, 1);

        std::vector<int> perm(static_cast<size_t>(mk));
        for (int i = 0; i < mk; ++i) perm[static_cast<size_t>(i)] = i;
        rng.shuffle(perm);
        auto permute_rows = [&](const Tensor& t) {
            std::vector<double> out(t.value().size());
            for (int i = 0; i < mk; ++i)
                for (int j = 0; j < 5; ++j)
                    out[static_cast<size_t>(i) * 5 + j] = t.at({perm[static_cast<size_t>(i)], j});
            return Tensor::from(t.shape(), out);
        };

        std::vector<Tensor> ks1 = {ks}, vs1 = {vs};
        std::vector<Tensor> ks2 = {permute_rows(ks)}, vs2 = {permute_rows(vs)};

        RelationSet r1 = relation_matrices(q_q, ks1);
        RelationSet r2 = relation_matrices(q_q, ks2);
        auto p1 = attend_and_align(r1, mutual_mask(r1.concat), vs1, MaskMode::PreSoftmax, 0.0,
                                   false, nullptr);
        auto p2 = attend_and_align(r2, mutual_mask(r2.concat), vs2, MaskMode::PreSoftmax, 0.0,
                                   false, nullptr);
        for (size_t i = 0; i < p1[0].prototype.value().size(); ++i)
            CHECK(p1[0].prototype.value()[i] ==
                  doctest::Approx(p2[0].prototype.value()[i]).epsilon(1e-12));
    }
}

TEST_CASE("gradients flow to all three heads through alignment") {
    Rng rng(41);
    int k = 3, mk = 4, c = 5;
    Tensor qf = Tensor::uniform({k, c}, rng, -1, 1);
    Tensor rep = Tensor::uniform({mk, c}, rng, -1, 1);
    ProjectionHeads heads = ProjectionHeads::init(c, c, rng);

    auto loss_with = [&](const ProjectionHeads& h) {
        std::vector<Tensor> reps = {rep};
        Projected p = project(qf, reps, h);
        RelationSet rs = relation_matrices(p.q_q, p.k_s);
        MutualMask mm = mutual_mask(rs.concat);
        auto protos = attend_and_align(rs, mm, p.v_s, MaskMode::PreSoftmax, 0.0, false, nullptr);
        return sum(mul(protos[0].prototype, protos[0].prototype));
    };

    Tensor* slots[3] = {&heads.wk, &heads.wq, &heads.wv};
    for (Tensor* slot : slots) {
        Tensor saved = *slot;
        auto f = [&](const Tensor& t) {
            ProjectionHeads h = heads;
            if (slot == &heads.wk) h.wk = t;
            if (slot == &heads.wq) h.wq = t;
            if (slot == &heads.wv) h.wv = t;
            return loss_with(h);
        };
        CHECK(finite_diff_check(f, saved.detach(), 1e-5) < 1e-4);
    }
}

TEST_CASE("training dropout perturbs attention reproducibly") {
    Rng rng(51);
    Tensor q_q = Tensor::uniform({3, 4}, rng, -1, 1);
    std::vector<Tensor> ks = {Tensor::uniform({5, 4}, rng, -1, 1)};
    std::vector<Tensor> vs = {Tensor::uniform({5, 4}, rng, -1, 1)};
    RelationSet rs = relation_matrices(q_q, ks);
    MutualMask mm = mutual_mask(rs.concat);

    Rng d1(123), d2(123), d3(321);
    auto a = attend_and_align(rs, mm, vs, MaskMode::PreSoftmax, 0.4, true, &d1);
    auto b = attend_and_align(rs, mm, vs, MaskMode::PreSoftmax, 0.4, true, &d2);
    auto c = attend_and_align(rs, mm, vs, MaskMode::PreSoftmax, 0.4, true, &d3);
    CHECK(a[0].attention.value() == b[0].attention.value());  // same seed, same draw
    CHECK(a[0].attention.value() != c[0].attention.value());
    CHECK_THROWS_AS(attend_and_align(rs, mm, vs, MaskMode::PreSoftmax, 0.4, true, nullptr),
                    ContractError);
}
