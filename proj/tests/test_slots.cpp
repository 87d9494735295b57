#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "hclsm/gradcheck.hpp"
#include "hclsm/slots.hpp"

using namespace hclsm;
using namespace hclsm::slots;

TEST(Slots, InitSigmaZeroGivesMu) {
    ParamStore ps(0);
    SlotInit init = SlotInit::make(ps, "init", 4);
    init.log_sigma.mutable_data().assign(4, -1e3);  // sigma ~ 0
    SplitRng rng(1);
    Tensor s = init_slots(init, 2, 3, rng);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t n = 0; n < 3; ++n)
            for (std::size_t d = 0; d < 4; ++d)
                EXPECT_NEAR(s.at({b, n, d}), init.mu.data()[d], 1e-12);
}

TEST(Slots, InitSameSeedSameDraw) {
    ParamStore ps(0);
    SlotInit init = SlotInit::make(ps, "init", 4);
    SplitRng r1(77), r2(77);
    Tensor a = init_slots(init, 2, 3, r1);
    Tensor b = init_slots(init, 2, 3, r2);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(Slots, InitSampleMeanMatchesMu) {
    ParamStore ps(3);
    SlotInit init = SlotInit::make(ps, "init", 2);
    init.mu.mutable_data() = {1.5, -0.5};
    init.log_sigma.mutable_data().assign(2, std::log(0.3));
    SplitRng rng(5);
    double sum0 = 0, sum1 = 0;
    std::size_t draws = 10000;
    for (std::size_t i = 0; i < draws / 4; ++i) {
        Tensor s = init_slots(init, 2, 2, rng);
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t n = 0; n < 2; ++n) {
                sum0 += s.at({b, n, 0});
                sum1 += s.at({b, n, 1});
            }
    }
    // 3 sigma / sqrt(draws) tolerance
    double tol = 3.0 * 0.3 / std::sqrt(static_cast<double>(draws));
    EXPECT_NEAR(sum0 / draws, 1.5, tol);
    EXPECT_NEAR(sum1 / draws, -0.5, tol);
}

TEST(Slots, AttentionSingleCompetitor) {
    SplitRng rng(7);
    Tensor q = Tensor::randn({1, 1, 4}, rng);
    Tensor k = Tensor::randn({1, 6, 4}, rng);
    Tensor a = attention_weights(q, k);
    for (std::size_t m = 0; m < 6; ++m) EXPECT_DOUBLE_EQ(a.at({0, 0, m}), 1.0);
}

TEST(Slots, AttentionIdenticalQueriesSplitEvenly) {
    SplitRng rng(9);
    Tensor q1 = Tensor::randn({1, 1, 4}, rng);
    Tensor q = concat({q1, q1}, 1);
    Tensor k = Tensor::randn({1, 5, 4}, rng);
    Tensor a = attention_weights(q, k);
    for (std::size_t m = 0; m < 5; ++m) {
        EXPECT_NEAR(a.at({0, 0, m}), 0.5, 1e-12);
        EXPECT_NEAR(a.at({0, 1, m}), 0.5, 1e-12);
    }
}

TEST(Slots, AttentionColumnsSumToOneFuzz) {
    SplitRng rng(11);
    for (int rep = 0; rep < 50; ++rep) {
        Tensor q = Tensor::randn({2, 3, 5}, rng);
        Tensor k = Tensor::randn({2, 7, 5}, rng);
        Tensor a = attention_weights(q, k);
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t m = 0; m < 7; ++m) {
                double s = 0;
                for (std::size_t n = 0; n < 3; ++n) s += a.at({b, n, m});
                EXPECT_NEAR(s, 1.0, 1e-12);
            }
    }
}

TEST(Slots, IterateFrozenWhenGateAndMlpZero) {
    ParamStore ps(13);
    SlotAttentionParams p = SlotAttentionParams::make(ps, "sa", 4, 4, 1);
    p.gru.bz.mutable_data().assign(4, -50.0);  // update gate ~ 0
    p.mlp2.w.mutable_data().assign(p.mlp2.w.numel(), 0.0);
    p.mlp2.b.mutable_data().assign(4, 0.0);
    SplitRng rng(15);
    Tensor slots = Tensor::randn({1, 3, 4}, rng);
    Tensor tokens = Tensor::randn({1, 6, 4}, rng);
    auto [out, attn] = slot_attention_iterate(slots, tokens, p, 1);
    EXPECT_LT(max_rel_err(out, slots), 1e-9);
}

TEST(Slots, IterateInvariantToTokenDuplication) {
    ParamStore ps(17);
    SlotAttentionParams p = SlotAttentionParams::make(ps, "sa", 4, 4, 2);
    SplitRng rng(19);
    Tensor slots = Tensor::randn({1, 3, 4}, rng);
    Tensor tokens = Tensor::randn({1, 5, 4}, rng);
    Tensor dup = concat({tokens, tokens}, 1);
    auto [o1, a1] = slot_attention_iterate(slots, tokens, p);
    auto [o2, a2] = slot_attention_iterate(slots, dup, p);
    EXPECT_LT(max_rel_err(o2, o1), 1e-6);
}

TEST(Slots, IteratePermutationEquivariant) {
    ParamStore ps(19);
    SlotAttentionParams p = SlotAttentionParams::make(ps, "sa", 4, 4, 3);
    SplitRng rng(21);
    Tensor slots = Tensor::randn({1, 4, 4}, rng);
    Tensor tokens = Tensor::randn({1, 6, 4}, rng);
    std::vector<std::size_t> perm = {2, 0, 3, 1};
    Tensor slots_p = index_select(slots, 1, perm);
    auto [o1, a1] = slot_attention_iterate(slots, tokens, p);
    auto [o2, a2] = slot_attention_iterate(slots_p, tokens, p);
    Tensor o1_p = index_select(o1, 1, perm);
    EXPECT_LT(max_rel_err(o2, o1_p), 1e-12);
}

TEST(Slots, ExistenceHeadLimits) {
    ParamStore ps(23);
    Linear head = Linear::make(ps, "head", 4, 1);
    head.w.mutable_data().assign(4, 0.0);
    head.b.mutable_data().assign(1, 0.0);
    SplitRng rng(25);
    Tensor slots = Tensor::randn({2, 3, 4}, rng);
    Tensor p0 = existence_head(slots, head);
    for (double v : p0.data()) EXPECT_DOUBLE_EQ(v, 0.5);
    head.b.mutable_data().assign(1, 10.0);
    Tensor p1 = existence_head(slots, head);
    for (double v : p1.data()) EXPECT_GT(v, 0.9999);
}

TEST(Slots, AliveMaskStraightThrough) {
    Tensor p({1, 3}, {0.9, 0.2, 0.6});
    p.set_requires_grad();
    Tensor mask = alive_mask_st(p);
    EXPECT_DOUBLE_EQ(mask.at({0, 0}), 1.0);
    EXPECT_DOUBLE_EQ(mask.at({0, 1}), 0.0);
    EXPECT_DOUBLE_EQ(mask.at({0, 2}), 1.0);
    sum(mul(mask, mask)).backward();
    // gradient flows through the soft branch: d/dp (hard + p - stop(p))^2 = 2*mask
    EXPECT_DOUBLE_EQ(p.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(p.grad()[1], 0.0);
}

TEST(Slots, ResidualEnergyExamples) {
    // all alive, columns sum to 1 -> r = 0
    Tensor attn({1, 2, 3}, {0.5, 0.4, 0.9, 0.5, 0.6, 0.1});
    Tensor alive({1, 2}, {1.0, 1.0});
    Tensor r0 = residual_energy(attn, alive);
    for (double v : r0.data()) EXPECT_NEAR(v, 0.0, 1e-12);
    // all dead -> r = 1
    Tensor dead({1, 2}, {0.0, 0.0});
    Tensor r1 = residual_energy(attn, dead);
    for (double v : r1.data()) EXPECT_DOUBLE_EQ(v, 1.0);
    // half-alive symmetric: columns [0.5, 0.5], p = [1, 0] -> r = 0.5
    Tensor sym({1, 2, 2}, {0.5, 0.5, 0.5, 0.5});
    Tensor half({1, 2}, {1.0, 0.0});
    Tensor r2 = residual_energy(sym, half);
    for (double v : r2.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Slots, BirthNoOpCases) {
    ParamStore ps(29);
    Linear proj = Linear::make(ps, "birth", 4, 4);
    SplitRng rng(31);
    Tensor slots = Tensor::randn({1, 3, 4}, rng);
    Tensor before = slots.detach();
    Tensor tokens = Tensor::randn({1, 5, 4}, rng);
    // zero residual -> no-op
    Tensor palive({1, 3}, {0.9, 0.2, 0.8});
    Tensor r = Tensor::zeros({1, 5});
    Tensor s = slots, pa = palive;
    slot_birth(s, pa, tokens, r, 0.3, proj);
    EXPECT_LT(max_rel_err(s, before), 1e-15);
    // all alive -> no-op even at high residual
    Tensor all_alive({1, 3}, {0.9, 0.8, 0.7});
    Tensor high_r = Tensor::full({1, 5}, 0.99);
    s = slots;
    pa = all_alive;
    slot_birth(s, pa, tokens, high_r, 0.3, proj);
    EXPECT_LT(max_rel_err(s, before), 1e-15);
}

TEST(Slots, BirthReplacesDormantSlot) {
    ParamStore ps(37);
    Linear proj = Linear::make(ps, "birth", 4, 4);
    SplitRng rng(41);
    Tensor slots = Tensor::randn({1, 3, 4}, rng);
    Tensor tokens = Tensor::randn({1, 3, 4}, rng);
    Tensor palive({1, 3}, {0.9, 0.2, 0.8});
    Tensor r({1, 3}, {0.0, 0.99, 0.0});
    Tensor s = slots, pa = palive;
    slot_birth(s, pa, tokens, r, 0.3, proj);
    // slot 1 (dormant, lowest p) replaced by proj(token 1)
    Tensor tok1 = reshape(slice(tokens, 1, 1, 1), {1, 4});
    Tensor expect = proj(tok1);
    for (std::size_t d = 0; d < 4; ++d) EXPECT_NEAR(s.at({0, 1, d}), expect.at({0, d}), 1e-12);
    EXPECT_DOUBLE_EQ(pa.at({0, 1}), 0.9);
    // alive slots untouched
    for (std::size_t d = 0; d < 4; ++d) {
        EXPECT_DOUBLE_EQ(s.at({0, 0, d}), slots.at({0, 0, d}));
        EXPECT_DOUBLE_EQ(s.at({0, 2, d}), slots.at({0, 2, d}));
    }
    EXPECT_DOUBLE_EQ(pa.at({0, 0}), 0.9);
}

TEST(Slots, SinkhornSelfMatchIdentity) {
    SplitRng rng(43);
    Tensor prev = Tensor::randn({1, 4, 6}, rng);
    Tensor assign = sinkhorn_match(prev, prev, 50, 0.01);
    for (std::size_t i = 0; i < 4; ++i) {
        std::size_t arg = 0;
        double best = -1;
        for (std::size_t j = 0; j < 4; ++j)
            if (assign.at({0, i, j}) > best) {
                best = assign.at({0, i, j});
                arg = j;
            }
        EXPECT_EQ(arg, i);
        EXPECT_GT(best, 0.9);
    }
}

TEST(Slots, SinkhornUniformCost) {
    Tensor cost = Tensor::zeros({1, 3, 3});
    Tensor assign = sinkhorn_from_cost(cost, 30, 0.05);
    for (double v : assign.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-10);
}

TEST(Slots, SinkhornDoublyStochastic) {
    // separated slot sets (the regime temporal matching actually sees):
    // each slot near its own basis direction, frame-to-frame jitter on top
    SplitRng rng(47);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor base = Tensor::zeros({2, 5, 8});
        auto& bv = base.mutable_data();
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t i = 0; i < 5; ++i) bv[(b * 5 + i) * 8 + i] = 3.0;
        Tensor prev = add(base, Tensor::randn({2, 5, 8}, rng, 0.2));
        Tensor cur = add(prev, Tensor::randn({2, 5, 8}, rng, 0.2));
        Tensor a = sinkhorn_match(prev, cur, 30, 0.05);
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t i = 0; i < 5; ++i) {
                double rs = 0, cs = 0;
                for (std::size_t j = 0; j < 5; ++j) {
                    rs += a.at({b, i, j});
                    cs += a.at({b, j, i});
                    EXPECT_GE(a.at({b, i, j}), 0.0);
                }
                EXPECT_NEAR(rs, 1.0, 1e-4);
                EXPECT_NEAR(cs, 1.0, 1e-4);
            }
    }
}

TEST(Slots, SinkhornMatchesBruteForceAssignment) {
    // random cost matrices with a unique optimum (margin 0.05 between the two
    // best permutations; the entropic plan at low temperature can genuinely
    // split mass when permutations tie)
    SplitRng rng(53);
    std::size_t n_match = 0, total = 20;
    for (std::size_t rep = 0; rep < total; ++rep) {
        Tensor cost;
        std::vector<std::size_t> best_perm;
        while (true) {
            cost = Tensor::uniform({1, 5, 5}, rng, 0.0, 1.0);
            std::vector<std::size_t> perm = {0, 1, 2, 3, 4};
            double best_cost = 1e18, second = 1e18;
            do {
                double c = 0;
                for (std::size_t i = 0; i < 5; ++i) c += cost.at({0, i, perm[i]});
                if (c < best_cost) {
                    second = best_cost;
                    best_cost = c;
                    best_perm = perm;
                } else if (c < second) {
                    second = c;
                }
            } while (std::next_permutation(perm.begin(), perm.end()));
            if (second - best_cost >= 0.05) break;
        }
        Tensor assign = sinkhorn_from_cost(cost, 2000, 0.01);
        bool match = true;
        for (std::size_t i = 0; i < 5; ++i) {
            std::size_t arg = 0;
            double best = -1;
            for (std::size_t j = 0; j < 5; ++j)
                if (assign.at({0, i, j}) > best) {
                    best = assign.at({0, i, j});
                    arg = j;
                }
            match = match && (arg == best_perm[i]);
        }
        if (match) ++n_match;
    }
    EXPECT_EQ(n_match, total);
}

TEST(Slots, SinkhornGradcheck) {
    SplitRng rng(59);
    Tensor prev = Tensor::randn({1, 3, 4}, rng);
    Tensor cur = Tensor::randn({1, 3, 4}, rng);
    prev.set_requires_grad();
    cur.set_requires_grad();
    double err = finite_diff_check(
        [&] { return sum(square_stable(sinkhorn_match(prev, cur, 10, 0.5))); }, {prev, cur});
    EXPECT_LT(err, 1e-5);
}

TEST(Slots, ModuleGradcheckTinyDims) {
    ParamStore ps(61);
    SlotAttentionParams p = SlotAttentionParams::make(ps, "sa", 4, 4, 2);
    SplitRng rng(67);
    Tensor slots = Tensor::randn({1, 3, 4}, rng);
    Tensor tokens = Tensor::randn({1, 8, 4}, rng);
    slots.set_requires_grad();
    tokens.set_requires_grad();
    double err = finite_diff_check(
        [&] {
            auto [out, attn] = slot_attention_iterate(slots, tokens, p);
            Tensor palive = existence_head(out, p.existence);
            return add(sum(square_stable(out)), sum(mul(palive, palive)));
        },
        {slots, tokens, p.wq.w, p.gru.wh, p.mlp1.w, p.existence.w});
    EXPECT_LT(err, 1e-4);
}
