#include <gtest/gtest.h>

#include <cmath>

#include "hclsm/gradcheck.hpp"
#include "hclsm/scan.hpp"

using namespace hclsm;
using namespace hclsm::scan;

namespace {

ScanInputs random_inputs(std::size_t rows, std::size_t T, std::size_t di, std::size_t ds,
                         std::uint64_t seed, bool positive_b = false) {
    SplitRng rng = SplitRng::from(seed, RngStream::test);
    ScanInputs in;
    in.a_bar = Tensor::uniform({rows, T, di, ds}, rng, std::exp(-20.0), 1.0);
    in.bx = positive_b ? Tensor::uniform({rows, T, di, ds}, rng, 0.0, 1.0)
                       : Tensor::randn({rows, T, di, ds}, rng);
    in.c = Tensor::randn({rows, T, ds}, rng);
    in.h0 = Tensor::randn({rows, di, ds}, rng);
    return in;
}

// Naive unrolled recurrence, written independently of the kernels.
std::pair<std::vector<double>, std::vector<double>> unrolled_oracle(const ScanInputs& in) {
    std::size_t rows = in.rows(), T = in.steps(), di = in.d_inner(), ds = in.d_state();
    std::vector<double> h(rows * T * di * ds), y(rows * T * di);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < di; ++i)
            for (std::size_t s = 0; s < ds; ++s) {
                double state = in.h0.at({r, i, s});
                for (std::size_t t = 0; t < T; ++t) {
                    state = in.a_bar.at({r, t, i, s}) * state + in.bx.at({r, t, i, s});
                    h[((r * T + t) * di + i) * ds + s] = state;
                }
            }
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t i = 0; i < di; ++i) {
                double acc = 0;
                for (std::size_t s = 0; s < ds; ++s)
                    acc += in.c.at({r, t, s}) * h[((r * T + t) * di + i) * ds + s];
                y[(r * T + t) * di + i] = acc;
            }
    return {h, y};
}

}  // namespace

TEST(Scan, DiscretizeExamples) {
    // delta = 0 -> a_bar = 1
    Tensor d0 = Tensor::zeros({1, 2});
    Tensor alog = Tensor::zeros({2, 1});
    Tensor a0 = discretize(d0, alog);
    for (double v : a0.data()) EXPECT_DOUBLE_EQ(v, 1.0);
    // a_log = 0, delta = 1: exponent -1 -> e^-1
    Tensor d1 = Tensor::ones({1, 2});
    Tensor a1 = discretize(d1, alog);
    for (double v : a1.data()) EXPECT_NEAR(v, 0.36787944117144233, 1e-15);
    // exponent would be -50: clamped to -20 -> e^-20
    Tensor d50 = Tensor::full({1, 2}, 50.0);
    Tensor a50 = discretize(d50, alog);
    for (double v : a50.data()) EXPECT_NEAR(v, std::exp(-20.0), 1e-24);
}

TEST(Scan, DiscretizeGradcheck) {
    SplitRng rng(101);
    Tensor delta = Tensor::uniform({2, 3}, rng, 0.05, 1.0);
    Tensor alog = Tensor::uniform({3, 2}, rng, -0.5, 0.0);
    delta.set_requires_grad();
    alog.set_requires_grad();
    double err = finite_diff_check(
        [&] { return sum(square_stable(discretize(delta, alog))); }, {delta, alog});
    EXPECT_LT(err, 1e-5);
}

TEST(Scan, SequentialIdentityGate) {
    std::size_t rows = 2, T = 5, di = 3, ds = 2;
    ScanInputs in;
    in.a_bar = Tensor::ones({rows, T, di, ds});
    in.bx = Tensor::zeros({rows, T, di, ds});
    SplitRng rng(7);
    in.c = Tensor::randn({rows, T, ds}, rng);
    in.h0 = Tensor::randn({rows, di, ds}, rng);
    auto [h, y] = scan_sequential(in);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t i = 0; i < di; ++i)
                for (std::size_t s = 0; s < ds; ++s)
                    EXPECT_DOUBLE_EQ(h.at({r, t, i, s}), in.h0.at({r, i, s}));
}

TEST(Scan, SequentialHandUnrolled) {
    // h0 = 0, a = [0.5, 0.5], bx = [1, 1] -> h = [1, 1.5]
    ScanInputs in;
    in.a_bar = Tensor({1, 2, 1, 1}, {0.5, 0.5});
    in.bx = Tensor({1, 2, 1, 1}, {1.0, 1.0});
    in.c = Tensor::ones({1, 2, 1});
    in.h0 = Tensor::zeros({1, 1, 1});
    auto [h, y] = scan_sequential(in);
    EXPECT_DOUBLE_EQ(h.at({0, 0, 0, 0}), 1.0);
    EXPECT_DOUBLE_EQ(h.at({0, 1, 0, 0}), 1.5);
    EXPECT_DOUBLE_EQ(y.at({0, 0, 0}), 1.0);
    EXPECT_DOUBLE_EQ(y.at({0, 1, 0}), 1.5);
}

TEST(Scan, SequentialMatchesUnrolledBitForBit) {
    ScanInputs in = random_inputs(3, 8, 2, 3, 11);
    auto [h, y] = scan_sequential(in);
    auto [ho, yo] = unrolled_oracle(in);
    for (std::size_t i = 0; i < ho.size(); ++i) EXPECT_EQ(h.data()[i], ho[i]);
    for (std::size_t i = 0; i < yo.size(); ++i) EXPECT_EQ(y.data()[i], yo[i]);
}

TEST(Scan, ParallelDegeneratePartitionIsIdentical) {
    ScanInputs in = random_inputs(4, 16, 3, 2, 13);
    auto [hs, ys] = scan_sequential(in);
    auto [hp, yp] = scan_parallel(in, 1, 16);
    for (std::size_t i = 0; i < hs.numel(); ++i) EXPECT_EQ(hs.data()[i], hp.data()[i]);
    for (std::size_t i = 0; i < ys.numel(); ++i) EXPECT_EQ(ys.data()[i], yp.data()[i]);
}

TEST(Scan, ParallelMatchesSequential128x64) {
    ScanInputs in = random_inputs(128, 64, 2, 4, 17);
    auto [hs, ys] = scan_sequential(in);
    auto [hp, yp] = scan_parallel(in, 8, 16);
    EXPECT_LT(max_rel_err(hp, hs), 1e-12);
    EXPECT_LT(max_rel_err(yp, ys), 1e-12);
}

TEST(Scan, PairCompositionAssociativity) {
    SplitRng rng(19);
    for (int rep = 0; rep < 200; ++rep) {
        DecayPair p{rng.uniform(0, 1), rng.normal()};
        DecayPair q{rng.uniform(0, 1), rng.normal()};
        DecayPair r{rng.uniform(0, 1), rng.normal()};
        DecayPair left = compose(compose(p, q), r);
        DecayPair right = compose(p, compose(q, r));
        EXPECT_NEAR(left.a, right.a, 1e-12 * std::max(1.0, std::abs(right.a)));
        EXPECT_NEAR(left.b, right.b, 1e-12 * std::max(1.0, std::abs(right.b)));
    }
}

TEST(Scan, StabilityBound) {
    // a_bar in [e^-20, 1] implies |h_t| <= |h0| + sum |bx|
    ScanInputs in = random_inputs(4, 32, 2, 3, 23);
    auto [h, y] = scan_sequential(in);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t s = 0; s < 3; ++s) {
                double bound = std::abs(in.h0.at({r, i, s}));
                for (std::size_t t = 0; t < 32; ++t) {
                    bound += std::abs(in.bx.at({r, t, i, s}));
                    EXPECT_LE(std::abs(h.at({r, t, i, s})), bound + 1e-12);
                }
            }
}

TEST(Scan, DeterminismAcrossRuns) {
    ScanInputs in = random_inputs(16, 32, 4, 4, 29);
    auto [h1, y1] = scan_parallel(in, 8, 8);
    auto [h2, y2] = scan_parallel(in, 8, 8);
    for (std::size_t i = 0; i < h1.numel(); ++i) EXPECT_EQ(h1.data()[i], h2.data()[i]);
    for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_EQ(y1.data()[i], y2.data()[i]);
}

TEST(Scan, Float32Equivalence) {
    using TS = float;
    std::size_t rows = 8, T = 64, di = 2, ds = 4;
    SplitRng rng(31);
    std::vector<TS> a(rows * T * di * ds), b(a.size()), c(rows * T * ds), h0(rows * di * ds);
    for (auto& v : a) v = static_cast<TS>(rng.uniform(0.0, 1.0));
    for (auto& v : b) v = static_cast<TS>(rng.normal());
    for (auto& v : c) v = static_cast<TS>(rng.normal());
    for (auto& v : h0) v = static_cast<TS>(rng.normal());
    std::vector<TS> hs(a.size()), ys(rows * T * di), hp(a.size()), yp(rows * T * di);
    detail_scan::seq_scan_raw(a.data(), b.data(), c.data(), h0.data(), hs.data(), ys.data(), rows,
                              T, di, ds);
    detail_scan::par_scan_raw(a.data(), b.data(), c.data(), h0.data(), hp.data(), yp.data(), rows,
                              T, di, ds, 4, 7);
    float scale = 0;
    for (float v : hs) scale = std::max(scale, std::abs(v));
    float worst = 0;
    for (std::size_t i = 0; i < hs.size(); ++i) worst = std::max(worst, std::abs(hs[i] - hp[i]));
    EXPECT_LT(worst / scale, 1e-5f);
}

TEST(Scan, SsmForwardZeroInput) {
    ParamStore ps(7);
    SsmParams p = SsmParams::make(ps, "ssm", 3, 2);
    Tensor x = Tensor::zeros({2, 4, 3});
    Tensor y = ssm_forward(x, p);
    EXPECT_EQ(y.shape(), (Shape{2, 4, 3}));
    // zero input means zero injection; residual add of zero keeps y at zero
    for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Scan, SsmForwardGradcheck) {
    ParamStore ps(8);
    SsmParams p = SsmParams::make(ps, "ssm", 3, 2);
    SplitRng rng(37);
    Tensor x = Tensor::randn({2, 4, 3}, rng);
    x.set_requires_grad();
    double err = finite_diff_check(
        [&] { return sum(square_stable(ssm_forward(x, p))); },
        {x, p.a_log, p.dt_proj.w, p.b_proj.w, p.c_proj.w, p.dt_proj.b});
    EXPECT_LT(err, 1e-4);
}

TEST(Scan, ScanStatesGradcheck) {
    SplitRng rng(41);
    Tensor a = Tensor::uniform({2, 3, 2, 2}, rng, 0.1, 0.95);
    Tensor b = Tensor::randn({2, 3, 2, 2}, rng);
    Tensor c = Tensor::randn({2, 3, 2}, rng);
    Tensor h0 = Tensor::randn({2, 2, 2}, rng);
    a.set_requires_grad();
    b.set_requires_grad();
    c.set_requires_grad();
    h0.set_requires_grad();
    double err = finite_diff_check(
        [&] { return sum(square_stable(state_readout(scan_states(a, b, h0, 2, 2), c))); },
        {a, b, c, h0});
    EXPECT_LT(err, 1e-5);
}

TEST(Scan, GlobalContextPoolingIdentityForSingleObject) {
    ParamStore ps(9);
    SsmParams p = SsmParams::make(ps, "ctx", 3, 2);
    SplitRng rng(43);
    Tensor one = Tensor::randn({2, 1, 4, 3}, rng);
    Tensor ctx1 = global_context(one, p);
    Tensor direct = ssm_forward(reshape(one, {2, 4, 3}), p);
    EXPECT_LT(max_rel_err(ctx1, direct), 1e-14);
}

TEST(Scan, GlobalContextInvariantToDuplicatedObjects) {
    ParamStore ps(10);
    SsmParams p = SsmParams::make(ps, "ctx", 3, 2);
    SplitRng rng(47);
    Tensor obj = Tensor::randn({1, 1, 4, 3}, rng);
    Tensor dup = concat({obj, obj, obj}, 1);
    Tensor c1 = global_context(obj, p);
    Tensor c3 = global_context(dup, p);
    EXPECT_LT(max_rel_err(c3, c1), 1e-12);
}

TEST(Scan, GlobalContextPermutationInvariant) {
    ParamStore ps(11);
    SsmParams p = SsmParams::make(ps, "ctx", 3, 2);
    SplitRng rng(53);
    Tensor objs = Tensor::randn({1, 3, 4, 3}, rng);
    Tensor perm = index_select(objs, 1, {2, 0, 1});
    Tensor c1 = global_context(objs, p);
    Tensor c2 = global_context(perm, p);
    EXPECT_LT(max_rel_err(c2, c1), 1e-12);
}

TEST(Scan, FusedKernelsAgree) {
    EXPECT_LT(fused_kernels_rel_err(16, 64, 8, 8, 8, 16, 59), 1e-12);
    EXPECT_LT(fused_kernels_rel_err(3, 256, 4, 8, 8, 32, 61), 1e-12);
    EXPECT_LT(fused_kernels_rel_err(5, 33, 4, 3, 8, 7, 67), 1e-12);  // scalar ds fallback
}

#if defined(__AVX2__)
TEST(Scan, VectorExpAccuracy) {
    SplitRng rng(71);
    double worst = 0;
    for (int rep = 0; rep < 250000; ++rep) {
        alignas(32) double in[4], out[4];
        for (auto& v : in) v = rng.uniform(-20.0, 0.0);
        __m256d x = _mm256_loadu_pd(in);
        _mm256_storeu_pd(out, detail_scan::exp4(x));
        for (int i = 0; i < 4; ++i) {
            double ref = std::exp(in[i]);
            worst = std::max(worst, std::abs(out[i] - ref) / ref);
        }
    }
    EXPECT_LT(worst, 1e-14);
}
#endif

TEST(Scan, BenchRowsHaveTable2Shape) {
    BenchConfig tiny;
    tiny.name = "Tiny";
    tiny.bn = 128;
    tiny.t = 16;
    tiny.repeats = 1;
    BenchRow row = bench_scan(tiny);
    EXPECT_EQ(row.bn, 128u);
    EXPECT_EQ(row.t, 16u);
    EXPECT_GT(row.sequential_ms, 0.0);
    EXPECT_GT(row.parallel_ms, 0.0);
    EXPECT_NEAR(row.speedup, row.sequential_ms / row.parallel_ms, 1e-12);
}
