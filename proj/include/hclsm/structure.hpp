#pragma once

// Relation GNN and causal adjacency learning. The GNN mediates slot-to-slot
// messages through an edge MLP whose sigmoid weights expose the interaction
// structure; for large N the pair tensor is built in source blocks so the
// full B x N x N x 4d buffer never materializes. The explicit causal graph
// (Gumbel-sampled adjacency, L1 sparsity, NOTEARS acyclicity penalty under an
// augmented Lagrangian schedule) is a regularization pathway on its own
// parameter.

#include <vector>

#include "hclsm/nn.hpp"
#include "hclsm/rng.hpp"
#include "hclsm/tensor.hpp"

namespace hclsm::structure {

// Pair features [o_i; o_j; o_i - o_j; o_i . o_j] for two single vectors.
inline Tensor edge_features(const Tensor& o_i, const Tensor& o_j) {
    if (o_i.shape() != o_j.shape()) {
        throw std::invalid_argument("edge_features operands must share width");
    }
    return concat({o_i, o_j, sub(o_i, o_j), mul(o_i, o_j)}, o_i.rank() - 1);
}

struct GnnParams {
    Linear edge1;  // 4d -> hidden
    Linear edge2;  // hidden -> d + 1 (message + weight logit)
    std::size_t d_slot = 0;

    static GnnParams make(ParamStore& ps, const std::string& n, std::size_t d,
                          std::size_t hidden = 0) {
        if (hidden == 0) hidden = 2 * d;
        GnnParams p;
        p.edge1 = Linear::make(ps, n + ".edge1", 4 * d, hidden);
        p.edge2 = Linear::make(ps, n + ".edge2", hidden, d + 1);
        p.d_slot = d;
        return p;
    }
};

struct GnnStats {
    std::size_t dense_pair_elems = 0;
    std::size_t peak_pair_elems = 0;
};

namespace detail_gnn {

// Messages from a block of source nodes [src0, src1) into every destination.
// Returns [B, N, d] partial sums (diagonal edge excluded, sources weighted by
// sigmoid(edge logit) * p_alive).
inline Tensor block_messages(const Tensor& slots, const Tensor& p_alive, const GnnParams& p,
                             std::size_t src0, std::size_t src1, GnnStats* stats) {
    const Shape& s = slots.shape();
    std::size_t B = s[0], N = s[1], d = s[2];
    std::size_t S = src1 - src0;
    Tensor src = slice(slots, 1, src0, S);                       // [B, S, d]
    Tensor dst_b = reshape(slots, {B, N, 1, d});
    Tensor src_b = reshape(src, {B, 1, S, d});
    Tensor zero_pair = Tensor::zeros({B, N, S, d});
    Tensor dst_full = add(dst_b, zero_pair);
    Tensor src_full = add(src_b, zero_pair);
    Tensor pair = concat({dst_full, src_full, sub(dst_full, src_full), mul(dst_full, src_full)}, 3);
    if (stats) {
        stats->peak_pair_elems = std::max(stats->peak_pair_elems, pair.numel());
    }
    Tensor hidden = gelu(p.edge1(pair));
    Tensor out = p.edge2(hidden);                       // [B, N, S, d+1]
    Tensor msg = slice(out, 3, 0, d);
    Tensor weight = sigmoid(reshape(slice(out, 3, d, 1), {B, N, S}));
    // mask the diagonal (global source index == destination index)
    std::vector<double> diag(N * S, 1.0);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < S; ++j)
            if (src0 + j == i) diag[i * S + j] = 0.0;
    Tensor diag_t({1, N, S}, std::move(diag));
    Tensor alive_src = reshape(slice(p_alive, 1, src0, S), {B, 1, S});
    Tensor gate = mul(mul(weight, diag_t), alive_src);  // [B, N, S]
    return sum_axis(mul(msg, reshape(gate, {B, N, S, 1})), 2);  // [B, N, d]
}

}  // namespace detail_gnn

enum class GnnMode { auto_select, dense, chunked };

// Edge-MLP interaction messages aggregated per destination and normalized by
// the alive count. Sources are processed in blocks of `chunk` when N exceeds
// 32 (or when chunking is forced); the chunked and dense paths accumulate in
// the same source order and agree to rounding.
inline Tensor gnn_messages(const Tensor& slots, const Tensor& p_alive, const GnnParams& p,
                           std::size_t chunk = 16, GnnMode mode = GnnMode::auto_select,
                           GnnStats* stats = nullptr) {
    const Shape& s = slots.shape();
    std::size_t B = s[0], N = s[1], d = s[2];
    if (stats) {
        stats->dense_pair_elems = B * N * N * 4 * d;
        stats->peak_pair_elems = 0;
    }
    if (N < 2) return Tensor::zeros({B, N, d});
    bool chunked = mode == GnnMode::chunked || (mode == GnnMode::auto_select && N > 32);
    Tensor total;
    if (!chunked) {
        total = detail_gnn::block_messages(slots, p_alive, p, 0, N, stats);
    } else {
        for (std::size_t src0 = 0; src0 < N; src0 += chunk) {
            std::size_t src1 = std::min(N, src0 + chunk);
            Tensor part = detail_gnn::block_messages(slots, p_alive, p, src0, src1, stats);
            total = total.defined() ? add(total, part) : part;
        }
    }
    // normalize by alive mass excluding the destination itself
    Tensor alive_sum = sum_axis(p_alive, 1, true);              // [B, 1]
    Tensor denom = add_scalar(sub(alive_sum, p_alive), 1e-8);   // [B, N]
    return div(total, reshape(denom, {B, N, 1}));
}

// Sigmoid edge weights for inspection; diagonal zeroed. [B, N, N].
inline Tensor interaction_edge_weights(const Tensor& slots, const GnnParams& p) {
    const Shape& s = slots.shape();
    std::size_t B = s[0], N = s[1], d = s[2];
    Tensor dst_b = reshape(slots, {B, N, 1, d});
    Tensor src_b = reshape(slots, {B, 1, N, d});
    Tensor zero_pair = Tensor::zeros({B, N, N, d});
    Tensor dst_full = add(dst_b, zero_pair);
    Tensor src_full = add(src_b, zero_pair);
    Tensor pair = concat({dst_full, src_full, sub(dst_full, src_full), mul(dst_full, src_full)}, 3);
    Tensor out = p.edge2(gelu(p.edge1(pair)));
    Tensor weight = sigmoid(reshape(slice(out, 3, d, 1), {B, N, N}));
    std::vector<double> offdiag(N * N, 1.0);
    for (std::size_t i = 0; i < N; ++i) offdiag[i * N + i] = 0.0;
    return mul(weight, Tensor({1, N, N}, std::move(offdiag)));
}

// Learned causal adjacency state.
struct CausalGraph {
    Tensor w_logits;  // [N, N]; diagonal never sampled
    double temperature = 1.0;
    double lagrange_lambda = 0.0;
    double penalty_rho = 1.0;
    double last_h = -1.0;  // h at the previous schedule boundary (< 0: none)

    static CausalGraph make(ParamStore& ps, const std::string& n, std::size_t N) {
        CausalGraph g;
        g.w_logits = ps.param_const(n + ".w_logits", {N, N}, 0.0);
        return g;
    }
};

// Binary-concrete edge sample: sigmoid((logits + logistic noise)/temperature)
// with the diagonal masked to zero. `hard` applies a straight-through
// threshold at 0.5.
inline Tensor gumbel_edge_sample(const CausalGraph& g, SplitRng& rng, bool hard = false) {
    if (g.temperature <= 0) throw std::invalid_argument("gumbel temperature must be > 0");
    const Shape& s = g.w_logits.shape();
    std::size_t N = s[0];
    std::vector<double> noise(N * N);
    for (auto& v : noise) v = rng.logistic();
    Tensor noise_t(s, std::move(noise));
    Tensor soft = sigmoid(scale(add(g.w_logits, noise_t), 1.0 / g.temperature));
    std::vector<double> offdiag(N * N, 1.0);
    for (std::size_t i = 0; i < N; ++i) offdiag[i * N + i] = 0.0;
    Tensor mask(s, std::move(offdiag));
    Tensor sample = mul(soft, mask);
    if (!hard) return sample;
    std::vector<double> hard_v(N * N, 0.0);
    for (std::size_t i = 0; i < N * N; ++i)
        hard_v[i] = sample.data()[i] > 0.5 ? 1.0 : 0.0;
    Tensor hard_t(s, std::move(hard_v));
    return add(hard_t, sub(sample, sample.detach()));
}

// tr(X) as a recorded op.
inline Tensor trace(const Tensor& x) {
    const Shape& s = x.shape();
    if (s.size() != 2 || s[0] != s[1]) throw std::invalid_argument("trace expects a square matrix");
    std::size_t N = s[0];
    double acc = 0;
    for (std::size_t i = 0; i < N; ++i) acc += x.data()[i * N + i];
    auto out = hclsm::detail::make_storage<double>(1, acc);
    auto xn = x.node();
    return hclsm::detail::make_op<double>(Shape{}, out, {x}, [xn, N](hclsm::detail::NodeT<double>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < N; ++i) xn->grad[i * N + i] += self.grad[0];
        xn->pending = true;
    });
}

// Matrix exponential by scaling-and-squaring over a truncated Taylor series
// (order 16), recorded on the tape through matmuls.
inline Tensor matrix_exp(const Tensor& m) {
    const Shape& s = m.shape();
    std::size_t N = s[0];
    // 1-norm controls the scaling power
    double norm1 = 0;
    for (std::size_t j = 0; j < N; ++j) {
        double col = 0;
        for (std::size_t i = 0; i < N; ++i) col += std::abs(m.data()[i * N + j]);
        norm1 = std::max(norm1, col);
    }
    std::size_t squarings = 0;
    double scale_v = 1.0;
    while (norm1 * scale_v > 0.5) {
        scale_v *= 0.5;
        ++squarings;
    }
    Tensor ms = scale(m, scale_v);
    std::vector<double> eye(N * N, 0.0);
    for (std::size_t i = 0; i < N; ++i) eye[i * N + i] = 1.0;
    Tensor result(s, eye);
    Tensor term(s, std::move(eye));
    for (std::size_t k = 1; k <= 16; ++k) {
        term = scale(matmul(term, ms), 1.0 / static_cast<double>(k));
        result = add(result, term);
    }
    for (std::size_t i = 0; i < squarings; ++i) result = matmul(result, result);
    return result;
}

// NOTEARS acyclicity penalty h(A) = tr(exp(A . A)) - N; zero exactly when the
// weighted graph is acyclic.
inline Tensor dag_penalty(const Tensor& adjacency) {
    const Shape& s = adjacency.shape();
    if (s.size() != 2 || s[0] != s[1]) throw std::invalid_argument("dag_penalty expects square A");
    std::size_t N = s[0];
    Tensor h = trace(matrix_exp(square_stable(adjacency)));
    return add_scalar(h, -static_cast<double>(N));
}

// Mean absolute off-diagonal weight.
inline Tensor sparsity_loss(const Tensor& adjacency) {
    const Shape& s = adjacency.shape();
    std::size_t N = s[0];
    if (N < 2) return Tensor::scalar(0.0);
    std::vector<double> offdiag(N * N, 1.0);
    for (std::size_t i = 0; i < N; ++i) offdiag[i * N + i] = 0.0;
    Tensor mask(s, std::move(offdiag));
    Tensor total = sum(abs(mul(adjacency, mask)));
    return scale(total, 1.0 / static_cast<double>(N * (N - 1)));
}

// Lagrangian objective contribution lambda*h + (rho/2)*h^2 for the current
// multiplier state.
inline Tensor lagrangian_term(const CausalGraph& g, const Tensor& h) {
    return add(scale(h, g.lagrange_lambda), scale(square_stable(h), 0.5 * g.penalty_rho));
}

// Dual update at a schedule boundary: lambda += rho*h; rho grows by eta when
// h failed to shrink by factor gamma since the previous boundary.
inline void augmented_lagrangian_step(CausalGraph& g, double h_value, double eta = 10.0,
                                      double gamma = 0.25) {
    g.lagrange_lambda += g.penalty_rho * h_value;
    if (g.last_h >= 0.0 && h_value > gamma * g.last_h) {
        g.penalty_rho *= eta;
    }
    g.last_h = h_value;
}

}  // namespace hclsm::structure
