#pragma once

// Object decomposition: iterative slot attention with inverted competition
// (softmax over the slot axis), existence head, slot birth from residual
// attention energy, and differentiable Sinkhorn-Knopp temporal matching.

#include <vector>

#include "hclsm/nn.hpp"
#include "hclsm/tensor.hpp"

namespace hclsm::slots {

struct SlotState {
    Tensor slots;       // [B, N_max, d_slot]
    Tensor p_alive;     // [B, N_max] in [0, 1]
    Tensor assignment;  // [B, N_max, N_max] doubly stochastic match to previous frame
};

// Learned Gaussian the slot proposals are drawn from.
struct SlotInit {
    Tensor mu;         // [d_slot]
    Tensor log_sigma;  // [d_slot]

    static SlotInit make(ParamStore& ps, const std::string& n, std::size_t d) {
        SlotInit s;
        s.mu = ps.param(n + ".mu", {d}, 0.02);
        s.log_sigma = ps.param_const(n + ".log_sigma", {d}, 0.0);
        return s;
    }
};

// slots = mu + sigma * eps with eps ~ N(0,1); reparameterized so gradients
// reach mu and log_sigma.
inline Tensor init_slots(const SlotInit& init, std::size_t B, std::size_t n_max, SplitRng& rng) {
    std::size_t d = init.mu.numel();
    Tensor eps = Tensor::randn({B, n_max, d}, rng);
    return add(mul(exp(init.log_sigma), eps), init.mu);
}

// Eq.-1 attention: softmax over the slot axis, so slots compete per token.
// q: [B, N, d] (projected slots), k: [B, M, d] (projected tokens) -> [B, N, M].
inline Tensor attention_weights(const Tensor& q, const Tensor& k) {
    std::size_t d = q.shape().back();
    if (k.shape().back() != d) {
        throw std::invalid_argument("attention_weights: query/key width mismatch");
    }
    Tensor logits = scale(matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(d)));
    return softmax(logits, 1);
}

struct SlotAttentionParams {
    LayerNormParams ln_tokens, ln_slots, ln_mlp;
    Linear wq, wk, wv;
    GruParams gru;
    Linear mlp1, mlp2;
    Linear existence;   // d_slot -> 1
    Linear birth_proj;  // d_world -> d_slot
    std::size_t iterations = 3;
    double birth_threshold = 0.3;

    static SlotAttentionParams make(ParamStore& ps, const std::string& n, std::size_t d_slot,
                                    std::size_t d_world, std::size_t iterations = 3) {
        SlotAttentionParams p;
        p.ln_tokens = LayerNormParams::make(ps, n + ".ln_tok", d_world);
        p.ln_slots = LayerNormParams::make(ps, n + ".ln_slot", d_slot);
        p.ln_mlp = LayerNormParams::make(ps, n + ".ln_mlp", d_slot);
        p.wq = Linear::make(ps, n + ".wq", d_slot, d_slot, 2.0);
        p.wk = Linear::make(ps, n + ".wk", d_world, d_slot, 2.0);
        p.wv = Linear::make(ps, n + ".wv", d_world, d_slot);
        bool fresh_gru = !ps.has(n + ".gru.bz");
        p.gru = GruParams::make(ps, n + ".gru", d_slot);
        // conservative update gate at init: slots keep their identity across
        // iterations while attention asymmetries accumulate
        if (fresh_gru) p.gru.bz.mutable_data().assign(d_slot, -1.0);
        std::size_t hidden = 2 * d_slot;
        p.mlp1 = Linear::make(ps, n + ".mlp1", d_slot, hidden);
        p.mlp2 = Linear::make(ps, n + ".mlp2", hidden, d_slot);
        bool fresh = !ps.has(n + ".exist.b");
        p.existence = Linear::make(ps, n + ".exist", d_slot, 1, 0.1);
        // all slots start alive; the existence head only learns to deviate
        if (fresh) p.existence.b.mutable_data().assign(1, 2.0);
        p.birth_proj = Linear::make(ps, n + ".birth", d_world, d_slot);
        p.iterations = iterations;
        return p;
    }
};

// One slot-attention refinement pass: K competition/aggregation iterations,
// each updating slots through the GRU and a residual MLP, clamped to +-50.
// Returns the refined slots and the final attention map A [B, N, M].
inline std::pair<Tensor, Tensor> slot_attention_iterate(const Tensor& slots_in,
                                                        const Tensor& tokens,
                                                        const SlotAttentionParams& p,
                                                        std::size_t iterations = 0) {
    std::size_t K = iterations ? iterations : p.iterations;
    if (K < 1) throw std::invalid_argument("slot attention requires K >= 1 iterations");
    const Shape& ss = slots_in.shape();
    std::size_t B = ss[0], N = ss[1], d = ss[2];
    Tensor tok_n = p.ln_tokens(tokens);
    Tensor k = p.wk(tok_n);  // [B, M, d]
    Tensor v = p.wv(tok_n);
    Tensor slots = slots_in;
    Tensor attn;
    for (std::size_t it = 0; it < K; ++it) {
        Tensor q = p.wq(p.ln_slots(slots));
        attn = attention_weights(q, k);  // [B, N, M], columns sum to 1
        // per-slot weighted mean over tokens
        Tensor denom = add_scalar(sum_axis(attn, 2, true), 1e-8);  // [B, N, 1]
        Tensor w = div(attn, denom);
        Tensor updates = matmul(w, v);  // [B, N, d]
        Tensor flat_slots = reshape(slots, {B * N, d});
        Tensor flat_updates = reshape(updates, {B * N, d});
        Tensor h = gru_cell(flat_slots, flat_updates, p.gru);
        slots = reshape(h, {B, N, d});
        Tensor res = p.mlp2(gelu(p.mlp1(p.ln_mlp(slots))));
        slots = clamp(add(slots, res), -50.0, 50.0);
    }
    return {slots, attn};
}

// p_alive = sigmoid(existence head).
inline Tensor existence_head(const Tensor& slots, const Linear& head) {
    const Shape& s = slots.shape();
    Tensor logits = head(slots);  // [B, N, 1]
    return reshape(sigmoid(logits), {s[0], s[1]});
}

// Hard alive mask (p > 0.5) with a straight-through gradient to p_alive.
inline Tensor alive_mask_st(const Tensor& p_alive) {
    std::vector<double> hard(p_alive.numel());
    for (std::size_t i = 0; i < hard.size(); ++i) hard[i] = p_alive.data()[i] > 0.5 ? 1.0 : 0.0;
    Tensor hard_t(p_alive.shape(), std::move(hard));
    return add(hard_t, sub(p_alive, p_alive.detach()));
}

// r_k = clip(1 - sum_n p_alive_n * A_{nk}, 0, 1): the attention mass no alive
// slot claims for token k.
inline Tensor residual_energy(const Tensor& attn, const Tensor& p_alive) {
    const Shape& s = attn.shape();  // [B, N, M]
    Tensor weighted = mul(attn, reshape(p_alive, {s[0], s[1], 1}));
    Tensor claimed = sum_axis(weighted, 1);  // [B, M]
    return clamp(add_scalar(neg(claimed), 1.0), 0.0, 1.0);
}

// If the peak residual exceeds the threshold and a dormant slot exists, the
// lowest-p_alive slot is replaced by a projection of the argmax-residual
// token and given p_alive 0.9. Alive slots are never touched.
inline void slot_birth(Tensor& slots, Tensor& p_alive, const Tensor& tokens, const Tensor& r,
                       double threshold, const Linear& birth_proj) {
    const Shape& ss = slots.shape();
    std::size_t B = ss[0], N = ss[1];
    std::size_t M = tokens.dim(1);
    std::vector<double> onehot(B * N, 0.0);
    std::vector<std::size_t> token_idx(B, 0);
    bool any = false;
    for (std::size_t b = 0; b < B; ++b) {
        double rmax = -1.0;
        std::size_t kmax = 0;
        for (std::size_t m = 0; m < M; ++m) {
            if (r.at({b, m}) > rmax) {
                rmax = r.at({b, m});
                kmax = m;
            }
        }
        if (rmax <= threshold) continue;
        double pmin = 2.0;
        std::size_t nmin = N;
        for (std::size_t n = 0; n < N; ++n) {
            double pv = p_alive.at({b, n});
            if (pv <= 0.5 && pv < pmin) {
                pmin = pv;
                nmin = n;
            }
        }
        if (nmin == N) continue;  // no dormant slot
        onehot[b * N + nmin] = 1.0;
        token_idx[b] = b * M + kmax;
        any = true;
    }
    if (!any) return;
    Tensor mask({B, N}, std::move(onehot));
    Tensor keep = add_scalar(neg(mask), 1.0);
    Tensor flat_tokens = reshape(tokens, {B * M, tokens.shape().back()});
    Tensor born = birth_proj(index_select(flat_tokens, 0, token_idx));  // [B, d_slot]
    Tensor born3 = reshape(born, {B, 1, born.shape().back()});
    Tensor keep3 = reshape(keep, {B, N, 1});
    Tensor mask3 = reshape(mask, {B, N, 1});
    slots = add(mul(slots, keep3), mul(mask3, born3));
    p_alive = add(mul(p_alive, keep), scale(mask, 0.9));
}

// Log-domain Sinkhorn-Knopp on a cost matrix: kernel exp(-cost/temperature),
// alternating row/column normalization `iters` times. Fully differentiable.
inline Tensor sinkhorn_from_cost(const Tensor& cost, std::size_t iters, double temperature) {
    if (iters < 1) throw std::invalid_argument("sinkhorn requires iters >= 1");
    std::size_t r = cost.rank();
    Tensor log_k = scale(cost, -1.0 / temperature);
    for (std::size_t it = 0; it < iters; ++it) {
        // rows, then columns
        Tensor row_lse = logsumexp(log_k, r - 1);
        Shape rs = row_lse.shape();
        rs.push_back(1);
        log_k = sub(log_k, reshape(row_lse, rs));
        Tensor col_lse = logsumexp(log_k, r - 2);
        Shape cs = col_lse.shape();
        cs.insert(cs.end() - 1, 1);
        log_k = sub(log_k, reshape(col_lse, cs));
    }
    return exp(log_k);
}

namespace detail_slots {

// Worst |row or column sum - 1| over the batch; columns are exact right
// after a column sweep so the row deviation dominates.
inline double stochasticity_gap(const Tensor& assignment) {
    const Shape& s = assignment.shape();
    std::size_t n = s[s.size() - 1];
    std::size_t batch = assignment.numel() / (n * n);
    double worst = 0;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < n; ++i) {
            double rs = 0;
            for (std::size_t j = 0; j < n; ++j) rs += assignment.data()[(b * n + i) * n + j];
            worst = std::max(worst, std::abs(rs - 1.0));
        }
    return worst;
}

}  // namespace detail_slots

// Doubly stochastic soft assignment between consecutive-frame slot sets,
// using negative cosine similarity as the transport cost. Iterates at least
// `iters` rounds, then keeps going in blocks until the row sums are within
// `tol` of 1 (ambiguous matchings converge slowly) or `max_iters` is hit.
inline Tensor sinkhorn_match(const Tensor& prev, const Tensor& cur, std::size_t iters = 30,
                             double temperature = 0.05, double tol = 1e-5,
                             std::size_t max_iters = 300) {
    Tensor dots = matmul(prev, cur, false, true);  // [B, N, N]
    Tensor np = sqrt(add_scalar(sum_axis(square_stable(prev), 2, true), 1e-12));  // [B,N,1]
    Tensor nc = sqrt(add_scalar(sum_axis(square_stable(cur), 2, true), 1e-12));
    Tensor denom = add_scalar(matmul(np, nc, false, true), 1e-8);
    Tensor cosine = div(dots, denom);
    Tensor cost = neg(cosine);
    Tensor assign = sinkhorn_from_cost(cost, iters, temperature);
    std::size_t done = iters;
    while (done < max_iters && detail_slots::stochasticity_gap(assign) > tol) {
        std::size_t extra = std::min<std::size_t>(30, max_iters - done);
        // resume from the current plan: log-domain continuation
        assign = sinkhorn_from_cost(scale(log(add_scalar(assign, 1e-300)), -temperature), extra,
                                    temperature);
        done += extra;
    }
    return assign;
}

}  // namespace hclsm::slots
