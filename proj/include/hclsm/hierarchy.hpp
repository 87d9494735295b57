#pragma once

// Levels 1-2 of the temporal hierarchy: multi-scale event scoring over
// Level-0 states, hard boundary detection with a learned threshold, sparse
// gather into a dense event tensor, the event transformer (slot axis full,
// event axis causal), goal compression, and the gated level combination.

#include <vector>

#include "hclsm/nn.hpp"
#include "hclsm/tensor.hpp"

namespace hclsm::hierarchy {

inline constexpr std::size_t kPadSentinel = static_cast<std::size_t>(-1);

struct EventTrace {
    Tensor scores;                                   // [B, T] in (0, 1)
    std::vector<std::vector<std::size_t>> boundaries;  // strictly increasing per batch
    std::vector<std::vector<std::size_t>> gather_index;  // padded with the sequence length T
    std::vector<std::size_t> k_actual;
    std::size_t k_max = 0;
};

// Frame differences at scales {1, 2, 4}; diff_t is zero for t < scale.
// states [B, T, d] -> [B, T, 3*d].
inline Tensor multiscale_diffs(const Tensor& states,
                               const std::vector<std::size_t>& scales = {1, 2, 4}) {
    const Shape& s = states.shape();
    std::size_t B = s[0], T = s[1], d = s[2];
    std::vector<Tensor> parts;
    for (std::size_t sc : scales) {
        if (T > sc) {
            Tensor head = Tensor::zeros({B, sc, d});
            Tensor diff = sub(slice(states, 1, sc, T - sc), slice(states, 1, 0, T - sc));
            parts.push_back(concat({head, diff}, 1));
        } else {
            parts.push_back(Tensor::zeros({B, T, d}));
        }
    }
    return concat(parts, 2);
}

struct EventDetectorParams {
    Tensor conv1_w, conv1_b;  // kernel 3, dilation 1
    Tensor conv2_w, conv2_b;  // kernel 3, dilation 2
    Linear head;
    Tensor threshold;  // scalar logit; boundary cut at sigmoid(threshold)

    static EventDetectorParams make(ParamStore& ps, const std::string& n, std::size_t d_in,
                                    std::size_t hidden) {
        EventDetectorParams p;
        double s1 = 1.0 / std::sqrt(3.0 * static_cast<double>(d_in));
        double s2 = 1.0 / std::sqrt(3.0 * static_cast<double>(hidden));
        p.conv1_w = ps.param(n + ".c1.w", {3, d_in, hidden}, s1);
        p.conv1_b = ps.param_const(n + ".c1.b", {hidden}, 0.0);
        p.conv2_w = ps.param(n + ".c2.w", {3, hidden, hidden}, s2);
        p.conv2_b = ps.param_const(n + ".c2.b", {hidden}, 0.0);
        bool fresh = !ps.has(n + ".head.b");
        p.head = Linear::make(ps, n + ".head", hidden, 1);
        // start scores well above the cut so every frame is an event until
        // the contrastive signal separates them; avoids the score==threshold
        // knife edge at init
        if (fresh) p.head.b.mutable_data().assign(1, 1.0);
        p.threshold = ps.param_const(n + ".threshold", {}, 0.0);
        return p;
    }
};

// Two causal dilated convolutions, GELU between, linear head, sigmoid.
// scores_t depends only on diffs_{<=t}.
inline Tensor event_scores(const Tensor& diffs, const EventDetectorParams& p) {
    Tensor h = gelu(conv1d_causal(diffs, p.conv1_w, p.conv1_b, 1));
    h = gelu(conv1d_causal(h, p.conv2_w, p.conv2_b, 2));
    Tensor logits = p.head(h);  // [B, T, 1]
    const Shape& s = diffs.shape();
    return reshape(sigmoid(logits), {s[0], s[1]});
}

// Hard selection: indices where score > sigmoid(threshold). Raising the
// threshold can only remove boundaries.
inline std::vector<std::vector<std::size_t>> detect_boundaries(const Tensor& scores,
                                                               const Tensor& threshold) {
    const Shape& s = scores.shape();
    std::size_t B = s[0], T = s[1];
    double cut = 1.0 / (1.0 + std::exp(-threshold.data()[0]));
    std::vector<std::vector<std::size_t>> out(B);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t)
            if (scores.at({b, t}) > cut) out[b].push_back(t);
    return out;
}

inline EventTrace make_trace(Tensor scores, std::vector<std::vector<std::size_t>> boundaries,
                             std::size_t T) {
    EventTrace tr;
    tr.scores = std::move(scores);
    tr.boundaries = std::move(boundaries);
    std::size_t B = tr.boundaries.size();
    tr.k_actual.resize(B);
    tr.k_max = 1;  // downstream must tolerate zero events; keep one pad row
    for (std::size_t b = 0; b < B; ++b) {
        tr.k_actual[b] = tr.boundaries[b].size();
        tr.k_max = std::max(tr.k_max, tr.k_actual[b]);
    }
    tr.gather_index.assign(B, {});
    for (std::size_t b = 0; b < B; ++b) {
        tr.gather_index[b] = tr.boundaries[b];
        tr.gather_index[b].resize(tr.k_max, T);  // sentinel = T
    }
    return tr;
}

// One vectorized gather along the time axis with right padding (pad rows are
// zeros). states [B, T, N, d] -> dense [B, K_max, N, d].
inline Tensor gather_events(const Tensor& states, const EventTrace& tr) {
    const Shape& s = states.shape();
    std::size_t B = s[0], T = s[1], N = s[2], d = s[3];
    std::size_t K = tr.k_max;
    std::size_t slab = N * d;
    const auto& xv = states.data();
    auto out = hclsm::detail::make_storage<double>(B * K * slab);
    auto& ov = *out;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k) {
            std::size_t t = tr.gather_index[b][k];
            if (t < T) std::copy_n(&xv[(b * T + t) * slab], slab, &ov[(b * K + k) * slab]);
        }
    auto xn = states.node();
    auto idx = tr.gather_index;
    return hclsm::detail::make_op<double>({B, K, N, d}, out, {states},
                                          [xn, idx, B, T, K, slab](hclsm::detail::NodeT<double>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t k = 0; k < K; ++k) {
                std::size_t t = idx[b][k];
                if (t >= T) continue;
                for (std::size_t j = 0; j < slab; ++j)
                    xn->grad[(b * T + t) * slab + j] += self.grad[(b * K + k) * slab + j];
            }
        xn->pending = true;
    });
}

// Inverse of gather_events: boundary rows written back, zeros elsewhere.
inline Tensor scatter_events(const Tensor& outputs, const EventTrace& tr, std::size_t T) {
    const Shape& s = outputs.shape();
    std::size_t B = s[0], K = s[1], N = s[2], d = s[3];
    std::size_t slab = N * d;
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t k = 0; k + 1 < tr.k_actual[b]; ++k) {
            if (tr.gather_index[b][k] >= tr.gather_index[b][k + 1]) {
                throw std::invalid_argument("scatter_events: duplicate or unsorted indices");
            }
        }
    }
    const auto& xv = outputs.data();
    auto out = hclsm::detail::make_storage<double>(B * T * slab);
    auto& ov = *out;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k) {
            std::size_t t = tr.gather_index[b][k];
            if (t < T) std::copy_n(&xv[(b * K + k) * slab], slab, &ov[(b * T + t) * slab]);
        }
    auto xn = outputs.node();
    auto idx = tr.gather_index;
    return hclsm::detail::make_op<double>({B, T, N, d}, out, {outputs},
                                          [xn, idx, B, T, K, slab](hclsm::detail::NodeT<double>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t k = 0; k < K; ++k) {
                std::size_t t = idx[b][k];
                if (t >= T) continue;
                for (std::size_t j = 0; j < slab; ++j)
                    xn->grad[(b * K + k) * slab + j] += self.grad[(b * T + t) * slab + j];
            }
        xn->pending = true;
    });
}

struct EventTransformerParams {
    TransformerBlock slot_block1, event_block1;
    TransformerBlock slot_block2, event_block2;

    static EventTransformerParams make(ParamStore& ps, const std::string& n, std::size_t d,
                                       std::size_t heads) {
        EventTransformerParams p;
        p.slot_block1 = TransformerBlock::make(ps, n + ".slot1", d, heads);
        p.event_block1 = TransformerBlock::make(ps, n + ".event1", d, heads);
        p.slot_block2 = TransformerBlock::make(ps, n + ".slot2", d, heads);
        p.event_block2 = TransformerBlock::make(ps, n + ".event2", d, heads);
        return p;
    }
};

// Builds the [B, K] pad-key mask (1 = padded event). If a batch element has
// zero events, its first pad row stays unmasked so softmax has a key; the row
// holds zeros and is discarded by the scatter.
inline Tensor event_pad_mask(const EventTrace& tr) {
    std::size_t B = tr.k_actual.size(), K = tr.k_max;
    std::vector<double> pad(B * K, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t real = std::max<std::size_t>(tr.k_actual[b], 1);
        for (std::size_t k = real; k < K; ++k) pad[b * K + k] = 1.0;
    }
    return Tensor({B, K}, std::move(pad));
}

// Attention across slots within each event, then causal attention across the
// event axis; two blocks of each. Cost is O(K * N^2), not O(T * N^2).
inline Tensor event_transformer(const Tensor& dense, const EventTrace& tr,
                                const EventTransformerParams& p) {
    const Shape& s = dense.shape();
    std::size_t B = s[0], K = s[1], N = s[2], d = s[3];
    Tensor pad = event_pad_mask(tr);  // [B, K]
    auto slot_axis = [&](const Tensor& x, const TransformerBlock& blk) {
        Tensor r = reshape(x, {B * K, N, d});
        return reshape(blk(r, false), {B, K, N, d});
    };
    auto event_axis = [&](const Tensor& x, const TransformerBlock& blk) {
        Tensor perm = permute(x, {0, 2, 1, 3});               // [B, N, K, d]
        Tensor r = reshape(perm, {B * N, K, d});
        // replicate the pad mask across slots
        Tensor padn = reshape(add(reshape(pad, {B, 1, K}), Tensor::zeros({B, N, K})), {B * N, K});
        Tensor y = blk(r, true, &padn);
        return permute(reshape(y, {B, N, K, d}), {0, 2, 1, 3});
    };
    Tensor x = slot_axis(dense, p.slot_block1);
    x = event_axis(x, p.event_block1);
    x = slot_axis(x, p.slot_block2);
    x = event_axis(x, p.event_block2);
    return x;
}

struct GoalParams {
    Tensor queries;  // [n_summary, d]
    AttentionParams cross;
    TransformerBlock block1, block2;

    static GoalParams make(ParamStore& ps, const std::string& n, std::size_t d,
                           std::size_t n_summary, std::size_t heads) {
        GoalParams p;
        p.queries = ps.param(n + ".queries", {n_summary, d}, 0.02);
        p.cross = AttentionParams::make(ps, n + ".cross", d, heads);
        p.block1 = TransformerBlock::make(ps, n + ".b1", d, heads);
        p.block2 = TransformerBlock::make(ps, n + ".b2", d, heads);
        return p;
    }
};

// Learned summary queries cross-attend to the (pooled) event sequence; a
// two-block transformer then mixes the summary tokens. `goal_embed`, when
// provided, is added to the queries (conditioning hook; unused by training).
inline Tensor goal_compress(const Tensor& events_pooled, const EventTrace& tr,
                            const GoalParams& p, const Tensor* goal_embed = nullptr) {
    const Shape& s = events_pooled.shape();  // [B, K, d]
    std::size_t B = s[0], d = s[2];
    std::size_t n_summary = p.queries.dim(0);
    Tensor q = add(reshape(p.queries, {1, n_summary, d}), Tensor::zeros({B, n_summary, d}));
    if (goal_embed) q = add(q, *goal_embed);
    Tensor pad = event_pad_mask(tr);
    Tensor x = multihead_attention(q, events_pooled, events_pooled, p.cross, false, &pad);
    x = p.block1(x, false);
    x = p.block2(x, false);
    return x;  // [B, n_summary, d]
}

// softmax(gates) convex combination of the three level outputs.
inline Tensor hierarchy_combine(const Tensor& l0, const Tensor& l1, const Tensor& l2,
                                const Tensor& gates) {
    if (gates.numel() != 3) throw std::invalid_argument("hierarchy_combine expects 3 gates");
    Tensor w = softmax(gates, 0);
    Tensor w0 = slice(w, 0, 0, 1);
    Tensor w1 = slice(w, 0, 1, 1);
    Tensor w2 = slice(w, 0, 2, 1);
    return add(add(mul(l0, w0), mul(l1, w1)), mul(l2, w2));
}

}  // namespace hclsm::hierarchy
