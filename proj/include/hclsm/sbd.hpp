#pragma once

// Spatial broadcast decoder: every slot is tiled over a coordinate grid and
// decoded by a shared 4-layer CNN into per-position features plus an alpha
// ownership mask, normalized over alive slots. The alpha-weighted feature
// error is the Stage-1 training signal that forces decomposition.

#include <vector>

#include "hclsm/nn.hpp"
#include "hclsm/tensor.hpp"

namespace hclsm::sbd {

// Raised when a batch element has no alive slot left to normalize over.
class DegenerateMaskError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tiles each slot across the grid and appends (x, y) coordinate channels
// spanning [-1, 1]. slots [B, N, d] -> [B, N, gh, gw, d + 2].
inline Tensor broadcast(const Tensor& slots, std::size_t grid_h, std::size_t grid_w) {
    const Shape& s = slots.shape();
    std::size_t B = s[0], N = s[1], d = s[2];
    std::size_t P = grid_h * grid_w;
    // coordinate channels are constants
    std::vector<double> coords(P * 2);
    for (std::size_t i = 0; i < grid_h; ++i)
        for (std::size_t j = 0; j < grid_w; ++j) {
            double y = grid_h > 1 ? -1.0 + 2.0 * static_cast<double>(i) / (grid_h - 1) : 0.0;
            double x = grid_w > 1 ? -1.0 + 2.0 * static_cast<double>(j) / (grid_w - 1) : 0.0;
            coords[(i * grid_w + j) * 2] = x;
            coords[(i * grid_w + j) * 2 + 1] = y;
        }
    Tensor coord_t({1, 1, grid_h, grid_w, 2}, std::move(coords));
    Tensor tiled = add(reshape(slots, {B, N, 1, 1, d}), Tensor::zeros({B, N, grid_h, grid_w, d}));
    Tensor coord_full = add(coord_t, Tensor::zeros({B, N, grid_h, grid_w, 2}));
    return concat({tiled, coord_full}, 4);
}

struct DecoderParams {
    Tensor w1, b1, w2, b2, w3, b3, w4, b4;  // conv weights [9*Cin, Cout]
    std::size_t channels = 64;
    std::size_t d_feat = 0;

    static DecoderParams make(ParamStore& ps, const std::string& n, std::size_t d_slot,
                              std::size_t d_feat, std::size_t channels = 64) {
        DecoderParams p;
        p.channels = channels;
        p.d_feat = d_feat;
        std::size_t cin = d_slot + 2;
        auto conv = [&](const std::string& nm, std::size_t ci, std::size_t co, Tensor& w,
                        Tensor& b) {
            w = ps.param(nm + ".w", {9 * ci, co}, 1.0 / std::sqrt(9.0 * static_cast<double>(ci)));
            b = ps.param_const(nm + ".b", {co}, 0.0);
        };
        conv(n + ".c1", cin, channels, p.w1, p.b1);
        conv(n + ".c2", channels, channels, p.w2, p.b2);
        conv(n + ".c3", channels, channels, p.w3, p.b3);
        conv(n + ".c4", channels, d_feat + 1, p.w4, p.b4);
        return p;
    }
};

// 4-layer 3x3 CNN (stride 1, same padding, GELU) shared across slots. The
// final channel is the raw alpha logit.
// grid [B, N, gh, gw, d+2] -> features [B, N, P, d_feat], alpha_raw [B, N, P].
inline std::pair<Tensor, Tensor> decode(const Tensor& grid, const DecoderParams& p) {
    const Shape& s = grid.shape();
    std::size_t B = s[0], N = s[1], gh = s[2], gw = s[3], c = s[4];
    Tensor x = reshape(grid, {B * N, gh, gw, c});
    x = gelu(conv2d_3x3(x, p.w1, p.b1));
    x = gelu(conv2d_3x3(x, p.w2, p.b2));
    x = gelu(conv2d_3x3(x, p.w3, p.b3));
    x = conv2d_3x3(x, p.w4, p.b4);  // [B*N, gh, gw, d_feat+1]
    std::size_t P = gh * gw;
    Tensor flat = reshape(x, {B, N, P, p.d_feat + 1});
    Tensor features = slice(flat, 3, 0, p.d_feat);
    Tensor alpha_raw = reshape(slice(flat, 3, p.d_feat, 1), {B, N, P});
    return {features, alpha_raw};
}

// Eq.-2 normalization: softmax over alive slots per position. Dead slots are
// masked to -inf before the softmax, so their alpha is exactly zero.
inline Tensor normalize_alpha(const Tensor& alpha_raw, const Tensor& p_alive) {
    const Shape& s = alpha_raw.shape();  // [B, N, P]
    std::size_t B = s[0], N = s[1];
    std::vector<double> mask(B * N, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
        bool any_alive = false;
        for (std::size_t n = 0; n < N; ++n) {
            bool alive = p_alive.at({b, n}) > 0.5;
            mask[b * N + n] = alive ? 0.0 : -1e30;
            any_alive = any_alive || alive;
        }
        if (!any_alive) {
            throw DegenerateMaskError("normalize_alpha: no alive slot in batch element " +
                                      std::to_string(b));
        }
    }
    Tensor mask_t({B, N, 1}, std::move(mask));
    return softmax(add(alpha_raw, mask_t), 1);
}

// Eq. 3: alpha-weighted squared feature error, mean-reduced.
// features [B, N, P, d], alpha [B, N, P], targets [B, P, d].
inline Tensor sbd_loss(const Tensor& features, const Tensor& alpha, const Tensor& targets) {
    const Shape& fs = features.shape();
    std::size_t B = fs[0], N = fs[1], P = fs[2], d = fs[3];
    Tensor tgt = reshape(targets, {B, 1, P, d});
    Tensor sq = square_stable(sub(features, tgt));
    Tensor weighted = mul(sq, reshape(alpha, {B, N, P, 1}));
    Tensor per_pos = sum_axis(weighted, 1);  // [B, P, d]
    return mean(per_pos);
}

// Per-position argmax slot; ties go to the lowest index.
inline std::vector<std::size_t> segmentation_map(const Tensor& alpha, std::size_t batch) {
    const Shape& s = alpha.shape();  // [B, N, P]
    std::size_t N = s[1], P = s[2];
    std::vector<std::size_t> labels(P, 0);
    for (std::size_t pos = 0; pos < P; ++pos) {
        double best = -1.0;
        std::size_t arg = 0;
        for (std::size_t n = 0; n < N; ++n) {
            double v = alpha.at({batch, n, pos});
            if (v > best) {
                best = v;
                arg = n;
            }
        }
        labels[pos] = arg;
    }
    return labels;
}

}  // namespace hclsm::sbd
