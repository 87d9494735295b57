#pragma once

// Neural primitives shared by every model component: linear layers, layer
// normalization, GRU cell, multi-head attention, SwiGLU feed-forward and the
// convolution ops used by the decoder and the event detector.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "hclsm/tensor.hpp"

namespace hclsm {

// Named registry of trainable leaves. Iteration order is name-sorted, which
// keeps optimizer and checkpoint traversal deterministic.
class ParamStore {
public:
    explicit ParamStore(std::uint64_t seed = 0) : rng_(SplitRng::from(seed, RngStream::param_init)) {}

    Tensor param(const std::string& name, const Shape& shape, double stddev) {
        auto it = params_.find(name);
        if (it != params_.end()) return it->second;
        Tensor t = stddev > 0 ? Tensor::randn(shape, rng_, stddev) : Tensor::zeros(shape);
        t.set_requires_grad(true);
        params_.emplace(name, t);
        return t;
    }

    Tensor param_uniform(const std::string& name, const Shape& shape, double lo, double hi) {
        auto it = params_.find(name);
        if (it != params_.end()) return it->second;
        Tensor t = Tensor::uniform(shape, rng_, lo, hi);
        t.set_requires_grad(true);
        params_.emplace(name, t);
        return t;
    }

    Tensor param_const(const std::string& name, const Shape& shape, double fill) {
        auto it = params_.find(name);
        if (it != params_.end()) return it->second;
        Tensor t = Tensor::full(shape, fill);
        t.set_requires_grad(true);
        params_.emplace(name, t);
        return t;
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }

    Tensor get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::invalid_argument("unknown parameter: " + name);
        return it->second;
    }

    const std::map<std::string, Tensor>& all() const { return params_; }
    std::map<std::string, Tensor>& all() { return params_; }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& [k, v] : params_) n += v.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [k, v] : params_) v.zero_grad();
    }

private:
    std::map<std::string, Tensor> params_;
    SplitRng rng_;
};

struct Linear {
    Tensor w;  // [in, out]
    Tensor b;  // [out]

    static Linear make(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out,
                       double gain = 1.0) {
        Linear l;
        l.w = ps.param(name + ".w", {in, out}, gain / std::sqrt(static_cast<double>(in)));
        l.b = ps.param_const(name + ".b", {out}, 0.0);
        return l;
    }

    Tensor operator()(const Tensor& x) const { return add(matmul(x, w), b); }
};

// Zero mean / unit variance over the last axis, then affine. Epsilon 1e-5.
inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    const Shape& s = x.shape();
    if (s.empty()) throw std::invalid_argument("layernorm requires rank >= 1");
    std::size_t d = s.back();
    if (d < 1) throw std::invalid_argument("layernorm axis length < 1");
    if (gamma.numel() != d || beta.numel() != d) {
        throw std::invalid_argument("layernorm affine params must match axis length " +
                                    std::to_string(d));
    }
    constexpr double kEps = 1e-5;
    std::size_t rows = x.numel() / d;
    const auto& xv = x.data();
    auto out = detail::make_storage<double>(x.numel());
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto rstd = std::make_shared<std::vector<double>>(rows);
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = &xv[r * d];
        double m = 0;
        for (std::size_t i = 0; i < d; ++i) m += row[i];
        m /= static_cast<double>(d);
        double var = 0;
        for (std::size_t i = 0; i < d; ++i) {
            double c = row[i] - m;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double rs = 1.0 / std::sqrt(var + kEps);
        (*rstd)[r] = rs;
        for (std::size_t i = 0; i < d; ++i) {
            double h = (row[i] - m) * rs;
            (*xhat)[r * d + i] = h;
            (*out)[r * d + i] = h * gv[i] + bv[i];
        }
    }
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return detail::make_op<double>(s, out, {x, gamma, beta},
                                   [xn, gn, bn, xhat, rstd, rows, d](detail::NodeT<double>& self) {
        const auto& gv = *gn->value;
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gout = &self.grad[r * d];
            const double* h = &(*xhat)[r * d];
            if (gn->requires_grad || bn->requires_grad) {
                for (std::size_t i = 0; i < d; ++i) {
                    if (gn->requires_grad) gn->grad[i] += gout[i] * h[i];
                    if (bn->requires_grad) bn->grad[i] += gout[i];
                }
            }
            if (xn->requires_grad) {
                double sum_dh = 0, sum_dh_h = 0;
                for (std::size_t i = 0; i < d; ++i) {
                    double dh = gout[i] * gv[i];
                    sum_dh += dh;
                    sum_dh_h += dh * h[i];
                }
                double inv_d = 1.0 / static_cast<double>(d);
                double rs = (*rstd)[r];
                for (std::size_t i = 0; i < d; ++i) {
                    double dh = gout[i] * gv[i];
                    xn->grad[r * d + i] += rs * (dh - inv_d * sum_dh - h[i] * inv_d * sum_dh_h);
                }
            }
        }
        if (gn->requires_grad) gn->pending = true;
        if (bn->requires_grad) bn->pending = true;
        if (xn->requires_grad) xn->pending = true;
    });
}

// Contract form with an explicit axis; internally normalizes the last axis.
inline Tensor layernorm_axis(const Tensor& x, std::size_t axis, const Tensor& gamma,
                             const Tensor& beta) {
    std::size_t r = x.rank();
    if (axis >= r) throw std::invalid_argument("layernorm axis out of range");
    if (axis == r - 1) return layernorm(x, gamma, beta);
    std::vector<std::size_t> perm;
    for (std::size_t i = 0; i < r; ++i)
        if (i != axis) perm.push_back(i);
    perm.push_back(axis);
    std::vector<std::size_t> inv(r);
    for (std::size_t i = 0; i < r; ++i) inv[perm[i]] = i;
    return permute(layernorm(permute(x, perm), gamma, beta), inv);
}

struct LayerNormParams {
    Tensor gamma;
    Tensor beta;
    static LayerNormParams make(ParamStore& ps, const std::string& name, std::size_t d) {
        return {ps.param_const(name + ".gamma", {d}, 1.0), ps.param_const(name + ".beta", {d}, 0.0)};
    }
    Tensor operator()(const Tensor& x) const { return layernorm(x, gamma, beta); }
};

struct GruParams {
    Tensor wz, uz, bz;
    Tensor wr, ur, br;
    Tensor wh, uh, bh;

    static GruParams make(ParamStore& ps, const std::string& n, std::size_t d) {
        double s = 1.0 / std::sqrt(static_cast<double>(d));
        GruParams g;
        g.wz = ps.param(n + ".wz", {d, d}, s);
        g.uz = ps.param(n + ".uz", {d, d}, s);
        g.bz = ps.param_const(n + ".bz", {d}, 0.0);
        g.wr = ps.param(n + ".wr", {d, d}, s);
        g.ur = ps.param(n + ".ur", {d, d}, s);
        g.br = ps.param_const(n + ".br", {d}, 0.0);
        g.wh = ps.param(n + ".wh", {d, d}, s);
        g.uh = ps.param(n + ".uh", {d, d}, s);
        g.bh = ps.param_const(n + ".bh", {d}, 0.0);
        return g;
    }
};

// Standard GRU update; output clamped to [-50, 50].
inline Tensor gru_cell(const Tensor& h, const Tensor& x, const GruParams& p) {
    if (h.shape() != x.shape()) {
        throw std::invalid_argument("gru_cell state/input shape mismatch: " +
                                    shape_str(h.shape()) + " vs " + shape_str(x.shape()));
    }
    Tensor z = sigmoid(add(add(matmul(x, p.wz), matmul(h, p.uz)), p.bz));
    Tensor r = sigmoid(add(add(matmul(x, p.wr), matmul(h, p.ur)), p.br));
    Tensor hc = tanh(add(add(matmul(x, p.wh), matmul(mul(r, h), p.uh)), p.bh));
    Tensor one_minus_z = add_scalar(neg(z), 1.0);
    return clamp(add(mul(one_minus_z, h), mul(z, hc)), -50.0, 50.0);
}

// Scaled dot-product attention over the last two axes of q/k/v:
// q [..., Tq, d], k/v [..., Tk, d]. Optional causal mask and per-key padding
// mask (pad[..., Tk] == 1 marks keys no query may attend to).
inline Tensor scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v, bool causal,
                               const Tensor* key_pad = nullptr) {
    std::size_t d = q.shape().back();
    Tensor scores = scale(matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(d)));
    std::size_t tq = scores.shape()[scores.rank() - 2];
    std::size_t tk = scores.shape()[scores.rank() - 1];
    if (causal || key_pad) {
        Tensor mask;
        if (causal) {
            std::vector<double> m(tq * tk, 0.0);
            for (std::size_t i = 0; i < tq; ++i)
                for (std::size_t j = i + 1; j < tk; ++j) m[i * tk + j] = -1e30;
            mask = Tensor({tq, tk}, std::move(m));
        }
        if (key_pad) {
            // pad broadcasts over the query axis
            Shape ps = key_pad->shape();
            ps.insert(ps.end() - 1, 1);
            Tensor padm = scale(reshape(*key_pad, ps), -1e30);
            mask = mask.defined() ? add(mask, padm) : padm;
        }
        scores = add(scores, mask);
    }
    Tensor attn = softmax(scores, scores.rank() - 1);
    return matmul(attn, v);
}

struct AttentionParams {
    Linear wq, wk, wv, wo;
    std::size_t heads = 1;

    static AttentionParams make(ParamStore& ps, const std::string& n, std::size_t d,
                                std::size_t heads) {
        AttentionParams a;
        a.wq = Linear::make(ps, n + ".q", d, d);
        a.wk = Linear::make(ps, n + ".k", d, d);
        a.wv = Linear::make(ps, n + ".v", d, d);
        a.wo = Linear::make(ps, n + ".o", d, d);
        a.heads = heads;
        return a;
    }
};

// Multi-head attention on token tensors shaped [B, T, d] (or [T, d]).
inline Tensor multihead_attention(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                                  const AttentionParams& p, bool causal,
                                  const Tensor* key_pad = nullptr) {
    std::size_t d = q_in.shape().back();
    if (d % p.heads != 0) {
        throw std::invalid_argument("model width " + std::to_string(d) +
                                    " not divisible by heads " + std::to_string(p.heads));
    }
    std::size_t dh = d / p.heads;
    bool batched = q_in.rank() == 3;
    std::size_t batch = batched ? q_in.dim(0) : 1;
    std::size_t tq = q_in.shape()[q_in.rank() - 2];
    std::size_t tk = k_in.shape()[k_in.rank() - 2];
    Tensor q = p.wq(q_in), k = p.wk(k_in), v = p.wv(v_in);
    auto split = [&](const Tensor& t, std::size_t tlen) {
        Tensor r = reshape(t, {batch, tlen, p.heads, dh});
        return permute(r, {0, 2, 1, 3});  // [B, H, T, dh]
    };
    Tensor qs = split(q, tq), ks = split(k, tk), vs = split(v, tk);
    Tensor padh;
    const Tensor* padp = nullptr;
    if (key_pad) {
        padh = reshape(*key_pad, {batch, 1, tk});
        padp = &padh;
    }
    Tensor ctx = scaled_attention(qs, ks, vs, causal, padp);  // [B, H, Tq, dh]
    Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), {batch, tq, d});
    if (!batched) merged = reshape(merged, {tq, d});
    return p.wo(merged);
}

inline std::size_t swiglu_hidden(std::size_t d) {
    std::size_t h = (8 * d + 2) / 3;
    return ((h + 7) / 8) * 8;
}

struct SwigluParams {
    Tensor w1, w2, w3;

    static SwigluParams make(ParamStore& ps, const std::string& n, std::size_t d) {
        std::size_t h = swiglu_hidden(d);
        double s1 = 1.0 / std::sqrt(static_cast<double>(d));
        double s3 = 1.0 / std::sqrt(static_cast<double>(h));
        SwigluParams p;
        p.w1 = ps.param(n + ".w1", {d, h}, s1);
        p.w2 = ps.param(n + ".w2", {d, h}, s1);
        p.w3 = ps.param(n + ".w3", {h, d}, s3);
        return p;
    }
};

// (silu(x W1) . (x W2)) W3, hidden width 8/3*d rounded up to a multiple of 8.
inline Tensor swiglu_ffn(const Tensor& x, const SwigluParams& p) {
    return matmul(mul(silu(matmul(x, p.w1)), matmul(x, p.w2)), p.w3);
}

// Pre-norm transformer block: x + MHA(LN(x)), then x + SwiGLU(LN(x)).
struct TransformerBlock {
    AttentionParams attn;
    SwigluParams ffn;
    LayerNormParams ln1, ln2;

    // residual branches start at zero, so a fresh block is the identity map
    static TransformerBlock make(ParamStore& ps, const std::string& n, std::size_t d,
                                 std::size_t heads) {
        TransformerBlock b;
        bool fresh = !ps.has(n + ".attn.o.w");
        b.attn = AttentionParams::make(ps, n + ".attn", d, heads);
        b.ffn = SwigluParams::make(ps, n + ".ffn", d);
        b.ln1 = LayerNormParams::make(ps, n + ".ln1", d);
        b.ln2 = LayerNormParams::make(ps, n + ".ln2", d);
        if (fresh) {
            b.attn.wo.w.mutable_data().assign(b.attn.wo.w.numel(), 0.0);
            b.ffn.w3.mutable_data().assign(b.ffn.w3.numel(), 0.0);
        }
        return b;
    }

    Tensor operator()(const Tensor& x, bool causal = false, const Tensor* key_pad = nullptr) const {
        Tensor h = ln1(x);
        Tensor y = add(x, multihead_attention(h, h, h, attn, causal, key_pad));
        return add(y, swiglu_ffn(ln2(y), ffn));
    }
};

// Causal 1-D convolution over [B, T, Cin] with kernel size 3 and the given
// dilation; left-padded so output t depends only on inputs <= t.
inline Tensor conv1d_causal(const Tensor& x, const Tensor& w, const Tensor& b,
                            std::size_t dilation) {
    const Shape& s = x.shape();
    if (s.size() != 3) throw std::invalid_argument("conv1d_causal expects [B,T,C]");
    std::size_t B = s[0], T = s[1], cin = s[2];
    const Shape& ws = w.shape();  // [k, cin, cout]
    if (ws.size() != 3 || ws[1] != cin) throw std::invalid_argument("conv1d weight shape mismatch");
    std::size_t K = ws[0], cout = ws[2];
    const auto& xv = x.data();
    const auto& wv = w.data();
    const auto& bv = b.data();
    auto out = detail::make_storage<double>(B * T * cout);
    auto& ov = *out;
    for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t t = 0; t < T; ++t) {
            double* orow = &ov[(bi * T + t) * cout];
            for (std::size_t c = 0; c < cout; ++c) orow[c] = bv[c];
            for (std::size_t ki = 0; ki < K; ++ki) {
                std::size_t back = (K - 1 - ki) * dilation;
                if (back > t) continue;
                const double* xrow = &xv[(bi * T + (t - back)) * cin];
                const double* wk = &wv[ki * cin * cout];
                for (std::size_t ci = 0; ci < cin; ++ci) {
                    double xvv = xrow[ci];
                    const double* wrow = &wk[ci * cout];
                    for (std::size_t c = 0; c < cout; ++c) orow[c] += xvv * wrow[c];
                }
            }
        }
    auto xn = x.node(), wn = w.node(), bn = b.node();
    return detail::make_op<double>({B, T, cout}, out, {x, w, b},
                                   [xn, wn, bn, B, T, cin, cout, K, dilation](detail::NodeT<double>& self) {
        const auto& xv = *xn->value;
        const auto& wv = *wn->value;
        if (xn->requires_grad) xn->ensure_grad();
        if (wn->requires_grad) wn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t t = 0; t < T; ++t) {
                const double* grow = &self.grad[(bi * T + t) * cout];
                if (bn->requires_grad)
                    for (std::size_t c = 0; c < cout; ++c) bn->grad[c] += grow[c];
                for (std::size_t ki = 0; ki < K; ++ki) {
                    std::size_t back = (K - 1 - ki) * dilation;
                    if (back > t) continue;
                    std::size_t src = (bi * T + (t - back)) * cin;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const double* wrow = &wv[(ki * cin + ci) * cout];
                        double xvv = xv[src + ci];
                        double gx = 0;
                        for (std::size_t c = 0; c < cout; ++c) {
                            double g = grow[c];
                            gx += g * wrow[c];
                            if (wn->requires_grad) wn->grad[(ki * cin + ci) * cout + c] += g * xvv;
                        }
                        if (xn->requires_grad) xn->grad[src + ci] += gx;
                    }
                }
            }
        if (xn->requires_grad) xn->pending = true;
        if (wn->requires_grad) wn->pending = true;
        if (bn->requires_grad) bn->pending = true;
    });
}

// Gathers 3x3 zero-padded neighborhoods: [B, H, W, C] -> [B, H, W, 9*C].
// Convolution then reduces to a matmul against a [9*C, Cout] weight.
inline Tensor im2col3x3(const Tensor& x) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw std::invalid_argument("im2col3x3 expects [B,H,W,C]");
    std::size_t B = s[0], H = s[1], W = s[2], C = s[3];
    const auto& xv = x.data();
    auto out = detail::make_storage<double>(B * H * W * 9 * C);
    auto& ov = *out;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
                double* dst = &ov[((b * H + i) * W + j) * 9 * C];
                std::size_t p = 0;
                for (std::size_t di = 0; di < 3; ++di)
                    for (std::size_t dj = 0; dj < 3; ++dj, ++p) {
                        std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + di) - 1;
                        std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + dj) - 1;
                        if (si < 0 || sj < 0 || si >= static_cast<std::ptrdiff_t>(H) ||
                            sj >= static_cast<std::ptrdiff_t>(W)) {
                            std::fill_n(dst + p * C, C, 0.0);
                        } else {
                            std::copy_n(&xv[((b * H + si) * W + sj) * C], C, dst + p * C);
                        }
                    }
            }
    auto xn = x.node();
    return detail::make_op<double>({B, H, W, 9 * C}, out, {x},
                                   [xn, B, H, W, C](detail::NodeT<double>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j) {
                    const double* g = &self.grad[((b * H + i) * W + j) * 9 * C];
                    std::size_t p = 0;
                    for (std::size_t di = 0; di < 3; ++di)
                        for (std::size_t dj = 0; dj < 3; ++dj, ++p) {
                            std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + di) - 1;
                            std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + dj) - 1;
                            if (si < 0 || sj < 0 || si >= static_cast<std::ptrdiff_t>(H) ||
                                sj >= static_cast<std::ptrdiff_t>(W))
                                continue;
                            double* dst = &xn->grad[((b * H + si) * W + sj) * C];
                            for (std::size_t c = 0; c < C; ++c) dst[c] += g[p * C + c];
                        }
                }
        xn->pending = true;
    });
}

// 3x3 same-padding convolution on [B, H, W, Cin] via im2col + matmul.
inline Tensor conv2d_3x3(const Tensor& x, const Tensor& w, const Tensor& b) {
    const Shape& ws = w.shape();  // [9*Cin, Cout]
    Tensor cols = im2col3x3(x);
    const Shape& s = x.shape();
    Tensor flat = reshape(cols, {s[0] * s[1] * s[2], ws[0]});
    Tensor y = add(matmul(flat, w), b);
    return reshape(y, {s[0], s[1], s[2], ws[1]});
}

}  // namespace hclsm
