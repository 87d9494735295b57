#pragma once

// Synthetic multi-object video with exact ground truth: colored shapes under
// constant velocity, elastic wall/object collisions, an action-driven pusher,
// per-pixel instance masks and recorded collision frames. Also the evaluation
// metrics: adjusted Rand index, event F1 and PCA projection.

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "hclsm/rng.hpp"
#include "hclsm/tensor.hpp"

namespace hclsm::worldgen {

struct EpisodeConfig {
    std::size_t n_objects = 3;
    std::size_t frames = 16;
    std::size_t height = 64;
    std::size_t width = 64;
    double min_speed = 0.8;
    double max_speed = 2.5;
    double min_radius = 0.14;  // fraction of min(height, width)
    double max_radius = 0.21;
    bool use_pusher = true;  // object 0 follows the action sequence
};

struct Episode {
    Tensor frames;   // [T, 3, H, W] in [0, 1]
    Tensor masks;    // [T, H, W] object ids, 0 = background
    Tensor actions;  // [T, 2] applied displacement of the pusher
    std::vector<std::size_t> collisions;  // frame indices in [1, T-1]
    std::uint64_t seed = 0;
    EpisodeConfig config;
};

namespace detail_world {

enum class ShapeKind { circle, square, triangle };

struct Body {
    double x, y, vx, vy, r;
    ShapeKind kind;
    std::array<double, 3> color;
};

inline bool inside(const Body& b, double px, double py) {
    double dx = px - b.x;
    double dy = py - b.y;
    switch (b.kind) {
        case ShapeKind::circle:
            return dx * dx + dy * dy <= b.r * b.r;
        case ShapeKind::square:
            return std::abs(dx) <= b.r * 0.85 && std::abs(dy) <= b.r * 0.85;
        case ShapeKind::triangle: {
            // apex-up triangle with circumradius r
            if (dy < -b.r || dy > 0.5 * b.r) return false;
            double half_width = (dy + b.r) * 0.577;  // tan(30 deg)
            return std::abs(dx) <= half_width;
        }
    }
    return false;
}

}  // namespace detail_world

// Deterministic episode generation: the same seed yields bit-identical
// frames, masks, actions and collision lists.
inline Episode gen_episode(const EpisodeConfig& cfg, std::uint64_t seed) {
    if (cfg.n_objects < 1) throw std::invalid_argument("gen_episode requires n_objects >= 1");
    using detail_world::Body;
    using detail_world::ShapeKind;
    SplitRng rng = SplitRng::from(seed, RngStream::worldgen);
    double W = static_cast<double>(cfg.width);
    double H = static_cast<double>(cfg.height);
    const std::array<std::array<double, 3>, 6> palette = {{{0.92, 0.20, 0.20},
                                                           {0.18, 0.85, 0.30},
                                                           {0.25, 0.45, 0.95},
                                                           {0.95, 0.85, 0.20},
                                                           {0.85, 0.30, 0.90},
                                                           {0.20, 0.85, 0.85}}};
    const std::array<double, 3> background = {0.07, 0.08, 0.11};
    std::vector<Body> bodies;
    double rmin = cfg.min_radius * std::min(W, H), rmax = cfg.max_radius * std::min(W, H);
    for (std::size_t n = 0; n < cfg.n_objects; ++n) {
        Body b;
        b.r = rng.uniform(rmin, rmax);
        // rejection-sample a start position clear of other objects
        for (int attempt = 0; attempt < 64; ++attempt) {
            b.x = rng.uniform(b.r + 1, W - b.r - 1);
            b.y = rng.uniform(b.r + 1, H - b.r - 1);
            bool ok = true;
            for (const Body& other : bodies) {
                double dx = other.x - b.x, dy = other.y - b.y;
                if (std::sqrt(dx * dx + dy * dy) < other.r + b.r + 2) ok = false;
            }
            if (ok) break;
        }
        double speed = rng.uniform(cfg.min_speed, cfg.max_speed);
        double angle = rng.uniform(0.0, 6.283185307179586);
        b.vx = speed * std::cos(angle);
        b.vy = speed * std::sin(angle);
        b.kind = static_cast<ShapeKind>(n % 3);
        b.color = palette[n % palette.size()];
        bodies.push_back(b);
    }
    bool pusher = cfg.use_pusher && cfg.n_objects >= 1;
    if (pusher) {
        // the pusher holds a constant heading; walls may flip it
        double speed = rng.uniform(cfg.min_speed, cfg.max_speed);
        double angle = rng.uniform(0.0, 6.283185307179586);
        bodies[0].vx = speed * std::cos(angle);
        bodies[0].vy = speed * std::sin(angle);
    }
    std::size_t T = cfg.frames;
    Episode ep;
    ep.seed = seed;
    ep.config = cfg;
    ep.frames = Tensor({T, 3, cfg.height, cfg.width});
    ep.masks = Tensor({T, cfg.height, cfg.width});
    ep.actions = Tensor({T, 2});
    auto& fr = ep.frames.mutable_data();
    auto& mk = ep.masks.mutable_data();
    auto& ac = ep.actions.mutable_data();
    std::size_t plane = cfg.height * cfg.width;
    for (std::size_t t = 0; t < T; ++t) {
        // render frame t from current positions
        for (std::size_t py = 0; py < cfg.height; ++py)
            for (std::size_t px = 0; px < cfg.width; ++px) {
                std::size_t pix = py * cfg.width + px;
                const std::array<double, 3>* color = &background;
                double id = 0.0;
                for (std::size_t n = 0; n < bodies.size(); ++n) {
                    if (detail_world::inside(bodies[n], px + 0.5, py + 0.5)) {
                        color = &bodies[n].color;
                        id = static_cast<double>(n + 1);
                    }
                }
                for (std::size_t ch = 0; ch < 3; ++ch) fr[(t * 3 + ch) * plane + pix] = (*color)[ch];
                mk[t * plane + pix] = id;
            }
        if (t + 1 == T) break;
        // integrate to t+1
        bool collided = false;
        for (std::size_t n = 0; n < bodies.size(); ++n) {
            Body& b = bodies[n];
            double ox = b.x, oy = b.y;
            b.x += b.vx;
            b.y += b.vy;
            // elastic wall reflection
            if (b.x < b.r) {
                b.x = 2 * b.r - b.x;
                b.vx = -b.vx;
                collided = true;
            } else if (b.x > W - b.r) {
                b.x = 2 * (W - b.r) - b.x;
                b.vx = -b.vx;
                collided = true;
            }
            if (b.y < b.r) {
                b.y = 2 * b.r - b.y;
                b.vy = -b.vy;
                collided = true;
            } else if (b.y > H - b.r) {
                b.y = 2 * (H - b.r) - b.y;
                b.vy = -b.vy;
                collided = true;
            }
            if (pusher && n == 0) {
                ac[(t + 1) * 2] = b.x - ox;
                ac[(t + 1) * 2 + 1] = b.y - oy;
            }
        }
        // pairwise elastic collisions (pusher acts as infinite mass)
        for (std::size_t i = 0; i < bodies.size(); ++i)
            for (std::size_t j = i + 1; j < bodies.size(); ++j) {
                Body& a = bodies[i];
                Body& b = bodies[j];
                double dx = b.x - a.x, dy = b.y - a.y;
                double dist = std::sqrt(dx * dx + dy * dy);
                double rsum = a.r + b.r;
                if (dist >= rsum || dist < 1e-9) continue;
                double nx = dx / dist, ny = dy / dist;
                double rel = (a.vx - b.vx) * nx + (a.vy - b.vy) * ny;
                if (rel > 0) {
                    if (pusher && i == 0) {
                        // reflect j off the moving pusher
                        double jrel = (b.vx - a.vx) * nx + (b.vy - a.vy) * ny;
                        b.vx -= 2 * jrel * nx;
                        b.vy -= 2 * jrel * ny;
                    } else {
                        // equal masses exchange normal components
                        a.vx -= rel * nx;
                        a.vy -= rel * ny;
                        b.vx += rel * nx;
                        b.vy += rel * ny;
                    }
                    collided = true;
                }
                // positional separation to exactly touching
                double push = 0.5 * (rsum - dist) + 1e-9;
                a.x -= push * nx;
                a.y -= push * ny;
                b.x += push * nx;
                b.y += push * ny;
            }
        if (collided) ep.collisions.push_back(t + 1);
    }
    return ep;
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

// Adjusted Rand index via pair counting. With ignore_background, positions
// whose TRUE label is zero are excluded (foreground ARI).
inline double ari(const std::vector<int>& pred, const std::vector<int>& truth,
                  bool ignore_background = false) {
    if (pred.size() != truth.size()) throw std::invalid_argument("ari: length mismatch");
    std::map<std::pair<int, int>, double> cont;
    std::map<int, double> rows, cols;
    double n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (ignore_background && truth[i] == 0) continue;
        cont[{pred[i], truth[i]}] += 1;
        rows[pred[i]] += 1;
        cols[truth[i]] += 1;
        n += 1;
    }
    if (n < 2) return 0.0;
    auto comb2 = [](double m) { return m * (m - 1) / 2.0; };
    double sum_ij = 0, sum_a = 0, sum_b = 0;
    for (auto& [k, v] : cont) sum_ij += comb2(v);
    for (auto& [k, v] : rows) sum_a += comb2(v);
    for (auto& [k, v] : cols) sum_b += comb2(v);
    double total = comb2(n);
    double expected = sum_a * sum_b / total;
    double max_index = 0.5 * (sum_a + sum_b);
    if (std::abs(max_index - expected) < 1e-12) return 1.0;  // degenerate: identical partitions
    return (sum_ij - expected) / (max_index - expected);
}

struct EventScore {
    double precision = 0;
    double recall = 0;
    double f1 = 0;
};

// Greedy one-to-one matching of predicted boundaries to true collisions
// within +-tol frames.
inline EventScore event_f1(const std::vector<std::size_t>& pred,
                           const std::vector<std::size_t>& truth, std::size_t tol = 1) {
    EventScore s;
    if (pred.empty() && truth.empty()) {
        s.precision = s.recall = s.f1 = 1.0;
        return s;
    }
    std::vector<bool> used(truth.size(), false);
    std::size_t matched = 0;
    for (std::size_t p : pred) {
        std::size_t best = truth.size();
        std::size_t best_dist = tol + 1;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (used[i]) continue;
            std::size_t dist = p > truth[i] ? p - truth[i] : truth[i] - p;
            if (dist < best_dist) {
                best_dist = dist;
                best = i;
            }
        }
        if (best < truth.size()) {
            used[best] = true;
            ++matched;
        }
    }
    s.precision = pred.empty() ? 0.0 : static_cast<double>(matched) / pred.size();
    s.recall = truth.empty() ? 0.0 : static_cast<double>(matched) / truth.size();
    s.f1 = (s.precision + s.recall) > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall)
                                        : 0.0;
    return s;
}

struct PcaResult {
    Tensor coords;      // [S, k]
    Tensor components;  // [d, k] eigenvectors, sign-fixed
    std::vector<double> explained_variance_ratio;
    std::vector<double> mean;
};

// PCA through cyclic Jacobi rotations on the covariance matrix (f64,
// off-diagonal tolerance 1e-12). Deterministic sign convention: each
// component's largest-magnitude entry is positive.
inline PcaResult pca_project(const Tensor& states, std::size_t k = 2) {
    const Shape& s = states.shape();
    if (s.size() != 2 || s[0] < 2) throw std::invalid_argument("pca_project expects [S>=2, d]");
    std::size_t S = s[0], d = s[1];
    if (k > d) k = d;
    std::vector<double> mean(d, 0.0);
    const auto& xv = states.data();
    for (std::size_t i = 0; i < S; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += xv[i * d + j];
    for (auto& m : mean) m /= static_cast<double>(S);
    std::vector<double> cov(d * d, 0.0);
    for (std::size_t i = 0; i < S; ++i)
        for (std::size_t a = 0; a < d; ++a) {
            double ca = xv[i * d + a] - mean[a];
            for (std::size_t b = a; b < d; ++b)
                cov[a * d + b] += ca * (xv[i * d + b] - mean[b]);
        }
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = a; b < d; ++b) {
            cov[a * d + b] /= static_cast<double>(S - 1);
            cov[b * d + a] = cov[a * d + b];
        }
    // cyclic Jacobi
    std::vector<double> V(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) V[i * d + i] = 1.0;
    double diag_norm = 0;
    for (std::size_t i = 0; i < d; ++i) diag_norm += std::abs(cov[i * d + i]);
    double tol = 1e-12 * std::max(diag_norm, 1e-300);
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0;
        for (std::size_t p = 0; p < d; ++p)
            for (std::size_t q = p + 1; q < d; ++q) off += std::abs(cov[p * d + q]);
        if (off < tol) break;
        for (std::size_t p = 0; p < d; ++p)
            for (std::size_t q = p + 1; q < d; ++q) {
                double apq = cov[p * d + q];
                if (std::abs(apq) < 1e-300) continue;
                double app = cov[p * d + p], aqq = cov[q * d + q];
                double theta = 0.5 * (aqq - app) / apq;
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double sn = t * c;
                for (std::size_t i = 0; i < d; ++i) {
                    double aip = cov[i * d + p], aiq = cov[i * d + q];
                    cov[i * d + p] = c * aip - sn * aiq;
                    cov[i * d + q] = sn * aip + c * aiq;
                }
                for (std::size_t i = 0; i < d; ++i) {
                    double api = cov[p * d + i], aqi = cov[q * d + i];
                    cov[p * d + i] = c * api - sn * aqi;
                    cov[q * d + i] = sn * api + c * aqi;
                }
                for (std::size_t i = 0; i < d; ++i) {
                    double vip = V[i * d + p], viq = V[i * d + q];
                    V[i * d + p] = c * vip - sn * viq;
                    V[i * d + q] = sn * vip + c * viq;
                }
            }
    }
    std::vector<std::pair<double, std::size_t>> eig(d);
    for (std::size_t i = 0; i < d; ++i) eig[i] = {cov[i * d + i], i};
    std::sort(eig.begin(), eig.end(), [](auto& a, auto& b) { return a.first > b.first; });
    double total = 0;
    for (auto& [lam, idx] : eig) total += std::max(lam, 0.0);
    PcaResult res;
    res.mean = mean;
    res.components = Tensor({d, k});
    auto& comp = res.components.mutable_data();
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t src = eig[c].second;
        double sign_mag = 0, sign_val = 1;
        for (std::size_t i = 0; i < d; ++i) {
            if (std::abs(V[i * d + src]) > sign_mag) {
                sign_mag = std::abs(V[i * d + src]);
                sign_val = V[i * d + src] >= 0 ? 1.0 : -1.0;
            }
        }
        for (std::size_t i = 0; i < d; ++i) comp[i * k + c] = V[i * d + src] * sign_val;
        res.explained_variance_ratio.push_back(total > 0 ? std::max(eig[c].first, 0.0) / total
                                                         : 0.0);
    }
    res.coords = Tensor({S, k});
    auto& coords = res.coords.mutable_data();
    for (std::size_t i = 0; i < S; ++i)
        for (std::size_t c = 0; c < k; ++c) {
            double acc = 0;
            for (std::size_t j = 0; j < d; ++j) acc += (xv[i * d + j] - mean[j]) * comp[j * k + c];
            coords[i * k + c] = acc;
        }
    return res;
}

}  // namespace hclsm::worldgen
