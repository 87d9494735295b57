#pragma once

// Training loop (AdamW, warmup + cosine schedule, gradient clipping, EMA
// updates, augmented-Lagrangian schedule, atomic checkpoints, abort-on-NaN
// diagnostics) and the evaluation pass that produces the decomposition /
// event / trajectory metrics.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "hclsm/model.hpp"

namespace hclsm::model {

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.05;
    std::map<std::string, std::vector<double>> m, v;
    std::size_t t = 0;

    void init(const ParamStore& ps) {
        m.clear();
        v.clear();
        for (const auto& [name, p] : ps.all()) {
            m[name].assign(p.numel(), 0.0);
            v[name].assign(p.numel(), 0.0);
        }
        t = 0;
    }

    // Returns the pre-clip global gradient norm.
    double step(ParamStore& ps, double lr, double grad_clip) {
        double norm_sq = 0.0;
        for (auto& [name, p] : ps.all()) {
            if (!p.has_grad()) continue;
            for (double g : p.grad()) norm_sq += g * g;
        }
        double norm = std::sqrt(norm_sq);
        double scale = grad_clip > 0 && norm > grad_clip ? grad_clip / norm : 1.0;
        ++t;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (auto& [name, p] : ps.all()) {
            auto& mv = m.at(name);
            auto& vv = v.at(name);
            auto& data = p.mutable_data();
            const std::vector<double>* gp = p.has_grad() ? &p.grad() : nullptr;
            for (std::size_t i = 0; i < data.size(); ++i) {
                double g = gp ? (*gp)[i] * scale : 0.0;
                mv[i] = beta1 * mv[i] + (1.0 - beta1) * g;
                vv[i] = beta2 * vv[i] + (1.0 - beta2) * g * g;
                double mhat = mv[i] / bc1;
                double vhat = vv[i] / bc2;
                data[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * data[i]);
            }
        }
        return norm;
    }
};

// Linear warmup then cosine decay to zero.
inline double lr_schedule(const ModelConfig& cfg, std::size_t step) {
    if (cfg.warmup > 0 && step < cfg.warmup) {
        return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
    }
    std::size_t total = std::max<std::size_t>(cfg.total_steps, cfg.warmup + 1);
    double progress = static_cast<double>(step - cfg.warmup) /
                      static_cast<double>(total - cfg.warmup);
    progress = std::min(1.0, std::max(0.0, progress));
    return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

enum class Split { all, train, eval };

class Dataset {
public:
    static Dataset load(const std::string& dir, Split split) {
        Dataset ds;
        auto dirs = io::list_episode_dirs(dir);
        if (dirs.empty()) throw std::runtime_error("no episodes found in " + dir);
        // 80/20 train/eval split by (sorted) seed order
        std::size_t cut = (dirs.size() * 8 + 9) / 10;
        std::size_t lo = split == Split::eval ? cut : 0;
        std::size_t hi = split == Split::train ? cut : dirs.size();
        for (std::size_t i = lo; i < hi; ++i) ds.episodes_.push_back(io::load_episode(dirs[i]));
        if (ds.episodes_.empty()) throw std::runtime_error("empty split for " + dir);
        return ds;
    }

    std::size_t size() const { return episodes_.size(); }
    const worldgen::Episode& episode(std::size_t i) const { return episodes_.at(i); }

    // Deterministic batch assembly: episode indices and clip offsets are a
    // pure function of (seed, step).
    struct Batch {
        Tensor frames;   // [B, T, C, H, W]
        Tensor actions;  // [B, T, 2]
    };

    Batch sample(const ModelConfig& cfg, std::size_t step) const {
        SplitRng rng = SplitRng::from(cfg.seed, RngStream::data_order, step);
        std::size_t B = cfg.batch, T = cfg.clip_frames;
        const auto& first = episodes_[0];
        std::size_t H = first.config.height, W = first.config.width;
        Batch batch;
        batch.frames = Tensor({B, T, 3, H, W});
        batch.actions = Tensor({B, T, 2});
        auto& fv = batch.frames.mutable_data();
        auto& av = batch.actions.mutable_data();
        std::size_t frame_elems = 3 * H * W;
        for (std::size_t b = 0; b < B; ++b) {
            const auto& ep = episodes_[rng.index(episodes_.size())];
            std::size_t ep_T = ep.config.frames;
            if (ep_T < T) throw std::runtime_error("episode shorter than clip_frames");
            std::size_t start = rng.index(ep_T - T + 1);
            for (std::size_t t = 0; t < T; ++t) {
                std::copy_n(&ep.frames.data()[(start + t) * frame_elems], frame_elems,
                            &fv[(b * T + t) * frame_elems]);
                av[(b * T + t) * 2] = ep.actions.data()[(start + t) * 2];
                av[(b * T + t) * 2 + 1] = ep.actions.data()[(start + t) * 2 + 1];
            }
        }
        return batch;
    }

private:
    std::vector<worldgen::Episode> episodes_;
};

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& out_dir, const std::string& name, WorldModel& model,
                            const AdamW& opt, std::size_t step,
                            const std::map<std::string, double>& metric_snapshot) {
    namespace fs = std::filesystem;
    fs::path tmp = fs::path(out_dir) / (name + ".tmp");
    fs::path final_path = fs::path(out_dir) / name;
    fs::remove_all(tmp);
    fs::create_directories(tmp / "params");
    fs::create_directories(tmp / "ema");
    fs::create_directories(tmp / "opt");
    for (const auto& [pname, p] : model.params().all()) {
        io::save_tensor((tmp / "params" / (pname + ".hct")).string(), p);
    }
    for (const auto& [pname, p] : model.ema_params().all()) {
        io::save_tensor((tmp / "ema" / (pname + ".hct")).string(), p);
    }
    for (const auto& [pname, mv] : opt.m) {
        Tensor mt({mv.size()}, mv);
        io::save_tensor((tmp / "opt" / (pname + ".m.hct")).string(), mt);
        Tensor vt({opt.v.at(pname).size()}, opt.v.at(pname));
        io::save_tensor((tmp / "opt" / (pname + ".v.hct")).string(), vt);
    }
    nlohmann::json manifest;
    manifest["step"] = step;
    manifest["adam_t"] = opt.t;
    manifest["config"] = model.config().snapshot();
    manifest["config_hash"] = model.config().hash();
    manifest["lagrangian"] = {{"lambda", model.dynamics().causal.lagrange_lambda},
                              {"rho", model.dynamics().causal.penalty_rho},
                              {"last_h", model.dynamics().causal.last_h}};
    manifest["metrics"] = metric_snapshot;
    {
        std::ofstream os(tmp / "manifest.json");
        os << manifest.dump(2) << "\n";
    }
    fs::remove_all(final_path);
    fs::rename(tmp, final_path);
}

// Restores parameters, EMA, optimizer and schedule state; returns the step
// the checkpoint was taken at. Throws on config mismatch.
inline std::size_t load_checkpoint(const std::string& dir, WorldModel& model, AdamW* opt) {
    namespace fs = std::filesystem;
    std::ifstream is(fs::path(dir) / "manifest.json");
    if (!is) throw std::runtime_error("missing checkpoint manifest in " + dir);
    nlohmann::json manifest = nlohmann::json::parse(is);
    if (manifest["config_hash"].get<std::uint64_t>() != model.config().hash()) {
        throw ConfigError("checkpoint config does not match the current config");
    }
    for (auto& [pname, p] : model.params().all()) {
        Tensor t = io::load_tensor((fs::path(dir) / "params" / (pname + ".hct")).string());
        if (t.numel() != p.numel()) throw std::runtime_error("checkpoint shape mismatch: " + pname);
        p.mutable_data() = t.data();
        p.zero_grad();
    }
    for (auto& [pname, p] : model.ema_params().all()) {
        Tensor t = io::load_tensor((fs::path(dir) / "ema" / (pname + ".hct")).string());
        p.mutable_data() = t.data();
    }
    if (opt) {
        opt->init(model.params());
        for (auto& [pname, mv] : opt->m) {
            Tensor mt = io::load_tensor((fs::path(dir) / "opt" / (pname + ".m.hct")).string());
            Tensor vt = io::load_tensor((fs::path(dir) / "opt" / (pname + ".v.hct")).string());
            mv = mt.data();
            opt->v[pname] = vt.data();
        }
        opt->t = manifest["adam_t"].get<std::size_t>();
    }
    auto& causal = model.dynamics().causal;
    causal.lagrange_lambda = manifest["lagrangian"]["lambda"].get<double>();
    causal.penalty_rho = manifest["lagrangian"]["rho"].get<double>();
    causal.last_h = manifest["lagrangian"]["last_h"].get<double>();
    return manifest["step"].get<std::size_t>();
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct TrainResult {
    std::size_t steps_run = 0;
    std::string checkpoint_dir;
    std::map<std::string, double> final_metrics;
};

inline const std::vector<std::string>& metrics_header() {
    static const std::vector<std::string> h = {
        "step", "stage", "total", "jepa", "sbd", "diversity", "tracking", "event",
        "sparsity", "dag_h", "causal", "alive_mean", "event_count", "lr", "grad_norm"};
    return h;
}

inline TrainResult train(WorldModel& model, const Dataset& data, const std::string& out_dir,
                         const std::string& resume_from = "") {
    namespace fs = std::filesystem;
    const ModelConfig& cfg = model.config();
    fs::create_directories(out_dir);
    AdamW opt;
    opt.beta1 = cfg.adam_beta1;
    opt.beta2 = cfg.adam_beta2;
    opt.weight_decay = cfg.weight_decay;
    opt.init(model.params());
    std::size_t start_step = 0;
    if (!resume_from.empty()) {
        start_step = load_checkpoint(resume_from, model, &opt) + 1;
    }
    io::CsvWriter metrics(out_dir + "/metrics.csv", metrics_header(), start_step > 0);
    std::map<std::string, double> snapshot;
    TrainResult result;
    for (std::size_t step = start_step; step < cfg.total_steps; ++step) {
        bool stage1 = step < cfg.stage_boundary();
        Dataset::Batch batch = data.sample(cfg, step);
        model.params().zero_grads();
        WorldOutput out;
        try {
            out = model.forward(batch.frames, batch.actions, step, stage1);
        } catch (const sbd::DegenerateMaskError& e) {
            nlohmann::json dump;
            dump["step"] = step;
            dump["offending_component"] = "alpha_mask";
            dump["detail"] = e.what();
            std::ofstream os(out_dir + "/diagnostic.json");
            os << dump.dump(2) << "\n";
            throw NumericalError(std::string("training collapsed: ") + e.what() + "; dump: " +
                                 out_dir + "/diagnostic.json");
        }
        const std::vector<std::pair<std::string, const Tensor*>> parts = {
            {"total", &out.total},       {"jepa", &out.loss_jepa},
            {"sbd", &out.loss_sbd},      {"diversity", &out.loss_div},
            {"tracking", &out.loss_track}, {"event", &out.loss_event},
            {"sparsity", &out.loss_sparsity}, {"dag_h", &out.loss_dag_h},
            {"causal", &out.loss_causal}};
        for (const auto& [pname, t] : parts) {
            if (!std::isfinite(t->item())) {
                nlohmann::json dump;
                dump["step"] = step;
                dump["offending_component"] = pname;
                for (const auto& [qn, qt] : parts) dump[qn] = qt->item();
                std::ofstream os(out_dir + "/diagnostic.json");
                os << dump.dump(2) << "\n";
                throw NumericalError("non-finite loss component '" + pname + "' at step " +
                                     std::to_string(step) + "; dump: " + out_dir +
                                     "/diagnostic.json");
            }
        }
        out.total.backward();
        double lr = lr_schedule(cfg, step);
        double grad_norm = opt.step(model.params(), lr, cfg.grad_clip);
        model.ema_update(cfg.ema_tau);
        if (!stage1 && cfg.causal_grad_enabled && cfg.lagrangian_every > 0 &&
            (step + 1) % cfg.lagrangian_every == 0) {
            structure::augmented_lagrangian_step(model.dynamics().causal,
                                                 out.loss_dag_h.item());
        }
        snapshot = {{"total", out.total.item()},
                    {"jepa", out.loss_jepa.item()},
                    {"sbd", out.loss_sbd.item()},
                    {"diversity", out.loss_div.item()},
                    {"tracking", out.loss_track.item()},
                    {"event", out.loss_event.item()},
                    {"alive_mean", out.alive_mean},
                    {"event_count", out.event_count_mean}};
        metrics.row({io::CsvWriter::num(static_cast<double>(step)),
                     stage1 ? "1" : "2",
                     io::CsvWriter::num(out.total.item()),
                     io::CsvWriter::num(out.loss_jepa.item()),
                     io::CsvWriter::num(out.loss_sbd.item()),
                     io::CsvWriter::num(out.loss_div.item()),
                     io::CsvWriter::num(out.loss_track.item()),
                     io::CsvWriter::num(out.loss_event.item()),
                     io::CsvWriter::num(out.loss_sparsity.item()),
                     io::CsvWriter::num(out.loss_dag_h.item()),
                     io::CsvWriter::num(out.loss_causal.item()),
                     io::CsvWriter::num(out.alive_mean),
                     io::CsvWriter::num(out.event_count_mean),
                     io::CsvWriter::num(lr),
                     io::CsvWriter::num(grad_norm)});
        bool last = step + 1 == cfg.total_steps;
        if (last || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)) {
            std::string name = "ckpt-" + std::to_string(step);
            save_checkpoint(out_dir, name, model, opt, step, snapshot);
            result.checkpoint_dir = (fs::path(out_dir) / name).string();
        }
        result.steps_run = step + 1 - start_step;
    }
    result.final_metrics = snapshot;
    return result;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
    double ari_fg = 0;
    double event_precision = 0;
    double event_recall = 0;
    double event_f1 = 0;
    std::vector<double> pca_evr;
    double score_collision_mean = 0;
    double score_noncollision_mean = 0;
    std::size_t episodes = 0;
};

// Ground-truth labels at patch resolution: majority object id per patch.
inline std::vector<int> patch_labels(const worldgen::Episode& ep, std::size_t t,
                                     std::size_t patch) {
    std::size_t H = ep.config.height, W = ep.config.width;
    std::size_t gh = H / patch, gw = W / patch;
    std::vector<int> labels(gh * gw, 0);
    for (std::size_t gi = 0; gi < gh; ++gi)
        for (std::size_t gj = 0; gj < gw; ++gj) {
            std::map<int, std::size_t> counts;
            for (std::size_t pi = 0; pi < patch; ++pi)
                for (std::size_t pj = 0; pj < patch; ++pj) {
                    int id = static_cast<int>(
                        ep.masks.at({t, gi * patch + pi, gj * patch + pj}));
                    counts[id]++;
                }
            int best = 0;
            std::size_t best_count = 0;
            for (auto& [id, c] : counts)
                if (c > best_count) {
                    best_count = c;
                    best = id;
                }
            labels[gi * gw + gj] = best;
        }
    return labels;
}

inline EvalReport evaluate(WorldModel& model, const Dataset& eval_data,
                           const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const ModelConfig& cfg = model.config();
    NoGradGuard ng;
    EvalReport rep;
    rep.episodes = eval_data.size();
    io::CsvWriter trace_csv(out_dir + "/eval_events.csv",
                            {"episode", "t", "score", "is_boundary", "is_true_collision"});
    std::vector<double> ari_values;
    double col_sum = 0, col_n = 0, noncol_sum = 0, noncol_n = 0;
    double match_p = 0, match_r = 0, match_f = 0;
    std::vector<double> all_states;
    std::size_t state_dim = cfg.d_slot;
    Tensor edge_mean;
    for (std::size_t e = 0; e < eval_data.size(); ++e) {
        const auto& ep = eval_data.episode(e);
        std::size_t T = ep.config.frames;
        Tensor frames = reshape(ep.frames, {1, T, 3, ep.config.height, ep.config.width});
        Tensor actions = reshape(ep.actions, {1, T, 2});
        WorldOutput out = model.forward(frames, actions, 0, false);
        // foreground ARI pooled over frames
        std::vector<int> pred_all, true_all;
        std::size_t P = cfg.patches();
        for (std::size_t t = 0; t < T; ++t) {
            Tensor alpha_t = reshape(slice(out.alpha, 1, t, 1), {1, cfg.n_max, P});
            auto seg = sbd::segmentation_map(alpha_t, 0);
            auto truth = patch_labels(ep, t, cfg.patch);
            for (std::size_t i = 0; i < P; ++i) {
                pred_all.push_back(static_cast<int>(seg[i]));
                true_all.push_back(truth[i]);
            }
        }
        ari_values.push_back(worldgen::ari(pred_all, true_all, true));
        // event trace and F1
        const auto& bounds = out.events.boundaries[0];
        auto score_at = [&](std::size_t t) { return out.events.scores.at({0, t}); };
        std::vector<std::size_t> collisions = ep.collisions;
        for (std::size_t t = 0; t < T; ++t) {
            bool is_b = std::find(bounds.begin(), bounds.end(), t) != bounds.end();
            bool is_c = std::find(collisions.begin(), collisions.end(), t) != collisions.end();
            trace_csv.row({std::to_string(e), std::to_string(t), io::CsvWriter::num(score_at(t)),
                           is_b ? "1" : "0", is_c ? "1" : "0"});
            if (is_c) {
                col_sum += score_at(t);
                col_n += 1;
            } else {
                noncol_sum += score_at(t);
                noncol_n += 1;
            }
        }
        auto f1 = worldgen::event_f1(bounds, collisions, 1);
        match_p += f1.precision;
        match_r += f1.recall;
        match_f += f1.f1;
        // slot states for PCA
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t n = 0; n < cfg.n_max; ++n)
                for (std::size_t dd = 0; dd < state_dim; ++dd)
                    all_states.push_back(out.slot_states.at({0, t, n, dd}));
        // interaction structure
        Tensor em = mean_axis(out.edge_weights, 0);  // [N, N]
        edge_mean = edge_mean.defined() ? add(edge_mean, em) : em;
    }
    double n_ep = static_cast<double>(eval_data.size());
    rep.ari_fg = 0;
    for (double a : ari_values) rep.ari_fg += a;
    rep.ari_fg /= n_ep;
    rep.event_precision = match_p / n_ep;
    rep.event_recall = match_r / n_ep;
    rep.event_f1 = match_f / n_ep;
    rep.score_collision_mean = col_n > 0 ? col_sum / col_n : 0;
    rep.score_noncollision_mean = noncol_n > 0 ? noncol_sum / noncol_n : 0;
    // PCA over pooled slot trajectories
    std::size_t S = all_states.size() / state_dim;
    worldgen::PcaResult pca = worldgen::pca_project(Tensor({S, state_dim}, all_states), 2);
    rep.pca_evr = pca.explained_variance_ratio;
    // edge weight matrix CSV + one sampled adjacency
    edge_mean = scale(edge_mean, 1.0 / n_ep);
    {
        io::CsvWriter edges(out_dir + "/edge_weights.csv", {"i", "j", "weight"});
        for (std::size_t i = 0; i < cfg.n_max; ++i)
            for (std::size_t j = 0; j < cfg.n_max; ++j)
                edges.row({std::to_string(i), std::to_string(j),
                           io::CsvWriter::num(edge_mean.at({i, j}))});
        SplitRng grng = SplitRng::from(cfg.seed, RngStream::gumbel, cfg.total_steps);
        structure::CausalGraph graph = model.dynamics().causal;
        graph.temperature = cfg.gumbel_temp_end;
        Tensor adj = structure::gumbel_edge_sample(graph, grng, true);
        io::CsvWriter adj_csv(out_dir + "/sampled_adjacency.csv", {"i", "j", "edge"});
        for (std::size_t i = 0; i < cfg.n_max; ++i)
            for (std::size_t j = 0; j < cfg.n_max; ++j)
                adj_csv.row({std::to_string(i), std::to_string(j),
                             io::CsvWriter::num(adj.at({i, j}))});
    }
    nlohmann::json rj;
    rj["ari_fg"] = rep.ari_fg;
    rj["event_f1"] = {{"precision", rep.event_precision},
                      {"recall", rep.event_recall},
                      {"f1", rep.event_f1}};
    rj["pca_evr"] = rep.pca_evr;
    rj["score_collision_mean"] = rep.score_collision_mean;
    rj["score_noncollision_mean"] = rep.score_noncollision_mean;
    rj["episodes"] = rep.episodes;
    std::ofstream os(out_dir + "/eval.json");
    os << rj.dump(2) << "\n";
    return rep;
}

}  // namespace hclsm::model
