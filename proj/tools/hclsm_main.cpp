// hclsm: train / eval / bench-scan / gen-data / gradcheck / inspect.
//
// Exit codes: 0 success, 2 usage or config error, 3 numerical abort.
// Every run writes a manifest (command, config, seed, timestamps, status)
// before work begins and finalizes it on exit.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "hclsm/gradcheck_suite.hpp"
#include "hclsm/model.hpp"
#include "hclsm/train.hpp"

namespace fs = std::filesystem;
using namespace hclsm;

namespace {

std::string timestamp_now() {
    auto t = std::chrono::system_clock::now();
    std::time_t tt = std::chrono::system_clock::to_time_t(t);
    char buf[64];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&tt));
    return buf;
}

std::string git_describe() {
    FILE* pipe = popen("git describe --always --dirty 2>/dev/null", "r");
    if (!pipe) return "unknown";
    char buf[128] = {0};
    std::string out;
    while (fgets(buf, sizeof(buf), pipe)) out += buf;
    pclose(pipe);
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
    return out.empty() ? "unknown" : out;
}

// Written before work begins; finalized (status) on exit, success or failure.
class RunManifest {
public:
    RunManifest(const std::string& out_dir, const std::string& command, std::uint64_t seed)
        : path_(fs::path(out_dir) / "run_manifest.json") {
        fs::create_directories(out_dir);
        doc_["command"] = command;
        doc_["seed"] = seed;
        doc_["start"] = timestamp_now();
        doc_["git"] = git_describe();
        doc_["status"] = "running";
        write();
    }

    void set_config(const std::map<std::string, std::string>& snapshot) {
        doc_["config"] = snapshot;
        write();
    }

    void add_output(const std::string& key, const std::string& path) {
        doc_["outputs"][key] = path;
        write();
    }

    void finalize(const std::string& status) {
        doc_["status"] = status;
        doc_["end"] = timestamp_now();
        write();
    }

private:
    void write() const {
        std::ofstream os(path_);
        os << doc_.dump(2) << "\n";
    }
    fs::path path_;
    nlohmann::json doc_;
};

model::ModelConfig config_from_cli(const std::string& config_path,
                                   const std::vector<std::string>& overrides) {
    KeyValueConfig kv =
        config_path.empty() ? KeyValueConfig() : KeyValueConfig::from_file(config_path);
    for (const std::string& kvpair : overrides) {
        auto eq = kvpair.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects key=value, got '" + kvpair + "'");
        }
        kv.set(kvpair.substr(0, eq), kvpair.substr(eq + 1));
    }
    return model::ModelConfig::from_config(kv);
}

model::ModelConfig config_from_checkpoint(const std::string& ckpt_dir) {
    std::ifstream is(fs::path(ckpt_dir) / "manifest.json");
    if (!is) throw ConfigError("cannot read checkpoint manifest in " + ckpt_dir);
    nlohmann::json manifest = nlohmann::json::parse(is);
    KeyValueConfig kv;
    for (auto& [k, v] : manifest["config"].items()) kv.set(k, v.get<std::string>());
    return model::ModelConfig::from_config(kv);
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& dataset, const std::string& out_dir,
              const std::string& resume) {
    model::ModelConfig cfg = config_from_cli(config_path, overrides);
    RunManifest manifest(out_dir, "train", cfg.seed);
    manifest.set_config(cfg.snapshot());
    manifest.add_output("metrics", out_dir + "/metrics.csv");
    try {
        model::Dataset data = model::Dataset::load(dataset, model::Split::train);
        model::WorldModel m(cfg);
        model::TrainResult result = model::train(m, data, out_dir, resume);
        manifest.add_output("checkpoint", result.checkpoint_dir);
        manifest.finalize("ok");
        std::printf("trained %zu steps; final total loss %.6g\n", result.steps_run,
                    result.final_metrics.count("total") ? result.final_metrics.at("total") : 0.0);
        return 0;
    } catch (const model::NumericalError& e) {
        manifest.finalize("numerical-abort");
        std::fprintf(stderr, "numerical abort: %s\n", e.what());
        return 3;
    } catch (...) {
        manifest.finalize("failed");
        throw;
    }
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset,
             const std::string& out_dir, std::uint64_t seed_override) {
    model::ModelConfig cfg = config_from_checkpoint(checkpoint);
    if (seed_override) cfg.seed = seed_override;
    RunManifest manifest(out_dir, "eval", cfg.seed);
    manifest.set_config(cfg.snapshot());
    try {
        model::WorldModel m(cfg);
        model::load_checkpoint(checkpoint, m, nullptr);
        model::Dataset eval_data = model::Dataset::load(dataset, model::Split::eval);
        model::EvalReport rep = model::evaluate(m, eval_data, out_dir);
        manifest.add_output("report", out_dir + "/eval.json");
        manifest.finalize("ok");
        std::printf("ari_fg %.4f  event_f1 %.4f  pca_evr [%.3f, %.3f]\n", rep.ari_fg,
                    rep.event_f1, rep.pca_evr.size() > 0 ? rep.pca_evr[0] : 0.0,
                    rep.pca_evr.size() > 1 ? rep.pca_evr[1] : 0.0);
        return 0;
    } catch (...) {
        manifest.finalize("failed");
        throw;
    }
}

int cmd_bench_scan(std::size_t t, std::size_t bn, std::size_t dinner, std::size_t dstate,
                   std::size_t workers, std::size_t chunk, std::size_t repeats,
                   const std::string& csv_path, std::uint64_t seed) {
    fs::path outp = fs::path(csv_path).parent_path();
    RunManifest manifest(outp.empty() ? "." : outp.string(), "bench-scan", seed);
    try {
        scan::BenchConfig tiny;
        tiny.name = "Tiny";
        tiny.bn = 128;
        tiny.t = 16;
        scan::BenchConfig base;
        base.name = "Base";
        base.bn = 512;
        base.t = 16;
        scan::BenchConfig custom;
        custom.name = "Custom";
        custom.bn = bn;
        custom.t = t;
        std::vector<scan::BenchConfig> configs = {tiny, base};
        bool custom_is_table_row = (bn == 128 || bn == 512) && t == 16;
        if (!custom_is_table_row) configs.push_back(custom);
        io::CsvWriter csv(csv_path,
                          {"config", "bn", "t", "sequential_ms", "parallel_ms", "speedup"});
        for (auto& c : configs) {
            c.d_inner = dinner;
            c.d_state = dstate;
            c.workers = workers;
            c.chunk = chunk;
            c.repeats = repeats;
            c.seed = seed;
            scan::BenchRow row = scan::bench_scan(c);
            csv.row({row.config, std::to_string(row.bn), std::to_string(row.t),
                     io::CsvWriter::num(row.sequential_ms), io::CsvWriter::num(row.parallel_ms),
                     io::CsvWriter::num(row.speedup)});
            std::printf("%-8s bn=%-5zu t=%-5zu seq %9.3f ms  par %9.3f ms  %5.2fx\n",
                        row.config.c_str(), row.bn, row.t, row.sequential_ms, row.parallel_ms,
                        row.speedup);
        }
        manifest.add_output("csv", csv_path);
        manifest.finalize("ok");
        return 0;
    } catch (...) {
        manifest.finalize("failed");
        throw;
    }
}

int cmd_gen_data(const std::string& out_dir, std::size_t episodes, std::size_t objects,
                 std::uint64_t seed0, std::size_t frames, std::size_t size, double vmin,
                 double vmax, double rmin, double rmax) {
    RunManifest manifest(out_dir, "gen-data", seed0);
    try {
        worldgen::EpisodeConfig cfg;
        cfg.n_objects = objects;
        cfg.frames = frames;
        cfg.height = size;
        cfg.width = size;
        cfg.min_speed = vmin;
        cfg.max_speed = vmax;
        cfg.min_radius = rmin;
        cfg.max_radius = rmax;
        for (std::size_t i = 0; i < episodes; ++i) {
            worldgen::Episode ep = worldgen::gen_episode(cfg, seed0 + i);
            char name[32];
            std::snprintf(name, sizeof(name), "ep-%05zu", i);
            io::save_episode((fs::path(out_dir) / name).string(), ep);
        }
        manifest.add_output("episodes", out_dir);
        manifest.finalize("ok");
        std::printf("generated %zu episodes into %s\n", episodes, out_dir.c_str());
        return 0;
    } catch (...) {
        manifest.finalize("failed");
        throw;
    }
}

int cmd_gradcheck(const std::string& out_dir, std::uint64_t seed) {
    RunManifest manifest(out_dir, "gradcheck", seed);
    try {
        auto suite = build_gradcheck_suite(seed);
        std::size_t failures = 0;
        std::printf("%-28s %14s  status\n", "op", "max_rel_err");
        for (auto& c : suite) {
            double err = c.run();
            bool ok = err <= 1e-4;
            failures += ok ? 0 : 1;
            std::printf("%-28s %14.3e  %s\n", c.name.c_str(), err, ok ? "pass" : "FAIL");
        }
        std::printf("%zu ops checked, %zu failures\n", suite.size(), failures);
        manifest.finalize(failures == 0 ? "ok" : "failed");
        return failures == 0 ? 0 : 1;
    } catch (...) {
        manifest.finalize("failed");
        throw;
    }
}

int cmd_inspect(const std::string& checkpoint, const std::string& episode_dir,
                const std::string& out_dir, std::uint64_t seed_override) {
    model::ModelConfig cfg = config_from_checkpoint(checkpoint);
    if (seed_override) cfg.seed = seed_override;
    RunManifest manifest(out_dir, "inspect", cfg.seed);
    try {
        model::WorldModel m(cfg);
        model::load_checkpoint(checkpoint, m, nullptr);
        worldgen::Episode ep = io::load_episode(episode_dir);
        NoGradGuard ng;
        std::size_t T = ep.config.frames;
        Tensor frames = reshape(ep.frames, {1, T, 3, ep.config.height, ep.config.width});
        Tensor actions = reshape(ep.actions, {1, T, 2});
        model::WorldOutput out = m.forward(frames, actions, 0, false);
        std::size_t gh = cfg.grid_h(), gw = cfg.grid_w(), P = cfg.patches();
        std::size_t t_show = T / 2;
        // per-slot alpha heatmaps
        for (std::size_t n = 0; n < cfg.n_max; ++n) {
            std::vector<double> img(P);
            for (std::size_t pos = 0; pos < P; ++pos) img[pos] = out.alpha.at({0, t_show, n, pos});
            char name[64];
            std::snprintf(name, sizeof(name), "alpha_slot%02zu.pgm", n);
            io::save_pgm((fs::path(out_dir) / name).string(), img, gh, gw);
        }
        // segmentation map (argmax over slots)
        Tensor alpha_t = reshape(slice(out.alpha, 1, t_show, 1), {1, cfg.n_max, P});
        auto seg = sbd::segmentation_map(alpha_t, 0);
        io::save_label_pgm((fs::path(out_dir) / "segmentation.pgm").string(), seg, gh, gw,
                           cfg.n_max);
        // event trace
        {
            io::CsvWriter csv((fs::path(out_dir) / "events.csv").string(),
                              {"t", "score", "is_boundary", "is_true_collision"});
            const auto& bounds = out.events.boundaries[0];
            for (std::size_t t = 0; t < T; ++t) {
                bool is_b = std::find(bounds.begin(), bounds.end(), t) != bounds.end();
                bool is_c = std::find(ep.collisions.begin(), ep.collisions.end(), t) !=
                            ep.collisions.end();
                csv.row({std::to_string(t), io::CsvWriter::num(out.events.scores.at({0, t})),
                         is_b ? "1" : "0", is_c ? "1" : "0"});
            }
        }
        // slot trajectories projected to 2D
        {
            std::vector<double> states;
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t n = 0; n < cfg.n_max; ++n)
                    for (std::size_t d = 0; d < cfg.d_slot; ++d)
                        states.push_back(out.slot_states.at({0, t, n, d}));
            worldgen::PcaResult pca =
                worldgen::pca_project(Tensor({T * cfg.n_max, cfg.d_slot}, states), 2);
            io::CsvWriter csv((fs::path(out_dir) / "pca.csv").string(),
                              {"t", "slot", "pc1", "pc2", "evr1", "evr2"});
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t n = 0; n < cfg.n_max; ++n)
                    csv.row({std::to_string(t), std::to_string(n),
                             io::CsvWriter::num(pca.coords.at({t * cfg.n_max + n, 0})),
                             io::CsvWriter::num(pca.coords.at({t * cfg.n_max + n, 1})),
                             io::CsvWriter::num(pca.explained_variance_ratio[0]),
                             io::CsvWriter::num(pca.explained_variance_ratio[1])});
        }
        manifest.finalize("ok");
        std::printf("inspect outputs written to %s\n", out_dir.c_str());
        return 0;
    } catch (...) {
        manifest.finalize("failed");
        throw;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hclsm: object-centric hierarchical world model"};
    app.require_subcommand(1);

    // train
    auto* train_cmd = app.add_subcommand("train", "train a model on generated episodes");
    std::string config_path, dataset, out_dir = "runs/train", resume;
    std::vector<std::string> overrides;
    std::uint64_t seed_flag = 0;
    std::size_t steps_flag = 0;
    train_cmd->add_option("--config", config_path, "key = value config file");
    train_cmd->add_option("--dataset", dataset, "episode dataset directory")->required();
    train_cmd->add_option("--out", out_dir, "output directory");
    train_cmd->add_option("--resume", resume, "checkpoint directory to resume from");
    train_cmd->add_option("--set", overrides, "config override key=value (repeatable)");
    train_cmd->add_option("--seed", seed_flag, "root seed override");
    train_cmd->add_option("--steps", steps_flag, "total steps override");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the held-out split");
    std::string eval_ckpt, eval_dataset, eval_out = "runs/eval";
    std::uint64_t eval_seed = 0;
    eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->required();
    eval_cmd->add_option("--dataset", eval_dataset, "episode dataset directory")->required();
    eval_cmd->add_option("--out", eval_out, "output directory");
    eval_cmd->add_option("--seed", eval_seed, "seed override");

    // bench-scan
    auto* bench_cmd = app.add_subcommand("bench-scan", "selective-scan kernel benchmark");
    std::size_t b_t = 16, b_bn = 128, b_dinner = 64, b_dstate = 8, b_workers = 8, b_chunk = 64,
                b_repeats = 3;
    std::string b_csv = "bench_scan.csv";
    std::uint64_t b_seed = 7;
    bench_cmd->add_option("--t", b_t, "sequence length");
    bench_cmd->add_option("--bn", b_bn, "B*N rows");
    bench_cmd->add_option("--dinner", b_dinner, "inner width");
    bench_cmd->add_option("--dstate", b_dstate, "state width");
    bench_cmd->add_option("--workers", b_workers, "parallel workers");
    bench_cmd->add_option("--chunk", b_chunk, "chunk length");
    bench_cmd->add_option("--repeats", b_repeats, "median of this many repeats");
    bench_cmd->add_option("--csv", b_csv, "output CSV path");
    bench_cmd->add_option("--seed", b_seed, "input seed");

    // gen-data
    auto* gen_cmd = app.add_subcommand("gen-data", "generate synthetic episodes");
    std::string gen_out = "data";
    std::size_t gen_episodes = 256, gen_objects = 3, gen_frames = 16, gen_size = 64;
    std::uint64_t gen_seed0 = 1000;
    double gen_vmin = 0.8, gen_vmax = 2.5, gen_rmin = 0.14, gen_rmax = 0.21;
    gen_cmd->add_option("--out", gen_out, "output dataset directory")->required();
    gen_cmd->add_option("--episodes", gen_episodes, "episode count");
    gen_cmd->add_option("--objects", gen_objects, "objects per scene");
    gen_cmd->add_option("--seed0", gen_seed0, "first episode seed");
    gen_cmd->add_option("--frames", gen_frames, "frames per episode");
    gen_cmd->add_option("--size", gen_size, "frame height/width");
    gen_cmd->add_option("--vmin", gen_vmin, "min speed (px/frame)");
    gen_cmd->add_option("--vmax", gen_vmax, "max speed (px/frame)");
    gen_cmd->add_option("--rmin", gen_rmin, "min radius (fraction of frame)");
    gen_cmd->add_option("--rmax", gen_rmax, "max radius (fraction of frame)");

    // gradcheck
    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference suite over all ops");
    std::string grad_out = "runs/gradcheck";
    std::uint64_t grad_seed = 20240801;
    grad_cmd->add_option("--out", grad_out, "output directory");
    grad_cmd->add_option("--seed", grad_seed, "suite seed");

    // inspect
    auto* inspect_cmd = app.add_subcommand("inspect", "dump alpha maps, events and trajectories");
    std::string ins_ckpt, ins_episode, ins_out = "runs/inspect";
    std::uint64_t ins_seed = 0;
    inspect_cmd->add_option("--checkpoint", ins_ckpt, "checkpoint directory")->required();
    inspect_cmd->add_option("--episode", ins_episode, "episode directory")->required();
    inspect_cmd->add_option("--out", ins_out, "output directory");
    inspect_cmd->add_option("--seed", ins_seed, "seed override");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*train_cmd) {
            if (seed_flag) overrides.push_back("seed=" + std::to_string(seed_flag));
            if (steps_flag) overrides.push_back("total_steps=" + std::to_string(steps_flag));
            return cmd_train(config_path, overrides, dataset, out_dir, resume);
        }
        if (*eval_cmd) return cmd_eval(eval_ckpt, eval_dataset, eval_out, eval_seed);
        if (*bench_cmd) {
            return cmd_bench_scan(b_t, b_bn, b_dinner, b_dstate, b_workers, b_chunk, b_repeats,
                                  b_csv, b_seed);
        }
        if (*gen_cmd) {
            return cmd_gen_data(gen_out, gen_episodes, gen_objects, gen_seed0, gen_frames,
                                gen_size, gen_vmin, gen_vmax, gen_rmin, gen_rmax);
        }
        if (*grad_cmd) return cmd_gradcheck(grad_out, grad_seed);
        if (*inspect_cmd) return cmd_inspect(ins_ckpt, ins_episode, ins_out, ins_seed);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
