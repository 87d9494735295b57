#pragma once

// Full world-model assembly: miniature patch encoder, per-frame slot
// attention with temporal propagation, spatial broadcast decoding against
// EMA-branch features, action-conditioned per-object selective SSM, event
// hierarchy, GNN interaction messages, loss composition under the two-stage
// schedule, and the AdamW training loop with checkpointing.

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "hclsm/config.hpp"
#include "hclsm/hierarchy.hpp"
#include "hclsm/nn.hpp"
#include "hclsm/sbd.hpp"
#include "hclsm/scan.hpp"
#include "hclsm/serialize.hpp"
#include "hclsm/slots.hpp"
#include "hclsm/structure.hpp"
#include "hclsm/tensor.hpp"
#include "hclsm/worldgen.hpp"

namespace hclsm::model {

// Raised when training hits a non-finite loss; carries the diagnostic text.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t d_world = 64;
    std::size_t d_slot = 64;
    std::size_t d_inner = 64;
    std::size_t d_state = 8;
    std::size_t n_max = 8;
    std::size_t k_slot_iters = 3;
    std::size_t n_summary = 4;
    std::size_t patch = 8;
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t clip_frames = 16;
    std::size_t batch = 4;
    std::size_t heads = 4;
    std::size_t decoder_channels = 64;
    std::size_t event_hidden = 32;
    double stage_ratio = 0.4;
    double w_sbd_stage1 = 5.0;
    double w_div_stage1 = 0.1;
    double w_sbd_stage2 = 1.0;
    double lambda_obj = 0.5;
    double lambda_causal = 0.01;
    bool causal_grad_enabled = true;
    double ema_tau = 0.996;
    double lr = 1e-3;
    std::size_t warmup = 100;
    std::size_t total_steps = 2000;
    double weight_decay = 0.05;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    double grad_clip = 1.0;
    std::size_t checkpoint_every = 1000;
    double birth_threshold = 0.3;
    double sinkhorn_temp = 0.05;
    std::size_t sinkhorn_iters = 30;
    double gumbel_temp_start = 1.0;
    double gumbel_temp_end = 0.1;
    std::size_t lagrangian_every = 500;
    std::size_t scan_chunk = 64;
    std::uint64_t seed = 1;

    std::size_t grid_h() const { return height / patch; }
    std::size_t grid_w() const { return width / patch; }
    std::size_t patches() const { return grid_h() * grid_w(); }
    std::size_t stage_boundary() const {
        return static_cast<std::size_t>(stage_ratio * static_cast<double>(total_steps));
    }

    static const std::vector<std::string>& known_keys() {
        static const std::vector<std::string> keys = {
            "d_model", "d_world", "d_slot", "d_inner", "d_state", "n_max", "k_slot_iters",
            "n_summary", "patch", "height", "width", "clip_frames", "batch", "heads",
            "decoder_channels", "event_hidden", "stage_ratio", "w_sbd_stage1", "w_div_stage1",
            "w_sbd_stage2", "lambda_obj", "lambda_causal", "causal_grad_enabled", "ema_tau", "lr",
            "warmup", "total_steps", "weight_decay", "adam_beta1", "adam_beta2", "grad_clip",
            "checkpoint_every", "birth_threshold", "sinkhorn_temp", "sinkhorn_iters",
            "gumbel_temp_start", "gumbel_temp_end", "lagrangian_every", "scan_chunk", "seed"};
        return keys;
    }

    static ModelConfig from_config(const KeyValueConfig& kv) {
        for (const auto& [key, value] : kv.all()) {
            const auto& known = known_keys();
            if (std::find(known.begin(), known.end(), key) == known.end()) {
                throw ConfigError("unknown config key: " + key + " = " + value);
            }
        }
        ModelConfig c;
        c.d_model = kv.get_size("d_model", c.d_model);
        c.d_world = kv.get_size("d_world", c.d_world);
        c.d_slot = kv.get_size("d_slot", c.d_slot);
        c.d_inner = kv.get_size("d_inner", c.d_inner);
        c.d_state = kv.get_size("d_state", c.d_state);
        c.n_max = kv.get_size("n_max", c.n_max);
        c.k_slot_iters = kv.get_size("k_slot_iters", c.k_slot_iters);
        c.n_summary = kv.get_size("n_summary", c.n_summary);
        c.patch = kv.get_size("patch", c.patch);
        c.height = kv.get_size("height", c.height);
        c.width = kv.get_size("width", c.width);
        c.clip_frames = kv.get_size("clip_frames", c.clip_frames);
        c.batch = kv.get_size("batch", c.batch);
        c.heads = kv.get_size("heads", c.heads);
        c.decoder_channels = kv.get_size("decoder_channels", c.decoder_channels);
        c.event_hidden = kv.get_size("event_hidden", c.event_hidden);
        c.stage_ratio = kv.get_double("stage_ratio", c.stage_ratio);
        c.w_sbd_stage1 = kv.get_double("w_sbd_stage1", c.w_sbd_stage1);
        c.w_div_stage1 = kv.get_double("w_div_stage1", c.w_div_stage1);
        c.w_sbd_stage2 = kv.get_double("w_sbd_stage2", c.w_sbd_stage2);
        c.lambda_obj = kv.get_double("lambda_obj", c.lambda_obj);
        c.lambda_causal = kv.get_double("lambda_causal", c.lambda_causal);
        c.causal_grad_enabled = kv.get_size("causal_grad_enabled", c.causal_grad_enabled ? 1 : 0) != 0;
        c.ema_tau = kv.get_double("ema_tau", c.ema_tau);
        c.lr = kv.get_double("lr", c.lr);
        c.warmup = kv.get_size("warmup", c.warmup);
        c.total_steps = kv.get_size("total_steps", c.total_steps);
        c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
        c.adam_beta1 = kv.get_double("adam_beta1", c.adam_beta1);
        c.adam_beta2 = kv.get_double("adam_beta2", c.adam_beta2);
        c.grad_clip = kv.get_double("grad_clip", c.grad_clip);
        c.checkpoint_every = kv.get_size("checkpoint_every", c.checkpoint_every);
        c.birth_threshold = kv.get_double("birth_threshold", c.birth_threshold);
        c.sinkhorn_temp = kv.get_double("sinkhorn_temp", c.sinkhorn_temp);
        c.sinkhorn_iters = kv.get_size("sinkhorn_iters", c.sinkhorn_iters);
        c.gumbel_temp_start = kv.get_double("gumbel_temp_start", c.gumbel_temp_start);
        c.gumbel_temp_end = kv.get_double("gumbel_temp_end", c.gumbel_temp_end);
        c.lagrangian_every = kv.get_size("lagrangian_every", c.lagrangian_every);
        c.scan_chunk = kv.get_size("scan_chunk", c.scan_chunk);
        c.seed = kv.get_u64("seed", c.seed);
        c.validate();
        return c;
    }

    void validate() const {
        if (stage_ratio < 0.0 || stage_ratio >= 1.0) {
            throw ConfigError("stage_ratio must be in [0, 1)");
        }
        if (height % patch != 0 || width % patch != 0) {
            throw ConfigError("height and width must be divisible by patch");
        }
        if (d_model % heads != 0 || d_slot % heads != 0) {
            throw ConfigError("widths must be divisible by heads");
        }
        if (n_max < 1 || clip_frames < 1 || batch < 1) {
            throw ConfigError("n_max, clip_frames, batch must be positive");
        }
    }

    std::map<std::string, std::string> snapshot() const {
        std::map<std::string, std::string> m;
        auto put = [&](const std::string& k, double v) { m[k] = io::CsvWriter::num(v); };
        put("d_model", d_model); put("d_world", d_world); put("d_slot", d_slot);
        put("d_inner", d_inner); put("d_state", d_state); put("n_max", n_max);
        put("k_slot_iters", k_slot_iters); put("n_summary", n_summary); put("patch", patch);
        put("height", height); put("width", width); put("clip_frames", clip_frames);
        put("batch", batch); put("heads", heads); put("decoder_channels", decoder_channels);
        put("event_hidden", event_hidden); put("stage_ratio", stage_ratio);
        put("w_sbd_stage1", w_sbd_stage1); put("w_div_stage1", w_div_stage1);
        put("w_sbd_stage2", w_sbd_stage2); put("lambda_obj", lambda_obj);
        put("lambda_causal", lambda_causal); put("causal_grad_enabled", causal_grad_enabled);
        put("ema_tau", ema_tau); put("lr", lr); put("warmup", warmup);
        put("total_steps", total_steps); put("weight_decay", weight_decay);
        put("adam_beta1", adam_beta1); put("adam_beta2", adam_beta2); put("grad_clip", grad_clip);
        put("checkpoint_every", checkpoint_every); put("birth_threshold", birth_threshold);
        put("sinkhorn_temp", sinkhorn_temp); put("sinkhorn_iters", sinkhorn_iters);
        put("gumbel_temp_start", gumbel_temp_start); put("gumbel_temp_end", gumbel_temp_end);
        put("lagrangian_every", lagrangian_every); put("scan_chunk", scan_chunk);
        put("seed", static_cast<double>(seed));
        return m;
    }

    std::uint64_t hash() const {
        std::uint64_t h = 1469598103934665603ULL;
        for (const auto& [k, v] : snapshot()) {
            for (char c : k + "=" + v) {
                h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
                h *= 1099511628211ULL;
            }
        }
        return h;
    }
};

// Perception + decomposition parameters; this subset has an EMA target copy.
struct EncoderParams {
    Linear patch_proj;  // patch*patch*3 -> d_model
    Linear pos_proj;    // (x, y, 1-x, 1-y) -> d_model soft position code
    Tensor t_pos;       // [max_frames, d_model] per-frame temporal embedding
    TransformerBlock block1, block2;
    LayerNormParams ln_out;
    Linear to_world;    // d_model -> d_world
    slots::SlotInit slot_init;
    slots::SlotAttentionParams slot_attn;

    static EncoderParams make(ParamStore& ps, const ModelConfig& cfg) {
        EncoderParams e;
        std::size_t pdim = cfg.patch * cfg.patch * 3;
        e.patch_proj = Linear::make(ps, "enc.patch", pdim, cfg.d_model);
        // low-gain position code: content (color) dominates the early
        // slot-competition metric, position detail grows in with training
        e.pos_proj = Linear::make(ps, "enc.pos", 4, cfg.d_model, 0.2);
        e.t_pos = ps.param("enc.t_pos", {64, cfg.d_model}, 0.02);
        e.block1 = TransformerBlock::make(ps, "enc.blk1", cfg.d_model, cfg.heads);
        e.block2 = TransformerBlock::make(ps, "enc.blk2", cfg.d_model, cfg.heads);
        e.ln_out = LayerNormParams::make(ps, "enc.ln_out", cfg.d_model);
        e.to_world = Linear::make(ps, "enc.to_world", cfg.d_model, cfg.d_world);
        e.slot_init = slots::SlotInit::make(ps, "slots.init", cfg.d_slot);
        e.slot_attn = slots::SlotAttentionParams::make(ps, "slots.attn", cfg.d_slot, cfg.d_world,
                                                       cfg.k_slot_iters);
        e.slot_attn.birth_threshold = cfg.birth_threshold;
        return e;
    }
};

struct DynamicsParams {
    Linear action_embed;   // 2 -> d_slot
    Linear slot_to_inner;  // d_slot -> d_inner
    Linear inner_to_slot;  // d_inner -> d_slot
    scan::SsmParams ssm;
    scan::SsmParams global_ssm;
    hierarchy::EventDetectorParams event_det;
    hierarchy::EventTransformerParams event_tfm;
    hierarchy::GoalParams goal;
    Tensor gates;  // [3]
    structure::GnnParams gnn;
    structure::CausalGraph causal;

    static DynamicsParams make(ParamStore& ps, const ModelConfig& cfg) {
        DynamicsParams d;
        bool fresh = !ps.has("dyn.to_inner.w");
        d.action_embed = Linear::make(ps, "dyn.action", 2, cfg.d_slot);
        d.slot_to_inner = Linear::make(ps, "dyn.to_inner", cfg.d_slot, cfg.d_inner);
        d.inner_to_slot = Linear::make(ps, "dyn.to_slot", cfg.d_inner, cfg.d_slot);
        if (fresh && cfg.d_slot == cfg.d_inner) {
            // identity init keeps the dynamics tower a near-identity map at
            // the start of stage 2, so predictions begin at the slot scale
            auto ident = [&](Tensor& w) {
                auto& wd = w.mutable_data();
                std::fill(wd.begin(), wd.end(), 0.0);
                for (std::size_t i = 0; i < cfg.d_slot; ++i) wd[i * cfg.d_slot + i] = 1.0;
            };
            ident(d.slot_to_inner.w);
            ident(d.inner_to_slot.w);
        }
        d.ssm = scan::SsmParams::make(ps, "dyn.ssm", cfg.d_inner, cfg.d_state);
        d.global_ssm = scan::SsmParams::make(ps, "dyn.gssm", cfg.d_slot, cfg.d_state);
        d.event_det = hierarchy::EventDetectorParams::make(ps, "dyn.event", 3 * cfg.d_slot,
                                                           cfg.event_hidden);
        d.event_tfm = hierarchy::EventTransformerParams::make(ps, "dyn.etfm", cfg.d_slot, cfg.heads);
        d.goal = hierarchy::GoalParams::make(ps, "dyn.goal", cfg.d_slot, cfg.n_summary, cfg.heads);
        d.gates = ps.param_const("dyn.gates", {3}, 0.0);
        d.gnn = structure::GnnParams::make(ps, "dyn.gnn", cfg.d_slot);
        d.causal = structure::CausalGraph::make(ps, "dyn.causal", cfg.n_max);
        return d;
    }
};

struct WorldOutput {
    Tensor slot_states;  // [B, T, N, d_slot]
    Tensor p_alive;      // [B, T, N]
    Tensor alpha;        // [B, T, N, P]
    Tensor attn;         // [B, T, N, M] final slot-attention map
    Tensor l0_states;    // [B, T, N, d_slot] Level-0 trace (detector input)
    Tensor combined;     // [B, T, N, d_slot]
    Tensor predictions;  // [B, T-1, N, d_slot]
    Tensor goal_tokens;  // [B, n_summary, d_slot]
    Tensor edge_weights; // [B*T, N, N] (interaction structure, detached)
    hierarchy::EventTrace events;
    Tensor loss_jepa, loss_sbd, loss_div, loss_track, loss_event;
    Tensor loss_sparsity, loss_dag_h, loss_causal;
    Tensor total;
    double alive_mean = 0;
    double event_count_mean = 0;
};

class WorldModel {
public:
    explicit WorldModel(const ModelConfig& cfg)
        : cfg_(cfg), store_(cfg.seed), ema_store_(cfg.seed + 1) {
        enc_ = EncoderParams::make(store_, cfg);
        decoder_ = sbd::DecoderParams::make(store_, "sbd.dec", cfg.d_slot, cfg.d_world,
                                            cfg.decoder_channels);
        dyn_ = DynamicsParams::make(store_, cfg);
        ema_enc_ = EncoderParams::make(ema_store_, cfg);
        copy_online_to_ema();
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    ParamStore& ema_params() { return ema_store_; }
    DynamicsParams& dynamics() { return dyn_; }
    EncoderParams& encoder() { return enc_; }
    const EncoderParams& ema_encoder_ref() const { return ema_enc_; }

    void copy_online_to_ema() {
        for (auto& [name, target] : ema_store_.all()) {
            const Tensor src = store_.get(name);
            target.mutable_data() = src.data();
        }
    }

    // theta_minus <- tau * theta_minus + (1 - tau) * theta
    void ema_update(double tau) {
        if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("ema tau must be in [0, 1]");
        for (auto& [name, target] : ema_store_.all()) {
            const Tensor src = store_.get(name);
            auto& tv = target.mutable_data();
            const auto& sv = src.data();
            for (std::size_t i = 0; i < tv.size(); ++i) tv[i] = tau * tv[i] + (1.0 - tau) * sv[i];
        }
    }

    // Patch tokens for the given branch: [B, T, M, d_world].
    Tensor patch_embed(const Tensor& frames, const EncoderParams& e) const {
        const Shape& s = frames.shape();
        if (s.size() != 5) throw std::invalid_argument("patch_embed expects [B,T,C,H,W]");
        std::size_t B = s[0], T = s[1], C = s[2], H = s[3], W = s[4];
        if (H % cfg_.patch != 0 || W % cfg_.patch != 0) {
            throw std::invalid_argument("frame size not divisible by patch");
        }
        Tensor patches = extract_patches(frames);  // [B, T, M, p*p*C]
        (void)C;
        Tensor x = e.patch_proj(patches);          // [B, T, M, d_model]
        std::size_t M = cfg_.patches();
        // soft position code: linear in the normalized patch-grid coordinates
        std::size_t gh = cfg_.grid_h(), gw = cfg_.grid_w();
        std::vector<double> coords(M * 4);
        for (std::size_t gi = 0; gi < gh; ++gi)
            for (std::size_t gj = 0; gj < gw; ++gj) {
                double yy = gh > 1 ? static_cast<double>(gi) / (gh - 1) : 0.5;
                double xx = gw > 1 ? static_cast<double>(gj) / (gw - 1) : 0.5;
                double* c = &coords[(gi * gw + gj) * 4];
                c[0] = xx;
                c[1] = yy;
                c[2] = 1.0 - xx;
                c[3] = 1.0 - yy;
            }
        Tensor grid_t({M, 4}, std::move(coords));
        x = add(x, reshape(e.pos_proj(grid_t), {1, 1, M, cfg_.d_model}));
        Tensor tpos = reshape(slice(e.t_pos, 0, 0, T), {1, T, 1, cfg_.d_model});
        x = add(x, tpos);
        Tensor flat = reshape(x, {B * T, M, cfg_.d_model});
        flat = e.block1(flat, false);
        flat = e.block2(flat, false);
        flat = clamp(e.ln_out(flat), -50.0, 50.0);
        Tensor world = e.to_world(flat);
        return reshape(world, {B, T, M, cfg_.d_world});
    }

    // Per-frame slot attention with temporal propagation; slots at t start
    // from the matched slots of t-1. Returns slots [B,T,N,d], p_alive
    // [B,T,N], attn maps [B,T,N,M] and per-step assignments [B,(T-1),N,N].
    struct PerceptionOut {
        Tensor slots, p_alive, attn, assignments;
    };

    PerceptionOut perceive(const Tensor& tokens, const EncoderParams& e,
                           const Tensor& init_noise) const {
        const Shape& s = tokens.shape();
        std::size_t B = s[0], T = s[1], M = s[2];
        std::size_t N = cfg_.n_max, d = cfg_.d_slot;
        Tensor prev;
        std::vector<Tensor> slots_t, alive_t, attn_t, assign_t;
        for (std::size_t t = 0; t < T; ++t) {
            Tensor frame_tokens = reshape(slice(tokens, 1, t, 1), {B, M, cfg_.d_world});
            Tensor init = t == 0 ? add(mul(exp(e.slot_init.log_sigma), init_noise), e.slot_init.mu)
                                 : prev;
            auto [cur, attn] = slots::slot_attention_iterate(init, frame_tokens, e.slot_attn);
            Tensor p_alive = slots::existence_head(cur, e.slot_attn.existence);
            Tensor resid = slots::residual_energy(attn, p_alive);
            slots::slot_birth(cur, p_alive, frame_tokens, resid, e.slot_attn.birth_threshold,
                              e.slot_attn.birth_proj);
            if (t > 0) {
                Tensor assign = slots::sinkhorn_match(prev, cur, cfg_.sinkhorn_iters,
                                                      cfg_.sinkhorn_temp);
                assign_t.push_back(reshape(assign, {B, 1, N, N}));
            }
            slots_t.push_back(reshape(cur, {B, 1, N, d}));
            alive_t.push_back(reshape(p_alive, {B, 1, N}));
            attn_t.push_back(reshape(attn, {B, 1, N, M}));
            prev = cur;
        }
        PerceptionOut out;
        out.slots = concat(slots_t, 1);
        out.p_alive = concat(alive_t, 1);
        out.attn = concat(attn_t, 1);
        if (!assign_t.empty()) out.assignments = concat(assign_t, 1);
        return out;
    }

    // Full forward pass; assembles all loss parts. `step` drives stochastic
    // draws (slot noise, gumbel) and the stage schedule.
    WorldOutput forward(const Tensor& frames, const Tensor& actions, std::size_t step,
                        bool stage1) const {
        const Shape& fs = frames.shape();
        std::size_t B = fs[0], T = fs[1];
        std::size_t N = cfg_.n_max, d = cfg_.d_slot, P = cfg_.patches();
        WorldOutput out;
        SplitRng noise_rng = SplitRng::from(cfg_.seed, RngStream::slot_noise, step);
        Tensor init_noise = Tensor::randn({B, N, d}, noise_rng);

        // online encoder branch
        Tensor tokens = patch_embed(frames, enc_);
        PerceptionOut per = perceive(tokens, enc_, init_noise);
        out.slot_states = per.slots;
        out.p_alive = per.p_alive;
        out.attn = per.attn;

        // EMA target branch: never receives gradients
        Tensor ema_feat, ema_slots;
        {
            NoGradGuard ng;
            Tensor etokens = patch_embed(frames, ema_enc_);
            PerceptionOut eper = perceive(etokens, ema_enc_, init_noise);
            ema_feat = etokens.detach();
            ema_slots = eper.slots.detach();
        }

        // spatial broadcast decoding against EMA features
        Tensor flat_slots = reshape(per.slots, {B * T, N, d});
        Tensor flat_alive = reshape(per.p_alive, {B * T, N});
        Tensor grid = sbd::broadcast(flat_slots, cfg_.grid_h(), cfg_.grid_w());
        auto [features, alpha_raw] = sbd::decode(grid, decoder_);
        Tensor alpha = sbd::normalize_alpha(alpha_raw, flat_alive);
        out.alpha = reshape(alpha, {B, T, N, P});
        Tensor targets = reshape(ema_feat, {B * T, P, cfg_.d_world});
        out.loss_sbd = sbd::sbd_loss(features, alpha, targets);
        out.loss_div = diversity_loss(per.slots, per.p_alive);

        // dynamics tower; gradient-gated during stage 1
        {
            std::unique_ptr<NoGradGuard> gate;
            if (stage1) gate = std::make_unique<NoGradGuard>();
            run_dynamics(per, actions, step, B, T, out);
        }

        // losses over dynamics outputs
        {
            std::unique_ptr<NoGradGuard> gate;
            if (stage1) gate = std::make_unique<NoGradGuard>();
            assemble_dynamics_losses(per, ema_slots, step, B, T, out);
        }

        double alive_total = 0;
        for (double v : per.p_alive.data()) alive_total += v > 0.5 ? 1.0 : 0.0;
        out.alive_mean = alive_total / static_cast<double>(B * T);
        double ev = 0;
        for (std::size_t b = 0; b < out.events.k_actual.size(); ++b) ev += out.events.k_actual[b];
        out.event_count_mean = out.events.k_actual.empty() ? 0 : ev / out.events.k_actual.size();

        // total per Alg.-1 stage weighting
        if (stage1) {
            out.total = add(scale(out.loss_sbd, cfg_.w_sbd_stage1),
                            scale(out.loss_div, cfg_.w_div_stage1));
        } else {
            Tensor obj = add(out.loss_track, out.loss_event);
            Tensor causal = out.loss_causal;
            out.total = add(add(out.loss_jepa, scale(out.loss_sbd, cfg_.w_sbd_stage2)),
                            add(scale(obj, cfg_.lambda_obj), scale(causal, cfg_.lambda_causal)));
        }
        return out;
    }

    const sbd::DecoderParams& decoder() const { return decoder_; }

    double gumbel_temperature(std::size_t step) const {
        std::size_t boundary = cfg_.stage_boundary();
        if (cfg_.total_steps <= boundary) return cfg_.gumbel_temp_start;
        if (step < boundary) return cfg_.gumbel_temp_start;
        double frac = static_cast<double>(step - boundary) /
                      std::max<double>(1.0, static_cast<double>(cfg_.total_steps - boundary));
        frac = std::min(1.0, frac);
        return cfg_.gumbel_temp_start + frac * (cfg_.gumbel_temp_end - cfg_.gumbel_temp_start);
    }

private:
    Tensor extract_patches(const Tensor& frames) const {
        const Shape& s = frames.shape();
        std::size_t B = s[0], T = s[1], C = s[2], H = s[3], W = s[4];
        std::size_t p = cfg_.patch;
        std::size_t gh = H / p, gw = W / p, M = gh * gw;
        std::size_t pdim = p * p * C;
        const auto& xv = frames.data();
        auto outbuf = hclsm::detail::make_storage<double>(B * T * M * pdim);
        auto& ov = *outbuf;
        for (std::size_t bt = 0; bt < B * T; ++bt)
            for (std::size_t gi = 0; gi < gh; ++gi)
                for (std::size_t gj = 0; gj < gw; ++gj) {
                    std::size_t m = gi * gw + gj;
                    double* dst = &ov[(bt * M + m) * pdim];
                    for (std::size_t pi = 0; pi < p; ++pi)
                        for (std::size_t pj = 0; pj < p; ++pj)
                            for (std::size_t c = 0; c < C; ++c)
                                dst[(pi * p + pj) * C + c] =
                                    xv[((bt * C + c) * H + gi * p + pi) * W + gj * p + pj];
                }
        auto xn = frames.node();
        return hclsm::detail::make_op<double>({B, T, M, pdim}, outbuf, {frames},
                                              [xn, B, T, C, H, W, p, gh, gw, M, pdim](hclsm::detail::NodeT<double>& self) {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t bt = 0; bt < B * T; ++bt)
                for (std::size_t gi = 0; gi < gh; ++gi)
                    for (std::size_t gj = 0; gj < gw; ++gj) {
                        std::size_t m = gi * gw + gj;
                        const double* g = &self.grad[(bt * M + m) * pdim];
                        for (std::size_t pi = 0; pi < p; ++pi)
                            for (std::size_t pj = 0; pj < p; ++pj)
                                for (std::size_t c = 0; c < C; ++c)
                                    xn->grad[((bt * C + c) * H + gi * p + pi) * W + gj * p + pj] +=
                                        g[(pi * p + pj) * C + c];
                    }
            xn->pending = true;
        });
    }

    void run_dynamics(const PerceptionOut& per, const Tensor& actions, std::size_t step,
                      std::size_t B, std::size_t T, WorldOutput& out) const {
        std::size_t N = cfg_.n_max, d = cfg_.d_slot;
        // action conditioning: embedded displacement added to every slot input
        Tensor act = dyn_.action_embed(actions);               // [B, T, d]
        Tensor ssm_in = add(per.slots, reshape(act, {B, T, 1, d}));
        Tensor per_obj = permute(ssm_in, {0, 2, 1, 3});        // [B, N, T, d]
        Tensor flat = reshape(per_obj, {B * N, T, d});
        Tensor inner = dyn_.slot_to_inner(flat);
        Tensor scanned = scan::ssm_forward(inner, dyn_.ssm, 0, cfg_.scan_chunk);
        Tensor l0_obj = dyn_.inner_to_slot(scanned);           // [B*N, T, d]
        Tensor l0 = reshape(l0_obj, {B, N, T, d});
        Tensor ctx = scan::global_context(per_obj, dyn_.global_ssm, 0, cfg_.scan_chunk);  // [B,T,d]
        l0 = add(l0, reshape(ctx, {B, 1, T, d}));
        Tensor l0_t = permute(l0, {0, 2, 1, 3});               // [B, T, N, d]

        // Level 1: event detection over mean-pooled L0 states
        Tensor pooled = mean_axis(l0_t, 2);                    // [B, T, d]
        Tensor diffs = hierarchy::multiscale_diffs(pooled);
        Tensor scores = hierarchy::event_scores(diffs, dyn_.event_det);
        auto boundaries = hierarchy::detect_boundaries(scores, dyn_.event_det.threshold);
        out.events = hierarchy::make_trace(scores, std::move(boundaries), T);
        Tensor dense = hierarchy::gather_events(l0_t, out.events);     // [B, K, N, d]
        Tensor mixed = hierarchy::event_transformer(dense, out.events, dyn_.event_tfm);
        Tensor l1 = hierarchy::scatter_events(mixed, out.events, T);   // [B, T, N, d]

        // Level 2: goal compression over pooled events
        Tensor events_pooled = mean_axis(dense, 2);            // [B, K, d]
        out.goal_tokens = hierarchy::goal_compress(events_pooled, out.events, dyn_.goal);
        Tensor l2 = mean_axis(out.goal_tokens, 1);             // [B, d]
        Tensor l2b = add(reshape(l2, {B, 1, 1, d}), Tensor::zeros({B, T, N, d}));

        out.l0_states = l0_t;
        Tensor combined = hierarchy::hierarchy_combine(l0_t, l1, l2b, dyn_.gates);

        // interaction messages, residual-added per timestep
        Tensor flat_states = reshape(combined, {B * T, N, d});
        Tensor flat_alive = reshape(per.p_alive, {B * T, N});
        Tensor messages = structure::gnn_messages(flat_states, flat_alive, dyn_.gnn);
        combined = add(combined, reshape(messages, {B, T, N, d}));
        out.combined = combined;
        {
            NoGradGuard ng;
            out.edge_weights = structure::interaction_edge_weights(flat_states.detach(), dyn_.gnn);
        }
        if (T > 1) {
            out.predictions = slice(combined, 1, 0, T - 1);
        }
    }

    void assemble_dynamics_losses(const PerceptionOut& per, const Tensor& ema_slots,
                                  std::size_t step, std::size_t B, std::size_t T,
                                  WorldOutput& out) const {
        std::size_t N = cfg_.n_max, d = cfg_.d_slot;
        // JEPA: predictions at t vs EMA slots at t+1 after Sinkhorn alignment
        if (T > 1) {
            Tensor pred = reshape(out.predictions, {B * (T - 1), N, d});
            Tensor tgt = reshape(slice(ema_slots, 1, 1, T - 1), {B * (T - 1), N, d});
            Tensor assign;
            {
                NoGradGuard ng;  // alignment itself is not a gradient path
                assign = slots::sinkhorn_match(pred.detach(), tgt, cfg_.sinkhorn_iters,
                                               cfg_.sinkhorn_temp);
            }
            Tensor aligned = matmul(assign, tgt);  // rows sum to 1 over targets
            out.loss_jepa = mean(square_stable(sub(pred, aligned)));
        } else {
            out.loss_jepa = Tensor::scalar(0.0);
        }
        // tracking: assignment-transported previous slots vs current slots
        if (T > 1) {
            Tensor prev = reshape(slice(per.slots, 1, 0, T - 1), {B * (T - 1), N, d});
            Tensor cur = reshape(slice(per.slots, 1, 1, T - 1), {B * (T - 1), N, d});
            Tensor assign = reshape(per.assignments, {B * (T - 1), N, N});
            Tensor transported = matmul(assign, prev, true, false);  // [.., N(cur), d]
            out.loss_track = mean(square_stable(sub(transported, cur)));
        } else {
            out.loss_track = Tensor::scalar(0.0);
        }
        // event contrastive: BCE(scores, normalized state-change magnitude)
        out.loss_event = event_contrastive_loss(out, B, T);
        // causal regularization pathway
        SplitRng grng = SplitRng::from(cfg_.seed, RngStream::gumbel, step);
        structure::CausalGraph graph = dyn_.causal;
        graph.temperature = gumbel_temperature(step);
        std::unique_ptr<NoGradGuard> causal_gate;
        if (!cfg_.causal_grad_enabled) causal_gate = std::make_unique<NoGradGuard>();
        Tensor sample = structure::gumbel_edge_sample(graph, grng, false);
        out.loss_dag_h = structure::dag_penalty(sample);
        out.loss_sparsity = structure::sparsity_loss(sample);
        out.loss_causal = add(out.loss_sparsity, structure::lagrangian_term(graph, out.loss_dag_h));
    }

    Tensor diversity_loss(const Tensor& slots_all, const Tensor& p_alive) const {
        const Shape& s = slots_all.shape();
        std::size_t B = s[0], T = s[1], N = s[2];
        Tensor norm = sqrt(add_scalar(sum_axis(square_stable(slots_all), 3, true), 1e-12));
        Tensor unit = div(slots_all, norm);
        Tensor gram = matmul(unit, unit, false, true);  // [B, T, N, N]
        // hard alive mask, detached: the regularizer must separate slots, not
        // teach the existence head to kill them
        Tensor alive = slots::alive_mask_st(reshape(p_alive, {B * T, N})).detach();
        Tensor alive3 = reshape(alive, {B, T, N});
        Tensor wpair = mul(reshape(alive3, {B, T, N, 1}), reshape(alive3, {B, T, 1, N}));
        std::vector<double> offdiag(N * N, 1.0);
        for (std::size_t i = 0; i < N; ++i) offdiag[i * N + i] = 0.0;
        wpair = mul(wpair, Tensor({1, 1, N, N}, std::move(offdiag)));
        Tensor sim = clamp(gram, 0.0, 1.0);  // only penalize similarity
        Tensor num = sum(mul(sim, wpair));
        Tensor den = add_scalar(sum(wpair), 1e-8);
        return div(num, den);
    }

    Tensor event_contrastive_loss(const WorldOutput& out, std::size_t B, std::size_t T) const {
        const Tensor& scores = out.events.scores;  // [B, T]
        // soft targets: per-sequence min-max normalized ||state_t - state_{t-1}||
        std::vector<double> tgt(B * T, 0.0);
        {
            NoGradGuard ng;
            // state-change magnitude measured on the Level-0 trace the
            // detector monitors (the combined state re-injects L1 features at
            // detected boundaries, which would feed the detector back its own
            // decisions)
            const Tensor& st = out.l0_states;  // [B, T, N, d]
            const Shape& s = st.shape();
            std::size_t slab = s[2] * s[3];
            for (std::size_t b = 0; b < B; ++b) {
                double lo = 1e300, hi = -1e300;
                std::vector<double> mag(T, 0.0);
                for (std::size_t t = 1; t < T; ++t) {
                    double acc = 0;
                    for (std::size_t j = 0; j < slab; ++j) {
                        double dlt = st.data()[(b * T + t) * slab + j] -
                                     st.data()[(b * T + t - 1) * slab + j];
                        acc += dlt * dlt;
                    }
                    mag[t] = std::sqrt(acc);
                    lo = std::min(lo, mag[t]);
                    hi = std::max(hi, mag[t]);
                }
                for (std::size_t t = 1; t < T; ++t) {
                    tgt[b * T + t] = T > 1 ? (mag[t] - lo) / (hi - lo + 1e-8) : 0.0;
                }
            }
        }
        Tensor targets({B, T}, std::move(tgt));
        // BCE(scores, targets), scores already in (0, 1)
        Tensor eps_scores = clamp(scores, 1e-7, 1.0 - 1e-7);
        Tensor bce = neg(add(mul(targets, log(eps_scores)),
                             mul(add_scalar(neg(targets), 1.0),
                                 log(add_scalar(neg(eps_scores), 1.0)))));
        Tensor main = mean(bce);
        // straight-through threshold calibration; only the threshold trains here
        Tensor cut = sigmoid(dyn_.event_det.threshold);
        Tensor soft_ind = sigmoid(scale(sub(scores.detach(), cut), 10.0));
        std::vector<double> hard_tgt(B * T, 0.0);
        for (std::size_t i = 0; i < B * T; ++i) hard_tgt[i] = targets.data()[i] > 0.5 ? 1.0 : 0.0;
        Tensor ht({B, T}, std::move(hard_tgt));
        Tensor si = clamp(soft_ind, 1e-7, 1.0 - 1e-7);
        Tensor thr_bce = neg(add(mul(ht, log(si)),
                                 mul(add_scalar(neg(ht), 1.0), log(add_scalar(neg(si), 1.0)))));
        return add(main, scale(mean(thr_bce), 0.1));
    }

    ModelConfig cfg_;
    ParamStore store_;
    ParamStore ema_store_;
    EncoderParams enc_;
    sbd::DecoderParams decoder_;
    DynamicsParams dyn_;
    EncoderParams ema_enc_;
};

}  // namespace hclsm::model
