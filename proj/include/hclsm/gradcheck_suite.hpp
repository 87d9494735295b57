#pragma once

// The registered finite-difference suite behind the `gradcheck` subcommand.
// Every differentiable op gets a tiny random instance checked against
// central differences at f64.

#include "hclsm/gradcheck.hpp"
#include "hclsm/hierarchy.hpp"
#include "hclsm/nn.hpp"
#include "hclsm/sbd.hpp"
#include "hclsm/scan.hpp"
#include "hclsm/slots.hpp"
#include "hclsm/structure.hpp"

namespace hclsm {

inline std::vector<GradCheckCase> build_gradcheck_suite(std::uint64_t seed) {
    std::vector<GradCheckCase> cases;
    auto push = [&](const std::string& name, std::function<double()> run) {
        cases.push_back({name, std::move(run)});
    };

    push("matmul", [seed] {
        SplitRng rng(seed + 1);
        Tensor a = Tensor::randn({4, 5}, rng);
        Tensor b = Tensor::randn({5, 3}, rng);
        a.set_requires_grad();
        b.set_requires_grad();
        return finite_diff_check([&] { return sum(square_stable(matmul(a, b))); }, {a, b});
    });
    push("softmax", [seed] {
        SplitRng rng(seed + 2);
        Tensor x = Tensor::randn({3, 5}, rng);
        x.set_requires_grad();
        return finite_diff_check([&] { return sum(square_stable(softmax(x, 0))); }, {x});
    });
    push("square_stable", [seed] {
        SplitRng rng(seed + 3);
        Tensor x = Tensor::randn({7}, rng);
        x.set_requires_grad();
        return finite_diff_check([&] { return sum(square_stable(x)); }, {x});
    });
    push("clamp", [seed] {
        SplitRng rng(seed + 4);
        Tensor x = Tensor::uniform({9}, rng, -2.0, 2.0);
        x.set_requires_grad();
        return finite_diff_check([&] { return sum(square_stable(clamp(x, -1.0, 1.0))); }, {x});
    });
    push("layernorm", [seed] {
        SplitRng rng(seed + 5);
        Tensor x = Tensor::randn({3, 6}, rng);
        Tensor g = Tensor::uniform({6}, rng, 0.5, 1.5);
        Tensor b = Tensor::randn({6}, rng);
        x.set_requires_grad();
        g.set_requires_grad();
        b.set_requires_grad();
        return finite_diff_check([&] { return sum(square_stable(layernorm(x, g, b))); },
                                 {x, g, b});
    });
    push("gru_cell", [seed] {
        ParamStore ps(seed + 6);
        GruParams p = GruParams::make(ps, "g", 4);
        SplitRng rng(seed + 6);
        Tensor h = Tensor::randn({2, 4}, rng);
        Tensor x = Tensor::randn({2, 4}, rng);
        h.set_requires_grad();
        x.set_requires_grad();
        return finite_diff_check([&] { return sum(square_stable(gru_cell(h, x, p))); },
                                 {h, x, p.wz, p.uh});
    });
    push("multihead_attention", [seed] {
        ParamStore ps(seed + 7);
        AttentionParams p = AttentionParams::make(ps, "a", 8, 2);
        SplitRng rng(seed + 7);
        Tensor x = Tensor::randn({1, 3, 8}, rng);
        x.set_requires_grad();
        return finite_diff_check(
            [&] { return sum(square_stable(multihead_attention(x, x, x, p, true))); },
            {x, p.wq.w, p.wv.b});
    });
    push("swiglu_ffn", [seed] {
        ParamStore ps(seed + 8);
        SwigluParams p = SwigluParams::make(ps, "f", 4);
        SplitRng rng(seed + 8);
        Tensor x = Tensor::randn({3, 4}, rng);
        x.set_requires_grad();
        return finite_diff_check([&] { return sum(square_stable(swiglu_ffn(x, p))); },
                                 {x, p.w1, p.w2, p.w3});
    });
    push("sigmoid_silu_gelu_softplus", [seed] {
        SplitRng rng(seed + 9);
        Tensor x = Tensor::randn({11}, rng);
        x.set_requires_grad();
        return finite_diff_check(
            [&] { return sum(add(add(sigmoid(x), silu(x)), add(gelu(x), softplus(x)))); }, {x});
    });
    push("exp_log_sqrt_tanh", [seed] {
        SplitRng rng(seed + 10);
        Tensor x = Tensor::uniform({9}, rng, 0.2, 2.0);
        x.set_requires_grad();
        return finite_diff_check(
            [&] { return sum(add(add(exp(neg(x)), log(x)), add(sqrt(x), tanh(x)))); }, {x});
    });
    push("conv1d_causal", [seed] {
        SplitRng rng(seed + 11);
        Tensor x = Tensor::randn({2, 5, 3}, rng);
        Tensor w = Tensor::randn({3, 3, 4}, rng);
        Tensor b = Tensor::randn({4}, rng);
        x.set_requires_grad();
        w.set_requires_grad();
        b.set_requires_grad();
        return finite_diff_check(
            [&] { return sum(square_stable(conv1d_causal(x, w, b, 2))); }, {x, w, b});
    });
    push("conv2d_3x3", [seed] {
        SplitRng rng(seed + 12);
        Tensor x = Tensor::randn({1, 4, 4, 2}, rng);
        Tensor w = Tensor::randn({18, 3}, rng);
        Tensor b = Tensor::randn({3}, rng);
        x.set_requires_grad();
        w.set_requires_grad();
        return finite_diff_check([&] { return sum(square_stable(conv2d_3x3(x, w, b))); },
                                 {x, w});
    });
    push("discretize", [seed] {
        SplitRng rng(seed + 13);
        Tensor delta = Tensor::uniform({2, 3}, rng, 0.05, 1.0);
        Tensor alog = Tensor::uniform({3, 2}, rng, -0.5, 0.0);
        delta.set_requires_grad();
        alog.set_requires_grad();
        return finite_diff_check(
            [&] { return sum(square_stable(scan::discretize(delta, alog))); }, {delta, alog});
    });
    push("scan_states", [seed] {
        SplitRng rng(seed + 14);
        Tensor a = Tensor::uniform({2, 3, 2, 2}, rng, 0.1, 0.95);
        Tensor b = Tensor::randn({2, 3, 2, 2}, rng);
        Tensor c = Tensor::randn({2, 3, 2}, rng);
        Tensor h0 = Tensor::randn({2, 2, 2}, rng);
        a.set_requires_grad();
        b.set_requires_grad();
        c.set_requires_grad();
        h0.set_requires_grad();
        return finite_diff_check(
            [&] {
                return sum(square_stable(scan::state_readout(scan::scan_states(a, b, h0, 2, 2), c)));
            },
            {a, b, c, h0});
    });
    push("ssm_forward", [seed] {
        ParamStore ps(seed + 15);
        scan::SsmParams p = scan::SsmParams::make(ps, "s", 3, 2);
        SplitRng rng(seed + 15);
        Tensor x = Tensor::randn({2, 4, 3}, rng);
        x.set_requires_grad();
        return finite_diff_check([&] { return sum(square_stable(scan::ssm_forward(x, p))); },
                                 {x, p.a_log, p.dt_proj.w, p.b_proj.w, p.c_proj.w});
    });
    push("slot_attention", [seed] {
        ParamStore ps(seed + 16);
        slots::SlotAttentionParams p = slots::SlotAttentionParams::make(ps, "sa", 4, 4, 2);
        SplitRng rng(seed + 16);
        Tensor s = Tensor::randn({1, 3, 4}, rng);
        Tensor t = Tensor::randn({1, 6, 4}, rng);
        s.set_requires_grad();
        t.set_requires_grad();
        return finite_diff_check(
            [&] {
                auto [out, attn] = slots::slot_attention_iterate(s, t, p);
                return sum(square_stable(out));
            },
            {s, t, p.wq.w, p.gru.wh});
    });
    push("sinkhorn_match", [seed] {
        SplitRng rng(seed + 17);
        Tensor prev = Tensor::randn({1, 3, 4}, rng);
        Tensor cur = Tensor::randn({1, 3, 4}, rng);
        prev.set_requires_grad();
        cur.set_requires_grad();
        return finite_diff_check(
            [&] { return sum(square_stable(slots::sinkhorn_match(prev, cur, 10, 0.5))); },
            {prev, cur});
    });
    push("sbd_decode_loss", [seed] {
        ParamStore ps(seed + 18);
        sbd::DecoderParams p = sbd::DecoderParams::make(ps, "d", 3, 3, 6);
        SplitRng rng(seed + 18);
        Tensor s = Tensor::randn({1, 2, 3}, rng);
        Tensor alive({1, 2}, {0.9, 0.8});
        Tensor targets = Tensor::randn({1, 9, 3}, rng);
        s.set_requires_grad();
        return finite_diff_check(
            [&] {
                Tensor grid = sbd::broadcast(s, 3, 3);
                auto [feat, alpha_raw] = sbd::decode(grid, p);
                Tensor alpha = sbd::normalize_alpha(alpha_raw, alive);
                return sbd::sbd_loss(feat, alpha, targets);
            },
            {s, p.w1, p.w4});
    });
    push("gnn_messages", [seed] {
        ParamStore ps(seed + 19);
        structure::GnnParams p = structure::GnnParams::make(ps, "g", 3);
        SplitRng rng(seed + 19);
        Tensor s = Tensor::randn({1, 4, 3}, rng);
        Tensor alive = Tensor::uniform({1, 4}, rng, 0.3, 0.9);
        s.set_requires_grad();
        alive.set_requires_grad();
        return finite_diff_check(
            [&] {
                return sum(square_stable(
                    structure::gnn_messages(s, alive, p, 2, structure::GnnMode::chunked)));
            },
            {s, alive, p.edge1.w});
    });
    push("dag_penalty", [seed] {
        SplitRng rng(seed + 20);
        Tensor a = Tensor::randn({3, 3}, rng, 0.5);
        a.set_requires_grad();
        return finite_diff_check([&] { return structure::dag_penalty(a); }, {a});
    });
    push("event_scores", [seed] {
        ParamStore ps(seed + 21);
        hierarchy::EventDetectorParams p = hierarchy::EventDetectorParams::make(ps, "e", 6, 5);
        SplitRng rng(seed + 21);
        Tensor states = Tensor::randn({1, 6, 2}, rng);
        states.set_requires_grad();
        return finite_diff_check(
            [&] {
                Tensor diffs = hierarchy::multiscale_diffs(states);
                return sum(square_stable(hierarchy::event_scores(diffs, p)));
            },
            {states, p.conv1_w, p.head.w});
    });
    push("gather_scatter_events", [seed] {
        SplitRng rng(seed + 22);
        Tensor states = Tensor::randn({1, 5, 2, 2}, rng);
        states.set_requires_grad();
        hierarchy::EventTrace tr = hierarchy::make_trace(Tensor::zeros({1, 5}), {{1, 3}}, 5);
        return finite_diff_check(
            [&] {
                Tensor dense = hierarchy::gather_events(states, tr);
                return sum(square_stable(hierarchy::scatter_events(dense, tr, 5)));
            },
            {states});
    });
    push("goal_compress", [seed] {
        ParamStore ps(seed + 23);
        hierarchy::GoalParams p = hierarchy::GoalParams::make(ps, "g", 4, 2, 2);
        SplitRng rng(seed + 23);
        Tensor events = Tensor::randn({1, 3, 4}, rng);
        events.set_requires_grad();
        hierarchy::EventTrace tr = hierarchy::make_trace(Tensor::zeros({1, 6}), {{0, 2, 4}}, 6);
        return finite_diff_check(
            [&] { return sum(square_stable(hierarchy::goal_compress(events, tr, p))); },
            {events, p.queries, p.cross.wq.w});
    });
    push("hierarchy_combine", [seed] {
        SplitRng rng(seed + 24);
        Tensor l0 = Tensor::randn({1, 2, 2, 3}, rng);
        Tensor l1 = Tensor::randn({1, 2, 2, 3}, rng);
        Tensor l2 = Tensor::randn({1, 2, 2, 3}, rng);
        Tensor gates = Tensor::randn({3}, rng);
        l0.set_requires_grad();
        gates.set_requires_grad();
        return finite_diff_check(
            [&] {
                return sum(square_stable(hierarchy::hierarchy_combine(l0, l1, l2, gates)));
            },
            {l0, gates});
    });
    push("gumbel_edge_sample", [seed] {
        ParamStore ps(seed + 25);
        structure::CausalGraph g = structure::CausalGraph::make(ps, "c", 3);
        SplitRng rng(seed + 25);
        auto& wd = g.w_logits.mutable_data();
        for (auto& v : wd) v = rng.normal();
        g.temperature = 0.7;
        return finite_diff_check(
            [&] {
                SplitRng noise(seed + 26);  // frozen noise draw per evaluation
                return sum(square_stable(structure::gumbel_edge_sample(g, noise, false)));
            },
            {g.w_logits});
    });

    return cases;
}

}  // namespace hclsm
