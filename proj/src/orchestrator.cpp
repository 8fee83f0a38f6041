#include "kedit/orchestrator.hpp"

#include "kedit/error.hpp"
#include "kedit/parallel.hpp"
#include "kedit/rng.hpp"

#include <chrono>
#include <utility>

namespace kedit::orch {

namespace {

using clock_type = std::chrono::steady_clock;

double ms_since(clock_type::time_point t0) {
    return std::chrono::duration<double, std::milli>(clock_type::now() - t0).count();
}

void validate_config(const run_config & cfg, bool with_depth) {
    if (with_depth && cfg.depth < 2) {
        fail("InfeasibleConfig", "contextual depth must be at least 2");
    }
    if (cfg.fanout < 1) fail("InfeasibleConfig", "fanout must be at least 1");
    if (cfg.preserved_factor < 0) fail("InfeasibleConfig", "preserved factor must be nonnegative");
    if (cfg.round_repeats < 1) fail("InfeasibleConfig", "round repeats must be at least 1");
    if (cfg.preserve_weight < 0.0 || cfg.ridge < 0.0) {
        fail("InfeasibleConfig", "preserve weight and ridge must be nonnegative");
    }
    editor::validate_hyper(cfg.hyper);
}

std::vector<editor::edit_request> base_requests(const std::vector<context::edit_request> & batch) {
    std::vector<editor::edit_request> reqs;
    reqs.reserve(batch.size());
    for (const auto & e : batch) {
        reqs.push_back({model::structured_query{e.subject, {e.relation}, {}}, e.new_object});
    }
    return reqs;
}

std::vector<editor::edit_request>
contextual_requests(const std::vector<context::contextual_edit> & ctx) {
    std::vector<editor::edit_request> reqs;
    reqs.reserve(ctx.size());
    for (const auto & ce : ctx) {
        reqs.push_back(
            {model::structured_query{ce.subject, ce.relation_chain, {}}, ce.target_object});
    }
    return reqs;
}

// surveys the stored facts against the post-edit graph and re-asserts the
// ones the last weight update knocked out; z = E[object] exactly as in
// seeding, so maintenance never touches the multi-hop corrections
int repair_stored_facts(model::params & cur, const kg::knowledge_graph & post,
                        const std::vector<model::structured_query> & pinned,
                        const run_config & cfg, uint64_t seed) {
    std::vector<model::structured_query> qs;
    std::vector<int> truth;
    qs.reserve(post.forward.size());
    for (const auto & [key, obj] : post.forward) {
        qs.push_back(model::structured_query{key.first, {key.second}, {}});
        truth.push_back(obj);
    }
    int repaired = 0;
    size_t prev_wrong = qs.size() + 1;
    for (int pass = 0; pass < cfg.repair_passes; ++pass) {
        const std::vector<int> pred = model::predict_batch(cur, qs, cfg.mode);
        size_t wrong_n = 0;
        for (size_t i = 0; i < qs.size(); ++i) wrong_n += pred[i] != truth[i];
        // re-asserting a set that is not shrinking oscillates instead of converging
        if (wrong_n == 0 || wrong_n * 10 >= prev_wrong * 9) break;
        prev_wrong = wrong_n;
        editor::edit_plan plan;
        plan.preserve_weight = cfg.preserve_weight;
        plan.ridge = cfg.ridge;
        editor::edge_set wrong;
        for (size_t i = 0; i < qs.size(); ++i) {
            if (pred[i] == truth[i]) continue;
            wrong.insert({qs[i].subject, qs[i].chain[0]});
            editor::target_state ts;
            ts.query = qs[i];
            ts.target = truth[i];
            ts.z.resize(static_cast<size_t>(cur.dm.d));
            for (int c = 0; c < cur.dm.d; ++c) ts.z[size_t(c)] = cur.E(truth[i], c);
            plan.memories.push_back(std::move(ts));
        }
        if (plan.memories.empty()) break;
        repaired += int(plan.memories.size());
        const int u = cfg.preserved_factor * int(plan.memories.size());
        plan.preserved = editor::sample_preserved_facts(
            post, wrong, u, seed_mix(seed, uint64_t(pass)));
        const auto paths = editor::sample_preserved_paths(
            post, wrong, cfg.preserved_paths, seed_mix(seed, uint64_t(pass)));
        plan.preserved.insert(plan.preserved.end(), paths.begin(), paths.end());
        plan.preserved.insert(plan.preserved.end(), pinned.begin(), pinned.end());
        cur = editor::spread_and_insert(cur, plan, nullptr, cfg.mode);
    }
    return repaired;
}

// inserts one round: target states on cur, preserved keys sampled outside the
// rewritten edges (their pre-edit mapping must not be re-asserted); earlier
// rounds' queries are pinned so later rounds cannot undo them
model::params insert_round(const model::params & cur, const kg::knowledge_graph & post,
                           const std::vector<editor::edit_request> & reqs,
                           const editor::edge_set & exclusion,
                           const std::vector<model::structured_query> & pinned,
                           const run_config & cfg, uint64_t preserved_seed, round_stats * rs) {
    const auto t0 = clock_type::now();
    std::vector<editor::edit_request> expanded;
    expanded.reserve(reqs.size() * size_t(1 + cfg.key_jitter));
    const uint64_t jitter_root = seed_for(cfg.seed, "orch.jitter");
    for (const auto & r : reqs) {
        expanded.push_back(r);
        for (int j = 0; j < cfg.key_jitter; ++j) {
            editor::edit_request jr = r;
            rng noise(seed_mix(jitter_root,
                               seed_mix(editor::query_fingerprint(r.query), uint64_t(j))));
            jr.query.noise.resize(static_cast<size_t>(cur.dm.d));
            for (double & x : jr.query.noise) x = cfg.jitter_scale * noise.gaussian();
            expanded.push_back(std::move(jr));
        }
    }
    auto states = editor::compute_target_states(cur, expanded, cfg.hyper, cfg.mode);
    parallel_for(cfg.mode, int(states.size()), [&](int i) {
        if (expanded[size_t(i)].readouts.empty()) return;
        states[size_t(i)].z = editor::refine_bridge_state(
            cur, states[size_t(i)].z, expanded[size_t(i)].target,
            expanded[size_t(i)].readouts, cfg.hyper, cfg.bridge_noise,
            seed_mix(cfg.seed, editor::query_fingerprint(expanded[size_t(i)].query)));
    });

    editor::edit_plan plan;
    plan.memories = states;
    plan.preserve_weight = cfg.preserve_weight;
    plan.ridge = cfg.ridge;
    const int u = cfg.preserved_factor * int(reqs.size());
    plan.preserved = editor::sample_preserved_facts(post, exclusion, u, preserved_seed);
    const auto paths = editor::sample_preserved_paths(post, exclusion, cfg.preserved_paths,
                                                      preserved_seed);
    plan.preserved.insert(plan.preserved.end(), paths.begin(), paths.end());
    plan.preserved.insert(plan.preserved.end(), pinned.begin(), pinned.end());

    model::params out = editor::spread_and_insert(cur, plan, nullptr, cfg.mode);
    const int repaired = repair_stored_facts(out, post, pinned, cfg,
                                             seed_mix(preserved_seed, 0x9e3779b97f4a7c15ull));
    if (rs) {
        rs->applied = int(reqs.size());
        rs->repaired += repaired;
        rs->millis = ms_since(t0);
    }
    return out;
}

// drops chains whose hop >= 2 edges touch the holdout set
std::vector<context::contextual_edit> filter_holdout(std::vector<context::contextual_edit> ctx,
                                                     const kg::knowledge_graph & post,
                                                     const editor::edge_set & holdout,
                                                     int * removed) {
    if (holdout.empty()) {
        if (removed) *removed = 0;
        return ctx;
    }
    std::vector<context::contextual_edit> kept;
    kept.reserve(ctx.size());
    for (auto & ce : ctx) {
        int node = ce.subject;
        bool hit = false;
        for (size_t j = 0; j < ce.relation_chain.size(); ++j) {
            const int rel = ce.relation_chain[j];
            if (j >= 1 && holdout.count({node, rel})) {
                hit = true;
                break;
            }
            node = post.forward.at({node, rel});
        }
        if (!hit) kept.push_back(std::move(ce));
    }
    if (removed) *removed = int(ctx.size() - kept.size());
    return kept;
}

struct compiled_round {
    std::vector<editor::edit_request> reqs;
    round_stats rs;
};

compiled_round compile_round(const std::vector<context::edit_request> & batch,
                             const kg::knowledge_graph & post, const tmpl::registry & reg,
                             int depth, const run_config & cfg) {
    compiled_round out;
    out.rs.depth = depth;
    auto ctx = context::get_contextual_edits(batch, post, reg, depth, cfg.fanout,
                                             seed_for(cfg.seed, "orch.ctx"));
    out.rs.compiled = int(ctx.size());
    ctx = filter_holdout(std::move(ctx), post, cfg.holdout, &out.rs.held_out);
    const auto conflicts = context::detect_conflicts(ctx, batch, post);
    out.rs.conflicts = int(conflicts.size());
    ctx = context::resolve_conflicts(ctx, conflicts, cfg.policy, post);
    out.reqs = contextual_requests(ctx);
    return out;
}

} // namespace

editor::edge_set chain_edges(const kg::knowledge_graph & g, int subject,
                             std::span<const int> chain) {
    editor::edge_set edges;
    int node = subject;
    for (int rel : chain) {
        const auto it = g.forward.find({node, rel});
        if (it == g.forward.end()) fail("BrokenPath", "chain does not resolve on the graph");
        edges.insert({node, rel});
        node = it->second;
    }
    return edges;
}

model::params run_baseline(const model::params & p, const kg::knowledge_graph & graph,
                           const std::vector<context::edit_request> & batch,
                           const run_config & cfg, run_stats * stats) {
    validate_config(cfg, false);
    if (batch.empty()) fail("EmptyBatch", "baseline run needs at least one edit");
    const auto t0 = clock_type::now();

    const kg::knowledge_graph post = context::apply_batch(graph, batch);
    editor::edge_set exclusion;
    for (const auto & e : batch) exclusion.insert({e.subject, e.relation});
    round_stats rs;
    rs.depth = 1;
    model::params out = p;
    for (int rep = 0; rep < std::max(1, cfg.base_repeats); ++rep) {
        out = insert_round(out, post, base_requests(batch), exclusion, {}, cfg,
                           seed_for(cfg.seed, "orch.preserved.base"), &rs);
    }
    if (stats) {
        stats->rounds = {rs};
        stats->total_millis = ms_since(t0);
    }
    return out;
}

model::params run_kedit(const model::params & p, const kg::knowledge_graph & graph,
                        const std::vector<context::edit_request> & batch,
                        const tmpl::registry & reg, const run_config & cfg, run_stats * stats) {
    validate_config(cfg, true);
    if (batch.empty()) fail("EmptyBatch", "edit run needs at least one edit");
    const auto t0 = clock_type::now();

    const kg::knowledge_graph post = context::apply_batch(graph, batch);
    editor::edge_set exclusion;
    for (const auto & e : batch) exclusion.insert({e.subject, e.relation});
    std::vector<round_stats> rounds;

    if (cfg.order == edit_order::sequential) {
        round_stats rs;
        rs.depth = 1;
        const auto base = base_requests(batch);
        model::params cur = p;
        for (int rep = 0; rep < std::max(1, cfg.base_repeats); ++rep) {
            cur = insert_round(cur, post, base, exclusion, {}, cfg,
                               seed_for(cfg.seed, "orch.preserved.base"), &rs);
        }
        rounds.push_back(rs);
        std::vector<model::structured_query> pinned;
        if (!cfg.refine_base) {
            for (const auto & r : base) pinned.push_back(r.query);
        }
        for (int dep = 2; dep <= cfg.depth; ++dep) {
            compiled_round round = compile_round(batch, post, reg, dep, cfg);
            if (cfg.skip_correct_context && !round.reqs.empty()) {
                std::vector<model::structured_query> qs;
                for (const auto & r : round.reqs) qs.push_back(r.query);
                const auto pred = model::predict_batch(cur, qs, cfg.mode);
                std::vector<editor::edit_request> wrong;
                for (size_t i = 0; i < round.reqs.size(); ++i) {
                    if (pred[i] != round.reqs[i].target) wrong.push_back(round.reqs[i]);
                }
                round.reqs = std::move(wrong);
            }
            if (!round.reqs.empty()) {
                std::vector<editor::edit_request> reqs = round.reqs;
                if (cfg.refine_base) {
                    for (const auto & bq : base) {
                        editor::edit_request br = bq;
                        for (const auto & c : round.reqs) {
                            const auto & ch = c.query.chain;
                            if (c.query.subject == bq.query.subject && ch.size() == 2 &&
                                ch[0] == bq.query.chain[0]) {
                                br.readouts.push_back({ch[1], c.target});
                            }
                        }
                        reqs.push_back(std::move(br));
                    }
                }
                for (int rep = 0; rep < cfg.round_repeats; ++rep) {
                    const uint64_t ps = seed_mix(seed_for(cfg.seed, "orch.preserved.round"),
                                                 seed_mix(uint64_t(dep), uint64_t(rep)));
                    cur = insert_round(cur, post, reqs, exclusion, pinned, cfg, ps,
                                       &round.rs);
                }
                for (const auto & r : round.reqs) pinned.push_back(r.query);
            }
            rounds.push_back(round.rs);
        }
        if (stats) {
            stats->rounds = std::move(rounds);
            stats->total_millis = ms_since(t0);
        }
        return cur;
    }

    // parallel ordering ablation: every target state comes from the input
    // parameters and lands in a single insertion
    std::vector<editor::edit_request> all = base_requests(batch);
    round_stats base_rs;
    base_rs.depth = 1;
    base_rs.applied = int(all.size());
    rounds.push_back(base_rs);
    for (int dep = 2; dep <= cfg.depth; ++dep) {
        compiled_round round = compile_round(batch, post, reg, dep, cfg);
        round.rs.applied = int(round.reqs.size());
        all.insert(all.end(), round.reqs.begin(), round.reqs.end());
        rounds.push_back(round.rs);
    }
    round_stats joint;
    joint.depth = 1;
    model::params out = p;
    for (int rep = 0; rep < std::max(1, cfg.base_repeats); ++rep) {
        out = insert_round(out, post, all, exclusion, {}, cfg,
                           seed_for(cfg.seed, "orch.preserved.base"), &joint);
    }
    rounds[0].millis = joint.millis;
    rounds[0].repaired = joint.repaired;
    if (stats) {
        stats->rounds = std::move(rounds);
        stats->total_millis = ms_since(t0);
    }
    return out;
}

model::params run_generalization_ablation(const model::params & p,
                                          const kg::knowledge_graph & graph,
                                          const std::vector<context::edit_request> & batch,
                                          const tmpl::registry & reg,
                                          const editor::edge_set & eval_edges,
                                          const run_config & cfg, run_stats * stats) {
    run_config held = cfg;
    held.holdout.insert(eval_edges.begin(), eval_edges.end());
    return run_kedit(p, graph, batch, reg, held, stats);
}

} // namespace kedit::orch
