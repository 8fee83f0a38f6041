#pragma once

#include "kedit/context.hpp"
#include "kedit/editor.hpp"
#include "kedit/kg.hpp"
#include "kedit/model.hpp"
#include "kedit/parallel.hpp"
#include "kedit/templates.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace kedit::orch {

enum class edit_method { baseline, kedit };
enum class edit_order { sequential, parallel };

struct run_config {
    edit_method method = edit_method::kedit;
    edit_order order = edit_order::sequential;
    int depth = 2;  // contextual rounds cover 2..depth
    int fanout = 8; // per-node expansion cap during compilation
    context::conflict_policy policy = context::conflict_policy::retarget;
    editor::edge_set holdout; // edges barred from contextual chains (hops >= 2)
    editor::delta_hyper hyper;
    double preserve_weight = 1.0;
    double ridge = 1e-6;
    int preserved_factor = 4;
    // sampled 2-hop trajectories preserved alongside the 1-hop facts; these
    // shield carried-state keys, which insertions otherwise silently bend
    int preserved_paths = 200; // preserved keys per memory, capped at stored facts
    int round_repeats = 1;    // repeats of each contextual round; repairs stragglers
    int base_repeats = 1;     // repeats of the base round
    // after each insertion, survey the stored facts and re-assert the ones the
    // round's weight update knocked out (the edited edges assert their new
    // object); multi-hop corrections are never re-optimized here
    int repair_passes = 2;
    // sequential rounds re-assert the base edits alongside the compiled chains,
    // re-solved on current parameters; chains alone never touch the base keys
    bool refine_base = true;
    // scale of the state noise the refined targets must tolerate; roughly the
    // residual the assertion leaves on stored facts
    double bridge_noise = 0.1;
    // insert only the contextual chains the current weights get wrong; the
    // ones already resolved natively need no correction
    bool skip_correct_context = true;
    // extra copies of each memory keyed at perturbed subject states, so the
    // association also fires from the inexact states carried across hops
    int key_jitter = 0;
    double jitter_scale = 0.3;
    uint64_t seed = 0;
    exec_mode mode = exec_mode::openmp;
};

struct round_stats {
    int depth = 0;     // 1 for the base batch
    int compiled = 0;  // contextual edits before filtering
    int held_out = 0;  // removed by the holdout filter
    int conflicts = 0; // flagged before resolution
    int applied = 0;   // memories inserted
    int repaired = 0;  // facts re-asserted by maintenance passes
    double millis = 0.0;
};

struct run_stats {
    std::vector<round_stats> rounds;
    double total_millis = 0.0;
};

// One batch edit on the unmodified parameters (Algorithm 1's first step).
model::params run_baseline(const model::params & p, const kg::knowledge_graph & graph,
                           const std::vector<context::edit_request> & batch,
                           const run_config & cfg, run_stats * stats = nullptr);

// Base batch then depth-staged contextual rounds. Sequential order applies
// each round to the current parameters; parallel order computes every target
// state on the input parameters and inserts once (the ordering ablation).
model::params run_kedit(const model::params & p, const kg::knowledge_graph & graph,
                        const std::vector<context::edit_request> & batch,
                        const tmpl::registry & reg, const run_config & cfg,
                        run_stats * stats = nullptr);

// run_kedit with the evaluation set's second-hop edges held out of
// contextual compilation.
model::params run_generalization_ablation(const model::params & p,
                                          const kg::knowledge_graph & graph,
                                          const std::vector<context::edit_request> & batch,
                                          const tmpl::registry & reg,
                                          const editor::edge_set & eval_edges,
                                          const run_config & cfg, run_stats * stats = nullptr);

// (node, relation) pairs a chain traverses when resolved on the graph.
editor::edge_set chain_edges(const kg::knowledge_graph & g, int subject,
                             std::span<const int> chain);

} // namespace kedit::orch
