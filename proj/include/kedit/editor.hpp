#pragma once

#include "kedit/kg.hpp"
#include "kedit/mat.hpp"
#include "kedit/model.hpp"
#include "kedit/parallel.hpp"

#include <cstdint>
#include <set>
#include <utility>
#include <vector>

namespace kedit::editor {

struct delta_hyper {
    int n_contexts = 8;        // perturbed inputs per memory
    double noise_scale = 0.05; // input perturbation scale
    double weight_decay = 1e-3;
    int max_steps = 200;
    double step_size = 0.5;
    double tol = 1e-6; // gradient-norm stop
    uint64_t seed = 0; // noise stream root; draws derive per query

    friend bool operator==(const delta_hyper &, const delta_hyper &) = default;
};

void validate_hyper(const delta_hyper & hy);

// Stable hash over (subject, chain, noise bits); keys the per-query noise
// stream and the plan distinctness check.
uint64_t query_fingerprint(const model::structured_query & q);

struct objective_value {
    double loss = 0.0;
    vec gradient;
};

// loss(delta) = -(1/P) sum_j log softmax(E.(h_j + delta))[target] + wd.|delta|^2
// where h_j are the final states under the P noise draws.
objective_value delta_objective(const model::params & p, const model::structured_query & q,
                                int target, const vec & delta, const delta_hyper & hy);

struct target_state {
    model::structured_query query;
    int target = -1;
    vec z; // clean final state + optimal delta
    double achieved_logprob = 0.0;
};

// Gradient descent from delta = 0. Throws NoProgress when the loss has not
// dropped after the first 10 steps.
target_state compute_target_state(const model::params & p, const model::structured_query & q,
                                  int target, const delta_hyper & hy);

// loss(z) = -log softmax(E.z)[direct_target]
//           + mean over readouts of -log softmax(E.hop(z, rel))[obj]
//           + wd.|z - z0|^2
objective_value bridge_objective(const model::params & p, const vec & z, const vec & z0,
                                 int direct_target,
                                 const std::vector<std::pair<int, int>> & readouts,
                                 const delta_hyper & hy);
// gradient descent from z0; noise draws perturb z so the minimum holds its
// readouts under assertion error
vec refine_bridge_state(const model::params & p, const vec & z0, int direct_target,
                        const std::vector<std::pair<int, int>> & readouts,
                        const delta_hyper & hy, double bridge_noise = 0.0,
                        uint64_t seed = 0);

struct edit_request {
    model::structured_query query;
    int target = -1;
    // (relation, object) continuations that must stay readable one hop beyond
    // this memory's state; non-empty requests get their z refined accordingly
    std::vector<std::pair<int, int>> readouts;
};

// Data-parallel over requests; per-query noise derivation keeps the result
// independent of scheduling.
std::vector<target_state> compute_target_states(const model::params & p,
                                                const std::vector<edit_request> & reqs,
                                                const delta_hyper & hy,
                                                exec_mode mode = exec_mode::serial);

struct layer_update_problem {
    mat K_E; // d_k x n edited keys
    mat R;   // d x n residuals
    mat K_P; // d_k x u preserved keys (u may be 0)
    double preserve_weight = 1.0;
    double ridge = 1e-6;
};

// W + R.K_E^T.(K_E.K_E^T + pw.K_P.K_P^T + ridge.I)^-1, the normal-equations
// minimizer of the edited/preserved least-squares objective.
mat solve_layer_update(const mat & W_out, const layer_update_problem & prob);

struct edit_plan {
    std::vector<target_state> memories;
    std::vector<model::structured_query> preserved; // keys to hold still
    double preserve_weight = 1.0;
    double ridge = 1e-6;
};

struct insert_stats {
    int n_memories = 0;
    double mean_residual = 0.0; // |z - final state| after all layers
};

// For each critical layer in order: recompute every memory's last-hop trace
// under the current weights, split the remaining residual evenly over the
// layers left, and solve the layer update.
model::params spread_and_insert(const model::params & p, const edit_plan & plan,
                                insert_stats * stats = nullptr,
                                exec_mode mode = exec_mode::serial);

// Key of each query's final hop at the given layer (1-based), current
// weights; one column per query.
mat keys_at_layer(const model::params & p, const std::vector<model::structured_query> & qs,
                  int layer, exec_mode mode = exec_mode::serial);

using edge_set = std::set<std::pair<int, int>>; // (subject entity, relation)

// Up to u stored facts as 1-hop queries, skipping excluded (s, r) pairs.
// multi-hop trajectories whose edges all avoid the excluded set: preserving
// their last-hop keys shields carried-state lookups, not just clean ones
std::vector<model::structured_query> sample_preserved_paths(const kg::knowledge_graph & g,
                                                            const edge_set & exclude, int u,
                                                            uint64_t seed);
std::vector<model::structured_query> sample_preserved_facts(const kg::knowledge_graph & g,
                                                            const edge_set & exclude, int u,
                                                            uint64_t seed);

// Preserved keys per critical layer for the sampled facts.
std::vector<mat> sample_preserved_keys(const model::params & p, const kg::knowledge_graph & g,
                                       const edge_set & exclude, int u, uint64_t seed);

} // namespace kedit::editor
