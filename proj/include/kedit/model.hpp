#pragma once

#include "kedit/kg.hpp"
#include "kedit/mat.hpp"
#include "kedit/parallel.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace kedit::model {

// Layers are numbered 1..n_layers; the critical range [crit_lo..crit_hi]
// is where edits land.
struct dims {
    int n_entities = 0;
    int n_relations = 0;
    int d = 64;
    int d_r = 16;
    int d_k = 128;
    int n_layers = 6;
    int crit_lo = 3;
    int crit_hi = 6;
    // ||P.G[r]|| relative to the unit-norm entity rows
    double relation_scale = 0.5;
    // multiplies the 1/sqrt(d) W_in init; >1 saturates tanh so keys act as
    // near-sign patterns, which raises storage capacity per layer
    double key_gain = 24.0;

    int n_critical() const { return crit_hi - crit_lo + 1; }

    friend bool operator==(const dims &, const dims &) = default;
};

void validate_dims(const dims & dm);

struct params {
    dims dm;
    mat E;                  // n_entities x d, rows unit-norm, frozen
    mat G;                  // n_relations x d_r, frozen
    mat P;                  // d x d_r, frozen
    std::vector<mat> W_in;  // per layer, d_k x d, frozen
    std::vector<mat> W_out; // per layer, d x d_k, editable

    friend bool operator==(const params &, const params &) = default;
};

params init_model(const dims & dm, uint64_t seed);

// h_0 = state + P.G[r]; k_l = tanh(W_in[l] h_{l-1}); h_l = h_{l-1} + W_out[l] k_l
struct hop_trace {
    std::vector<vec> h; // n_layers + 1 states, h[0] = input
    std::vector<vec> k; // n_layers keys

    const vec & final_state() const { return h.back(); }
};

hop_trace forward_hop(const params & p, const vec & state, int relation);

struct structured_query {
    int subject = -1;
    std::vector<int> chain; // r_1 .. r_d
    vec noise;              // empty = none; added to the initial state

    friend auto operator<=>(const structured_query &, const structured_query &) = default;
};

// Initial hop-input state E[subject] (+ noise).
vec query_state(const params & p, const structured_query & q);

struct query_result {
    int prediction = -1;
    vec probabilities; // softmax(E . final_state)
    std::vector<hop_trace> traces;
};

query_result run_query(const params & p, const structured_query & q);

// Argmax predictions only; data-parallel over queries.
std::vector<int> predict_batch(const params & p, const std::vector<structured_query> & queries,
                               exec_mode mode = exec_mode::serial);

vec softmax(const vec & logits);
// softmax(E . state)
vec entity_distribution(const params & p, const vec & state);

void save_checkpoint(const params & p, const std::string & path);
params load_checkpoint(const std::string & path);

struct seeder_config {
    int batch_size = 600; // one global solve per layer at desk scale
    int passes = 10;      // sweeps after the first refine facts outside tolerance
    int preserved_per_batch = 600;
    double preserve_weight = 5.0; // correct facts are held still firmly
    double ridge = 1e-6;
    double state_tol = 0.35; // re-insert while ||final_state - E[object]|| exceeds this
    bool layer_split = false; // optional: store each fact at one critical layer
    int key_jitter = 0;      // extra noisy-key copies per fact (recall robustness)
    double jitter_scale = 0.1;
    uint64_t seed = 0;
};

struct seed_report {
    int n_facts = 0;
    double recall = 0.0;        // 1-hop argmax accuracy over all stored facts
    double mean_residual = 0.0; // mean ||final_state - E[object]|| over all facts
};

// Stores every functional triple with target state E[object] using the
// same insertion machinery as editing. Defined in seeding.cpp.
params seed_facts(const params & p, const kg::knowledge_graph & g, const seeder_config & cfg,
                  seed_report * report = nullptr);

} // namespace kedit::model
