#pragma once

#include "kedit/context.hpp"
#include "kedit/editor.hpp"
#include "kedit/kg.hpp"
#include "kedit/model.hpp"
#include "kedit/parallel.hpp"
#include "kedit/templates.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace kedit::eval {

// multi-hop question over the edited graph; gold answers are the exact path
// resolutions on the pre- and post-edit graphs
struct eval_question {
    int subject = -1;
    std::vector<int> relation_chain; // 2..4 hops
    int gold_pre = -1;
    int gold_post = -1;
    int n_edited_hops = 0; // >= 1 by construction
    std::string prompt_text;

    friend bool operator==(const eval_question &, const eval_question &) = default;
};

struct eval_set {
    std::vector<eval_question> questions;
    bool short_of_request = false; // the graph had fewer usable paths than asked
};

// Chains on the post-edit graph that cross at least one edited edge and also
// resolve on the pre-edit graph, balanced across hop counts in
// [hop_lo, hop_hi]. Chains whose intermediate nodes all have out-degree >= 2
// are preferred so answers are not guessable from the last relation alone.
// Deterministic in seed.
eval_set gen_eval_set(const kg::knowledge_graph & pre, const kg::knowledge_graph & post,
                      const std::vector<context::edit_request> & edits, const tmpl::registry & reg,
                      int n_per_hopcount, int hop_lo, int hop_hi, uint64_t seed);

struct metric {
    double mean = 0.0;
    double sem = 0.0; // sample standard deviation / sqrt(n)
    int n = 0;

    friend bool operator==(const metric &, const metric &) = default;
};

// mean and standard error of per-item outcomes
metric summarize(const std::vector<double> & outcomes);

// fraction of edits whose new object outweighs the old one on the clean
// one-hop edit query
metric efficacy(const model::params & p, const std::vector<context::edit_request> & edits,
                exec_mode mode = exec_mode::openmp);

// efficacy under hy.n_contexts noise perturbations per edit, drawn at
// hy.noise_scale from a stream disjoint from the editor's optimization noise
metric paraphrase_score(const model::params & p, const std::vector<context::edit_request> & edits,
                        const editor::delta_hyper & hy, uint64_t fresh_seed,
                        exec_mode mode = exec_mode::openmp);

// fraction of unedited neighbor facts (s', r, o_old) sharing an edit's
// relation and old object whose argmax stays o_old; up to u_neighbors
// samples per edit
metric specificity(const model::params & p, const std::vector<context::edit_request> & edits,
                   const kg::knowledge_graph & pre, int u_neighbors, uint64_t seed,
                   exec_mode mode = exec_mode::openmp);

struct multihop_result {
    metric overall;
    // (hops, edited hop count) -> accuracy within the cell
    std::map<std::pair<int, int>, metric> by_cell;
};

// fraction of questions whose prediction equals gold_post
multihop_result multihop_accuracy(const model::params & p,
                                  const std::vector<eval_question> & questions,
                                  exec_mode mode = exec_mode::openmp);

// (node, relation) pairs the questions traverse at hops >= 2 on the graph;
// holding these out of contextual compilation makes the generalization test
editor::edge_set question_edges(const kg::knowledge_graph & post,
                                const std::vector<eval_question> & questions);

// zero if any component is zero
double harmonic_mean3(double a, double b, double c);

struct metrics_report {
    metric efficacy;
    metric paraphrase;
    metric specificity;
    metric multihop;
    double score = 0.0; // harmonic mean of the first three means
    std::map<std::pair<int, int>, metric> breakdown;
    std::map<std::string, std::string> meta;

    friend bool operator==(const metrics_report &, const metrics_report &) = default;
};

metrics_report make_report(const metric & eff, const metric & par, const metric & spec,
                           const multihop_result & mh, std::map<std::string, std::string> meta);

// versioned JSON ("schema": 1)
void save_report(const std::string & path, const metrics_report & rep);
metrics_report load_report(const std::string & path);

// method rows x metric columns, values x100 with SEM in parentheses
std::string format_table(const std::vector<metrics_report> & reports);

} // namespace kedit::eval
