#pragma once

#include "kedit/kg.hpp"
#include "kedit/templates.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace kedit::context {

// (subject, relation, old -> new) plus its rendered cloze prompt
struct edit_request {
    int subject = -1;
    int relation = -1;
    int old_object = -1;
    int new_object = -1;
    std::string prompt;
    std::string subject_text;

    friend bool operator==(const edit_request &, const edit_request &) = default;
};

// depth >= 2 chain rooted at an edited edge; target is the post-edit
// resolution of the chain
struct contextual_edit {
    int subject = -1;
    std::vector<int> relation_chain;
    int target_object = -1;
    std::string prompt;
    int depth = 0;

    friend bool operator==(const contextual_edit &, const contextual_edit &) = default;
};

enum class conflict_reason { target_overridden };

struct conflict {
    contextual_edit contextual;
    edit_request clashing_edit;
    conflict_reason reason = conflict_reason::target_overridden;
};

enum class conflict_policy { drop, retarget };

// Builds the request from the graph's current object and renders the prompt.
edit_request make_edit(const kg::knowledge_graph & g, const tmpl::registry & reg, int subject,
                       int relation, int new_object);

// Applies the edits in order; the result is the post-edit graph.
kg::knowledge_graph apply_batch(const kg::knowledge_graph & g,
                                const std::vector<edit_request> & batch);

// n distinct stored edges rewritten to plausible alternates (same-relation
// objects preferred, outgoing edges required when available).
std::vector<edit_request> gen_edit_batch(const kg::knowledge_graph & g, const tmpl::registry & reg,
                                         int n, uint64_t seed);

// Depth-d chains grown from each edit's new object over functional edges
// of the post-edit graph; at most fanout extensions per node, sampled
// deterministically from the seed. Output in canonical order.
std::vector<contextual_edit> get_contextual_edits(const std::vector<edit_request> & batch,
                                                  const kg::knowledge_graph & post_graph,
                                                  const tmpl::registry & reg, int depth, int fanout,
                                                  uint64_t seed);

// Flags contextual edits whose chain crosses another batch edit's edge while
// their stored target disagrees with the fully-edited resolution.
std::vector<conflict> detect_conflicts(const std::vector<contextual_edit> & ctx,
                                       const std::vector<edit_request> & batch,
                                       const kg::knowledge_graph & post_graph);

// drop removes flagged edits; retarget re-resolves them on the post graph.
std::vector<contextual_edit> resolve_conflicts(const std::vector<contextual_edit> & ctx,
                                               const std::vector<conflict> & conflicts,
                                               conflict_policy policy,
                                               const kg::knowledge_graph & post_graph);

// JSON-lines {"s","r","o_old","o_new"} keyed by labels.
std::vector<edit_request> load_edit_batch(const std::string & path, const kg::knowledge_graph & g,
                                          const tmpl::registry & reg);
void save_edit_batch(const std::string & path, const std::vector<edit_request> & batch,
                     const kg::knowledge_graph & g);

// JSON-lines with prompt, chain labels, target label, and depth.
void save_contextual(const std::string & path, const std::vector<contextual_edit> & ctx,
                     const kg::knowledge_graph & g);

} // namespace kedit::context
