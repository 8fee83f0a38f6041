#pragma once

#include "kedit/kg.hpp"

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace kedit::tmpl {

// One cloze template ("The spouse of {subject} is") and one noun-phrase
// template ("the spouse of {subject}") per relation. Nesting noun phrases
// under a final cloze covers every multi-hop prompt with 2x|R| strings.
struct template_pair {
    int relation = -1;
    std::string cloze;
    std::string nounphrase;
};

struct registry {
    std::map<int, template_pair> pairs;

    bool has(int relation) const { return pairs.count(relation) != 0; }
    size_t size() const { return pairs.size(); }
};

// Number of {subject} placeholders, honoring {{ }} escapes.
int placeholder_count(std::string_view tpl);

// Substitute {subject} and collapse escapes. The template must already be
// validated.
std::string substitute(std::string_view tpl, std::string_view subject);

// Throws BadPlaceholder unless both strings contain {subject} exactly once.
void register_pair(registry & reg, int relation, std::string cloze, std::string nounphrase);

std::string render_cloze(const registry & reg, int relation, std::string_view subject);
std::string render_nounphrase(const registry & reg, int relation, std::string_view subject);

// Noun phrases innermost-first over chain[0..d-2], cloze of chain[d-1]
// outermost.
std::string compose_prompt(const registry & reg, std::string_view subject, std::span<const int> chain);

// Generic label-derived pairs for synthetic relations.
registry default_registry_for(const kg::knowledge_graph & g);

// JSON file keyed by relation label: {"spouse": {"cloze": ..., "nounphrase": ...}}
void save_registry(const registry & reg, const kg::knowledge_graph & g, const std::string & path);
registry load_registry(const kg::knowledge_graph & g, const std::string & path);

// Relations present in the graph but missing a pair.
std::vector<std::string> missing_relations(const registry & reg, const kg::knowledge_graph & g);

} // namespace kedit::tmpl
