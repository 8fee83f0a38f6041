#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace kedit::kg {

struct entity {
    int id = 0;
    std::string label;
};

struct relation {
    int id = 0;
    std::string label;
    bool functional = true;
};

struct triple {
    int s = 0;
    int r = 0;
    int o = 0;

    friend auto operator<=>(const triple &, const triple &) = default;
};

// (s, r, o -> o*)
struct edge_edit {
    int subject = 0;
    int relation = 0;
    int old_object = 0;
    int new_object = 0;
};

// Immutable after construction; edits produce new values.
struct knowledge_graph {
    std::vector<entity> entities;
    std::vector<relation> relations;
    std::set<triple> triples;
    // (subject, relation) -> object, functional relations only
    std::map<std::pair<int, int>, int> forward;

    int n_entities() const { return int(entities.size()); }
    int n_relations() const { return int(relations.size()); }

    const std::string & entity_label(int id) const;
    const std::string & relation_label(int id) const;
    int entity_by_label(std::string_view label) const;   // -1 if absent
    int relation_by_label(std::string_view label) const; // -1 if absent

    friend bool operator==(const knowledge_graph & a, const knowledge_graph & b) {
        return a.entities.size() == b.entities.size() &&
               a.relations.size() == b.relations.size() &&
               a.triples == b.triples;
    }
};

knowledge_graph build_graph(std::vector<entity> entities,
                            std::vector<relation> relations,
                            const std::vector<triple> & triples);

knowledge_graph apply_edge_edit(const knowledge_graph & g, const edge_edit & e);

// Folds the forward index over the relation chain. Throws BrokenPath.
int resolve_path(const knowledge_graph & g, int subject, std::span<const int> relations);

// All triples with the given subject, ordered by (relation, object).
std::vector<triple> neighborhood(const knowledge_graph & g, int ent);

struct synth_config {
    int n_entities = 200;
    int n_relations = 8;
    int n_facts = 600;
    uint64_t seed = 0;
    // object draw: zipf_mix of the mass from a zipf ranking, rest uniform
    double zipf_exponent = 1.1;
    double zipf_mix = 0.7;
};

knowledge_graph gen_synthetic(const synth_config & cfg);

void save_graph(const knowledge_graph & g, const std::string & path);
knowledge_graph load_graph(const std::string & path);

// Stable content hash over the canonical serialization.
uint64_t graph_hash(const knowledge_graph & g);

} // namespace kedit::kg
