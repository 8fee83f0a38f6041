#include "kedit/kg.hpp"

#include "kedit/error.hpp"
#include "kedit/rng.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

namespace kedit::kg {

using nlohmann::json;

const std::string & knowledge_graph::entity_label(int id) const {
    if (id < 0 || id >= n_entities()) fail("DanglingId", "entity id " + std::to_string(id));
    return entities[size_t(id)].label;
}

const std::string & knowledge_graph::relation_label(int id) const {
    if (id < 0 || id >= n_relations()) fail("DanglingId", "relation id " + std::to_string(id));
    return relations[size_t(id)].label;
}

int knowledge_graph::entity_by_label(std::string_view label) const {
    for (const auto & e : entities) {
        if (e.label == label) return e.id;
    }
    return -1;
}

int knowledge_graph::relation_by_label(std::string_view label) const {
    for (const auto & r : relations) {
        if (r.label == label) return r.id;
    }
    return -1;
}

knowledge_graph build_graph(std::vector<entity> entities,
                            std::vector<relation> relations,
                            const std::vector<triple> & triples) {
    knowledge_graph g;

    for (size_t i = 0; i < entities.size(); ++i) {
        if (entities[i].id != int(i)) {
            fail("DanglingId", "entity ids must be dense 0..n-1, got " +
                                   std::to_string(entities[i].id) + " at position " + std::to_string(i));
        }
    }
    for (size_t i = 0; i < relations.size(); ++i) {
        if (relations[i].id != int(i)) {
            fail("DanglingId", "relation ids must be dense 0..n-1, got " +
                                   std::to_string(relations[i].id) + " at position " + std::to_string(i));
        }
    }
    {
        std::set<std::string_view> seen;
        for (const auto & e : entities) {
            if (!seen.insert(e.label).second) fail("DanglingId", "duplicate entity label: " + e.label);
        }
        seen.clear();
        for (const auto & r : relations) {
            if (!seen.insert(r.label).second) fail("DanglingId", "duplicate relation label: " + r.label);
        }
    }

    g.entities = std::move(entities);
    g.relations = std::move(relations);

    const int ne = g.n_entities();
    const int nr = g.n_relations();
    for (const triple & t : triples) {
        if (t.s < 0 || t.s >= ne || t.o < 0 || t.o >= ne) {
            fail("DanglingId", "triple references unknown entity (" + std::to_string(t.s) + "," +
                                   std::to_string(t.r) + "," + std::to_string(t.o) + ")");
        }
        if (t.r < 0 || t.r >= nr) {
            fail("DanglingId", "triple references unknown relation " + std::to_string(t.r));
        }
        g.triples.insert(t);
        if (g.relations[size_t(t.r)].functional) {
            auto [it, fresh] = g.forward.try_emplace({t.s, t.r}, t.o);
            if (!fresh && it->second != t.o) {
                fail("DuplicateFunctionalEdge",
                     "two objects for (" + g.entity_label(t.s) + ", " + g.relation_label(t.r) + ")");
            }
        }
    }
    return g;
}

knowledge_graph apply_edge_edit(const knowledge_graph & g, const edge_edit & e) {
    if (e.old_object == e.new_object) {
        fail("InvalidEdit", "edit must change the object");
    }
    const triple before{e.subject, e.relation, e.old_object};
    if (!g.triples.count(before)) {
        fail("MissingEdge", "no triple (" + std::to_string(e.subject) + "," +
                                std::to_string(e.relation) + "," + std::to_string(e.old_object) + ")");
    }
    if (e.new_object < 0 || e.new_object >= g.n_entities()) {
        fail("DanglingId", "new object " + std::to_string(e.new_object));
    }

    knowledge_graph out = g;
    out.triples.erase(before);
    out.triples.insert(triple{e.subject, e.relation, e.new_object});
    if (out.relations[size_t(e.relation)].functional) {
        out.forward[{e.subject, e.relation}] = e.new_object;
    }
    return out;
}

int resolve_path(const knowledge_graph & g, int subject, std::span<const int> relations) {
    int cur = subject;
    for (size_t hop = 0; hop < relations.size(); ++hop) {
        auto it = g.forward.find({cur, relations[hop]});
        if (it == g.forward.end()) {
            fail("BrokenPath", "no edge (" + std::to_string(cur) + ", " +
                                   std::to_string(relations[hop]) + ") at hop " + std::to_string(hop + 1));
        }
        cur = it->second;
    }
    return cur;
}

std::vector<triple> neighborhood(const knowledge_graph & g, int ent) {
    if (ent < 0 || ent >= g.n_entities()) fail("DanglingId", "entity " + std::to_string(ent));
    std::vector<triple> out;
    auto it = g.triples.lower_bound(triple{ent, 0, 0});
    for (; it != g.triples.end() && it->s == ent; ++it) {
        out.push_back(*it);
    }
    // triple ordering is (s, r, o), so this is already (relation, object)
    return out;
}

knowledge_graph gen_synthetic(const synth_config & cfg) {
    const int ne = cfg.n_entities;
    const int nr = cfg.n_relations;
    const long nf = cfg.n_facts;
    if (ne <= 0 || nr <= 0 || nf < 0) fail("InfeasibleConfig", "sizes must be positive");
    if (nf > long(ne) * long(nr)) {
        fail("InfeasibleConfig", std::to_string(nf) + " facts > " + std::to_string(long(ne) * nr) +
                                     " possible (subject, relation) slots");
    }

    rng r(seed_for(cfg.seed, "kg.gen"));

    std::vector<entity> ents(static_cast<size_t>(ne));
    for (int i = 0; i < ne; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "ent%03d", i);
        ents[size_t(i)] = entity{i, buf};
    }
    std::vector<relation> rels(static_cast<size_t>(nr));
    for (int i = 0; i < nr; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "rel%d", i);
        rels[size_t(i)] = relation{i, buf, true};
    }

    // Zipf ranking over a shuffled entity order so the hubs are random.
    std::vector<int> rank(static_cast<size_t>(ne));
    for (int i = 0; i < ne; ++i) rank[size_t(i)] = i;
    for (int i = ne - 1; i > 0; --i) {
        std::swap(rank[size_t(i)], rank[r.index(size_t(i) + 1)]);
    }
    std::vector<double> cum(static_cast<size_t>(ne));
    double total = 0.0;
    for (int i = 0; i < ne; ++i) {
        total += 1.0 / std::pow(double(i + 1), cfg.zipf_exponent);
        cum[size_t(i)] = total;
    }

    auto draw_object = [&](int subject) {
        for (int attempt = 0; attempt < 64; ++attempt) {
            int o;
            if (r.uniform() < cfg.zipf_mix) {
                const double u = r.uniform() * total;
                o = rank[size_t(std::lower_bound(cum.begin(), cum.end(), u) - cum.begin())];
            } else {
                o = int(r.index(size_t(ne)));
            }
            if (o != subject || ne == 1) return o;
        }
        return (subject + 1) % ne;
    };

    std::set<std::pair<int, int>> used;
    std::vector<triple> triples;
    triples.reserve(size_t(nf));

    // every entity gets one outgoing edge first (when the budget allows)
    const int base = int(std::min<long>(nf, ne));
    for (int s = 0; s < base; ++s) {
        const int rel = int(r.index(size_t(nr)));
        triples.push_back(triple{s, rel, draw_object(s)});
        used.insert({s, rel});
    }
    while (long(triples.size()) < nf) {
        const int s = int(r.index(size_t(ne)));
        const int rel = int(r.index(size_t(nr)));
        if (!used.insert({s, rel}).second) continue;
        triples.push_back(triple{s, rel, draw_object(s)});
    }

    // >= 50% of entities must appear as objects so 2-hop chains exist
    std::vector<char> is_object(size_t(ne), 0);
    for (const auto & t : triples) is_object[size_t(t.o)] = 1;
    int covered = 0;
    for (char c : is_object) covered += c;
    const int want = (ne + 1) / 2;
    if (covered < want) {
        std::vector<int> missing;
        for (int i = 0; i < ne; ++i) {
            if (!is_object[size_t(i)]) missing.push_back(i);
        }
        size_t mi = 0;
        for (size_t ti = triples.size(); ti-- > 0 && covered < want && mi < missing.size();) {
            triple & t = triples[ti];
            if (t.o == missing[mi] || t.s == missing[mi]) continue;
            // only retarget edges whose object is not the sole cover of itself
            int count = 0;
            for (const auto & u : triples) count += (u.o == t.o);
            if (count <= 1) continue;
            t.o = missing[mi++];
            ++covered;
        }
        if (covered < want) fail("InfeasibleConfig", "cannot reach 50% object coverage");
    }

    return build_graph(std::move(ents), std::move(rels), triples);
}

static std::string graph_to_jsonl(const knowledge_graph & g) {
    std::ostringstream os;
    for (const auto & e : g.entities) {
        os << json{{"type", "entity"}, {"id", e.id}, {"label", e.label}}.dump() << '\n';
    }
    for (const auto & r : g.relations) {
        os << json{{"type", "relation"}, {"id", r.id}, {"label", r.label}, {"functional", r.functional}}.dump()
           << '\n';
    }
    for (const auto & t : g.triples) {
        os << json{{"type", "triple"}, {"s", t.s}, {"r", t.r}, {"o", t.o}}.dump() << '\n';
    }
    return os.str();
}

void save_graph(const knowledge_graph & g, const std::string & path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) fail("ParseError", "cannot open " + path + " for writing");
    f << graph_to_jsonl(g);
}

knowledge_graph load_graph(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail("ParseError", "cannot open " + path);

    std::vector<entity> ents;
    std::vector<relation> rels;
    std::vector<triple> triples;

    std::string line;
    int lineno = 0;
    auto bad = [&](const std::string & why) {
        fail("ParseError", path + ":" + std::to_string(lineno) + ": " + why);
    };
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("type")) bad("not a record");
        const std::string type = j["type"];
        try {
            if (type == "entity") {
                ents.push_back(entity{j.at("id").get<int>(), j.at("label").get<std::string>()});
            } else if (type == "relation") {
                rels.push_back(relation{j.at("id").get<int>(), j.at("label").get<std::string>(),
                                        j.at("functional").get<bool>()});
            } else if (type == "triple") {
                const triple t{j.at("s").get<int>(), j.at("r").get<int>(), j.at("o").get<int>()};
                if (t.s < 0 || size_t(t.s) >= ents.size() || t.o < 0 || size_t(t.o) >= ents.size() ||
                    t.r < 0 || size_t(t.r) >= rels.size()) {
                    bad("triple references an id not declared above it");
                }
                triples.push_back(t);
            } else {
                bad("unknown record type '" + type + "'");
            }
        } catch (const json::exception & e) {
            bad(e.what());
        }
    }
    try {
        return build_graph(std::move(ents), std::move(rels), triples);
    } catch (const error & e) {
        fail("ParseError", path + ": " + e.what());
    }
}

uint64_t graph_hash(const knowledge_graph & g) {
    return fnv1a64(graph_to_jsonl(g));
}

} // namespace kedit::kg
