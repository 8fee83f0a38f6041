#include "kedit/context.hpp"

#include "kedit/error.hpp"
#include "kedit/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <utility>

namespace kedit::context {

namespace {

using json = nlohmann::json;

uint64_t chain_key(uint64_t seed, int subject, const std::vector<int> & chain) {
    uint64_t h = seed_mix(seed, uint64_t(uint32_t(subject)));
    for (int r : chain) h = seed_mix(h, uint64_t(uint32_t(r)) + 0x9e3779b9ULL);
    return h;
}

// functional next-hop edges of an entity, in (relation, object) order
std::vector<std::pair<int, int>> forward_edges(const kg::knowledge_graph & g, int ent) {
    std::vector<std::pair<int, int>> out;
    const auto lo = g.forward.lower_bound({ent, 0});
    for (auto it = lo; it != g.forward.end() && it->first.first == ent; ++it) {
        out.push_back({it->first.second, it->second});
    }
    return out;
}

void check_batch_ids(const kg::knowledge_graph & g, const edit_request & e) {
    const int ne = g.n_entities(), nr = g.n_relations();
    if (e.subject < 0 || e.subject >= ne || e.old_object < 0 || e.old_object >= ne ||
        e.new_object < 0 || e.new_object >= ne || e.relation < 0 || e.relation >= nr) {
        fail("DanglingId", "edit references an unknown entity or relation");
    }
}

} // namespace

edit_request make_edit(const kg::knowledge_graph & g, const tmpl::registry & reg, int subject,
                       int relation, int new_object) {
    edit_request e;
    e.subject = subject;
    e.relation = relation;
    e.new_object = new_object;
    e.old_object = -1;
    check_batch_ids(g, {subject, relation, 0, new_object, "", ""});
    const auto it = g.forward.find({subject, relation});
    if (it == g.forward.end()) fail("MissingEdge", "no stored edge for (subject, relation)");
    e.old_object = it->second;
    if (e.old_object == e.new_object) fail("InvalidEdit", "edit must change the object");
    e.subject_text = g.entity_label(subject);
    e.prompt = tmpl::render_cloze(reg, relation, e.subject_text);
    return e;
}

kg::knowledge_graph apply_batch(const kg::knowledge_graph & g,
                                const std::vector<edit_request> & batch) {
    kg::knowledge_graph cur = g;
    for (const auto & e : batch) {
        cur = kg::apply_edge_edit(cur, {e.subject, e.relation, e.old_object, e.new_object});
    }
    return cur;
}

std::vector<edit_request> gen_edit_batch(const kg::knowledge_graph & g, const tmpl::registry & reg,
                                         int n, uint64_t seed) {
    if (n < 1) fail("InfeasibleConfig", "edit batch size must be positive");
    std::vector<std::pair<std::pair<int, int>, int>> pool(g.forward.begin(), g.forward.end());
    if (size_t(n) > pool.size()) fail("InfeasibleConfig", "fewer stored edges than requested edits");

    // objects seen under each relation, candidates for plausible rewrites
    std::map<int, std::vector<int>> rel_objects;
    for (const auto & [key, obj] : g.forward) rel_objects[key.second].push_back(obj);
    for (auto & [r, v] : rel_objects) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
    }
    std::vector<int> sources; // entities with outgoing edges
    for (const auto & [key, obj] : g.forward) sources.push_back(key.first);
    std::sort(sources.begin(), sources.end());
    sources.erase(std::unique(sources.begin(), sources.end()), sources.end());
    std::set<int> source_set(sources.begin(), sources.end());

    rng r(seed_for(seed, "context.batch"));
    for (size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[r.index(i)]);
    pool.resize(size_t(n));
    std::sort(pool.begin(), pool.end());

    std::vector<edit_request> out;
    out.reserve(size_t(n));
    for (const auto & [key, old_obj] : pool) {
        const auto & [s, rel] = key;
        auto pick = [&](const std::vector<int> & cands) {
            std::vector<int> ok;
            for (int c : cands) {
                if (c != old_obj && c != s) ok.push_back(c);
            }
            return ok.empty() ? -1 : ok[r.index(ok.size())];
        };
        // prefer same-relation objects that have onward edges
        std::vector<int> with_out;
        for (int c : rel_objects[rel]) {
            if (source_set.count(c)) with_out.push_back(c);
        }
        int nw = pick(with_out);
        if (nw < 0) nw = pick(sources);
        if (nw < 0) nw = pick(rel_objects[rel]);
        if (nw < 0) {
            std::vector<int> any(size_t(g.n_entities()));
            for (int i = 0; i < g.n_entities(); ++i) any[size_t(i)] = i;
            nw = pick(any);
        }
        if (nw < 0) fail("InfeasibleConfig", "no alternate object available");
        out.push_back(make_edit(g, reg, s, rel, nw));
    }
    return out;
}

std::vector<contextual_edit> get_contextual_edits(const std::vector<edit_request> & batch,
                                                  const kg::knowledge_graph & post_graph,
                                                  const tmpl::registry & reg, int depth, int fanout,
                                                  uint64_t seed) {
    if (depth < 2) fail("InfeasibleConfig", "contextual depth must be at least 2");
    if (fanout < 1) fail("InfeasibleConfig", "fanout must be at least 1");
    for (const auto & e : batch) check_batch_ids(post_graph, e);

    struct item {
        const edit_request * base = nullptr;
        std::vector<int> chain;
        int target = -1;
    };
    std::vector<item> frontier;
    frontier.reserve(batch.size());
    for (const auto & e : batch) frontier.push_back({&e, {e.relation}, e.new_object});

    std::vector<contextual_edit> out;
    for (int dep = 2; dep <= depth; ++dep) {
        std::vector<item> next;
        for (const auto & it : frontier) {
            auto edges = forward_edges(post_graph, it.target);
            if (int(edges.size()) > fanout) {
                std::vector<size_t> idx(edges.size());
                for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
                rng r(chain_key(seed, it.base->subject, it.chain));
                for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[r.index(i)]);
                idx.resize(size_t(fanout));
                std::sort(idx.begin(), idx.end());
                std::vector<std::pair<int, int>> kept;
                kept.reserve(idx.size());
                for (size_t i : idx) kept.push_back(edges[i]);
                edges = std::move(kept);
            }
            for (const auto & [rel, obj] : edges) {
                item ext{it.base, it.chain, obj};
                ext.chain.push_back(rel);
                if (dep == depth) {
                    contextual_edit ce;
                    ce.subject = ext.base->subject;
                    ce.relation_chain = ext.chain;
                    ce.target_object = obj;
                    ce.depth = dep;
                    ce.prompt = tmpl::compose_prompt(reg, ext.base->subject_text, ext.chain);
                    out.push_back(std::move(ce));
                } else {
                    next.push_back(std::move(ext));
                }
            }
        }
        frontier = std::move(next);
    }

    std::sort(out.begin(), out.end(), [](const contextual_edit & a, const contextual_edit & b) {
        if (a.subject != b.subject) return a.subject < b.subject;
        if (a.relation_chain != b.relation_chain) return a.relation_chain < b.relation_chain;
        return a.target_object < b.target_object;
    });
    return out;
}

std::vector<conflict> detect_conflicts(const std::vector<contextual_edit> & ctx,
                                       const std::vector<edit_request> & batch,
                                       const kg::knowledge_graph & post_graph) {
    std::map<std::pair<int, int>, const edit_request *> edited;
    for (const auto & e : batch) edited[{e.subject, e.relation}] = &e;

    std::vector<conflict> out;
    for (const auto & ce : ctx) {
        int node = ce.subject;
        const edit_request * clash = nullptr;
        for (size_t j = 0; j < ce.relation_chain.size(); ++j) {
            const int rel = ce.relation_chain[j];
            const auto it = post_graph.forward.find({node, rel});
            if (it == post_graph.forward.end()) {
                fail("BrokenPath", "contextual chain does not resolve on the post-edit graph");
            }
            if (j >= 1 && !clash) {
                const auto hit = edited.find({node, rel});
                if (hit != edited.end()) clash = hit->second;
            }
            node = it->second;
        }
        if (clash && node != ce.target_object) {
            out.push_back({ce, *clash, conflict_reason::target_overridden});
        }
    }
    return out;
}

std::vector<contextual_edit> resolve_conflicts(const std::vector<contextual_edit> & ctx,
                                               const std::vector<conflict> & conflicts,
                                               conflict_policy policy,
                                               const kg::knowledge_graph & post_graph) {
    std::set<std::pair<int, std::vector<int>>> flagged;
    for (const auto & c : conflicts) flagged.insert({c.contextual.subject, c.contextual.relation_chain});

    std::vector<contextual_edit> out;
    out.reserve(ctx.size());
    for (const auto & ce : ctx) {
        if (!flagged.count({ce.subject, ce.relation_chain})) {
            out.push_back(ce);
            continue;
        }
        if (policy == conflict_policy::drop) continue;
        contextual_edit fixed = ce;
        fixed.target_object = kg::resolve_path(post_graph, ce.subject, ce.relation_chain);
        out.push_back(std::move(fixed));
    }
    return out;
}

std::vector<edit_request> load_edit_batch(const std::string & path, const kg::knowledge_graph & g,
                                          const tmpl::registry & reg) {
    std::ifstream in(path);
    if (!in) fail("ParseError", "cannot open edit batch file: " + path);
    std::vector<edit_request> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("s") || !j.contains("r") ||
            !j.contains("o_old") || !j.contains("o_new")) {
            fail("ParseError", "bad edit record at line " + std::to_string(lineno));
        }
        const int s = g.entity_by_label(j["s"].get<std::string>());
        const int r = g.relation_by_label(j["r"].get<std::string>());
        const int oo = g.entity_by_label(j["o_old"].get<std::string>());
        const int on = g.entity_by_label(j["o_new"].get<std::string>());
        if (s < 0 || r < 0 || oo < 0 || on < 0) {
            fail("DanglingId", "unknown label at line " + std::to_string(lineno));
        }
        edit_request e = make_edit(g, reg, s, r, on);
        if (e.old_object != oo) {
            fail("InvalidEdit", "stored object differs from o_old at line " + std::to_string(lineno));
        }
        out.push_back(std::move(e));
    }
    return out;
}

void save_edit_batch(const std::string & path, const std::vector<edit_request> & batch,
                     const kg::knowledge_graph & g) {
    std::ofstream outf(path);
    if (!outf) fail("ParseError", "cannot open file for writing: " + path);
    for (const auto & e : batch) {
        json j;
        j["s"] = g.entity_label(e.subject);
        j["r"] = g.relation_label(e.relation);
        j["o_old"] = g.entity_label(e.old_object);
        j["o_new"] = g.entity_label(e.new_object);
        outf << j.dump() << '\n';
    }
}

void save_contextual(const std::string & path, const std::vector<contextual_edit> & ctx,
                     const kg::knowledge_graph & g) {
    std::ofstream outf(path);
    if (!outf) fail("ParseError", "cannot open file for writing: " + path);
    for (const auto & ce : ctx) {
        json j;
        j["s"] = g.entity_label(ce.subject);
        json chain = json::array();
        for (int r : ce.relation_chain) chain.push_back(g.relation_label(r));
        j["chain"] = chain;
        j["o"] = g.entity_label(ce.target_object);
        j["prompt"] = ce.prompt;
        j["depth"] = ce.depth;
        outf << j.dump() << '\n';
    }
}

} // namespace kedit::context
