#include <doctest.h>

#include "kedit/context.hpp"
#include "kedit/error.hpp"
#include "kedit/kg.hpp"
#include "kedit/templates.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <set>

using namespace kedit;

namespace {

#define CHECK_FAILS_WITH(expr, want_kind)                                                          \
    do {                                                                                           \
        bool caught_ = false;                                                                      \
        try {                                                                                      \
            (void)(expr);                                                                          \
        } catch (const kedit::error & e_) {                                                        \
            caught_ = true;                                                                        \
            CHECK(e_.kind() == (want_kind));                                                       \
        }                                                                                          \
        CHECK(caught_);                                                                            \
    } while (0)

// uk --PM--> boris; boris/sunak --spouse--> carrie/murty
kg::knowledge_graph uk_graph() {
    std::vector<kg::entity> ents = {{0, "the United Kingdom"},
                                    {1, "Boris Johnson"},
                                    {2, "Rishi Sunak"},
                                    {3, "Carrie Johnson"},
                                    {4, "Akshata Murty"}};
    std::vector<kg::relation> rels = {{0, "Prime Minister", true}, {1, "spouse", true}};
    std::vector<kg::triple> facts = {{0, 0, 1}, {1, 1, 3}, {2, 1, 4}};
    return kg::build_graph(ents, rels, facts);
}

tmpl::registry uk_registry() {
    tmpl::registry reg;
    tmpl::register_pair(reg, 0, "The Prime Minister of {subject} is", "{subject} Prime Minister");
    tmpl::register_pair(reg, 1, "The spouse of {subject} is", "the spouse of {subject}");
    return reg;
}

int functional_out_degree(const kg::knowledge_graph & g, int ent) {
    int n = 0;
    for (auto it = g.forward.lower_bound({ent, 0});
         it != g.forward.end() && it->first.first == ent; ++it) {
        ++n;
    }
    return n;
}

struct synth_fixture {
    kg::knowledge_graph graph;
    tmpl::registry reg;
    std::vector<context::edit_request> batch;
    kg::knowledge_graph post;
};

const synth_fixture & synth() {
    static const synth_fixture f = [] {
        synth_fixture s;
        kg::synth_config cfg;
        cfg.seed = 7;
        s.graph = kg::gen_synthetic(cfg);
        s.reg = tmpl::default_registry_for(s.graph);
        s.batch = context::gen_edit_batch(s.graph, s.reg, 50, 13);
        s.post = context::apply_batch(s.graph, s.batch);
        return s;
    }();
    return f;
}

} // namespace

TEST_SUITE_BEGIN("context");

TEST_CASE("the edited prime minister produces a spouse contextual edit") {
    const auto g = uk_graph();
    const auto reg = uk_registry();
    const auto e = context::make_edit(g, reg, 0, 0, 2);
    CHECK(e.old_object == 1);
    CHECK(e.prompt == "The Prime Minister of the United Kingdom is");

    const auto post = context::apply_batch(g, {e});
    CHECK(kg::resolve_path(post, 0, std::vector<int>{0}) == 2);

    const auto ctx = context::get_contextual_edits({e}, post, reg, 2, 8, 1);
    REQUIRE(ctx.size() == 1);
    CHECK(ctx[0].subject == 0);
    CHECK(ctx[0].relation_chain == std::vector<int>{0, 1});
    CHECK(ctx[0].target_object == 4);
    CHECK(ctx[0].depth == 2);
    CHECK(ctx[0].prompt == "The spouse of the United Kingdom Prime Minister is");
}

TEST_CASE("a new object with no outgoing edges yields nothing") {
    auto g = uk_graph();
    const auto reg = uk_registry();
    // point the edit at carrie, who has no outgoing edges
    const auto e = context::make_edit(g, reg, 0, 0, 3);
    const auto post = context::apply_batch(g, {e});
    CHECK(context::get_contextual_edits({e}, post, reg, 2, 8, 1).empty());
}

TEST_CASE("contextual edit count matches direct neighborhood counting") {
    const auto & s = synth();
    const auto ctx = context::get_contextual_edits(s.batch, s.post, s.reg, 2, 8, 99);

    size_t want = 0;
    for (const auto & e : s.batch) {
        want += size_t(std::min(8, functional_out_degree(s.post, e.new_object)));
    }
    CHECK(ctx.size() == want);

    // determinism
    const auto again = context::get_contextual_edits(s.batch, s.post, s.reg, 2, 8, 99);
    CHECK(ctx == again);
}

TEST_CASE("every contextual edit is anchored, resolved, and hides the new object") {
    const auto & s = synth();
    const auto ctx = context::get_contextual_edits(s.batch, s.post, s.reg, 2, 8, 99);
    REQUIRE(!ctx.empty());

    std::set<std::pair<int, int>> anchors;
    std::map<std::pair<int, int>, int> new_object_of;
    for (const auto & e : s.batch) {
        anchors.insert({e.subject, e.relation});
        new_object_of[{e.subject, e.relation}] = e.new_object;
    }
    for (const auto & ce : ctx) {
        CHECK(anchors.count({ce.subject, ce.relation_chain[0]}) == 1);
        CHECK(kg::resolve_path(s.post, ce.subject, ce.relation_chain) == ce.target_object);
        CHECK(ce.prompt.find("{subject}") == std::string::npos);
        const auto & hidden = s.graph.entity_label(new_object_of[{ce.subject, ce.relation_chain[0]}]);
        CHECK(ce.prompt.find(hidden) == std::string::npos);
    }
}

TEST_CASE("fanout caps hub expansion deterministically") {
    // hub with 5 outgoing edges, fanout 2
    std::vector<kg::entity> ents;
    for (int i = 0; i < 8; ++i) ents.push_back({i, "n" + std::to_string(i)});
    std::vector<kg::relation> rels;
    for (int i = 0; i < 6; ++i) rels.push_back({i, "r" + std::to_string(i), true});
    std::vector<kg::triple> facts = {{0, 0, 1}, {1, 1, 3}, {1, 2, 4}, {1, 3, 5}, {1, 4, 6}, {1, 5, 7},
                                     {0, 1, 2}};
    auto g = kg::build_graph(ents, rels, facts);
    const auto reg = tmpl::default_registry_for(g);
    const auto e = context::make_edit(g, reg, 0, 0, 2);
    // post graph: (0,0)->2; give 2 the same five outgoing edges? keep original hub 1:
    // instead edit (0,1): old 2 -> new 1 so the new object IS the hub
    const auto e2 = context::make_edit(g, reg, 0, 1, 1);
    const auto post2 = context::apply_batch(g, {e2});
    const auto capped = context::get_contextual_edits({e2}, post2, reg, 2, 2, 5);
    CHECK(capped.size() == 2);
    const auto full = context::get_contextual_edits({e2}, post2, reg, 2, 8, 5);
    CHECK(full.size() == 5);

    // the capped picks are a subset of the full expansion
    std::set<std::vector<int>> full_chains;
    for (const auto & ce : full) full_chains.insert(ce.relation_chain);
    for (const auto & ce : capped) CHECK(full_chains.count(ce.relation_chain) == 1);
    CHECK(capped == context::get_contextual_edits({e2}, post2, reg, 2, 2, 5));
    (void)e;
}

TEST_CASE("depth three emits only three-hop chains") {
    std::vector<kg::entity> ents;
    for (int i = 0; i < 8; ++i) ents.push_back({i, "d" + std::to_string(i)});
    std::vector<kg::relation> rels = {{0, "a", true}, {1, "b", true}, {2, "c", true}};
    // 0 -a-> 1; alternate 2 with 2 -b-> 3 -c-> 4
    std::vector<kg::triple> facts = {{0, 0, 1}, {2, 1, 3}, {3, 2, 4}};
    auto g = kg::build_graph(ents, rels, facts);
    const auto reg = tmpl::default_registry_for(g);
    const auto e = context::make_edit(g, reg, 0, 0, 2);
    const auto post = context::apply_batch(g, {e});

    const auto d3 = context::get_contextual_edits({e}, post, reg, 3, 8, 1);
    REQUIRE(d3.size() == 1);
    CHECK(d3[0].relation_chain == std::vector<int>{0, 1, 2});
    CHECK(d3[0].target_object == 4);
    CHECK(d3[0].depth == 3);

    CHECK_FAILS_WITH(context::get_contextual_edits({e}, post, reg, 1, 8, 1), "InfeasibleConfig");
    CHECK_FAILS_WITH(context::get_contextual_edits({e}, post, reg, 2, 0, 1), "InfeasibleConfig");
}

TEST_CASE("missing template pairs surface as errors") {
    const auto g = uk_graph();
    tmpl::registry partial;
    tmpl::register_pair(partial, 0, "The Prime Minister of {subject} is",
                        "{subject} Prime Minister");
    const auto e = context::make_edit(g, partial, 0, 0, 2);
    const auto post = context::apply_batch(g, {e});
    CHECK_FAILS_WITH(context::get_contextual_edits({e}, post, partial, 2, 8, 1), "MissingTemplate");
}

TEST_CASE("an overridden downstream edit is detected and resolved") {
    // lakers --owner--> buss; gates --birthplace--> seattle
    std::vector<kg::entity> ents = {{0, "the LA Lakers"}, {1, "Jerry Buss"}, {2, "Bill Gates"},
                                    {3, "Seattle"},       {4, "New York"},  {5, "Medina"}};
    std::vector<kg::relation> rels = {{0, "owner", true}, {1, "birthplace", true}};
    std::vector<kg::triple> facts = {{0, 0, 1}, {2, 1, 3}};
    auto g = kg::build_graph(ents, rels, facts);
    tmpl::registry reg;
    tmpl::register_pair(reg, 0, "The owner of {subject} is", "the owner of {subject}");
    tmpl::register_pair(reg, 1, "The birthplace of {subject} is", "the birthplace of {subject}");

    const auto e1 = context::make_edit(g, reg, 0, 0, 2); // buss -> gates
    const auto e2 = context::make_edit(g, reg, 2, 1, 4); // seattle -> new york
    const std::vector<context::edit_request> batch = {e1, e2};
    const auto post = context::apply_batch(g, batch);

    // a contextual edit resolved while ignoring e2 still points at seattle
    context::contextual_edit stale;
    stale.subject = 0;
    stale.relation_chain = {0, 1};
    stale.target_object = 3;
    stale.depth = 2;
    stale.prompt = tmpl::compose_prompt(reg, "the LA Lakers", stale.relation_chain);

    const auto found = context::detect_conflicts({stale}, batch, post);
    REQUIRE(found.size() == 1);
    CHECK(found[0].reason == context::conflict_reason::target_overridden);
    CHECK(found[0].clashing_edit == e2);
    CHECK(found[0].contextual == stale);

    const auto dropped = context::resolve_conflicts({stale}, found, context::conflict_policy::drop, post);
    CHECK(dropped.empty());

    const auto fixed =
        context::resolve_conflicts({stale}, found, context::conflict_policy::retarget, post);
    REQUIRE(fixed.size() == 1);
    CHECK(fixed[0].target_object == 4);
    CHECK(context::detect_conflicts(fixed, batch, post).empty());

    // the compiler itself resolves on the post graph, so nothing is flagged
    const auto ctx = context::get_contextual_edits(batch, post, reg, 2, 8, 1);
    REQUIRE(ctx.size() == 1);
    CHECK(ctx[0].target_object == 4);
    CHECK(context::detect_conflicts(ctx, batch, post).empty());
}

TEST_CASE("disjoint edits produce no conflicts") {
    const auto & s = synth();
    const auto ctx = context::get_contextual_edits(s.batch, s.post, s.reg, 2, 8, 99);
    CHECK(context::detect_conflicts(ctx, s.batch, s.post).empty());

    const auto untouched =
        context::resolve_conflicts(ctx, {}, context::conflict_policy::drop, s.post);
    CHECK(untouched == ctx);
}

TEST_CASE("generated batches are valid, distinct, and deterministic") {
    const auto & s = synth();
    CHECK(s.batch.size() == 50);
    std::set<std::pair<int, int>> seen;
    for (const auto & e : s.batch) {
        CHECK(e.old_object != e.new_object);
        CHECK(s.graph.forward.at({e.subject, e.relation}) == e.old_object);
        CHECK(e.prompt == tmpl::render_cloze(s.reg, e.relation, e.subject_text));
        seen.insert({e.subject, e.relation});
    }
    CHECK(seen.size() == 50);

    const auto again = context::gen_edit_batch(s.graph, s.reg, 50, 13);
    CHECK(again == s.batch);
    const auto other = context::gen_edit_batch(s.graph, s.reg, 50, 14);
    CHECK(other != s.batch);

    CHECK_FAILS_WITH(context::gen_edit_batch(s.graph, s.reg, 100000, 1), "InfeasibleConfig");
    CHECK_FAILS_WITH(context::gen_edit_batch(s.graph, s.reg, 0, 1), "InfeasibleConfig");
}

TEST_CASE("edit batches round-trip through the label file format") {
    const auto & s = synth();
    const char * path = "edits_roundtrip.jsonl";
    context::save_edit_batch(path, s.batch, s.graph);
    const auto back = context::load_edit_batch(path, s.graph, s.reg);
    CHECK(back == s.batch);
    std::remove(path);

    {
        std::ofstream f(path);
        f << R"({"s":"nope","r":"nope","o_old":"x","o_new":"y"})" << '\n';
    }
    CHECK_FAILS_WITH(context::load_edit_batch(path, s.graph, s.reg), "DanglingId");
    {
        std::ofstream f(path);
        f << "not json\n";
    }
    CHECK_FAILS_WITH(context::load_edit_batch(path, s.graph, s.reg), "ParseError");
    {
        // o_old must match the stored object
        const auto & e = s.batch[0];
        std::ofstream f(path);
        f << R"({"s":")" << s.graph.entity_label(e.subject) << R"(","r":")"
          << s.graph.relation_label(e.relation) << R"(","o_old":")"
          << s.graph.entity_label(e.new_object) << R"(","o_new":")"
          << s.graph.entity_label(e.old_object) << R"("})" << '\n';
    }
    CHECK_FAILS_WITH(context::load_edit_batch(path, s.graph, s.reg), "InvalidEdit");
    std::remove(path);
    CHECK_FAILS_WITH(context::load_edit_batch("no_such_file.jsonl", s.graph, s.reg), "ParseError");
}

TEST_CASE("contextual edits export with labels and prompts") {
    const auto & s = synth();
    const auto ctx = context::get_contextual_edits(s.batch, s.post, s.reg, 2, 8, 99);
    const char * path = "ctx_export.jsonl";
    context::save_contextual(path, ctx, s.post);
    std::ifstream f(path);
    size_t lines = 0;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty()) ++lines;
        CHECK(line.find("\"prompt\"") != std::string::npos);
        CHECK(line.find("\"chain\"") != std::string::npos);
    }
    CHECK(lines == ctx.size());
    std::remove(path);
}

TEST_SUITE_END();
