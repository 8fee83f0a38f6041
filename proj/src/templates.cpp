#include "kedit/templates.hpp"

#include "kedit/error.hpp"

#include <json.hpp>

#include <fstream>

namespace kedit::tmpl {

namespace {

// Scan template text. Calls on_literal(c) for literal output chars and
// on_placeholder() for each {subject}. Throws BadPlaceholder on stray or
// malformed braces.
template <class LitFn, class SubFn>
void scan(std::string_view tpl, LitFn && on_literal, SubFn && on_placeholder) {
    static constexpr std::string_view token = "{subject}";
    size_t i = 0;
    while (i < tpl.size()) {
        char c = tpl[i];
        if (c == '{') {
            if (i + 1 < tpl.size() && tpl[i + 1] == '{') {
                on_literal('{');
                i += 2;
                continue;
            }
            if (tpl.substr(i, token.size()) == token) {
                on_placeholder();
                i += token.size();
                continue;
            }
            fail("BadPlaceholder", "unescaped '{' outside {subject} at offset " + std::to_string(i));
        }
        if (c == '}') {
            if (i + 1 < tpl.size() && tpl[i + 1] == '}') {
                on_literal('}');
                i += 2;
                continue;
            }
            fail("BadPlaceholder", "unescaped '}' at offset " + std::to_string(i));
        }
        on_literal(c);
        ++i;
    }
}

void validate(std::string_view tpl, const char * which) {
    int n = placeholder_count(tpl);
    if (n != 1)
        fail("BadPlaceholder", std::string(which) + " template needs exactly one {subject}, found " +
                                   std::to_string(n) + " in \"" + std::string(tpl) + "\"");
}

} // namespace

int placeholder_count(std::string_view tpl) {
    int n = 0;
    scan(
        tpl, [](char) {}, [&] { ++n; });
    return n;
}

std::string substitute(std::string_view tpl, std::string_view subject) {
    std::string out;
    out.reserve(tpl.size() + subject.size());
    scan(
        tpl, [&](char c) { out.push_back(c); }, [&] { out.append(subject); });
    return out;
}

void register_pair(registry & reg, int relation, std::string cloze, std::string nounphrase) {
    validate(cloze, "cloze");
    validate(nounphrase, "nounphrase");
    reg.pairs[relation] = template_pair{relation, std::move(cloze), std::move(nounphrase)};
}

namespace {

const template_pair & pair_for(const registry & reg, int relation) {
    auto it = reg.pairs.find(relation);
    if (it == reg.pairs.end())
        fail("MissingTemplate", "no template pair for relation id " + std::to_string(relation));
    return it->second;
}

} // namespace

std::string render_cloze(const registry & reg, int relation, std::string_view subject) {
    return substitute(pair_for(reg, relation).cloze, subject);
}

std::string render_nounphrase(const registry & reg, int relation, std::string_view subject) {
    return substitute(pair_for(reg, relation).nounphrase, subject);
}

std::string compose_prompt(const registry & reg, std::string_view subject, std::span<const int> chain) {
    if (chain.empty())
        fail("BadPlaceholder", "prompt composition needs at least one relation");
    std::string inner(subject);
    for (size_t d = 0; d + 1 < chain.size(); ++d)
        inner = render_nounphrase(reg, chain[d], inner);
    return render_cloze(reg, chain.back(), inner);
}

registry default_registry_for(const kg::knowledge_graph & g) {
    registry reg;
    for (const auto & r : g.relations)
        register_pair(reg, r.id, "The " + r.label + " of {subject} is", "the " + r.label + " of {subject}");
    return reg;
}

void save_registry(const registry & reg, const kg::knowledge_graph & g, const std::string & path) {
    nlohmann::json root = nlohmann::json::object();
    for (const auto & [rid, p] : reg.pairs) {
        if (rid < 0 || rid >= (int)g.relations.size())
            fail("DanglingId", "template for unknown relation id " + std::to_string(rid));
        root[g.relations[rid].label] = {{"cloze", p.cloze}, {"nounphrase", p.nounphrase}};
    }
    std::ofstream out(path);
    if (!out)
        fail("ParseError", "cannot open " + path + " for writing");
    out << root.dump(2) << "\n";
}

registry load_registry(const kg::knowledge_graph & g, const std::string & path) {
    std::ifstream in(path);
    if (!in)
        fail("ParseError", "cannot open " + path);
    nlohmann::json root;
    try {
        in >> root;
    } catch (const nlohmann::json::exception & e) {
        fail("ParseError", path + ": " + e.what());
    }
    if (!root.is_object())
        fail("ParseError", path + ": expected a JSON object keyed by relation label");
    registry reg;
    for (auto it = root.begin(); it != root.end(); ++it) {
        int rid = g.relation_by_label(it.key());
        if (rid < 0)
            fail("UnknownRelation", path + ": relation \"" + it.key() + "\" not in graph");
        const auto & v = it.value();
        if (!v.is_object() || !v.contains("cloze") || !v.contains("nounphrase"))
            fail("ParseError", path + ": entry \"" + it.key() + "\" needs cloze and nounphrase");
        register_pair(reg, rid, v["cloze"].get<std::string>(), v["nounphrase"].get<std::string>());
    }
    return reg;
}

std::vector<std::string> missing_relations(const registry & reg, const kg::knowledge_graph & g) {
    std::vector<std::string> out;
    for (const auto & r : g.relations)
        if (!reg.has(r.id))
            out.push_back(r.label);
    return out;
}

} // namespace kedit::tmpl
