#include "kedit/eval.hpp"

#include "kedit/error.hpp"
#include "kedit/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

using json = nlohmann::json;

namespace kedit::eval {

namespace {

void check_edit_ids(const model::params & p, const std::vector<context::edit_request> & edits) {
    for (const auto & e : edits) {
        const bool ok = e.subject >= 0 && e.subject < p.dm.n_entities && e.relation >= 0 &&
                        e.relation < p.dm.n_relations && e.old_object >= 0 &&
                        e.old_object < p.dm.n_entities && e.new_object >= 0 &&
                        e.new_object < p.dm.n_entities;
        if (!ok) fail("DanglingId", "edit references ids outside the model");
    }
}

void check_question_ids(const model::params & p, const std::vector<eval_question> & questions) {
    for (const auto & q : questions) {
        bool ok = q.subject >= 0 && q.subject < p.dm.n_entities && q.gold_post >= 0 &&
                  q.gold_post < p.dm.n_entities;
        for (int r : q.relation_chain) ok = ok && r >= 0 && r < p.dm.n_relations;
        if (!ok) fail("DanglingId", "question references ids outside the model");
    }
}

// 1.0 when the new object outweighs the old one under the query
double flip_indicator(const model::params & p, const model::structured_query & q, int o_new,
                      int o_old) {
    const auto res = model::run_query(p, q);
    return res.probabilities[size_t(o_new)] > res.probabilities[size_t(o_old)] ? 1.0 : 0.0;
}

json metric_to_json(const metric & m) {
    json o;
    o["mean"] = m.mean;
    o["sem"] = m.sem;
    o["n"] = m.n;
    return o;
}

metric metric_from_json(const json & j) {
    if (!j.is_object() || !j.contains("mean") || !j.contains("sem") || !j.contains("n")) {
        fail("ParseError", "bad metric record in report");
    }
    metric m;
    m.mean = j["mean"].get<double>();
    m.sem = j["sem"].get<double>();
    m.n = j["n"].get<int>();
    return m;
}

} // namespace

metric summarize(const std::vector<double> & outcomes) {
    metric m;
    m.n = int(outcomes.size());
    if (m.n == 0) return m;
    double sum = 0.0;
    for (double v : outcomes) sum += v;
    m.mean = sum / double(m.n);
    if (m.n >= 2) {
        double ss = 0.0;
        for (double v : outcomes) ss += (v - m.mean) * (v - m.mean);
        m.sem = std::sqrt(ss / double(m.n - 1) / double(m.n));
    }
    return m;
}

eval_set gen_eval_set(const kg::knowledge_graph & pre, const kg::knowledge_graph & post,
                      const std::vector<context::edit_request> & edits, const tmpl::registry & reg,
                      int n_per_hopcount, int hop_lo, int hop_hi, uint64_t seed) {
    if (n_per_hopcount < 1) fail("InfeasibleConfig", "need at least one question per hop count");
    if (hop_lo < 2 || hop_hi > 4 || hop_lo > hop_hi) {
        fail("InfeasibleConfig", "hop range must sit inside [2, 4]");
    }
    editor::edge_set edited;
    for (const auto & e : edits) {
        const auto itp = pre.forward.find({e.subject, e.relation});
        const auto itq = post.forward.find({e.subject, e.relation});
        if (itp == pre.forward.end() || itq == post.forward.end()) {
            fail("MissingEdge", "edit edge absent from the graphs");
        }
        if (itp->second != e.old_object || itq->second != e.new_object) {
            fail("InvalidEdit", "edit disagrees with the pre/post graphs");
        }
        edited.insert({e.subject, e.relation});
    }

    const int n = post.n_entities();
    std::vector<std::vector<std::pair<int, int>>> adj(static_cast<size_t>(n)); // by node
    for (const auto & [key, obj] : post.forward) adj[size_t(key.first)].push_back({key.second, obj});

    struct cand {
        int subject;
        std::vector<int> chain;
        int gold_pre;
        int gold_post;
        int edited_hops;
        int first_edited; // 1-based hop of the first edited edge
        bool preferred;
    };
    std::vector<std::vector<cand>> pools(size_t(hop_hi) + 1);

    std::vector<int> chain;
    std::vector<int> nodes; // subject plus every node the chain visits
    auto emit = [&](int subject, int node, int edited_hops, int first_edited) {
        if (edited_hops < 1) return;
        int cur = subject; // the question must also resolve before the edits
        for (int r : chain) {
            const auto it = pre.forward.find({cur, r});
            if (it == pre.forward.end()) return;
            cur = it->second;
        }
        bool preferred = true;
        for (size_t i = 1; i + 1 < nodes.size(); ++i) {
            preferred = preferred && adj[size_t(nodes[i])].size() >= 2;
        }
        pools[chain.size()].push_back(
            {subject, chain, cur, node, edited_hops, first_edited, preferred});
    };
    auto dfs = [&](auto && self, int subject, int node, int edited_hops,
                   int first_edited) -> void {
        const int depth = int(chain.size());
        if (depth >= hop_lo) emit(subject, node, edited_hops, first_edited);
        if (depth == hop_hi) return;
        for (const auto & [r, obj] : adj[size_t(node)]) {
            const bool hit = edited.count({node, r}) > 0;
            chain.push_back(r);
            nodes.push_back(obj);
            self(self, subject, obj, edited_hops + int(hit),
                 first_edited == 0 && hit ? depth + 1 : first_edited);
            nodes.pop_back();
            chain.pop_back();
        }
    };
    for (int s = 0; s < n; ++s) {
        nodes.assign(1, s);
        dfs(dfs, s, s, 0, 0);
    }

    // strata by position of the first edited hop: in-degree skew would otherwise
    // drown questions that meet their edit on the first hop. preferred
    // candidates first within each stratum, topped up from the rest; seeded
    eval_set out;
    const uint64_t root = seed_for(seed, "eval.paths");
    for (int h = hop_lo; h <= hop_hi; ++h) {
        auto & pool = pools[size_t(h)];
        rng r(seed_mix(root, uint64_t(h)));
        auto shuffle = [&](std::vector<size_t> & idx) {
            for (size_t i = idx.size(); i > 1; --i) {
                std::swap(idx[i - 1], idx[r.index(i)]);
            }
        };
        std::vector<std::vector<size_t>> strata(size_t(h) + 1);
        for (size_t i = 0; i < pool.size(); ++i) {
            strata[size_t(pool[i].first_edited)].push_back(i);
        }
        std::vector<size_t> chosen;
        for (int pos = 1; pos <= h; ++pos) {
            auto & st = strata[size_t(pos)];
            std::vector<size_t> pref, rest;
            for (size_t i : st) (pool[i].preferred ? pref : rest).push_back(i);
            shuffle(pref);
            shuffle(rest);
            st = std::move(pref);
            st.insert(st.end(), rest.begin(), rest.end());
            const int want = n_per_hopcount / h + (pos <= n_per_hopcount % h ? 1 : 0);
            const int take = std::min(want, int(st.size()));
            chosen.insert(chosen.end(), st.begin(), st.begin() + take);
            st.erase(st.begin(), st.begin() + take);
        }
        // round-robin top-up from whatever the short strata could not fill
        size_t cursor = 1;
        while (int(chosen.size()) < n_per_hopcount) {
            bool any = false;
            for (int k = 0; k < h && int(chosen.size()) < n_per_hopcount; ++k) {
                auto & st = strata[(cursor - 1) % size_t(h) + 1];
                ++cursor;
                if (st.empty()) continue;
                chosen.push_back(st.front());
                st.erase(st.begin());
                any = true;
            }
            if (!any) break;
        }
        if (int(chosen.size()) < n_per_hopcount) out.short_of_request = true;
        std::sort(chosen.begin(), chosen.end());
        for (size_t i : chosen) {
            const cand & c = pool[i];
            eval_question q;
            q.subject = c.subject;
            q.relation_chain = c.chain;
            q.gold_pre = c.gold_pre;
            q.gold_post = c.gold_post;
            q.n_edited_hops = c.edited_hops;
            q.prompt_text = tmpl::compose_prompt(reg, post.entity_label(c.subject), c.chain);
            out.questions.push_back(std::move(q));
        }
    }
    return out;
}

metric efficacy(const model::params & p, const std::vector<context::edit_request> & edits,
                exec_mode mode) {
    check_edit_ids(p, edits);
    std::vector<double> outcomes(edits.size(), 0.0);
    parallel_for(mode, int(edits.size()), [&](int i) {
        const auto & e = edits[size_t(i)];
        outcomes[size_t(i)] = flip_indicator(
            p, model::structured_query{e.subject, {e.relation}, {}}, e.new_object, e.old_object);
    });
    return summarize(outcomes);
}

metric paraphrase_score(const model::params & p, const std::vector<context::edit_request> & edits,
                        const editor::delta_hyper & hy, uint64_t fresh_seed, exec_mode mode) {
    editor::validate_hyper(hy);
    check_edit_ids(p, edits);
    const uint64_t root = seed_for(fresh_seed, "eval.paraphrase");

    // all perturbed queries up front; scoring is data-parallel
    std::vector<model::structured_query> queries;
    queries.reserve(edits.size() * size_t(hy.n_contexts));
    for (const auto & e : edits) {
        model::structured_query q{e.subject, {e.relation}, {}};
        rng noise(seed_mix(root, editor::query_fingerprint(q)));
        for (int c = 0; c < hy.n_contexts; ++c) {
            model::structured_query perturbed = q;
            if (hy.noise_scale > 0.0) {
                vec nz(static_cast<size_t>(p.dm.d));
                for (double & v : nz) v = hy.noise_scale * noise.gaussian();
                perturbed.noise = std::move(nz);
            }
            queries.push_back(std::move(perturbed));
        }
    }
    std::vector<double> hits(queries.size(), 0.0);
    parallel_for(mode, int(queries.size()), [&](int i) {
        const auto & e = edits[size_t(i) / size_t(hy.n_contexts)];
        hits[size_t(i)] = flip_indicator(p, queries[size_t(i)], e.new_object, e.old_object);
    });
    std::vector<double> outcomes(edits.size(), 0.0);
    for (size_t i = 0; i < edits.size(); ++i) {
        double sum = 0.0;
        for (int c = 0; c < hy.n_contexts; ++c) {
            sum += hits[i * size_t(hy.n_contexts) + size_t(c)];
        }
        outcomes[i] = sum / double(hy.n_contexts);
    }
    return summarize(outcomes);
}

metric specificity(const model::params & p, const std::vector<context::edit_request> & edits,
                   const kg::knowledge_graph & pre, int u_neighbors, uint64_t seed,
                   exec_mode mode) {
    if (u_neighbors < 0) fail("InfeasibleConfig", "neighbor budget must be nonnegative");
    if (pre.n_entities() > p.dm.n_entities || pre.n_relations() > p.dm.n_relations) {
        fail("DimMismatch", "model does not cover the graph ids");
    }
    editor::edge_set edited;
    for (const auto & e : edits) edited.insert({e.subject, e.relation});

    struct sample {
        int subject;
        int relation;
        int object;
    };
    std::vector<sample> samples;
    const uint64_t root = seed_for(seed, "eval.specificity");
    for (const auto & e : edits) {
        std::vector<int> pool; // unedited subjects that share (relation, old object)
        for (const auto & [key, obj] : pre.forward) {
            if (key.second != e.relation || obj != e.old_object) continue;
            if (key.first == e.subject || edited.count(key)) continue;
            pool.push_back(key.first);
        }
        rng r(seed_mix(root, seed_mix(uint64_t(e.subject), uint64_t(e.relation))));
        const int take = std::min(u_neighbors, int(pool.size()));
        for (int i = 0; i < take; ++i) {
            std::swap(pool[size_t(i)], pool[size_t(i) + r.index(pool.size() - size_t(i))]);
        }
        for (int i = 0; i < take; ++i) samples.push_back({pool[size_t(i)], e.relation, e.old_object});
    }

    std::vector<double> outcomes(samples.size(), 0.0);
    parallel_for(mode, int(samples.size()), [&](int i) {
        const auto & s = samples[size_t(i)];
        const auto res = model::run_query(p, model::structured_query{s.subject, {s.relation}, {}});
        outcomes[size_t(i)] = res.prediction == s.object ? 1.0 : 0.0;
    });
    return summarize(outcomes);
}

multihop_result multihop_accuracy(const model::params & p,
                                  const std::vector<eval_question> & questions, exec_mode mode) {
    check_question_ids(p, questions);
    std::vector<double> outcomes(questions.size(), 0.0);
    parallel_for(mode, int(questions.size()), [&](int i) {
        const auto & q = questions[size_t(i)];
        const auto res = model::run_query(p, model::structured_query{q.subject, q.relation_chain, {}});
        outcomes[size_t(i)] = res.prediction == q.gold_post ? 1.0 : 0.0;
    });

    multihop_result out;
    out.overall = summarize(outcomes);
    std::map<std::pair<int, int>, std::vector<double>> cells;
    for (size_t i = 0; i < questions.size(); ++i) {
        const auto & q = questions[i];
        cells[{int(q.relation_chain.size()), q.n_edited_hops}].push_back(outcomes[i]);
    }
    for (const auto & [key, vals] : cells) out.by_cell[key] = summarize(vals);
    return out;
}

editor::edge_set question_edges(const kg::knowledge_graph & post,
                                const std::vector<eval_question> & questions) {
    editor::edge_set out;
    for (const auto & q : questions) {
        int node = q.subject;
        for (size_t j = 0; j < q.relation_chain.size(); ++j) {
            const int r = q.relation_chain[j];
            const auto it = post.forward.find({node, r});
            if (it == post.forward.end()) fail("BrokenPath", "question does not resolve");
            if (j >= 1) out.insert({node, r});
            node = it->second;
        }
    }
    return out;
}

double harmonic_mean3(double a, double b, double c) {
    if (a <= 0.0 || b <= 0.0 || c <= 0.0) return 0.0;
    return 3.0 / (1.0 / a + 1.0 / b + 1.0 / c);
}

metrics_report make_report(const metric & eff, const metric & par, const metric & spec,
                           const multihop_result & mh, std::map<std::string, std::string> meta) {
    metrics_report rep;
    rep.efficacy = eff;
    rep.paraphrase = par;
    rep.specificity = spec;
    rep.multihop = mh.overall;
    rep.score = harmonic_mean3(eff.mean, par.mean, spec.mean);
    rep.breakdown = mh.by_cell;
    rep.meta = std::move(meta);
    return rep;
}

void save_report(const std::string & path, const metrics_report & rep) {
    std::ofstream out(path);
    if (!out) fail("ParseError", "cannot open file for writing: " + path);
    json j;
    j["schema"] = 1;
    j["efficacy"] = metric_to_json(rep.efficacy);
    j["paraphrase"] = metric_to_json(rep.paraphrase);
    j["specificity"] = metric_to_json(rep.specificity);
    j["multihop"] = metric_to_json(rep.multihop);
    j["score"] = rep.score;
    json cells = json::array();
    for (const auto & [key, m] : rep.breakdown) {
        json c = metric_to_json(m);
        c["hops"] = key.first;
        c["edited"] = key.second;
        cells.push_back(c);
    }
    j["breakdown"] = cells;
    j["meta"] = rep.meta;
    out << j.dump(2) << '\n';
}

metrics_report load_report(const std::string & path) {
    std::ifstream in(path);
    if (!in) fail("ParseError", "cannot open report file: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const json j = json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) fail("ParseError", "bad report json: " + path);
    if (!j.contains("schema") || !j["schema"].is_number_integer() || j["schema"].get<int>() != 1) {
        fail("SchemaMismatch", "unsupported report schema in " + path);
    }
    metrics_report rep;
    rep.efficacy = metric_from_json(j.value("efficacy", json()));
    rep.paraphrase = metric_from_json(j.value("paraphrase", json()));
    rep.specificity = metric_from_json(j.value("specificity", json()));
    rep.multihop = metric_from_json(j.value("multihop", json()));
    rep.score = j.value("score", 0.0);
    const json cells = j.value("breakdown", json::array());
    for (const auto & c : cells) {
        if (!c.is_object() || !c.contains("hops") || !c.contains("edited")) {
            fail("ParseError", "bad breakdown cell in " + path);
        }
        rep.breakdown[{c["hops"].get<int>(), c["edited"].get<int>()}] = metric_from_json(c);
    }
    const json meta = j.value("meta", json::object());
    for (const auto & [key, val] : meta.items()) rep.meta[key] = val.get<std::string>();
    return rep;
}

std::string format_table(const std::vector<metrics_report> & reports) {
    char buf[192];
    std::string out;
    std::snprintf(buf, sizeof buf, "%-22s %14s %14s %14s %8s %14s\n", "method", "efficacy",
                  "paraphrase", "specificity", "score", "multi-hop");
    out += buf;
    auto cell = [](const metric & m) {
        char c[40];
        std::snprintf(c, sizeof c, "%.1f (%.1f)", 100.0 * m.mean, 100.0 * m.sem);
        return std::string(c);
    };
    for (const auto & rep : reports) {
        const auto it = rep.meta.find("method");
        const std::string method = it == rep.meta.end() ? std::string("?") : it->second;
        std::snprintf(buf, sizeof buf, "%-22s %14s %14s %14s %8.1f %14s\n", method.c_str(),
                      cell(rep.efficacy).c_str(), cell(rep.paraphrase).c_str(),
                      cell(rep.specificity).c_str(), 100.0 * rep.score,
                      cell(rep.multihop).c_str());
        out += buf;
    }
    return out;
}

} // namespace kedit::eval
