#include "kedit/model.hpp"

#include "kedit/error.hpp"
#include "kedit/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace kedit::model {

using nlohmann::json;

void validate_dims(const dims & dm) {
    if (dm.n_entities < 1 || dm.n_relations < 1 || dm.d < 1 || dm.d_r < 1 || dm.d_k < 1 ||
        dm.n_layers < 1) {
        fail("InfeasibleConfig", "model dims must be positive");
    }
    if (dm.crit_lo < 1 || dm.crit_lo > dm.crit_hi || dm.crit_hi > dm.n_layers) {
        fail("InfeasibleConfig", "critical range [" + std::to_string(dm.crit_lo) + ".." +
                                     std::to_string(dm.crit_hi) + "] outside 1.." +
                                     std::to_string(dm.n_layers));
    }
    if (!(dm.relation_scale > 0.0) || !(dm.key_gain > 0.0)) {
        fail("InfeasibleConfig", "relation_scale and key_gain must be positive");
    }
}

namespace {

mat gaussian_mat(rng & r, int rows, int cols, double scale) {
    mat m(rows, cols);
    for (double & v : m.a) v = scale * r.gaussian();
    return m;
}

} // namespace

params init_model(const dims & dm, uint64_t seed) {
    validate_dims(dm);
    params p;
    p.dm = dm;

    rng re(seed_for(seed, "model.E"));
    p.E = gaussian_mat(re, dm.n_entities, dm.d, 1.0);
    for (int i = 0; i < dm.n_entities; ++i) {
        double * row = p.E.row(i);
        const double n = nrm2(std::span<const double>(row, size_t(dm.d)));
        for (int j = 0; j < dm.d; ++j) row[j] /= n;
    }

    rng rg(seed_for(seed, "model.G"));
    p.G = gaussian_mat(rg, dm.n_relations, dm.d_r, 1.0 / std::sqrt(double(dm.d_r)));

    rng rp(seed_for(seed, "model.P"));
    // G rows land near unit norm, so relation_scale sets ||P.G[r]||
    p.P = gaussian_mat(rp, dm.d, dm.d_r, dm.relation_scale / std::sqrt(double(dm.d_r)));

    p.W_in.reserve(size_t(dm.n_layers));
    p.W_out.reserve(size_t(dm.n_layers));
    for (int l = 0; l < dm.n_layers; ++l) {
        rng rw(seed_for(seed, "model.W_in." + std::to_string(l + 1)));
        p.W_in.push_back(gaussian_mat(rw, dm.d_k, dm.d, dm.key_gain / std::sqrt(double(dm.d))));
        p.W_out.emplace_back(dm.d, dm.d_k);
    }
    return p;
}

hop_trace forward_hop(const params & p, const vec & state, int relation) {
    const dims & dm = p.dm;
    if (int(state.size()) != dm.d) fail("DimMismatch", "state width " + std::to_string(state.size()));
    if (!all_finite(state)) fail("NonFiniteState", "hop input");
    if (relation < 0 || relation >= dm.n_relations) {
        fail("DanglingId", "relation " + std::to_string(relation));
    }

    hop_trace t;
    t.h.resize(size_t(dm.n_layers) + 1);
    t.k.resize(size_t(dm.n_layers));

    vec h0(state);
    matvec_add(p.P, p.G.row_span(relation), h0);
    t.h[0] = std::move(h0);

    vec pre(static_cast<size_t>(dm.d_k));
    for (int l = 0; l < dm.n_layers; ++l) {
        matvec(p.W_in[size_t(l)], t.h[size_t(l)], pre);
        vec & key = t.k[size_t(l)];
        key.resize(size_t(dm.d_k));
        for (int i = 0; i < dm.d_k; ++i) key[size_t(i)] = std::tanh(pre[size_t(i)]);
        vec h = t.h[size_t(l)];
        matvec_add(p.W_out[size_t(l)], key, h);
        t.h[size_t(l) + 1] = std::move(h);
    }
    if (!all_finite(t.h.back())) fail("NonFiniteState", "hop output");
    return t;
}

vec query_state(const params & p, const structured_query & q) {
    const dims & dm = p.dm;
    if (q.subject < 0 || q.subject >= dm.n_entities) {
        fail("DanglingId", "query subject " + std::to_string(q.subject));
    }
    if (q.chain.empty()) fail("InvalidEdit", "empty relation chain");
    if (!q.noise.empty() && int(q.noise.size()) != dm.d) {
        fail("DimMismatch", "noise width " + std::to_string(q.noise.size()));
    }
    const double * e = p.E.row(q.subject);
    vec state(e, e + dm.d);
    if (!q.noise.empty()) axpy(1.0, q.noise, state);
    return state;
}

vec softmax(const vec & logits) {
    vec out(logits.size());
    const double m = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - m);
        z += out[i];
    }
    for (double & v : out) v /= z;
    return out;
}

vec entity_distribution(const params & p, const vec & state) {
    vec logits(static_cast<size_t>(p.dm.n_entities));
    matvec(p.E, state, logits);
    return softmax(logits);
}

query_result run_query(const params & p, const structured_query & q) {
    vec state = query_state(p, q);
    query_result res;
    res.traces.reserve(q.chain.size());
    for (int r : q.chain) {
        res.traces.push_back(forward_hop(p, state, r));
        state = res.traces.back().final_state();
    }
    res.probabilities = entity_distribution(p, state);
    res.prediction = int(std::max_element(res.probabilities.begin(), res.probabilities.end()) -
                         res.probabilities.begin());
    return res;
}

std::vector<int> predict_batch(const params & p, const std::vector<structured_query> & queries,
                               exec_mode mode) {
    std::vector<int> out(queries.size(), -1);
    parallel_for(mode, int(queries.size()), [&](int i) {
        out[size_t(i)] = run_query(p, queries[size_t(i)]).prediction;
    });
    return out;
}

namespace {

json mat_to_json(const mat & m) { return json(m.a); }

mat mat_from_json(const json & j, int rows, int cols, const char * name) {
    mat m(rows, cols);
    if (!j.is_array() || j.size() != m.a.size()) {
        fail("DimMismatch", std::string(name) + ": expected " + std::to_string(m.a.size()) +
                                " values, got " + std::to_string(j.size()));
    }
    for (size_t i = 0; i < m.a.size(); ++i) m.a[i] = j[i].get<double>();
    return m;
}

} // namespace

void save_checkpoint(const params & p, const std::string & path) {
    json root;
    root["dims"] = {{"n_entities", p.dm.n_entities}, {"n_relations", p.dm.n_relations},
                    {"d", p.dm.d},                   {"d_r", p.dm.d_r},
                    {"d_k", p.dm.d_k},               {"n_layers", p.dm.n_layers},
                    {"critical", {p.dm.crit_lo, p.dm.crit_hi}},
                    {"relation_scale", p.dm.relation_scale},
                    {"key_gain", p.dm.key_gain}};
    root["E"] = mat_to_json(p.E);
    root["G"] = mat_to_json(p.G);
    root["P"] = mat_to_json(p.P);
    json win = json::array(), wout = json::array();
    for (const auto & w : p.W_in) win.push_back(mat_to_json(w));
    for (const auto & w : p.W_out) wout.push_back(mat_to_json(w));
    root["W_in"] = std::move(win);
    root["W_out"] = std::move(wout);

    std::ofstream out(path, std::ios::binary);
    if (!out) fail("ParseError", "cannot open " + path + " for writing");
    out << root.dump() << "\n";
}

params load_checkpoint(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("ParseError", "cannot open " + path);
    json root = json::parse(in, nullptr, false);
    if (root.is_discarded() || !root.is_object()) fail("ParseError", path + ": not a JSON object");

    params p;
    try {
        const json & d = root.at("dims");
        p.dm.n_entities = d.at("n_entities").get<int>();
        p.dm.n_relations = d.at("n_relations").get<int>();
        p.dm.d = d.at("d").get<int>();
        p.dm.d_r = d.at("d_r").get<int>();
        p.dm.d_k = d.at("d_k").get<int>();
        p.dm.n_layers = d.at("n_layers").get<int>();
        p.dm.crit_lo = d.at("critical").at(0).get<int>();
        p.dm.crit_hi = d.at("critical").at(1).get<int>();
        p.dm.relation_scale = d.at("relation_scale").get<double>();
        p.dm.key_gain = d.at("key_gain").get<double>();
        validate_dims(p.dm);

        p.E = mat_from_json(root.at("E"), p.dm.n_entities, p.dm.d, "E");
        p.G = mat_from_json(root.at("G"), p.dm.n_relations, p.dm.d_r, "G");
        p.P = mat_from_json(root.at("P"), p.dm.d, p.dm.d_r, "P");
        const json & win = root.at("W_in");
        const json & wout = root.at("W_out");
        if (int(win.size()) != p.dm.n_layers || int(wout.size()) != p.dm.n_layers) {
            fail("DimMismatch", "layer count");
        }
        for (int l = 0; l < p.dm.n_layers; ++l) {
            p.W_in.push_back(mat_from_json(win[size_t(l)], p.dm.d_k, p.dm.d, "W_in"));
            p.W_out.push_back(mat_from_json(wout[size_t(l)], p.dm.d, p.dm.d_k, "W_out"));
        }
    } catch (const json::exception & e) {
        fail("ParseError", path + ": " + e.what());
    }
    if (!all_finite(p.E) || !all_finite(p.G) || !all_finite(p.P)) {
        fail("NonFiniteState", path + ": checkpoint holds non-finite values");
    }
    return p;
}

} // namespace kedit::model
