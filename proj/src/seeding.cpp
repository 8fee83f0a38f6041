#include "kedit/editor.hpp"
#include "kedit/error.hpp"
#include "kedit/model.hpp"
#include "kedit/parallel.hpp"
#include "kedit/rng.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace kedit::model {

namespace {

struct fact {
    int s = -1, r = -1, o = -1;
};

structured_query fact_query(const fact & f) { return structured_query{f.s, {f.r}, {}}; }

editor::target_state fact_memory(const params & p, const fact & f) {
    editor::target_state ts;
    ts.query = fact_query(f);
    ts.target = f.o;
    ts.z.resize(static_cast<size_t>(p.dm.d));
    for (int i = 0; i < p.dm.d; ++i) ts.z[size_t(i)] = p.E(f.o, i);
    return ts;
}

void shuffle_indices(std::vector<size_t> & idx, rng & r) {
    for (size_t i = idx.size(); i > 1; --i) {
        std::swap(idx[i - 1], idx[r.index(i)]);
    }
}

struct fact_fit {
    std::vector<char> ok;         // argmax equals stored object
    std::vector<double> residual; // ||final_state - E[object]||
};

fact_fit survey(const params & p, const std::vector<fact> & facts) {
    fact_fit fit;
    fit.ok.assign(facts.size(), 0);
    fit.residual.assign(facts.size(), 0.0);
    parallel_for(exec_mode::openmp, int(facts.size()), [&](int i) {
        const auto out = run_query(p, fact_query(facts[size_t(i)]));
        fit.ok[size_t(i)] = out.prediction == facts[size_t(i)].o;
        const vec & h = out.traces.back().final_state();
        double d2 = 0.0;
        for (int c = 0; c < p.dm.d; ++c) {
            const double e = h[size_t(c)] - p.E(facts[size_t(i)].o, c);
            d2 += e * e;
        }
        fit.residual[size_t(i)] = std::sqrt(d2);
    });
    return fit;
}

} // namespace

params seed_facts(const params & p, const kg::knowledge_graph & g, const seeder_config & cfg,
                  seed_report * report) {
    if (cfg.batch_size <= 0 || cfg.passes < 1 || cfg.preserved_per_batch < 0 ||
        cfg.preserve_weight < 0.0 || cfg.ridge < 0.0) {
        fail("InfeasibleConfig", "seeder config out of range");
    }

    std::vector<fact> facts;
    facts.reserve(g.forward.size());
    for (const auto & [key, obj] : g.forward) {
        if (key.first < 0 || key.first >= p.dm.n_entities || key.second < 0 ||
            key.second >= p.dm.n_relations || obj < 0 || obj >= p.dm.n_entities) {
            fail("DimMismatch", "graph ids exceed model dims");
        }
        facts.push_back({key.first, key.second, obj});
    }

    params cur = p;
    if (!facts.empty()) {
        rng order_rng(seed_for(cfg.seed, "seed.order"));
        const uint64_t preserved_root = seed_for(cfg.seed, "seed.preserved");
        // facts inserted at least once; their keys may be held still
        std::vector<char> touched(facts.size(), 0);

        const uint64_t jitter_root = seed_for(cfg.seed, "seed.jitter");

        for (int pass = 0; pass < cfg.passes; ++pass) {
            std::vector<size_t> pending;
            if (pass == 0) {
                pending.resize(facts.size());
                for (size_t i = 0; i < facts.size(); ++i) pending[i] = i;
            } else {
                const fact_fit fit = survey(cur, facts);
                for (size_t i = 0; i < facts.size(); ++i) {
                    if (!fit.ok[i] || fit.residual[i] > cfg.state_tol) pending.push_back(i);
                }
            }
            if (pending.empty()) break;
            shuffle_indices(pending, order_rng);

            for (size_t at = 0; at < pending.size(); at += size_t(cfg.batch_size)) {
                const size_t hi = std::min(pending.size(), at + size_t(cfg.batch_size));
                // each fact's whole correction lands at one critical layer so a
                // per-layer solve carries n/n_critical columns, not n
                const int lanes = cfg.layer_split ? cur.dm.n_critical() : 1;
                for (int lane = 0; lane < lanes; ++lane) {
                    std::vector<char> in_batch(facts.size(), 0);
                    editor::edit_plan plan;
                    plan.preserve_weight = cfg.preserve_weight;
                    plan.ridge = cfg.ridge;
                    for (size_t i = at; i < hi; ++i) {
                        const fact & f = facts[pending[i]];
                        if (cfg.layer_split &&
                            int(seed_mix(uint64_t(f.s), uint64_t(f.r)) % uint64_t(lanes)) != lane) {
                            continue;
                        }
                        in_batch[pending[i]] = 1;
                        plan.memories.push_back(fact_memory(cur, f));
                        // same correction keyed at perturbed states: recall
                        // survives the state error carried into later hops
                        for (int j = 0; j < cfg.key_jitter; ++j) {
                            editor::target_state ts = plan.memories.back();
                            rng jr(seed_mix(jitter_root,
                                            seed_mix(pending[i],
                                                     uint64_t(pass) * 131 + uint64_t(j))));
                            ts.query.noise.resize(static_cast<size_t>(cur.dm.d));
                            for (double & x : ts.query.noise) x = cfg.jitter_scale * jr.gaussian();
                            plan.memories.push_back(std::move(ts));
                        }
                    }
                    if (plan.memories.empty()) continue;

                    std::vector<size_t> pool;
                    for (size_t i = 0; i < facts.size(); ++i) {
                        if (touched[i] && !in_batch[i]) pool.push_back(i);
                    }
                    rng pres_rng(seed_mix(preserved_root,
                                          seed_mix(uint64_t(pass), uint64_t(at) * 17 + uint64_t(lane))));
                    shuffle_indices(pool, pres_rng);
                    const size_t u = std::min(pool.size(), size_t(cfg.preserved_per_batch));
                    for (size_t i = 0; i < u; ++i) {
                        plan.preserved.push_back(fact_query(facts[pool[i]]));
                    }

                    params narrowed = cur;
                    if (cfg.layer_split) {
                        narrowed.dm.crit_lo = narrowed.dm.crit_hi = cur.dm.crit_lo + lane;
                    }
                    narrowed = editor::spread_and_insert(narrowed, plan, nullptr, exec_mode::openmp);
                    cur.W_out = std::move(narrowed.W_out);
                    for (size_t i = at; i < hi; ++i) {
                        if (in_batch[pending[i]]) touched[pending[i]] = 1;
                    }
                }
            }
        }
    }

    if (report) {
        report->n_facts = int(facts.size());
        if (facts.empty()) {
            report->recall = 1.0;
            report->mean_residual = 0.0;
        } else {
            const fact_fit fit = survey(cur, facts);
            int hits = 0;
            double rsum = 0.0;
            for (size_t i = 0; i < facts.size(); ++i) {
                hits += fit.ok[i] != 0;
                rsum += fit.residual[i];
            }
            report->recall = double(hits) / double(facts.size());
            report->mean_residual = rsum / double(facts.size());
        }
    }
    return cur;
}

} // namespace kedit::model
