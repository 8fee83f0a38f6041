#include "kedit/editor.hpp"

#include "kedit/error.hpp"
#include "kedit/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace kedit::editor {

using model::params;
using model::structured_query;

void validate_hyper(const delta_hyper & hy) {
    if (hy.n_contexts < 1 || !(hy.noise_scale >= 0.0) || !(hy.weight_decay >= 0.0) ||
        hy.max_steps < 1 || !(hy.step_size > 0.0) || !(hy.tol > 0.0)) {
        fail("InfeasibleConfig", "bad delta hyperparameters");
    }
}

uint64_t query_fingerprint(const structured_query & q) {
    std::string bytes;
    bytes.reserve(8 + q.chain.size() * 4 + q.noise.size() * 8);
    auto put = [&](const void * p, size_t n) { bytes.append(static_cast<const char *>(p), n); };
    const int64_t s = q.subject;
    put(&s, sizeof s);
    for (int r : q.chain) put(&r, sizeof r);
    for (double v : q.noise) {
        uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        put(&bits, sizeof bits);
    }
    return fnv1a64(bytes);
}

namespace {

// Exceptions must not escape an omp region; stash per slot, rethrow the
// first by index so the result is schedule-independent.
template <typename F>
void parallel_for_checked(exec_mode mode, int n, F && body) {
    std::vector<std::string> kinds(static_cast<size_t>(n)), msgs(static_cast<size_t>(n));
    parallel_for(mode, n, [&](int i) {
        try {
            body(i);
        } catch (const kedit::error & e) {
            kinds[size_t(i)] = e.kind();
            msgs[size_t(i)] = e.what();
        } catch (const std::exception & e) {
            kinds[size_t(i)] = "NonFiniteState";
            msgs[size_t(i)] = e.what();
        }
    });
    for (size_t i = 0; i < kinds.size(); ++i) {
        if (!kinds[i].empty()) fail(kinds[i], "item " + std::to_string(i) + ": " + msgs[i]);
    }
}

// Final state of the full chain starting from an explicit hop-0 state.
vec chain_final(const params & p, vec state, const std::vector<int> & chain) {
    for (int r : chain) state = model::forward_hop(p, state, r).final_state();
    return state;
}

// The P perturbed final states plus the clean one, fixed for the whole
// descent: delta enters at the readout only.
struct context_states {
    std::vector<vec> noisy;
    vec clean;
};

context_states make_contexts(const params & p, const structured_query & q, const delta_hyper & hy) {
    context_states cs;
    const vec base = model::query_state(p, q);
    cs.clean = chain_final(p, base, q.chain);
    rng noise(seed_mix(hy.seed, query_fingerprint(q)));
    cs.noisy.reserve(size_t(hy.n_contexts));
    for (int j = 0; j < hy.n_contexts; ++j) {
        vec s = base;
        for (double & v : s) v += hy.noise_scale * noise.gaussian();
        cs.noisy.push_back(chain_final(p, s, q.chain));
    }
    return cs;
}

// loss and gradient at delta given the precomputed final states
objective_value eval_objective(const params & p, const std::vector<vec> & states, int target,
                               const vec & delta, double weight_decay, double * mean_logprob) {
    const int ne = p.dm.n_entities;
    const int d = p.dm.d;
    const double inv_p = 1.0 / double(states.size());

    objective_value out;
    out.gradient.assign(size_t(d), 0.0);
    vec h(static_cast<size_t>(d)), logits(static_cast<size_t>(ne));
    double logprob_sum = 0.0;

    for (const vec & hj : states) {
        for (int i = 0; i < d; ++i) h[size_t(i)] = hj[size_t(i)] + delta[size_t(i)];
        matvec(p.E, h, logits);
        const double m = *std::max_element(logits.begin(), logits.end());
        double z = 0.0;
        for (int i = 0; i < ne; ++i) z += std::exp(logits[size_t(i)] - m);
        const double logz = m + std::log(z);
        logprob_sum += logits[size_t(target)] - logz;

        // grad of -log p[target] wrt h is E^T softmax - E[target]
        vec probs(static_cast<size_t>(ne));
        for (int i = 0; i < ne; ++i) probs[size_t(i)] = std::exp(logits[size_t(i)] - logz);
        vec g(static_cast<size_t>(d));
        matvec_t(p.E, probs, g);
        axpy(inv_p, g, out.gradient);
    }
    axpy(-1.0, p.E.row_span(target), out.gradient);

    out.loss = -inv_p * logprob_sum;
    const double nd = nrm2(delta);
    out.loss += weight_decay * nd * nd;
    axpy(2.0 * weight_decay, delta, out.gradient);

    if (mean_logprob) *mean_logprob = inv_p * logprob_sum;
    return out;
}

} // namespace

objective_value delta_objective(const params & p, const structured_query & q, int target,
                                const vec & delta, const delta_hyper & hy) {
    validate_hyper(hy);
    if (target < 0 || target >= p.dm.n_entities) fail("DanglingId", "target " + std::to_string(target));
    if (int(delta.size()) != p.dm.d) fail("DimMismatch", "delta width");
    if (!all_finite(delta)) fail("NonFiniteState", "delta");
    const context_states cs = make_contexts(p, q, hy);
    return eval_objective(p, cs.noisy, target, delta, hy.weight_decay, nullptr);
}

target_state compute_target_state(const params & p, const structured_query & q, int target,
                                  const delta_hyper & hy) {
    validate_hyper(hy);
    if (target < 0 || target >= p.dm.n_entities) fail("DanglingId", "target " + std::to_string(target));
    const context_states cs = make_contexts(p, q, hy);

    vec delta(size_t(p.dm.d), 0.0);
    objective_value cur = eval_objective(p, cs.noisy, target, delta, hy.weight_decay, nullptr);
    const double loss0 = cur.loss;

    for (int step = 1; step <= hy.max_steps; ++step) {
        axpy(-hy.step_size, cur.gradient, delta);
        cur = eval_objective(p, cs.noisy, target, delta, hy.weight_decay, nullptr);
        if (!std::isfinite(cur.loss)) {
            fail("NoProgress", "objective diverged at step " + std::to_string(step));
        }
        if (step == 10 && cur.loss >= loss0) {
            fail("NoProgress", "no loss decrease in the first 10 steps");
        }
        if (nrm2(cur.gradient) <= hy.tol) break;
    }

    target_state ts;
    ts.query = q;
    ts.target = target;
    double logprob = 0.0;
    eval_objective(p, cs.noisy, target, delta, hy.weight_decay, &logprob);
    ts.achieved_logprob = logprob;
    ts.z = cs.clean;
    axpy(1.0, delta, ts.z);
    return ts;
}

std::vector<target_state> compute_target_states(const params & p,
                                                const std::vector<edit_request> & reqs,
                                                const delta_hyper & hy, exec_mode mode) {
    std::vector<target_state> out(reqs.size());
    parallel_for_checked(mode, int(reqs.size()), [&](int i) {
        out[size_t(i)] = compute_target_state(p, reqs[size_t(i)].query, reqs[size_t(i)].target, hy);
    });
    return out;
}

objective_value bridge_objective(const params & p, const vec & z, const vec & z0,
                                 int direct_target,
                                 const std::vector<std::pair<int, int>> & readouts,
                                 const delta_hyper & hy) {
    if (readouts.empty()) fail("EmptyBatch", "no readouts to refine against");
    if (int(z.size()) != p.dm.d || int(z0.size()) != p.dm.d) fail("DimMismatch", "bridge width");
    if (direct_target < 0 || direct_target >= p.dm.n_entities) {
        fail("DanglingId", "direct target " + std::to_string(direct_target));
    }
    if (!all_finite(z)) fail("NonFiniteState", "bridge state");
    objective_value out;
    out.gradient.assign(size_t(p.dm.d), 0.0);

    // the state must keep reading its own object directly; without this term
    // the readout sum is minimized by a blend of the chain objects' rows,
    // which satisfies nothing one hop out
    {
        const vec probs = model::entity_distribution(p, z);
        out.loss -= std::log(std::max(probs[size_t(direct_target)], 1e-300));
        vec g(static_cast<size_t>(p.dm.d));
        matvec_t(p.E, probs, g);
        axpy(-1.0, p.E.row_span(direct_target), g);
        axpy(1.0, g, out.gradient);
    }
    const double inv = 1.0 / double(readouts.size());
    vec a(static_cast<size_t>(p.dm.d_k));
    vec b(static_cast<size_t>(p.dm.d));
    for (const auto & [rel, obj] : readouts) {
        if (obj < 0 || obj >= p.dm.n_entities) fail("DanglingId", "readout object");
        const model::hop_trace t = model::forward_hop(p, z, rel);
        const vec probs = model::entity_distribution(p, t.h.back());
        out.loss -= inv * std::log(std::max(probs[size_t(obj)], 1e-300));
        vec g(static_cast<size_t>(p.dm.d));
        matvec_t(p.E, probs, g);
        axpy(-1.0, p.E.row_span(obj), g);
        // dh_{l+1}/dh_l = I + W_out.diag(1-k^2).W_in, applied transposed
        for (int l = p.dm.n_layers - 1; l >= 0; --l) {
            matvec_t(p.W_out[size_t(l)], g, a);
            const vec & k = t.k[size_t(l)];
            for (int i = 0; i < p.dm.d_k; ++i) a[size_t(i)] *= 1.0 - k[size_t(i)] * k[size_t(i)];
            matvec_t(p.W_in[size_t(l)], a, b);
            axpy(1.0, b, g);
        }
        axpy(inv, g, out.gradient);
    }
    vec dz = z;
    axpy(-1.0, z0, dz);
    const double nd = nrm2(dz);
    out.loss += hy.weight_decay * nd * nd;
    axpy(2.0 * hy.weight_decay, dz, out.gradient);
    return out;
}

vec refine_bridge_state(const params & p, const vec & z0, int direct_target,
                        const std::vector<std::pair<int, int>> & readouts,
                        const delta_hyper & hy, double bridge_noise, uint64_t seed) {
    validate_hyper(hy);
    if (readouts.empty()) return z0;
    if (!(bridge_noise >= 0.0)) fail("InfeasibleConfig", "negative bridge noise");

    // fixed draws; the first is clean. the refined z must keep its readouts
    // correct under the sort of error the assertion itself will leave behind
    std::vector<vec> etas(1, vec(static_cast<size_t>(p.dm.d), 0.0));
    if (bridge_noise > 0.0) {
        rng noise(seed_for(seed, "editor.bridge"));
        for (int c = 1; c < hy.n_contexts; ++c) {
            vec eta(static_cast<size_t>(p.dm.d));
            for (double & x : eta) x = bridge_noise * noise.gaussian();
            etas.push_back(std::move(eta));
        }
    }

    vec z = z0;
    vec shifted(z.size());
    for (int step = 0; step <= hy.max_steps; ++step) {
        objective_value cur;
        cur.gradient.assign(z.size(), 0.0);
        for (const auto & eta : etas) {
            for (size_t i = 0; i < z.size(); ++i) shifted[i] = z[i] + eta[i];
            const objective_value part =
                bridge_objective(p, shifted, z0, direct_target, readouts, hy);
            cur.loss += part.loss / double(etas.size());
            axpy(1.0 / double(etas.size()), part.gradient, cur.gradient);
        }
        if (!std::isfinite(cur.loss)) {
            fail("NoProgress", "bridge refinement diverged at step " + std::to_string(step));
        }
        if (nrm2(cur.gradient) <= hy.tol) break;
        axpy(-hy.step_size, cur.gradient, z);
    }
    return z;
}

mat solve_layer_update(const mat & W_out, const layer_update_problem & prob) {
    const int d = W_out.rows;
    const int dk = W_out.cols;
    const int n = prob.K_E.cols;
    if (n < 1) fail("EmptyBatch", "no edited keys");
    if (prob.K_E.rows != dk) fail("DimMismatch", "K_E rows != d_k");
    if (prob.R.rows != d || prob.R.cols != n) fail("DimMismatch", "R shape");
    if (prob.K_P.cols > 0 && prob.K_P.rows != dk) fail("DimMismatch", "K_P rows != d_k");
    if (!(prob.preserve_weight >= 0.0) || !(prob.ridge >= 0.0)) {
        fail("InfeasibleConfig", "negative preserve weight or ridge");
    }
    if (!all_finite(prob.K_E) || !all_finite(prob.R) || !all_finite(prob.K_P)) {
        fail("NonFiniteState", "layer update inputs");
    }

    mat A = matmul_nt(prob.K_E, prob.K_E);
    if (prob.K_P.cols > 0) {
        const mat App = matmul_nt(prob.K_P, prob.K_P);
        for (size_t i = 0; i < A.a.size(); ++i) A.a[i] += prob.preserve_weight * App.a[i];
    }
    for (int i = 0; i < dk; ++i) A(i, i) += prob.ridge;

    if (!cholesky_factor(A)) fail("SingularSystem", "normal equations not positive definite");

    mat rhs = transpose(matmul_nt(prob.R, prob.K_E)); // d_k x d, columns = rows of R.K_E^T
    cholesky_solve_cols(A, rhs);

    mat W = W_out;
    add_inplace(W, transpose(rhs));
    return W;
}

namespace {

struct memory_trace {
    vec key;   // at the requested layer, final hop
    vec final; // chain final state
};

memory_trace trace_last_hop(const params & p, const structured_query & q, int layer) {
    vec state = model::query_state(p, q);
    model::hop_trace t;
    for (int r : q.chain) {
        t = model::forward_hop(p, state, r);
        state = t.final_state();
    }
    return {t.k[size_t(layer - 1)], std::move(state)};
}

} // namespace

mat keys_at_layer(const params & p, const std::vector<structured_query> & qs, int layer,
                  exec_mode mode) {
    if (layer < 1 || layer > p.dm.n_layers) fail("DimMismatch", "layer " + std::to_string(layer));
    mat K(p.dm.d_k, int(qs.size()));
    parallel_for_checked(mode, int(qs.size()), [&](int i) {
        const memory_trace mt = trace_last_hop(p, qs[size_t(i)], layer);
        for (int row = 0; row < K.rows; ++row) K(row, i) = mt.key[size_t(row)];
    });
    return K;
}

model::params spread_and_insert(const params & p, const edit_plan & plan, insert_stats * stats,
                                exec_mode mode) {
    const int n = int(plan.memories.size());
    if (n == 0) fail("EmptyBatch", "edit plan holds no memories");
    {
        std::set<uint64_t> seen;
        for (const auto & m : plan.memories) {
            if (int(m.z.size()) != p.dm.d) fail("DimMismatch", "target state width");
            if (!seen.insert(query_fingerprint(m.query)).second) {
                fail("InvalidEdit", "duplicate memory in edit plan");
            }
        }
    }

    params cur = p;
    mat K_E(p.dm.d_k, n), R(p.dm.d, n);

    for (int layer = p.dm.crit_lo; layer <= p.dm.crit_hi; ++layer) {
        const double denom = double(p.dm.crit_hi - layer + 1);
        parallel_for_checked(mode, n, [&](int i) {
            const memory_trace mt = trace_last_hop(cur, plan.memories[size_t(i)].query, layer);
            const vec & z = plan.memories[size_t(i)].z;
            for (int row = 0; row < K_E.rows; ++row) K_E(row, i) = mt.key[size_t(row)];
            for (int row = 0; row < R.rows; ++row) {
                R(row, i) = (z[size_t(row)] - mt.final[size_t(row)]) / denom;
            }
        });
        layer_update_problem prob;
        prob.K_E = K_E;
        prob.R = R;
        prob.K_P = keys_at_layer(cur, plan.preserved, layer, mode);
        prob.preserve_weight = plan.preserve_weight;
        prob.ridge = plan.ridge;
        cur.W_out[size_t(layer - 1)] = solve_layer_update(cur.W_out[size_t(layer - 1)], prob);
    }

    if (stats) {
        vec errs(size_t(n), 0.0);
        parallel_for_checked(mode, n, [&](int i) {
            const memory_trace mt =
                trace_last_hop(cur, plan.memories[size_t(i)].query, p.dm.crit_hi);
            vec diff = plan.memories[size_t(i)].z;
            axpy(-1.0, mt.final, diff);
            errs[size_t(i)] = nrm2(diff);
        });
        stats->n_memories = n;
        stats->mean_residual = 0.0;
        for (double e : errs) stats->mean_residual += e;
        stats->mean_residual /= double(n);
    }
    return cur;
}

std::vector<structured_query> sample_preserved_facts(const kg::knowledge_graph & g,
                                                     const edge_set & exclude, int u,
                                                     uint64_t seed) {
    if (u < 0) fail("InfeasibleConfig", "negative preserved budget");
    std::vector<structured_query> pool;
    for (const auto & [key, obj] : g.forward) {
        (void)obj;
        if (exclude.count(key)) continue;
        pool.push_back(structured_query{key.first, {key.second}, {}});
    }
    rng r(seed_for(seed, "editor.preserved"));
    for (size_t i = pool.size(); i > 1; --i) {
        std::swap(pool[i - 1], pool[r.index(i)]);
    }
    if (int(pool.size()) > u) pool.resize(size_t(u));
    return pool;
}

std::vector<structured_query> sample_preserved_paths(const kg::knowledge_graph & g,
                                                     const edge_set & exclude, int u,
                                                     uint64_t seed) {
    if (u < 0) fail("InfeasibleConfig", "negative preserved budget");
    std::vector<structured_query> pool;
    for (const auto & [key, mid] : g.forward) {
        if (exclude.count(key)) continue;
        for (int rel = 0; rel < g.n_relations(); ++rel) {
            const auto it = g.forward.find({mid, rel});
            if (it == g.forward.end() || exclude.count({mid, rel})) continue;
            pool.push_back(structured_query{key.first, {key.second, rel}, {}});
        }
    }
    rng r(seed_for(seed, "editor.preserved_paths"));
    for (size_t i = pool.size(); i > 1; --i) {
        std::swap(pool[i - 1], pool[r.index(i)]);
    }
    if (int(pool.size()) > u) pool.resize(size_t(u));
    return pool;
}

std::vector<mat> sample_preserved_keys(const params & p, const kg::knowledge_graph & g,
                                       const edge_set & exclude, int u, uint64_t seed) {
    const auto facts = sample_preserved_facts(g, exclude, u, seed);
    std::vector<mat> out;
    for (int layer = p.dm.crit_lo; layer <= p.dm.crit_hi; ++layer) {
        out.push_back(keys_at_layer(p, facts, layer));
    }
    return out;
}

} // namespace kedit::editor
