// temporary calibration probe for the full experiment; not part of the shipped tree
#include "kedit/context.hpp"
#include "kedit/eval.hpp"
#include "kedit/kg.hpp"
#include "kedit/model.hpp"
#include "kedit/orchestrator.hpp"
#include "kedit/rng.hpp"
#include "kedit/templates.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <cmath>
#include <algorithm>
#include <string>

using namespace kedit;
using clock_type = std::chrono::steady_clock;

static double ms_since(clock_type::time_point t0) {
    return std::chrono::duration<double, std::milli>(clock_type::now() - t0).count();
}

int main(int argc, char ** argv) {
    uint64_t master = 1;
    int n_edits = 50;
    int n_questions = 100;
    int u_spec = 10;
    orch::run_config rc;
    kg::synth_config gc;
    model::dims dm;
    model::seeder_config sc;
    int serial = 0;
    int pre_only = 0;

    for (int i = 1; i + 1 < argc; i += 2) {
        const char * k = argv[i];
        const double v = atof(argv[i + 1]);
        if (!strcmp(k, "seed")) master = uint64_t(v);
        else if (!strcmp(k, "edits")) n_edits = int(v);
        else if (!strcmp(k, "questions")) n_questions = int(v);
        else if (!strcmp(k, "depth")) rc.depth = int(v);
        else if (!strcmp(k, "fanout")) rc.fanout = int(v);
        else if (!strcmp(k, "max_steps")) rc.hyper.max_steps = int(v);
        else if (!strcmp(k, "n_contexts")) rc.hyper.n_contexts = int(v);
        else if (!strcmp(k, "noise")) rc.hyper.noise_scale = v;
        else if (!strcmp(k, "wd")) rc.hyper.weight_decay = v;
        else if (!strcmp(k, "step")) rc.hyper.step_size = v;
        else if (!strcmp(k, "pw")) rc.preserve_weight = v;
        else if (!strcmp(k, "ridge")) rc.ridge = v;
        else if (!strcmp(k, "pf")) rc.preserved_factor = int(v);
        else if (!strcmp(k, "kj")) rc.key_jitter = int(v);
        else if (!strcmp(k, "breps")) rc.base_repeats = int(v);
        else if (!strcmp(k, "rreps")) rc.round_repeats = int(v);
        else if (!strcmp(k, "repair")) rc.repair_passes = int(v);
        else if (!strcmp(k, "pp")) rc.preserved_paths = int(v);
        else if (!strcmp(k, "refb")) rc.refine_base = v != 0.0;
        else if (!strcmp(k, "bnoise")) rc.bridge_noise = v;
        else if (!strcmp(k, "skipok")) rc.skip_correct_context = v != 0.0;
        else if (!strcmp(k, "kjs")) rc.jitter_scale = v;
        else if (!strcmp(k, "u_spec")) u_spec = int(v);
        else if (!strcmp(k, "serial")) serial = int(v);
        else if (!strcmp(k, "key_gain")) dm.key_gain = v;
        else if (!strcmp(k, "relation_scale")) dm.relation_scale = v;
        else if (!strcmp(k, "spasses")) sc.passes = int(v);
        else if (!strcmp(k, "spw")) sc.preserve_weight = v;
        else if (!strcmp(k, "spp")) sc.preserved_per_batch = int(v);
        else if (!strcmp(k, "stol")) sc.state_tol = v;
        else if (!strcmp(k, "sjit")) sc.key_jitter = int(v);
        else if (!strcmp(k, "sjs")) sc.jitter_scale = v;
        else if (!strcmp(k, "split")) sc.layer_split = v != 0.0;
        else if (!strcmp(k, "pre_only")) pre_only = int(v);
        else { fprintf(stderr, "unknown key %s\n", k); return 1; }
    }
    if (serial) rc.mode = exec_mode::serial;

    gc.seed = seed_for(master, "graph");
    dm.n_entities = gc.n_entities;
    dm.n_relations = gc.n_relations;
    const auto g = kg::gen_synthetic(gc);
    const auto reg = tmpl::default_registry_for(g);

    auto t0 = clock_type::now();
    const auto p0 = model::init_model(dm, seed_for(master, "model"));
    sc.seed = seed_for(master, "seeder");
    model::seed_report rep;
    const auto p_pre = model::seed_facts(p0, g, sc, &rep);
    const double seed_ms = ms_since(t0);

    const auto batch = context::gen_edit_batch(g, reg, n_edits, seed_for(master, "batch"));
    const auto post = context::apply_batch(g, batch);
    const auto es =
        eval::gen_eval_set(g, post, batch, reg, n_questions, 2, 2, seed_for(master, "eval"));
    const auto eval_edges = eval::question_edges(post, es.questions);
    rc.seed = seed_for(master, "run");

    printf("seed=%llu recall=%.3f mres=%.3f seed_ms=%.0f questions=%zu short=%d\n",
           (unsigned long long)master, rep.recall, rep.mean_residual, seed_ms, es.questions.size(),
           int(es.short_of_request));

    const double spec_pre =
        eval::specificity(p_pre, batch, g, u_spec, seed_for(master, "spec")).mean;
    const double mh_pre = eval::multihop_accuracy(p_pre, es.questions).overall.mean;

    // does the seeded model chain at all? score questions against gold_pre
    {
        int chain_hits = 0;
        for (const auto & q : es.questions) {
            const auto r =
                model::run_query(p_pre, model::structured_query{q.subject, q.relation_chain, {}});
            chain_hits += r.prediction == q.gold_pre;
        }
        printf("pre: mh2=%.3f chain_pre=%.3f spec=%.3f\n", mh_pre,
               double(chain_hits) / double(es.questions.size()), spec_pre);
    }

    // where do the edits sit in the questions?
    editor::edge_set edited;
    for (const auto & e : batch) edited.insert({e.subject, e.relation});
    auto hop1_edited = [&](const eval::eval_question & q) {
        return edited.count({q.subject, q.relation_chain[0]}) > 0;
    };
    {
        int at1 = 0;
        for (const auto & q : es.questions) at1 += hop1_edited(q);
        printf("questions: hop1-edited=%d hop2-edited=%zu\n", at1, es.questions.size() - at1);
    }

    const auto compiled = context::get_contextual_edits(batch, post, reg, 2, rc.fanout,
                                                        seed_for(rc.seed, "orch.ctx"));
    {
        // stored-fact state fidelity: distance between 1-hop final state and E[object]
        std::vector<model::structured_query> fq;
        std::vector<int> fo;
        for (const auto & [key, obj] : g.forward) {
            fq.push_back(model::structured_query{key.first, {key.second}, {}});
            fo.push_back(obj);
        }
        std::vector<double> res(fq.size()), cosv(fq.size());
        for (size_t i = 0; i < fq.size(); ++i) {
            const auto out = model::run_query(p_pre, fq[i]);
            const auto & h = out.traces.back().final_state();
            double d2 = 0.0, dot = 0.0, hn = 0.0;
            for (int c = 0; c < dm.d; ++c) {
                const double e = p_pre.E(fo[i], c);
                d2 += (h[size_t(c)] - e) * (h[size_t(c)] - e);
                dot += h[size_t(c)] * e;
                hn += h[size_t(c)] * h[size_t(c)];
            }
            res[i] = std::sqrt(d2);
            cosv[i] = dot / std::max(1e-30, std::sqrt(hn));
        }
        std::sort(res.begin(), res.end());
        std::sort(cosv.begin(), cosv.end());
        auto pct = [](const std::vector<double> & v, double q) {
            return v[size_t(q * double(v.size() - 1))];
        };
        printf("fidelity: res p50=%.3f p90=%.3f  cos p10=%.3f p50=%.3f\n",
               pct(res, 0.5), pct(res, 0.9), pct(cosv, 0.1), pct(cosv, 0.5));
    }
    if (pre_only) return 0;

    struct variant {
        const char * name;
        model::params p;
        orch::run_stats st;
        double ms;
    };
    std::vector<variant> variants;

    t0 = clock_type::now();
    orch::run_stats st;
    auto pb = orch::run_baseline(p_pre, g, batch, rc, &st);
    variants.push_back({"baseline", std::move(pb), st, ms_since(t0)});

    t0 = clock_type::now();
    auto ps = orch::run_kedit(p_pre, g, batch, reg, rc, &st);
    variants.push_back({"kedit-seq", std::move(ps), st, ms_since(t0)});

    orch::run_config rp = rc;
    rp.order = orch::edit_order::parallel;
    t0 = clock_type::now();
    auto pp = orch::run_kedit(p_pre, g, batch, reg, rp, &st);
    variants.push_back({"kedit-par", std::move(pp), st, ms_since(t0)});

    t0 = clock_type::now();
    auto pa = orch::run_generalization_ablation(p_pre, g, batch, reg, eval_edges, rc, &st);
    variants.push_back({"kedit-holdout", std::move(pa), st, ms_since(t0)});

    for (const auto & v : variants) {
        const auto mh = eval::multihop_accuracy(v.p, es.questions);
        const auto eff = eval::efficacy(v.p, batch);
        const auto para =
            eval::paraphrase_score(v.p, batch, rc.hyper, seed_for(master, "paraphrase"));
        const auto spec = eval::specificity(v.p, batch, g, u_spec, seed_for(master, "spec"));

        // split by where the edited edge sits, and score the compiled
        // chains themselves (training accuracy for the contextual rounds)
        int h1_n = 0, h1_hit = 0, h2_n = 0, h2_hit = 0;
        int d_hop1 = 0, d_tele = 0, d_both = 0; // h1-edited decomposition
        for (const auto & q : es.questions) {
            const auto r =
                model::run_query(v.p, model::structured_query{q.subject, q.relation_chain, {}});
            const bool hit = r.prediction == q.gold_post;
            if (hop1_edited(q)) {
                h1_n += 1; h1_hit += hit;
                const int mid = post.forward.at({q.subject, q.relation_chain[0]});
                const auto r1 = model::run_query(
                    v.p, model::structured_query{q.subject, {q.relation_chain[0]}, {}});
                const auto r2 = model::run_query(
                    v.p, model::structured_query{mid, {q.relation_chain[1]}, {}});
                const bool ok1 = r1.prediction == mid;
                const bool ok2 = r2.prediction == q.gold_post;
                d_hop1 += ok1; d_tele += ok2; d_both += ok1 && ok2;
            }
            else { h2_n += 1; h2_hit += hit; }
        }
        int train_hit = 0;
        for (const auto & ce : compiled) {
            const auto r =
                model::run_query(v.p, model::structured_query{ce.subject, ce.relation_chain, {}});
            train_hit += r.prediction == ce.target_object;
        }
        std::string rounds;
        for (const auto & r : v.st.rounds) {
            char b[64];
            snprintf(b, sizeof b, " d%d:c%d/h%d/x%d/a%d/r%d", r.depth, r.compiled, r.held_out,
                     r.conflicts, r.applied, r.repaired);
            rounds += b;
        }
        printf("%-14s mh2=%.3f [h1 %d/%d, h2 %d/%d hop1ok=%d teleok=%d bothok=%d] "
               "train=%.3f eff=%.3f para=%.3f spec=%.3f "
               "dspec=%+.3f ms=%.0f%s\n",
               v.name, mh.overall.mean, h1_hit, h1_n, h2_hit, h2_n, d_hop1, d_tele, d_both,
               compiled.empty() ? 0.0 : double(train_hit) / double(compiled.size()), eff.mean,
               para.mean, spec.mean, spec.mean - spec_pre, v.ms, rounds.c_str());
    }
    return 0;
}
