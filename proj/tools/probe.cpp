// temporary calibration probe; not part of the shipped tree
#include "kedit/editor.hpp"
#include "kedit/kg.hpp"
#include "kedit/model.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>

using namespace kedit;

int main(int argc, char ** argv) {
    kg::synth_config gc;
    gc.seed = 7;
    model::dims dm;
    dm.n_entities = gc.n_entities;
    dm.n_relations = gc.n_relations;
    model::seeder_config sc;
    uint64_t model_seed = 7;

    for (int i = 1; i + 1 < argc; i += 2) {
        const char * k = argv[i];
        const double v = atof(argv[i + 1]);
        if (!strcmp(k, "key_gain")) dm.key_gain = v;
        else if (!strcmp(k, "relation_scale")) dm.relation_scale = v;
        else if (!strcmp(k, "batch")) sc.batch_size = int(v);
        else if (!strcmp(k, "passes")) sc.passes = int(v);
        else if (!strcmp(k, "u")) sc.preserved_per_batch = int(v);
        else if (!strcmp(k, "pw")) sc.preserve_weight = v;
        else if (!strcmp(k, "ridge")) sc.ridge = v;
        else if (!strcmp(k, "facts")) gc.n_facts = int(v);
        else if (!strcmp(k, "entities")) gc.n_entities = int(v);
        else if (!strcmp(k, "relations")) gc.n_relations = int(v);
        else if (!strcmp(k, "gseed")) gc.seed = uint64_t(v);
        else if (!strcmp(k, "mseed")) model_seed = uint64_t(v);
        else { fprintf(stderr, "unknown key %s\n", k); return 1; }
    }

    dm.n_entities = gc.n_entities;
    dm.n_relations = gc.n_relations;
    const auto g = kg::gen_synthetic(gc);
    const auto p0 = model::init_model(dm, model_seed);
    model::seed_report rep;
    const auto t0 = std::chrono::steady_clock::now();
    const auto p1 = model::seed_facts(p0, g, sc, &rep);
    const auto t1 = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    printf("facts=%d recall=%.4f seed_ms=%.0f\n", rep.n_facts, rep.recall, ms);
    return 0;
}
