#pragma once

#ifdef KEDIT_OPENMP
#include <omp.h>
#endif

namespace kedit {

// Execution mode for the data-parallel kernels. Every parallel loop in
// this project writes only to per-index slots, so both modes produce
// bitwise-identical results; serial stays around as the reference the
// tests compare against.
enum class exec_mode {
    serial,
    openmp,
};

inline int max_threads() {
#ifdef KEDIT_OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

inline bool openmp_enabled() {
#ifdef KEDIT_OPENMP
    return true;
#else
    return false;
#endif
}

template <typename F>
void parallel_for(exec_mode mode, int n, F && body) {
#ifdef KEDIT_OPENMP
    if (mode == exec_mode::openmp) {
#pragma omp parallel for schedule(static)
        for (int i = 0; i < n; ++i) {
            body(i);
        }
        return;
    }
#else
    (void) mode;
#endif
    for (int i = 0; i < n; ++i) {
        body(i);
    }
}

} // namespace kedit
