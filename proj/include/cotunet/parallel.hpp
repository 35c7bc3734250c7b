#pragma once

#include <cstdint>
#include <exception>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace cotunet {

inline void set_num_threads(int n) {
#if defined(_OPENMP)
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

inline int num_threads() {
#if defined(_OPENMP)
    return omp_get_max_threads();
#else
    return 1;
#endif
}

// Runs body(i) for i in [0, count). Work items must write disjoint outputs;
// any reduction across items is the caller's job, done in index order, so
// results never depend on the thread count. If items throw, the exception of
// the lowest failing index is rethrown after the loop.
template <typename Body>
void parallel_for(std::int64_t count, Body&& body) {
#if defined(_OPENMP)
    std::exception_ptr err;
    std::int64_t err_index = count;
#pragma omp parallel for schedule(dynamic, 1) if (count > 1)
    for (std::int64_t i = 0; i < count; ++i) {
        try {
            body(i);
        } catch (...) {
#pragma omp critical(cotunet_parallel_error)
            if (i < err_index) {
                err_index = i;
                err = std::current_exception();
            }
        }
    }
    if (err) std::rethrow_exception(err);
#else
    for (std::int64_t i = 0; i < count; ++i) body(i);
#endif
}

}  // namespace cotunet
