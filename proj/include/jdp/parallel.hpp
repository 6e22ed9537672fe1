#pragma once

// Index-parallel loops. Every parallel kernel in the toolkit is expressed as
// "compute item i into slot i", so the OpenMP path and the serial reference
// produce identical results for any worker count; reductions happen
// afterwards in index order.

#include <cstddef>
#include <exception>
#include <mutex>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace jdp {

inline int hardware_workers()
{
#if defined(_OPENMP)
    return omp_get_max_threads();
#else
    return 1;
#endif
}

/// Serial reference loop.
template <class F>
void serial_for(std::size_t n, F&& f)
{
    for (std::size_t i = 0; i < n; ++i) f(i);
}

/// Dynamic-schedule OpenMP loop. Exceptions thrown by `f` are captured and
/// the first one (in completion order) is rethrown after the loop.
template <class F>
void parallel_for(std::size_t n, int workers, F&& f)
{
    if (workers <= 1 || n <= 1) {
        serial_for(n, f);
        return;
    }
#if defined(_OPENMP)
    std::exception_ptr failure;
    std::mutex guard;
    const auto count = static_cast<long long>(n);
#pragma omp parallel for schedule(dynamic, 1) num_threads(workers)
    for (long long i = 0; i < count; ++i) {
        try {
            f(static_cast<std::size_t>(i));
        } catch (...) {
            std::lock_guard lock(guard);
            if (!failure) failure = std::current_exception();
        }
    }
    if (failure) std::rethrow_exception(failure);
#else
    serial_for(n, f);
#endif
}

} // namespace jdp
