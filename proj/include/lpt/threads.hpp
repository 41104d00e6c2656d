#pragma once

namespace lpt {

/// Worker count used by data-parallel loops. Defaults to the machine
/// parallelism, capped by the LPT_THREADS environment variable.
int thread_count();

/// Overrides the worker count for the current process (0 = reset to the
/// environment default). Tests use this to verify scheduling independence.
void set_thread_count(int n);

}  // namespace lpt
