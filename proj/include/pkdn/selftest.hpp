#pragma once

#include <ostream>

namespace pkdn {

// Runs the full gradient-check and invariant suite in 64-bit mode, printing
// one line per check. Returns the number of failing checks (0 = all pass).
// `inject_grad_fault` adds a negative control with a deliberately corrupted
// backward rule that must be caught.
int run_selftest(std::ostream& out, bool inject_grad_fault = false);

}  // namespace pkdn
