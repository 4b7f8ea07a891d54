#pragma once

#include <ostream>
#include <string>

// Fast invariant checks across modules; scratch files go under `scratch_dir`.
// Prints one line per check and returns true when all pass.
bool run_selfcheck(std::ostream& out, const std::string& scratch_dir);
