#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace ivcl::cli {

/// Runs one subcommand. Returns the process exit code; failures print a single
/// `error <kind>: <message>` line on `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Worker threads for data generation: IVCL_THREADS if set, else the core count.
unsigned thread_count();
void parallel_for(std::int64_t count, const std::function<void(std::int64_t)>& body);

}  // namespace ivcl::cli
