#pragma once

// Subcommands of the `nlkacz` tool. Each writes its artifacts under an output
// directory and returns normally; failures surface as nlkacz::Error.

#include <filesystem>
#include <iosfwd>

#include <json.hpp>

#include "nlkacz/cli/config.hpp"

namespace nlkacz::cli {

struct RunContext {
    std::filesystem::path out_dir;
    Index threads = 1;
    bool json = false;
};

/// Phantom, projections, noiseless sinograms, model tables and manifest.
void cmd_simulate(const ExperimentConfig& config, const RunContext& ctx, std::ostream& out);

enum class SolveMode { Dd, OneStep };
void cmd_solve(const ExperimentConfig& config, SolveMode mode, const RunContext& ctx, std::ostream& out);

ConditionReport cmd_verify(const ExperimentConfig& config, const RunContext& ctx, std::ostream& out);

/// Two-circle intersection under every strategy.
nlohmann::json cmd_demo(const RunContext& ctx, std::ostream& out);

/// Full command line: returns the process exit code (0 ok, 1 runtime or
/// config error, 2 usage error).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace nlkacz::cli
