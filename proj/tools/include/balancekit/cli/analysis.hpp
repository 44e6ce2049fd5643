#pragma once

#include "balancekit/cli/config.hpp"
#include "balancekit/cli/reports.hpp"
#include "balancekit/engine.hpp"

namespace balancekit::cli {

struct AnalysisOutcome {
    int exit_code = kExitOk;
    Json report;
};

/// ingest -> solve -> balance check -> validation-period and post-treatment
/// estimates with bootstrap intervals. Writes the summary JSON and the
/// time-series CSV named in the config (also on failure, where possible).
AnalysisOutcome run_analysis(const AnalysisConfig& cfg, const EngineConfig& engine = {});

}  // namespace balancekit::cli
