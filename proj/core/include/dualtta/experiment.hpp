#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dualtta/data.hpp"
#include "dualtta/metrics.hpp"
#include "dualtta/model.hpp"
#include "dualtta/tta.hpp"

namespace dualtta::bench {

struct PretrainInlineConfig {
  std::size_t epochs = 14;
  double lr = 0.2;
  double momentum = 0.9;
  std::size_t batch_size = 64;
};

struct OutputOptions {
  // With deterministic_csv the wall_clock_s CSV column is written as 0.000 so
  // repeated runs of one config are byte-identical; measured timings are
  // always available in results.json.
  bool deterministic_csv = true;
};

struct ExperimentConfig {
  data::SpuriousDatasetConfig dataset;
  data::StreamScenario scenario;
  std::vector<std::string> methods = {"noadapt", "tent", "deyo_lite", "dualtta"};
  tta::AdapterConfig adapter;  // method field overridden per cell
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::string checkpoint;  // empty: pretrain inline per seed
  PretrainInlineConfig pretrain;
  OutputOptions output;
};

ExperimentConfig default_experiment_config();
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
std::string experiment_config_to_json(const ExperimentConfig& cfg);

struct BatchLogEntry {
  std::size_t batch_index = 0;
  std::size_t n_plus = 0;
  std::size_t n_minus = 0;
  double loss_plus = 0.0;
  double loss_minus = 0.0;
  double loss_dual = 0.0;
  bool updated = false;
};

// One (method, seed) cell of the grid.
struct CellResult {
  std::string method;
  std::uint64_t seed = 0;
  std::string scenario;
  Metrics metrics;
  double pct_adapt = 0.0;
  double pct_corr_adapt = 0.0;
  double wall_clock_s = 0.0;
  std::vector<BatchLogEntry> batch_log;
  // per-sample stream records, in stream order
  std::vector<std::size_t> predicted;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> groups;
  std::vector<tta::Membership> membership;
};

struct WilcoxonEntry {
  std::string baseline;
  bool ok = false;
  WilcoxonResult result;
  std::string error;  // set when ok is false
};

struct ExperimentResults {
  ExperimentConfig config;
  std::vector<CellResult> cells;            // ordered by (method, seed)
  std::vector<WilcoxonEntry> wilcoxon;      // dualtta vs each other method, per-seed pairs
};

ExperimentResults run_experiment(const ExperimentConfig& cfg);

// Runs one cell against a prepared model and stream; exposed for the CLI
// `adapt` subcommand and tests.
CellResult run_cell(const ExperimentConfig& cfg, const std::string& method, std::uint64_t seed,
                    const model::ModelState& pretrained,
                    const std::vector<data::StreamBatch>& stream);

// Writes results.json and results.csv (schema: method,seed,scenario,avg_acc,
// worst_group_acc,macro_f1,pct_adapt,pct_corr_adapt,wall_clock_s).
void emit_reports(const ExperimentResults& results, const std::filesystem::path& out_dir);

// Gradient fidelity of the dual loss on the reference network: batch of 8
// synthetic images, both partition sets populated, analytic gradients of
// every normalization affine scalar vs central differences.
struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t n_coords = 0;
  double fd_step = 1e-5;
  double seconds = 0.0;
};
GradCheckReport reference_gradcheck(std::uint64_t seed = 2024, double fd_step = 1e-5);

int cli_dispatch(int argc, const char* const* argv);

}  // namespace dualtta::bench
