#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "dualtta/errors.hpp"
#include "dualtta/experiment.hpp"
#include "dualtta/theory.hpp"

namespace dualtta::bench {

using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitContract = 1;
constexpr int kExitCheckFailed = 2;

ExperimentConfig config_from_flag(const std::string& path) {
  return path.empty() ? default_experiment_config() : load_experiment_config(path);
}

int cmd_pretrain(const std::string& config_path, const std::string& out_path) {
  ExperimentConfig cfg = config_from_flag(config_path);
  const data::SpuriousDataset ds = data::gen_spurious_dataset(cfg.dataset);
  ndgrad::RngStream root(cfg.dataset.seed);
  model::ModelState m = model::build_reference_net(cfg.dataset.num_classes, cfg.dataset.channels,
                                                   root.split("init").next_u64());
  model::PretrainConfig pc;
  pc.epochs = cfg.pretrain.epochs;
  pc.lr = cfg.pretrain.lr;
  pc.momentum = cfg.pretrain.momentum;
  pc.batch_size = cfg.pretrain.batch_size;
  pc.seed = root.split("pretrain").next_u64();
  model::PretrainReport rep = model::pretrain(m, ds.source_train.images, ds.source_train.labels,
                                              ds.source_val.images, ds.source_val.labels, pc);
  model::save_checkpoint(m, out_path);
  std::printf("pretrained %zu epochs: initial_loss=%.4f final_loss=%.4f source_val_acc=%.4f\n",
              pc.epochs, rep.initial_loss,
              rep.epoch_losses.empty() ? rep.initial_loss : rep.epoch_losses.back(),
              rep.source_val_accuracy);
  std::printf("checkpoint written to %s\n", out_path.c_str());
  return kExitOk;
}

int cmd_adapt(const std::string& model_path, const std::string& method,
              const std::string& scenario, std::uint64_t seed, const std::string& out_dir,
              const std::string& config_path) {
  ExperimentConfig cfg = config_from_flag(config_path);
  cfg.methods = {method};
  cfg.seeds = {seed};
  cfg.scenario.kind = data::scenario_from_string(scenario);
  cfg.checkpoint = model_path;

  ExperimentResults results = run_experiment(cfg);
  emit_reports(results, out_dir);
  const CellResult& c = results.cells.front();
  std::printf("%s seed=%llu scenario=%s: avg_acc=%.4f worst_group=%.4f macro_f1=%.4f "
              "pct_adapt=%.1f pct_corr_adapt=%.1f\n",
              c.method.c_str(), static_cast<unsigned long long>(c.seed), c.scenario.c_str(),
              c.metrics.accuracy, c.metrics.worst_group, c.metrics.macro_f1, c.pct_adapt,
              c.pct_corr_adapt);
  return kExitOk;
}

int cmd_bench(const std::string& config_path, const std::string& out_dir) {
  ExperimentConfig cfg = config_from_flag(config_path);
  ExperimentResults results = run_experiment(cfg);
  emit_reports(results, out_dir);
  for (const CellResult& c : results.cells) {
    std::printf("%-10s seed=%llu acc=%.4f worst=%.4f f1=%.4f adapt=%.1f%% corr=%.1f%%\n",
                c.method.c_str(), static_cast<unsigned long long>(c.seed), c.metrics.accuracy,
                c.metrics.worst_group, c.metrics.macro_f1, c.pct_adapt, c.pct_corr_adapt);
  }
  for (const WilcoxonEntry& w : results.wilcoxon) {
    if (w.ok) {
      std::printf("wilcoxon dualtta vs %-10s: W=%.1f p=%.5f (%s, n=%zu, two-sided)\n",
                  w.baseline.c_str(), w.result.statistic, w.result.p_two_sided,
                  w.result.method_used.c_str(), w.result.n_used);
    } else {
      std::printf("wilcoxon dualtta vs %-10s: %s\n", w.baseline.c_str(), w.error.c_str());
    }
  }
  std::printf("reports written to %s\n", out_dir.c_str());
  return kExitOk;
}

int cmd_theory(const std::string& check, std::size_t trials, std::uint64_t seed,
               std::string out_path) {
  if (check == "t1") {
    if (out_path.empty()) out_path = "theory_t1.json";
    theory::MarginModelConfig cfg;
    cfg.trials = std::max<std::size_t>(trials, 10000);
    cfg.seed = seed;
    auto records = theory::simulate_margin_model(cfg);
    auto res = theory::check_theorem1_monotonicity(records);
    json jr = json::array();
    for (const auto& r : records) {
      jr.push_back({{"s", r.s},
                    {"s_mag", r.s_mag},
                    {"alpha", r.alpha},
                    {"beta", r.beta},
                    {"error", r.error}});
    }
    json out{{"check", "t1"},
             {"spearman_rho", res.rho},
             {"status", theory::check_status_name(res.status)},
             {"records", jr}};
    std::ofstream f(out_path);
    f << out.dump(2) << '\n';
    std::printf("theorem 1 monotonicity: rho=%.4f status=%s -> %s\n", res.rho,
                theory::check_status_name(res.status), out_path.c_str());
    return res.status == theory::CheckStatus::pass ? kExitOk : kExitCheckFailed;
  }
  if (check == "t2") {
    if (out_path.empty()) out_path = "theory_t2.json";
    auto sweep = theory::run_theorem2_sweep(200, std::max<std::size_t>(trials, 1000), seed);
    json jr = json::array();
    for (const auto& r : sweep.reports) {
      jr.push_back({{"delta", r.delta},
                    {"distribution", r.distribution},
                    {"e_abs_delta", r.e_abs_delta},
                    {"flip_freq", r.flip_freq},
                    {"lower", r.lower},
                    {"upper", r.upper},
                    {"slack", r.slack},
                    {"pass", r.pass}});
    }
    json out{{"check", "t2"},
             {"configs", sweep.configs},
             {"passes", sweep.passes},
             {"all_pass", sweep.all_pass},
             {"reports", jr}};
    std::ofstream f(out_path);
    f << out.dump(2) << '\n';
    std::printf("theorem 2 bounds: %zu/%zu configurations within bounds -> %s\n", sweep.passes,
                sweep.configs, out_path.c_str());
    return sweep.all_pass ? kExitOk : kExitCheckFailed;
  }
  if (check == "corollary") {
    if (out_path.empty()) out_path = "theory_corollary.json";
    ExperimentConfig cfg = default_experiment_config();
    cfg.methods = {"dualtta"};
    cfg.seeds = {seed};
    ExperimentResults results = run_experiment(cfg);
    const CellResult& cell = results.cells.front();
    auto rep = theory::estimate_corollary_separation(cell.membership, cell.predicted,
                                                     cell.labels);
    json out{{"check", "corollary"},
             {"n_plus", rep.n_plus},
             {"n_minus", rep.n_minus},
             {"acc_plus", rep.acc_plus},
             {"acc_minus", rep.acc_minus},
             {"error_plus", rep.error_plus},
             {"error_minus", rep.error_minus},
             {"conclusive", rep.conclusive},
             {"separated", rep.separated}};
    std::ofstream f(out_path);
    f << out.dump(2) << '\n';
    std::printf("corollary separation: acc(D+)=%.3f (n=%zu) acc(D-)=%.3f (n=%zu) %s -> %s\n",
                rep.acc_plus, rep.n_plus, rep.acc_minus, rep.n_minus,
                rep.conclusive ? (rep.separated ? "separated" : "NOT separated") : "inconclusive",
                out_path.c_str());
    return rep.conclusive && rep.separated ? kExitOk : kExitCheckFailed;
  }
  throw ConfigError("theory: unknown check '" + check + "' (expected t1|t2|corollary)");
}

int cmd_gradcheck(std::uint64_t seed, double fd_step) {
  GradCheckReport rep = reference_gradcheck(seed, fd_step);
  std::printf("dual-loss gradient check: %zu coordinates, max_rel_err=%.3e (fd_step=%.0e, %.2fs)\n",
              rep.n_coords, rep.max_rel_err, rep.fd_step, rep.seconds);
  return rep.max_rel_err < 1e-4 ? kExitOk : kExitCheckFailed;
}

int cmd_dump_data(const std::string& config_path, const std::string& out_dir) {
  ExperimentConfig cfg = config_from_flag(config_path);
  const data::SpuriousDataset ds = data::gen_spurious_dataset(cfg.dataset);
  std::filesystem::create_directories(out_dir);
  data::dump_split(cfg.dataset, ds.source_train, "source_train",
                   std::filesystem::path(out_dir) / "source_train.json");
  data::dump_split(cfg.dataset, ds.source_val, "source_val",
                   std::filesystem::path(out_dir) / "source_val.json");
  data::dump_split(cfg.dataset, ds.target_test, "target_test",
                   std::filesystem::path(out_dir) / "target_test.json");
  std::printf("splits written to %s\n", out_dir.c_str());
  return kExitOk;
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv) {
  CLI::App app{"dualtta: test-time adaptation laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_path, model_path, method = "dualtta", scenario = "mild";
  std::string check = "t2";
  std::uint64_t seed = 1;
  std::size_t trials = 10000;
  double fd_step = 1e-5;

  CLI::App* pretrain = app.add_subcommand("pretrain", "pretrain the reference net on the source split");
  pretrain->add_option("--config", config_path, "experiment config file (JSON)");
  pretrain->add_option("--out", out_path, "checkpoint output path")->required();

  CLI::App* adapt = app.add_subcommand("adapt", "run one adaptation method over a test stream");
  adapt->add_option("--model", model_path, "model checkpoint")->required();
  adapt->add_option("--method", method, "noadapt|tent|eata_lite|deyo_lite|dualtta|deyo_dual|eata_dual")
      ->required();
  adapt->add_option("--scenario", scenario, "mild|imbalanced_label|mixed_shift");
  adapt->add_option("--seed", seed, "stream/adapter seed");
  adapt->add_option("--out", out_path, "output directory")->required();
  adapt->add_option("--config", config_path, "experiment config file (JSON)");

  CLI::App* bench = app.add_subcommand("bench", "methods x seeds grid with Wilcoxon tests");
  bench->add_option("--config", config_path, "experiment config file (JSON)");
  bench->add_option("--out", out_path, "output directory")->required();

  CLI::App* theory_cmd = app.add_subcommand("theory", "Monte Carlo theorem validators");
  theory_cmd->add_option("--check", check, "t1|t2|corollary")->required();
  theory_cmd->add_option("--trials", trials, "Monte Carlo trials");
  theory_cmd->add_option("--seed", seed, "validator seed");
  theory_cmd->add_option("--out", out_path, "report output file");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "dual-loss gradients vs finite differences");
  gradcheck->add_option("--seed", seed, "check seed");
  gradcheck->add_option("--fd-step", fd_step, "central-difference step");

  CLI::App* dump = app.add_subcommand("dump-data", "write the synthetic splits as JSON");
  dump->add_option("--config", config_path, "experiment config file (JSON)");
  dump->add_option("--out", out_path, "output directory")->required();

  try {
    app.parse(argc, argv);
    if (pretrain->parsed()) return cmd_pretrain(config_path, out_path);
    if (adapt->parsed()) return cmd_adapt(model_path, method, scenario, seed, out_path, config_path);
    if (bench->parsed()) return cmd_bench(config_path, out_path);
    if (theory_cmd->parsed()) return cmd_theory(check, trials, seed, out_path);
    if (gradcheck->parsed()) return cmd_gradcheck(seed, fd_step);
    if (dump->parsed()) return cmd_dump_data(config_path, out_path);
    std::fputs(app.help().c_str(), stderr);
    return kExitContract;
  } catch (const CLI::CallForHelp& e) {
    std::puts(app.help().c_str());
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: %s\n\n%s", e.what(), app.help().c_str());
    return kExitContract;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitContract;
  }
}

}  // namespace dualtta::bench
