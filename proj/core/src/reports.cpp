#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "dualtta/errors.hpp"
#include "dualtta/experiment.hpp"

namespace dualtta::bench {

using nlohmann::json;

namespace {

const char* membership_code(tta::Membership m) {
  switch (m) {
    case tta::Membership::d_plus: return "+";
    case tta::Membership::d_minus: return "-";
    case tta::Membership::neither: return ".";
  }
  return "?";
}

json cell_to_json(const CellResult& c) {
  json batches = json::array();
  for (const BatchLogEntry& b : c.batch_log) {
    batches.push_back({{"batch_index", b.batch_index},
                       {"n_plus", b.n_plus},
                       {"n_minus", b.n_minus},
                       {"loss_plus", b.loss_plus},
                       {"loss_minus", b.loss_minus},
                       {"loss_dual", b.loss_dual},
                       {"updated", b.updated}});
  }
  std::string memb;
  memb.reserve(c.membership.size());
  for (tta::Membership m : c.membership) memb += membership_code(m);
  return json{{"method", c.method},
              {"seed", c.seed},
              {"scenario", c.scenario},
              {"avg_acc", c.metrics.accuracy},
              {"per_group_acc", c.metrics.per_group},
              {"worst_group_acc", c.metrics.worst_group},
              {"macro_f1", c.metrics.macro_f1},
              {"pct_adapt", c.pct_adapt},
              {"pct_corr_adapt", c.pct_corr_adapt},
              {"wall_clock_s", c.wall_clock_s},
              {"batch_log", batches},
              {"predicted", c.predicted},
              {"labels", c.labels},
              {"groups", c.groups},
              {"membership", memb}};
}

}  // namespace

void emit_reports(const ExperimentResults& results, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);

  json cells = json::array();
  for (const CellResult& c : results.cells) cells.push_back(cell_to_json(c));
  json wilcoxon = json::array();
  for (const WilcoxonEntry& w : results.wilcoxon) {
    json entry{{"baseline", w.baseline}, {"ok", w.ok}};
    if (w.ok) {
      entry["w_plus"] = w.result.w_plus;
      entry["w_minus"] = w.result.w_minus;
      entry["statistic"] = w.result.statistic;
      entry["p_two_sided"] = w.result.p_two_sided;
      entry["method_used"] = w.result.method_used;
      entry["n_used"] = w.result.n_used;
      entry["sidedness"] = "two-sided";
    } else {
      entry["error"] = w.error;
    }
    wilcoxon.push_back(std::move(entry));
  }
  json root{{"config", json::parse(experiment_config_to_json(results.config))},
            {"results", cells},
            {"wilcoxon_dualtta_vs", wilcoxon}};

  {
    std::ofstream f(out_dir / "results.json", std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + (out_dir / "results.json").string());
    f << root.dump(2) << '\n';
  }

  std::ofstream csv(out_dir / "results.csv", std::ios::binary | std::ios::trunc);
  if (!csv) throw IoError("cannot write " + (out_dir / "results.csv").string());
  csv << "method,seed,scenario,avg_acc,worst_group_acc,macro_f1,pct_adapt,pct_corr_adapt,"
         "wall_clock_s\n";
  char buf[512];
  for (const CellResult& c : results.cells) {
    const double wall = results.config.output.deterministic_csv ? 0.0 : c.wall_clock_s;
    std::snprintf(buf, sizeof(buf), "%s,%llu,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.3f\n",
                  c.method.c_str(), static_cast<unsigned long long>(c.seed), c.scenario.c_str(),
                  c.metrics.accuracy, c.metrics.worst_group, c.metrics.macro_f1, c.pct_adapt,
                  c.pct_corr_adapt, wall);
    csv << buf;
  }
  if (!csv) throw IoError("failed writing results.csv");
}

}  // namespace dualtta::bench
