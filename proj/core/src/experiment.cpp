#include "dualtta/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "dualtta/errors.hpp"
#include "dualtta/theory.hpp"
#include "dualtta/transforms.hpp"

namespace dualtta::bench {

using nlohmann::json;

namespace {

// ---- config <-> json -------------------------------------------------------

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void parse_dataset(const json& j, data::SpuriousDatasetConfig& d) {
  maybe(j, "num_classes", d.num_classes);
  maybe(j, "channels", d.channels);
  maybe(j, "height", d.height);
  maybe(j, "width", d.width);
  maybe(j, "p_corr_train", d.p_corr_train);
  maybe(j, "p_corr_test", d.p_corr_test);
  maybe(j, "label_noise", d.label_noise);
  maybe(j, "n_train", d.n_train);
  maybe(j, "n_val", d.n_val);
  maybe(j, "n_test", d.n_test);
  maybe(j, "seed", d.seed);
}

void parse_scenario(const json& j, data::StreamScenario& s) {
  if (j.contains("kind")) s.kind = data::scenario_from_string(j.at("kind").get<std::string>());
  maybe(j, "batch_size", s.batch_size);
  if (j.contains("corruptions")) {
    s.corruptions.clear();
    for (const auto& c : j.at("corruptions")) {
      data::CorruptionSpec spec;
      spec.kind = data::corruption_from_string(c.at("kind").get<std::string>());
      maybe(c, "severity", spec.severity);
      s.corruptions.push_back(spec);
    }
  }
}

void parse_adapter(const json& j, tta::AdapterConfig& a) {
  if (j.contains("dual")) {
    const json& d = j.at("dual");
    maybe(d, "tau_sa", a.dual.tau_sa);
    maybe(d, "tau_sp", a.dual.tau_sp);
    maybe(d, "ent0", a.dual.ent0);
    maybe(d, "diff0", a.dual.diff0);
    maybe(d, "lambda", a.dual.lambda);
    maybe(d, "entropy_gate", a.dual.entropy_gate);
    maybe(d, "entropy_gate_threshold", a.dual.entropy_gate_threshold);
  }
  if (j.contains("baseline")) {
    const json& b = j.at("baseline");
    maybe(b, "tau_ent", a.baseline.tau_ent);
    maybe(b, "tau_plpd", a.baseline.tau_plpd);
    maybe(b, "eps_cos", a.baseline.eps_cos);
    maybe(b, "moving_avg_coeff", a.baseline.moving_avg_coeff);
    maybe(b, "ent0", a.baseline.ent0);
  }
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    maybe(o, "lr", a.optimizer.lr);
    maybe(o, "momentum", a.optimizer.momentum);
  }
  if (j.contains("param_policy")) {
    const std::string p = j.at("param_policy").get<std::string>();
    if (p == "norm_affine_only") {
      a.policy = model::ParamPolicy::norm_affine_only;
    } else if (p == "all_parameters") {
      a.policy = model::ParamPolicy::all_parameters;
    } else {
      throw ConfigError("unknown param_policy '" + p + "'");
    }
  }
  maybe(j, "patch_grid", a.patch_grid);
  maybe(j, "share_patch_permutation", a.share_patch_permutation);
}

json dataset_to_json(const data::SpuriousDatasetConfig& d) {
  return json{{"num_classes", d.num_classes}, {"channels", d.channels},
              {"height", d.height},           {"width", d.width},
              {"p_corr_train", d.p_corr_train}, {"p_corr_test", d.p_corr_test},
              {"label_noise", d.label_noise}, {"n_train", d.n_train},
              {"n_val", d.n_val},             {"n_test", d.n_test},
              {"seed", d.seed}};
}

json scenario_to_json(const data::StreamScenario& s) {
  json corr = json::array();
  for (const auto& c : s.corruptions) {
    corr.push_back({{"kind", data::corruption_name(c.kind)}, {"severity", c.severity}});
  }
  return json{{"kind", data::scenario_name(s.kind)},
              {"batch_size", s.batch_size},
              {"corruptions", corr}};
}

json adapter_to_json(const tta::AdapterConfig& a) {
  return json{
      {"dual",
       {{"tau_sa", a.dual.tau_sa},
        {"tau_sp", a.dual.tau_sp},
        {"ent0", a.dual.ent0},
        {"diff0", a.dual.diff0},
        {"lambda", a.dual.lambda},
        {"entropy_gate", a.dual.entropy_gate},
        {"entropy_gate_threshold", a.dual.entropy_gate_threshold}}},
      {"baseline",
       {{"tau_ent", a.baseline.tau_ent},
        {"tau_plpd", a.baseline.tau_plpd},
        {"eps_cos", a.baseline.eps_cos},
        {"moving_avg_coeff", a.baseline.moving_avg_coeff},
        {"ent0", a.baseline.ent0}}},
      {"optimizer", {{"lr", a.optimizer.lr}, {"momentum", a.optimizer.momentum}}},
      {"param_policy",
       a.policy == model::ParamPolicy::norm_affine_only ? "norm_affine_only" : "all_parameters"},
      {"patch_grid", a.patch_grid},
      {"share_patch_permutation", a.share_patch_permutation}};
}

}  // namespace

ExperimentConfig default_experiment_config() { return ExperimentConfig{}; }

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file: " + path.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed config file " + path.string() + ": " + e.what());
  }
  ExperimentConfig cfg;
  try {
    if (j.contains("dataset")) parse_dataset(j.at("dataset"), cfg.dataset);
    if (j.contains("scenario")) parse_scenario(j.at("scenario"), cfg.scenario);
    if (j.contains("methods")) {
      cfg.methods = j.at("methods").get<std::vector<std::string>>();
      for (const auto& m : cfg.methods) tta::method_from_string(m);  // validate early
    }
    if (j.contains("adapter")) parse_adapter(j.at("adapter"), cfg.adapter);
    if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    maybe(j, "checkpoint", cfg.checkpoint);
    if (j.contains("pretrain")) {
      const json& p = j.at("pretrain");
      maybe(p, "epochs", cfg.pretrain.epochs);
      maybe(p, "lr", cfg.pretrain.lr);
      maybe(p, "momentum", cfg.pretrain.momentum);
      maybe(p, "batch_size", cfg.pretrain.batch_size);
    }
    if (j.contains("output")) {
      maybe(j.at("output"), "deterministic_csv", cfg.output.deterministic_csv);
    }
  } catch (const json::exception& e) {
    throw ConfigError("invalid config " + path.string() + ": " + e.what());
  }
  if (cfg.methods.empty()) throw ConfigError("config: methods list must not be empty");
  if (cfg.seeds.empty()) throw ConfigError("config: seeds list must not be empty");
  return cfg;
}

std::string experiment_config_to_json(const ExperimentConfig& cfg) {
  json j{{"dataset", dataset_to_json(cfg.dataset)},
         {"scenario", scenario_to_json(cfg.scenario)},
         {"methods", cfg.methods},
         {"adapter", adapter_to_json(cfg.adapter)},
         {"seeds", cfg.seeds},
         {"checkpoint", cfg.checkpoint},
         {"pretrain",
          {{"epochs", cfg.pretrain.epochs},
           {"lr", cfg.pretrain.lr},
           {"momentum", cfg.pretrain.momentum},
           {"batch_size", cfg.pretrain.batch_size}}},
         {"output", {{"deterministic_csv", cfg.output.deterministic_csv}}}};
  return j.dump(2);
}

namespace {

bool is_dual_set_method(tta::Method m) {
  return m == tta::Method::dualtta || m == tta::Method::deyo_dual || m == tta::Method::eata_dual;
}

// One source model per experiment: inline pretraining is seeded from the
// dataset seed, so experiment seeds vary the streams and transform noise of
// the adaptation runs against a fixed pretrained reference, matching the
// fixed-backbone evaluation protocol.
model::ModelState prepare_model(const ExperimentConfig& cfg, const data::SpuriousDataset& ds) {
  if (!cfg.checkpoint.empty()) {
    return model::load_checkpoint(cfg.checkpoint);
  }
  ndgrad::RngStream root(cfg.dataset.seed);
  model::ModelState m = model::build_reference_net(
      cfg.dataset.num_classes, cfg.dataset.channels, root.split("init").next_u64());
  model::PretrainConfig pc;
  pc.epochs = cfg.pretrain.epochs;
  pc.lr = cfg.pretrain.lr;
  pc.momentum = cfg.pretrain.momentum;
  pc.batch_size = cfg.pretrain.batch_size;
  pc.seed = root.split("pretrain").next_u64();
  model::pretrain(m, ds.source_train.images, ds.source_train.labels, ds.source_val.images,
                  ds.source_val.labels, pc);
  return m;
}

}  // namespace

CellResult run_cell(const ExperimentConfig& cfg, const std::string& method, std::uint64_t seed,
                    const model::ModelState& pretrained,
                    const std::vector<data::StreamBatch>& stream) {
  const tta::Method m = tta::method_from_string(method);
  CellResult cell;
  cell.method = method;
  cell.seed = seed;
  cell.scenario = data::scenario_name(cfg.scenario.kind);

  tta::AdapterConfig acfg = cfg.adapter;
  acfg.method = m;
  ndgrad::RngStream adapter_rng = ndgrad::RngStream(seed).split("adapt").split(method);
  auto adapter = tta::make_adapter(acfg, adapter_rng);

  model::ModelState state = pretrained;
  state.norm_mode = adapter->preferred_norm_mode();

  const auto t0 = std::chrono::steady_clock::now();
  std::size_t batch_index = 0;
  for (const data::StreamBatch& batch : stream) {
    tta::AdaptOutcome out = adapter->adapt_step(state, batch.images);
    if (!out.eval_probs.all_finite()) {
      throw NumericError("run_cell: non-finite metric at batch " + std::to_string(batch_index));
    }
    cell.predicted.insert(cell.predicted.end(), out.predicted.begin(), out.predicted.end());
    cell.labels.insert(cell.labels.end(), batch.labels.begin(), batch.labels.end());
    cell.groups.insert(cell.groups.end(), batch.groups.begin(), batch.groups.end());
    cell.membership.insert(cell.membership.end(), out.membership.begin(), out.membership.end());
    BatchLogEntry log;
    log.batch_index = batch_index++;
    log.n_plus = out.n_plus;
    log.n_minus = out.n_minus;
    log.loss_plus = out.loss_plus;
    log.loss_minus = out.loss_minus;
    log.loss_dual = out.loss_dual;
    log.updated = out.updated;
    cell.batch_log.push_back(log);
  }
  cell.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  cell.metrics =
      compute_metrics(cell.predicted, cell.labels, cell.groups, cfg.dataset.num_classes);

  const std::size_t n = cell.predicted.size();
  std::size_t selected = 0, beneficial = 0;
  const bool dual_set = is_dual_set_method(m);
  for (std::size_t i = 0; i < n; ++i) {
    const bool correct = cell.predicted[i] == cell.labels[i];
    if (cell.membership[i] == tta::Membership::d_plus) {
      ++selected;
      if (correct) ++beneficial;
    } else if (cell.membership[i] == tta::Membership::d_minus) {
      ++selected;
      if (dual_set && !correct) ++beneficial;
    }
  }
  if (m == tta::Method::noadapt) {
    selected = 0;
    beneficial = 0;
  }
  cell.pct_adapt = 100.0 * static_cast<double>(selected) / static_cast<double>(n);
  cell.pct_corr_adapt = 100.0 * static_cast<double>(beneficial) / static_cast<double>(n);
  return cell;
}

ExperimentResults run_experiment(const ExperimentConfig& cfg) {
  ExperimentResults results;
  results.config = cfg;

  const data::SpuriousDataset ds = data::gen_spurious_dataset(cfg.dataset);

  std::vector<std::string> methods = cfg.methods;
  std::sort(methods.begin(), methods.end());
  std::vector<std::uint64_t> seeds = cfg.seeds;
  std::sort(seeds.begin(), seeds.end());

  // one pretrained model for the whole grid; one stream per seed, shared
  // across methods so selection rates are comparable on identical batches
  const model::ModelState pretrained = prepare_model(cfg, ds);
  for (std::uint64_t seed : seeds) {
    const auto stream = data::make_stream(ds.target_test, cfg.scenario,
                                          ndgrad::RngStream(seed).split("stream").next_u64());
    for (const std::string& method : methods) {
      results.cells.push_back(run_cell(cfg, method, seed, pretrained, stream));
    }
  }
  std::sort(results.cells.begin(), results.cells.end(), [](const CellResult& a,
                                                           const CellResult& b) {
    return a.method != b.method ? a.method < b.method : a.seed < b.seed;
  });

  // Wilcoxon of dualtta against every other method, paired per condition
  // (one scenario here, so conditions are seeds).
  const bool has_dualtta =
      std::find(methods.begin(), methods.end(), "dualtta") != methods.end();
  if (has_dualtta) {
    auto acc_series = [&](const std::string& method) {
      std::vector<double> accs;
      for (const CellResult& c : results.cells) {
        if (c.method == method) accs.push_back(c.metrics.accuracy);
      }
      return accs;
    };
    const std::vector<double> dual_acc = acc_series("dualtta");
    for (const std::string& method : methods) {
      if (method == "dualtta") continue;
      WilcoxonEntry entry;
      entry.baseline = method;
      try {
        entry.result = wilcoxon_signed_rank(dual_acc, acc_series(method));
        entry.ok = true;
      } catch (const Error& e) {
        entry.error = e.what();
      }
      results.wilcoxon.push_back(std::move(entry));
    }
  }
  return results;
}

GradCheckReport reference_gradcheck(std::uint64_t seed, double fd_step) {
  const auto t0 = std::chrono::steady_clock::now();

  data::SpuriousDatasetConfig dc;
  dc.n_train = 8;
  dc.n_val = 8;
  dc.n_test = 8;
  dc.seed = seed;
  const data::SpuriousDataset ds = data::gen_spurious_dataset(dc);
  const Tensor& batch = ds.target_test.images;  // (8,3,28,28)
  const std::size_t B = batch.dim(0);

  model::ModelState m =
      model::build_reference_net(dc.num_classes, dc.channels, ndgrad::RngStream(seed).next_u64());

  // transformed predictions, frozen for the whole check
  ndgrad::RngStream rng(seed);
  ndgrad::RngStream shuffle_rng = rng.split("shuffle");
  ndgrad::RngStream style_rng = rng.split("style");
  transforms::ShuffleSpec spec;
  Tensor probs_sa = model::forward(m, transforms::patch_shuffle(batch, spec, shuffle_rng)).probs;
  model::StyleInjection inj = transforms::make_style_injection(style_rng);
  model::ForwardOptions so;
  so.style_injection = &inj;
  Tensor probs_sp = model::forward(m, batch, so).probs;
  Tensor probs0 = model::forward(m, batch).probs;

  // Partition with both sets populated: rank by diff_sa - diff_sp, top half
  // D+, bottom half D-; weights from the standard formulas.
  auto triples = tta::make_triples(probs0, probs_sa, probs_sp);
  std::vector<std::size_t> order(B);
  for (std::size_t i = 0; i < B; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return triples[a].diff_sa - triples[a].diff_sp > triples[b].diff_sa - triples[b].diff_sp;
  });
  tta::PartitionRecord part;
  part.membership.assign(B, tta::Membership::neither);
  for (std::size_t i = 0; i < B; ++i) {
    part.membership[order[i]] = i < B / 2 ? tta::Membership::d_plus : tta::Membership::d_minus;
  }
  tta::DualTtaConfig dual_cfg;
  tta::assign_weights(triples, part, dual_cfg);
  const double lambda = dual_cfg.lambda;

  const std::vector<std::string> names = model::resolve_trainables(
      m, model::ParamPolicy::norm_affine_only);

  // analytic gradients from the tape
  model::ForwardOptions fo;
  fo.record_tape = true;
  model::ForwardResult fr = model::forward(m, batch, fo);
  ndgrad::NodeId loss =
      tta::dual_loss(*fr.tape, fr.probs_node, fr.log_probs_node, part, lambda);
  std::vector<ndgrad::NodeId> nodes;
  for (const auto& nm : names) nodes.push_back(fr.param_nodes.at(nm));
  ndgrad::Gradients grads = fr.tape->backward(loss, nodes);

  // eager loss evaluation with the frozen partition and weights
  auto eval_loss = [&](const model::ModelState& state) {
    Tensor probs = model::forward(state, batch).probs;
    const std::size_t C = probs.dim(1);
    double lp = 0.0, lm = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const double ent = tta::entropy(std::span<const double>(probs.data() + b * C, C));
      if (part.membership[b] == tta::Membership::d_plus) {
        lp += part.weight[b] * ent;
      } else if (part.membership[b] == tta::Membership::d_minus) {
        lm += part.weight[b] * ent;
      }
    }
    return lp - lambda * lm;
  };

  GradCheckReport rep;
  rep.fd_step = fd_step;
  model::ModelState work = m;
  for (std::size_t ni = 0; ni < names.size(); ++ni) {
    Tensor& p = work.params.at(names[ni]);
    const Tensor& g = grads.at(nodes[ni]);
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const double orig = p[j];
      p[j] = orig + fd_step;
      const double fp = eval_loss(work);
      p[j] = orig - fd_step;
      const double fm = eval_loss(work);
      p[j] = orig;
      const double fd = (fp - fm) / (2.0 * fd_step);
      const double rel = std::abs(g[j] - fd) / std::max({std::abs(g[j]), std::abs(fd), 1e-8});
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      ++rep.n_coords;
    }
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace dualtta::bench
