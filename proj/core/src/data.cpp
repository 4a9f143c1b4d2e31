#include "dualtta/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "dualtta/errors.hpp"

namespace dualtta::data {

namespace {

// Bar pattern constants. The band period spans half the image so the bars are
// wide and soft: destroying their arrangement (patch shuffle) removes most of
// the class evidence, while the per-channel tint survives it.
constexpr double kBase = 0.10;
constexpr double kBandAmplitude = 0.30;
constexpr double kBandPeriod = 28.0;
constexpr double kPixelNoiseStd = 0.1;
// Single-channel tint: attribute 0 brightens channel 0, attribute 1 darkens
// it. One evidence channel keeps the spurious cue aligned with the batch
// sigma direction the style perturbation moves along.
constexpr double kTintHigh = 0.55;
constexpr double kTintLow = -0.25;

double band_profile(double t) {
  const double c = std::cos(2.0 * std::numbers::pi * t / kBandPeriod);
  return c > 0.0 ? c * c : 0.0;
}

Split gen_split(const SpuriousDatasetConfig& cfg, std::size_t n, double p_corr,
                ndgrad::RngStream rng) {
  const std::size_t C = cfg.channels, H = cfg.height, W = cfg.width;
  Split split;
  split.images = Tensor(Shape{n, C, H, W});
  split.labels.resize(n);
  split.attributes.resize(n);
  split.groups.resize(n);

  for (std::size_t i = 0; i < n; ++i) {
    ndgrad::RngStream ex = rng.split(static_cast<std::uint64_t>(i));
    const std::size_t shape_class = ex.uniform() < 0.5 ? 1 : 0;
    std::size_t y = shape_class;
    if (ex.uniform() < cfg.label_noise) y = 1 - y;  // label flip before tinting
    const std::size_t a = ex.uniform() < p_corr ? y : 1 - y;
    const double jitter = static_cast<double>(ex.bounded(static_cast<std::uint64_t>(kBandPeriod)));

    split.labels[i] = y;
    split.attributes[i] = a;
    split.groups[i] = y * 2 + a;

    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t w = 0; w < W; ++w) {
        const double t = shape_class == 0 ? static_cast<double>(h) : static_cast<double>(w);
        const double lum = kBase + kBandAmplitude * band_profile(t - jitter);
        for (std::size_t c = 0; c < C; ++c) {
          double v = lum + kPixelNoiseStd * ex.gaussian();
          if (c == 0) v += a == 0 ? kTintHigh : kTintLow;
          split.images.at4(i, c, h, w) = std::clamp(v, 0.0, 1.0);
        }
      }
    }
  }
  return split;
}

}  // namespace

SpuriousDataset gen_spurious_dataset(const SpuriousDatasetConfig& cfg) {
  if (cfg.num_classes != 2) {
    throw ConfigError("gen_spurious_dataset: the bar-pattern generator is binary (num_classes 2)");
  }
  if (cfg.channels < 2) throw ConfigError("gen_spurious_dataset: need >= 2 channels for the tint");
  if (cfg.p_corr_train < 0 || cfg.p_corr_train > 1 || cfg.p_corr_test < 0 || cfg.p_corr_test > 1) {
    throw ConfigError("gen_spurious_dataset: p_corr must be in [0,1]");
  }
  if (cfg.n_train == 0 || cfg.n_val == 0 || cfg.n_test == 0) {
    throw ConfigError("gen_spurious_dataset: split sizes must be positive");
  }
  ndgrad::RngStream root(cfg.seed);
  SpuriousDataset ds;
  ds.config = cfg;
  ds.source_train = gen_split(cfg, cfg.n_train, cfg.p_corr_train, root.split("train"));
  ds.source_val = gen_split(cfg, cfg.n_val, cfg.p_corr_train, root.split("val"));
  ds.target_test = gen_split(cfg, cfg.n_test, cfg.p_corr_test, root.split("test"));
  return ds;
}

const char* corruption_name(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::gaussian_noise: return "gaussian_noise";
    case CorruptionKind::impulse_noise: return "impulse_noise";
    case CorruptionKind::contrast: return "contrast";
    case CorruptionKind::box_blur: return "box_blur";
  }
  return "?";
}

CorruptionKind corruption_from_string(std::string_view s) {
  if (s == "gaussian_noise") return CorruptionKind::gaussian_noise;
  if (s == "impulse_noise") return CorruptionKind::impulse_noise;
  if (s == "contrast") return CorruptionKind::contrast;
  if (s == "box_blur") return CorruptionKind::box_blur;
  throw ConfigError("unknown corruption kind '" + std::string(s) + "'");
}

Tensor corrupt(const Tensor& batch, CorruptionKind kind, int severity, ndgrad::RngStream& rng) {
  if (batch.rank() != 4) throw ShapeError("corrupt: batch must be (B,C,H,W)");
  if (severity < 1 || severity > 5) {
    throw ConfigError("corrupt: severity must be in 1..5, got " + std::to_string(severity));
  }
  static constexpr double kGaussSigma[5] = {0.04, 0.08, 0.12, 0.18, 0.26};
  static constexpr double kImpulseFrac[5] = {0.01, 0.03, 0.06, 0.10, 0.17};
  static constexpr double kContrastFactor[5] = {0.75, 0.6, 0.45, 0.3, 0.2};
  static constexpr std::size_t kBlurKernel[5] = {3, 3, 5, 5, 7};
  const int s = severity - 1;

  Tensor out(batch.shape());
  switch (kind) {
    case CorruptionKind::gaussian_noise: {
      const double sigma = kGaussSigma[s];
      for (std::size_t i = 0; i < batch.numel(); ++i) {
        out[i] = std::clamp(batch[i] + sigma * rng.gaussian(), 0.0, 1.0);
      }
      break;
    }
    case CorruptionKind::impulse_noise: {
      const double frac = kImpulseFrac[s];
      for (std::size_t i = 0; i < batch.numel(); ++i) {
        if (rng.uniform() < frac) {
          out[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
        } else {
          out[i] = batch[i];
        }
      }
      break;
    }
    case CorruptionKind::contrast: {
      const double f = kContrastFactor[s];
      for (std::size_t i = 0; i < batch.numel(); ++i) {
        out[i] = std::clamp(0.5 + f * (batch[i] - 0.5), 0.0, 1.0);
      }
      break;
    }
    case CorruptionKind::box_blur: {
      // Averages over the in-bounds window so constant images stay constant.
      const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(kBlurKernel[s] / 2);
      const std::size_t B = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w) {
              double acc = 0.0;
              int cnt = 0;
              for (std::ptrdiff_t dh = -r; dh <= r; ++dh) {
                const std::ptrdiff_t hh = static_cast<std::ptrdiff_t>(h) + dh;
                if (hh < 0 || hh >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::ptrdiff_t dw = -r; dw <= r; ++dw) {
                  const std::ptrdiff_t ww = static_cast<std::ptrdiff_t>(w) + dw;
                  if (ww < 0 || ww >= static_cast<std::ptrdiff_t>(W)) continue;
                  acc += batch.at4(b, c, static_cast<std::size_t>(hh), static_cast<std::size_t>(ww));
                  ++cnt;
                }
              }
              out.at4(b, c, h, w) = std::clamp(acc / cnt, 0.0, 1.0);
            }
      break;
    }
  }
  return out;
}

const char* scenario_name(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::mild: return "mild";
    case ScenarioKind::imbalanced_label: return "imbalanced_label";
    case ScenarioKind::mixed_shift: return "mixed_shift";
  }
  return "?";
}

ScenarioKind scenario_from_string(std::string_view s) {
  if (s == "mild") return ScenarioKind::mild;
  if (s == "imbalanced_label") return ScenarioKind::imbalanced_label;
  if (s == "mixed_shift") return ScenarioKind::mixed_shift;
  throw ConfigError("unknown scenario '" + std::string(s) + "'");
}

std::vector<StreamBatch> make_stream(const Split& split, const StreamScenario& scenario,
                                     std::uint64_t seed) {
  if (scenario.batch_size < 2) {
    throw ConfigError("make_stream: batch size must be >= 2 (cross-batch std undefined)");
  }
  const std::size_t n = split.size();
  ndgrad::RngStream root = ndgrad::RngStream(seed).split("stream");

  std::vector<std::size_t> order;
  if (scenario.kind == ScenarioKind::imbalanced_label) {
    std::size_t num_labels = 0;
    for (std::size_t y : split.labels) num_labels = std::max(num_labels, y + 1);
    std::vector<std::vector<std::size_t>> blocks(num_labels);
    for (std::size_t i = 0; i < n; ++i) blocks[split.labels[i]].push_back(i);
    ndgrad::RngStream brng = root.split("blocks");
    for (auto& blk : blocks) {
      auto perm = brng.permutation(blk.size());
      std::vector<std::size_t> shuffled(blk.size());
      for (std::size_t i = 0; i < blk.size(); ++i) shuffled[i] = blk[perm[i]];
      blk = std::move(shuffled);
    }
    for (std::size_t bi : brng.permutation(num_labels)) {
      order.insert(order.end(), blocks[bi].begin(), blocks[bi].end());
    }
  } else {
    auto perm = root.split("order").permutation(n);
    order.assign(perm.begin(), perm.end());
  }

  std::vector<CorruptionSpec> pool = scenario.corruptions;
  if (pool.empty()) {
    pool = {{CorruptionKind::gaussian_noise, 3},
            {CorruptionKind::impulse_noise, 3},
            {CorruptionKind::contrast, 3},
            {CorruptionKind::box_blur, 3}};
  }

  const std::size_t C = split.images.dim(1), H = split.images.dim(2), W = split.images.dim(3);
  const std::size_t px = C * H * W;
  std::vector<StreamBatch> out;
  ndgrad::RngStream pick = root.split("corruption-pick");
  std::size_t batch_index = 0;
  for (std::size_t start = 0; start < n; start += scenario.batch_size, ++batch_index) {
    const std::size_t bs = std::min(scenario.batch_size, n - start);
    StreamBatch sb;
    sb.images = Tensor(Shape{bs, C, H, W});
    sb.labels.resize(bs);
    sb.attributes.resize(bs);
    sb.groups.resize(bs);
    for (std::size_t b = 0; b < bs; ++b) {
      const std::size_t src = order[start + b];
      std::copy(split.images.data() + src * px, split.images.data() + (src + 1) * px,
                sb.images.data() + b * px);
      sb.labels[b] = split.labels[src];
      sb.attributes[b] = split.attributes[src];
      sb.groups[b] = split.groups[src];
    }
    if (scenario.kind == ScenarioKind::mixed_shift) {
      const CorruptionSpec& cs = pool[pick.bounded(pool.size())];
      ndgrad::RngStream crng = root.split("corrupt").split(static_cast<std::uint64_t>(batch_index));
      sb.images = corrupt(sb.images, cs.kind, cs.severity, crng);
    }
    out.push_back(std::move(sb));
  }
  return out;
}

void dump_split(const SpuriousDatasetConfig& cfg, const Split& split, const std::string& name,
                const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open dataset dump for writing: " + path.string());
  char buf[40];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  f << "{\"config_echo\":{"
    << "\"num_classes\":" << cfg.num_classes << ",\"channels\":" << cfg.channels
    << ",\"height\":" << cfg.height << ",\"width\":" << cfg.width << ",\"p_corr_train\":"
    << num(cfg.p_corr_train) << ",\"p_corr_test\":" << num(cfg.p_corr_test)
    << ",\"label_noise\":" << num(cfg.label_noise) << ",\"n_train\":" << cfg.n_train
    << ",\"n_val\":" << cfg.n_val << ",\"n_test\":" << cfg.n_test << ",\"seed\":" << cfg.seed
    << ",\"split\":\"" << name << "\"},\n\"examples\":[\n";
  const std::size_t px = split.images.dim(1) * split.images.dim(2) * split.images.dim(3);
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (i) f << ",\n";
    f << "{\"image\":{\"shape\":[" << split.images.dim(1) << ',' << split.images.dim(2) << ','
      << split.images.dim(3) << "],\"values\":[";
    for (std::size_t j = 0; j < px; ++j) {
      if (j) f << ',';
      f << num(split.images[i * px + j]);
    }
    f << "]},\"y\":" << split.labels[i] << ",\"a\":" << split.attributes[i]
      << ",\"g\":" << split.groups[i] << '}';
  }
  f << "\n]}\n";
  if (!f) throw IoError("failed writing dataset dump: " + path.string());
}

}  // namespace dualtta::data
