#include "dualtta/metrics.hpp"

#include <algorithm>
#include <string>

#include "dualtta/errors.hpp"

namespace dualtta::bench {

Metrics compute_metrics(std::span<const std::size_t> predicted,
                        std::span<const std::size_t> labels,
                        std::span<const std::size_t> groups, std::size_t num_classes) {
  const std::size_t n = predicted.size();
  if (labels.size() != n || groups.size() != n) {
    throw ContractError("compute_metrics: input length mismatch");
  }
  if (n == 0) throw ContractError("compute_metrics: empty inputs");
  const std::size_t num_groups = 2 * num_classes;

  Metrics m;
  std::vector<std::size_t> group_total(num_groups, 0), group_correct(num_groups, 0);
  std::vector<std::size_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= num_classes) throw ContractError("compute_metrics: label out of range");
    if (groups[i] >= num_groups) throw ContractError("compute_metrics: group id out of range");
    ++group_total[groups[i]];
    if (predicted[i] == labels[i]) {
      ++correct;
      ++group_correct[groups[i]];
      ++tp[labels[i]];
    } else {
      ++fn[labels[i]];
      if (predicted[i] < num_classes) ++fp[predicted[i]];
    }
  }
  for (std::size_t g = 0; g < num_groups; ++g) {
    if (group_total[g] == 0) {
      throw ConfigError("compute_metrics: group " + std::to_string(g) +
                        " is empty (all 2C groups must be non-empty)");
    }
  }

  m.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  m.per_group.resize(num_groups);
  m.worst_group = 1.0;
  for (std::size_t g = 0; g < num_groups; ++g) {
    m.per_group[g] = static_cast<double>(group_correct[g]) / static_cast<double>(group_total[g]);
    m.worst_group = std::min(m.worst_group, m.per_group[g]);
  }

  double f1_sum = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double prec_den = static_cast<double>(tp[c] + fp[c]);
    const double rec_den = static_cast<double>(tp[c] + fn[c]);
    const double prec = prec_den > 0 ? tp[c] / prec_den : 0.0;
    const double rec = rec_den > 0 ? tp[c] / rec_den : 0.0;
    f1_sum += (prec + rec) > 0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
  }
  m.macro_f1 = f1_sum / static_cast<double>(num_classes);
  return m;
}

}  // namespace dualtta::bench
