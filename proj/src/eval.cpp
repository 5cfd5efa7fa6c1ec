#include "sif/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "sif/error.hpp"

namespace sif {

double auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw MetricError("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of (mid-)ranks of the positives.
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] != 0) {
        rank_sum += mid;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw MetricError("auc is undefined without both classes");
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1) / 2) / (p * static_cast<double>(neg));
}

GaucResult gauc(std::span<const double> scores, std::span<const std::uint8_t> labels,
                std::span<const std::uint64_t> groups) {
  if (scores.size() != labels.size() || scores.size() != groups.size())
    throw MetricError("gauc: inputs differ in length");
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> members;
  std::vector<std::uint64_t> order;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    auto [it, inserted] = members.try_emplace(groups[i]);
    if (inserted) order.push_back(groups[i]);
    it->second.push_back(i);
  }
  GaucResult r;
  double weighted = 0.0, weight = 0.0;
  std::vector<double> s;
  std::vector<std::uint8_t> y;
  for (auto gid : order) {
    const auto& idx = members[gid];
    s.clear();
    y.clear();
    std::size_t pos = 0;
    for (auto i : idx) {
      s.push_back(scores[i]);
      y.push_back(labels[i]);
      pos += labels[i] != 0;
    }
    if (pos == 0 || pos == idx.size()) {
      ++r.groups_skipped;
      continue;
    }
    weighted += static_cast<double>(idx.size()) * auc(s, y);
    weight += static_cast<double>(idx.size());
    ++r.groups_used;
  }
  if (r.groups_used == 0) throw MetricError("gauc: no group holds both classes");
  r.value = weighted / weight;
  return r;
}

double log_loss(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double p = std::clamp(scores[i], 1e-15, 1.0 - 1e-15);
    s -= labels[i] ? std::log(p) : std::log1p(-p);
  }
  return s / static_cast<double>(scores.size());
}

MetricReport metric_report(std::span<const double> scores, std::span<const std::uint8_t> labels,
                           std::span<const std::uint64_t> groups) {
  MetricReport m;
  m.auc = auc(scores, labels);
  const auto g = gauc(scores, labels, groups);
  m.gauc = g.value;
  m.n_groups_used = g.groups_used;
  m.n_groups_skipped = g.groups_skipped;
  m.logloss = log_loss(scores, labels);
  m.n_scored = scores.size();
  return m;
}

FlopsBreakdown flops_breakdown(std::uint64_t L, std::uint64_t T, std::uint64_t d0, std::uint64_t N, Variant variant) {
  const std::uint64_t R = L + 1;
  FlopsBreakdown b;
  switch (variant) {
    case Variant::flat_attn:
      b.projection_macs = 4 * R * T * d0 * d0;
      b.attention_macs = 2 * (R * T) * (R * T) * d0;
      b.ffn_macs = 8 * R * T * d0 * d0;
      break;
    case Variant::pooled:
      b.projection_macs = 4 * R * d0 * d0;
      b.attention_macs = 2 * R * R * d0;
      b.ffn_macs = 8 * R * d0 * d0;
      break;
    case Variant::item_id_only:
      b.projection_macs = 4 * R * T * d0 * d0;
      b.attention_macs = 2 * T * R * R * d0;
      b.ffn_macs = 8 * R * T * d0 * d0;
      break;
    default:
      b.projection_macs = 8 * R * T * d0 * d0;
      b.attention_macs = 2 * R * T * T * d0 + 2 * T * R * R * d0;
      b.ffn_macs = 8 * R * T * d0 * d0;
      break;
  }
  b.projection_macs *= N;
  b.attention_macs *= N;
  b.ffn_macs *= N;
  return b;
}

std::uint64_t flops_estimate(std::uint64_t L, std::uint64_t T, std::uint64_t d0, std::uint64_t N, std::uint64_t,
                             Variant variant) {
  return flops_breakdown(L, T, d0, N, variant).flops();
}

double flat_to_factored_ratio(std::uint64_t L, std::uint64_t T) {
  const double R = static_cast<double>(L + 1);
  const double t = static_cast<double>(T);
  return (R * t) * (R * t) / (R * R * t + R * t * t);
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  auto line = [&out](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
}

}  // namespace sif
