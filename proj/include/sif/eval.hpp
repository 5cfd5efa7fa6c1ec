#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sif/mixer.hpp"

namespace sif {

// Rank-statistic AUC, ties count one half. Throws MetricError unless both
// classes are present.
double auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct GaucResult {
  double value = 0.0;
  std::size_t groups_used = 0;
  std::size_t groups_skipped = 0;  // groups with a single class
};

// Impression-weighted mean of per-group AUC over groups holding both classes.
GaucResult gauc(std::span<const double> scores, std::span<const std::uint8_t> labels,
                std::span<const std::uint64_t> groups);

double log_loss(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct MetricReport {
  double auc = 0.0;
  double gauc = 0.0;
  double logloss = 0.0;
  std::size_t n_scored = 0;
  std::size_t n_groups_used = 0;
  std::size_t n_groups_skipped = 0;
  std::uint64_t flops_per_example = 0;
};

MetricReport metric_report(std::span<const double> scores, std::span<const std::uint8_t> labels,
                           std::span<const std::uint64_t> groups);

// Multiply-accumulate counts of one forward pass through N blocks.
// Dense terms are the Q/K/V/O projections and the FFN; attention terms are
// scores plus weighted values. Embedding, LayerNorm, softmax and head costs
// are not modeled.
struct FlopsBreakdown {
  std::uint64_t projection_macs = 0;
  std::uint64_t attention_macs = 0;
  std::uint64_t ffn_macs = 0;
  std::uint64_t macs() const { return projection_macs + attention_macs + ffn_macs; }
  std::uint64_t flops() const { return 2 * macs(); }
};

FlopsBreakdown flops_breakdown(std::uint64_t L, std::uint64_t T, std::uint64_t d0, std::uint64_t N, Variant variant);
// FLOPs (2 per multiply-accumulate). `heads` does not change the count.
std::uint64_t flops_estimate(std::uint64_t L, std::uint64_t T, std::uint64_t d0, std::uint64_t N, std::uint64_t heads,
                             Variant variant);

// ((L+1)T)^2 / ((L+1)^2 T + (L+1) T^2): flat over factored attention cost.
double flat_to_factored_ratio(std::uint64_t L, std::uint64_t T);

// CSV table helper: header row then one line per row.
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

}  // namespace sif
