#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <unordered_map>
#include <vector>

#include "sif/matrix.hpp"
#include "sif/schema.hpp"

namespace sif {

// Value of one field: `category` for categorical fields, `numeric` otherwise.
struct FieldValue {
  std::uint32_t category = 0;
  float numeric = 0.0f;
  bool operator==(const FieldValue&) const = default;
};

struct RawSample {
  std::uint64_t sample_id = 0;
  std::uint64_t user_id = 0;
  std::uint64_t item_id = 0;
  std::uint64_t timestamp = 0;
  std::vector<FieldValue> values;  // one per schema field, in schema order
  std::uint8_t label = 0;
  bool operator==(const RawSample&) const = default;
};

// Throws DataError when `s` does not conform to `schema`.
void check_sample(const FeatureSchema& schema, const RawSample& s);

struct GeneratorConfig {
  std::uint64_t n_users = 1000;
  std::uint64_t n_items = 500;
  std::uint64_t n_impressions = 100000;
  std::uint64_t seed = 7;
  double signal_strength = 1.0;
};

// Hidden generative coefficients. Everything here is a pure function of
// (schema, n_items, seed).
struct PlantedParams {
  double bias = 0.0;
  double noise_sd = 0.0;
  double history_weight = 0.0;
  int signal_window = 0;  // number of most recent positives aggregated by the history term
  // Roles resolved from the schema; -1 when absent.
  int item_id_field = -1;
  int category_field = -1;
  std::vector<int> signal_ctx_fields;
  std::vector<int> signal_ctx_cardinality;
  int ctx_states = 1;
  std::vector<std::vector<double>> categorical_coef;  // [field][value]
  std::vector<double> numeric_coef;                   // [field]
  std::vector<std::vector<FieldValue>> item_values;   // [item][field], item-group fields only
  std::vector<std::vector<double>> item_latent;       // [item][cross field]
  Matrix interaction;                                 // [category x ctx state], zero-mean rows
};

struct TemporalSplit {
  std::uint64_t val_begin = 0;   // first validation timestamp
  std::uint64_t test_begin = 0;  // first test timestamp
};

enum class SplitPart { train, val, test };

struct BehaviorSequence {
  std::vector<const RawSample*> samples;  // oldest first
  int valid_len = 0;                      // true length l <= L
  int max_len = 0;                        // L
};

class ImpressionLog {
 public:
  ImpressionLog() = default;
  ImpressionLog(FeatureSchema schema, GeneratorConfig config, std::vector<RawSample> samples);

  const FeatureSchema& schema() const { return schema_; }
  const GeneratorConfig& config() const { return config_; }
  std::uint64_t generator_seed() const { return config_.seed; }
  const PlantedParams& planted() const { return planted_; }
  const std::vector<RawSample>& samples() const { return samples_; }
  const TemporalSplit& split() const { return split_; }

  SplitPart part_of(const RawSample& s) const;
  std::vector<std::size_t> indices_of(SplitPart part) const;
  std::size_t index_of(std::uint64_t sample_id) const;  // throws DataError when unknown
  const RawSample& by_id(std::uint64_t sample_id) const { return samples_[index_of(sample_id)]; }

  // The user's most recent positive samples strictly before the query
  // sample's timestamp, oldest first, at most `L` of them.
  BehaviorSequence behavior_sequence(std::uint64_t sample_id, int L) const;

  // Every positive sample, in log order.
  std::vector<const RawSample*> positives() const;

 private:
  FeatureSchema schema_;
  GeneratorConfig config_;
  PlantedParams planted_;
  TemporalSplit split_;
  std::vector<RawSample> samples_;
  std::unordered_map<std::uint64_t, std::size_t> by_id_;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> user_positives_;
};

PlantedParams make_planted_params(const FeatureSchema& schema, std::uint64_t n_items, std::uint64_t seed);

ImpressionLog generate_log(const FeatureSchema& schema, const GeneratorConfig& config);

// Regenerates one user's sub-log in isolation.
std::vector<RawSample> generate_user_log(const FeatureSchema& schema, const GeneratorConfig& config,
                                         const PlantedParams& planted, std::uint64_t user_id);

// Noise-free parts of the planted logit.
double current_logit(const PlantedParams& planted, const FeatureSchema& schema, const RawSample& s);
double history_signal(const PlantedParams& planted, const RawSample& target,
                      std::span<const RawSample* const> positives_oldest_first);

// Bayes-optimal scores for the given samples. `item_only_history` replaces
// the history term by its mean conditional on the target category, i.e. the
// best that can be done when the history exposes only item identities.
std::vector<double> bayes_scores(const ImpressionLog& log, std::span<const std::size_t> indices,
                                 bool item_only_history);

// Binary log file ("SIFL").
void write_log(const ImpressionLog& log, const std::filesystem::path& path);
ImpressionLog read_log(const std::filesystem::path& path, const FeatureSchema& schema);

}  // namespace sif
