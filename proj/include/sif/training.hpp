#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "sif/datagen.hpp"
#include "sif/eval.hpp"
#include "sif/mixer.hpp"
#include "sif/tokenizer.hpp"

namespace sif {

struct LossBreakdown {
  double bce = 0.0;
  double vq = 0.0;
  double align = 0.0;
  double token = 0.0;
  double beta = 1.0;
  double gamma = 0.25;
  double token_weight = 1.0;
  double total() const { return bce + beta * vq + gamma * align + token_weight * token; }
};

struct TrainConfig {
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-5;
  double beta = 1.0;          // L_VQ weight
  double gamma = 0.25;        // L_align weight
  double token_weight = 1.0;  // L_token weight
  int batch_size = 256;
  int max_epochs = 20;
  int patience = 3;
  int threads = 1;
  std::uint64_t seed = 1;
  // Codebook gradient routes.
  bool codebook_vq_route = true;
  bool codebook_aux_route = true;
  bool codebook_lookup_route = true;
  bool reseed_dead_codes = true;
  bool pin_zero_row = true;        // keep codebook row 0 at zero throughout
  bool train_tokenizer = true;     // false freezes every tokenizer tensor
  std::size_t max_train_examples = 0;  // 0 = whole split
  std::size_t max_eval_examples = 0;
  MixerConfig mixer;
};

// One training or scoring request: the target, its history (most recent
// first, at most L rows) and the label.
struct Example {
  const RawSample* target = nullptr;
  std::vector<const RawSample*> history;
  std::uint8_t label = 0;
};

std::vector<Example> make_examples(const ImpressionLog& log, std::span<const std::size_t> indices, int L);

class Adam {
 public:
  explicit Adam(const TrainConfig& c)
      : lr_(c.lr), b1_(c.adam_beta1), b2_(c.adam_beta2), eps_(c.adam_eps), wd_(c.weight_decay) {}
  // One update over `params` with gradients scaled by `grad_scale`.
  void step(const std::vector<ad::Param*>& params, const ad::GradStore& grads, double grad_scale = 1.0);
  std::uint64_t steps() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  double lr_, b1_, b2_, eps_, wd_;
  std::uint64_t t_ = 0;
  std::unordered_map<const ad::Param*, Moments> moments_;
};

// Graph for one example. Loss Vars are invalid (id < 0) when the term does not
// apply to the variant or `with_losses` is false.
struct ExampleGraph {
  ad::Var logit;
  ad::Var bce, vq, align, token;
  build::Rvq target_rvq;  // empty unless the target was quantized
};

// One target-side code selection, used for dead-code bookkeeping.
struct CodeUse {
  int slot = 0;
  int level = 0;
  int index = 0;
  std::vector<double> residual;
};

struct GraphOptions {
  bool with_losses = true;
  bool codebook_vq_route = true;
  bool codebook_aux_route = true;
  bool codebook_lookup_route = true;
};

ExampleGraph build_example(ad::Graph& g, const TokenizerState& tok, const MixerState& m, const Example& ex,
                           const GraphOptions& opt = {});

// sum over slots of ||W_res f_tau - sg(e)||^2 for one target sample.
double alignment_loss(const TokenizerState& tok, const MixerState& m, const RawSample& target);

double score(const TokenizerState& tok, const MixerState& m, const Example& ex);

struct EpochSummary {
  int epoch = 0;
  LossBreakdown mean_loss;
  MetricReport val;
  std::size_t dead_codes_reseeded = 0;
  double align_distance = 0.0;  // mean ||row0 slot - reconstruction|| on validation targets
};

struct TrainResult {
  std::vector<EpochSummary> epochs;
  int best_epoch = -1;
  MetricReport best_val;
  MetricReport test;
};

class Trainer {
 public:
  Trainer(const ImpressionLog& log, TrainConfig config);

  const TrainConfig& config() const { return config_; }
  TokenizerState& tokenizer() { return tok_; }
  MixerState& mixer() { return mixer_; }
  const TokenizerState& tokenizer() const { return tok_; }
  const MixerState& mixer() const { return mixer_; }
  const std::vector<Example>& train_examples() const { return train_; }
  const std::vector<Example>& val_examples() const { return val_; }
  const std::vector<Example>& test_examples() const { return test_; }

  // Gradients of the batch-mean loss into `grads` (not cleared first).
  LossBreakdown accumulate(std::span<const Example> batch, ad::GradStore& grads,
                           std::vector<CodeUse>* uses = nullptr) const;
  // Pre-step losses of one Adam step on `batch`.
  LossBreakdown train_step(std::span<const Example> batch);
  EpochSummary run_epoch();
  MetricReport evaluate(std::span<const Example> examples) const;
  double align_distance(std::span<const Example> examples) const;

  // Epochs with validation early stopping; the best state is restored at the
  // end. With a run directory, writes config.json, metrics.csv and per-epoch
  // checkpoints.
  TrainResult fit(const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                  const std::function<void(const EpochSummary&)>& on_epoch = {});

  std::vector<ad::Param*> trainable_parameters();

 private:
  void pin_zero_rows();
  std::size_t reseed_dead_codes();
  void observe(const std::vector<CodeUse>& uses);

  const ImpressionLog& log_;
  TrainConfig config_;
  TokenizerState tok_;
  MixerState mixer_;
  Adam adam_;
  std::vector<Example> train_, val_, test_;
  int epoch_ = 0;
  std::uint64_t step_ = 0;
  // Usage counts and a residual reservoir per [slot][level], filled during an epoch.
  std::vector<std::vector<std::vector<std::uint32_t>>> usage_;
  std::vector<std::vector<std::vector<std::vector<double>>>> reservoir_;
  std::uint64_t seen_ = 0;
  std::function<void(const LossBreakdown&, std::uint64_t)> step_hook_;
};

std::string train_config_to_json(const TrainConfig& c);
TrainConfig parse_train_config(std::string_view json_text);
TrainConfig load_train_config(const std::filesystem::path& path);

// Finite-difference check of every parameter group on a small model.
struct GradcheckGroup {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool non_smooth = false;  // a perturbation flipped a frozen index
};

struct GradcheckConfig {
  int L = 4;
  int blocks = 1;
  int heads = 1;
  int d0 = 4;
  int levels = 2;
  int codebook_size = 4;
  int slots = 3;
  double step = 1e-5;
  std::uint64_t seed = 1;
  bool mixer_only = false;  // tokenizer frozen, L_VQ and L_align off
  Variant variant = Variant::full;
};

struct GradcheckReport {
  std::vector<GradcheckGroup> groups;
  double max_rel_error() const;
  bool passed(double tol = 1e-4) const;
};

GradcheckReport gradcheck(const GradcheckConfig& config);

enum class SweepAxis { B, N, L };

struct SweepRow {
  int value = 0;
  bool ok = false;
  std::string error;
  MetricReport val;
  std::uint64_t flops = 0;
};

// One training run per value with shared seed and budget.
std::vector<SweepRow> sweep(SweepAxis axis, std::span<const int> values, const FeatureSchema& base_schema,
                            const GeneratorConfig& data, const TrainConfig& base,
                            const std::optional<std::filesystem::path>& out_dir = std::nullopt);

}  // namespace sif
