#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "sif/autodiff.hpp"
#include "sif/datagen.hpp"
#include "sif/schema.hpp"

namespace sif {

// T x M codebook indices, slot-major.
struct TokenSample {
  int slots = 0;
  int levels = 0;
  std::vector<std::uint16_t> indices;

  TokenSample() = default;
  TokenSample(int t, int m) : slots(t), levels(m), indices(static_cast<std::size_t>(t) * m, 0) {}
  std::uint16_t& at(int slot, int level) { return indices[static_cast<std::size_t>(slot) * levels + level]; }
  std::uint16_t at(int slot, int level) const { return indices[static_cast<std::size_t>(slot) * levels + level]; }
  bool operator==(const TokenSample&) const = default;
};

struct QuantizationTrace {
  std::vector<std::vector<double>> projected;               // [slot] z~, d_0
  std::vector<std::vector<std::vector<double>>> residuals;  // [slot][level] r^(m), d_0
  std::vector<std::vector<double>> reconstruction;          // [slot] s^ = sum_m c_q
  TokenSample indices;
};

struct TokenizerLosses {
  double token = 0.0;  // BCE of the auxiliary pCTR head
  double vq = 0.0;     // codebook + commitment terms
};

// Field embedders, per-slot projections W_proj, per-slot per-level codebooks
// and the auxiliary pCTR head.
class TokenizerState {
 public:
  struct FieldEmbedder {
    ad::Param table;  // categorical: cardinality x e; numeric: 1 x e weight
    ad::Param bias;   // numeric only: 1 x e
  };

  TokenizerState() = default;
  TokenizerState(FeatureSchema schema, std::uint64_t seed);

  const FeatureSchema& schema() const { return schema_; }
  const std::vector<SubTokenSlot>& slots() const { return slots_; }
  int num_slots() const { return static_cast<int>(slots_.size()); }
  int levels() const { return schema_.rvq_levels; }
  int codebook_size() const { return schema_.codebook_size; }
  int dim() const { return schema_.sub_token_dim; }

  std::vector<FieldEmbedder> embedders;
  std::vector<ad::Param> proj;                    // [slot] raw_width x d_0
  std::vector<std::vector<ad::Param>> codebooks;  // [slot][level] V x d_0
  ad::Param aux_w1, aux_b1, aux_w2, aux_b2;

  // Every tensor in checkpoint order.
  std::vector<ad::Param*> parameters();
  std::vector<const ad::Param*> parameters() const;
  std::vector<ad::Param*> embedder_parameters();

 private:
  FeatureSchema schema_;
  std::vector<SubTokenSlot> slots_;
};

inline constexpr double kCommitmentWeight = 0.25;

// Graph builders shared by training, inference and gradient checks.
namespace build {

// Per-slot raw vectors f^(g,k) for a batch: [slot] -> R x raw_width.
std::vector<ad::Var> embed_fields(ad::Graph& g, const TokenizerState& s, std::span<const RawSample* const> batch);
// Per-slot z~ = f W_proj: [slot] -> R x d_0.
std::vector<ad::Var> project(ad::Graph& g, const TokenizerState& s, const std::vector<ad::Var>& raw);

struct Rvq {
  std::vector<std::vector<ad::Var>> residual;          // [slot][level] R x d_0
  std::vector<std::vector<ad::Var>> code;              // [slot][level] selected rows, R x d_0
  std::vector<ad::Var> reconstruction;                 // [slot] sum of codes
  std::vector<std::vector<std::vector<int>>> indices;  // [slot][level][row]
};
Rvq quantize(ad::Graph& g, const TokenizerState& s, const std::vector<ad::Var>& projected);

// sum over slots, levels and rows of ||sg(r) - c||^2 + commitment * ||r - sg(c)||^2.
ad::Var vq_loss(ad::Graph& g, const Rvq& rvq, double commitment = kCommitmentWeight);

// Codebook reconstruction with straight-through gradient to z~.
std::vector<ad::Var> straight_through(ad::Graph& g, const std::vector<ad::Var>& projected, const Rvq& rvq);

// Codebook lookup for stored indices: [slot] -> R x d_0.
std::vector<ad::Var> lookup(ad::Graph& g, const TokenizerState& s, std::span<const TokenSample> tokens);

// Aux head logit for one sample given its per-slot 1 x d_0 vectors.
ad::Var aux_logit(ad::Graph& g, const TokenizerState& s, const std::vector<ad::Var>& slot_vectors, int row = 0);

}  // namespace build

std::vector<std::vector<double>> embed_fields(const TokenizerState& s, const RawSample& raw);
std::vector<double> project(const TokenizerState& s, int slot, std::span<const double> raw);
QuantizationTrace quantize(const TokenizerState& s, const std::vector<std::vector<double>>& projected);
TokenSample tokenize(const TokenizerState& s, const RawSample& raw);
double aux_predict(const TokenizerState& s, const QuantizationTrace& trace);
TokenizerLosses tokenizer_losses(const TokenizerState& s, const RawSample& raw, int label);

void save_tokenizer(const TokenizerState& s, const std::filesystem::path& path);
TokenizerState load_tokenizer(const std::filesystem::path& path, const FeatureSchema& schema);

}  // namespace sif
