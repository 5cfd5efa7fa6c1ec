#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sif/autodiff.hpp"
#include "sif/tokenizer.hpp"

namespace sif {

enum class Variant { full, item_id_only, item_plus_key, dense_raw, flat_attn, pooled };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);  // throws ConfigError
const std::vector<Variant>& all_variants();

// History rows come from RVQ codes (as opposed to item ids or raw embeddings).
bool uses_quantized_history(Variant v);

inline constexpr double kLayerNormEps = 1e-5;

struct MixerConfig {
  Variant variant = Variant::full;
  int blocks = 4;      // N
  int heads = 8;
  int max_len = 100;   // L
  std::uint32_t n_items = 0;            // item-embedding variants only
  std::vector<std::string> key_fields;  // item_plus_key only; empty means item fields + ctx_coupon
};

struct AttentionParams {
  ad::Param q, k, v, o;
};

struct NormParams {
  ad::Param gamma, beta;
};

struct BlockParams {
  bool token_mixer = true;   // per-row attention over the T columns
  bool sample_mixer = true;  // per-column attention over rows
  bool flat = false;         // single attention over all (L+1)*T entries, uses `token`
  NormParams ln_token, ln_sample, ln_ffn;
  AttentionParams token, sample;
  ad::Param ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

class MixerState {
 public:
  MixerState() = default;
  MixerState(const FeatureSchema& schema, MixerConfig config, std::uint64_t seed);

  const MixerConfig& config() const { return config_; }
  Variant variant() const { return config_.variant; }
  int num_slots() const { return T_; }
  int dim() const { return d0_; }
  int max_len() const { return config_.max_len; }
  const std::vector<int>& key_field_indices() const { return key_fields_; }

  std::vector<ad::Param> w_res;  // [slot] raw_width x d_0
  ad::Param recency;             // (L+1) x T*d_0, row j = p_j
  std::vector<BlockParams> blocks;
  ad::Param head_w1, head_b1, head_w2, head_b2;
  ad::Param item_embed;  // n_items x T*d_0
  ad::Param key_proj;    // key width x T*d_0
  ad::Param dense_proj;  // total embed width x T*d_0

  std::vector<ad::Param*> parameters();
  std::vector<const ad::Param*> parameters() const;

 private:
  MixerConfig config_;
  int T_ = 0;
  int d0_ = 0;
  std::vector<int> key_fields_;
};

// H^0 flattened to [rows*T x d_0]; entry (l, p) lives in matrix row l*T + p.
// Row 0 is the target; rows valid_len+1 .. rows-1 are padding.
struct HiddenState {
  Matrix H;
  int rows = 0;
  int valid_len = 0;
  int slots = 0;
};

namespace build {

// Per-slot W_res f_tau, each 1 x d_0.
std::vector<ad::Var> target_slots(ad::Graph& g, const MixerState& m, const std::vector<ad::Var>& raw_slots);

// History rows from per-slot code sums ([slot] -> l x d_0), most recent first;
// adds p_{L-l} to row l. Result is [l*T x d_0].
ad::Var history_from_slots(ad::Graph& g, const MixerState& m, const std::vector<ad::Var>& slot_rows);
// Same from a wide [l x T*d_0] encoding (item-id and raw variants).
ad::Var history_from_wide(ad::Graph& g, const MixerState& m, ad::Var wide);

// Wide history encodings for the non-quantized variants.
ad::Var history_wide(ad::Graph& g, const TokenizerState& tok, const MixerState& m,
                     std::span<const RawSample* const> history);

// Row 0 followed by the history entries, then `padding` zero rows.
ad::Var assemble(ad::Graph& g, const MixerState& m, const std::vector<ad::Var>& target, ad::Var history,
                 int padding);

// Key mask over the flattened entries: 1 for rows 0..valid_len.
std::vector<std::uint8_t> row_mask(int rows, int valid_len, int slots);

ad::Var block(ad::Graph& g, const MixerState& m, const BlockParams& b, ad::Var H, int rows, int valid_len);

// All blocks plus the head; H is [rows*T x d_0] (or [rows x d_0] after pooling).
ad::Var blocks_and_head(ad::Graph& g, const MixerState& m, ad::Var H, int rows, int valid_len);

}  // namespace build

// Serving path: history rows given as stored token samples, most recent first.
HiddenState embed_sequence(const MixerState& m, const TokenizerState& tok, std::span<const TokenSample> seq);
Matrix embed_target(const MixerState& m, const std::vector<std::vector<double>>& raw_slots);
HiddenState sif_block(const MixerState& m, int block, const HiddenState& h);

double forward_from_hidden(const MixerState& m, const HiddenState& h);
// History given as token samples, most recent first; padded to L rows.
double forward(const MixerState& m, const TokenizerState& tok, const RawSample& target,
               std::span<const TokenSample> seq);
// History given as raw samples, most recent first (used by every variant).
double forward_raw(const MixerState& m, const TokenizerState& tok, const RawSample& target,
                   std::span<const RawSample* const> history);

void save_mixer(const MixerState& m, const FeatureSchema& schema, const std::filesystem::path& path);
MixerState load_mixer(const std::filesystem::path& path, const FeatureSchema& schema);

}  // namespace sif
