#include "sif/mixer.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <random>

#include "sif/binary_io.hpp"
#include "sif/error.hpp"
#include "sif/tensor_io.hpp"

namespace sif {

namespace {

constexpr std::array<std::pair<Variant, std::string_view>, 6> kVariantNames{{
    {Variant::full, "full"},
    {Variant::item_id_only, "item_id_only"},
    {Variant::item_plus_key, "item_plus_key"},
    {Variant::dense_raw, "dense_raw"},
    {Variant::flat_attn, "flat_attn"},
    {Variant::pooled, "pooled"},
}};

Matrix uniform_matrix(int rows, int cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix m(rows, cols);
  for (auto& x : m.data) x = u(rng);
  return m;
}

ad::Param linear(const std::string& name, int in, int out, std::mt19937_64& rng) {
  return {name, uniform_matrix(in, out, 1.0 / std::sqrt(in), rng)};
}

ad::Param bias(const std::string& name, int width) { return {name, Matrix(1, width), false}; }

NormParams norm(const std::string& name, int d) {
  return {{name + ".gamma", Matrix(1, d, 1.0), false}, {name + ".beta", Matrix(1, d), false}};
}

AttentionParams attention_params(const std::string& name, int d, std::mt19937_64& rng) {
  return {linear(name + ".q", d, d, rng), linear(name + ".k", d, d, rng), linear(name + ".v", d, d, rng),
          linear(name + ".o", d, d, rng)};
}

ad::Var mha(ad::Graph& g, const AttentionParams& a, ad::Var x, const ad::AttentionLayout& layout, int heads,
            const std::vector<std::uint8_t>* mask) {
  ad::Var q = g.matmul(x, g.param(a.q));
  ad::Var k = g.matmul(x, g.param(a.k));
  ad::Var v = g.matmul(x, g.param(a.v));
  return g.matmul(g.attention(q, k, v, layout, heads, mask), g.param(a.o));
}

ad::Var layer_norm(ad::Graph& g, const NormParams& n, ad::Var x) {
  return g.layer_norm(x, g.param(n.gamma), g.param(n.beta), kLayerNormEps);
}

void push_attention(std::vector<ad::Param*>& out, AttentionParams& a) {
  for (auto* p : {&a.q, &a.k, &a.v, &a.o}) out.push_back(p);
}

void push_norm(std::vector<ad::Param*>& out, NormParams& n) {
  out.push_back(&n.gamma);
  out.push_back(&n.beta);
}

}  // namespace

std::string_view variant_name(Variant v) {
  for (const auto& [k, name] : kVariantNames)
    if (k == v) return name;
  return "?";
}

Variant parse_variant(std::string_view name) {
  for (const auto& [k, n] : kVariantNames)
    if (n == name) return k;
  throw ConfigError("unknown variant '" + std::string(name) + "'");
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::full,      Variant::item_id_only, Variant::item_plus_key,
                                      Variant::dense_raw, Variant::flat_attn,    Variant::pooled};
  return v;
}

bool uses_quantized_history(Variant v) {
  return v == Variant::full || v == Variant::flat_attn || v == Variant::pooled;
}

MixerState::MixerState(const FeatureSchema& schema, MixerConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
  const auto slots = derive_partition(schema);
  T_ = static_cast<int>(slots.size());
  d0_ = schema.sub_token_dim;
  if (config_.blocks < 0) throw ConfigError("number of blocks must be >= 0");
  if (config_.heads <= 0 || d0_ % config_.heads != 0) throw ConfigError("attention heads must divide d_0");
  if (config_.max_len < 0) throw ConfigError("max sequence length must be >= 0");
  const auto v = config_.variant;
  if ((v == Variant::item_id_only || v == Variant::item_plus_key) && config_.n_items == 0)
    throw ConfigError("item-embedding variants need n_items > 0");

  std::mt19937_64 rng(seed ^ 0x6d69786572ULL);
  const int d = d0_;
  const int wide = T_ * d;
  for (std::size_t s = 0; s < slots.size(); ++s)
    w_res.push_back(linear("w_res." + slots[s].group + "." + std::to_string(slots[s].index_in_group),
                           slots[s].raw_width, d, rng));
  recency = {"recency", uniform_matrix(config_.max_len + 1, wide, 0.1, rng)};

  for (int n = 0; n < config_.blocks; ++n) {
    const std::string p = "block" + std::to_string(n);
    BlockParams b;
    b.flat = v == Variant::flat_attn;
    b.token_mixer = v != Variant::pooled && v != Variant::item_id_only && !b.flat;
    b.sample_mixer = !b.flat;
    if (b.flat) {
      b.ln_token = norm(p + ".ln_flat", d);
      b.token = attention_params(p + ".flat", d, rng);
    }
    if (b.token_mixer) {
      b.ln_token = norm(p + ".ln_token", d);
      b.token = attention_params(p + ".token", d, rng);
    }
    if (b.sample_mixer) {
      b.ln_sample = norm(p + ".ln_sample", d);
      b.sample = attention_params(p + ".sample", d, rng);
    }
    b.ln_ffn = norm(p + ".ln_ffn", d);
    b.ffn_w1 = linear(p + ".ffn.w1", d, 4 * d, rng);
    b.ffn_b1 = bias(p + ".ffn.b1", 4 * d);
    b.ffn_w2 = linear(p + ".ffn.w2", 4 * d, d, rng);
    b.ffn_b2 = bias(p + ".ffn.b2", d);
    blocks.push_back(std::move(b));
  }
  head_w1 = linear("head.w1", d, 4 * d, rng);
  head_b1 = bias("head.b1", 4 * d);
  head_w2 = linear("head.w2", 4 * d, 1, rng);
  head_b2 = bias("head.b2", 1);

  if (v == Variant::item_id_only || v == Variant::item_plus_key)
    item_embed = {"item_embed", uniform_matrix(static_cast<int>(config_.n_items), wide, 0.1, rng)};
  if (v == Variant::item_plus_key) {
    if (config_.key_fields.empty()) {
      for (const auto& f : schema.fields)
        if (f.group == "item" || f.name == "ctx_coupon") config_.key_fields.push_back(f.name);
    }
    int width = 0;
    for (const auto& name : config_.key_fields) {
      const int f = schema.field_index(name);
      if (f < 0) throw ConfigError("unknown key field '" + name + "'");
      key_fields_.push_back(f);
      width += schema.fields[f].embed_dim;
    }
    if (width == 0) throw ConfigError("item_plus_key needs at least one key field");
    key_proj = linear("key_proj", width, wide, rng);
  }
  if (v == Variant::dense_raw) dense_proj = linear("dense_proj", schema.total_embed_width(), wide, rng);
}

std::vector<ad::Param*> MixerState::parameters() {
  std::vector<ad::Param*> out;
  for (auto& p : w_res) out.push_back(&p);
  out.push_back(&recency);
  for (auto& b : blocks) {
    if (b.flat || b.token_mixer) {
      push_norm(out, b.ln_token);
      push_attention(out, b.token);
    }
    if (b.sample_mixer) {
      push_norm(out, b.ln_sample);
      push_attention(out, b.sample);
    }
    push_norm(out, b.ln_ffn);
    for (auto* p : {&b.ffn_w1, &b.ffn_b1, &b.ffn_w2, &b.ffn_b2}) out.push_back(p);
  }
  for (auto* p : {&head_w1, &head_b1, &head_w2, &head_b2}) out.push_back(p);
  for (auto* p : {&item_embed, &key_proj, &dense_proj})
    if (p->value.size() > 0) out.push_back(p);
  return out;
}

std::vector<const ad::Param*> MixerState::parameters() const {
  auto mut = const_cast<MixerState*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

namespace build {

std::vector<ad::Var> target_slots(ad::Graph& g, const MixerState& m, const std::vector<ad::Var>& raw_slots) {
  if (static_cast<int>(raw_slots.size()) != m.num_slots()) throw DataError("target: expected one vector per slot");
  std::vector<ad::Var> out;
  for (int k = 0; k < m.num_slots(); ++k) {
    if (g.cols(raw_slots[k]) != m.w_res[k].value.rows)
      throw DataError("target slot " + std::to_string(k) + ": width " + std::to_string(g.cols(raw_slots[k])) +
                      " does not match W_res rows " + std::to_string(m.w_res[k].value.rows));
    out.push_back(g.matmul(raw_slots[k], g.param(m.w_res[k])));
  }
  return out;
}

ad::Var history_from_wide(ad::Graph& g, const MixerState& m, ad::Var wide) {
  const int l = g.rows(wide);
  if (l > m.max_len()) throw DataError("history longer than L");
  std::vector<int> offsets(l);
  for (int r = 0; r < l; ++r) offsets[r] = m.max_len() - (r + 1);  // row r+1 gets p_{L-(r+1)}
  ad::Var rows = g.add(wide, g.gather_rows(g.param(m.recency), std::move(offsets)));
  return g.reshape(rows, l * m.num_slots(), m.dim());
}

ad::Var history_from_slots(ad::Graph& g, const MixerState& m, const std::vector<ad::Var>& slot_rows) {
  const int l = g.rows(slot_rows.at(0));
  return history_from_wide(g, m, g.reshape(g.interleave(slot_rows), l, m.num_slots() * m.dim()));
}

ad::Var history_wide(ad::Graph& g, const TokenizerState& tok, const MixerState& m,
                     std::span<const RawSample* const> history) {
  const auto& schema = tok.schema();
  switch (m.variant()) {
    case Variant::item_id_only:
    case Variant::item_plus_key: {
      std::vector<int> items;
      for (const auto* s : history) {
        if (s->item_id >= m.config().n_items) throw DataError("item id " + std::to_string(s->item_id) + " >= n_items");
        items.push_back(static_cast<int>(s->item_id));
      }
      ad::Var e = g.gather_rows(g.param(m.item_embed), std::move(items));
      if (m.variant() == Variant::item_id_only) return e;
      std::vector<ad::Var> parts;
      for (int f : m.key_field_indices()) {
        const auto& spec = schema.fields[f];
        const auto& emb = tok.embedders[f];
        if (spec.kind == FieldKind::categorical) {
          std::vector<int> rows;
          for (const auto* s : history) rows.push_back(static_cast<int>(s->values[f].category));
          parts.push_back(g.gather_rows(g.param(emb.table), std::move(rows)));
        } else {
          Matrix x(static_cast<int>(history.size()), 1);
          for (std::size_t r = 0; r < history.size(); ++r) x(static_cast<int>(r), 0) = history[r]->values[f].numeric;
          parts.push_back(g.add_row(g.matmul(g.constant(std::move(x)), g.param(emb.table)), g.param(emb.bias)));
        }
      }
      ad::Var keys = parts.size() == 1 ? parts.front() : g.concat_cols(parts);
      return g.add(e, g.matmul(keys, g.param(m.key_proj)));
    }
    case Variant::dense_raw: {
      auto raw = build::embed_fields(g, tok, history);
      ad::Var all = raw.size() == 1 ? raw.front() : g.concat_cols(raw);
      return g.matmul(all, g.param(m.dense_proj));
    }
    default:
      throw std::logic_error("history_wide: variant uses quantized history");
  }
}

ad::Var assemble(ad::Graph& g, const MixerState& m, const std::vector<ad::Var>& target, ad::Var history,
                 int padding) {
  std::vector<ad::Var> parts = target;
  if (history.id >= 0 && g.rows(history) > 0) parts.push_back(history);
  if (padding > 0) parts.push_back(g.constant(Matrix(padding * m.num_slots(), m.dim())));
  return g.concat_rows(parts);
}

std::vector<std::uint8_t> row_mask(int rows, int valid_len, int slots) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(rows) * slots, 0);
  for (int r = 0; r <= valid_len && r < rows; ++r)
    for (int p = 0; p < slots; ++p) mask[static_cast<std::size_t>(r) * slots + p] = 1;
  return mask;
}

ad::Var block(ad::Graph& g, const MixerState& m, const BlockParams& b, ad::Var H, int rows, int valid_len) {
  const int heads = m.config().heads;
  const bool pooled = m.variant() == Variant::pooled;
  const int T = pooled ? 1 : m.num_slots();
  std::vector<std::uint8_t> mask;
  const bool padded = valid_len + 1 < rows;
  if (padded) mask = row_mask(rows, valid_len, T);
  const auto* mask_ptr = padded ? &mask : nullptr;

  if (b.flat) {
    const ad::AttentionLayout all{1, rows * T, 0, 1};
    H = g.add(H, mha(g, b.token, layer_norm(g, b.ln_token, H), all, heads, mask_ptr));
  }
  if (b.token_mixer) {
    const ad::AttentionLayout per_row{rows, T, T, 1};
    H = g.add(H, mha(g, b.token, layer_norm(g, b.ln_token, H), per_row, heads, nullptr));
  }
  if (b.sample_mixer) {
    const ad::AttentionLayout per_col{T, rows, 1, T};
    H = g.add(H, mha(g, b.sample, layer_norm(g, b.ln_sample, H), per_col, heads, mask_ptr));
  }
  ad::Var x = layer_norm(g, b.ln_ffn, H);
  ad::Var h = g.relu(g.add_row(g.matmul(x, g.param(b.ffn_w1)), g.param(b.ffn_b1)));
  return g.add(H, g.add_row(g.matmul(h, g.param(b.ffn_w2)), g.param(b.ffn_b2)));
}

ad::Var blocks_and_head(ad::Graph& g, const MixerState& m, ad::Var H, int rows, int valid_len) {
  const int T = m.num_slots();
  if (m.variant() == Variant::pooled && g.rows(H) == rows * T) H = g.group_mean(H, T);
  for (const auto& b : m.blocks) H = block(g, m, b, H, rows, valid_len);
  ad::Var pooled = m.variant() == Variant::pooled ? g.slice_rows(H, 0, 1) : g.group_mean(g.slice_rows(H, 0, T), T);
  ad::Var h = g.relu(g.add_row(g.matmul(pooled, g.param(m.head_w1)), g.param(m.head_b1)));
  return g.add_row(g.matmul(h, g.param(m.head_w2)), g.param(m.head_b2));
}

}  // namespace build

namespace {

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

void check_history_len(const MixerState& m, std::size_t n) {
  if (n > static_cast<std::size_t>(m.max_len()))
    throw DataError("history length " + std::to_string(n) + " exceeds L = " + std::to_string(m.max_len()));
}

std::vector<ad::Var> target_from_raw(ad::Graph& g, const MixerState& m, const TokenizerState& tok,
                                     const RawSample& target) {
  const RawSample* one[] = {&target};
  return build::target_slots(g, m, build::embed_fields(g, tok, one));
}

double finish(ad::Graph& g, const MixerState& m, const std::vector<ad::Var>& target, ad::Var history, int len) {
  const int rows = m.max_len() + 1;
  ad::Var H = build::assemble(g, m, target, history, m.max_len() - len);
  return sigmoid(g.scalar(build::blocks_and_head(g, m, H, rows, len)));
}

}  // namespace

HiddenState embed_sequence(const MixerState& m, const TokenizerState& tok, std::span<const TokenSample> seq) {
  check_history_len(m, seq.size());
  if (!uses_quantized_history(m.variant())) throw ConfigError("embed_sequence: variant has no token history");
  const int T = m.num_slots();
  HiddenState h;
  h.rows = m.max_len() + 1;
  h.valid_len = static_cast<int>(seq.size());
  h.slots = T;
  h.H = Matrix(h.rows * T, m.dim());
  if (!seq.empty()) {
    ad::Graph g;
    const Matrix& rows = g.value(build::history_from_slots(g, m, build::lookup(g, tok, seq)));
    std::copy(rows.data.begin(), rows.data.end(), h.H.data.begin() + static_cast<std::ptrdiff_t>(T) * m.dim());
  }
  return h;
}

Matrix embed_target(const MixerState& m, const std::vector<std::vector<double>>& raw_slots) {
  ad::Graph g;
  std::vector<ad::Var> raw;
  for (const auto& v : raw_slots) raw.push_back(g.constant(Matrix::from_rows(1, static_cast<int>(v.size()), v)));
  return g.value(g.concat_rows(build::target_slots(g, m, raw)));
}

HiddenState sif_block(const MixerState& m, int block, const HiddenState& h) {
  if (block < 0 || block >= static_cast<int>(m.blocks.size())) throw std::out_of_range("block index");
  const int width = m.variant() == Variant::pooled ? 1 : m.num_slots();
  if (h.H.rows != h.rows * width || h.H.cols != m.dim()) throw DataError("sif_block: hidden state shape mismatch");
  ad::Graph g;
  HiddenState out = h;
  out.H = g.value(build::block(g, m, m.blocks[block], g.constant(h.H), h.rows, h.valid_len));
  return out;
}

double forward_from_hidden(const MixerState& m, const HiddenState& h) {
  if (h.H.rows != h.rows * m.num_slots() || h.H.cols != m.dim())
    throw DataError("forward: hidden state shape mismatch");
  ad::Graph g;
  return sigmoid(g.scalar(build::blocks_and_head(g, m, g.constant(h.H), h.rows, h.valid_len)));
}

double forward(const MixerState& m, const TokenizerState& tok, const RawSample& target,
               std::span<const TokenSample> seq) {
  check_history_len(m, seq.size());
  if (!uses_quantized_history(m.variant())) throw ConfigError("forward: variant has no token history");
  ad::Graph g;
  const auto tgt = target_from_raw(g, m, tok, target);
  ad::Var hist{};
  if (!seq.empty()) hist = build::history_from_slots(g, m, build::lookup(g, tok, seq));
  return finish(g, m, tgt, hist, static_cast<int>(seq.size()));
}

double forward_raw(const MixerState& m, const TokenizerState& tok, const RawSample& target,
                   std::span<const RawSample* const> history) {
  check_history_len(m, history.size());
  ad::Graph g;
  const auto tgt = target_from_raw(g, m, tok, target);
  ad::Var hist{};
  if (!history.empty()) {
    if (uses_quantized_history(m.variant())) {
      const auto z = build::project(g, tok, build::embed_fields(g, tok, history));
      hist = build::history_from_slots(g, m, build::quantize(g, tok, z).reconstruction);
    } else {
      hist = build::history_from_wide(g, m, build::history_wide(g, tok, m, history));
    }
  }
  return finish(g, m, tgt, hist, static_cast<int>(history.size()));
}

void save_mixer(const MixerState& m, const FeatureSchema& schema, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write mixer checkpoint " + path.string());
  io::Writer w(out);
  const auto& c = m.config();
  w.put_magic("SIFM");
  w.put(kCheckpointVersion);
  w.put(schema.hash());
  w.put(static_cast<std::uint8_t>(c.variant));
  w.put(static_cast<std::uint16_t>(c.blocks));
  w.put(static_cast<std::uint16_t>(c.heads));
  w.put(static_cast<std::uint16_t>(c.max_len));
  w.put(static_cast<std::uint16_t>(m.dim()));
  w.put(static_cast<std::uint16_t>(m.num_slots()));
  w.put(c.n_items);
  w.put(static_cast<std::uint16_t>(c.key_fields.size()));
  for (const auto& k : c.key_fields) w.put_string(k);
  write_tensors(w, m.parameters());
  if (!w.ok()) throw FormatError("write failed for " + path.string());
}

MixerState load_mixer(const std::filesystem::path& path, const FeatureSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open mixer checkpoint " + path.string());
  io::Reader r(in, path.string());
  r.expect_magic("SIFM");
  if (r.get<std::uint16_t>() != kCheckpointVersion) throw FormatError("unsupported mixer checkpoint version");
  if (r.get<std::uint64_t>() != schema.hash()) throw FormatError("mixer checkpoint schema hash mismatch");
  MixerConfig c;
  const auto v = r.get<std::uint8_t>();
  if (v >= kVariantNames.size()) throw FormatError("mixer checkpoint: unknown variant");
  c.variant = static_cast<Variant>(v);
  c.blocks = r.get<std::uint16_t>();
  c.heads = r.get<std::uint16_t>();
  c.max_len = r.get<std::uint16_t>();
  const int d0 = r.get<std::uint16_t>();
  const int T = r.get<std::uint16_t>();
  if (d0 != schema.sub_token_dim || T != static_cast<int>(derive_partition(schema).size()))
    throw FormatError("mixer checkpoint d_0/T mismatch");
  c.n_items = r.get<std::uint32_t>();
  const auto nk = r.get<std::uint16_t>();
  for (int i = 0; i < nk; ++i) c.key_fields.push_back(r.get_string());
  MixerState m(schema, std::move(c), 0);
  read_tensors(r, m.parameters());
  return m;
}

}  // namespace sif
