#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "sif/error.hpp"
#include "sif/mixer.hpp"

using namespace sif;

namespace {

FeatureSchema small_schema() {
  // T = 3 slots, d_0 = 4.
  auto s = make_uniform_schema({{"user", 2}, {"item", 2}, {"ctx", 2}}, 2, 4, 2, 8, 6, 4);
  s.validate();
  return s;
}

MixerConfig config(Variant v, int L = 5, int blocks = 2, int heads = 2) {
  MixerConfig c;
  c.variant = v;
  c.blocks = blocks;
  c.heads = heads;
  c.max_len = L;
  c.n_items = 10;
  return c;
}

RawSample sample_for(const FeatureSchema& s, std::mt19937_64& rng, std::uint64_t item = 0) {
  RawSample r;
  r.item_id = item;
  for (const auto& f : s.fields) {
    FieldValue v;
    v.category = std::uniform_int_distribution<std::uint32_t>(0, f.cardinality - 1)(rng);
    r.values.push_back(v);
  }
  return r;
}

void randomize(Matrix& m, std::mt19937_64& rng, double sd = 0.5) {
  std::normal_distribution<double> d(0.0, sd);
  for (auto& x : m.data) x = d(rng);
}

HiddenState random_hidden(const MixerState& m, int valid, std::mt19937_64& rng) {
  HiddenState h;
  h.rows = m.max_len() + 1;
  h.valid_len = valid;
  h.slots = m.num_slots();
  h.H = Matrix(h.rows * h.slots, m.dim());
  randomize(h.H, rng, 1.0);
  return h;
}

// Make every parameter non-trivial, including LayerNorm and biases.
void perturb_all(MixerState& m, std::mt19937_64& rng) {
  for (auto* p : m.parameters()) {
    std::normal_distribution<double> d(0.0, 0.1);
    for (auto& x : p->value.data) x += d(rng);
  }
}

}  // namespace

TEST(Variants, NamesRoundTrip) {
  for (auto v : all_variants()) EXPECT_EQ(parse_variant(variant_name(v)), v);
  EXPECT_THROW(parse_variant("nope"), ConfigError);
  EXPECT_EQ(all_variants().size(), 6u);
}

TEST(Block, ZeroOutputProjectionsGiveIdentity) {
  const auto schema = small_schema();
  std::mt19937_64 rng(1);
  for (auto v : {Variant::full, Variant::flat_attn}) {
    MixerState m(schema, config(v), 3);
    perturb_all(m, rng);
    for (auto& b : m.blocks) {
      b.token.o.value.zero();
      b.sample.o.value.zero();
      b.ffn_w2.value.zero();
      b.ffn_b2.value.zero();
    }
    const auto h = random_hidden(m, 3, rng);
    for (int k = 0; k < 2; ++k) {
      const auto out = sif_block(m, k, h);
      for (std::size_t i = 0; i < h.H.size(); ++i) EXPECT_NEAR(out.H.data[i], h.H.data[i], 1e-12);
    }
  }
}

TEST(Block, SubLayerOrderIsPreNormResidual) {
  // With the FFN zeroed and the sample mixer's output zeroed, a block is
  // x + MHA_row(LN(x)); with T = 1 and one head that is x + LN(x) Wv Wo.
  auto s = make_uniform_schema({{"user", 1}}, 1, 4, 1, 2, 3, 4);
  s.validate();
  MixerState m(s, config(Variant::full, 0, 1, 1), 5);
  std::mt19937_64 rng(2);
  perturb_all(m, rng);
  auto& b = m.blocks[0];
  b.sample.o.value.zero();
  b.ffn_w2.value.zero();
  b.ffn_b2.value.zero();
  const auto h = random_hidden(m, 0, rng);
  const auto out = sif_block(m, 0, h);
  // LN(x)
  std::vector<double> x(h.H.data.begin(), h.H.data.end()), ln(4), hv(4, 0.0), ho(4, 0.0);
  double mean = std::accumulate(x.begin(), x.end(), 0.0) / 4, var = 0;
  for (double v : x) var += (v - mean) * (v - mean) / 4;
  for (int j = 0; j < 4; ++j)
    ln[j] = (x[j] - mean) / std::sqrt(var + kLayerNormEps) * b.ln_token.gamma.value(0, j) + b.ln_token.beta.value(0, j);
  for (int j = 0; j < 4; ++j)
    for (int i = 0; i < 4; ++i) hv[j] += ln[i] * b.token.v.value(i, j);
  for (int j = 0; j < 4; ++j)
    for (int i = 0; i < 4; ++i) ho[j] += hv[i] * b.token.o.value(i, j);
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(out.H.data[j], x[j] + ho[j], 1e-12);
}

TEST(Forward, PaddingContentsDoNotMatter) {
  const auto schema = small_schema();
  std::mt19937_64 rng(3);
  for (auto v : all_variants()) {
    MixerState m(schema, config(v), 7);
    perturb_all(m, rng);
    const int width = m.num_slots();
    auto h = random_hidden(m, 2, rng);
    const double base = forward_from_hidden(m, h);
    for (int trial = 0; trial < 3; ++trial) {
      auto p = h;
      for (int r = (h.valid_len + 1) * width; r < p.H.rows; ++r)
        for (int c = 0; c < p.H.cols; ++c) p.H(r, c) = std::normal_distribution<double>(0, 100)(rng);
      EXPECT_NEAR(forward_from_hidden(m, p), base, 1e-12) << variant_name(v);
    }
  }
}

TEST(Forward, PaddingGradientsAreExactlyZero) {
  const auto schema = small_schema();
  std::mt19937_64 rng(4);
  for (auto v : all_variants()) {
    MixerState m(schema, config(v), 7);
    perturb_all(m, rng);
    const int T = m.num_slots();
    const int rows = m.max_len() + 1, valid = 2;
    ad::Param Hp{"H", Matrix(rows * T, m.dim())};
    randomize(Hp.value, rng, 1.0);
    ad::GradStore grads;
    ad::Graph g(&grads);
    g.backward(g.bce_with_logits(build::blocks_and_head(g, m, g.param(Hp), rows, valid), 1.0));
    const Matrix* gh = grads.find(Hp);
    ASSERT_NE(gh, nullptr);
    double live = 0;
    for (int r = 0; r < rows * T; ++r)
      for (int c = 0; c < m.dim(); ++c) {
        if (r >= (valid + 1) * T)
          EXPECT_EQ((*gh)(r, c), 0.0) << variant_name(v);
        else
          live += std::abs((*gh)(r, c));
      }
    EXPECT_GT(live, 0.0);
  }
}

TEST(Forward, ColumnPermutationInvariance) {
  const auto schema = small_schema();
  std::mt19937_64 rng(5);
  for (auto v : {Variant::full, Variant::flat_attn, Variant::item_id_only, Variant::dense_raw}) {
    MixerState m(schema, config(v), 11);
    perturb_all(m, rng);
    const int T = m.num_slots();
    for (int trial = 0; trial < 5; ++trial) {
      auto h = random_hidden(m, trial % (m.max_len() + 1), rng);
      std::vector<int> perm(T);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      auto p = h;
      for (int l = 0; l < h.rows; ++l)
        for (int c = 0; c < T; ++c)
          for (int j = 0; j < m.dim(); ++j) p.H(l * T + perm[c], j) = h.H(l * T + c, j);
      EXPECT_NEAR(forward_from_hidden(m, p), forward_from_hidden(m, h), 1e-6) << variant_name(v);
    }
  }
}

TEST(Forward, ZeroHeadGivesHalf) {
  const auto schema = small_schema();
  MixerState m(schema, config(Variant::full), 1);
  std::mt19937_64 rng(6);
  m.head_w2.value.zero();
  m.head_b2.value.zero();
  EXPECT_DOUBLE_EQ(forward_from_hidden(m, random_hidden(m, 1, rng)), 0.5);
}

TEST(Forward, ColdUserAndPooledLengthOne) {
  const auto schema = small_schema();
  TokenizerState tok(schema, 2);
  std::mt19937_64 rng(7);
  const auto target = sample_for(schema, rng);
  for (auto v : all_variants()) {
    MixerState m(schema, config(v), 3);
    const double y = forward_raw(m, tok, target, {});
    EXPECT_GT(y, 0.0);
    EXPECT_LT(y, 1.0);
  }
  // T = 1: pooled equals the factored model with its token mixer disabled.
  auto one = make_uniform_schema({{"user", 2}}, 2, 4, 2, 8, 6, 4);
  one.validate();
  TokenizerState tok1(one, 2);
  MixerState full(one, config(Variant::full), 3), pooled(one, config(Variant::pooled), 3);
  perturb_all(full, rng);
  pooled.w_res = full.w_res;
  pooled.recency = full.recency;
  pooled.head_w1 = full.head_w1;
  pooled.head_b1 = full.head_b1;
  pooled.head_w2 = full.head_w2;
  pooled.head_b2 = full.head_b2;
  for (std::size_t k = 0; k < full.blocks.size(); ++k) {
    auto b = full.blocks[k];
    b.token_mixer = false;
    full.blocks[k] = b;
    b.token_mixer = pooled.blocks[k].token_mixer;
    pooled.blocks[k] = b;
  }
  std::vector<RawSample> hist;
  for (int i = 0; i < 3; ++i) hist.push_back(sample_for(one, rng));
  std::vector<const RawSample*> ptrs{&hist[0], &hist[1], &hist[2]};
  const auto t1 = sample_for(one, rng);
  EXPECT_NEAR(forward_raw(full, tok1, t1, ptrs), forward_raw(pooled, tok1, t1, ptrs), 1e-12);
}

TEST(Forward, FlatEqualsFactoredForSingleEntry) {
  auto one = make_uniform_schema({{"user", 2}}, 2, 4, 2, 8, 6, 4);
  one.validate();
  TokenizerState tok(one, 2);
  MixerState full(one, config(Variant::full, 0, 2, 2), 3);
  std::mt19937_64 rng(8);
  perturb_all(full, rng);
  MixerState flat(one, config(Variant::flat_attn, 0, 2, 2), 3);
  // Move the factored parameters into the flat model; with one entry both
  // attentions return the value path of self, so they compose additively.
  flat.w_res = full.w_res;
  flat.recency = full.recency;
  flat.head_w1 = full.head_w1;
  flat.head_b1 = full.head_b1;
  flat.head_w2 = full.head_w2;
  flat.head_b2 = full.head_b2;
  for (auto& b : full.blocks) b.sample.o.value.zero();
  for (std::size_t k = 0; k < full.blocks.size(); ++k) {
    const bool flag = flat.blocks[k].flat;
    const bool tm = flat.blocks[k].token_mixer, sm = flat.blocks[k].sample_mixer;
    flat.blocks[k] = full.blocks[k];
    flat.blocks[k].flat = flag;
    flat.blocks[k].token_mixer = tm;
    flat.blocks[k].sample_mixer = sm;
  }
  const auto target = sample_for(one, rng);
  EXPECT_NEAR(forward_raw(full, tok, target, {}), forward_raw(flat, tok, target, {}), 1e-12);
}

TEST(Embed, ZeroCodebooksGiveRecencyRows) {
  const auto schema = small_schema();
  TokenizerState tok(schema, 2);
  for (auto& levels : tok.codebooks)
    for (auto& cb : levels) cb.value.zero();
  MixerState m(schema, config(Variant::full), 3);
  std::mt19937_64 rng(9);
  randomize(m.recency.value, rng);
  std::vector<TokenSample> seq(3, TokenSample(3, 2));
  seq[1].at(0, 0) = 5;
  const auto h = embed_sequence(m, tok, seq);
  const int T = 3, d = 4, L = m.max_len();
  for (int l = 1; l <= 3; ++l)
    for (int p = 0; p < T; ++p)
      for (int j = 0; j < d; ++j) EXPECT_EQ(h.H((l * T) + p, j), m.recency.value(L - l, p * d + j));
  for (int r = 4 * T; r < h.H.rows; ++r)
    for (int j = 0; j < d; ++j) EXPECT_EQ(h.H(r, j), 0.0);
  EXPECT_EQ(h.valid_len, 3);
}

TEST(Embed, LookupEqualsTokenizerReconstruction) {
  const auto schema = small_schema();
  TokenizerState tok(schema, 4);
  MixerState m(schema, config(Variant::full), 3);
  m.recency.value.zero();
  std::mt19937_64 rng(10);
  const auto raw = sample_for(schema, rng);
  const auto slots = embed_fields(tok, raw);
  std::vector<std::vector<double>> z;
  for (int k = 0; k < 3; ++k) z.push_back(project(tok, k, slots[k]));
  const auto trace = quantize(tok, z);
  const std::vector<TokenSample> seq{tokenize(tok, raw)};
  const auto h = embed_sequence(m, tok, seq);
  for (int k = 0; k < 3; ++k)
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(h.H(3 + k, j), trace.reconstruction[k][j], 1e-12);
}

TEST(Embed, TargetRowUsesResidualProjection) {
  const auto schema = small_schema();
  MixerState m(schema, config(Variant::full), 3);
  std::mt19937_64 rng(11);
  std::vector<std::vector<double>> raw(3, std::vector<double>(8));
  for (auto& v : raw)
    for (auto& x : v) x = std::normal_distribution<double>()(rng);
  const auto row = embed_target(m, raw);
  for (int k = 0; k < 3; ++k)
    for (int j = 0; j < 4; ++j) {
      double s = 0;
      for (int i = 0; i < 8; ++i) s += raw[k][i] * m.w_res[k].value(i, j);
      EXPECT_NEAR(row(k, j), s, 1e-12);
    }
  for (auto& w : m.w_res) w.value.zero();
  for (double x : embed_target(m, raw).data) EXPECT_EQ(x, 0.0);
  raw[0].pop_back();
  EXPECT_THROW(embed_target(m, raw), DataError);
}

TEST(Embed, RejectsBadIndicesAndLengths) {
  const auto schema = small_schema();
  TokenizerState tok(schema, 4);
  MixerState m(schema, config(Variant::full, 2), 3);
  std::vector<TokenSample> bad(1, TokenSample(3, 2));
  bad[0].at(1, 1) = 8;
  EXPECT_THROW(embed_sequence(m, tok, bad), DataError);
  std::vector<TokenSample> too_long(3, TokenSample(3, 2));
  EXPECT_THROW(embed_sequence(m, tok, too_long), DataError);
}

TEST(Heads, MustDivideWidth) {
  const auto schema = small_schema();
  EXPECT_THROW(MixerState(schema, config(Variant::full, 4, 1, 3), 1), ConfigError);
}

TEST(Checkpoint, RoundTrip) {
  const auto schema = small_schema();
  const auto dir = std::filesystem::temp_directory_path() / "sif_test_mixer";
  std::filesystem::create_directories(dir);
  for (auto v : all_variants()) {
    MixerState m(schema, config(v), 21);
    const auto p = dir / (std::string(variant_name(v)) + ".sifm");
    save_mixer(m, schema, p);
    const auto back = load_mixer(p, schema);
    EXPECT_EQ(back.variant(), v);
    EXPECT_EQ(back.max_len(), m.max_len());
    const auto a = m.parameters();
    const auto b = back.parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = 0; j < a[i]->value.size(); ++j)
        EXPECT_EQ(static_cast<float>(a[i]->value.data[j]), b[i]->value.data[j]);
  }
  auto other = schema;
  other.sub_token_dim = 8;
  EXPECT_THROW(load_mixer(dir / "full.sifm", other), FormatError);
}
