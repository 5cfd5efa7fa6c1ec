#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "sif/error.hpp"
#include "sif/training.hpp"

using namespace sif;

namespace {

const ImpressionLog& small_log() {
  static const ImpressionLog log = [] {
    GeneratorConfig c;
    c.n_users = 150;
    c.n_items = 60;
    c.n_impressions = 6000;
    c.seed = 3;
    return generate_log(desk_schema(), c);
  }();
  return log;
}

TrainConfig small_config(Variant v = Variant::full) {
  TrainConfig c;
  c.batch_size = 32;
  c.max_epochs = 1;
  c.max_train_examples = 256;
  c.max_eval_examples = 200;
  c.mixer.variant = v;
  c.mixer.blocks = 1;
  c.mixer.heads = 2;
  c.mixer.max_len = 6;
  return c;
}

std::vector<std::vector<double>> snapshot(Trainer& t) {
  std::vector<std::vector<double>> out;
  for (auto* p : t.tokenizer().parameters()) out.push_back(p->value.data);
  for (auto* p : t.mixer().parameters()) out.push_back(p->value.data);
  return out;
}

const Example& with_history(const Trainer& t) {
  for (const auto& e : t.train_examples())
    if (e.history.size() >= 2) return e;
  throw std::runtime_error("no example with history");
}

}  // namespace

TEST(Examples, HistoryIsMostRecentFirstAndBounded) {
  const auto& log = small_log();
  const auto idx = log.indices_of(SplitPart::train);
  const auto ex = make_examples(log, idx, 4);
  ASSERT_EQ(ex.size(), idx.size());
  for (std::size_t i = 0; i < ex.size(); ++i) {
    EXPECT_LE(ex[i].history.size(), 4u);
    EXPECT_EQ(ex[i].label, ex[i].target->label);
    for (std::size_t j = 1; j < ex[i].history.size(); ++j)
      EXPECT_GT(ex[i].history[j - 1]->timestamp, ex[i].history[j]->timestamp);
    for (const auto* h : ex[i].history) EXPECT_LT(h->timestamp, ex[i].target->timestamp);
  }
}

TEST(TrainStep, ZeroLearningRateLeavesParametersBitIdentical) {
  for (auto v : {Variant::full, Variant::item_plus_key}) {
    auto c = small_config(v);
    c.lr = 0.0;
    Trainer t(small_log(), c);
    const auto before = snapshot(t);
    const auto result = t.fit();
    EXPECT_EQ(result.epochs.size(), 1u);
    EXPECT_EQ(snapshot(t), before);
  }
}

TEST(TrainStep, BceIsLn2AtHalf) {
  auto c = small_config();
  c.mixer.max_len = 0;
  Trainer t(small_log(), c);
  t.mixer().head_w2.value.zero();
  t.mixer().head_b2.value.zero();
  Example ex;
  ex.target = t.train_examples().front().target;
  ex.label = 1;
  ad::GradStore g;
  const std::vector<Example> batch{ex};
  EXPECT_NEAR(t.accumulate(batch, g).bce, std::log(2.0), 1e-12);
}

TEST(TrainStep, ReportsPreStepLossAndMovesParameters) {
  Trainer t(small_log(), small_config());
  const std::vector<Example> batch(t.train_examples().begin(), t.train_examples().begin() + 16);
  ad::GradStore g;
  const auto pre = t.accumulate(batch, g);
  const auto before = snapshot(t);
  const auto step = t.train_step(batch);
  EXPECT_DOUBLE_EQ(step.total(), pre.total());
  EXPECT_NE(snapshot(t), before);
  EXPECT_GE(step.bce, 0);
  EXPECT_GE(step.vq, 0);
  EXPECT_GE(step.align, 0);
  EXPECT_GE(step.token, 0);
}

TEST(TrainStep, DeterministicSingleThreaded) {
  auto run = [] {
    Trainer t(small_log(), small_config());
    std::vector<double> losses;
    for (int s = 0; s < 4; ++s) {
      const std::vector<Example> batch(t.train_examples().begin() + 16 * s, t.train_examples().begin() + 16 * (s + 1));
      losses.push_back(t.train_step(batch).total());
    }
    return losses;
  };
  EXPECT_EQ(run(), run());
}

TEST(TrainStep, ShardedGradientsMatchSingleThread) {
  auto c1 = small_config();
  auto c3 = c1;
  c3.threads = 3;
  Trainer a(small_log(), c1), b(small_log(), c3);
  const std::vector<Example> batch(a.train_examples().begin(), a.train_examples().begin() + 20);
  ad::GradStore ga, gb;
  const auto la = a.accumulate(batch, ga);
  const auto lb = b.accumulate(batch, gb);
  EXPECT_NEAR(la.total(), lb.total(), 1e-12);
  const auto pa = a.trainable_parameters();
  const auto pb = b.trainable_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const Matrix* x = ga.find(*pa[i]);
    const Matrix* y = gb.find(*pb[i]);
    ASSERT_EQ(x == nullptr, y == nullptr) << pa[i]->name;
    if (x == nullptr) continue;
    for (std::size_t j = 0; j < x->size(); ++j) EXPECT_NEAR(x->data[j], y->data[j], 1e-10) << pa[i]->name;
  }
}

TEST(Losses, AlignmentGradientMatchesClosedForm) {
  // The align term's W_res gradient is 2 f^T (f W_res - e) per slot.
  auto c0 = small_config();
  c0.gamma = 0.0;
  auto c1 = c0;
  c1.gamma = 1.0;
  Trainer a(small_log(), c0), b(small_log(), c1);
  const std::vector<Example> batch{with_history(a)};
  ad::GradStore ga, gb;
  a.accumulate(batch, ga);
  b.accumulate(batch, gb);
  const auto raw = embed_fields(b.tokenizer(), *batch[0].target);
  std::vector<std::vector<double>> z;
  for (int k = 0; k < b.tokenizer().num_slots(); ++k) z.push_back(project(b.tokenizer(), k, raw[k]));
  const auto trace = quantize(b.tokenizer(), z);
  const auto tgt = embed_target(b.mixer(), raw);
  double direct = 0;
  for (int k = 0; k < b.tokenizer().num_slots(); ++k) {
    const auto& W = b.mixer().w_res[k];
    const Matrix* x = ga.find(a.mixer().w_res[k]);
    const Matrix* y = gb.find(W);
    ASSERT_NE(x, nullptr);
    ASSERT_NE(y, nullptr);
    for (int i = 0; i < W.value.rows; ++i)
      for (int j = 0; j < W.value.cols; ++j) {
        const double expect = 2.0 * raw[k][i] * (tgt(k, j) - trace.reconstruction[k][j]);
        EXPECT_NEAR((*y)(i, j) - (*x)(i, j), expect, 1e-9);
      }
    for (int j = 0; j < W.value.cols; ++j)
      direct += (tgt(k, j) - trace.reconstruction[k][j]) * (tgt(k, j) - trace.reconstruction[k][j]);
  }
  EXPECT_NEAR(alignment_loss(b.tokenizer(), b.mixer(), *batch[0].target), direct, 1e-12);
}

TEST(Losses, AlignmentNeverReachesCodebooks) {
  auto c = small_config();
  c.beta = 0.0;
  c.token_weight = 0.0;
  c.gamma = 1.0;
  c.codebook_aux_route = false;
  c.codebook_lookup_route = false;
  Trainer t(small_log(), c);
  Example ex = with_history(t);
  ad::GradStore g;
  t.accumulate(std::vector<Example>{ex}, g);
  for (const auto& levels : t.tokenizer().codebooks)
    for (const auto& cb : levels)
      if (const Matrix* m = g.find(cb))
        for (double x : m->data) EXPECT_EQ(x, 0.0);
}

TEST(Losses, BetaZeroRemovesCodebookLossGradients) {
  auto c = small_config();
  c.beta = 0.0;
  c.token_weight = 0.0;
  c.codebook_aux_route = false;
  c.codebook_lookup_route = false;
  Trainer t(small_log(), c);
  ad::GradStore g;
  t.accumulate(std::vector<Example>{with_history(t)}, g);
  for (const auto& levels : t.tokenizer().codebooks)
    for (const auto& cb : levels)
      if (const Matrix* m = g.find(cb))
        for (double x : m->data) EXPECT_EQ(x, 0.0);
  // With beta back on, codebooks receive gradient again.
  c.beta = 1.0;
  Trainer u(small_log(), c);
  ad::GradStore h;
  u.accumulate(std::vector<Example>{with_history(u)}, h);
  double mass = 0;
  for (const auto& levels : u.tokenizer().codebooks)
    for (const auto& cb : levels)
      if (const Matrix* m = h.find(cb))
        for (double x : m->data) mass += std::abs(x);
  EXPECT_GT(mass, 0.0);
}

TEST(Adam, WeightDecayExemptions) {
  TrainConfig c;
  c.lr = 0.1;
  c.weight_decay = 0.5;
  Adam adam(c);
  ad::Param w{"w", Matrix(1, 1, 2.0), true};
  ad::Param b{"b", Matrix(1, 1, 2.0), false};
  ad::GradStore g;
  g.at(w);
  g.at(b);  // zero gradients
  adam.step({&w, &b}, g);
  EXPECT_LT(w.value(0, 0), 2.0);
  EXPECT_EQ(b.value(0, 0), 2.0);
}

TEST(Adam, BiasCorrectedFirstStep) {
  TrainConfig c;
  c.lr = 0.01;
  c.weight_decay = 0.0;
  Adam adam(c);
  ad::Param w{"w", Matrix(1, 2, 1.0)};
  ad::GradStore g;
  g.at(w) = Matrix::from_rows(1, 2, {3.0, -0.5});
  adam.step({&w}, g);
  // First bias-corrected step is lr * g / (|g| + eps).
  EXPECT_NEAR(w.value(0, 0), 1.0 - 0.01 * 3.0 / (3.0 + 1e-8), 1e-12);
  EXPECT_NEAR(w.value(0, 1), 1.0 + 0.01 * 0.5 / (0.5 + 1e-8), 1e-12);
}

TEST(Variants, NonQuantizedHaveNoTokenizerLosses) {
  for (auto v : {Variant::item_id_only, Variant::item_plus_key, Variant::dense_raw}) {
    Trainer t(small_log(), small_config(v));
    ad::GradStore g;
    const auto l = t.accumulate(std::vector<Example>{with_history(t)}, g);
    EXPECT_EQ(l.vq, 0.0);
    EXPECT_EQ(l.align, 0.0);
    EXPECT_EQ(l.token, 0.0);
    for (const auto& levels : t.tokenizer().codebooks)
      for (const auto& cb : levels) EXPECT_EQ(g.find(cb), nullptr);
  }
  Trainer t(small_log(), small_config(Variant::item_id_only));
  for (const auto& b : t.mixer().blocks) EXPECT_FALSE(b.token_mixer);
}

TEST(Fit, RunDirectoryLayoutAndCodebookInvariants) {
  const auto dir = std::filesystem::temp_directory_path() / "sif_test_fit";
  std::filesystem::remove_all(dir);
  auto c = small_config();
  c.max_epochs = 2;
  Trainer t(small_log(), c);
  const auto r = t.fit(dir);
  for (const char* f : {"config.json", "schema.json", "metrics.csv", "tokenizer.sifc", "mixer.sifm",
                        "tokenizer_epoch0.sifc", "mixer_epoch1.sifm"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  EXPECT_EQ(r.epochs.size(), 2u);
  EXPECT_GE(r.best_epoch, 0);
  std::ifstream m(dir / "metrics.csv");
  std::string header;
  std::getline(m, header);
  EXPECT_EQ(header, "kind,epoch,step,bce,vq,align,token,total,val_auc,val_gauc");
  const auto cfg = load_train_config(dir / "config.json");
  EXPECT_EQ(cfg.max_epochs, 2);
  for (const auto& levels : t.tokenizer().codebooks)
    for (const auto& cb : levels) {
      for (int j = 0; j < cb.value.cols; ++j) EXPECT_EQ(cb.value(0, j), 0.0);
      for (double x : cb.value.data) EXPECT_TRUE(std::isfinite(x));
    }
}

TEST(Fit, TrainingLossDecreasesOverFirstEpochs) {
  auto c = small_config();
  c.max_epochs = 3;
  c.max_train_examples = 2000;
  c.batch_size = 64;
  Trainer t(small_log(), c);
  const auto r = t.fit();
  ASSERT_EQ(r.epochs.size(), 3u);
  EXPECT_LT(r.epochs[1].mean_loss.total(), r.epochs[0].mean_loss.total());
  EXPECT_LT(r.epochs[2].mean_loss.total(), r.epochs[1].mean_loss.total());
}

TEST(Config, StrictParsingAndRoundTrip) {
  TrainConfig c;
  c.lr = 0.005;
  c.mixer.variant = Variant::pooled;
  c.mixer.key_fields = {"a", "b"};
  const auto back = parse_train_config(train_config_to_json(c));
  EXPECT_EQ(back.lr, 0.005);
  EXPECT_EQ(back.mixer.variant, Variant::pooled);
  EXPECT_EQ(back.mixer.key_fields, c.mixer.key_fields);
  EXPECT_THROW(parse_train_config(R"({"learning_rate": 1})"), ConfigError);
  EXPECT_THROW(parse_train_config(R"({"variant": "bogus"})"), ConfigError);
  EXPECT_THROW(parse_train_config("{"), ConfigError);
  const TrainConfig d;
  EXPECT_EQ(d.lr, 1e-3);
  EXPECT_EQ(d.adam_beta1, 0.9);
  EXPECT_EQ(d.adam_beta2, 0.999);
  EXPECT_EQ(d.weight_decay, 1e-5);
  EXPECT_EQ(d.beta, 1.0);
  EXPECT_EQ(d.gamma, 0.25);
  EXPECT_EQ(d.mixer.blocks, 4);
  EXPECT_EQ(d.mixer.heads, 8);
}

TEST(Gradcheck, EveryVariantAndMixerOnly) {
  for (auto v : all_variants()) {
    GradcheckConfig c;
    c.variant = v;
    const auto r = gradcheck(c);
    EXPECT_TRUE(r.passed()) << variant_name(v) << " " << r.max_rel_error();
  }
  GradcheckConfig mo;
  mo.mixer_only = true;
  EXPECT_TRUE(gradcheck(mo).passed());
}

TEST(Gradcheck, LargeStepFlagsNonSmoothGroups) {
  GradcheckConfig c;
  c.step = 0.5;
  const auto r = gradcheck(c);
  bool any = false;
  for (const auto& g : r.groups) any = any || g.non_smooth;
  EXPECT_TRUE(any);
}

TEST(Sweep, SingleValueGivesOneRowAndRecordsFailures) {
  GeneratorConfig data;
  data.n_users = 80;
  data.n_items = 40;
  data.n_impressions = 2000;
  auto c = small_config();
  c.max_train_examples = 64;
  c.max_eval_examples = 100;
  const int one[] = {4};
  const auto rows = sweep(SweepAxis::L, one, desk_schema(), data, c);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_TRUE(rows[0].ok) << rows[0].error;
  EXPECT_GT(rows[0].flops, 0u);
  const int bad[] = {0, 2};
  const auto dir = std::filesystem::temp_directory_path() / "sif_test_sweep";
  const auto r2 = sweep(SweepAxis::B, bad, desk_schema(), data, c, dir);
  ASSERT_EQ(r2.size(), 2u);
  EXPECT_FALSE(r2[0].ok);
  EXPECT_TRUE(r2[1].ok);
  EXPECT_TRUE(std::filesystem::exists(dir / "sweep.csv"));
}
