#include <algorithm>
#include <cmath>
#include <random>

#include "sif/training.hpp"

namespace sif {

namespace {

FeatureSchema tiny_schema(const GradcheckConfig& c) {
  // One slot per group at B = 2; the item group carries a numeric field so
  // both embedder kinds are covered.
  FeatureSchema s;
  s.granularity = 2;
  s.sub_token_dim = c.d0;
  s.rvq_levels = c.levels;
  s.codebook_size = c.codebook_size;
  const char* groups[] = {"user", "item", "ctx", "cross"};
  for (int gi = 0; gi < c.slots; ++gi) {
    const std::string g = gi < 4 ? groups[gi] : "extra" + std::to_string(gi);
    const int n = gi < 4 ? 2 : 1;
    for (int f = 0; f < n; ++f) {
      FieldSpec spec;
      spec.name = g + "_f" + std::to_string(f);
      spec.group = g;
      spec.embed_dim = 2;
      if (g == "item" && f == 1) {
        spec.kind = FieldKind::numeric;
      } else {
        spec.cardinality = 4;
      }
      s.fields.push_back(spec);
    }
  }
  s.validate();
  return s;
}

RawSample random_sample(const FeatureSchema& s, std::uint64_t id, std::mt19937_64& rng) {
  RawSample r;
  r.sample_id = id;
  r.user_id = 0;
  r.item_id = id % 3;
  r.timestamp = id;
  r.label = static_cast<std::uint8_t>(id % 2);
  for (const auto& f : s.fields) {
    FieldValue v;
    if (f.kind == FieldKind::categorical)
      v.category = static_cast<std::uint32_t>(std::uniform_int_distribution<std::uint32_t>(0, f.cardinality - 1)(rng));
    else
      v.numeric = static_cast<float>(std::normal_distribution<double>(0.0, 1.0)(rng));
    r.values.push_back(v);
  }
  return r;
}

ad::Var total_loss(ad::Graph& g, const TokenizerState& tok, const MixerState& m, const Example& ex, bool mixer_only) {
  const TrainConfig defaults;
  const auto eg = build_example(g, tok, m, ex);
  std::vector<std::pair<ad::Var, double>> terms{{eg.bce, 1.0}};
  if (!mixer_only) {
    if (eg.vq.id >= 0) terms.emplace_back(eg.vq, defaults.beta);
    if (eg.align.id >= 0) terms.emplace_back(eg.align, defaults.gamma);
    if (eg.token.id >= 0) terms.emplace_back(eg.token, defaults.token_weight);
  }
  return g.weighted_sum(terms);
}

}  // namespace

double GradcheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& g : groups)
    if (!g.non_smooth) m = std::max(m, g.max_rel_error);
  return m;
}

bool GradcheckReport::passed(double tol) const { return !groups.empty() && max_rel_error() <= tol; }

GradcheckReport gradcheck(const GradcheckConfig& c) {
  const auto schema = tiny_schema(c);
  TokenizerState tok(schema, c.seed);
  MixerConfig mc;
  mc.variant = c.variant;
  mc.blocks = c.blocks;
  mc.heads = c.heads;
  mc.max_len = c.L;
  mc.n_items = 3;
  MixerState mixer(schema, mc, c.seed + 1);
  std::mt19937_64 rng(c.seed * 31 + 7);
  // Short codebook rows so most levels pick a non-zero code, and no bias at
  // exactly zero so that no ReLU input sits on its kink.
  for (auto& levels : tok.codebooks)
    for (auto& cb : levels)
      for (auto& x : cb.value.data) x *= 0.3;
  std::uniform_real_distribution<double> small(-0.1, 0.1);
  for (auto* p : tok.parameters())
    if (std::all_of(p->value.data.begin(), p->value.data.end(), [](double x) { return x == 0.0; }))
      for (auto& x : p->value.data) x = small(rng);
  for (auto* p : mixer.parameters())
    if (std::all_of(p->value.data.begin(), p->value.data.end(), [](double x) { return x == 0.0; }))
      for (auto& x : p->value.data) x = small(rng);

  std::vector<RawSample> samples;
  for (int i = 0; i < c.L; ++i) samples.push_back(random_sample(schema, static_cast<std::uint64_t>(i + 1), rng));
  RawSample target = random_sample(schema, 100, rng);
  target.label = 1;
  Example ex;
  ex.target = &target;
  ex.label = 1;
  for (int i = c.L - 1; i >= 1; --i) ex.history.push_back(&samples[i]);

  std::vector<ad::Param*> params = mixer.parameters();
  if (!c.mixer_only) {
    auto tp = tok.parameters();
    params.insert(params.begin(), tp.begin(), tp.end());
  } else {
    for (auto* p : tok.parameters()) p->trainable = false;
  }

  ad::FreezeTape tape;
  tape.record();
  ad::GradStore grads;
  {
    ad::Graph g(&grads, &tape);
    g.backward(total_loss(g, tok, mixer, ex, c.mixer_only));
  }

  GradcheckReport report;
  for (auto* p : params) {
    GradcheckGroup group;
    group.name = p->name;
    const Matrix* analytic = grads.find(*p);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value.data[i];
      p->value.data[i] = orig + c.step;
      tape.replay();
      double up;
      {
        ad::Graph g(nullptr, &tape);
        up = g.scalar(total_loss(g, tok, mixer, ex, c.mixer_only));
      }
      bool flip = tape.index_flip();
      p->value.data[i] = orig - c.step;
      tape.replay();
      double down;
      {
        ad::Graph g(nullptr, &tape);
        down = g.scalar(total_loss(g, tok, mixer, ex, c.mixer_only));
      }
      flip = flip || tape.index_flip();
      p->value.data[i] = orig;
      if (flip) {
        group.non_smooth = true;
        continue;
      }
      const double numeric = (up - down) / (2.0 * c.step);
      const double a = analytic != nullptr ? analytic->data[i] : 0.0;
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      group.max_rel_error = std::max(group.max_rel_error, rel);
      ++group.checked;
    }
    report.groups.push_back(group);
  }
  tape.off();
  return report;
}

}  // namespace sif
