#include "sif/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "sif/binary_io.hpp"
#include "sif/error.hpp"

namespace sif {

namespace {

constexpr std::uint16_t kLogVersion = 1;
constexpr std::uint64_t kHorizon = 1'000'000'000ULL;

// Generator constants. Frozen: the Bayes-gap and oracle-LR tests depend on them.
constexpr double kBias = -1.2;
constexpr double kNoiseSd = 0.3;
constexpr double kHistoryWeight = 2.5;
constexpr int kSignalWindow = 12;
constexpr double kHabitConcentration = 0.2;
constexpr double kCategoricalCoefSd = 0.35;
constexpr double kNumericCoefSd = 0.3;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

int ctx_state_of(const PlantedParams& p, const RawSample& s) {
  int state = 0;
  for (std::size_t k = 0; k < p.signal_ctx_fields.size(); ++k)
    state = state * p.signal_ctx_cardinality[k] + static_cast<int>(s.values[p.signal_ctx_fields[k]].category);
  return state;
}

void split_ctx_state(const PlantedParams& p, int state, RawSample& s) {
  for (std::size_t k = p.signal_ctx_fields.size(); k-- > 0;) {
    s.values[p.signal_ctx_fields[k]].category = static_cast<std::uint32_t>(state % p.signal_ctx_cardinality[k]);
    state /= p.signal_ctx_cardinality[k];
  }
}

std::uint64_t user_impressions(const GeneratorConfig& c, std::uint64_t user) {
  return c.n_impressions / c.n_users + (user < c.n_impressions % c.n_users ? 1 : 0);
}

std::uint64_t user_offset(const GeneratorConfig& c, std::uint64_t user) {
  const auto base = c.n_impressions / c.n_users;
  const auto rem = c.n_impressions % c.n_users;
  return user * base + std::min(user, rem);
}

}  // namespace

void check_sample(const FeatureSchema& schema, const RawSample& s) {
  if (s.values.size() != schema.fields.size())
    throw DataError("sample " + std::to_string(s.sample_id) + " has " + std::to_string(s.values.size()) +
                    " values, schema has " + std::to_string(schema.fields.size()) + " fields");
  for (std::size_t f = 0; f < schema.fields.size(); ++f) {
    const auto& spec = schema.fields[f];
    if (spec.kind == FieldKind::categorical && s.values[f].category >= spec.cardinality)
      throw DataError("sample " + std::to_string(s.sample_id) + ": value " + std::to_string(s.values[f].category) +
                      " out of range for field '" + spec.name + "'");
  }
  if (s.label > 1) throw DataError("sample " + std::to_string(s.sample_id) + ": label must be 0 or 1");
}

PlantedParams make_planted_params(const FeatureSchema& schema, std::uint64_t n_items, std::uint64_t seed) {
  schema.validate();
  PlantedParams p;
  p.bias = kBias;
  p.noise_sd = kNoiseSd;
  p.history_weight = kHistoryWeight;
  p.signal_window = kSignalWindow;

  const auto n_fields = schema.fields.size();
  for (std::size_t f = 0; f < n_fields; ++f) {
    const auto& spec = schema.fields[f];
    if (spec.name == "item_id" && spec.kind == FieldKind::categorical) p.item_id_field = static_cast<int>(f);
  }
  for (std::size_t f = 0; f < n_fields; ++f) {
    const auto& spec = schema.fields[f];
    if (spec.kind != FieldKind::categorical || static_cast<int>(f) == p.item_id_field) continue;
    if (spec.group == "item" && p.category_field < 0) p.category_field = static_cast<int>(f);
    if (spec.group == "ctx" && p.signal_ctx_fields.size() < 2) p.signal_ctx_fields.push_back(static_cast<int>(f));
  }
  if (p.item_id_field >= 0 && n_items > schema.fields[p.item_id_field].cardinality)
    throw DataError("n_items exceeds the item_id field cardinality");
  p.ctx_states = 1;
  for (int f : p.signal_ctx_fields) {
    p.signal_ctx_cardinality.push_back(static_cast<int>(schema.fields[f].cardinality));
    p.ctx_states *= p.signal_ctx_cardinality.back();
  }

  std::mt19937_64 rng(splitmix64(seed));
  std::normal_distribution<double> normal(0.0, 1.0);

  p.categorical_coef.resize(n_fields);
  p.numeric_coef.assign(n_fields, 0.0);
  for (std::size_t f = 0; f < n_fields; ++f) {
    const auto& spec = schema.fields[f];
    if (spec.kind == FieldKind::categorical) {
      p.categorical_coef[f].resize(spec.cardinality);
      for (auto& c : p.categorical_coef[f]) c = kCategoricalCoefSd * normal(rng);
      // Identity carries no direct effect; items matter through their attributes.
      if (static_cast<int>(f) == p.item_id_field) std::fill(p.categorical_coef[f].begin(), p.categorical_coef[f].end(), 0.0);
    } else {
      p.numeric_coef[f] = kNumericCoefSd * normal(rng);
    }
  }

  std::size_t n_cross = 0;
  for (const auto& spec : schema.fields) n_cross += (spec.group == "cross");
  p.item_values.resize(n_items);
  p.item_latent.resize(n_items);
  for (std::uint64_t i = 0; i < n_items; ++i) {
    auto& vals = p.item_values[i];
    vals.resize(n_fields);
    for (std::size_t f = 0; f < n_fields; ++f) {
      const auto& spec = schema.fields[f];
      if (spec.group != "item") continue;
      if (spec.kind == FieldKind::categorical) {
        vals[f].category = static_cast<std::uint32_t>(rng() % spec.cardinality);
      } else {
        vals[f].numeric = static_cast<float>(normal(rng));
      }
    }
    p.item_latent[i].resize(n_cross);
    for (auto& v : p.item_latent[i]) v = normal(rng);
  }

  if (p.category_field >= 0 && !p.signal_ctx_fields.empty()) {
    const int n_cat = static_cast<int>(schema.fields[p.category_field].cardinality);
    p.interaction = Matrix(n_cat, p.ctx_states);
    for (int c = 0; c < n_cat; ++c) {
      double mean = 0.0;
      for (int s = 0; s < p.ctx_states; ++s) mean += (p.interaction(c, s) = normal(rng));
      mean /= p.ctx_states;
      for (int s = 0; s < p.ctx_states; ++s) p.interaction(c, s) -= mean;
    }
  }
  return p;
}

double current_logit(const PlantedParams& p, const FeatureSchema& schema, const RawSample& s) {
  double eta = p.bias;
  for (std::size_t f = 0; f < schema.fields.size(); ++f) {
    if (schema.fields[f].kind == FieldKind::categorical) {
      eta += p.categorical_coef[f][s.values[f].category];
    } else {
      eta += p.numeric_coef[f] * s.values[f].numeric;
    }
  }
  return eta;
}

double history_signal(const PlantedParams& p, const RawSample& target,
                      std::span<const RawSample* const> positives_oldest_first) {
  if (p.interaction.rows == 0 || positives_oldest_first.empty()) return 0.0;
  const auto n = positives_oldest_first.size();
  const auto window = std::min<std::size_t>(n, static_cast<std::size_t>(p.signal_window));
  const int cat = static_cast<int>(target.values[p.category_field].category);
  double psi = 0.0;
  for (std::size_t i = n - window; i < n; ++i) psi += p.interaction(cat, ctx_state_of(p, *positives_oldest_first[i]));
  return psi / static_cast<double>(window);
}

std::vector<RawSample> generate_user_log(const FeatureSchema& schema, const GeneratorConfig& config,
                                         const PlantedParams& planted, std::uint64_t user_id) {
  const auto n = user_impressions(config, user_id);
  const auto first_id = user_offset(config, user_id);
  const auto n_fields = schema.fields.size();

  std::mt19937_64 rng(splitmix64(config.seed ^ splitmix64(user_id + 1)));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Per-user constants: profile fields, cross latents and context habits.
  std::vector<FieldValue> profile(n_fields);
  for (std::size_t f = 0; f < n_fields; ++f) {
    const auto& spec = schema.fields[f];
    if (spec.group != "user") continue;
    if (spec.kind == FieldKind::categorical) {
      profile[f].category = static_cast<std::uint32_t>(rng() % spec.cardinality);
    } else {
      profile[f].numeric = static_cast<float>(normal(rng));
    }
  }
  std::vector<int> cross_fields;
  for (std::size_t f = 0; f < n_fields; ++f)
    if (schema.fields[f].group == "cross") cross_fields.push_back(static_cast<int>(f));
  std::vector<double> latent(cross_fields.size());
  for (auto& v : latent) v = normal(rng);

  std::vector<double> habit(static_cast<std::size_t>(planted.ctx_states));
  {
    std::gamma_distribution<double> gamma(kHabitConcentration, 1.0);
    double total = 0.0;
    for (auto& h : habit) total += (h = gamma(rng) + 1e-12);
    for (auto& h : habit) h /= total;
  }
  std::discrete_distribution<int> habit_draw(habit.begin(), habit.end());

  std::vector<std::uint64_t> times(n);
  for (auto& t : times) t = rng() % kHorizon;
  std::sort(times.begin(), times.end());
  for (std::size_t i = 1; i < n; ++i) times[i] = std::max(times[i], times[i - 1] + 1);

  std::vector<RawSample> out;
  out.reserve(n);
  std::vector<const RawSample*> positives;
  for (std::uint64_t i = 0; i < n; ++i) {
    RawSample s;
    s.sample_id = first_id + i;
    s.user_id = user_id;
    s.timestamp = times[i];
    s.item_id = config.n_items == 0 ? 0 : rng() % config.n_items;
    s.values.assign(n_fields, FieldValue{});
    const auto& item_vals = planted.item_values[s.item_id];
    std::size_t cross_k = 0;
    std::uint32_t first_profile_cat = 0;
    for (std::size_t f = 0; f < n_fields; ++f) {
      if (schema.fields[f].group == "user" && schema.fields[f].kind == FieldKind::categorical) {
        first_profile_cat = profile[f].category;
        break;
      }
    }
    const std::uint32_t item_cat =
        planted.category_field >= 0 ? item_vals[planted.category_field].category : 0;
    for (std::size_t f = 0; f < n_fields; ++f) {
      const auto& spec = schema.fields[f];
      auto& v = s.values[f];
      if (static_cast<int>(f) == planted.item_id_field) {
        v.category = static_cast<std::uint32_t>(s.item_id);
      } else if (spec.group == "user") {
        v = profile[f];
      } else if (spec.group == "item") {
        v = item_vals[f];
      } else if (spec.group == "cross") {
        if (spec.kind == FieldKind::categorical) {
          v.category = (first_profile_cat * 31u + item_cat * 7u + static_cast<std::uint32_t>(rng() % 2)) % spec.cardinality;
        } else {
          v.numeric = static_cast<float>(latent[cross_k] * planted.item_latent[s.item_id][cross_k] + 0.5 * normal(rng));
        }
        ++cross_k;
      } else if (spec.kind == FieldKind::categorical) {
        v.category = static_cast<std::uint32_t>(rng() % spec.cardinality);
      } else {
        v.numeric = static_cast<float>(normal(rng));
      }
    }
    if (!planted.signal_ctx_fields.empty()) split_ctx_state(planted, habit_draw(rng), s);

    const double eta = current_logit(planted, schema, s) +
                       config.signal_strength * planted.history_weight * history_signal(planted, s, positives) +
                       planted.noise_sd * normal(rng);
    s.label = unit(rng) < sigmoid(eta) ? 1 : 0;
    out.push_back(std::move(s));  // capacity reserved: pointers stay valid
    if (out.back().label == 1) positives.push_back(&out.back());
  }
  return out;
}

ImpressionLog generate_log(const FeatureSchema& schema, const GeneratorConfig& config) {
  if (config.n_users == 0 || config.n_items == 0 || config.n_impressions == 0)
    throw DataError("n_users, n_items and n_impressions must be >= 1");
  const auto planted = make_planted_params(schema, config.n_items, config.seed);
  std::vector<RawSample> samples;
  samples.reserve(config.n_impressions);
  for (std::uint64_t u = 0; u < config.n_users; ++u) {
    auto part = generate_user_log(schema, config, planted, u);
    std::move(part.begin(), part.end(), std::back_inserter(samples));
  }
  return ImpressionLog(schema, config, std::move(samples));
}

ImpressionLog::ImpressionLog(FeatureSchema schema, GeneratorConfig config, std::vector<RawSample> samples)
    : schema_(std::move(schema)), config_(config), samples_(std::move(samples)) {
  planted_ = make_planted_params(schema_, config_.n_items, config_.seed);
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    const auto& s = samples_[i];
    check_sample(schema_, s);
    if (i > 0) {
      const auto& prev = samples_[i - 1];
      if (prev.user_id > s.user_id || (prev.user_id == s.user_id && prev.timestamp >= s.timestamp))
        throw DataError("log must be ordered by (user_id, timestamp) with strictly increasing timestamps per user");
    }
    if (!by_id_.emplace(s.sample_id, i).second) throw DataError("duplicate sample_id " + std::to_string(s.sample_id));
    if (s.label == 1) user_positives_[s.user_id].push_back(i);
  }
  std::vector<std::uint64_t> ts;
  ts.reserve(samples_.size());
  for (const auto& s : samples_) ts.push_back(s.timestamp);
  std::sort(ts.begin(), ts.end());
  if (!ts.empty()) {
    split_.val_begin = ts[ts.size() * 8 / 10];
    split_.test_begin = ts[ts.size() * 9 / 10];
  }
}

SplitPart ImpressionLog::part_of(const RawSample& s) const {
  if (s.timestamp < split_.val_begin) return SplitPart::train;
  if (s.timestamp < split_.test_begin) return SplitPart::val;
  return SplitPart::test;
}

std::vector<std::size_t> ImpressionLog::indices_of(SplitPart part) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples_.size(); ++i)
    if (part_of(samples_[i]) == part) out.push_back(i);
  return out;
}

std::size_t ImpressionLog::index_of(std::uint64_t sample_id) const {
  auto it = by_id_.find(sample_id);
  if (it == by_id_.end()) throw DataError("unknown sample_id " + std::to_string(sample_id));
  return it->second;
}

BehaviorSequence ImpressionLog::behavior_sequence(std::uint64_t sample_id, int L) const {
  const auto& query = samples_[index_of(sample_id)];
  BehaviorSequence seq;
  seq.max_len = L;
  auto it = user_positives_.find(query.user_id);
  if (it == user_positives_.end() || L <= 0) return seq;
  const auto& pos = it->second;
  const auto end = std::partition_point(pos.begin(), pos.end(),
                                        [&](std::size_t k) { return samples_[k].timestamp < query.timestamp; });
  const auto count = std::min<std::ptrdiff_t>(end - pos.begin(), L);
  for (auto k = end - count; k != end; ++k) seq.samples.push_back(&samples_[*k]);
  seq.valid_len = static_cast<int>(count);
  return seq;
}

std::vector<const RawSample*> ImpressionLog::positives() const {
  std::vector<const RawSample*> out;
  for (const auto& s : samples_)
    if (s.label == 1) out.push_back(&s);
  return out;
}

std::vector<double> bayes_scores(const ImpressionLog& log, std::span<const std::size_t> indices,
                                 bool item_only_history) {
  const auto& p = log.planted();
  const auto& samples = log.samples();
  const double w = log.config().signal_strength * p.history_weight;
  auto psi_of = [&](std::size_t i) {
    const auto seq = log.behavior_sequence(samples[i].sample_id, p.signal_window);
    return history_signal(p, samples[i], seq.samples);
  };
  std::vector<double> cat_mean;
  if (item_only_history && p.category_field >= 0) {
    const auto n_cat = log.schema().fields[p.category_field].cardinality;
    std::vector<double> sum(n_cat, 0.0), cnt(n_cat, 0.0);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto c = samples[i].values[p.category_field].category;
      sum[c] += psi_of(i);
      cnt[c] += 1.0;
    }
    cat_mean.resize(n_cat);
    for (std::size_t c = 0; c < n_cat; ++c) cat_mean[c] = cnt[c] > 0 ? sum[c] / cnt[c] : 0.0;
  }
  std::vector<double> out;
  out.reserve(indices.size());
  for (auto i : indices) {
    double psi = 0.0;
    if (item_only_history) {
      if (!cat_mean.empty()) psi = cat_mean[samples[i].values[p.category_field].category];
    } else {
      psi = psi_of(i);
    }
    out.push_back(current_logit(p, log.schema(), samples[i]) + w * psi);
  }
  return out;
}

void write_log(const ImpressionLog& log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write log file " + path.string());
  io::Writer w(out);
  const auto& schema = log.schema();
  w.put_magic("SIFL");
  w.put(kLogVersion);
  w.put(schema.hash());
  w.put(static_cast<std::uint64_t>(log.samples().size()));
  w.put(log.generator_seed());
  const auto record_len = static_cast<std::uint32_t>(8 * 4 + 1 + 4 * schema.fields.size());
  for (const auto& s : log.samples()) {
    w.put(record_len);
    w.put(s.sample_id);
    w.put(s.user_id);
    w.put(s.item_id);
    w.put(s.timestamp);
    w.put(s.label);
    for (std::size_t f = 0; f < schema.fields.size(); ++f) {
      if (schema.fields[f].kind == FieldKind::categorical) {
        w.put(s.values[f].category);
      } else {
        w.put_f32(s.values[f].numeric);
      }
    }
  }
  // Generator arguments and split boundaries.
  const auto& c = log.config();
  w.put_magic("SIFX");
  w.put(c.n_users);
  w.put(c.n_items);
  w.put(c.n_impressions);
  w.put_f64(c.signal_strength);
  w.put(log.split().val_begin);
  w.put(log.split().test_begin);
  if (!w.ok()) throw FormatError("write failed for " + path.string());
}

ImpressionLog read_log(const std::filesystem::path& path, const FeatureSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open log file " + path.string());
  io::Reader r(in, path.string());
  r.expect_magic("SIFL");
  const auto version = r.get<std::uint16_t>();
  if (version != kLogVersion) throw FormatError("unsupported log version " + std::to_string(version));
  const auto hash = r.get<std::uint64_t>();
  if (hash != schema.hash()) throw FormatError("log schema hash does not match the given schema");
  const auto n = r.get<std::uint64_t>();
  GeneratorConfig config;
  config.seed = r.get<std::uint64_t>();
  std::vector<RawSample> samples;
  samples.reserve(n);
  std::uint32_t expected_len = 8 * 4 + 1 + 4 * static_cast<std::uint32_t>(schema.fields.size());
  for (std::uint64_t i = 0; i < n; ++i) {
    if (r.get<std::uint32_t>() != expected_len) throw FormatError("record length mismatch in " + path.string());
    RawSample s;
    s.sample_id = r.get<std::uint64_t>();
    s.user_id = r.get<std::uint64_t>();
    s.item_id = r.get<std::uint64_t>();
    s.timestamp = r.get<std::uint64_t>();
    s.label = r.get<std::uint8_t>();
    s.values.resize(schema.fields.size());
    for (std::size_t f = 0; f < schema.fields.size(); ++f) {
      if (schema.fields[f].kind == FieldKind::categorical) {
        s.values[f].category = r.get<std::uint32_t>();
      } else {
        s.values[f].numeric = r.get_f32();
      }
    }
    samples.push_back(std::move(s));
  }
  r.expect_magic("SIFX");
  config.n_users = r.get<std::uint64_t>();
  config.n_items = r.get<std::uint64_t>();
  config.n_impressions = r.get<std::uint64_t>();
  config.signal_strength = r.get_f64();
  TemporalSplit split;
  split.val_begin = r.get<std::uint64_t>();
  split.test_begin = r.get<std::uint64_t>();
  ImpressionLog log(schema, config, std::move(samples));
  if (log.split().val_begin != split.val_begin || log.split().test_begin != split.test_begin)
    throw FormatError("stored split boundaries disagree with the records");
  return log;
}

}  // namespace sif
