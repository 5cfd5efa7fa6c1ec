#include "sif/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <thread>

#include "sif/error.hpp"

namespace sif {

namespace {

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

bool valid(ad::Var v) { return v.id >= 0; }

double value_or_zero(const ad::Graph& g, ad::Var v) { return valid(v) ? g.scalar(v) : 0.0; }

void check_finite(double v, const char* component) {
  if (!std::isfinite(v)) throw DivergenceError(component, v);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::vector<Example> make_examples(const ImpressionLog& log, std::span<const std::size_t> indices, int L) {
  std::vector<Example> out;
  out.reserve(indices.size());
  for (auto i : indices) {
    const RawSample& s = log.samples()[i];
    Example ex;
    ex.target = &s;
    ex.label = s.label;
    const auto seq = log.behavior_sequence(s.sample_id, L);
    ex.history.assign(seq.samples.rbegin(), seq.samples.rend());
    out.push_back(std::move(ex));
  }
  return out;
}

void Adam::step(const std::vector<ad::Param*>& params, const ad::GradStore& grads, double grad_scale) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (auto* p : params) {
    if (!p->trainable) continue;
    const Matrix* g = grads.find(*p);
    if (g == nullptr) continue;
    auto& mo = moments_[p];
    if (mo.m.empty()) {
      mo.m.assign(p->value.size(), 0.0);
      mo.v.assign(p->value.size(), 0.0);
    }
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      double gi = g->data[i] * grad_scale;
      if (p->decay) gi += wd_ * p->value.data[i];
      mo.m[i] = b1_ * mo.m[i] + (1.0 - b1_) * gi;
      mo.v[i] = b2_ * mo.v[i] + (1.0 - b2_) * gi * gi;
      p->value.data[i] -= lr_ * (mo.m[i] / c1) / (std::sqrt(mo.v[i] / c2) + eps_);
    }
  }
}

ExampleGraph build_example(ad::Graph& g, const TokenizerState& tok, const MixerState& m, const Example& ex,
                           const GraphOptions& opt) {
  const RawSample* one[] = {ex.target};
  const auto raw = build::embed_fields(g, tok, one);
  const auto target = build::target_slots(g, m, raw);
  const int len = static_cast<int>(ex.history.size());
  if (len > m.max_len()) throw DataError("history longer than L");
  ExampleGraph out;
  ad::Var history{};
  if (uses_quantized_history(m.variant())) {
    if (opt.with_losses) {
      const auto z = build::project(g, tok, raw);
      out.target_rvq = build::quantize(g, tok, z);
      const auto& rvq = out.target_rvq;
      std::vector<std::pair<ad::Var, double>> vq, align;
      std::vector<ad::Var> aux_in;
      for (int k = 0; k < tok.num_slots(); ++k) {
        for (int lv = 0; lv < tok.levels(); ++lv) {
          const ad::Var r = rvq.residual[k][lv];
          const ad::Var c = rvq.code[k][lv];
          if (opt.codebook_vq_route) vq.emplace_back(g.sum_squares(g.sub(g.stop_gradient(r), c)), 1.0);
          vq.emplace_back(g.sum_squares(g.sub(r, g.stop_gradient(c))), kCommitmentWeight);
        }
        const ad::Var recon = rvq.reconstruction[k];
        aux_in.push_back(g.straight_through(z[k], opt.codebook_aux_route ? recon : g.stop_gradient(recon)));
        align.emplace_back(g.sum_squares(g.sub(target[k], g.stop_gradient(recon))), 1.0);
      }
      out.vq = g.weighted_sum(vq);
      out.align = g.weighted_sum(align);
      out.token = g.bce_with_logits(build::aux_logit(g, tok, aux_in), ex.label);
    }
    if (len > 0) {
      const auto hz = build::project(g, tok, build::embed_fields(g, tok, ex.history));
      const auto hq = build::quantize(g, tok, hz);
      std::vector<ad::Var> rows;
      for (int k = 0; k < tok.num_slots(); ++k) {
        const ad::Var recon = hq.reconstruction[k];
        rows.push_back(g.straight_through(hz[k], opt.codebook_lookup_route ? recon : g.stop_gradient(recon)));
      }
      history = build::history_from_slots(g, m, rows);
    }
  } else if (len > 0) {
    history = build::history_from_wide(g, m, build::history_wide(g, tok, m, ex.history));
  }
  const ad::Var H = build::assemble(g, m, target, history, 0);
  out.logit = build::blocks_and_head(g, m, H, len + 1, len);
  if (opt.with_losses) out.bce = g.bce_with_logits(out.logit, ex.label);
  return out;
}

double alignment_loss(const TokenizerState& tok, const MixerState& m, const RawSample& target) {
  ad::Graph g;
  const RawSample* one[] = {&target};
  const auto raw = build::embed_fields(g, tok, one);
  const auto tgt = build::target_slots(g, m, raw);
  const auto rvq = build::quantize(g, tok, build::project(g, tok, raw));
  double s = 0.0;
  for (int k = 0; k < tok.num_slots(); ++k)
    s += g.scalar(g.sum_squares(g.sub(tgt[k], g.stop_gradient(rvq.reconstruction[k]))));
  return s;
}

double score(const TokenizerState& tok, const MixerState& m, const Example& ex) {
  ad::Graph g;
  GraphOptions opt;
  opt.with_losses = false;
  return sigmoid(g.scalar(build_example(g, tok, m, ex, opt).logit));
}

Trainer::Trainer(const ImpressionLog& log, TrainConfig config)
    : log_(log), config_(std::move(config)), adam_(config_) {
  if (config_.batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (config_.threads <= 0) throw ConfigError("threads must be positive");
  if (config_.lr < 0) throw ConfigError("lr must be >= 0");
  if (config_.mixer.n_items == 0) config_.mixer.n_items = static_cast<std::uint32_t>(log.config().n_items);
  tok_ = TokenizerState(log.schema(), config_.seed);
  mixer_ = MixerState(log.schema(), config_.mixer, config_.seed + 1);
  config_.mixer = mixer_.config();
  const bool quantized = uses_quantized_history(mixer_.variant());
  if (!config_.train_tokenizer || !quantized) {
    // Only the field embedders stay live when the history bypasses the quantizer.
    for (auto* p : tok_.parameters()) p->trainable = false;
    if (config_.train_tokenizer)
      for (auto* p : tok_.embedder_parameters()) p->trainable = true;
  }
  // A zero learning rate means a frozen model, reseeding included.
  if (config_.lr == 0.0) config_.reseed_dead_codes = false;
  const int L = mixer_.max_len();
  auto take = [&](SplitPart part, std::size_t cap) {
    auto idx = log.indices_of(part);
    if (cap > 0 && idx.size() > cap) idx.resize(cap);
    return make_examples(log, idx, L);
  };
  train_ = take(SplitPart::train, config_.max_train_examples);
  val_ = take(SplitPart::val, config_.max_eval_examples);
  test_ = take(SplitPart::test, config_.max_eval_examples);
  usage_.assign(tok_.num_slots(), std::vector<std::vector<std::uint32_t>>(
                                      tok_.levels(), std::vector<std::uint32_t>(tok_.codebook_size(), 0)));
  reservoir_.assign(tok_.num_slots(), std::vector<std::vector<std::vector<double>>>(tok_.levels()));
  pin_zero_rows();
}

std::vector<ad::Param*> Trainer::trainable_parameters() {
  std::vector<ad::Param*> out;
  for (auto* p : tok_.parameters())
    if (p->trainable) out.push_back(p);
  for (auto* p : mixer_.parameters())
    if (p->trainable) out.push_back(p);
  return out;
}

LossBreakdown Trainer::accumulate(std::span<const Example> batch, ad::GradStore& grads,
                                  std::vector<CodeUse>* uses) const {
  LossBreakdown total;
  total.beta = config_.beta;
  total.gamma = config_.gamma;
  total.token_weight = config_.token_weight;
  if (batch.empty()) return total;
  const double inv = 1.0 / static_cast<double>(batch.size());
  GraphOptions opt;
  opt.codebook_vq_route = config_.codebook_vq_route;
  opt.codebook_aux_route = config_.codebook_aux_route;
  opt.codebook_lookup_route = config_.codebook_lookup_route;

  auto run = [&](std::size_t begin, std::size_t end, ad::GradStore& gs, LossBreakdown& acc,
                 std::vector<CodeUse>* used) {
    for (std::size_t i = begin; i < end; ++i) {
      ad::Graph g(&gs);
      const auto eg = build_example(g, tok_, mixer_, batch[i], opt);
      const double bce = g.scalar(eg.bce), vq = value_or_zero(g, eg.vq), al = value_or_zero(g, eg.align),
                   tk = value_or_zero(g, eg.token);
      check_finite(bce, "bce");
      check_finite(vq, "vq");
      check_finite(al, "align");
      check_finite(tk, "token");
      std::vector<std::pair<ad::Var, double>> terms{{eg.bce, inv}};
      if (valid(eg.vq)) terms.emplace_back(eg.vq, config_.beta * inv);
      if (valid(eg.align)) terms.emplace_back(eg.align, config_.gamma * inv);
      if (valid(eg.token)) terms.emplace_back(eg.token, config_.token_weight * inv);
      g.backward(g.weighted_sum(terms));
      acc.bce += bce * inv;
      acc.vq += vq * inv;
      acc.align += al * inv;
      acc.token += tk * inv;
      if (used != nullptr && !eg.target_rvq.indices.empty()) {
        for (int k = 0; k < tok_.num_slots(); ++k)
          for (int lv = 0; lv < tok_.levels(); ++lv) {
            const auto& r = g.value(eg.target_rvq.residual[k][lv]);
            used->push_back({k, lv, eg.target_rvq.indices[k][lv][0], {r.data.begin(), r.data.end()}});
          }
      }
    }
  };

  const std::size_t n = batch.size();
  const int threads = static_cast<int>(std::min<std::size_t>(config_.threads, n));
  if (threads <= 1) {
    run(0, n, grads, total, uses);
    return total;
  }
  std::vector<ad::GradStore> shard_grads(threads);
  std::vector<LossBreakdown> shard_loss(threads);
  std::vector<std::vector<CodeUse>> shard_uses(threads);
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    const std::size_t b = n * t / threads, e = n * (t + 1) / threads;
    pool.emplace_back([&, t, b, e] {
      try {
        run(b, e, shard_grads[t], shard_loss[t], uses != nullptr ? &shard_uses[t] : nullptr);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  for (int t = 0; t < threads; ++t) {
    grads.add(shard_grads[t]);
    total.bce += shard_loss[t].bce;
    total.vq += shard_loss[t].vq;
    total.align += shard_loss[t].align;
    total.token += shard_loss[t].token;
    if (uses != nullptr) uses->insert(uses->end(), shard_uses[t].begin(), shard_uses[t].end());
  }
  return total;
}

LossBreakdown Trainer::train_step(std::span<const Example> batch) {
  ad::GradStore grads;
  std::vector<CodeUse> uses;
  const bool track = config_.reseed_dead_codes && uses_quantized_history(mixer_.variant());
  const auto loss = accumulate(batch, grads, track ? &uses : nullptr);
  adam_.step(trainable_parameters(), grads);
  pin_zero_rows();
  if (track) observe(uses);
  ++step_;
  if (step_hook_) step_hook_(loss, step_);
  return loss;
}

void Trainer::pin_zero_rows() {
  if (!config_.pin_zero_row) return;
  for (auto& levels : tok_.codebooks)
    for (auto& cb : levels)
      for (int j = 0; j < cb.value.cols; ++j) cb.value(0, j) = 0.0;
}

void Trainer::observe(const std::vector<CodeUse>& uses) {
  constexpr std::size_t kReservoir = 64;
  std::mt19937_64 rng(config_.seed * 1000003ULL + step_);
  for (const auto& u : uses) {
    ++usage_[u.slot][u.level][u.index];
    auto& res = reservoir_[u.slot][u.level];
    ++seen_;
    if (res.size() < kReservoir) {
      res.push_back(u.residual);
    } else {
      const auto j = std::uniform_int_distribution<std::uint64_t>(0, seen_ - 1)(rng);
      if (j < kReservoir) res[j] = u.residual;
    }
  }
}

std::size_t Trainer::reseed_dead_codes() {
  std::size_t reseeded = 0;
  std::mt19937_64 rng(config_.seed * 7919ULL + static_cast<std::uint64_t>(epoch_));
  std::normal_distribution<double> jitter(0.0, 1e-3);
  for (int k = 0; k < tok_.num_slots(); ++k) {
    for (int lv = 0; lv < tok_.levels(); ++lv) {
      auto& res = reservoir_[k][lv];
      auto& cb = tok_.codebooks[k][lv].value;
      if (!res.empty()) {
        for (int v = config_.pin_zero_row ? 1 : 0; v < cb.rows; ++v) {
          if (usage_[k][lv][v] != 0) continue;
          const auto& src = res[std::uniform_int_distribution<std::size_t>(0, res.size() - 1)(rng)];
          for (int j = 0; j < cb.cols; ++j) cb(v, j) = src[j] + jitter(rng);
          ++reseeded;
        }
      }
      std::fill(usage_[k][lv].begin(), usage_[k][lv].end(), 0);
      res.clear();
    }
  }
  seen_ = 0;
  return reseeded;
}

EpochSummary Trainer::run_epoch() {
  std::vector<std::size_t> order(train_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(config_.seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(epoch_ + 1));
  std::shuffle(order.begin(), order.end(), rng);
  EpochSummary s;
  s.epoch = epoch_;
  s.mean_loss.beta = config_.beta;
  s.mean_loss.gamma = config_.gamma;
  s.mean_loss.token_weight = config_.token_weight;
  std::size_t batches = 0;
  std::vector<Example> batch;
  for (std::size_t b = 0; b < order.size(); b += config_.batch_size) {
    batch.clear();
    for (std::size_t i = b; i < std::min(order.size(), b + config_.batch_size); ++i) batch.push_back(train_[order[i]]);
    const auto l = train_step(batch);
    s.mean_loss.bce += l.bce;
    s.mean_loss.vq += l.vq;
    s.mean_loss.align += l.align;
    s.mean_loss.token += l.token;
    ++batches;
  }
  if (batches > 0) {
    s.mean_loss.bce /= batches;
    s.mean_loss.vq /= batches;
    s.mean_loss.align /= batches;
    s.mean_loss.token /= batches;
  }
  if (config_.reseed_dead_codes && uses_quantized_history(mixer_.variant())) s.dead_codes_reseeded = reseed_dead_codes();
  if (!val_.empty()) s.val = evaluate(val_);
  if (uses_quantized_history(mixer_.variant()))
    s.align_distance = align_distance(std::span(val_).first(std::min<std::size_t>(val_.size(), 1000)));
  ++epoch_;
  return s;
}

MetricReport Trainer::evaluate(std::span<const Example> examples) const {
  std::vector<double> scores(examples.size());
  std::vector<std::uint8_t> labels(examples.size());
  std::vector<std::uint64_t> groups(examples.size());
  const int threads = static_cast<int>(std::min<std::size_t>(config_.threads, std::max<std::size_t>(examples.size(), 1)));
  auto run = [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) scores[i] = score(tok_, mixer_, examples[i]);
  };
  if (threads <= 1) {
    run(0, examples.size());
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back(run, examples.size() * t / threads, examples.size() * (t + 1) / threads);
    for (auto& th : pool) th.join();
  }
  for (std::size_t i = 0; i < examples.size(); ++i) {
    labels[i] = examples[i].label;
    groups[i] = examples[i].target->user_id;
  }
  auto r = metric_report(scores, labels, groups);
  const auto& c = mixer_.config();
  r.flops_per_example =
      flops_estimate(c.max_len, mixer_.num_slots(), mixer_.dim(), c.blocks, c.heads, mixer_.variant());
  return r;
}

double Trainer::align_distance(std::span<const Example> examples) const {
  if (examples.empty()) return 0.0;
  double total = 0.0;
  for (const auto& ex : examples) {
    ad::Graph g;
    const RawSample* one[] = {ex.target};
    const auto raw = build::embed_fields(g, tok_, one);
    const auto tgt = build::target_slots(g, mixer_, raw);
    const auto rvq = build::quantize(g, tok_, build::project(g, tok_, raw));
    for (int k = 0; k < tok_.num_slots(); ++k)
      total += std::sqrt(g.scalar(g.sum_squares(g.sub(tgt[k], rvq.reconstruction[k]))));
  }
  return total / static_cast<double>(examples.size() * tok_.num_slots());
}

TrainResult Trainer::fit(const std::optional<std::filesystem::path>& run_dir,
                         const std::function<void(const EpochSummary&)>& on_epoch) {
  std::ofstream metrics;
  if (run_dir) {
    std::filesystem::create_directories(*run_dir);
    std::ofstream(*run_dir / "config.json") << train_config_to_json(config_) << '\n';
    std::ofstream(*run_dir / "schema.json") << schema_to_json(log_.schema()) << '\n';
    metrics.open(*run_dir / "metrics.csv", std::ios::trunc);
    metrics << "kind,epoch,step,bce,vq,align,token,total,val_auc,val_gauc\n";
    step_hook_ = [this, &metrics](const LossBreakdown& l, std::uint64_t step) {
      metrics << "step," << epoch_ << ',' << step << ',' << fmt(l.bce) << ',' << fmt(l.vq) << ',' << fmt(l.align)
              << ',' << fmt(l.token) << ',' << fmt(l.total()) << ",,\n";
    };
  }
  TrainResult result;
  std::vector<Matrix> best;
  auto snapshot = [&] {
    best.clear();
    for (auto* p : tok_.parameters()) best.push_back(p->value);
    for (auto* p : mixer_.parameters()) best.push_back(p->value);
  };
  double best_auc = -1.0;
  int bad = 0;
  for (int e = 0; e < config_.max_epochs; ++e) {
    auto s = run_epoch();
    result.epochs.push_back(s);
    if (on_epoch) on_epoch(s);
    if (run_dir) {
      metrics << "epoch," << s.epoch << ',' << step_ << ',' << fmt(s.mean_loss.bce) << ',' << fmt(s.mean_loss.vq)
              << ',' << fmt(s.mean_loss.align) << ',' << fmt(s.mean_loss.token) << ',' << fmt(s.mean_loss.total())
              << ',' << fmt(s.val.auc) << ',' << fmt(s.val.gauc) << '\n';
      metrics.flush();
      save_tokenizer(tok_, *run_dir / ("tokenizer_epoch" + std::to_string(s.epoch) + ".sifc"));
      save_mixer(mixer_, log_.schema(), *run_dir / ("mixer_epoch" + std::to_string(s.epoch) + ".sifm"));
    }
    if (s.val.auc > best_auc) {
      best_auc = s.val.auc;
      result.best_epoch = s.epoch;
      result.best_val = s.val;
      snapshot();
      bad = 0;
    } else if (++bad >= config_.patience) {
      break;
    }
  }
  if (!best.empty()) {
    std::size_t i = 0;
    for (auto* p : tok_.parameters()) p->value = best[i++];
    for (auto* p : mixer_.parameters()) p->value = best[i++];
  }
  if (!test_.empty()) result.test = evaluate(test_);
  if (run_dir) {
    save_tokenizer(tok_, *run_dir / "tokenizer.sifc");
    save_mixer(mixer_, log_.schema(), *run_dir / "mixer.sifm");
    step_hook_ = nullptr;
  }
  return result;
}

}  // namespace sif
