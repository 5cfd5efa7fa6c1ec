#include "sif/cli.hpp"

#include <chrono>
#include <iomanip>
#include <sstream>

#include "CLI11.hpp"
#include "sif/error.hpp"
#include "sif/eval.hpp"
#include "sif/tokenstore.hpp"
#include "sif/training.hpp"

namespace sif {

namespace {

struct Usage : Error {
  using Error::Error;
};

FeatureSchema schema_or_default(const std::string& path) { return path.empty() ? desk_schema() : load_schema(path); }

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

void print_report(std::ostream& out, const MetricReport& m) {
  out << "auc,gauc,logloss,n_scored,n_groups_used,n_groups_skipped,flops_per_example\n"
      << fixed(m.auc, 6) << ',' << fixed(m.gauc, 6) << ',' << fixed(m.logloss, 6) << ',' << m.n_scored << ','
      << m.n_groups_used << ',' << m.n_groups_skipped << ',' << m.flops_per_example << '\n';
}

// Flags shared by train and sweep; each one overrides the config file.
struct TrainFlags {
  std::string config;
  std::string variant;
  double lr = 0, beta = 0, gamma = 0, token_weight = 0;
  int epochs = 0, batch = 0, threads = 0, blocks = 0, heads = 0, max_len = 0, patience = 0;
  std::uint64_t seed = 0;
  std::size_t max_train = 0, max_eval = 0;
  bool no_vq_route = false, no_aux_route = false, no_lookup_route = false, freeze_tokenizer = false;
  std::vector<CLI::Option*> opts;

  void add(CLI::App* app) {
    app->add_option("--config", config, "JSON training config");
    opts = {
        app->add_option("--variant", variant,
                         "full | item_id_only | item_plus_key | dense_raw | flat_attn | pooled (default full)"),
        app->add_option("--lr", lr, "Adam learning rate (default 1e-3)"),
        app->add_option("--beta", beta, "L_VQ weight (default 1.0)"),
        app->add_option("--gamma", gamma, "L_align weight (default 0.25)"),
        app->add_option("--token-weight", token_weight, "L_token weight (default 1.0)"),
        app->add_option("--epochs", epochs, "maximum epochs (default 20)"),
        app->add_option("--batch-size", batch, "batch size (default 256)"),
        app->add_option("--threads", threads, "gradient shards per step (default 1)"),
        app->add_option("--blocks", blocks, "SIF blocks N (default 4)"),
        app->add_option("--heads", heads, "attention heads (default 8)"),
        app->add_option("--max-len", max_len, "history length L (default 100)"),
        app->add_option("--patience", patience, "early-stopping patience (default 3)"),
        app->add_option("--seed", seed, "initialization and shuffling seed (default 1)"),
        app->add_option("--max-train", max_train, "cap on training examples (default all)"),
        app->add_option("--max-eval", max_eval, "cap on validation/test examples (default all)"),
    };
    app->add_flag("--no-vq-route", no_vq_route, "drop the codebook term of L_VQ");
    app->add_flag("--no-aux-route", no_aux_route, "stop aux-head gradients into codebooks");
    app->add_flag("--no-lookup-route", no_lookup_route, "stop history-lookup gradients into codebooks");
    app->add_flag("--freeze-tokenizer", freeze_tokenizer, "train the mixer only");
  }

  TrainConfig resolve() const {
    TrainConfig c = config.empty() ? TrainConfig{} : load_train_config(config);
    auto set = [](CLI::Option* o) { return o->count() > 0; };
    if (set(opts[0])) c.mixer.variant = parse_variant(variant);
    if (set(opts[1])) c.lr = lr;
    if (set(opts[2])) c.beta = beta;
    if (set(opts[3])) c.gamma = gamma;
    if (set(opts[4])) c.token_weight = token_weight;
    if (set(opts[5])) c.max_epochs = epochs;
    if (set(opts[6])) c.batch_size = batch;
    if (set(opts[7])) c.threads = threads;
    if (set(opts[8])) c.mixer.blocks = blocks;
    if (set(opts[9])) c.mixer.heads = heads;
    if (set(opts[10])) c.mixer.max_len = max_len;
    if (set(opts[11])) c.patience = patience;
    if (set(opts[12])) c.seed = seed;
    if (set(opts[13])) c.max_train_examples = max_train;
    if (set(opts[14])) c.max_eval_examples = max_eval;
    if (no_vq_route) c.codebook_vq_route = false;
    if (no_aux_route) c.codebook_aux_route = false;
    if (no_lookup_route) c.codebook_lookup_route = false;
    if (freeze_tokenizer) c.train_tokenizer = false;
    return c;
  }
};

std::vector<const RawSample*> history_of(const ImpressionLog& log, const RawSample& s, int L) {
  const auto seq = log.behavior_sequence(s.sample_id, L);
  return {seq.samples.rbegin(), seq.samples.rend()};
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sample-level tokenization and mixing for CTR prediction"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a planted-signal impression log");
  std::string gen_schema, gen_out;
  GeneratorConfig gc;
  gen->add_option("--schema", gen_schema, "schema JSON (default: built-in desk schema)");
  gen->add_option("--users", gc.n_users, "number of users (default 1000)");
  gen->add_option("--items", gc.n_items, "number of items (default 500)");
  gen->add_option("--impressions", gc.n_impressions, "number of impressions (default 100000)");
  gen->add_option("--seed", gc.seed, "generator seed (default 7)");
  gen->add_option("--signal-strength", gc.signal_strength, "history signal scale (default 1.0)");
  gen->add_option("--out", gen_out, "output log file")->required();

  // train
  auto* train = app.add_subcommand("train", "train tokenizer and mixer jointly");
  std::string tr_schema, tr_data, tr_out;
  TrainFlags tf;
  train->add_option("--schema", tr_schema, "schema JSON (default: built-in desk schema)");
  train->add_option("--data", tr_data, "impression log")->required();
  train->add_option("--out", tr_out, "run directory")->required();
  tf.add(train);

  // tokenize
  auto* tokz = app.add_subcommand("tokenize", "build the offline token store from a frozen tokenizer");
  std::string tk_schema, tk_data, tk_ckpt, tk_out;
  tokz->add_option("--schema", tk_schema, "schema JSON (default: built-in desk schema)");
  tokz->add_option("--data", tk_data, "impression log")->required();
  tokz->add_option("--tokenizer", tk_ckpt, "tokenizer checkpoint (.sifc)")->required();
  tokz->add_option("--out", tk_out, "token store file")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "score a split with a trained model");
  std::string ev_schema, ev_data, ev_tok, ev_mix, ev_store, ev_split = "test";
  ev->add_option("--schema", ev_schema, "schema JSON (default: built-in desk schema)");
  ev->add_option("--data", ev_data, "impression log")->required();
  ev->add_option("--tokenizer", ev_tok, "tokenizer checkpoint (.sifc)")->required();
  ev->add_option("--checkpoint", ev_mix, "mixer checkpoint (.sifm)")->required();
  ev->add_option("--store", ev_store, "token store; history tokens are read from it instead of re-tokenized");
  ev->add_option("--split", ev_split, "train | val | test (default test)")
      ->check(CLI::IsMember({"train", "val", "test"}));

  // sweep
  auto* sw = app.add_subcommand("sweep", "one training run per value of B, N or L");
  std::string sw_axis, sw_schema, sw_out;
  std::vector<int> sw_values;
  GeneratorConfig sgc;
  TrainFlags sf;
  sw->add_option("--axis", sw_axis, "B | N | L")->required()->check(CLI::IsMember({"B", "N", "L"}));
  sw->add_option("--values", sw_values, "comma-separated values")->required()->delimiter(',');
  sw->add_option("--schema", sw_schema, "schema JSON (default: built-in desk schema)");
  sw->add_option("--users", sgc.n_users, "number of users (default 1000)");
  sw->add_option("--items", sgc.n_items, "number of items (default 500)");
  sw->add_option("--impressions", sgc.n_impressions, "number of impressions (default 100000)");
  sw->add_option("--data-seed", sgc.seed, "generator seed (default 7)");
  sw->add_option("--out", sw_out, "output directory")->required();
  sf.add(sw);

  // gradcheck
  auto* gcmd = app.add_subcommand("gradcheck", "finite-difference gradient check");
  GradcheckConfig gcc;
  bool tiny = false;
  std::string gc_variant = "full";
  gcmd->add_flag("--tiny", tiny, "tiny config L=4, T=3, d0=4, N=1, M=2, V=4 (the only size offered)");
  gcmd->add_flag("--mixer-only", gcc.mixer_only, "freeze the tokenizer and drop L_VQ, L_align, L_token");
  gcmd->add_option("--variant", gc_variant, "model variant (default full)");
  gcmd->add_option("--seed", gcc.seed, "seed (default 1)");
  gcmd->add_option("--step", gcc.step, "central-difference step (default 1e-5)");

  // report
  auto* rep = app.add_subcommand("report", "per-sample storage bits and compression ratios");
  std::string rep_variant = "all", rep_schema;
  int key_count = 24, dense_dim = 512;
  rep->add_option("--variant", rep_variant, "all | hgaq | item_id_only | item_plus_key | dense (default all)");
  rep->add_option("--schema", rep_schema, "schema JSON (default: 600-field reference schema)");
  rep->add_option("--key-features", key_count, "scalar count of the item+key variant (default 24)");
  rep->add_option("--dense-dim", dense_dim, "width of the dense variant (default 512)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    if (gen->parsed()) {
      const auto schema = schema_or_default(gen_schema);
      if (gc.n_users == 0 || gc.n_items == 0) throw Usage("--users and --items must be positive");
      const auto log = generate_log(schema, gc);
      write_log(log, gen_out);
      out << "wrote " << log.samples().size() << " impressions to " << gen_out << '\n';
    } else if (train->parsed()) {
      const auto schema = schema_or_default(tr_schema);
      const auto log = read_log(tr_data, schema);
      Trainer trainer(log, tf.resolve());
      const auto t0 = std::chrono::steady_clock::now();
      const auto result = trainer.fit(std::filesystem::path(tr_out), [&](const EpochSummary& s) {
        out << "epoch " << s.epoch << " loss " << fixed(s.mean_loss.total(), 5) << " val_auc " << fixed(s.val.auc, 5)
            << " val_gauc " << fixed(s.val.gauc, 5) << '\n';
      });
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      out << "best epoch " << result.best_epoch << " in " << fixed(secs, 1) << " s\n";
      print_report(out, result.test);
    } else if (tokz->parsed()) {
      const auto schema = schema_or_default(tk_schema);
      const auto log = read_log(tk_data, schema);
      const auto tok = load_tokenizer(tk_ckpt, schema);
      const auto h = build_store(log, tok, tk_out);
      out << "stored " << h.count << " token samples (" << packed_size(h.slots, h.levels, h.bits)
          << " bytes each) in " << tk_out << '\n';
    } else if (ev->parsed()) {
      const auto schema = schema_or_default(ev_schema);
      const auto log = read_log(ev_data, schema);
      const auto tok = load_tokenizer(ev_tok, schema);
      const auto mixer = load_mixer(ev_mix, schema);
      std::optional<TokenStore> store;
      if (!ev_store.empty()) {
        store = TokenStore::open(ev_store);
        if (store->header().schema_hash != schema.hash()) throw FormatError("token store schema hash mismatch");
        if (!uses_quantized_history(mixer.variant())) throw Usage("--store needs a token-history variant");
      }
      const auto part = ev_split == "train" ? SplitPart::train : ev_split == "val" ? SplitPart::val : SplitPart::test;
      std::vector<double> scores;
      std::vector<std::uint8_t> labels;
      std::vector<std::uint64_t> groups;
      for (auto i : log.indices_of(part)) {
        const RawSample& s = log.samples()[i];
        const auto hist = history_of(log, s, mixer.max_len());
        if (store) {
          std::vector<TokenSample> seq;
          for (const auto* h : hist) {
            auto q = store->lookup(h->sample_id);
            if (!q) throw DataError("sample " + std::to_string(h->sample_id) + " is missing from the token store");
            seq.push_back(std::move(*q));
          }
          scores.push_back(forward(mixer, tok, s, seq));
        } else {
          scores.push_back(forward_raw(mixer, tok, s, hist));
        }
        labels.push_back(s.label);
        groups.push_back(s.user_id);
      }
      auto m = metric_report(scores, labels, groups);
      const auto& c = mixer.config();
      m.flops_per_example = flops_estimate(c.max_len, mixer.num_slots(), mixer.dim(), c.blocks, c.heads, c.variant);
      print_report(out, m);
    } else if (sw->parsed()) {
      const auto schema = schema_or_default(sw_schema);
      const auto axis = sw_axis == "B" ? SweepAxis::B : sw_axis == "N" ? SweepAxis::N : SweepAxis::L;
      const auto rows = sweep(axis, sw_values, schema, sgc, sf.resolve(), std::filesystem::path(sw_out));
      out << sw_axis << ",status,val_auc,val_gauc,flops\n";
      for (const auto& r : rows)
        out << r.value << ',' << (r.ok ? "ok" : "failed") << ',' << fixed(r.val.auc, 6) << ','
            << fixed(r.val.gauc, 6) << ',' << r.flops << '\n';
    } else if (gcmd->parsed()) {
      (void)tiny;
      gcc.variant = parse_variant(gc_variant);
      const auto report = gradcheck(gcc);
      out << "group,checked,max_rel_error,non_smooth\n";
      for (const auto& g : report.groups)
        out << g.name << ',' << g.checked << ',' << std::scientific << std::setprecision(3) << g.max_rel_error
            << std::defaultfloat << ',' << (g.non_smooth ? "yes" : "no") << '\n';
      out << "max relative error " << std::scientific << report.max_rel_error() << std::defaultfloat << '\n';
      return report.passed() ? 0 : 1;
    } else if (rep->parsed()) {
      const auto schema = rep_schema.empty() ? reference_schema() : load_schema(rep_schema);
      std::vector<StorageVariant> variants;
      if (rep_variant == "all") {
        variants = all_storage_variants();
      } else {
        for (auto v : all_storage_variants())
          if (storage_variant_name(v) == rep_variant) variants.push_back(v);
        if (variants.empty()) throw Usage("unknown report variant '" + rep_variant + "'");
      }
      out << "variant,bits_per_sample,snapshot_bits,ratio\n";
      for (auto v : variants) {
        const auto r = compression_report(schema, v, key_count, dense_dim);
        out << storage_variant_name(v) << ',' << r.token_bits << ',' << r.snapshot_bits << ',' << fixed(r.ratio, 2)
            << '\n';
      }
    }
  } catch (const Usage& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DivergenceError& e) {
    err << "training diverged: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace sif
