#include <fstream>
#include <sstream>

#include "json.hpp"
#include "sif/error.hpp"
#include "sif/training.hpp"

namespace sif {

using nlohmann::json;

std::string train_config_to_json(const TrainConfig& c) {
  json j;
  j["lr"] = c.lr;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["weight_decay"] = c.weight_decay;
  j["beta"] = c.beta;
  j["gamma"] = c.gamma;
  j["token_weight"] = c.token_weight;
  j["batch_size"] = c.batch_size;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["threads"] = c.threads;
  j["seed"] = c.seed;
  j["codebook_vq_route"] = c.codebook_vq_route;
  j["codebook_aux_route"] = c.codebook_aux_route;
  j["codebook_lookup_route"] = c.codebook_lookup_route;
  j["reseed_dead_codes"] = c.reseed_dead_codes;
  j["pin_zero_row"] = c.pin_zero_row;
  j["train_tokenizer"] = c.train_tokenizer;
  j["max_train_examples"] = c.max_train_examples;
  j["max_eval_examples"] = c.max_eval_examples;
  j["variant"] = std::string(variant_name(c.mixer.variant));
  j["blocks"] = c.mixer.blocks;
  j["heads"] = c.mixer.heads;
  j["max_len"] = c.mixer.max_len;
  j["n_items"] = c.mixer.n_items;
  j["key_fields"] = c.mixer.key_fields;
  return j.dump(2);
}

TrainConfig parse_train_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "lr") c.lr = v.get<double>();
      else if (key == "adam_beta1") c.adam_beta1 = v.get<double>();
      else if (key == "adam_beta2") c.adam_beta2 = v.get<double>();
      else if (key == "adam_eps") c.adam_eps = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "beta") c.beta = v.get<double>();
      else if (key == "gamma") c.gamma = v.get<double>();
      else if (key == "token_weight") c.token_weight = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "max_epochs") c.max_epochs = v.get<int>();
      else if (key == "patience") c.patience = v.get<int>();
      else if (key == "threads") c.threads = v.get<int>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "codebook_vq_route") c.codebook_vq_route = v.get<bool>();
      else if (key == "codebook_aux_route") c.codebook_aux_route = v.get<bool>();
      else if (key == "codebook_lookup_route") c.codebook_lookup_route = v.get<bool>();
      else if (key == "reseed_dead_codes") c.reseed_dead_codes = v.get<bool>();
      else if (key == "pin_zero_row") c.pin_zero_row = v.get<bool>();
      else if (key == "train_tokenizer") c.train_tokenizer = v.get<bool>();
      else if (key == "max_train_examples") c.max_train_examples = v.get<std::size_t>();
      else if (key == "max_eval_examples") c.max_eval_examples = v.get<std::size_t>();
      else if (key == "variant") c.mixer.variant = parse_variant(v.get<std::string>());
      else if (key == "blocks") c.mixer.blocks = v.get<int>();
      else if (key == "heads") c.mixer.heads = v.get<int>();
      else if (key == "max_len") c.mixer.max_len = v.get<int>();
      else if (key == "n_items") c.mixer.n_items = v.get<std::uint32_t>();
      else if (key == "key_fields") c.mixer.key_fields = v.get<std::vector<std::string>>();
      else throw ConfigError("unknown config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  if (c.lr < 0 || c.batch_size <= 0 || c.max_epochs < 0 || c.patience <= 0 || c.threads <= 0)
    throw ConfigError("config: lr >= 0, batch_size > 0, max_epochs >= 0, patience > 0, threads > 0 required");
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str());
}

}  // namespace sif
