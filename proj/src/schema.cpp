#include "sif/schema.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "sif/binary_io.hpp"
#include "sif/error.hpp"

namespace sif {

namespace {

using nlohmann::json;

void require_keys(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!obj.is_object()) throw SchemaError(where + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw SchemaError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw SchemaError(where + ": bad value for '" + key + "': " + e.what());
  }
}

std::vector<std::string> group_order(const FeatureSchema& schema) {
  if (!schema.groups.empty()) return schema.groups;
  std::vector<std::string> order;
  for (const auto& f : schema.fields) {
    if (std::find(order.begin(), order.end(), f.group) == order.end()) order.push_back(f.group);
  }
  return order;
}

}  // namespace

bool is_standard_group(std::string_view group) {
  return group == "user" || group == "item" || group == "ctx" || group == "cross";
}

void FeatureSchema::validate() const {
  if (fields.empty()) throw SchemaError("schema has no fields");
  if (granularity <= 0) throw SchemaError("sub-token granularity B must be positive");
  if (sub_token_dim <= 0) throw SchemaError("sub-token dimension d_0 must be positive");
  if (rvq_levels <= 0) throw SchemaError("RVQ levels M must be positive");
  if (codebook_size <= 0 || !std::has_single_bit(static_cast<unsigned>(codebook_size)))
    throw SchemaError("codebook size V must be a power of two");
  if (bits_per_index() > 16) throw SchemaError("log2(V) must be at most 16");

  std::set<std::string> names;
  for (const auto& f : fields) {
    if (f.name.empty()) throw SchemaError("field with empty name");
    if (!names.insert(f.name).second) throw SchemaError("duplicate field name '" + f.name + "'");
    if (f.group.empty()) throw SchemaError("field '" + f.name + "' has no group");
    if (f.embed_dim < 1) throw SchemaError("field '" + f.name + "': embed_dim must be >= 1");
    if (f.kind == FieldKind::categorical && f.cardinality < 2)
      throw SchemaError("field '" + f.name + "': categorical cardinality must be >= 2");
  }

  const auto order = group_order(*this);
  std::set<std::string> seen;
  for (const auto& g : order) {
    if (!seen.insert(g).second) throw SchemaError("group '" + g + "' declared twice");
  }
  // Fields must be grouped contiguously and follow the group order.
  std::size_t gi = 0;
  std::vector<int> counts(order.size(), 0);
  for (const auto& f : fields) {
    auto it = std::find(order.begin(), order.end(), f.group);
    if (it == order.end()) throw SchemaError("field '" + f.name + "' uses undeclared group '" + f.group + "'");
    const auto idx = static_cast<std::size_t>(it - order.begin());
    if (idx < gi) throw SchemaError("fields of group '" + f.group + "' are not contiguous");
    gi = idx;
    ++counts[idx];
  }
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (counts[i] == 0) throw SchemaError("group '" + order[i] + "' is empty");
    if (!is_standard_group(order[i]) && counts[i] != 1)
      throw SchemaError("extra group '" + order[i] + "' must be a singleton");
  }
}

int FeatureSchema::bits_per_index() const {
  return std::countr_zero(static_cast<unsigned>(codebook_size));
}

int FeatureSchema::field_index(std::string_view name) const {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (fields[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

int FeatureSchema::total_embed_width() const {
  int w = 0;
  for (const auto& f : fields) w += f.embed_dim;
  return w;
}

std::uint64_t FeatureSchema::hash() const {
  std::ostringstream os;
  os << "B=" << granularity << ";d0=" << sub_token_dim << ";M=" << rvq_levels << ";V=" << codebook_size << ";";
  for (const auto& g : groups) os << "g:" << g << ";";
  for (const auto& f : fields) {
    os << f.name << '|' << f.group << '|' << (f.kind == FieldKind::categorical ? 'c' : 'n') << '|' << f.cardinality
       << '|' << f.embed_dim << ';';
  }
  return io::fnv1a(os.str());
}

std::vector<GroupInfo> group_layout(const FeatureSchema& schema) {
  schema.validate();
  std::vector<GroupInfo> out;
  for (const auto& g : group_order(schema)) {
    GroupInfo info{g, 0, 0};
    for (const auto& f : schema.fields) info.field_count += (f.group == g);
    info.sub_tokens = (info.field_count + schema.granularity - 1) / schema.granularity;
    out.push_back(info);
  }
  return out;
}

std::vector<SubTokenSlot> derive_partition(const FeatureSchema& schema) {
  const auto layout = group_layout(schema);
  std::vector<SubTokenSlot> slots;
  int cursor = 0;
  for (const auto& g : layout) {
    const int n = g.field_count;
    const int k_g = g.sub_tokens;
    const int base = n / k_g;
    const int extra = n % k_g;
    for (int k = 0; k < k_g; ++k) {
      SubTokenSlot s;
      s.group = g.name;
      s.index_in_group = k;
      s.field_begin = cursor;
      s.field_end = cursor + base + (k < extra ? 1 : 0);
      for (int f = s.field_begin; f < s.field_end; ++f) s.raw_width += schema.fields[f].embed_dim;
      cursor = s.field_end;
      slots.push_back(std::move(s));
    }
  }
  return slots;
}

std::uint64_t token_bits(const FeatureSchema& schema) {
  const auto t = derive_partition(schema).size();
  return static_cast<std::uint64_t>(t) * static_cast<std::uint64_t>(schema.rvq_levels) *
         static_cast<std::uint64_t>(schema.bits_per_index());
}

FeatureSchema parse_schema(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("schema is not valid JSON: ") + e.what());
  }
  require_keys(doc, {"fields", "groups", "sub_token_granularity", "sub_token_dim", "rvq_levels", "codebook_size"},
               "schema");
  FeatureSchema s;
  s.granularity = get_or(doc, "sub_token_granularity", 32, "schema");
  s.sub_token_dim = get_or(doc, "sub_token_dim", 16, "schema");
  s.rvq_levels = get_or(doc, "rvq_levels", 3, "schema");
  s.codebook_size = get_or(doc, "codebook_size", 256, "schema");
  s.groups = get_or(doc, "groups", std::vector<std::string>{}, "schema");
  if (!doc.contains("fields") || !doc["fields"].is_array()) throw SchemaError("schema: 'fields' must be an array");
  for (const auto& jf : doc["fields"]) {
    require_keys(jf, {"name", "group", "kind", "cardinality", "embed_dim"}, "schema field");
    FieldSpec f;
    f.name = get_or(jf, "name", std::string{}, "schema field");
    const std::string where = "field '" + f.name + "'";
    f.group = get_or(jf, "group", std::string{}, where);
    const auto kind = get_or(jf, "kind", std::string{}, where);
    if (kind == "categorical") {
      f.kind = FieldKind::categorical;
      f.cardinality = get_or(jf, "cardinality", 0u, where);
    } else if (kind == "numeric") {
      f.kind = FieldKind::numeric;
      if (jf.contains("cardinality")) throw SchemaError(where + ": numeric fields take no cardinality");
    } else {
      throw SchemaError(where + ": kind must be 'categorical' or 'numeric'");
    }
    f.embed_dim = get_or(jf, "embed_dim", 8, where);
    s.fields.push_back(std::move(f));
  }
  s.validate();
  return s;
}

FeatureSchema load_schema(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open schema file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_schema(ss.str());
}

std::string schema_to_json(const FeatureSchema& schema) {
  json doc;
  doc["sub_token_granularity"] = schema.granularity;
  doc["sub_token_dim"] = schema.sub_token_dim;
  doc["rvq_levels"] = schema.rvq_levels;
  doc["codebook_size"] = schema.codebook_size;
  if (!schema.groups.empty()) doc["groups"] = schema.groups;
  doc["fields"] = json::array();
  for (const auto& f : schema.fields) {
    json jf{{"name", f.name}, {"group", f.group}, {"embed_dim", f.embed_dim}};
    if (f.kind == FieldKind::categorical) {
      jf["kind"] = "categorical";
      jf["cardinality"] = f.cardinality;
    } else {
      jf["kind"] = "numeric";
    }
    doc["fields"].push_back(std::move(jf));
  }
  return doc.dump(2);
}

void save_schema(const FeatureSchema& schema, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot write schema file " + path.string());
  out << schema_to_json(schema) << '\n';
}

FeatureSchema desk_schema() {
  auto cat = [](std::string name, std::string group, std::uint32_t card) {
    return FieldSpec{std::move(name), std::move(group), FieldKind::categorical, card, 8};
  };
  auto num = [](std::string name, std::string group) {
    return FieldSpec{std::move(name), std::move(group), FieldKind::numeric, 0, 8};
  };
  FeatureSchema s;
  s.fields = {
      cat("u_age", "user", 8),         cat("u_gender", "user", 2),      cat("u_city", "user", 12),
      cat("u_level", "user", 5),       num("u_activity", "user"),       num("u_spend", "user"),
      cat("item_category", "item", 8), cat("item_price", "item", 10),   cat("item_brand", "item", 24),
      num("item_ctr", "item"),         num("item_rating", "item"),      cat("item_id", "item_id", 500),
      cat("ctx_hour", "ctx", 6),       cat("ctx_coupon", "ctx", 2),     cat("ctx_weekday", "ctx", 7),
      cat("ctx_weather", "ctx", 4),    num("x_user_cat", "cross"),      num("x_item_ctx", "cross"),
      num("x_price_match", "cross"),   cat("x_recent_cat", "cross", 8),
  };
  s.granularity = 4;
  s.sub_token_dim = 8;
  s.rvq_levels = 2;
  s.codebook_size = 64;
  s.validate();
  return s;
}

FeatureSchema reference_schema() {
  FeatureSchema s;
  auto add_group = [&](const std::string& group, int n) {
    for (int i = 0; i < n; ++i)
      s.fields.push_back(FieldSpec{group + "_f" + std::to_string(i), group, FieldKind::categorical, 1000, 8});
  };
  // 161 + 161 + 161 + 112 = 595 fields -> K = 6 + 6 + 6 + 4; plus five
  // singleton identity groups: 600 fields, T = 27.
  add_group("user", 161);
  add_group("item", 161);
  add_group("ctx", 161);
  add_group("cross", 112);
  for (const char* id : {"item_id", "shop_id", "brand_id", "category_id", "city_id"})
    s.fields.push_back(FieldSpec{id, id, FieldKind::categorical, 1u << 20, 8});
  s.granularity = 32;
  s.sub_token_dim = 16;
  s.rvq_levels = 3;
  s.codebook_size = 256;
  s.validate();
  return s;
}

FeatureSchema make_uniform_schema(const std::vector<std::pair<std::string, int>>& group_sizes, int granularity,
                                  int sub_token_dim, int rvq_levels, int codebook_size, std::uint32_t cardinality,
                                  int embed_dim) {
  FeatureSchema s;
  for (const auto& [group, n] : group_sizes) {
    s.groups.push_back(group);
    for (int i = 0; i < n; ++i)
      s.fields.push_back(
          FieldSpec{group + "_" + std::to_string(i), group, FieldKind::categorical, cardinality, embed_dim});
  }
  s.granularity = granularity;
  s.sub_token_dim = sub_token_dim;
  s.rvq_levels = rvq_levels;
  s.codebook_size = codebook_size;
  return s;
}

}  // namespace sif
