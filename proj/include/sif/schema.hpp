#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace sif {

enum class FieldKind { categorical, numeric };

// One raw feature field. `group` is one of the four semantic groups
// (user, item, ctx, cross) or the name of an extra singleton group.
struct FieldSpec {
  std::string name;
  std::string group;
  FieldKind kind = FieldKind::categorical;
  std::uint32_t cardinality = 0;  // categorical only
  int embed_dim = 8;
};

bool is_standard_group(std::string_view group);

// Feature fields plus the tokenizer scalars B, d_0, M, V.
struct FeatureSchema {
  std::vector<FieldSpec> fields;
  // Optional explicit group order. Empty means "order of first appearance".
  std::vector<std::string> groups;
  int granularity = 32;    // B
  int sub_token_dim = 16;  // d_0
  int rvq_levels = 3;      // M
  int codebook_size = 256; // V

  // Throws SchemaError on any violated invariant.
  void validate() const;
  int bits_per_index() const;
  int field_index(std::string_view name) const;  // -1 when absent
  std::uint64_t hash() const;
  int total_embed_width() const;
};

// The k-th contiguous field subset of one group.
struct SubTokenSlot {
  std::string group;
  int index_in_group = 0;
  int field_begin = 0;  // index into FeatureSchema::fields
  int field_end = 0;    // one past the last field
  int raw_width = 0;    // sum of embed_dim over the subset
};

struct GroupInfo {
  std::string name;
  int field_count = 0;
  int sub_tokens = 0;  // K_g
};

std::vector<GroupInfo> group_layout(const FeatureSchema& schema);

// Slots in group-major, k-ascending order. T = result.size().
std::vector<SubTokenSlot> derive_partition(const FeatureSchema& schema);

// T * M * log2(V).
std::uint64_t token_bits(const FeatureSchema& schema);

FeatureSchema load_schema(const std::filesystem::path& path);
FeatureSchema parse_schema(std::string_view json_text);
std::string schema_to_json(const FeatureSchema& schema);
void save_schema(const FeatureSchema& schema, const std::filesystem::path& path);

// Schema used by the desk-scale experiments and the default CLI runs.
FeatureSchema desk_schema();

// 600 fields at d_e = 8 partitioned into T = 27 sub-tokens at B = 32,
// matching the production-scale bit accounting.
FeatureSchema reference_schema();

// Convenience for tests: one group per entry of `group_sizes`, all
// categorical fields with the given cardinality.
FeatureSchema make_uniform_schema(const std::vector<std::pair<std::string, int>>& group_sizes, int granularity,
                                  int sub_token_dim = 16, int rvq_levels = 3, int codebook_size = 256,
                                  std::uint32_t cardinality = 4, int embed_dim = 8);

}  // namespace sif
