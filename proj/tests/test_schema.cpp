#include <gtest/gtest.h>

#include <random>
#include <map>

#include "sif/error.hpp"
#include "sif/schema.hpp"

using namespace sif;

namespace {

std::vector<int> k_of(const FeatureSchema& s) {
  std::vector<int> k;
  for (const auto& g : group_layout(s)) k.push_back(g.sub_tokens);
  return k;
}

FeatureSchema four_groups(int u, int i, int c, int x, int b) {
  auto s = make_uniform_schema({{"user", u}, {"item", i}, {"ctx", c}, {"cross", x}}, b);
  s.validate();
  return s;
}

}  // namespace

TEST(Partition, CeilingPerGroup) {
  const auto s = four_groups(100, 500, 120, 144, 32);
  EXPECT_EQ(k_of(s), (std::vector<int>{4, 16, 4, 5}));
  EXPECT_EQ(derive_partition(s).size(), 29u);
}

TEST(Partition, ExactDivision) {
  const auto s = four_groups(32, 32, 32, 32, 32);
  EXPECT_EQ(k_of(s), (std::vector<int>{1, 1, 1, 1}));
  EXPECT_EQ(derive_partition(s).size(), 4u);
}

TEST(Partition, OneFieldPerGroup) {
  const auto s = four_groups(1, 1, 1, 1, 32);
  const auto slots = derive_partition(s);
  ASSERT_EQ(slots.size(), 4u);
  for (const auto& slot : slots) EXPECT_EQ(slot.field_end - slot.field_begin, 1);
}

TEST(Partition, ChunksAreContiguousAndBalanced) {
  const auto s = four_groups(10, 7, 3, 33, 4);
  const auto slots = derive_partition(s);
  // 10 / 3 chunks -> 4,3,3
  EXPECT_EQ(slots[0].field_end - slots[0].field_begin, 4);
  EXPECT_EQ(slots[1].field_end - slots[1].field_begin, 3);
  EXPECT_EQ(slots[2].field_end - slots[2].field_begin, 3);
  EXPECT_EQ(slots[0].raw_width, 32);
}

TEST(Partition, RandomSchemasCoverEveryFieldOnce) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int b = std::uniform_int_distribution<int>(1, 40)(rng);
    std::vector<std::pair<std::string, int>> groups;
    const char* names[] = {"user", "item", "ctx", "cross"};
    for (const char* n : names)
      if (groups.empty() || rng() % 3 != 0) groups.emplace_back(n, std::uniform_int_distribution<int>(1, 150)(rng));
    auto s = make_uniform_schema(groups, b);
    s.validate();
    const auto slots = derive_partition(s);
    std::vector<int> seen(s.fields.size(), 0);
    std::map<std::string, std::pair<int, int>> sizes;
    for (const auto& slot : slots) {
      ASSERT_LT(slot.field_begin, slot.field_end);
      for (int f = slot.field_begin; f < slot.field_end; ++f) {
        ++seen[f];
        EXPECT_EQ(s.fields[f].group, slot.group);
      }
      const int n = slot.field_end - slot.field_begin;
      auto& [lo, hi] = sizes.try_emplace(slot.group, n, n).first->second;
      lo = std::min(lo, n);
      hi = std::max(hi, n);
    }
    for (int c : seen) EXPECT_EQ(c, 1);
    for (const auto& [g, lh] : sizes) EXPECT_LE(lh.second - lh.first, 1) << g;
    EXPECT_GE(slots.size(), groups.size());
  }
}

TEST(Partition, MonotoneInGranularityAndGroupSize) {
  for (int n = 1; n <= 200; n += 7) {
    int prev = 1 << 30;
    for (int b = 1; b <= 64; ++b) {
      const auto k = k_of(make_uniform_schema({{"user", n}}, b))[0];
      EXPECT_LE(k, prev);
      prev = k;
    }
  }
  for (int b : {1, 5, 32}) {
    int prev = 0;
    for (int n = 1; n <= 200; ++n) {
      const auto k = k_of(make_uniform_schema({{"user", n}}, b))[0];
      EXPECT_GE(k, prev);
      prev = k;
    }
  }
}

TEST(Partition, SingletonGroupHasOneSlot) {
  auto s = four_groups(40, 40, 40, 40, 2);
  s.groups.push_back("item_id");
  s.fields.push_back(FieldSpec{"item_id", "item_id", FieldKind::categorical, 1u << 20, 8});
  s.validate();
  const auto slots = derive_partition(s);
  EXPECT_EQ(slots.back().group, "item_id");
  EXPECT_EQ(slots.back().field_end - slots.back().field_begin, 1);
}

TEST(Partition, Validation) {
  auto s = four_groups(2, 2, 2, 2, 32);
  s.granularity = 0;
  EXPECT_THROW(s.validate(), SchemaError);
  s = four_groups(2, 2, 2, 2, 32);
  s.codebook_size = 3;
  EXPECT_THROW(s.validate(), SchemaError);
  s = four_groups(2, 2, 2, 2, 32);
  s.codebook_size = 1 << 17;
  EXPECT_THROW(s.validate(), SchemaError);
  s = four_groups(2, 2, 2, 2, 32);
  s.fields[0].cardinality = 1;
  EXPECT_THROW(s.validate(), SchemaError);
  s = four_groups(2, 2, 2, 2, 32);
  s.fields[0].embed_dim = 0;
  EXPECT_THROW(s.validate(), SchemaError);
  s = four_groups(2, 2, 2, 2, 32);
  s.groups.push_back("extra");  // declared but empty
  EXPECT_THROW(s.validate(), SchemaError);
}

TEST(TokenBits, Examples) {
  EXPECT_EQ(token_bits(reference_schema()), 648u);
  EXPECT_EQ(derive_partition(reference_schema()).size(), 27u);
  auto s = four_groups(1, 1, 1, 1, 32);
  s.rvq_levels = 1;
  s.codebook_size = 2;
  EXPECT_EQ(token_bits(s), 4u);
  // 20 slots at M=3, V=256
  auto t = four_groups(160, 160, 160, 160, 32);
  EXPECT_EQ(derive_partition(t).size(), 20u);
  EXPECT_EQ(token_bits(t), 480u);
}

TEST(SchemaFile, RoundTripAndStrictKeys) {
  const auto s = desk_schema();
  const auto back = parse_schema(schema_to_json(s));
  EXPECT_EQ(back.hash(), s.hash());
  EXPECT_EQ(back.fields.size(), s.fields.size());
  EXPECT_THROW(parse_schema(R"({"fields": [], "bogus": 1})"), SchemaError);
  EXPECT_THROW(parse_schema("not json"), SchemaError);
  EXPECT_THROW(
      parse_schema(R"({"fields": [{"name": "a", "group": "user", "kind": "numeric", "cardinality": 3}]})"),
      SchemaError);
  const auto ok = parse_schema(
      R"({"sub_token_granularity": 2, "fields": [{"name": "a", "group": "user", "kind": "categorical", "cardinality": 3}]})");
  EXPECT_EQ(ok.granularity, 2);
  EXPECT_EQ(ok.sub_token_dim, 16);
  EXPECT_EQ(ok.fields[0].embed_dim, 8);
}

TEST(SchemaFile, HashSensitiveToContent) {
  auto a = desk_schema();
  auto b = a;
  b.fields[0].embed_dim = 4;
  EXPECT_NE(a.hash(), b.hash());
  b = a;
  b.granularity = 5;
  EXPECT_NE(a.hash(), b.hash());
}
