#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "sif/datagen.hpp"
#include "sif/tokenizer.hpp"

namespace sif {

// ceil(T * M * bits / 8).
std::size_t packed_size(int slots, int levels, int bits);

// Slot-major, level-ascending, `bits` per index, LSB-first within bytes.
std::vector<std::uint8_t> pack(const TokenSample& q, int bits);
TokenSample unpack(std::span<const std::uint8_t> bytes, int slots, int levels, int bits);

inline constexpr std::uint16_t kStoreVersion = 1;
inline constexpr std::size_t kStoreHeaderSize = 26;

struct StoreHeader {
  std::uint16_t version = kStoreVersion;
  std::uint64_t schema_hash = 0;
  std::uint16_t slots = 0;
  std::uint8_t levels = 0;
  std::uint8_t bits = 0;
  std::uint64_t count = 0;
  bool operator==(const StoreHeader&) const = default;
};

// Writes records sorted by sample id; the header goes in last.
StoreHeader write_store(const std::filesystem::path& path, StoreHeader header,
                        std::vector<std::pair<std::uint64_t, TokenSample>> records);

// Tokenizes every positive sample of the log with a frozen tokenizer.
StoreHeader build_store(const ImpressionLog& log, const TokenizerState& tok, const std::filesystem::path& path);

// Read-only view of a completed store, fully loaded into memory.
class TokenStore {
 public:
  static TokenStore open(const std::filesystem::path& path);

  const StoreHeader& header() const { return header_; }
  std::size_t size() const { return header_.count; }
  // Binary search by sample id; nullopt when absent.
  std::optional<TokenSample> lookup(std::uint64_t sample_id) const;
  std::uint64_t id_at(std::size_t i) const;

 private:
  StoreHeader header_;
  std::size_t record_size_ = 0;
  std::vector<std::uint8_t> records_;
};

enum class StorageVariant { hgaq, item_id_only, item_plus_key, dense };

std::string_view storage_variant_name(StorageVariant v);
const std::vector<StorageVariant>& all_storage_variants();

struct CompressionReport {
  StorageVariant variant = StorageVariant::hgaq;
  std::uint64_t snapshot_bits = 0;
  std::uint64_t token_bits = 0;
  double ratio = 0.0;
};

// Snapshot = every field embedding in f32. Item+key stores a 64-bit id plus
// `key_feature_count` 32-bit scalars; dense stores `dense_dim` f32 values.
CompressionReport compression_report(const FeatureSchema& schema, StorageVariant variant,
                                     int key_feature_count = 24, int dense_dim = 512);

}  // namespace sif
