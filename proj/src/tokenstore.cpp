#include "sif/tokenstore.hpp"

#include <algorithm>
#include <array>
#include <fstream>

#include "sif/binary_io.hpp"
#include "sif/error.hpp"

namespace sif {

std::size_t packed_size(int slots, int levels, int bits) {
  return (static_cast<std::size_t>(slots) * levels * bits + 7) / 8;
}

std::vector<std::uint8_t> pack(const TokenSample& q, int bits) {
  if (bits < 0 || bits > 16) throw DataError("bits per index must be in [0, 16]");
  if (q.indices.size() != static_cast<std::size_t>(q.slots) * q.levels) throw DataError("token sample shape");
  std::vector<std::uint8_t> out(packed_size(q.slots, q.levels, bits), 0);
  std::size_t bit = 0;
  for (auto v : q.indices) {
    if (bits < 16 && v >> bits != 0) throw DataError("index " + std::to_string(v) + " does not fit in " +
                                                     std::to_string(bits) + " bits");
    for (int b = 0; b < bits; ++b, ++bit)
      if ((v >> b) & 1U) out[bit / 8] |= static_cast<std::uint8_t>(1U << (bit % 8));
  }
  return out;
}

TokenSample unpack(std::span<const std::uint8_t> bytes, int slots, int levels, int bits) {
  if (bits < 0 || bits > 16) throw DataError("bits per index must be in [0, 16]");
  if (bytes.size() < packed_size(slots, levels, bits)) throw FormatError("packed token sample is truncated");
  TokenSample q(slots, levels);
  std::size_t bit = 0;
  for (auto& v : q.indices) {
    unsigned x = 0;
    for (int b = 0; b < bits; ++b, ++bit) x |= ((bytes[bit / 8] >> (bit % 8)) & 1U) << b;
    v = static_cast<std::uint16_t>(x);
  }
  return q;
}

namespace {

void write_header(io::Writer& w, const StoreHeader& h) {
  w.put_magic("SIFS");
  w.put(h.version);
  w.put(h.schema_hash);
  w.put(h.slots);
  w.put(h.levels);
  w.put(h.bits);
  w.put(h.count);
}

}  // namespace

StoreHeader write_store(const std::filesystem::path& path, StoreHeader header,
                        std::vector<std::pair<std::uint64_t, TokenSample>> records) {
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t i = 1; i < records.size(); ++i)
    if (records[i].first == records[i - 1].first)
      throw DataError("duplicate sample id " + std::to_string(records[i].first) + " in token store");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write token store " + path.string());
  io::Writer w(out);
  // Zero header first; a crash before the final rewrite leaves no magic.
  const std::array<char, kStoreHeaderSize> blank{};
  w.put_bytes(blank.data(), blank.size());
  for (const auto& [id, q] : records) {
    if (q.slots != header.slots || q.levels != header.levels) throw DataError("token sample shape differs from store");
    w.put(id);
    const auto bytes = pack(q, header.bits);
    w.put_bytes(bytes.data(), bytes.size());
  }
  header.count = records.size();
  out.seekp(0);
  write_header(w, header);
  out.flush();
  if (!w.ok()) throw FormatError("write failed for " + path.string());
  return header;
}

StoreHeader build_store(const ImpressionLog& log, const TokenizerState& tok, const std::filesystem::path& path) {
  if (log.schema().hash() != tok.schema().hash())
    throw FormatError("schema hash mismatch between the log and the tokenizer");
  StoreHeader h;
  h.schema_hash = tok.schema().hash();
  h.slots = static_cast<std::uint16_t>(tok.num_slots());
  h.levels = static_cast<std::uint8_t>(tok.levels());
  h.bits = static_cast<std::uint8_t>(tok.schema().bits_per_index());
  std::vector<std::pair<std::uint64_t, TokenSample>> records;
  for (const auto* s : log.positives()) records.emplace_back(s->sample_id, tokenize(tok, *s));
  return write_store(path, h, std::move(records));
}

TokenStore TokenStore::open(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open token store " + path.string());
  io::Reader r(in, path.string());
  r.expect_magic("SIFS");
  TokenStore s;
  auto& h = s.header_;
  h.version = r.get<std::uint16_t>();
  if (h.version != kStoreVersion) throw FormatError("unsupported token store version " + std::to_string(h.version));
  h.schema_hash = r.get<std::uint64_t>();
  h.slots = r.get<std::uint16_t>();
  h.levels = r.get<std::uint8_t>();
  h.bits = r.get<std::uint8_t>();
  h.count = r.get<std::uint64_t>();
  if (h.bits > 16) throw FormatError("token store: bits per index > 16");
  s.record_size_ = 8 + packed_size(h.slots, h.levels, h.bits);
  const auto expected = kStoreHeaderSize + h.count * s.record_size_;
  const auto actual = std::filesystem::file_size(path);
  if (actual != expected)
    throw FormatError("token store size " + std::to_string(actual) + " does not match header (" +
                      std::to_string(expected) + " bytes)");
  s.records_.resize(h.count * s.record_size_);
  r.read(s.records_.data(), s.records_.size());
  for (std::size_t i = 1; i < h.count; ++i)
    if (s.id_at(i) <= s.id_at(i - 1)) throw FormatError("token store records are not sorted by sample id");
  return s;
}

std::uint64_t TokenStore::id_at(std::size_t i) const {
  const std::uint8_t* p = records_.data() + i * record_size_;
  std::uint64_t id = 0;
  for (int b = 0; b < 8; ++b) id |= static_cast<std::uint64_t>(p[b]) << (8 * b);
  return id;
}

std::optional<TokenSample> TokenStore::lookup(std::uint64_t sample_id) const {
  std::size_t lo = 0, hi = header_.count;
  while (lo < hi) {
    const std::size_t mid = lo + (hi - lo) / 2;
    if (id_at(mid) < sample_id)
      lo = mid + 1;
    else
      hi = mid;
  }
  if (lo == header_.count || id_at(lo) != sample_id) return std::nullopt;
  const std::uint8_t* p = records_.data() + lo * record_size_ + 8;
  return unpack({p, record_size_ - 8}, header_.slots, header_.levels, header_.bits);
}

std::string_view storage_variant_name(StorageVariant v) {
  switch (v) {
    case StorageVariant::hgaq: return "hgaq";
    case StorageVariant::item_id_only: return "item_id_only";
    case StorageVariant::item_plus_key: return "item_plus_key";
    case StorageVariant::dense: return "dense";
  }
  return "?";
}

const std::vector<StorageVariant>& all_storage_variants() {
  static const std::vector<StorageVariant> v{StorageVariant::hgaq, StorageVariant::item_id_only,
                                             StorageVariant::item_plus_key, StorageVariant::dense};
  return v;
}

CompressionReport compression_report(const FeatureSchema& schema, StorageVariant variant, int key_feature_count,
                                     int dense_dim) {
  CompressionReport r;
  r.variant = variant;
  r.snapshot_bits = static_cast<std::uint64_t>(schema.total_embed_width()) * 32;
  switch (variant) {
    case StorageVariant::hgaq: r.token_bits = token_bits(schema); break;
    case StorageVariant::item_id_only: r.token_bits = 64; break;
    case StorageVariant::item_plus_key: r.token_bits = 64 + static_cast<std::uint64_t>(key_feature_count) * 32; break;
    case StorageVariant::dense: r.token_bits = static_cast<std::uint64_t>(dense_dim) * 32; break;
  }
  r.ratio = r.token_bits == 0 ? 0.0 : static_cast<double>(r.snapshot_bits) / static_cast<double>(r.token_bits);
  return r;
}

}  // namespace sif
