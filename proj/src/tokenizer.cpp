#include "sif/tokenizer.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "sif/binary_io.hpp"
#include "sif/error.hpp"
#include "sif/tensor_io.hpp"

namespace sif {

namespace {

Matrix uniform_matrix(int rows, int cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix m(rows, cols);
  for (auto& x : m.data) x = u(rng);
  return m;
}

std::vector<double> row_vector(const Matrix& m, int r = 0) { return {m.row(r).begin(), m.row(r).end()}; }

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace

TokenizerState::TokenizerState(FeatureSchema schema, std::uint64_t seed) : schema_(std::move(schema)) {
  slots_ = derive_partition(schema_);
  std::mt19937_64 rng(seed);
  const int d0 = schema_.sub_token_dim;
  for (const auto& f : schema_.fields) {
    FieldEmbedder e;
    if (f.kind == FieldKind::categorical) {
      e.table = {"embed." + f.name, uniform_matrix(static_cast<int>(f.cardinality), f.embed_dim, 0.5, rng)};
      e.bias = {"embed." + f.name + ".bias", Matrix(0, 0), false, false};
    } else {
      e.table = {"embed." + f.name, uniform_matrix(1, f.embed_dim, 0.5, rng)};
      e.bias = {"embed." + f.name + ".bias", Matrix(1, f.embed_dim), false};
    }
    embedders.push_back(std::move(e));
  }
  for (std::size_t s = 0; s < slots_.size(); ++s) {
    const auto& slot = slots_[s];
    const std::string tag = slot.group + "." + std::to_string(slot.index_in_group);
    proj.push_back({"proj." + tag, uniform_matrix(slot.raw_width, d0, 1.0 / std::sqrt(slot.raw_width), rng)});
    std::vector<ad::Param> levels;
    for (int m = 0; m < schema_.rvq_levels; ++m) {
      ad::Param cb{"codebook." + tag + "." + std::to_string(m),
                   uniform_matrix(schema_.codebook_size, d0, 1.0 / std::sqrt(d0), rng)};
      for (int j = 0; j < d0; ++j) cb.value(0, j) = 0.0;  // zero row
      levels.push_back(std::move(cb));
    }
    codebooks.push_back(std::move(levels));
  }
  const int in = num_slots() * d0;
  const int hidden = 4 * in;
  aux_w1 = {"aux.w1", uniform_matrix(in, hidden, 1.0 / std::sqrt(in), rng)};
  aux_b1 = {"aux.b1", Matrix(1, hidden), false};
  aux_w2 = {"aux.w2", uniform_matrix(hidden, 1, 1.0 / std::sqrt(hidden), rng)};
  aux_b2 = {"aux.b2", Matrix(1, 1), false};
}

std::vector<ad::Param*> TokenizerState::embedder_parameters() {
  std::vector<ad::Param*> out;
  for (auto& e : embedders) {
    out.push_back(&e.table);
    if (e.bias.value.size() > 0) out.push_back(&e.bias);
  }
  return out;
}

std::vector<ad::Param*> TokenizerState::parameters() {
  auto out = embedder_parameters();
  for (auto& p : proj) out.push_back(&p);
  for (auto& levels : codebooks)
    for (auto& c : levels) out.push_back(&c);
  for (auto* p : {&aux_w1, &aux_b1, &aux_w2, &aux_b2}) out.push_back(p);
  return out;
}

std::vector<const ad::Param*> TokenizerState::parameters() const {
  auto mut = const_cast<TokenizerState*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

namespace build {

std::vector<ad::Var> embed_fields(ad::Graph& g, const TokenizerState& s, std::span<const RawSample* const> batch) {
  const auto& schema = s.schema();
  const int R = static_cast<int>(batch.size());
  std::vector<ad::Var> per_field(schema.fields.size());
  for (std::size_t f = 0; f < schema.fields.size(); ++f) {
    const auto& spec = schema.fields[f];
    const auto& emb = s.embedders[f];
    if (spec.kind == FieldKind::categorical) {
      std::vector<int> rows(R);
      for (int r = 0; r < R; ++r) {
        const auto v = batch[r]->values.at(f).category;
        if (v >= spec.cardinality)
          throw DataError("field '" + spec.name + "': category " + std::to_string(v) + " out of range");
        rows[r] = static_cast<int>(v);
      }
      per_field[f] = g.gather_rows(g.param(emb.table), std::move(rows));
    } else {
      Matrix x(R, 1);
      for (int r = 0; r < R; ++r) x(r, 0) = batch[r]->values.at(f).numeric;
      per_field[f] = g.add_row(g.matmul(g.constant(std::move(x)), g.param(emb.table)), g.param(emb.bias));
    }
  }
  std::vector<ad::Var> out;
  for (const auto& slot : s.slots()) {
    std::vector<ad::Var> parts(per_field.begin() + slot.field_begin, per_field.begin() + slot.field_end);
    out.push_back(parts.size() == 1 ? parts.front() : g.concat_cols(parts));
  }
  return out;
}

std::vector<ad::Var> project(ad::Graph& g, const TokenizerState& s, const std::vector<ad::Var>& raw) {
  std::vector<ad::Var> out;
  for (std::size_t k = 0; k < raw.size(); ++k) out.push_back(g.matmul(raw[k], g.param(s.proj[k])));
  return out;
}

Rvq quantize(ad::Graph& g, const TokenizerState& s, const std::vector<ad::Var>& projected) {
  Rvq out;
  const int T = s.num_slots();
  out.residual.resize(T);
  out.code.resize(T);
  out.indices.resize(T);
  for (int k = 0; k < T; ++k) {
    ad::Var r = projected[k];
    ad::Var recon{};
    for (int m = 0; m < s.levels(); ++m) {
      ad::Var cb = g.param(s.codebooks[k][m]);
      auto idx = g.nearest_rows(r, cb);
      ad::Var c = g.gather_rows(cb, idx);
      out.residual[k].push_back(r);
      out.code[k].push_back(c);
      out.indices[k].push_back(std::move(idx));
      recon = m == 0 ? c : g.add(recon, c);
      if (m + 1 < s.levels()) r = g.sub(r, c);
    }
    out.reconstruction.push_back(recon);
  }
  return out;
}

ad::Var vq_loss(ad::Graph& g, const Rvq& rvq, double commitment) {
  std::vector<std::pair<ad::Var, double>> terms;
  for (std::size_t k = 0; k < rvq.residual.size(); ++k) {
    for (std::size_t m = 0; m < rvq.residual[k].size(); ++m) {
      const ad::Var r = rvq.residual[k][m];
      const ad::Var c = rvq.code[k][m];
      terms.emplace_back(g.sum_squares(g.sub(g.stop_gradient(r), c)), 1.0);
      terms.emplace_back(g.sum_squares(g.sub(r, g.stop_gradient(c))), commitment);
    }
  }
  return g.weighted_sum(terms);
}

std::vector<ad::Var> straight_through(ad::Graph& g, const std::vector<ad::Var>& projected, const Rvq& rvq) {
  std::vector<ad::Var> out;
  for (std::size_t k = 0; k < projected.size(); ++k)
    out.push_back(g.straight_through(projected[k], rvq.reconstruction[k]));
  return out;
}

std::vector<ad::Var> lookup(ad::Graph& g, const TokenizerState& s, std::span<const TokenSample> tokens) {
  std::vector<ad::Var> out;
  for (int k = 0; k < s.num_slots(); ++k) {
    ad::Var sum{};
    for (int m = 0; m < s.levels(); ++m) {
      std::vector<int> rows;
      rows.reserve(tokens.size());
      for (const auto& t : tokens) {
        if (t.slots != s.num_slots() || t.levels != s.levels())
          throw DataError("token sample shape does not match the tokenizer");
        const int q = t.at(k, m);
        if (q >= s.codebook_size()) throw DataError("token index " + std::to_string(q) + " >= V");
        rows.push_back(q);
      }
      ad::Var c = g.gather_rows(g.param(s.codebooks[k][m]), std::move(rows));
      sum = m == 0 ? c : g.add(sum, c);
    }
    out.push_back(sum);
  }
  return out;
}

ad::Var aux_logit(ad::Graph& g, const TokenizerState& s, const std::vector<ad::Var>& slot_vectors, int row) {
  std::vector<ad::Var> parts;
  for (auto v : slot_vectors) parts.push_back(g.rows(v) == 1 ? v : g.slice_rows(v, row, 1));
  ad::Var x = g.concat_cols(parts);
  ad::Var h = g.relu(g.add_row(g.matmul(x, g.param(s.aux_w1)), g.param(s.aux_b1)));
  return g.add_row(g.matmul(h, g.param(s.aux_w2)), g.param(s.aux_b2));
}

}  // namespace build

std::vector<std::vector<double>> embed_fields(const TokenizerState& s, const RawSample& raw) {
  check_sample(s.schema(), raw);
  ad::Graph g;
  const RawSample* batch[] = {&raw};
  const auto vars = build::embed_fields(g, s, batch);
  std::vector<std::vector<double>> out;
  for (auto v : vars) out.push_back(row_vector(g.value(v)));
  return out;
}

std::vector<double> project(const TokenizerState& s, int slot, std::span<const double> raw) {
  if (slot < 0 || slot >= s.num_slots()) throw std::out_of_range("slot index");
  if (static_cast<int>(raw.size()) != s.proj[slot].value.rows)
    throw DataError("project: input width " + std::to_string(raw.size()) + " does not match W_proj rows " +
                    std::to_string(s.proj[slot].value.rows));
  ad::Graph g;
  auto x = g.constant(Matrix::from_rows(1, static_cast<int>(raw.size()), {raw.begin(), raw.end()}));
  return row_vector(g.value(g.matmul(x, g.param(s.proj[slot]))));
}

QuantizationTrace quantize(const TokenizerState& s, const std::vector<std::vector<double>>& projected) {
  if (static_cast<int>(projected.size()) != s.num_slots()) throw DataError("quantize: expected one vector per slot");
  ad::Graph g;
  std::vector<ad::Var> z;
  for (const auto& v : projected) {
    if (static_cast<int>(v.size()) != s.dim()) throw DataError("quantize: vector width must equal d_0");
    z.push_back(g.constant(Matrix::from_rows(1, s.dim(), v)));
  }
  const auto rvq = build::quantize(g, s, z);
  QuantizationTrace t;
  t.indices = TokenSample(s.num_slots(), s.levels());
  for (int k = 0; k < s.num_slots(); ++k) {
    t.projected.push_back(projected[k]);
    std::vector<std::vector<double>> res;
    for (int m = 0; m < s.levels(); ++m) {
      res.push_back(row_vector(g.value(rvq.residual[k][m])));
      t.indices.at(k, m) = static_cast<std::uint16_t>(rvq.indices[k][m][0]);
    }
    t.residuals.push_back(std::move(res));
    t.reconstruction.push_back(row_vector(g.value(rvq.reconstruction[k])));
  }
  return t;
}

TokenSample tokenize(const TokenizerState& s, const RawSample& raw) {
  check_sample(s.schema(), raw);
  ad::Graph g;
  const RawSample* batch[] = {&raw};
  const auto rvq = build::quantize(g, s, build::project(g, s, build::embed_fields(g, s, batch)));
  TokenSample t(s.num_slots(), s.levels());
  for (int k = 0; k < s.num_slots(); ++k)
    for (int m = 0; m < s.levels(); ++m) t.at(k, m) = static_cast<std::uint16_t>(rvq.indices[k][m][0]);
  return t;
}

double aux_predict(const TokenizerState& s, const QuantizationTrace& trace) {
  ad::Graph g;
  std::vector<ad::Var> parts;
  for (const auto& v : trace.reconstruction) parts.push_back(g.constant(Matrix::from_rows(1, s.dim(), v)));
  return sigmoid(g.scalar(build::aux_logit(g, s, parts)));
}

TokenizerLosses tokenizer_losses(const TokenizerState& s, const RawSample& raw, int label) {
  check_sample(s.schema(), raw);
  ad::Graph g;
  const RawSample* batch[] = {&raw};
  const auto z = build::project(g, s, build::embed_fields(g, s, batch));
  const auto rvq = build::quantize(g, s, z);
  TokenizerLosses out;
  out.token = g.scalar(g.bce_with_logits(build::aux_logit(g, s, build::straight_through(g, z, rvq)), label));
  out.vq = g.scalar(build::vq_loss(g, rvq));
  return out;
}

void save_tokenizer(const TokenizerState& s, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write tokenizer checkpoint " + path.string());
  io::Writer w(out);
  w.put_magic("SIFC");
  w.put(kCheckpointVersion);
  w.put(s.schema().hash());
  const auto layout = group_layout(s.schema());
  w.put(static_cast<std::uint8_t>(layout.size()));
  for (const auto& gi : layout) w.put(static_cast<std::uint16_t>(gi.sub_tokens));
  w.put(static_cast<std::uint16_t>(s.dim()));
  w.put(static_cast<std::uint8_t>(s.levels()));
  w.put(static_cast<std::uint32_t>(s.codebook_size()));
  write_tensors(w, s.parameters());
  if (!w.ok()) throw FormatError("write failed for " + path.string());
}

TokenizerState load_tokenizer(const std::filesystem::path& path, const FeatureSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open tokenizer checkpoint " + path.string());
  io::Reader r(in, path.string());
  r.expect_magic("SIFC");
  if (r.get<std::uint16_t>() != kCheckpointVersion) throw FormatError("unsupported tokenizer checkpoint version");
  if (r.get<std::uint64_t>() != schema.hash()) throw FormatError("tokenizer checkpoint schema hash mismatch");
  const auto layout = group_layout(schema);
  if (r.get<std::uint8_t>() != layout.size()) throw FormatError("tokenizer checkpoint group count mismatch");
  for (const auto& gi : layout)
    if (r.get<std::uint16_t>() != gi.sub_tokens) throw FormatError("tokenizer checkpoint K_g mismatch");
  if (r.get<std::uint16_t>() != schema.sub_token_dim || r.get<std::uint8_t>() != schema.rvq_levels ||
      r.get<std::uint32_t>() != static_cast<std::uint32_t>(schema.codebook_size))
    throw FormatError("tokenizer checkpoint d_0/M/V mismatch");
  TokenizerState s(schema, 0);
  read_tensors(r, s.parameters());
  return s;
}

}  // namespace sif
