#include "sif/autodiff.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace sif::ad {

namespace {

void check(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

}  // namespace

Matrix& GradStore::at(const Param& p) {
  auto [it, inserted] = grads_.try_emplace(&p);
  if (inserted) it->second = Matrix(p.value.rows, p.value.cols);
  return it->second;
}

const Matrix* GradStore::find(const Param& p) const {
  auto it = grads_.find(&p);
  return it == grads_.end() ? nullptr : &it->second;
}

void GradStore::add(const GradStore& other) {
  for (const auto& [p, g] : other.grads_) {
    auto& mine = at(*p);
    for (std::size_t i = 0; i < g.size(); ++i) mine.data[i] += g.data[i];
  }
}

std::vector<int> FreezeTape::indices(std::vector<int> computed) {
  switch (mode_) {
    case Mode::off:
      return computed;
    case Mode::record:
      indices_.push_back(computed);
      return computed;
    case Mode::replay: {
      if (idx_pos_ >= indices_.size()) throw std::logic_error("freeze tape: replay ran past recorded indices");
      const auto& rec = indices_[idx_pos_++];
      if (rec != computed) index_flip_ = true;
      return rec;
    }
  }
  return computed;
}

Matrix FreezeTape::value(const Matrix& computed) {
  switch (mode_) {
    case Mode::off:
      return computed;
    case Mode::record:
      values_.push_back(computed);
      return computed;
    case Mode::replay:
      if (val_pos_ >= values_.size()) throw std::logic_error("freeze tape: replay ran past recorded values");
      return values_[val_pos_++];
  }
  return computed;
}

int nearest_row(std::span<const double> x, const Matrix& codebook) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int v = 0; v < codebook.rows; ++v) {
    const double d = squared_distance(x, codebook.row(v));
    if (d < best_d) {
      best_d = d;
      best = v;
    }
  }
  return best;
}

Var Graph::push(Matrix value, bool needs_grad) {
  auto n = std::make_unique<Node>();
  n->own = std::move(value);
  n->value = &n->own;
  n->needs_grad = needs_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

bool Graph::any_needs_grad(std::initializer_list<Var> vs) const {
  for (auto v : vs)
    if (nodes_[v.id]->needs_grad) return true;
  return false;
}

Matrix& Graph::grad(Var v) {
  Node& n = node(v);
  if (n.grad == nullptr) {
    n.own_grad = Matrix(n.value->rows, n.value->cols);
    n.grad = &n.own_grad;
  }
  return *n.grad;
}

Var Graph::constant(Matrix m) { return push(std::move(m), false); }

Var Graph::param(const Param& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{it->second};
  auto n = std::make_unique<Node>();
  n->value = &p.value;
  n->needs_grad = grads_ != nullptr && p.trainable;
  if (n->needs_grad) n->grad = &grads_->at(p);
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size() - 1);
  param_nodes_.emplace(&p, id);
  return Var{id};
}

Var Graph::matmul(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  check(A.cols == B.rows, "matmul: inner dimensions differ");
  Matrix out(A.rows, B.cols);
  gemm_acc(A.data.data(), B.data.data(), out.data.data(), A.rows, A.cols, B.cols);
  macs_ += static_cast<std::uint64_t>(A.rows) * A.cols * B.cols;
  Var o = push(std::move(out), any_needs_grad({a, b}));
  if (needs_grad(o)) {
    node(o).backward = [this, a, b, o] {
      const Matrix& A = value(a);
      const Matrix& B = value(b);
      const Matrix& G = grad(o);
      const int n = A.rows, k = A.cols, m = B.cols;
      if (needs_grad(a)) {
        Matrix& dA = grad(a);
        for (int i = 0; i < n; ++i)
          for (int p = 0; p < k; ++p) {
            double s = 0.0;
            for (int j = 0; j < m; ++j) s += G(i, j) * B(p, j);
            dA(i, p) += s;
          }
      }
      if (needs_grad(b)) {
        Matrix& dB = grad(b);
        for (int i = 0; i < n; ++i)
          for (int p = 0; p < k; ++p) {
            const double av = A(i, p);
            if (av == 0.0) continue;
            for (int j = 0; j < m; ++j) dB(p, j) += av * G(i, j);
          }
      }
    };
  }
  return o;
}

Var Graph::add(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  check(A.same_shape(B), "add: shape mismatch");
  Matrix out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B.data[i];
  Var o = push(std::move(out), any_needs_grad({a, b}));
  if (needs_grad(o)) {
    node(o).backward = [this, a, b, o] {
      const Matrix& G = grad(o);
      for (Var x : {a, b}) {
        if (!needs_grad(x)) continue;
        Matrix& d = grad(x);
        for (std::size_t i = 0; i < G.size(); ++i) d.data[i] += G.data[i];
      }
    };
  }
  return o;
}

Var Graph::sub(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  check(A.same_shape(B), "sub: shape mismatch");
  Matrix out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= B.data[i];
  Var o = push(std::move(out), any_needs_grad({a, b}));
  if (needs_grad(o)) {
    node(o).backward = [this, a, b, o] {
      const Matrix& G = grad(o);
      if (needs_grad(a)) {
        Matrix& d = grad(a);
        for (std::size_t i = 0; i < G.size(); ++i) d.data[i] += G.data[i];
      }
      if (needs_grad(b)) {
        Matrix& d = grad(b);
        for (std::size_t i = 0; i < G.size(); ++i) d.data[i] -= G.data[i];
      }
    };
  }
  return o;
}

Var Graph::add_row(Var a, Var row) {
  const Matrix& A = value(a);
  const Matrix& R = value(row);
  check(R.rows == 1 && R.cols == A.cols, "add_row: row shape mismatch");
  Matrix out = A;
  for (int i = 0; i < A.rows; ++i)
    for (int j = 0; j < A.cols; ++j) out(i, j) += R.data[j];
  Var o = push(std::move(out), any_needs_grad({a, row}));
  if (needs_grad(o)) {
    node(o).backward = [this, a, row, o] {
      const Matrix& G = grad(o);
      if (needs_grad(a)) {
        Matrix& d = grad(a);
        for (std::size_t i = 0; i < G.size(); ++i) d.data[i] += G.data[i];
      }
      if (needs_grad(row)) {
        Matrix& d = grad(row);
        for (int i = 0; i < G.rows; ++i)
          for (int j = 0; j < G.cols; ++j) d.data[j] += G(i, j);
      }
    };
  }
  return o;
}

Var Graph::scale(Var a, double s) {
  Matrix out = value(a);
  for (auto& x : out.data) x *= s;
  Var o = push(std::move(out), needs_grad(a));
  if (needs_grad(o)) {
    node(o).backward = [this, a, o, s] {
      const Matrix& G = grad(o);
      Matrix& d = grad(a);
      for (std::size_t i = 0; i < G.size(); ++i) d.data[i] += s * G.data[i];
    };
  }
  return o;
}

Var Graph::relu(Var a) {
  Matrix out = value(a);
  for (auto& x : out.data) x = x > 0.0 ? x : 0.0;
  Var o = push(std::move(out), needs_grad(a));
  if (needs_grad(o)) {
    node(o).backward = [this, a, o] {
      const Matrix& X = value(a);
      const Matrix& G = grad(o);
      Matrix& d = grad(a);
      for (std::size_t i = 0; i < G.size(); ++i)
        if (X.data[i] > 0.0) d.data[i] += G.data[i];
    };
  }
  return o;
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Matrix& X = value(x);
  const Matrix& Gm = value(gamma);
  const Matrix& Bt = value(beta);
  check(Gm.rows == 1 && Gm.cols == X.cols && Bt.same_shape(Gm), "layer_norm: parameter shape mismatch");
  const int n = X.rows, d = X.cols;
  Matrix out(n, d);
  auto xhat = std::make_shared<Matrix>(n, d);
  auto inv_sd = std::make_shared<std::vector<double>>(n);
  for (int i = 0; i < n; ++i) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += X(i, j);
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (X(i, j) - mean) * (X(i, j) - mean);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_sd)[i] = is;
    for (int j = 0; j < d; ++j) {
      const double h = (X(i, j) - mean) * is;
      (*xhat)(i, j) = h;
      out(i, j) = Gm.data[j] * h + Bt.data[j];
    }
  }
  Var o = push(std::move(out), any_needs_grad({x, gamma, beta}));
  if (needs_grad(o)) {
    node(o).backward = [this, x, gamma, beta, o, xhat, inv_sd] {
      const Matrix& G = grad(o);
      const Matrix& Gm = value(gamma);
      const int n = G.rows, d = G.cols;
      if (needs_grad(gamma)) {
        Matrix& dg = grad(gamma);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) dg.data[j] += G(i, j) * (*xhat)(i, j);
      }
      if (needs_grad(beta)) {
        Matrix& db = grad(beta);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) db.data[j] += G(i, j);
      }
      if (needs_grad(x)) {
        Matrix& dx = grad(x);
        for (int i = 0; i < n; ++i) {
          double m1 = 0.0, m2 = 0.0;
          for (int j = 0; j < d; ++j) {
            const double dh = G(i, j) * Gm.data[j];
            m1 += dh;
            m2 += dh * (*xhat)(i, j);
          }
          m1 /= d;
          m2 /= d;
          for (int j = 0; j < d; ++j) {
            const double dh = G(i, j) * Gm.data[j];
            dx(i, j) += (*inv_sd)[i] * (dh - m1 - (*xhat)(i, j) * m2);
          }
        }
      }
    };
  }
  return o;
}

Var Graph::attention(Var q, Var k, Var v, const AttentionLayout& lay, int heads,
                     const std::vector<std::uint8_t>* key_mask) {
  const Matrix& Q = value(q);
  const Matrix& K = value(k);
  const Matrix& V = value(v);
  check(Q.same_shape(K) && Q.same_shape(V), "attention: q/k/v shape mismatch");
  check(heads > 0 && Q.cols % heads == 0, "attention: heads must divide the model width");
  check(key_mask == nullptr || key_mask->size() == static_cast<std::size_t>(Q.rows), "attention: mask size");
  const int d = Q.cols;
  const int dh = d / heads;
  const int S = lay.seq;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto index = [lay](int g, int s) { return g * lay.group_stride + s * lay.seq_stride; };
  check(index(lay.groups - 1, S - 1) < Q.rows, "attention: layout exceeds operand");

  // probs[(g*heads + h)*S*S + i*S + j]; masked keys keep probability 0.
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(lay.groups) * heads * S * S, 0.0);
  Matrix out(Q.rows, d);
  std::vector<double> logits(S);
  for (int g = 0; g < lay.groups; ++g) {
    int valid = 0;
    for (int j = 0; j < S; ++j) valid += (key_mask == nullptr || (*key_mask)[index(g, j)]) ? 1 : 0;
    macs_ += 2ULL * S * valid * d;
    attention_macs_ += 2ULL * S * valid * d;
    for (int h = 0; h < heads; ++h) {
      const int c0 = h * dh;
      double* P = probs->data() + (static_cast<std::size_t>(g) * heads + h) * S * S;
      for (int i = 0; i < S; ++i) {
        const int qi = index(g, i);
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < S; ++j) {
          const int kj = index(g, j);
          if (key_mask != nullptr && !(*key_mask)[kj]) continue;
          double s = 0.0;
          for (int c = 0; c < dh; ++c) s += Q(qi, c0 + c) * K(kj, c0 + c);
          logits[j] = s * scale;
          mx = std::max(mx, logits[j]);
        }
        double z = 0.0;
        for (int j = 0; j < S; ++j) {
          const int kj = index(g, j);
          if (key_mask != nullptr && !(*key_mask)[kj]) continue;
          P[i * S + j] = std::exp(logits[j] - mx);
          z += P[i * S + j];
        }
        for (int j = 0; j < S; ++j) {
          if (P[i * S + j] == 0.0) continue;
          P[i * S + j] /= z;
          const double p = P[i * S + j];
          const int vj = index(g, j);
          for (int c = 0; c < dh; ++c) out(qi, c0 + c) += p * V(vj, c0 + c);
        }
      }
    }
  }
  Var o = push(std::move(out), any_needs_grad({q, k, v}));
  if (needs_grad(o)) {
    node(o).backward = [this, q, k, v, o, lay, heads, probs, scale, index] {
      const Matrix& Q = value(q);
      const Matrix& K = value(k);
      const Matrix& V = value(v);
      const Matrix& G = grad(o);
      const int d = Q.cols, dh = d / heads, S = lay.seq;
      Matrix* dQ = needs_grad(q) ? &grad(q) : nullptr;
      Matrix* dK = needs_grad(k) ? &grad(k) : nullptr;
      Matrix* dV = needs_grad(v) ? &grad(v) : nullptr;
      std::vector<double> dP(S);
      for (int g = 0; g < lay.groups; ++g) {
        for (int h = 0; h < heads; ++h) {
          const int c0 = h * dh;
          const double* P = probs->data() + (static_cast<std::size_t>(g) * heads + h) * S * S;
          for (int i = 0; i < S; ++i) {
            const int qi = index(g, i);
            double dot = 0.0;
            for (int j = 0; j < S; ++j) {
              const double p = P[i * S + j];
              if (p == 0.0) {
                dP[j] = 0.0;
                continue;
              }
              const int vj = index(g, j);
              double s = 0.0;
              for (int c = 0; c < dh; ++c) s += G(qi, c0 + c) * V(vj, c0 + c);
              dP[j] = s;
              dot += p * s;
              if (dV != nullptr)
                for (int c = 0; c < dh; ++c) (*dV)(vj, c0 + c) += p * G(qi, c0 + c);
            }
            for (int j = 0; j < S; ++j) {
              const double p = P[i * S + j];
              if (p == 0.0) continue;
              const double ds = p * (dP[j] - dot) * scale;
              const int kj = index(g, j);
              if (dQ != nullptr)
                for (int c = 0; c < dh; ++c) (*dQ)(qi, c0 + c) += ds * K(kj, c0 + c);
              if (dK != nullptr)
                for (int c = 0; c < dh; ++c) (*dK)(kj, c0 + c) += ds * Q(qi, c0 + c);
            }
          }
        }
      }
    };
  }
  return o;
}

Var Graph::gather_rows(Var table, std::vector<int> rows) {
  const Matrix& T = value(table);
  Matrix out(static_cast<int>(rows.size()), T.cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    check(rows[r] >= 0 && rows[r] < T.rows, "gather_rows: index out of range");
    std::copy(T.row(rows[r]).begin(), T.row(rows[r]).end(), out.row(static_cast<int>(r)).begin());
  }
  Var o = push(std::move(out), needs_grad(table));
  if (needs_grad(o)) {
    node(o).backward = [this, table, o, rows = std::move(rows)] {
      const Matrix& G = grad(o);
      Matrix& d = grad(table);
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (int j = 0; j < G.cols; ++j) d(rows[r], j) += G(static_cast<int>(r), j);
    };
  }
  return o;
}

Var Graph::slice_rows(Var a, int begin, int count) {
  const Matrix& A = value(a);
  check(begin >= 0 && count >= 0 && begin + count <= A.rows, "slice_rows: range out of bounds");
  Matrix out(count, A.cols);
  std::copy(A.data.begin() + static_cast<std::ptrdiff_t>(begin) * A.cols,
            A.data.begin() + static_cast<std::ptrdiff_t>(begin + count) * A.cols, out.data.begin());
  Var o = push(std::move(out), needs_grad(a));
  if (needs_grad(o)) {
    node(o).backward = [this, a, o, begin] {
      const Matrix& G = grad(o);
      Matrix& d = grad(a);
      const std::size_t off = static_cast<std::size_t>(begin) * G.cols;
      for (std::size_t i = 0; i < G.size(); ++i) d.data[off + i] += G.data[i];
    };
  }
  return o;
}

Var Graph::concat_rows(const std::vector<Var>& parts) {
  check(!parts.empty(), "concat_rows: no inputs");
  const int cols = value(parts.front()).cols;
  int rows = 0;
  bool ng = false;
  for (Var p : parts) {
    check(value(p).cols == cols, "concat_rows: column mismatch");
    rows += value(p).rows;
    ng = ng || needs_grad(p);
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  for (Var p : parts) {
    const Matrix& P = value(p);
    std::copy(P.data.begin(), P.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += P.size();
  }
  Var o = push(std::move(out), ng);
  if (ng) {
    node(o).backward = [this, parts, o] {
      const Matrix& G = grad(o);
      std::size_t off = 0;
      for (Var p : parts) {
        const std::size_t n = value(p).size();
        if (needs_grad(p)) {
          Matrix& d = grad(p);
          for (std::size_t i = 0; i < n; ++i) d.data[i] += G.data[off + i];
        }
        off += n;
      }
    };
  }
  return o;
}

Var Graph::concat_cols(const std::vector<Var>& parts) {
  check(!parts.empty(), "concat_cols: no inputs");
  const int rows = value(parts.front()).rows;
  int cols = 0;
  bool ng = false;
  for (Var p : parts) {
    check(value(p).rows == rows, "concat_cols: row mismatch");
    cols += value(p).cols;
    ng = ng || needs_grad(p);
  }
  Matrix out(rows, cols);
  int c0 = 0;
  for (Var p : parts) {
    const Matrix& P = value(p);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < P.cols; ++j) out(i, c0 + j) = P(i, j);
    c0 += P.cols;
  }
  Var o = push(std::move(out), ng);
  if (ng) {
    node(o).backward = [this, parts, o] {
      const Matrix& G = grad(o);
      int c0 = 0;
      for (Var p : parts) {
        const int pc = value(p).cols;
        if (needs_grad(p)) {
          Matrix& d = grad(p);
          for (int i = 0; i < G.rows; ++i)
            for (int j = 0; j < pc; ++j) d(i, j) += G(i, c0 + j);
        }
        c0 += pc;
      }
    };
  }
  return o;
}

Var Graph::reshape(Var a, int rows, int cols) {
  const Matrix& A = value(a);
  check(static_cast<std::size_t>(rows) * cols == A.size(), "reshape: element count differs");
  Matrix out = Matrix::from_rows(rows, cols, A.data);
  Var o = push(std::move(out), needs_grad(a));
  if (needs_grad(o)) {
    node(o).backward = [this, a, o] {
      const Matrix& G = grad(o);
      Matrix& d = grad(a);
      for (std::size_t i = 0; i < G.size(); ++i) d.data[i] += G.data[i];
    };
  }
  return o;
}

Var Graph::interleave(const std::vector<Var>& parts) {
  check(!parts.empty(), "interleave: no inputs");
  const int S = static_cast<int>(parts.size());
  const int R = value(parts.front()).rows;
  const int d = value(parts.front()).cols;
  bool ng = false;
  for (Var p : parts) {
    check(value(p).rows == R && value(p).cols == d, "interleave: shape mismatch");
    ng = ng || needs_grad(p);
  }
  Matrix out(R * S, d);
  for (int s = 0; s < S; ++s) {
    const Matrix& P = value(parts[s]);
    for (int r = 0; r < R; ++r)
      for (int j = 0; j < d; ++j) out(r * S + s, j) = P(r, j);
  }
  Var o = push(std::move(out), ng);
  if (ng) {
    node(o).backward = [this, parts, o, S, R, d] {
      const Matrix& G = grad(o);
      for (int s = 0; s < S; ++s) {
        if (!needs_grad(parts[s])) continue;
        Matrix& D = grad(parts[s]);
        for (int r = 0; r < R; ++r)
          for (int j = 0; j < d; ++j) D(r, j) += G(r * S + s, j);
      }
    };
  }
  return o;
}

Var Graph::group_mean(Var a, int group) {
  const Matrix& A = value(a);
  check(group > 0 && A.rows % group == 0, "group_mean: rows not divisible by group");
  const int R = A.rows / group;
  Matrix out(R, A.cols);
  for (int r = 0; r < R; ++r)
    for (int t = 0; t < group; ++t)
      for (int j = 0; j < A.cols; ++j) out(r, j) += A(r * group + t, j);
  for (auto& x : out.data) x /= group;
  Var o = push(std::move(out), needs_grad(a));
  if (needs_grad(o)) {
    node(o).backward = [this, a, o, group] {
      const Matrix& G = grad(o);
      Matrix& d = grad(a);
      const double w = 1.0 / group;
      for (int r = 0; r < G.rows; ++r)
        for (int t = 0; t < group; ++t)
          for (int j = 0; j < G.cols; ++j) d(r * group + t, j) += w * G(r, j);
    };
  }
  return o;
}

Var Graph::sum_squares(Var a) {
  const Matrix& A = value(a);
  double s = 0.0;
  for (double x : A.data) s += x * x;
  Var o = push(Matrix::from_rows(1, 1, {s}), needs_grad(a));
  if (needs_grad(o)) {
    node(o).backward = [this, a, o] {
      const double g = grad(o).data[0];
      const Matrix& A = value(a);
      Matrix& d = grad(a);
      for (std::size_t i = 0; i < A.size(); ++i) d.data[i] += 2.0 * g * A.data[i];
    };
  }
  return o;
}

Var Graph::bce_with_logits(Var logit, double label) {
  const Matrix& Z = value(logit);
  check(Z.size() == 1, "bce_with_logits: expects a 1 x 1 logit");
  const double z = Z.data[0];
  // log(1 + e^z) - y z, evaluated without overflow.
  const double loss = std::max(z, 0.0) - z * label + std::log1p(std::exp(-std::abs(z)));
  Var o = push(Matrix::from_rows(1, 1, {loss}), needs_grad(logit));
  if (needs_grad(o)) {
    node(o).backward = [this, logit, o, label] {
      const double z = value(logit).data[0];
      const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      grad(logit).data[0] += grad(o).data[0] * (p - label);
    };
  }
  return o;
}

Var Graph::weighted_sum(const std::vector<std::pair<Var, double>>& terms) {
  double s = 0.0;
  bool ng = false;
  for (const auto& [v, w] : terms) {
    check(value(v).size() == 1, "weighted_sum: terms must be scalars");
    s += w * value(v).data[0];
    ng = ng || needs_grad(v);
  }
  Var o = push(Matrix::from_rows(1, 1, {s}), ng);
  if (ng) {
    node(o).backward = [this, terms, o] {
      const double g = grad(o).data[0];
      for (const auto& [v, w] : terms)
        if (needs_grad(v)) grad(v).data[0] += w * g;
    };
  }
  return o;
}

Var Graph::stop_gradient(Var a) {
  Matrix v = tape_ != nullptr ? tape_->value(value(a)) : value(a);
  return push(std::move(v), false);
}

Var Graph::straight_through(Var continuous, Var quantized) {
  const Matrix& C = value(continuous);
  const Matrix& Qz = value(quantized);
  check(C.same_shape(Qz), "straight_through: shape mismatch");
  Matrix out = Qz;
  if (tape_ != nullptr && tape_->mode() != FreezeTape::Mode::off) {
    // quantized + (continuous - sg(continuous)); the bracket is exactly zero
    // except when replaying against a recorded continuous value.
    const Matrix frozen = tape_->value(C);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += C.data[i] - frozen.data[i];
  }
  Var o = push(std::move(out), any_needs_grad({continuous, quantized}));
  if (needs_grad(o)) {
    node(o).backward = [this, continuous, quantized, o] {
      const Matrix& G = grad(o);
      for (Var x : {continuous, quantized}) {
        if (!needs_grad(x)) continue;
        Matrix& d = grad(x);
        for (std::size_t i = 0; i < G.size(); ++i) d.data[i] += G.data[i];
      }
    };
  }
  return o;
}

std::vector<int> Graph::nearest_rows(Var residual, Var codebook) {
  const Matrix& R = value(residual);
  const Matrix& C = value(codebook);
  check(R.cols == C.cols, "nearest_rows: width mismatch");
  std::vector<int> idx(R.rows);
  for (int r = 0; r < R.rows; ++r) idx[r] = nearest_row(R.row(r), C);
  return tape_ != nullptr ? tape_->indices(std::move(idx)) : idx;
}

void Graph::backward(Var out) {
  check(value(out).size() == 1, "backward: output must be a scalar");
  if (!needs_grad(out)) return;
  grad(out).data[0] += 1.0;
  for (int i = out.id; i >= 0; --i) {
    Node& n = *nodes_[i];
    if (n.backward && n.grad != nullptr) n.backward();
  }
}

}  // namespace sif::ad
