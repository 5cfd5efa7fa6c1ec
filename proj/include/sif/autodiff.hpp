#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sif/matrix.hpp"

// Minimal tape-based reverse-mode differentiation over dense double matrices.
// A Graph records one forward computation; backward() walks it in reverse and
// accumulates parameter gradients into a GradStore.
namespace sif::ad {

struct Param {
  std::string name;
  Matrix value;
  bool decay = true;      // subject to weight decay
  bool trainable = true;  // receives gradients at all
};

class GradStore {
 public:
  Matrix& at(const Param& p);
  const Matrix* find(const Param& p) const;
  void add(const GradStore& other);
  void clear() { grads_.clear(); }
  bool empty() const { return grads_.empty(); }

 private:
  std::unordered_map<const Param*, Matrix> grads_;
};

// Records argmin decisions, stop-gradient values and straight-through inputs
// during one forward pass and replays them in later passes. Replaying turns
// the piecewise-constant quantizer into a smooth function of the parameters,
// which is what finite-difference checks need.
class FreezeTape {
 public:
  enum class Mode { off, record, replay };

  void record() { reset(Mode::record); }
  void replay() {
    mode_ = Mode::replay;
    idx_pos_ = val_pos_ = 0;
    index_flip_ = false;
  }
  void off() { mode_ = Mode::off; }
  Mode mode() const { return mode_; }
  // Set during replay when a recomputed argmin differs from the recorded one.
  bool index_flip() const { return index_flip_; }

  std::vector<int> indices(std::vector<int> computed);
  Matrix value(const Matrix& computed);

 private:
  void reset(Mode m) {
    mode_ = m;
    indices_.clear();
    values_.clear();
    idx_pos_ = val_pos_ = 0;
    index_flip_ = false;
  }
  Mode mode_ = Mode::off;
  std::vector<std::vector<int>> indices_;
  std::vector<Matrix> values_;
  std::size_t idx_pos_ = 0;
  std::size_t val_pos_ = 0;
  bool index_flip_ = false;
};

// Which entries of an [n x d] operand form one attention sequence: sequence g
// holds entries g*group_stride + s*seq_stride for s in [0, seq).
struct AttentionLayout {
  int groups = 1;
  int seq = 1;
  int group_stride = 0;
  int seq_stride = 1;
};

struct Var {
  int id = -1;
};

class Graph {
 public:
  explicit Graph(GradStore* grads = nullptr, FreezeTape* tape = nullptr) : grads_(grads), tape_(tape) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Matrix m);
  Var param(const Param& p);

  const Matrix& value(Var v) const { return *nodes_[v.id]->value; }
  int rows(Var v) const { return value(v).rows; }
  int cols(Var v) const { return value(v).cols; }
  bool needs_grad(Var v) const { return nodes_[v.id]->needs_grad; }
  double scalar(Var v) const { return value(v).data.at(0); }
  // Gradient buffer of a node; valid after backward().
  Matrix& grad(Var v);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var add_row(Var a, Var row);  // broadcast a 1 x n row over every row of a
  Var scale(Var a, double s);
  Var relu(Var a);
  Var layer_norm(Var x, Var gamma, Var beta, double eps);
  // Multi-head scaled dot-product attention. q, k, v are [n x d] with d split
  // into `heads` equal chunks. key_mask (size n, optional) marks valid keys.
  Var attention(Var q, Var k, Var v, const AttentionLayout& layout, int heads,
                const std::vector<std::uint8_t>* key_mask = nullptr);
  Var gather_rows(Var table, std::vector<int> rows);
  Var slice_rows(Var a, int begin, int count);
  Var concat_rows(const std::vector<Var>& parts);
  Var concat_cols(const std::vector<Var>& parts);
  Var reshape(Var a, int rows, int cols);
  // S inputs of shape [R x d] -> [R*S x d] with output row r*S + s = input s row r.
  Var interleave(const std::vector<Var>& parts);
  // Mean of consecutive blocks of `group` rows: [R*group x d] -> [R x d].
  Var group_mean(Var a, int group);
  Var sum_squares(Var a);
  // Numerically stable binary cross-entropy on a 1 x 1 logit.
  Var bce_with_logits(Var logit, double label);
  Var weighted_sum(const std::vector<std::pair<Var, double>>& terms);
  Var stop_gradient(Var a);
  // Forward value of `quantized`, gradient passed unchanged to both inputs.
  Var straight_through(Var continuous, Var quantized);
  // Row-wise nearest codebook row (squared L2, lowest index wins ties).
  std::vector<int> nearest_rows(Var residual, Var codebook);

  void backward(Var scalar_output);

  std::uint64_t macs() const { return macs_; }
  // Share of macs() spent inside attention (scores and weighted values).
  std::uint64_t attention_macs() const { return attention_macs_; }
  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix own;
    const Matrix* value = nullptr;
    Matrix own_grad;
    Matrix* grad = nullptr;
    bool needs_grad = false;
    std::function<void()> backward;
  };
  Var push(Matrix value, bool needs_grad);
  Node& node(Var v) { return *nodes_[v.id]; }
  bool any_needs_grad(std::initializer_list<Var> vs) const;

  std::vector<std::unique_ptr<Node>> nodes_;
  std::unordered_map<const Param*, int> param_nodes_;
  GradStore* grads_;
  FreezeTape* tape_;
  std::uint64_t macs_ = 0;
  std::uint64_t attention_macs_ = 0;
};

// Index of the nearest row of `codebook` to `x`; ties go to the lowest index.
int nearest_row(std::span<const double> x, const Matrix& codebook);

}  // namespace sif::ad
