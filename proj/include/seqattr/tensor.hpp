#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "seqattr/common.hpp"

namespace seqattr {

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// One node of the dynamically built reverse-mode tape. Data is a flat
// row-major array of 64-bit floats; grad has the same length once allocated.
struct TensorNode {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> backward;  // pushes grad into parents

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

// Value-semantics handle to a tape node; copies share the node, so a
// parameter updated in place is seen by every expression holding it.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value,
                     bool requires_grad = false);
  static Tensor from(std::vector<int> shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double value);
  // fan-in scaled uniform in [-bound, bound]
  static Tensor uniform(std::vector<int> shape, Rng& rng, double bound,
                        bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return node_->size(); }

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }
  std::vector<double>& grad();
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  void zero_grad();

  double item() const;                 // value of a 1-element tensor
  double at(int i) const;              // rank-1 access
  double at(int i, int j) const;       // rank-2 access
  double& mut(int i, int j);

  NodePtr node() const { return node_; }
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

 private:
  NodePtr node_;
};

std::string shape_str(const std::vector<int>& shape);

// ---------------------------------------------------------------------------
// differentiable operations
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double c);

// standard matrix product, (m x k) * (k x n)
Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T, (m x k) * (n x k)^T -> (m x n); avoids materialising transposes
Tensor matmul_nt(const Tensor& a, const Tensor& b);

// broadcast a length-n bias over the rows of an (m x n) matrix
Tensor add_rowvec(const Tensor& mat, const Tensor& vec);

// numerically stabilised softmax / log-softmax along `axis`
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

// per-vector normalisation over the last axis, epsilon 1e-5, then affine
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);  // -> shape {1}

Tensor slice_rows(const Tensor& x, int row0, int nrows);
Tensor slice_cols(const Tensor& x, int col0, int ncols);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

// embedding lookup: out[t] = table[indices[t]]; grad scatter-adds into table
Tensor gather_rows(const Tensor& table, const std::vector<int>& indices);

Tensor mean_rows(const Tensor& x);  // (m x n) -> (1 x n)

// L x L attention admissibility; admissible[i][j] means query i may see key j
struct MaskMatrix {
  int n = 0;
  std::vector<uint8_t> admissible;

  static MaskMatrix all_admissible(int n);
  bool at(int i, int j) const {
    return admissible[static_cast<size_t>(i) * n + j] != 0;
  }
  void set(int i, int j, bool v) {
    admissible[static_cast<size_t>(i) * n + j] = v ? 1 : 0;
  }
};

struct AttentionResult {
  Tensor output;   // (Lq x d)
  Tensor weights;  // (Lq x Lk), rows sum to 1, exact zeros where masked
};

// softmax((q k^T)/sqrt(d) + mask_bias) v with -1e9 additive bias at
// inadmissible positions. A row with no admissible key is an error.
AttentionResult self_attention(const Tensor& q, const Tensor& k,
                               const Tensor& v, const MaskMatrix& mask);

// unmasked attention where query and key lengths may differ
AttentionResult cross_attention(const Tensor& q, const Tensor& k,
                                const Tensor& v);

// Accumulates d(loss)/d(p) into every reachable tensor with requires_grad.
// Repeated calls without zero_grad accumulate.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// parameters and Adam
// ---------------------------------------------------------------------------

class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t);
  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;
  Tensor get(const std::string& name) const;  // throws if absent

  size_t count() const { return items_.size(); }
  const std::string& name(size_t i) const { return items_[i].first; }
  Tensor& tensor(size_t i) { return items_[i].second; }
  const Tensor& tensor(size_t i) const { return items_[i].second; }

  void zero_grad();
  int64_t total_elements() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam. Moment arrays are indexed in ParamStore order and
// shaped like their parameter; step increases by exactly one per apply.
struct AdamState {
  int64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  static AdamState init(const ParamStore& params);
};

// One optimizer application over every parameter that has a gradient.
// A non-finite gradient raises NumericError naming the parameter.
void adam_step(ParamStore& params, AdamState& state, const AdamConfig& cfg);

// global-norm gradient clipping; returns the pre-clip norm
double clip_grad_norm(ParamStore& params, double max_norm);

}  // namespace seqattr
