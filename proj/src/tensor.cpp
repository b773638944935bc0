#include "seqattr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace seqattr {

namespace {

constexpr double kMaskBias = -1e9;

int64_t shape_product(const std::vector<int>& shape) {
  int64_t p = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    p *= d;
  }
  return p;
}

NodePtr make_node(std::vector<int> shape, std::vector<double> data) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return n;
}

bool same_shape(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape();
}

// Result node of an op: requires_grad if any parent does; parents are only
// recorded in that case so inference graphs stay free of closures.
Tensor make_result(std::vector<int> shape, std::vector<double> data,
                   std::vector<Tensor> parents,
                   std::function<void(TensorNode&)> backward) {
  auto n = make_node(std::move(shape), std::move(data));
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  if (rg) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Tensor(n);
}

// raw kernels; all ACCUMULATE into C
void mm_nn_acc(const double* a, const double* b, double* c, int m, int k,
               int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<int64_t>(i) * k;
    double* ci = c + static_cast<int64_t>(i) * n;
    for (int t = 0; t < k; ++t) {
      const double av = ai[t];
      const double* bt = b + static_cast<int64_t>(t) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
}

// C (m x n) += A (m x k) * B (n x k)^T
void mm_nt_acc(const double* a, const double* b, double* c, int m, int k,
               int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<int64_t>(i) * k;
    double* ci = c + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + static_cast<int64_t>(j) * k;
      double acc = 0.0;
      for (int t = 0; t < k; ++t) acc += ai[t] * bj[t];
      ci[j] += acc;
    }
  }
}

// C (k x n) += A (m x k)^T * B (m x n)
void mm_tn_acc(const double* a, const double* b, double* c, int m, int k,
               int n) {
  for (int t = 0; t < m; ++t) {
    const double* at = a + static_cast<int64_t>(t) * k;
    const double* bt = b + static_cast<int64_t>(t) * n;
    for (int i = 0; i < k; ++i) {
      const double av = at[i];
      double* ci = c + static_cast<int64_t>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
}

void check_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw ShapeError(std::string(op) + ": expected rank-2 tensor, got shape " +
                     shape_str(t.shape()));
}

// axis decomposition for softmax-style slice iteration
struct AxisView {
  int64_t outer, n, inner;
};

AxisView axis_view(const std::vector<int>& shape, int axis, const char* op) {
  if (axis < 0 || axis >= static_cast<int>(shape.size()))
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " invalid for shape " + shape_str(shape));
  if (shape[static_cast<size_t>(axis)] == 0)
    throw ShapeError(std::string(op) + ": empty axis " + std::to_string(axis) +
                     " in shape " + shape_str(shape));
  AxisView v{1, shape[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) v.outer *= shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i)
    v.inner *= shape[i];
  return v;
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  s += ")";
  return s;
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  int64_t n = shape_product(shape);
  auto node = make_node(std::move(shape), std::vector<double>(n, 0.0));
  node->requires_grad = requires_grad;
  return Tensor(node);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  int64_t n = shape_product(shape);
  auto node = make_node(std::move(shape), std::vector<double>(n, value));
  node->requires_grad = requires_grad;
  return Tensor(node);
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data,
                    bool requires_grad) {
  if (shape_product(shape) != static_cast<int64_t>(data.size()))
    throw ShapeError("Tensor::from: shape " + shape_str(shape) +
                     " does not match data length " +
                     std::to_string(data.size()));
  auto node = make_node(std::move(shape), std::move(data));
  node->requires_grad = requires_grad;
  return Tensor(node);
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::uniform(std::vector<int> shape, Rng& rng, double bound,
                       bool requires_grad) {
  int64_t n = shape_product(shape);
  std::vector<double> data(static_cast<size_t>(n));
  for (auto& v : data) v = rng.uniform(-bound, bound);
  auto node = make_node(std::move(shape), std::move(data));
  node->requires_grad = requires_grad;
  return Tensor(node);
}

std::vector<double>& Tensor::grad() {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (size() != 1)
    throw ShapeError("item: tensor of shape " + shape_str(shape()) +
                     " is not a scalar");
  return node_->data[0];
}

double Tensor::at(int i) const { return node_->data[static_cast<size_t>(i)]; }

double Tensor::at(int i, int j) const {
  return node_->data[static_cast<size_t>(i) * dim(1) + j];
}

double& Tensor::mut(int i, int j) {
  return node_->data[static_cast<size_t>(i) * dim(1) + j];
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b))
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<double> out(a.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b))
    throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<double> out(a.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b))
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<double> out(a.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pa->grad[i] += self.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pb->grad[i] += self.grad[i] * pa->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (auto& v : out) v *= c;
  return make_result(a.shape(), std::move(out), {a}, [c](TensorNode& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += c * self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank2(a, "matmul");
  check_rank2(b, "matmul");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ShapeError("matmul: inner dimensions disagree: " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  mm_nn_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result({m, n}, std::move(out), {a, b},
                     [m, k, n](TensorNode& self) {
                       auto& pa = self.parents[0];
                       auto& pb = self.parents[1];
                       if (pa->requires_grad) {
                         pa->ensure_grad();
                         // dA += G * B^T
                         mm_nt_acc(self.grad.data(), pb->data.data(),
                                   pa->grad.data(), m, n, k);
                       }
                       if (pb->requires_grad) {
                         pb->ensure_grad();
                         // dB += A^T * G
                         mm_tn_acc(pa->data.data(), self.grad.data(),
                                   pb->grad.data(), m, k, n);
                       }
                     });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_rank2(a, "matmul_nt");
  check_rank2(b, "matmul_nt");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (k != b.dim(1))
    throw ShapeError("matmul_nt: inner dimensions disagree: " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()) +
                     "^T");
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  mm_nt_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result({m, n}, std::move(out), {a, b},
                     [m, k, n](TensorNode& self) {
                       auto& pa = self.parents[0];
                       auto& pb = self.parents[1];
                       if (pa->requires_grad) {
                         pa->ensure_grad();
                         // dA += G * B
                         mm_nn_acc(self.grad.data(), pb->data.data(),
                                   pa->grad.data(), m, n, k);
                       }
                       if (pb->requires_grad) {
                         pb->ensure_grad();
                         // dB += G^T * A
                         mm_tn_acc(self.grad.data(), pa->data.data(),
                                   pb->grad.data(), m, n, k);
                       }
                     });
}

Tensor add_rowvec(const Tensor& mat, const Tensor& vec) {
  check_rank2(mat, "add_rowvec");
  if (vec.rank() != 1 || vec.dim(0) != mat.dim(1))
    throw ShapeError("add_rowvec: bias shape " + shape_str(vec.shape()) +
                     " does not match matrix " + shape_str(mat.shape()));
  const int m = mat.dim(0), n = mat.dim(1);
  std::vector<double> out(mat.data());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] += vec.at(j);
  return make_result({m, n}, std::move(out), {mat, vec},
                     [m, n](TensorNode& self) {
                       auto& pm = self.parents[0];
                       auto& pv = self.parents[1];
                       if (pm->requires_grad) {
                         pm->ensure_grad();
                         for (size_t i = 0; i < self.grad.size(); ++i)
                           pm->grad[i] += self.grad[i];
                       }
                       if (pv->requires_grad) {
                         pv->ensure_grad();
                         for (int i = 0; i < m; ++i)
                           for (int j = 0; j < n; ++j)
                             pv->grad[static_cast<size_t>(j)] +=
                                 self.grad[static_cast<size_t>(i) * n + j];
                       }
                     });
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  AxisView v = axis_view(x.shape(), axis, "softmax");
  std::vector<double> out(x.data().size());
  const auto& in = x.data();
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t c = 0; c < v.inner; ++c) {
      const int64_t base = o * v.n * v.inner + c;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t t = 0; t < v.n; ++t)
        mx = std::max(mx, in[static_cast<size_t>(base + t * v.inner)]);
      double denom = 0.0;
      for (int64_t t = 0; t < v.n; ++t) {
        double e = std::exp(in[static_cast<size_t>(base + t * v.inner)] - mx);
        out[static_cast<size_t>(base + t * v.inner)] = e;
        denom += e;
      }
      for (int64_t t = 0; t < v.n; ++t)
        out[static_cast<size_t>(base + t * v.inner)] /= denom;
    }
  }
  return make_result(
      x.shape(), std::move(out), {x}, [v](TensorNode& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        // dx_t = s_t (g_t - sum_u g_u s_u)
        for (int64_t o = 0; o < v.outer; ++o) {
          for (int64_t c = 0; c < v.inner; ++c) {
            const int64_t base = o * v.n * v.inner + c;
            double dot = 0.0;
            for (int64_t t = 0; t < v.n; ++t) {
              size_t idx = static_cast<size_t>(base + t * v.inner);
              dot += self.grad[idx] * self.data[idx];
            }
            for (int64_t t = 0; t < v.n; ++t) {
              size_t idx = static_cast<size_t>(base + t * v.inner);
              p->grad[idx] += self.data[idx] * (self.grad[idx] - dot);
            }
          }
        }
      });
}

Tensor log_softmax(const Tensor& x, int axis) {
  AxisView v = axis_view(x.shape(), axis, "log_softmax");
  std::vector<double> out(x.data().size());
  const auto& in = x.data();
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t c = 0; c < v.inner; ++c) {
      const int64_t base = o * v.n * v.inner + c;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t t = 0; t < v.n; ++t)
        mx = std::max(mx, in[static_cast<size_t>(base + t * v.inner)]);
      double denom = 0.0;
      for (int64_t t = 0; t < v.n; ++t)
        denom += std::exp(in[static_cast<size_t>(base + t * v.inner)] - mx);
      const double lse = mx + std::log(denom);
      for (int64_t t = 0; t < v.n; ++t) {
        size_t idx = static_cast<size_t>(base + t * v.inner);
        out[idx] = in[idx] - lse;
      }
    }
  }
  return make_result(
      x.shape(), std::move(out), {x}, [v](TensorNode& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        // dx_t = g_t - softmax(x)_t * sum_u g_u
        for (int64_t o = 0; o < v.outer; ++o) {
          for (int64_t c = 0; c < v.inner; ++c) {
            const int64_t base = o * v.n * v.inner + c;
            double gsum = 0.0;
            for (int64_t t = 0; t < v.n; ++t)
              gsum += self.grad[static_cast<size_t>(base + t * v.inner)];
            for (int64_t t = 0; t < v.n; ++t) {
              size_t idx = static_cast<size_t>(base + t * v.inner);
              p->grad[idx] += self.grad[idx] - std::exp(self.data[idx]) * gsum;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// layer norm, gelu
// ---------------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  constexpr double eps = 1e-5;
  if (x.rank() < 1) throw ShapeError("layer_norm: rank-0 input");
  const int n = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != n || bias.rank() != 1 ||
      bias.dim(0) != n)
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " do not match last dim of " +
                     shape_str(x.shape()));
  const int64_t rows = x.size() / n;
  std::vector<double> out(x.data().size());
  std::vector<double> xhat(x.data().size());
  std::vector<double> inv_std(static_cast<size_t>(rows));
  const auto& in = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const size_t base = static_cast<size_t>(r) * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += in[base + j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      double d = in[base + j] - mu;
      var += d * d;
    }
    var /= n;
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = istd;
    for (int j = 0; j < n; ++j) {
      double h = (in[base + j] - mu) * istd;
      xhat[base + j] = h;
      out[base + j] = gain.at(j) * h + bias.at(j);
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [n, rows, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](TensorNode& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        for (int64_t r = 0; r < rows; ++r) {
          const size_t base = static_cast<size_t>(r) * n;
          if (pg->requires_grad) {
            pg->ensure_grad();
            for (int j = 0; j < n; ++j)
              pg->grad[static_cast<size_t>(j)] +=
                  self.grad[base + j] * xhat[base + j];
          }
          if (pb->requires_grad) {
            pb->ensure_grad();
            for (int j = 0; j < n; ++j)
              pb->grad[static_cast<size_t>(j)] += self.grad[base + j];
          }
          if (px->requires_grad) {
            px->ensure_grad();
            // dx = (gh - mean(gh) - xhat * mean(gh .* xhat)) * inv_std
            double m1 = 0.0, m2 = 0.0;
            for (int j = 0; j < n; ++j) {
              double gh = self.grad[base + j] * pg->data[static_cast<size_t>(j)];
              m1 += gh;
              m2 += gh * xhat[base + j];
            }
            m1 /= n;
            m2 /= n;
            const double istd = inv_std[static_cast<size_t>(r)];
            for (int j = 0; j < n; ++j) {
              double gh = self.grad[base + j] * pg->data[static_cast<size_t>(j)];
              px->grad[base + j] += (gh - m1 - xhat[base + j] * m2) * istd;
            }
          }
        }
      });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  std::vector<double> out(x.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    double v = x.data()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  return make_result(x.shape(), std::move(out), {x}, [=](TensorNode& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double v = p->data[i];
      double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      p->grad[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({1}, {s}, {x}, [](TensorNode& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    const double g = self.grad[0];
    for (auto& gv : p->grad) gv += g;
  });
}

// ---------------------------------------------------------------------------
// slicing / concatenation / gathering
// ---------------------------------------------------------------------------

Tensor slice_rows(const Tensor& x, int row0, int nrows) {
  check_rank2(x, "slice_rows");
  const int m = x.dim(0), n = x.dim(1);
  if (row0 < 0 || nrows < 0 || row0 + nrows > m)
    throw ShapeError("slice_rows: rows [" + std::to_string(row0) + ", " +
                     std::to_string(row0 + nrows) + ") out of bounds for " +
                     shape_str(x.shape()));
  std::vector<double> out(x.data().begin() + static_cast<int64_t>(row0) * n,
                          x.data().begin() +
                              static_cast<int64_t>(row0 + nrows) * n);
  return make_result({nrows, n}, std::move(out), {x},
                     [row0, n](TensorNode& self) {
                       auto& p = self.parents[0];
                       p->ensure_grad();
                       const size_t off = static_cast<size_t>(row0) * n;
                       for (size_t i = 0; i < self.grad.size(); ++i)
                         p->grad[off + i] += self.grad[i];
                     });
}

Tensor slice_cols(const Tensor& x, int col0, int ncols) {
  check_rank2(x, "slice_cols");
  const int m = x.dim(0), n = x.dim(1);
  if (col0 < 0 || ncols < 0 || col0 + ncols > n)
    throw ShapeError("slice_cols: cols [" + std::to_string(col0) + ", " +
                     std::to_string(col0 + ncols) + ") out of bounds for " +
                     shape_str(x.shape()));
  std::vector<double> out(static_cast<size_t>(m) * ncols);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < ncols; ++j)
      out[static_cast<size_t>(i) * ncols + j] = x.at(i, col0 + j);
  return make_result({m, ncols}, std::move(out), {x},
                     [m, n, col0, ncols](TensorNode& self) {
                       auto& p = self.parents[0];
                       p->ensure_grad();
                       for (int i = 0; i < m; ++i)
                         for (int j = 0; j < ncols; ++j)
                           p->grad[static_cast<size_t>(i) * n + col0 + j] +=
                               self.grad[static_cast<size_t>(i) * ncols + j];
                     });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const int n = parts[0].dim(1);
  int m = 0;
  for (const auto& p : parts) {
    check_rank2(p, "concat_rows");
    if (p.dim(1) != n)
      throw ShapeError("concat_rows: column mismatch " +
                       shape_str(p.shape()) + " vs expected cols " +
                       std::to_string(n));
    m += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(static_cast<size_t>(m) * n);
  for (const auto& p : parts)
    out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<int> rows;
  rows.reserve(parts.size());
  for (const auto& p : parts) rows.push_back(p.dim(0));
  return make_result({m, n}, std::move(out), parts,
                     [rows, n](TensorNode& self) {
                       size_t off = 0;
                       for (size_t k = 0; k < self.parents.size(); ++k) {
                         auto& p = self.parents[k];
                         const size_t len = static_cast<size_t>(rows[k]) * n;
                         if (p->requires_grad) {
                           p->ensure_grad();
                           for (size_t i = 0; i < len; ++i)
                             p->grad[i] += self.grad[off + i];
                         }
                         off += len;
                       }
                     });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const int m = parts[0].dim(0);
  int n = 0;
  for (const auto& p : parts) {
    check_rank2(p, "concat_cols");
    if (p.dim(0) != m)
      throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()) +
                       " vs expected rows " + std::to_string(m));
    n += p.dim(1);
  }
  std::vector<double> out(static_cast<size_t>(m) * n);
  int c0 = 0;
  for (const auto& p : parts) {
    const int pc = p.dim(1);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < pc; ++j)
        out[static_cast<size_t>(i) * n + c0 + j] = p.at(i, j);
    c0 += pc;
  }
  std::vector<int> cols;
  cols.reserve(parts.size());
  for (const auto& p : parts) cols.push_back(p.dim(1));
  return make_result({m, n}, std::move(out), parts,
                     [m, n, cols](TensorNode& self) {
                       int c0 = 0;
                       for (size_t k = 0; k < self.parents.size(); ++k) {
                         auto& p = self.parents[k];
                         const int pc = cols[k];
                         if (p->requires_grad) {
                           p->ensure_grad();
                           for (int i = 0; i < m; ++i)
                             for (int j = 0; j < pc; ++j)
                               p->grad[static_cast<size_t>(i) * pc + j] +=
                                   self.grad[static_cast<size_t>(i) * n + c0 +
                                             j];
                         }
                         c0 += pc;
                       }
                     });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& indices) {
  check_rank2(table, "gather_rows");
  const int rows = table.dim(0), d = table.dim(1);
  for (int idx : indices)
    if (idx < 0 || idx >= rows)
      throw ShapeError("gather_rows: index " + std::to_string(idx) +
                       " out of range for table " + shape_str(table.shape()));
  std::vector<double> out(indices.size() * static_cast<size_t>(d));
  for (size_t t = 0; t < indices.size(); ++t)
    for (int j = 0; j < d; ++j)
      out[t * d + j] = table.at(indices[static_cast<int>(t)], j);
  return make_result({static_cast<int>(indices.size()), d}, std::move(out),
                     {table}, [indices, d](TensorNode& self) {
                       auto& p = self.parents[0];
                       p->ensure_grad();
                       for (size_t t = 0; t < indices.size(); ++t) {
                         const size_t dst =
                             static_cast<size_t>(indices[t]) * d;
                         for (int j = 0; j < d; ++j)
                           p->grad[dst + j] += self.grad[t * d + j];
                       }
                     });
}

Tensor mean_rows(const Tensor& x) {
  check_rank2(x, "mean_rows");
  const int m = x.dim(0), n = x.dim(1);
  if (m == 0) throw ShapeError("mean_rows: zero rows");
  std::vector<double> out(static_cast<size_t>(n), 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(j)] += x.at(i, j);
  for (auto& v : out) v /= m;
  return make_result({1, n}, std::move(out), {x}, [m, n](TensorNode& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        p->grad[static_cast<size_t>(i) * n + j] +=
            self.grad[static_cast<size_t>(j)] / m;
  });
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

MaskMatrix MaskMatrix::all_admissible(int n) {
  MaskMatrix m;
  m.n = n;
  m.admissible.assign(static_cast<size_t>(n) * n, 1);
  return m;
}

AttentionResult self_attention(const Tensor& q, const Tensor& k,
                               const Tensor& v, const MaskMatrix& mask) {
  check_rank2(q, "self_attention");
  check_rank2(k, "self_attention");
  check_rank2(v, "self_attention");
  const int lq = q.dim(0), d = q.dim(1);
  const int lk = k.dim(0);
  if (k.dim(1) != d || v.dim(1) == 0 || v.dim(0) != lk)
    throw ShapeError("self_attention: incompatible shapes q" +
                     shape_str(q.shape()) + " k" + shape_str(k.shape()) +
                     " v" + shape_str(v.shape()));
  if (mask.n != lq || lq != lk)
    throw ShapeError("self_attention: mask size " + std::to_string(mask.n) +
                     " does not match sequence length " + std::to_string(lq));
  for (int i = 0; i < lq; ++i) {
    bool any = false;
    for (int j = 0; j < lk; ++j) any = any || mask.at(i, j);
    if (!any)
      throw Error("self_attention: row " + std::to_string(i) +
                  " admits no keys");
  }
  std::vector<double> bias(static_cast<size_t>(lq) * lk, 0.0);
  for (int i = 0; i < lq; ++i)
    for (int j = 0; j < lk; ++j)
      if (!mask.at(i, j)) bias[static_cast<size_t>(i) * lk + j] = kMaskBias;
  Tensor bias_t = Tensor::from({lq, lk}, std::move(bias));
  Tensor scores = add(scale(matmul_nt(q, k), 1.0 / std::sqrt(double(d))), bias_t);
  Tensor attn = softmax(scores, 1);
  return {matmul(attn, v), attn};
}

AttentionResult cross_attention(const Tensor& q, const Tensor& k,
                                const Tensor& v) {
  check_rank2(q, "cross_attention");
  check_rank2(k, "cross_attention");
  check_rank2(v, "cross_attention");
  const int d = q.dim(1);
  if (k.dim(1) != d || v.dim(0) != k.dim(0))
    throw ShapeError("cross_attention: incompatible shapes q" +
                     shape_str(q.shape()) + " k" + shape_str(k.shape()) +
                     " v" + shape_str(v.shape()));
  if (k.dim(0) == 0) throw ShapeError("cross_attention: no keys");
  Tensor scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(double(d)));
  Tensor attn = softmax(scores, 1);
  return {matmul(attn, v), attn};
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined()) throw Error("backward: undefined tensor");
  if (loss.size() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw Error("backward: loss does not depend on any tracked tensor");

  // iterative post-order DFS over requires_grad nodes
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* parent = node->parents[next++].get();
      if (parent->requires_grad && !seen.count(parent)) {
        seen.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior grads are scratch space for this pass; only leaves accumulate
  // across repeated calls.
  for (TensorNode* node : order)
    if (node->backward && !node->grad.empty())
      std::fill(node->grad.begin(), node->grad.end(), 0.0);

  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

// ---------------------------------------------------------------------------
// parameters / Adam
// ---------------------------------------------------------------------------

Tensor ParamStore::add(const std::string& name, Tensor t) {
  if (find(name)) throw Error("ParamStore: duplicate parameter " + name);
  t.set_requires_grad(true);
  items_.emplace_back(name, t);
  return t;
}

Tensor* ParamStore::find(const std::string& name) {
  for (auto& [n, t] : items_)
    if (n == name) return &t;
  return nullptr;
}

const Tensor* ParamStore::find(const std::string& name) const {
  for (const auto& [n, t] : items_)
    if (n == name) return &t;
  return nullptr;
}

Tensor ParamStore::get(const std::string& name) const {
  const Tensor* t = find(name);
  if (!t) throw Error("ParamStore: unknown parameter " + name);
  return *t;
}

void ParamStore::zero_grad() {
  for (auto& [n, t] : items_) t.zero_grad();
}

int64_t ParamStore::total_elements() const {
  int64_t total = 0;
  for (const auto& [n, t] : items_) total += t.size();
  return total;
}

AdamState AdamState::init(const ParamStore& params) {
  AdamState s;
  s.first_moment.reserve(params.count());
  s.second_moment.reserve(params.count());
  for (size_t i = 0; i < params.count(); ++i) {
    size_t n = static_cast<size_t>(params.tensor(i).size());
    s.first_moment.emplace_back(n, 0.0);
    s.second_moment.emplace_back(n, 0.0);
  }
  return s;
}

void adam_step(ParamStore& params, AdamState& state, const AdamConfig& cfg) {
  if (state.first_moment.size() != params.count())
    throw Error("adam_step: state does not match parameter store");
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (size_t p = 0; p < params.count(); ++p) {
    Tensor& param = params.tensor(p);
    if (!param.has_grad()) continue;
    auto& g = param.grad();
    auto& m = state.first_moment[p];
    auto& v = state.second_moment[p];
    auto& w = param.data();
    for (size_t i = 0; i < w.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw NumericError("adam_step: non-finite gradient in parameter " +
                           params.name(p));
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
}

double clip_grad_norm(ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (size_t p = 0; p < params.count(); ++p) {
    Tensor& param = params.tensor(p);
    if (!param.has_grad()) continue;
    for (double g : param.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (size_t p = 0; p < params.count(); ++p) {
      Tensor& param = params.tensor(p);
      if (!param.has_grad()) continue;
      for (double& g : param.grad()) g *= s;
    }
  }
  return norm;
}

}  // namespace seqattr
