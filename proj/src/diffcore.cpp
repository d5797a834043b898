#include "dmue/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace dmue {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into its inputs.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
  }
};

struct NodeAccess {
  static Node& node(const Tensor& t) {
    if (!t.node_) throw std::invalid_argument("undefined tensor");
    return *t.node_;
  }
  static const std::shared_ptr<Node>& ptr(const Tensor& t) {
    if (!t.node_) throw std::invalid_argument("undefined tensor");
    return t.node_;
  }
  static Tensor wrap(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }
};

}  // namespace detail

using detail::Node;
using detail::NodeAccess;

namespace {

thread_local bool t_checked = false;
thread_local bool t_grad_enabled = true;

constexpr double kNormEps = 1e-12;

Node& N(const Tensor& t) { return NodeAccess::node(t); }

void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

void check_finite(const Node& n) {
  if (!t_checked) return;
  for (double v : n.values) {
    if (!std::isfinite(v)) throw NumericError("non-finite value produced by " + n.op);
  }
}

// Builds the output node. Provenance is recorded only when some input
// requires a gradient and grad mode is on.
Tensor make_result(std::string op, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->values = std::move(values);
  n->op = std::move(op);
  check_finite(*n);
  bool any = false;
  for (const auto& in : inputs) any = any || N(in).requires_grad;
  if (any && t_grad_enabled) {
    n->requires_grad = true;
    for (const auto& in : inputs) n->inputs.push_back(NodeAccess::ptr(in));
    n->backward = std::move(backward);
  }
  return NodeAccess::wrap(std::move(n));
}

// Grad buffer of input k, or nullptr when it takes no gradient.
double* grad_of(Node& self, std::size_t k) {
  Node& in = *self.inputs[k];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return in.grad.data();
}

template <class F>
Tensor unary(const Tensor& x, const char* name, F&& fwd,
             std::function<double(double /*x*/, double /*y*/)> deriv) {
  const Node& in = N(x);
  std::vector<double> out(in.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in.values[i]);
  return make_result(name, in.shape, std::move(out), {x}, [deriv](Node& self) {
    double* g = grad_of(self, 0);
    if (!g) return;
    const auto& xv = self.inputs[0]->values;
    for (std::size_t i = 0; i < self.values.size(); ++i) {
      g[i] += self.grad[i] * deriv(xv[i], self.values[i]);
    }
  });
}

}  // namespace

std::string to_string(Shape s) {
  return "(" + std::to_string(s.rows) + "x" + std::to_string(s.cols) + ")";
}

// Tensor ------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(shape, 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  return from(shape, std::vector<double>(shape.size(), value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  require(shape.rows > 0 && shape.cols > 0, "tensor dimensions must be positive");
  require(values.size() == shape.size(),
          "value count " + std::to_string(values.size()) + " does not match shape " + to_string(shape));
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->values = std::move(values);
  n->requires_grad = requires_grad;
  check_finite(*n);
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1, 1}, {value}, requires_grad); }

Tensor Tensor::row(std::vector<double> values, bool requires_grad) {
  Shape s{1, values.size()};
  return from(s, std::move(values), requires_grad);
}

Shape Tensor::shape() const { return N(*this).shape; }
std::span<const double> Tensor::values() const { return N(*this).values; }
std::span<double> Tensor::mutable_values() { return N(*this).values; }

double Tensor::item() const {
  const Node& n = N(*this);
  require(n.values.size() == 1, "item() requires a 1x1 tensor, got " + to_string(n.shape));
  return n.values[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  const Node& n = N(*this);
  require(r < n.shape.rows && c < n.shape.cols, "index out of range");
  return n.values[r * n.shape.cols + c];
}

bool Tensor::requires_grad() const { return N(*this).requires_grad; }
bool Tensor::has_grad() const { return !N(*this).grad.empty(); }
std::span<const double> Tensor::grad() const { return N(*this).grad; }
void Tensor::zero_grad() { N(*this).grad.clear(); }
const std::string& Tensor::op() const { return N(*this).op; }

Tensor Tensor::detach_copy(bool requires_grad) const {
  const Node& n = N(*this);
  return from(n.shape, n.values, requires_grad);
}

// Scopes ------------------------------------------------------------------

CheckedScope::CheckedScope(bool enabled) : previous_(t_checked) { t_checked = enabled; }
CheckedScope::~CheckedScope() { t_checked = previous_; }
bool checked_mode() { return t_checked; }

NoGradScope::NoGradScope() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradScope::~NoGradScope() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

// Linear algebra ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Node& A = N(a);
  const Node& B = N(b);
  require(A.shape.cols == B.shape.rows,
          "matmul shape mismatch " + to_string(A.shape) + " * " + to_string(B.shape));
  const std::size_t n = A.shape.rows, k = A.shape.cols, m = B.shape.cols;
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += A.values[i * k + p] * B.values[p * m + j];
      out[i * m + j] = acc;
    }
  }
  return make_result("matmul", {n, m}, std::move(out), {a, b}, [n, k, m](Node& self) {
    const auto& av = self.inputs[0]->values;
    const auto& bv = self.inputs[1]->values;
    const auto& g = self.grad;
    if (double* ga = grad_of(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += g[i * m + j] * bv[p * m + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (double* gb = grad_of(self, 1)) {
      for (std::size_t p = 0; p < k; ++p) {
        for (std::size_t j = 0; j < m; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < n; ++i) acc += av[i * k + p] * g[i * m + j];
          gb[p * m + j] += acc;
        }
      }
    }
  });
}

Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const Node& W = N(weight);
  const Node& B = N(bias);
  require(B.shape.rows == 1 && B.shape.cols == W.shape.cols,
          "affine bias " + to_string(B.shape) + " does not match weight " + to_string(W.shape));
  Tensor xw = matmul(x, weight);
  const std::size_t n = xw.rows(), m = xw.cols();
  std::vector<double> out(xw.values().begin(), xw.values().end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += B.values[j];
  }
  return make_result("affine", {n, m}, std::move(out), {xw, bias}, [n, m](Node& self) {
    if (double* g0 = grad_of(self, 0)) {
      for (std::size_t i = 0; i < n * m; ++i) g0[i] += self.grad[i];
    }
    if (double* gb = grad_of(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) gb[j] += self.grad[i * m + j];
      }
    }
  });
}

Tensor transpose(const Tensor& x) {
  const Node& X = N(x);
  const std::size_t r = X.shape.rows, c = X.shape.cols;
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = X.values[i * c + j];
  }
  return make_result("transpose", {c, r}, std::move(out), {x}, [r, c](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape.size() == x.shape().size() && shape.size() > 0,
          "cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result("reshape", shape, std::move(out), {x}, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

// Elementwise -----------------------------------------------------------------

namespace {
void require_same(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + " shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (double* g = grad_of(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_result("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& av = self.inputs[0]->values;
    const auto& bv2 = self.inputs[1]->values;
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv2[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Tensor square(const Tensor& x) {
  return unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor scale_rows(const Tensor& x, const Tensor& factors) {
  const Node& X = N(x);
  const Node& F = N(factors);
  require(F.shape.rows == X.shape.rows && F.shape.cols == 1,
          "scale_rows factors " + to_string(F.shape) + " do not match " + to_string(X.shape));
  const std::size_t n = X.shape.rows, c = X.shape.cols;
  std::vector<double> out(X.values);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= F.values[i];
  }
  return make_result("scale_rows", X.shape, std::move(out), {x, factors}, [n, c](Node& self) {
    const auto& xv = self.inputs[0]->values;
    const auto& fv = self.inputs[1]->values;
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i * c + j] * fv[i];
      }
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += self.grad[i * c + j] * xv[i * c + j];
        g[i] += acc;
      }
    }
  });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor prelu(const Tensor& x, const Tensor& slope) {
  require(slope.shape() == Shape{1, 1}, "prelu slope must be 1x1");
  const Node& X = N(x);
  const double a = slope.item();
  std::vector<double> out(X.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = X.values[i] > 0.0 ? X.values[i] : a * X.values[i];
  return make_result("prelu", X.shape, std::move(out), {x, slope}, [](Node& self) {
    const auto& xv = self.inputs[0]->values;
    const double a = self.inputs[1]->values[0];
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < xv.size(); ++i) g[i] += self.grad[i] * (xv[i] > 0.0 ? 1.0 : a);
    }
    if (double* g = grad_of(self, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < xv.size(); ++i) {
        if (!(xv[i] > 0.0)) acc += self.grad[i] * xv[i];
      }
      g[0] += acc;
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& x) {
  if (t_checked) {
    for (double v : x.values()) {
      if (!(v > 0.0)) throw NumericError("log of non-positive value " + std::to_string(v));
    }
  }
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

// Row-wise ------------------------------------------------------------------

Tensor row_softmax(const Tensor& x) {
  const Node& X = N(x);
  const std::size_t n = X.shape.rows, c = X.shape.cols;
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = &X.values[i * c];
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = std::exp(row[j] - mx);
      z += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  return make_result("row_softmax", X.shape, std::move(out), {x}, [n, c](Node& self) {
    double* g = grad_of(self, 0);
    if (!g) return;
    const auto& y = self.values;
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y[i * c + j] * (self.grad[i * c + j] - dot);
    }
  });
}

Tensor row_log_softmax(const Tensor& x) {
  const Node& X = N(x);
  const std::size_t n = X.shape.rows, c = X.shape.cols;
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = &X.values[i * c];
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
  }
  return make_result("row_log_softmax", X.shape, std::move(out), {x}, [n, c](Node& self) {
    double* g = grad_of(self, 0);
    if (!g) return;
    const auto& y = self.values;
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < c; ++j) total += self.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        g[i * c + j] += self.grad[i * c + j] - std::exp(y[i * c + j]) * total;
      }
    }
  });
}

Tensor row_l2_normalize(const Tensor& x) {
  const Node& X = N(x);
  const std::size_t n = X.shape.rows, c = X.shape.cols;
  std::vector<double> out(n * c);
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < c; ++j) ss += X.values[i * c + j] * X.values[i * c + j];
    const double norm = std::sqrt(ss);
    if (t_checked && norm == 0.0) {
      throw NumericError("row_l2_normalize: row " + std::to_string(i) + " has zero norm");
    }
    norms[i] = std::max(norm, kNormEps);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = X.values[i * c + j] / norms[i];
  }
  return make_result("row_l2_normalize", X.shape, std::move(out), {x}, [n, c, norms](Node& self) {
    double* g = grad_of(self, 0);
    if (!g) return;
    const auto& y = self.values;
    const auto& xv = self.inputs[0]->values;
    for (std::size_t i = 0; i < n; ++i) {
      double ss = 0.0;
      for (std::size_t j = 0; j < c; ++j) ss += xv[i * c + j] * xv[i * c + j];
      if (std::sqrt(ss) < kNormEps) {
        // Clamped denominator: the map is linear here.
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i * c + j] / norms[i];
        continue;
      }
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        g[i * c + j] += (self.grad[i * c + j] - y[i * c + j] * dot) / norms[i];
      }
    }
  });
}

// Reductions ------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return make_result("sum", {1, 1}, {acc}, {x}, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      const std::size_t count = self.inputs[0]->values.size();
      for (std::size_t i = 0; i < count; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) {
  const double count = static_cast<double>(x.shape().size());
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return make_result("mean", {1, 1}, {acc / count}, {x}, [count](Node& self) {
    if (double* g = grad_of(self, 0)) {
      const std::size_t n = self.inputs[0]->values.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0] / count;
    }
  });
}

Tensor frobenius_norm_sq(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v * v;
  return make_result("frobenius_norm_sq", {1, 1}, {acc}, {x}, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      const auto& xv = self.inputs[0]->values;
      for (std::size_t i = 0; i < xv.size(); ++i) g[i] += 2.0 * xv[i] * self.grad[0];
    }
  });
}

// Structural ------------------------------------------------------------------

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_rows needs at least one tensor");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    require(p.cols() == c, "concat_rows column mismatch");
    r += p.rows();
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result("concat_rows", {r, c}, std::move(out), inputs, [](Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      const std::size_t len = self.inputs[k]->values.size();
      if (double* g = grad_of(self, k)) {
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offset + i];
      }
      offset += len;
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_cols needs at least one tensor");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    require(p.rows() == r, "concat_cols row mismatch");
    c += p.cols();
  }
  std::vector<double> out(r * c);
  std::size_t col0 = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    auto pv = p.values();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < pc; ++j) out[i * c + col0 + j] = pv[i * pc + j];
    }
    col0 += pc;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result("concat_cols", {r, c}, std::move(out), inputs, [r, c](Node& self) {
    std::size_t col0 = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      const std::size_t pc = self.inputs[k]->shape.cols;
      if (double* g = grad_of(self, k)) {
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < pc; ++j) g[i * pc + j] += self.grad[i * c + col0 + j];
        }
      }
      col0 += pc;
    }
  });
}

Tensor masked_select(const Tensor& x, const Tensor& mask) {
  require_same(x, mask, "masked_select");
  std::vector<std::size_t> picked;
  auto mv = mask.values();
  for (std::size_t i = 0; i < mv.size(); ++i) {
    if (mv[i] != 0.0) picked.push_back(i);
  }
  require(!picked.empty(), "masked_select: mask selects nothing");
  std::vector<double> out(picked.size());
  auto xv = x.values();
  for (std::size_t k = 0; k < picked.size(); ++k) out[k] = xv[picked[k]];
  // mask is structural, never differentiated.
  Tensor xin = x;
  return make_result("masked_select", {1, picked.size()}, std::move(out), {xin}, [picked](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t k = 0; k < picked.size(); ++k) g[picked[k]] += self.grad[k];
    }
  });
}

Tensor select_rows(const Tensor& x, std::span<const std::size_t> indices) {
  require(!indices.empty(), "select_rows: no indices");
  const std::size_t c = x.cols();
  auto xv = x.values();
  std::vector<double> out;
  out.reserve(indices.size() * c);
  for (std::size_t idx : indices) {
    require(idx < x.rows(), "select_rows: index out of range");
    out.insert(out.end(), xv.begin() + static_cast<std::ptrdiff_t>(idx * c),
               xv.begin() + static_cast<std::ptrdiff_t>((idx + 1) * c));
  }
  std::vector<std::size_t> rows(indices.begin(), indices.end());
  return make_result("select_rows", {rows.size(), c}, std::move(out), {x}, [rows, c](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t k = 0; k < rows.size(); ++k) {
        for (std::size_t j = 0; j < c; ++j) g[rows[k] * c + j] += self.grad[k * c + j];
      }
    }
  });
}

Tensor stop_gradient(const Tensor& x) {
  auto n = std::make_shared<Node>();
  n->shape = x.shape();
  n->values.assign(x.values().begin(), x.values().end());
  n->op = "stop_gradient";
  return NodeAccess::wrap(std::move(n));
}

// Backward ------------------------------------------------------------------

void backward(const Tensor& root) {
  Node& r = N(root);
  require(r.shape == Shape{1, 1}, "backward root must be 1x1, got " + to_string(r.shape));
  if (!r.requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{&r, 0}};
  visited.insert(&r);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Intermediate buffers start fresh; leaves keep accumulating.
  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->values.size(), 0.0);
  }
  r.ensure_grad();
  r.grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

double grad_check(const std::function<Tensor()>& fn, std::span<Tensor> point, double step) {
  require(step > 0.0, "grad_check step must be positive");
  for (auto& p : point) p.zero_grad();
  Tensor out = fn();
  require(out.shape() == Shape{1, 1}, "grad_check function must return a 1x1 tensor");
  backward(out);

  double worst = 0.0;
  for (auto& p : point) {
    std::vector<double> analytic(p.values().size(), 0.0);
    if (p.has_grad()) analytic.assign(p.grad().begin(), p.grad().end());
    auto vals = p.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      double plus = 0.0, minus = 0.0;
      {
        NoGradScope ng;
        vals[i] = saved + step;
        plus = fn().item();
        vals[i] = saved - step;
        minus = fn().item();
      }
      vals[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace dmue
