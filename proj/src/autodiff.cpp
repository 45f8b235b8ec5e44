#include "scm/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "scm/errors.hpp"

namespace scm::ad {

namespace {

std::atomic<std::uint64_t> next_node_id{1};
thread_local bool tape_enabled = true;

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> value) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->id = next_node_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

// Builds an op output; records inputs and the gradient closure only when the
// tape is on and some input needs a gradient.
Tensor make_result(Shape shape, std::vector<double> value,
                   std::vector<std::shared_ptr<Node>> inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = make_node(std::move(shape), std::move(value));
  const bool needs = tape_enabled && std::any_of(inputs.begin(), inputs.end(),
                                                 [](const auto& n) { return n->requires_grad; });
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

std::size_t last_dim(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

template <typename F>
Tensor unary(const Tensor& a, F forward, std::function<double(double x, double y)> derivative) {
  std::vector<double> out(a.size());
  const auto in = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(in[i]);
  return make_result(a.shape(), std::move(out), {a.node()}, [derivative](Node& self) {
    Node& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& gx = x.ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx[i] += self.grad[i] * derivative(x.value[i], self.value[i]);
    }
  });
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::vector<double>& Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_size(shape);
  auto node = make_node(std::move(shape), std::vector<double>(n, value));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  auto node = make_node(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

Tensor Tensor::clone(bool requires_grad) const { return from(shape(), node_->value, requires_grad); }

bool grad_enabled() { return tape_enabled; }

NoGradGuard::NoGradGuard() : previous_(tape_enabled) { tape_enabled = false; }
NoGradGuard::~NoGradGuard() { tape_enabled = previous_; }

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  return make_result({m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    const auto& g = self.grad;
    if (an.requires_grad) {
      auto& ga = an.ensure_grad();  // g [m,n] x b^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = bn.value.data() + p * n;
          const double* grow = g.data() + i * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (bn.requires_grad) {
      auto& gb = bn.ensure_grad();  // a^T x g
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = an.value[i * k + p];
          double* gbrow = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
        }
      }
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(m * n);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = av.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = bv.data() + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out[i * n + j] = acc;
    }
  }
  return make_result({m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    const auto& g = self.grad;
    if (an.requires_grad) {
      auto& ga = an.ensure_grad();  // g [m,n] x b [n,k]
      for (std::size_t i = 0; i < m; ++i) {
        double* garow = ga.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = g[i * n + j];
          const double* brow = bn.value.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) garow[p] += gij * brow[p];
        }
      }
    }
    if (bn.requires_grad) {
      auto& gb = bn.ensure_grad();  // g^T [n,m] x a [m,k]
      for (std::size_t i = 0; i < m; ++i) {
        const double* arow = an.value.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = g[i * n + j];
          double* gbrow = gb.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) gbrow[p] += gij * arow[p];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return make_result({n, m}, std::move(out), {a.node()}, [m, n](Node& self) {
    Node& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& gx = x.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += self.grad[j * m + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_result(std::move(shape), std::move(out), {a.node()}, [](Node& self) {
    Node& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& gx = x.ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    if (self.inputs[0]->requires_grad) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    if (x.requires_grad) {
      auto& g = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y.value[i];
    }
    if (y.requires_grad) {
      auto& g = y.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x.value[i];
    }
  });
}

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_rowwise");
  require_rank(bias, 1, "add_rowwise");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.dim(0) != n) {
    throw DimensionError("add_rowwise: bias " + shape_str(bias.shape()) + " does not match rows of " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + bias[j];
  return make_result(x.shape(), std::move(out), {x.node(), bias.node()}, [m, n](Node& self) {
    Node& xn = *self.inputs[0];
    Node& bn = *self.inputs[1];
    if (xn.requires_grad) {
      auto& g = xn.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn.requires_grad) {
      auto& g = bn.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(a, [factor](double x) { return x * factor; },
               [factor](double, double) { return factor; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.values()) {
    if (!(v > 0.0)) throw NumericError("log of non-positive value " + std::to_string(v));
  }
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor gelu(const Tensor& a) {
  // tanh approximation
  static constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr double k = 0.044715;
  return unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x, double) {
        const double u = c * (x + k * x * x * x);
        const double t = std::tanh(u);
        const double du = c * (1.0 + 3.0 * k * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw ContractError("clamp: lo > hi");
  return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "minimum");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a[i], b[i]);
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    // ties route to the first operand
    if (x.requires_grad) {
      auto& g = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x.value[i] <= y.value[i]) g[i] += self.grad[i];
    }
    if (y.requires_grad) {
      auto& g = y.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x.value[i] > y.value[i]) g[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  return make_result({}, {total}, {a.node()}, [](Node& self) {
    Node& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& g = x.ensure_grad();
    for (auto& gi : g) gi += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// ---------------------------------------------------------------------------
// Normalizations

namespace {

void check_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

void check_temperature(double temperature, const char* op) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ContractError(std::string(op) + ": temperature must be positive, got " +
                        std::to_string(temperature));
  }
}

}  // namespace

Tensor softmax(const Tensor& logits, double temperature) {
  check_temperature(temperature, "softmax");
  check_finite(logits.values(), "softmax");
  const std::size_t n = last_dim(logits);
  const std::size_t rows = logits.size() / n;
  std::vector<double> out(logits.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = logits.values().data() + r * n;
    double* y = out.data() + r * n;
    double mx = x[0] / temperature;
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j] / temperature);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] / temperature - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  return make_result(logits.shape(), std::move(out), {logits.node()},
                     [n, rows, temperature](Node& self) {
                       Node& x = *self.inputs[0];
                       if (!x.requires_grad) return;
                       auto& gx = x.ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* y = self.value.data() + r * n;
                         const double* gy = self.grad.data() + r * n;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
                         for (std::size_t j = 0; j < n; ++j)
                           gx[r * n + j] += y[j] * (gy[j] - dot) / temperature;
                       }
                     });
}

Tensor log_softmax(const Tensor& logits, double temperature) {
  check_temperature(temperature, "log_softmax");
  check_finite(logits.values(), "log_softmax");
  const std::size_t n = last_dim(logits);
  const std::size_t rows = logits.size() / n;
  std::vector<double> out(logits.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = logits.values().data() + r * n;
    double* y = out.data() + r * n;
    double mx = x[0] / temperature;
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j] / temperature);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x[j] / temperature - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) y[j] = x[j] / temperature - lse;
  }
  return make_result(logits.shape(), std::move(out), {logits.node()},
                     [n, rows, temperature](Node& self) {
                       Node& x = *self.inputs[0];
                       if (!x.requires_grad) return;
                       auto& gx = x.ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* y = self.value.data() + r * n;
                         const double* gy = self.grad.data() + r * n;
                         double total = 0.0;
                         for (std::size_t j = 0; j < n; ++j) total += gy[j];
                         for (std::size_t j = 0; j < n; ++j)
                           gx[r * n + j] += (gy[j] - std::exp(y[j]) * total) / temperature;
                       }
                     });
}

Tensor causal_softmax(const Tensor& scores) {
  require_rank(scores, 2, "causal_softmax");
  const std::size_t t = scores.dim(0);
  if (scores.dim(1) != t) throw DimensionError("causal_softmax: non-square " + shape_str(scores.shape()));
  check_finite(scores.values(), "causal_softmax");
  std::vector<double> out(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    const double* x = scores.values().data() + i * t;
    double* y = out.data() + i * t;
    double mx = x[0];
    for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j <= i; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j <= i; ++j) y[j] /= z;
  }
  return make_result(scores.shape(), std::move(out), {scores.node()}, [t](Node& self) {
    Node& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& gx = x.ensure_grad();
    for (std::size_t i = 0; i < t; ++i) {
      const double* y = self.value.data() + i * t;
      const double* gy = self.grad.data() + i * t;
      double dot = 0.0;
      for (std::size_t j = 0; j <= i; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j <= i; ++j) gx[i * t + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank(x, 2, "layer_norm");
  require_rank(gain, 1, "layer_norm");
  require_rank(bias, 1, "layer_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gain.dim(0) != n || bias.dim(0) != n) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  }
  std::vector<double> out(m * n);
  std::vector<double> xhat(m * n);
  std::vector<double> rstd(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.values().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * rstd[i];
      out[i * n + j] = xhat[i * n + j] * gain[j] + bias[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
      [m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
        Node& xn = *self.inputs[0];
        Node& gn = *self.inputs[1];
        Node& bn = *self.inputs[2];
        const auto& gy = self.grad;
        if (gn.requires_grad) {
          auto& g = gn.ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += gy[i * n + j] * xhat[i * n + j];
        }
        if (bn.requires_grad) {
          auto& g = bn.ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += gy[i * n + j];
        }
        if (xn.requires_grad) {
          auto& g = xn.ensure_grad();
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = gy[i * n + j] * gn.value[j];
              mean_d += d;
              mean_dx += d * xhat[i * n + j];
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = gy[i * n + j] * gn.value[j];
              g[i * n + j] += rstd[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<int> idx(ids.begin(), ids.end());
  std::vector<double> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= rows) {
      throw ContractError("embedding: index " + std::to_string(idx[i]) + " outside table of " +
                          std::to_string(rows) + " rows");
    }
    std::copy_n(table.values().data() + idx[i] * d, d, out.data() + i * d);
  }
  const std::size_t count = idx.size();
  return make_result({count, d}, std::move(out), {table.node()},
                     [d, idx = std::move(idx)](Node& self) {
                       Node& t = *self.inputs[0];
                       if (!t.requires_grad) return;
                       auto& g = t.ensure_grad();
                       // scatter-add: repeated ids accumulate
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += self.grad[i * d + j];
                     });
}

Tensor pick(const Tensor& x, std::span<const int> cols) {
  require_rank(x, 2, "pick");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (cols.size() != m) {
    throw DimensionError("pick: " + std::to_string(cols.size()) + " indices for " + shape_str(x.shape()));
  }
  std::vector<int> idx(cols.begin(), cols.end());
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= n) {
      throw ContractError("pick: column " + std::to_string(idx[i]) + " out of range");
    }
    out[i] = x[i * n + idx[i]];
  }
  return make_result({m}, std::move(out), {x.node()}, [n, idx = std::move(idx)](Node& self) {
    Node& xn = *self.inputs[0];
    if (!xn.requires_grad) return;
    auto& g = xn.ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) g[i * n + idx[i]] += self.grad[i];
  });
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank(x, 2, "slice_rows");
  const std::size_t n = x.dim(1);
  if (start + count > x.dim(0)) {
    throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside " + shape_str(x.shape()));
  }
  std::vector<double> out(x.values().begin() + start * n, x.values().begin() + (start + count) * n);
  return make_result({count, n}, std::move(out), {x.node()}, [start, n](Node& self) {
    Node& xn = *self.inputs[0];
    if (!xn.requires_grad) return;
    auto& g = xn.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[start * n + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank(x, 2, "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (start + count > n) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside " + shape_str(x.shape()));
  }
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.values().data() + i * n + start, count, out.data() + i * count);
  return make_result({m, count}, std::move(out), {x.node()}, [m, n, start, count](Node& self) {
    Node& xn = *self.inputs[0];
    if (!xn.requires_grad) return;
    auto& g = xn.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * n + start + j] += self.grad[i * count + j];
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::size_t total = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != m) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(p.shape()) + " vs " +
                           shape_str(parts[0].shape()));
    }
    widths.push_back(p.dim(1));
    total += p.dim(1);
    inputs.push_back(p.node());
  }
  std::vector<double> out(m * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(parts[k].values().data() + i * widths[k], widths[k], out.data() + i * total + offset);
    offset += widths[k];
  }
  return make_result({m, total}, std::move(out), std::move(inputs),
                     [m, total, widths = std::move(widths)](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                         Node& in = *self.inputs[k];
                         if (in.requires_grad) {
                           auto& g = in.ensure_grad();
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < widths[k]; ++j)
                               g[i * widths[k] + j] += self.grad[i * total + off + j];
                         }
                         off += widths[k];
                       }
                     });
}

Tensor concat(std::span<const Tensor> parts) {
  std::vector<double> out;
  std::vector<std::shared_ptr<Node>> inputs;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    inputs.push_back(p.node());
  }
  const std::size_t n = out.size();
  return make_result({n}, std::move(out), std::move(inputs), [](Node& self) {
    std::size_t off = 0;
    for (auto& in : self.inputs) {
      if (in->requires_grad) {
        auto& g = in->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
      }
      off += in->value.size();
    }
  });
}

// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward requires a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) return;

  // Collect the reachable subgraph.
  std::vector<Node*> order;
  std::unordered_set<const Node*> seen;
  std::vector<Node*> stack{loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->id > b->id; });

  // Interior gradients restart from zero; leaves keep accumulating.
  for (Node* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
  }
  loss.node()->ensure_grad()[0] += 1.0;
  for (Node* n : order) {
    if (!n->is_leaf()) n->backward_fn(*n);
  }
}

}  // namespace scm::ad
