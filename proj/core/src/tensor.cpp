#include "popgraph/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace popgraph {

namespace {

using detail::TensorNode;

[[noreturn]] void fail(const std::string& primitive, const std::string& detail) {
  throw std::invalid_argument(primitive + ": " + detail);
}

void check_defined(const char* primitive, std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (!t->defined()) fail(primitive, "undefined input tensor");
  }
}

void ensure_grad_buffer(TensorNode* node) {
  if (node->grad.empty()) node->grad.assign(node->value.size(), 0.0);
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

// --------------------------------------------------------------------------
// Tensor handle
// --------------------------------------------------------------------------

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    fail("Tensor", "shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> values(numel(shape), 0.0);
  return from_values(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  std::vector<double> values(numel(shape), fill);
  return from_values(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value) { return from_values({1}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->value.size(); }

std::size_t Tensor::rows() const {
  return node_->shape.empty() ? 1 : node_->shape[0];
}

std::size_t Tensor::cols() const {
  if (node_->shape.size() >= 2) return node_->shape[1];
  return node_->shape.empty() ? 1 : node_->shape[0];
}

std::span<const double> Tensor::values() const { return node_->value; }
std::span<double> Tensor::mutable_values() { return node_->value; }

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() { return node_->grad; }

void Tensor::ensure_grad() { ensure_grad_buffer(node_.get()); }

void Tensor::zero_grad() { node_->grad.clear(); }

double Tensor::item() const {
  if (size() != 1) fail("item", "tensor " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

Tensor make_taped(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                  std::function<void(const TensorNode&)> backward_fn) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool any_grad = false;
  for (const Tensor& p : parents) any_grad = any_grad || p.node()->requires_grad;
  if (any_grad) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (Tensor& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

// --------------------------------------------------------------------------
// backward
// --------------------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined loss tensor");
  TensorNode* root = loss.node().get();
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (root->backward_done) {
    throw std::runtime_error("backward: tape already consumed for this forward pass");
  }

  // Iterative post-order topological sort over the tape. order holds owning
  // pointers: releasing a node's parent list must not destroy nodes that are
  // still waiting for their own backward call.
  std::vector<std::shared_ptr<TensorNode>> order;
  std::vector<std::pair<std::shared_ptr<TensorNode>, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  root->topo_mark = 1;
  while (!stack.empty()) {
    TensorNode* node = stack.back().first.get();
    const std::size_t next = stack.back().second;
    if (next < node->parents.size()) {
      ++stack.back().second;
      const std::shared_ptr<TensorNode>& parent = node->parents[next];
      if (parent->topo_mark == 0 && parent->backward_fn) {
        parent->topo_mark = 1;
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(stack.back().first);
      stack.pop_back();
    }
  }

  ensure_grad_buffer(root);
  root->grad[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = it->get();
    if (node->backward_fn && !node->grad.empty()) {
      node->backward_fn(*node);
    }
    node->topo_mark = 0;
    node->backward_done = true;
    // Free the tape: intermediate results drop their closures and parents so
    // memory is reclaimed as soon as handles go out of scope.
    node->backward_fn = nullptr;
    node->parents.clear();
  }
}

// --------------------------------------------------------------------------
// Primitive kernels
// --------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined("matmul", {&a, &b});
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows()) {
    fail("matmul", "incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    const double* arow = av + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double s = arow[kk];
      if (s == 0.0) continue;
      const double* brow = bv + kk * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += s * brow[j];
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return make_taped(
      {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](const TensorNode& o) {
        const double* g = o.grad.data();
        if (an->requires_grad) {
          ensure_grad_buffer(an.get());
          // dA = dO * B^T
          for (std::size_t i = 0; i < m; ++i) {
            double* arow = an->grad.data() + i * k;
            const double* grow = g + i * n;
            for (std::size_t kk = 0; kk < k; ++kk) {
              const double* brow = bn->value.data() + kk * n;
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              arow[kk] += acc;
            }
          }
        }
        if (bn->requires_grad) {
          ensure_grad_buffer(bn.get());
          // dB = A^T * dO
          for (std::size_t kk = 0; kk < k; ++kk) {
            double* brow = bn->grad.data() + kk * n;
            for (std::size_t i = 0; i < m; ++i) {
              const double s = an->value[i * k + kk];
              if (s == 0.0) continue;
              const double* grow = g + i * n;
              for (std::size_t j = 0; j < n; ++j) brow[j] += s * grow[j];
            }
          }
        }
      });
}

Tensor transpose(const Tensor& a) {
  check_defined("transpose", {&a});
  if (a.shape().size() != 2) fail("transpose", "expects rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
  auto an = a.node();
  return make_taped({n, m}, std::move(out), {a}, [an, m, n](const TensorNode& o) {
    ensure_grad_buffer(an.get());
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += o.grad[j * m + i];
  });
}

namespace {

Tensor elementwise_binary(const char* name, const Tensor& a, const Tensor& b, int mode) {
  check_defined(name, {&a, &b});
  if (a.shape() != b.shape()) {
    fail(name, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = mode == 0 ? av[i] + bv[i] : mode == 1 ? av[i] - bv[i] : av[i] * bv[i];
  }
  auto an = a.node();
  auto bn = b.node();
  return make_taped(a.shape(), std::move(out), {a, b}, [an, bn, n, mode](const TensorNode& o) {
    ensure_grad_buffer(an.get());
    ensure_grad_buffer(bn.get());
    for (std::size_t i = 0; i < n; ++i) {
      const double g = o.grad[i];
      if (mode == 0) {
        an->grad[i] += g;
        bn->grad[i] += g;
      } else if (mode == 1) {
        an->grad[i] += g;
        bn->grad[i] -= g;
      } else {
        an->grad[i] += g * bn->value[i];
        bn->grad[i] += g * an->value[i];
      }
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise_binary("add", a, b, 0); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise_binary("sub", a, b, 1); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise_binary("mul", a, b, 2); }

Tensor scale(const Tensor& a, double factor) {
  check_defined("scale", {&a});
  const std::size_t n = a.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i] * factor;
  auto an = a.node();
  return make_taped(a.shape(), std::move(out), {a}, [an, n, factor](const TensorNode& o) {
    ensure_grad_buffer(an.get());
    for (std::size_t i = 0; i < n; ++i) an->grad[i] += o.grad[i] * factor;
  });
}

Tensor add_row(const Tensor& matrix, const Tensor& row) {
  check_defined("add_row", {&matrix, &row});
  const std::size_t m = matrix.rows(), n = matrix.cols();
  if (matrix.shape().size() != 2 || row.size() != n) {
    fail("add_row",
         "matrix " + shape_str(matrix.shape()) + " vs row " + shape_str(row.shape()));
  }
  std::vector<double> out(matrix.values().begin(), matrix.values().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += row.values()[j];
  auto mn = matrix.node();
  auto rn = row.node();
  return make_taped(matrix.shape(), std::move(out), {matrix, row},
                    [mn, rn, m, n](const TensorNode& o) {
                      ensure_grad_buffer(mn.get());
                      ensure_grad_buffer(rn.get());
                      for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < n; ++j) {
                          const double g = o.grad[i * n + j];
                          mn->grad[i * n + j] += g;
                          rn->grad[j] += g;
                        }
                      }
                    });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) fail("concat_cols", "no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    check_defined("concat_cols", {&p});
    if (p.shape().size() != 2 || p.rows() != m) {
      fail("concat_cols", "row mismatch, first part has " + std::to_string(m) + " rows, got " +
                              shape_str(p.shape()));
    }
    total += p.cols();
  }
  std::vector<double> out(m * total);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t c = p.cols();
    for (std::size_t i = 0; i < m; ++i) {
      std::copy_n(p.values().data() + i * c, c, out.data() + i * total + offset);
    }
    offset += c;
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  std::vector<std::shared_ptr<TensorNode>> nodes;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    nodes.push_back(p.node());
    widths.push_back(p.cols());
  }
  return make_taped({m, total}, std::move(out), std::move(parents),
                    [nodes, widths, m, total](const TensorNode& o) {
                      std::size_t offset = 0;
                      for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
                        auto& part = nodes[pi];
                        const std::size_t c = widths[pi];
                        ensure_grad_buffer(part.get());
                        for (std::size_t i = 0; i < m; ++i) {
                          const double* g = o.grad.data() + i * total + offset;
                          double* pg = part->grad.data() + i * c;
                          for (std::size_t j = 0; j < c; ++j) pg[j] += g[j];
                        }
                        offset += c;
                      }
                    });
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  check_defined("slice_cols", {&a});
  const std::size_t m = a.rows(), n = a.cols();
  if (a.shape().size() != 2 || start + count > n) {
    fail("slice_cols", "range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                           ") out of " + shape_str(a.shape()));
  }
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(a.values().data() + i * n + start, count, out.data() + i * count);
  }
  auto an = a.node();
  return make_taped({m, count}, std::move(out), {a}, [an, m, n, start, count](const TensorNode& o) {
    ensure_grad_buffer(an.get());
    for (std::size_t i = 0; i < m; ++i) {
      const double* g = o.grad.data() + i * count;
      double* ag = an->grad.data() + i * n + start;
      for (std::size_t j = 0; j < count; ++j) ag[j] += g[j];
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  check_defined("reshape", {&a});
  if (numel(shape) != a.size()) {
    fail("reshape", shape_str(a.shape()) + " cannot view as " + shape_str(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  auto an = a.node();
  const std::size_t n = a.size();
  return make_taped(std::move(shape), std::move(out), {a}, [an, n](const TensorNode& o) {
    ensure_grad_buffer(an.get());
    for (std::size_t i = 0; i < n; ++i) an->grad[i] += o.grad[i];
  });
}

Tensor gather_rows(const Tensor& a, std::vector<std::size_t> indices) {
  check_defined("gather_rows", {&a});
  if (a.shape().size() != 2) fail("gather_rows", "expects rank 2, got " + shape_str(a.shape()));
  const std::size_t n = a.cols();
  for (std::size_t idx : indices) {
    if (idx >= a.rows()) {
      fail("gather_rows", "row index " + std::to_string(idx) + " out of " +
                              std::to_string(a.rows()) + " rows");
    }
  }
  std::vector<double> out(indices.size() * n);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(a.values().data() + indices[i] * n, n, out.data() + i * n);
  }
  auto an = a.node();
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(indices));
  return make_taped({idx->size(), n}, std::move(out), {a}, [an, idx, n](const TensorNode& o) {
    ensure_grad_buffer(an.get());
    for (std::size_t i = 0; i < idx->size(); ++i) {
      const double* g = o.grad.data() + i * n;
      double* ag = an->grad.data() + (*idx)[i] * n;
      for (std::size_t j = 0; j < n; ++j) ag[j] += g[j];
    }
  });
}

Tensor embedding_bag(const Tensor& table, std::vector<std::size_t> indices, std::size_t rows) {
  check_defined("embedding_bag", {&table});
  if (table.shape().size() != 2) {
    fail("embedding_bag", "table must be rank 2, got " + shape_str(table.shape()));
  }
  if (rows == 0 || indices.size() % rows != 0) {
    fail("embedding_bag", std::to_string(indices.size()) + " indices do not divide into " +
                              std::to_string(rows) + " rows");
  }
  const std::size_t per_row = indices.size() / rows;
  const std::size_t n = table.cols();
  for (std::size_t idx : indices) {
    if (idx >= table.rows()) {
      fail("embedding_bag", "index " + std::to_string(idx) + " out of table with " +
                                std::to_string(table.rows()) + " rows");
    }
  }
  std::vector<double> out(rows * n, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double* orow = out.data() + r * n;
    for (std::size_t kk = 0; kk < per_row; ++kk) {
      const double* trow = table.values().data() + indices[r * per_row + kk] * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += trow[j];
    }
  }
  auto tn = table.node();
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(indices));
  return make_taped({rows, n}, std::move(out), {table},
                    [tn, idx, rows, per_row, n](const TensorNode& o) {
                      ensure_grad_buffer(tn.get());
                      for (std::size_t r = 0; r < rows; ++r) {
                        const double* g = o.grad.data() + r * n;
                        for (std::size_t kk = 0; kk < per_row; ++kk) {
                          double* tg = tn->grad.data() + (*idx)[r * per_row + kk] * n;
                          for (std::size_t j = 0; j < n; ++j) tg[j] += g[j];
                        }
                      }
                    });
}

Tensor softmax_rows(const Tensor& a) {
  check_defined("softmax", {&a});
  const std::size_t m = a.rows(), n = a.cols();
  if (a.shape().empty() || n == 0) fail("softmax", "empty input " + shape_str(a.shape()));
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a.values().data() + i * n;
    double* y = out.data() + i * n;
    double mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= sum;
  }
  auto an = a.node();
  auto probs = std::make_shared<std::vector<double>>(out);
  return make_taped(a.shape(), std::move(out), {a}, [an, probs, m, n](const TensorNode& o) {
    ensure_grad_buffer(an.get());
    for (std::size_t i = 0; i < m; ++i) {
      const double* p = probs->data() + i * n;
      const double* g = o.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += p[j] * g[j];
      double* ag = an->grad.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) ag[j] += p[j] * (g[j] - dot);
    }
  });
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  check_defined("layer_norm", {&x, &gain, &bias});
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.size() != n || bias.size() != n) {
    fail("layer_norm", "input " + shape_str(x.shape()) + " with gain " +
                           shape_str(gain.shape()) + " and bias " + shape_str(bias.shape()));
  }
  constexpr double kEps = 1e-5;
  std::vector<double> out(m * n);
  auto normed = std::make_shared<std::vector<double>>(m * n);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xv = x.values().data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xv[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xv[j] - mean) * (xv[j] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + kEps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double nx = (xv[j] - mean) * is;
      (*normed)[i * n + j] = nx;
      out[i * n + j] = nx * gain.values()[j] + bias.values()[j];
    }
  }
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  return make_taped(
      x.shape(), std::move(out), {x, gain, bias},
      [xn, gn, bn, normed, inv_std, m, n](const TensorNode& o) {
        ensure_grad_buffer(xn.get());
        ensure_grad_buffer(gn.get());
        ensure_grad_buffer(bn.get());
        for (std::size_t i = 0; i < m; ++i) {
          const double* g = o.grad.data() + i * n;
          const double* nx = normed->data() + i * n;
          const double is = (*inv_std)[i];
          double mean_dxhat = 0.0, mean_dxhat_x = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double dxhat = g[j] * gn->value[j];
            mean_dxhat += dxhat;
            mean_dxhat_x += dxhat * nx[j];
            gn->grad[j] += g[j] * nx[j];
            bn->grad[j] += g[j];
          }
          mean_dxhat /= static_cast<double>(n);
          mean_dxhat_x /= static_cast<double>(n);
          double* xg = xn->grad.data() + i * n;
          for (std::size_t j = 0; j < n; ++j) {
            const double dxhat = g[j] * gn->value[j];
            xg[j] += is * (dxhat - mean_dxhat - nx[j] * mean_dxhat_x);
          }
        }
      });
}

namespace {

Tensor elementwise_unary(const char* name, const Tensor& a, double (*f)(double),
                         double (*df)(double)) {
  check_defined(name, {&a});
  const std::size_t n = a.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(a.values()[i]);
  auto an = a.node();
  return make_taped(a.shape(), std::move(out), {a}, [an, n, df](const TensorNode& o) {
    ensure_grad_buffer(an.get());
    for (std::size_t i = 0; i < n; ++i) an->grad[i] += o.grad[i] * df(an->value[i]);
  });
}

double gelu_f(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }
double gelu_df(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}
double relu_f(double x) { return x > 0.0 ? x : 0.0; }
double relu_df(double x) { return x > 0.0 ? 1.0 : 0.0; }
double sigmoid_f(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
double sigmoid_df(double x) {
  const double s = sigmoid_f(x);
  return s * (1.0 - s);
}

}  // namespace

Tensor gelu(const Tensor& a) { return elementwise_unary("gelu", a, gelu_f, gelu_df); }
Tensor relu(const Tensor& a) { return elementwise_unary("relu", a, relu_f, relu_df); }
Tensor sigmoid(const Tensor& a) { return elementwise_unary("sigmoid", a, sigmoid_f, sigmoid_df); }

namespace {

Tensor reduce_axis(const char* name, const Tensor& a, int axis, bool mean) {
  check_defined(name, {&a});
  if (a.shape().size() != 2 || (axis != 0 && axis != 1)) {
    fail(name, "expects rank 2 and axis 0/1, got " + shape_str(a.shape()) + " axis " +
                   std::to_string(axis));
  }
  const std::size_t m = a.rows(), n = a.cols();
  const std::size_t out_len = axis == 0 ? n : m;
  const double denom = mean ? static_cast<double>(axis == 0 ? m : n) : 1.0;
  std::vector<double> out(out_len, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out[axis == 0 ? j : i] += a.values()[i * n + j];
    }
  }
  for (double& v : out) v /= denom;
  auto an = a.node();
  return make_taped({out_len}, std::move(out), {a}, [an, m, n, axis, denom](const TensorNode& o) {
    ensure_grad_buffer(an.get());
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        an->grad[i * n + j] += o.grad[axis == 0 ? j : i] / denom;
      }
    }
  });
}

Tensor reduce_all(const char* name, const Tensor& a, bool mean) {
  check_defined(name, {&a});
  const std::size_t n = a.size();
  if (n == 0) fail(name, "empty input");
  double total = 0.0;
  for (double v : a.values()) total += v;
  const double denom = mean ? static_cast<double>(n) : 1.0;
  auto an = a.node();
  return make_taped({1}, {total / denom}, {a}, [an, n, denom](const TensorNode& o) {
    ensure_grad_buffer(an.get());
    const double g = o.grad[0] / denom;
    for (std::size_t i = 0; i < n; ++i) an->grad[i] += g;
  });
}

}  // namespace

Tensor sum_axis(const Tensor& a, int axis) { return reduce_axis("sum_axis", a, axis, false); }
Tensor mean_axis(const Tensor& a, int axis) { return reduce_axis("mean_axis", a, axis, true); }
Tensor sum_all(const Tensor& a) { return reduce_all("sum_all", a, false); }
Tensor mean_all(const Tensor& a) { return reduce_all("mean_all", a, true); }

Tensor mean_row_blocks(const Tensor& a, std::size_t block_rows) {
  check_defined("mean_row_blocks", {&a});
  const std::size_t m = a.rows(), n = a.cols();
  if (a.shape().size() != 2 || block_rows == 0 || m % block_rows != 0) {
    fail("mean_row_blocks", shape_str(a.shape()) + " does not divide into blocks of " +
                                std::to_string(block_rows) + " rows");
  }
  const std::size_t blocks = m / block_rows;
  std::vector<double> out(blocks * n, 0.0);
  for (std::size_t b = 0; b < blocks; ++b) {
    double* orow = out.data() + b * n;
    for (std::size_t r = 0; r < block_rows; ++r) {
      const double* arow = a.values().data() + (b * block_rows + r) * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += arow[j];
    }
    for (std::size_t j = 0; j < n; ++j) orow[j] /= static_cast<double>(block_rows);
  }
  auto an = a.node();
  return make_taped({blocks, n}, std::move(out), {a},
                    [an, blocks, block_rows, n](const TensorNode& o) {
                      ensure_grad_buffer(an.get());
                      for (std::size_t b = 0; b < blocks; ++b) {
                        const double* g = o.grad.data() + b * n;
                        for (std::size_t r = 0; r < block_rows; ++r) {
                          double* ag = an->grad.data() + (b * block_rows + r) * n;
                          for (std::size_t j = 0; j < n; ++j) {
                            ag[j] += g[j] / static_cast<double>(block_rows);
                          }
                        }
                      }
                    });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t block_rows,
                 const Tensor& bias, double scale_factor) {
  check_defined("attention", {&q, &k, &v});
  const std::size_t rows = q.rows(), d = q.cols();
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    fail("attention", "q/k/v shapes differ: " + shape_str(q.shape()) + ", " +
                          shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  if (block_rows == 0 || rows % block_rows != 0) {
    fail("attention", std::to_string(rows) + " rows do not divide into blocks of " +
                          std::to_string(block_rows));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rows() != rows || bias.cols() != block_rows)) {
    fail("attention", "bias " + shape_str(bias.shape()) + " must be [" + std::to_string(rows) +
                          "x" + std::to_string(block_rows) + "]");
  }
  const std::size_t blocks = rows / block_rows;
  auto probs = std::make_shared<std::vector<double>>(rows * block_rows);
  std::vector<double> out(rows * d, 0.0);

  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t base = b * block_rows;
    for (std::size_t i = 0; i < block_rows; ++i) {
      const double* qrow = q.values().data() + (base + i) * d;
      double* prow = probs->data() + (base + i) * block_rows;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < block_rows; ++j) {
        const double* krow = k.values().data() + (base + j) * d;
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += qrow[c] * krow[c];
        s *= scale_factor;
        if (has_bias) s += bias.values()[(base + i) * block_rows + j];
        prow[j] = s;
        mx = std::max(mx, s);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < block_rows; ++j) {
        prow[j] = std::exp(prow[j] - mx);
        sum += prow[j];
      }
      double* orow = out.data() + (base + i) * d;
      for (std::size_t j = 0; j < block_rows; ++j) {
        prow[j] /= sum;
        const double* vrow = v.values().data() + (base + j) * d;
        for (std::size_t c = 0; c < d; ++c) orow[c] += prow[j] * vrow[c];
      }
    }
  }

  std::vector<Tensor> parents = {q, k, v};
  if (has_bias) parents.push_back(bias);
  auto qn = q.node();
  auto kn = k.node();
  auto vn = v.node();
  auto biasn = has_bias ? bias.node() : nullptr;
  return make_taped(
      q.shape(), std::move(out), std::move(parents),
      [qn, kn, vn, biasn, probs, blocks, block_rows, d, scale_factor](const TensorNode& o) {
        ensure_grad_buffer(qn.get());
        ensure_grad_buffer(kn.get());
        ensure_grad_buffer(vn.get());
        if (biasn) ensure_grad_buffer(biasn.get());
        std::vector<double> dscore(block_rows);
        for (std::size_t b = 0; b < blocks; ++b) {
          const std::size_t base = b * block_rows;
          for (std::size_t i = 0; i < block_rows; ++i) {
            const double* g = o.grad.data() + (base + i) * d;
            const double* prow = probs->data() + (base + i) * block_rows;
            // dP[j] = g . V_j ; dS = P o (dP - sum_j dP_j P_j)
            double dot = 0.0;
            for (std::size_t j = 0; j < block_rows; ++j) {
              const double* vrow = vn->value.data() + (base + j) * d;
              double dp = 0.0;
              for (std::size_t c = 0; c < d; ++c) dp += g[c] * vrow[c];
              dscore[j] = dp;
              dot += dp * prow[j];
            }
            for (std::size_t j = 0; j < block_rows; ++j) {
              const double ds = prow[j] * (dscore[j] - dot);
              // dV accumulation
              double* vg = vn->grad.data() + (base + j) * d;
              for (std::size_t c = 0; c < d; ++c) vg[c] += prow[j] * g[c];
              if (biasn) biasn->grad[(base + i) * block_rows + j] += ds;
              const double* krow = kn->value.data() + (base + j) * d;
              const double* qrow = qn->value.data() + (base + i) * d;
              double* qg = qn->grad.data() + (base + i) * d;
              double* kg = kn->grad.data() + (base + j) * d;
              for (std::size_t c = 0; c < d; ++c) {
                qg[c] += ds * scale_factor * krow[c];
                kg[c] += ds * scale_factor * qrow[c];
              }
            }
          }
        }
      });
}

Tensor dropout(const Tensor& a, double rate, Rng& rng) {
  check_defined("dropout", {&a});
  if (rate < 0.0 || rate >= 1.0) {
    fail("dropout", "rate must be in [0, 1), got " + std::to_string(rate));
  }
  if (rate == 0.0) return a;
  const std::size_t n = a.size();
  const double keep = 1.0 - rate;
  auto mask = std::make_shared<std::vector<double>>(n);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double m = rng.uniform() < rate ? 0.0 : 1.0 / keep;
    (*mask)[i] = m;
    out[i] = a.values()[i] * m;
  }
  auto an = a.node();
  return make_taped(a.shape(), std::move(out), {a}, [an, mask, n](const TensorNode& o) {
    ensure_grad_buffer(an.get());
    for (std::size_t i = 0; i < n; ++i) an->grad[i] += o.grad[i] * (*mask)[i];
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::vector<int> targets) {
  check_defined("softmax_cross_entropy", {&logits});
  const std::size_t m = logits.rows(), n = logits.cols();
  if (logits.shape().size() != 2 || targets.size() != m) {
    fail("softmax_cross_entropy", "logits " + shape_str(logits.shape()) + " with " +
                                      std::to_string(targets.size()) + " targets");
  }
  auto probs = std::make_shared<std::vector<double>>(m * n);
  double loss = 0.0;
  std::size_t valid = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const int t = targets[i];
    if (t < 0) continue;
    if (static_cast<std::size_t>(t) >= n) {
      fail("softmax_cross_entropy",
           "target " + std::to_string(t) + " out of " + std::to_string(n) + " classes");
    }
    const double* x = logits.values().data() + i * n;
    double mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    double* p = probs->data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      p[j] = std::exp(x[j] - mx);
      sum += p[j];
    }
    for (std::size_t j = 0; j < n; ++j) p[j] /= sum;
    loss += -std::log(std::max(p[t], 1e-300));
    ++valid;
  }
  if (valid == 0) fail("softmax_cross_entropy", "no valid targets");
  loss /= static_cast<double>(valid);
  auto ln = logits.node();
  auto tgt = std::make_shared<std::vector<int>>(std::move(targets));
  return make_taped({1}, {loss}, {logits}, [ln, tgt, probs, m, n, valid](const TensorNode& o) {
    ensure_grad_buffer(ln.get());
    const double g = o.grad[0] / static_cast<double>(valid);
    for (std::size_t i = 0; i < m; ++i) {
      const int t = (*tgt)[i];
      if (t < 0) continue;
      const double* p = probs->data() + i * n;
      double* lg = ln->grad.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        lg[j] += g * (p[j] - (static_cast<int>(j) == t ? 1.0 : 0.0));
      }
    }
  });
}

Tensor mse_loss(const Tensor& pred, std::vector<double> target, std::vector<std::uint8_t> mask) {
  check_defined("mse_loss", {&pred});
  const std::size_t n = pred.size();
  if (target.size() != n || mask.size() != n) {
    fail("mse_loss", "pred " + shape_str(pred.shape()) + " with " + std::to_string(target.size()) +
                         " targets and " + std::to_string(mask.size()) + " mask entries");
  }
  std::size_t valid = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const double d = pred.values()[i] - target[i];
    loss += d * d;
    ++valid;
  }
  if (valid == 0) fail("mse_loss", "no valid targets");
  loss /= static_cast<double>(valid);
  auto pn = pred.node();
  auto tgt = std::make_shared<std::vector<double>>(std::move(target));
  auto msk = std::make_shared<std::vector<std::uint8_t>>(std::move(mask));
  return make_taped({1}, {loss}, {pred}, [pn, tgt, msk, n, valid](const TensorNode& o) {
    ensure_grad_buffer(pn.get());
    const double g = o.grad[0] * 2.0 / static_cast<double>(valid);
    for (std::size_t i = 0; i < n; ++i) {
      if (!(*msk)[i]) continue;
      pn->grad[i] += g * (pn->value[i] - (*tgt)[i]);
    }
  });
}

Tensor bce_with_logits(const Tensor& logits, std::vector<double> target01,
                       std::vector<std::uint8_t> mask) {
  check_defined("bce_with_logits", {&logits});
  const std::size_t n = logits.size();
  if (target01.size() != n || mask.size() != n) {
    fail("bce_with_logits", "logits " + shape_str(logits.shape()) + " with " +
                                std::to_string(target01.size()) + " targets");
  }
  std::size_t valid = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const double x = logits.values()[i];
    const double y = target01[i];
    loss += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    ++valid;
  }
  if (valid == 0) fail("bce_with_logits", "no valid targets");
  loss /= static_cast<double>(valid);
  auto ln = logits.node();
  auto tgt = std::make_shared<std::vector<double>>(std::move(target01));
  auto msk = std::make_shared<std::vector<std::uint8_t>>(std::move(mask));
  return make_taped({1}, {loss}, {logits}, [ln, tgt, msk, n, valid](const TensorNode& o) {
    ensure_grad_buffer(ln.get());
    const double g = o.grad[0] / static_cast<double>(valid);
    for (std::size_t i = 0; i < n; ++i) {
      if (!(*msk)[i]) continue;
      ln->grad[i] += g * (sigmoid_f(ln->value[i]) - (*tgt)[i]);
    }
  });
}

// --------------------------------------------------------------------------
// apply_primitive dispatch
// --------------------------------------------------------------------------

const char* primitive_name(Primitive kind) {
  switch (kind) {
    case Primitive::kMatMul: return "matmul";
    case Primitive::kTranspose: return "transpose";
    case Primitive::kAdd: return "add";
    case Primitive::kSub: return "sub";
    case Primitive::kMul: return "mul";
    case Primitive::kScale: return "scale";
    case Primitive::kAddRow: return "add_row";
    case Primitive::kConcatCols: return "concat_cols";
    case Primitive::kSliceCols: return "slice_cols";
    case Primitive::kReshape: return "reshape";
    case Primitive::kGatherRows: return "gather_rows";
    case Primitive::kEmbeddingBag: return "embedding_bag";
    case Primitive::kSoftmax: return "softmax";
    case Primitive::kLayerNorm: return "layer_norm";
    case Primitive::kGelu: return "gelu";
    case Primitive::kRelu: return "relu";
    case Primitive::kSigmoid: return "sigmoid";
    case Primitive::kSumAxis: return "sum_axis";
    case Primitive::kMeanAxis: return "mean_axis";
    case Primitive::kSumAll: return "sum_all";
    case Primitive::kMeanAll: return "mean_all";
    case Primitive::kMeanRowBlocks: return "mean_row_blocks";
  }
  return "unknown";
}

Tensor apply_primitive(Primitive kind, std::span<const Tensor> in, const PrimitiveArgs& args) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      fail(primitive_name(kind),
           "expects " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
    }
  };
  switch (kind) {
    case Primitive::kMatMul: need(2); return matmul(in[0], in[1]);
    case Primitive::kTranspose: need(1); return transpose(in[0]);
    case Primitive::kAdd: need(2); return add(in[0], in[1]);
    case Primitive::kSub: need(2); return sub(in[0], in[1]);
    case Primitive::kMul: need(2); return mul(in[0], in[1]);
    case Primitive::kScale: need(1); return scale(in[0], args.scalar);
    case Primitive::kAddRow: need(2); return add_row(in[0], in[1]);
    case Primitive::kConcatCols: return concat_cols(in);
    case Primitive::kSliceCols: need(1); return slice_cols(in[0], args.start, args.count);
    case Primitive::kReshape: need(1); return reshape(in[0], args.shape);
    case Primitive::kGatherRows: need(1); return gather_rows(in[0], args.indices);
    case Primitive::kEmbeddingBag: need(1); return embedding_bag(in[0], args.indices, args.rows);
    case Primitive::kSoftmax: need(1); return softmax_rows(in[0]);
    case Primitive::kLayerNorm: need(3); return layer_norm_rows(in[0], in[1], in[2]);
    case Primitive::kGelu: need(1); return gelu(in[0]);
    case Primitive::kRelu: need(1); return relu(in[0]);
    case Primitive::kSigmoid: need(1); return sigmoid(in[0]);
    case Primitive::kSumAxis: need(1); return sum_axis(in[0], args.axis);
    case Primitive::kMeanAxis: need(1); return mean_axis(in[0], args.axis);
    case Primitive::kSumAll: need(1); return sum_all(in[0]);
    case Primitive::kMeanAll: need(1); return mean_all(in[0]);
    case Primitive::kMeanRowBlocks: need(1); return mean_row_blocks(in[0], args.block_rows);
  }
  fail("apply_primitive", "unknown primitive");
}

}  // namespace popgraph
