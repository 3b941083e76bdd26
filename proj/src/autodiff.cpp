#include "rope_probe/autodiff.hpp"

#include <cmath>
#include <fmt/format.h>

#include "rope_probe/errors.hpp"

namespace rope_probe {

namespace {

Tensor scalar_tensor(double v) { return Tensor({1}, {v}); }

void add_into(Tensor& acc, std::span<const double> delta) {
  for (std::size_t i = 0; i < delta.size(); ++i) acc[i] += delta[i];
}

void require_same_size(const Tensor& a, const Tensor& b, const char* op) {
  if (a.size() != b.size() || a.cols() != b.cols()) {
    throw ShapeError(fmt::format("{}: operand sizes {} and {} differ", op, a.size(), b.size()));
  }
}

}  // namespace

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Var Graph::parameter(Tensor value) {
  value.check_finite("parameter");
  Node n;
  n.is_parameter = true;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::matmul(Var a, Var b) {
  Node n;
  n.kind = OpKind::kMatmul;
  n.lhs = a.id;
  n.rhs = b.id;
  n.value = rope_probe::matmul(value(a), value(b));
  return push(std::move(n));
}

Var Graph::matmul_transposed(Var a, Var b) {
  Node n;
  n.kind = OpKind::kMatmul;
  n.transposed = true;
  n.lhs = a.id;
  n.rhs = b.id;
  n.value = rope_probe::matmul_transposed(value(a), value(b));
  return push(std::move(n));
}

Var Graph::add(Var a, Var b) {
  require_same_size(value(a), value(b), "add");
  Node n;
  n.kind = OpKind::kAdd;
  n.lhs = a.id;
  n.rhs = b.id;
  n.value = value(a);
  add_into(n.value, value(b).data());
  return push(std::move(n));
}

Var Graph::sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var Graph::mul(Var a, Var b) {
  require_same_size(value(a), value(b), "mul");
  Node n;
  n.kind = OpKind::kMul;
  n.lhs = a.id;
  n.rhs = b.id;
  n.value = value(a);
  const auto& bv = value(b);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] *= bv[i];
  return push(std::move(n));
}

Var Graph::scale(Var x, double factor) {
  Node n;
  n.kind = OpKind::kScale;
  n.lhs = x.id;
  n.factor = factor;
  n.value = value(x);
  for (auto& v : n.value.data()) v *= factor;
  return push(std::move(n));
}

Var Graph::mask(Var x, Tensor mask) {
  require_same_size(value(x), mask, "mask");
  Node n;
  n.kind = OpKind::kMask;
  n.lhs = x.id;
  n.value = value(x);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] *= mask[i];
  n.aux = std::move(mask);
  return push(std::move(n));
}

Var Graph::softmax(Var x) {
  Node n;
  n.kind = OpKind::kSoftmax;
  n.lhs = x.id;
  const auto& xv = value(x);
  n.value = xv.rows() == 1 ? Tensor(xv.shape(), rope_probe::softmax(xv.data()))
                           : rope_probe::softmax(xv);
  return push(std::move(n));
}

Var Graph::log(Var x) {
  Node n;
  n.kind = OpKind::kLog;
  n.lhs = x.id;
  n.value = value(x);
  for (auto& v : n.value.data()) {
    if (!(v > 0.0)) throw NumericError(fmt::format("log of non-positive value {}", v));
    v = std::log(v);
  }
  return push(std::move(n));
}

Var Graph::sum(Var x) {
  Node n;
  n.kind = OpKind::kSum;
  n.lhs = x.id;
  double acc = 0.0;
  for (double v : value(x).data()) acc += v;
  n.value = scalar_tensor(acc);
  return push(std::move(n));
}

Var Graph::l2_squared(Var x) {
  Node n;
  n.kind = OpKind::kL2Squared;
  n.lhs = x.id;
  double acc = 0.0;
  for (double v : value(x).data()) acc += v * v;
  n.value = scalar_tensor(acc);
  return push(std::move(n));
}

Var Graph::l1_norm(Var x) {
  Node n;
  n.kind = OpKind::kL1Norm;
  n.lhs = x.id;
  double acc = 0.0;
  for (double v : value(x).data()) acc += std::abs(v);
  n.value = scalar_tensor(acc);
  return push(std::move(n));
}

Var Graph::rope_rotate(Var x, std::vector<std::int64_t> positions, const RopeConfig& config) {
  const auto& xv = value(x);
  if (xv.cols() != config.dim()) {
    throw ShapeError(fmt::format("rope_rotate: row length {} vs head dim {}", xv.cols(), config.dim()));
  }
  if (positions.size() != xv.rows()) {
    throw ShapeError(fmt::format("rope_rotate: {} positions for {} rows", positions.size(), xv.rows()));
  }
  const auto thetas = frequencies(config);
  Node n;
  n.kind = OpKind::kRopeRotate;
  n.lhs = x.id;
  n.value = Tensor::zeros_like(xv);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    rotate_signed_into(xv.row(r), positions[r], thetas, config, n.value.row(r));
  }
  n.positions = std::move(positions);
  n.rope = config;
  return push(std::move(n));
}

Var Graph::select_rows(Var x, std::vector<std::size_t> rows) {
  const auto& xv = value(x);
  Node n;
  n.kind = OpKind::kSelectRows;
  n.lhs = x.id;
  n.value = Tensor({rows.size(), xv.cols()});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= xv.rows()) throw ShapeError(fmt::format("select_rows: row {} out of range", rows[r]));
    std::copy(xv.row(rows[r]).begin(), xv.row(rows[r]).end(), n.value.row(r).begin());
  }
  n.rows = std::move(rows);
  return push(std::move(n));
}

Var Graph::unsupported_for_testing(Var x) {
  Node n;
  n.kind = static_cast<OpKind>(0xff);
  n.lhs = x.id;
  n.value = value(x);
  return push(std::move(n));
}

double Graph::scalar(Var v) const {
  const auto& t = value(v);
  if (t.size() != 1) throw ShapeError("scalar() on a non-scalar node");
  return t[0];
}

std::vector<Gradient> Graph::backward(Var loss) const {
  if (value(loss).size() != 1) throw ShapeError("backward() needs a scalar loss");

  std::vector<Tensor> adj(loss.id + 1);
  auto accumulate = [&](std::size_t id, const Tensor& delta) {
    if (adj[id].empty()) {
      adj[id] = Tensor(nodes_[id].value.shape(), std::vector<double>(delta.data().begin(), delta.data().end()));
    } else {
      add_into(adj[id], delta.data());
    }
  };
  adj[loss.id] = Tensor(nodes_[loss.id].value.shape(), {1.0});

  for (std::size_t id = loss.id + 1; id-- > 0;) {
    if (adj[id].empty()) continue;
    const Node& n = nodes_[id];
    const Tensor& g = adj[id];
    switch (n.kind) {
      case OpKind::kLeaf:
        break;
      case OpKind::kMatmul: {
        const Tensor& a = nodes_[n.lhs].value;
        const Tensor& b = nodes_[n.rhs].value;
        const std::size_t m = a.rows();
        const std::size_t k = a.cols();
        const std::size_t cols = g.cols();
        Tensor ga = Tensor::zeros_like(a);
        Tensor gb = Tensor::zeros_like(b);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < cols; ++j) {
            const double gij = g[i * cols + j];
            for (std::size_t p = 0; p < k; ++p) {
              if (n.transposed) {
                // out = A B^T, B is cols x k
                ga[i * k + p] += gij * b[j * k + p];
                gb[j * k + p] += gij * a[i * k + p];
              } else {
                ga[i * k + p] += gij * b[p * cols + j];
                gb[p * cols + j] += gij * a[i * k + p];
              }
            }
          }
        }
        accumulate(n.lhs, ga);
        accumulate(n.rhs, gb);
        break;
      }
      case OpKind::kAdd:
        accumulate(n.lhs, g);
        accumulate(n.rhs, g);
        break;
      case OpKind::kMul: {
        Tensor ga = g;
        Tensor gb = g;
        const auto& a = nodes_[n.lhs].value;
        const auto& b = nodes_[n.rhs].value;
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] *= b[i];
          gb[i] *= a[i];
        }
        accumulate(n.lhs, ga);
        accumulate(n.rhs, gb);
        break;
      }
      case OpKind::kScale: {
        Tensor gx = g;
        for (auto& v : gx.data()) v *= n.factor;
        accumulate(n.lhs, gx);
        break;
      }
      case OpKind::kMask: {
        Tensor gx = g;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= n.aux[i];
        accumulate(n.lhs, gx);
        break;
      }
      case OpKind::kSoftmax: {
        const Tensor& y = n.value;
        Tensor gx = Tensor::zeros_like(y);
        const std::size_t rows = y.rows();
        const std::size_t cols = y.cols();
        for (std::size_t r = 0; r < rows; ++r) {
          double inner = 0.0;
          for (std::size_t c = 0; c < cols; ++c) inner += y[r * cols + c] * g[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c) {
            gx[r * cols + c] = y[r * cols + c] * (g[r * cols + c] - inner);
          }
        }
        accumulate(n.lhs, gx);
        break;
      }
      case OpKind::kLog: {
        Tensor gx = g;
        const auto& x = nodes_[n.lhs].value;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] /= x[i];
        accumulate(n.lhs, gx);
        break;
      }
      case OpKind::kSum: {
        Tensor gx = Tensor::zeros_like(nodes_[n.lhs].value);
        for (auto& v : gx.data()) v = g[0];
        accumulate(n.lhs, gx);
        break;
      }
      case OpKind::kL2Squared: {
        Tensor gx = nodes_[n.lhs].value;
        for (auto& v : gx.data()) v *= 2.0 * g[0];
        accumulate(n.lhs, gx);
        break;
      }
      case OpKind::kL1Norm: {
        Tensor gx = nodes_[n.lhs].value;
        for (auto& v : gx.data()) v = (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0)) * g[0];
        accumulate(n.lhs, gx);
        break;
      }
      case OpKind::kRopeRotate: {
        // M_m is orthogonal, so the adjoint rotates back by -m.
        const auto thetas = frequencies(*n.rope);
        Tensor gx = Tensor::zeros_like(g);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          rotate_signed_into(g.row(r), -n.positions[r], thetas, *n.rope, gx.row(r));
        }
        accumulate(n.lhs, gx);
        break;
      }
      case OpKind::kSelectRows: {
        Tensor gx = Tensor::zeros_like(nodes_[n.lhs].value);
        for (std::size_t r = 0; r < n.rows.size(); ++r) {
          auto dst = gx.row(n.rows[r]);
          auto src = g.row(r);
          for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
        }
        accumulate(n.lhs, gx);
        break;
      }
      default:
        throw std::logic_error(fmt::format("backward: unsupported operation (kind {}) at node {}",
                                           static_cast<int>(n.kind), id));
    }
  }

  std::vector<Gradient> grads;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (!nodes_[id].is_parameter) continue;
    Gradient grad{id, id < adj.size() && !adj[id].empty() ? adj[id] : Tensor::zeros_like(nodes_[id].value)};
    grad.value.check_finite("gradient");
    grads.push_back(std::move(grad));
  }
  return grads;
}

}  // namespace rope_probe
