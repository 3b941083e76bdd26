#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "rope_probe/rope.hpp"
#include "rope_probe/tensor.hpp"

namespace rope_probe {

// Handle to a node in a Graph.
struct Var {
  std::size_t id = 0;
};

struct Gradient {
  std::size_t parameter_id = 0;
  Tensor value;
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kMatmul,            // a * b, or a * b^T when transposed
  kAdd,
  kMul,               // elementwise, equal shapes
  kScale,             // x * constant scalar
  kMask,              // x * constant tensor of the same shape
  kSoftmax,           // vectors: over all entries; matrices: per row
  kLog,
  kSum,
  kL2Squared,
  kL1Norm,
  kRopeRotate,        // rows of x rotated by per-row positions
  kSelectRows,
};

// Tape for reverse-mode differentiation over the small op set above. Nodes
// are appended in evaluation order, so the tape is already topologically
// sorted and backward() is a single reverse sweep.
class Graph {
 public:
  Var parameter(Tensor value);
  Var constant(Tensor value);

  Var matmul(Var a, Var b);
  Var matmul_transposed(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var x, double factor);
  Var mask(Var x, Tensor mask);
  Var softmax(Var x);
  Var log(Var x);
  Var sum(Var x);
  Var l2_squared(Var x);
  Var l1_norm(Var x);
  Var rope_rotate(Var x, std::vector<std::int64_t> positions, const RopeConfig& config);
  Var select_rows(Var x, std::vector<std::size_t> rows);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  double scalar(Var v) const;
  bool is_parameter(Var v) const { return nodes_.at(v.id).is_parameter; }
  std::size_t size() const { return nodes_.size(); }

  // Derivatives of the scalar `loss` with respect to every parameter, in
  // creation order.
  std::vector<Gradient> backward(Var loss) const;

  // Test hook: appends a node whose kind backward() does not know.
  Var unsupported_for_testing(Var x);

 private:
  struct Node {
    OpKind kind = OpKind::kLeaf;
    bool is_parameter = false;
    bool transposed = false;
    std::size_t lhs = 0;
    std::size_t rhs = 0;
    double factor = 0.0;
    Tensor value;
    Tensor aux;
    std::vector<std::int64_t> positions;
    std::vector<std::size_t> rows;
    std::optional<RopeConfig> rope;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
};

}  // namespace rope_probe
