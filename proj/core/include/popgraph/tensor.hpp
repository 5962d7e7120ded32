#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "popgraph/rng.hpp"

namespace popgraph {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Pulls this node's grad into its parents. Released after backward so the
  // tape lives exactly one forward pass.
  std::function<void(const TensorNode&)> backward_fn;
  int topo_mark = 0;
};

}  // namespace detail

/// Dense 64-bit float tensor with reverse-mode differentiation. Values are
/// row-major; rank 0/1/2 covers everything the model needs. A Tensor is a
/// cheap shared handle: copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rows() const;  // extent 0, or 1 for scalars
  std::size_t cols() const;  // extent 1, or extent 0 for vectors

  std::span<const double> values() const;
  /// Direct mutable access to the storage; bypasses the tape. Intended for
  /// parameter updates and test fixtures, not for taped computation.
  std::span<double> mutable_values();

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void ensure_grad();
  void zero_grad();

  double item() const;

  std::shared_ptr<detail::TensorNode> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;

  friend Tensor make_taped(Shape, std::vector<double>, std::vector<Tensor>,
                           std::function<void(const detail::TensorNode&)>);
};

// ---------------------------------------------------------------------------
// Primitives. Every function validates shapes and reports the primitive name
// plus the offending shapes on error. Results are recorded on the tape when
// any input requires gradients.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// Adds a length-C row vector to every row of an R x C matrix.
Tensor add_row(const Tensor& matrix, const Tensor& row);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor reshape(const Tensor& a, Shape shape);
Tensor gather_rows(const Tensor& a, std::vector<std::size_t> indices);
/// indices holds rows * per_row entries; output row r is the sum of the table
/// rows indices[r*per_row .. (r+1)*per_row).
Tensor embedding_bag(const Tensor& table, std::vector<std::size_t> indices, std::size_t rows);
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean_axis(const Tensor& a, int axis);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
/// Mean over consecutive blocks of block_rows rows: [B*block_rows, C] -> [B, C].
Tensor mean_row_blocks(const Tensor& a, std::size_t block_rows);
/// Scaled dot-product attention over independent consecutive row blocks.
/// q, k, v are [B*block_rows, d]; bias, when defined, is [B*block_rows,
/// block_rows] holding additive logits for each query row against its block.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t block_rows,
                 const Tensor& bias, double scale);
/// Inverted-scale dropout; identity when rate == 0. Mask is drawn from rng.
Tensor dropout(const Tensor& a, double rate, Rng& rng);

/// Mean softmax cross-entropy over rows; targets[r] == -1 skips row r.
Tensor softmax_cross_entropy(const Tensor& logits, std::vector<int> targets);
/// Mean squared error over positions where mask != 0.
Tensor mse_loss(const Tensor& pred, std::vector<double> target, std::vector<std::uint8_t> mask);
/// Mean binary cross-entropy with logits over positions where mask != 0.
Tensor bce_with_logits(const Tensor& logits, std::vector<double> target01,
                       std::vector<std::uint8_t> mask);

/// Runs reverse-mode accumulation from a scalar loss. Gradients accumulate
/// additively across multiple uses of a tensor. The tape is freed afterwards;
/// calling backward twice on the same forward pass is an error.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Uniform dispatch surface over the primitive set.
// ---------------------------------------------------------------------------

enum class Primitive {
  kMatMul,
  kTranspose,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddRow,
  kConcatCols,
  kSliceCols,
  kReshape,
  kGatherRows,
  kEmbeddingBag,
  kSoftmax,
  kLayerNorm,
  kGelu,
  kRelu,
  kSigmoid,
  kSumAxis,
  kMeanAxis,
  kSumAll,
  kMeanAll,
  kMeanRowBlocks,
};

struct PrimitiveArgs {
  double scalar = 0.0;
  int axis = 0;
  std::size_t start = 0;
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t block_rows = 0;
  Shape shape;
  std::vector<std::size_t> indices;
};

Tensor apply_primitive(Primitive kind, std::span<const Tensor> inputs,
                       const PrimitiveArgs& args = {});

const char* primitive_name(Primitive kind);

}  // namespace popgraph
