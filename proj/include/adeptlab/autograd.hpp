#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "adeptlab/error.hpp"

namespace adeptlab {

class Graph;
class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major fp64 tensor. Leaves (parameters, constants) are created
// with make()/zeros() and live across graphs; everything else is produced
// by Graph ops and owned by the graph's tape.
class Tensor {
 public:
  // Leaf constructors. requires_grad marks a trainable parameter.
  static TensorPtr make(std::vector<std::size_t> shape,
                        std::vector<double> values, bool requires_grad = false);
  static TensorPtr zeros(std::vector<std::size_t> shape,
                         bool requires_grad = false);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return values_.size(); }
  bool is_scalar() const { return values_.size() == 1; }
  // Rank-2 accessors; ContractError on other ranks.
  std::size_t rows() const;
  std::size_t cols() const;

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  double at(std::size_t r, std::size_t c) const;
  double scalar() const;  // ContractError unless numel() == 1

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on);

  // Gradient buffer. Empty means "no gradient reached this tensor";
  // frozen leaves stay empty forever.
  bool has_grad() const { return !grad_.empty(); }
  const std::vector<double>& grad() const { return grad_; }
  void zero_grad() { grad_.clear(); }

  // Shape spelled as e.g. "3x4" for error messages.
  std::string shape_str() const;

 private:
  friend class Graph;
  Tensor() = default;

  // Adds v into grad[i], allocating a zero buffer on first touch.
  void accumulate(std::size_t i, double v);
  bool wants_grad() const { return needs_grad_; }

  std::vector<std::size_t> shape_;
  std::vector<double> values_;
  std::vector<double> grad_;
  bool requires_grad_ = false;
  // True when a gradient must flow into this tensor (trainable leaf, or
  // an op output on a path from a trainable leaf).
  bool needs_grad_ = false;
  // Set on op outputs; pushes this node's gradient into its inputs.
  std::function<void()> backprop_;
};

// Define-by-run reverse-mode graph. Every op appends its output node to
// the tape, so creation order is already a topological order; backward
// walks the tape once, in reverse.
class Graph {
 public:
  // Non-trainable in-graph constant (e.g. an offset matrix under probe).
  TensorPtr constant(std::vector<std::size_t> shape,
                     std::vector<double> values);

  // c[m,n] = a[m,k] * b[k,n]
  TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
  TensorPtr transpose(const TensorPtr& x);
  // Elementwise same-shape add, or row-broadcast when b is a rank-1
  // vector matching a's column count.
  TensorPtr add(const TensorPtr& a, const TensorPtr& b);
  TensorPtr scale(const TensorPtr& x, double c);
  TensorPtr relu(const TensorPtr& x);
  // Per-row softmax with max subtraction.
  TensorPtr row_softmax(const TensorPtr& x);
  TensorPtr concat_rows(const TensorPtr& a, const TensorPtr& b);
  TensorPtr concat_cols(const std::vector<TensorPtr>& parts);
  // Gathers rows x[ids[0]], x[ids[1]], ...; gradient is scattered back
  // into exactly those rows.
  TensorPtr row_select(const TensorPtr& x, const std::vector<std::size_t>& ids);
  // Mean over the rows with keep[i] != 0; result is 1 x cols.
  TensorPtr mean_rows(const TensorPtr& x, const std::vector<std::uint8_t>& keep);
  // Per-row normalization with trainable gain/bias (rank-1, length cols).
  TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain,
                       const TensorPtr& bias, double eps);
  // Mean over rows of -log softmax(logits)[label]; scalar output.
  TensorPtr cross_entropy(const TensorPtr& logits,
                          const std::vector<std::size_t>& labels);
  TensorPtr sum(const TensorPtr& x);

  // Reverse-mode sweep from a scalar loss. Gradients accumulate into
  // every reachable tensor with needs_grad; frozen leaves are skipped.
  void backward(const TensorPtr& loss);

  std::size_t size() const { return tape_.size(); }

 private:
  TensorPtr emit(std::vector<std::size_t> shape, std::vector<double> values,
                 const std::vector<TensorPtr>& inputs);
  std::vector<TensorPtr> tape_;
};

}  // namespace adeptlab
