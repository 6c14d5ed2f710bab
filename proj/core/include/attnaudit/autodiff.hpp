#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "attnaudit/tensor.hpp"

// Tape-based reverse-mode differentiation over dense double tensors.
//
// A Graph owns every node; Var is a cheap handle (graph pointer + index).
// Nodes are appended in evaluation order, so the tape order is already a
// topological order and backward() is a single reverse sweep.
namespace attnaudit::ad {

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kAddRow,
  kScale,
  kAddScalar,
  kMatMul,
  kTanh,
  kSigmoid,
  kRelu,
  kExp,
  kLog,
  kAbs,
  kXLogX,
  kClampMin,
  kSum,
  kConcatRows,
  kConcatCols,
  kSliceRows,
  kSliceCols,
  kReshape,
  kMaskedSoftmax,
  kGatherRows,
  kWindowRows,
  kWeightedRowSum,
  kDetach,
};

std::string_view op_name(Op op);

class Graph;

struct Var {
  Graph* graph = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
};

struct GraphOptions {
  // Throw NumericError as soon as an op produces a non-finite value.
  bool check_finite = false;
};

// Op-specific constants recorded alongside a node.
struct NodeAux {
  double scalar = 0.0;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::vector<std::size_t> indices;
  std::vector<double> mask;
};

class Graph {
 public:
  explicit Graph(GraphOptions options = {}) : options_(options) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = delete;
  Graph& operator=(Graph&&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const;
  /// Gradient of the last backward() output w.r.t. v; zeros if v was not reached.
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const;
  Op op(Var v) const;

  /// Populates the gradient slot of every reachable requires-grad node.
  /// Slots are reset first, so repeated calls give identical results.
  void backward(Var output);

  /// Drops all node storage. Any later access through this graph throws.
  void release();

  std::size_t size() const noexcept { return nodes_.size(); }
  bool check_finite() const noexcept { return options_.check_finite; }

  using Aux = NodeAux;

  Var record(Op op, Tensor value, std::vector<std::uint32_t> parents, Aux aux = {});

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::uint32_t> parents;
    Aux aux;
    Op op = Op::kLeaf;
    bool requires_grad = false;
  };

  const Node& node(Var v) const;
  void accumulate(std::uint32_t id, const Tensor& contribution);
  Tensor& grad_slot(std::uint32_t id);
  void propagate(const Node& n);

  GraphOptions options_;
  std::vector<Node> nodes_;
  bool released_ = false;
};

// Elementwise ops require identical shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_row(Var x, Var bias);  // bias (n) broadcast over the rows of x (r x n)
Var scale(Var x, double factor);
Var add_scalar(Var x, double offset);
Var matmul(Var a, Var b);  // (r x k) * (k x c)
Var tanh(Var x);
Var sigmoid(Var x);
Var relu(Var x);
Var exp(Var x);
Var log(Var x);
Var abs(Var x);
Var xlogx(Var x);  // x * log(x), with 0 at x = 0
Var clamp_min(Var x, double floor);
Var sum(Var x);  // rank-0 result
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var x, std::size_t begin, std::size_t end);
Var slice_cols(Var x, std::size_t begin, std::size_t end);
Var reshape(Var x, Shape shape);
/// Softmax over all entries of x. mask (same size, or empty for "all on")
/// marks active entries; masked entries receive a large negative offset and
/// come out exactly zero.
Var masked_softmax(Var x, std::span<const bool> mask = {});
Var gather_rows(Var table, std::span<const std::size_t> ids);
/// Same-padded sliding windows: row t holds rows t-(w-1)/2 .. t+w/2 of x
/// (zeros past either end) concatenated, so the result is T x (w*d).
Var window_rows(Var x, std::size_t width);
/// Sum_t weights[t] * rows[t, :]. Each column is accumulated in sorted order
/// of its terms, so the result does not depend on the order of the rows.
Var weighted_row_sum(Var weights, Var rows);
/// Forwards the value but blocks gradient flow to x.
Var detach(Var x);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

struct GradientCheckOptions {
  double step = 1e-5;
  // Denominator floor for the relative error, so coordinates whose true
  // derivative is ~0 are judged on absolute error instead.
  double floor = 1e-6;
};

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_coordinate = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

using ScalarFunction = std::function<Var(Graph&, std::span<const Var>)>;

/// Compares backward() against central differences over every coordinate of
/// every input tensor.
GradientCheckResult check_gradients(const ScalarFunction& f, std::span<const Tensor> point,
                                    const GradientCheckOptions& options = {});
double check_gradients(const std::function<Var(Graph&, Var)>& f, const Tensor& point, double step);

}  // namespace attnaudit::ad
