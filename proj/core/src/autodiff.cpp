#include "attnaudit/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace attnaudit::ad {

namespace {

constexpr double kMaskOffset = -1e30;
// Smallest argument used for log() inside derivatives so that zero
// probabilities produce a large finite slope instead of -inf.
constexpr double kLogFloor = 1e-300;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

void require_matrix(const char* op, const Tensor& t) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_to_string(t.shape()));
  }
}

Graph& graph_of(Var v) {
  if (v.graph == nullptr) throw GraphError("variable is not attached to a graph");
  return *v.graph;
}

Graph& common_graph(Var a, Var b) {
  if (a.graph != b.graph) throw GraphError("variables belong to different graphs");
  return graph_of(a);
}

template <typename F>
Var unary(Op op, Var x, F&& f, Graph::Aux aux = {}) {
  Graph& g = graph_of(x);
  const Tensor& in = g.value(x);
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return g.record(op, std::move(out), {x.id}, std::move(aux));
}

template <typename F>
Var binary(Op op, const char* name, Var a, Var b, F&& f) {
  Graph& g = common_graph(a, b);
  const Tensor& lhs = g.value(a);
  const Tensor& rhs = g.value(b);
  require_same_shape(name, lhs, rhs);
  Tensor out(lhs.shape());
  for (std::size_t i = 0; i < lhs.size(); ++i) out[i] = f(lhs[i], rhs[i]);
  return g.record(op, std::move(out), {a.id, b.id});
}

// out (r x c) = a (r x k) * b (k x c), plain i-k-j loop.
void gemm(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
  for (std::size_t i = 0; i < r; ++i) {
    double* orow = &out.values()[i * c];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.values()[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &b.values()[p * c];
      for (std::size_t j = 0; j < c; ++j) orow[j] += av * brow[j];
    }
  }
}

double sorted_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double total = 0.0;
  for (double t : terms) total += t;
  return total;
}

}  // namespace

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kAddRow: return "add_row";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kMatMul: return "matmul";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kRelu: return "relu";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kAbs: return "abs";
    case Op::kXLogX: return "xlogx";
    case Op::kClampMin: return "clamp_min";
    case Op::kSum: return "sum";
    case Op::kConcatRows: return "concat_rows";
    case Op::kConcatCols: return "concat_cols";
    case Op::kSliceRows: return "slice_rows";
    case Op::kSliceCols: return "slice_cols";
    case Op::kReshape: return "reshape";
    case Op::kMaskedSoftmax: return "masked_softmax";
    case Op::kGatherRows: return "gather_rows";
    case Op::kWindowRows: return "window_rows";
    case Op::kWeightedRowSum: return "weighted_row_sum";
    case Op::kDetach: return "detach";
  }
  return "unknown";
}

const Tensor& Var::value() const { return graph_of(*this).value(*this); }
const Tensor& Var::grad() const { return graph_of(*this).grad(*this); }

Var Graph::leaf(Tensor value, bool requires_grad) {
  Var v = record(Op::kLeaf, std::move(value), {});
  nodes_[v.id].requires_grad = requires_grad;
  return v;
}

Var Graph::record(Op op, Tensor value, std::vector<std::uint32_t> parents, Aux aux) {
  if (released_) throw GraphError("graph already freed");
  if (options_.check_finite && !value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + std::string(op_name(op)));
  }
  Node n;
  n.value = std::move(value);
  n.op = op;
  n.aux = std::move(aux);
  if (op != Op::kDetach) {
    n.requires_grad = std::any_of(parents.begin(), parents.end(),
                                  [this](std::uint32_t p) { return nodes_[p].requires_grad; });
  }
  n.parents = std::move(parents);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Graph::Node& Graph::node(Var v) const {
  if (released_) throw GraphError("graph already freed");
  if (v.graph != this || v.id >= nodes_.size()) throw GraphError("variable does not belong to this graph");
  return nodes_[v.id];
}

const Tensor& Graph::value(Var v) const { return node(v).value; }

const Tensor& Graph::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.empty() && !n.value.empty()) {
    // Unreached nodes report zeros of the right shape.
    const_cast<Node&>(n).grad = Tensor(n.value.shape());
  }
  return n.grad;
}

bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }
Op Graph::op(Var v) const { return node(v).op; }

void Graph::release() {
  nodes_.clear();
  nodes_.shrink_to_fit();
  released_ = true;
}

Tensor& Graph::grad_slot(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Graph::accumulate(std::uint32_t id, const Tensor& contribution) {
  if (!nodes_[id].requires_grad) return;
  Tensor& slot = grad_slot(id);
  for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += contribution[i];
}

void Graph::backward(Var output) {
  const Node& out = node(output);
  if (out.value.size() != 1) {
    throw GraphError("backward() needs a scalar output, got shape " + shape_to_string(out.value.shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor();
  if (!out.requires_grad) return;
  grad_slot(output.id)[0] = 1.0;
  for (std::uint32_t id = output.id + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty() || n.parents.empty()) continue;
    propagate(n);
  }
}

void Graph::propagate(const Node& n) {
  const Tensor& g = n.grad;
  const Tensor& y = n.value;
  auto parent = [&](std::size_t i) -> const Node& { return nodes_[n.parents[i]]; };
  auto wants = [&](std::size_t i) { return nodes_[n.parents[i]].requires_grad; };

  switch (n.op) {
    case Op::kLeaf:
    case Op::kDetach:
      return;
    case Op::kAdd:
      accumulate(n.parents[0], g);
      accumulate(n.parents[1], g);
      return;
    case Op::kSub: {
      accumulate(n.parents[0], g);
      if (wants(1)) {
        Tensor neg(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
        accumulate(n.parents[1], neg);
      }
      return;
    }
    case Op::kMul: {
      const Tensor& a = parent(0).value;
      const Tensor& b = parent(1).value;
      if (wants(0)) {
        Tensor ga(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * b[i];
        accumulate(n.parents[0], ga);
      }
      if (wants(1)) {
        Tensor gb(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * a[i];
        accumulate(n.parents[1], gb);
      }
      return;
    }
    case Op::kAddRow: {
      accumulate(n.parents[0], g);
      if (wants(1)) {
        Tensor gb(parent(1).value.shape());
        const std::size_t c = g.cols();
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
        }
        accumulate(n.parents[1], gb);
      }
      return;
    }
    case Op::kScale: {
      Tensor gx(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * n.aux.scalar;
      accumulate(n.parents[0], gx);
      return;
    }
    case Op::kAddScalar:
    case Op::kReshape: {
      Tensor gx(parent(0).value.shape(), std::vector<double>(g.values().begin(), g.values().end()));
      accumulate(n.parents[0], gx);
      return;
    }
    case Op::kMatMul: {
      const Tensor& a = parent(0).value;
      const Tensor& b = parent(1).value;
      const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
      if (wants(0)) {
        Tensor ga(a.shape());
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * b[p * c + j];
            ga[i * k + p] = acc;
          }
        }
        accumulate(n.parents[0], ga);
      }
      if (wants(1)) {
        Tensor gb(b.shape());
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < c; ++j) gb[p * c + j] += av * g[i * c + j];
          }
        }
        accumulate(n.parents[1], gb);
      }
      return;
    }
    case Op::kTanh:
    case Op::kSigmoid:
    case Op::kRelu:
    case Op::kExp:
    case Op::kLog:
    case Op::kAbs:
    case Op::kXLogX:
    case Op::kClampMin: {
      const Tensor& x = parent(0).value;
      Tensor gx(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) {
        double d = 0.0;
        switch (n.op) {
          case Op::kTanh: d = 1.0 - y[i] * y[i]; break;
          case Op::kSigmoid: d = y[i] * (1.0 - y[i]); break;
          case Op::kRelu: d = x[i] > 0.0 ? 1.0 : 0.0; break;
          case Op::kExp: d = y[i]; break;
          case Op::kLog: d = 1.0 / x[i]; break;
          case Op::kAbs: d = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0); break;
          case Op::kXLogX: d = std::log(std::max(x[i], kLogFloor)) + 1.0; break;
          case Op::kClampMin: d = x[i] > n.aux.scalar ? 1.0 : 0.0; break;
          default: break;
        }
        gx[i] = g[i] * d;
      }
      accumulate(n.parents[0], gx);
      return;
    }
    case Op::kSum: {
      Tensor gx(parent(0).value.shape(), g[0]);
      accumulate(n.parents[0], gx);
      return;
    }
    case Op::kConcatRows: {
      std::size_t offset = 0;
      for (std::size_t p = 0; p < n.parents.size(); ++p) {
        const Tensor& part = parent(p).value;
        if (wants(p)) {
          Tensor gp(part.shape(), std::vector<double>(g.values().begin() + static_cast<std::ptrdiff_t>(offset),
                                                      g.values().begin() +
                                                          static_cast<std::ptrdiff_t>(offset + part.size())));
          accumulate(n.parents[p], gp);
        }
        offset += part.size();
      }
      return;
    }
    case Op::kConcatCols: {
      const std::size_t rows = g.rows(), total = g.cols();
      std::size_t col = 0;
      for (std::size_t p = 0; p < n.parents.size(); ++p) {
        const Tensor& part = parent(p).value;
        const std::size_t c = part.cols();
        if (wants(p)) {
          Tensor gp(part.shape());
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < c; ++j) gp[r * c + j] = g[r * total + col + j];
          }
          accumulate(n.parents[p], gp);
        }
        col += c;
      }
      return;
    }
    case Op::kSliceRows: {
      const Tensor& x = parent(0).value;
      Tensor gx(x.shape());
      const std::size_t c = x.cols();
      std::copy(g.values().begin(), g.values().end(), gx.values().begin() + static_cast<std::ptrdiff_t>(n.aux.begin * c));
      accumulate(n.parents[0], gx);
      return;
    }
    case Op::kSliceCols: {
      const Tensor& x = parent(0).value;
      Tensor gx(x.shape());
      const std::size_t c = x.cols(), w = n.aux.end - n.aux.begin;
      for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t j = 0; j < w; ++j) gx[r * c + n.aux.begin + j] = g[r * w + j];
      }
      accumulate(n.parents[0], gx);
      return;
    }
    case Op::kMaskedSoftmax: {
      double dot = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
      Tensor gx(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = y[i] * (g[i] - dot);
      accumulate(n.parents[0], gx);
      return;
    }
    case Op::kGatherRows: {
      const Tensor& table = parent(0).value;
      Tensor gt(table.shape());
      const std::size_t d = table.cols();
      for (std::size_t t = 0; t < n.aux.indices.size(); ++t) {
        const std::size_t id = n.aux.indices[t];
        for (std::size_t j = 0; j < d; ++j) gt[id * d + j] += g[t * d + j];
      }
      accumulate(n.parents[0], gt);
      return;
    }
    case Op::kWindowRows: {
      const Tensor& x = parent(0).value;
      const std::size_t rows = x.rows(), d = x.cols(), width = n.aux.begin;
      const std::size_t left = (width - 1) / 2;
      Tensor gx(x.shape());
      for (std::size_t t = 0; t < rows; ++t) {
        for (std::size_t j = 0; j < width; ++j) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(left);
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(rows)) continue;
          for (std::size_t c = 0; c < d; ++c) {
            gx[static_cast<std::size_t>(src) * d + c] += g[t * width * d + j * d + c];
          }
        }
      }
      accumulate(n.parents[0], gx);
      return;
    }
    case Op::kWeightedRowSum: {
      const Tensor& w = parent(0).value;
      const Tensor& rows = parent(1).value;
      const std::size_t t_count = rows.rows(), m = rows.cols();
      if (wants(0)) {
        Tensor gw(w.shape());
        for (std::size_t t = 0; t < t_count; ++t) {
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += g[j] * rows[t * m + j];
          gw[t] = acc;
        }
        accumulate(n.parents[0], gw);
      }
      if (wants(1)) {
        Tensor gr(rows.shape());
        for (std::size_t t = 0; t < t_count; ++t) {
          for (std::size_t j = 0; j < m; ++j) gr[t * m + j] = g[j] * w[t];
        }
        accumulate(n.parents[1], gr);
      }
      return;
    }
  }
}

Var add(Var a, Var b) {
  return binary(Op::kAdd, "add", a, b, [](double x, double y) { return x + y; });
}

Var sub(Var a, Var b) {
  return binary(Op::kSub, "sub", a, b, [](double x, double y) { return x - y; });
}

Var mul(Var a, Var b) {
  return binary(Op::kMul, "mul", a, b, [](double x, double y) { return x * y; });
}

Var add_row(Var x, Var bias) {
  Graph& g = common_graph(x, bias);
  const Tensor& in = g.value(x);
  const Tensor& b = g.value(bias);
  const std::size_t c = in.cols();
  if (b.size() != c || b.rank() > 2 || (b.rank() == 2 && b.rows() != 1)) {
    throw ShapeError("add_row: bias " + shape_to_string(b.shape()) + " does not match rows of " +
                     shape_to_string(in.shape()));
  }
  Tensor out = in;
  for (std::size_t r = 0; r < in.rows(); ++r) {
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] += b[j];
  }
  return g.record(Op::kAddRow, std::move(out), {x.id, bias.id});
}

Var scale(Var x, double factor) {
  Graph::Aux aux;
  aux.scalar = factor;
  return unary(Op::kScale, x, [factor](double v) { return v * factor; }, std::move(aux));
}

Var add_scalar(Var x, double offset) {
  return unary(Op::kAddScalar, x, [offset](double v) { return v + offset; });
}

Var matmul(Var a, Var b) {
  Graph& g = common_graph(a, b);
  const Tensor& lhs = g.value(a);
  const Tensor& rhs = g.value(b);
  require_matrix("matmul", lhs);
  require_matrix("matmul", rhs);
  if (lhs.cols() != rhs.rows()) {
    throw ShapeError("matmul: inner extents differ " + shape_to_string(lhs.shape()) + " * " +
                     shape_to_string(rhs.shape()));
  }
  Tensor out(Shape{lhs.rows(), rhs.cols()});
  gemm(lhs, rhs, out);
  return g.record(Op::kMatMul, std::move(out), {a.id, b.id});
}

Var tanh(Var x) {
  return unary(Op::kTanh, x, [](double v) { return std::tanh(v); });
}

Var sigmoid(Var x) {
  return unary(Op::kSigmoid, x, [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

Var relu(Var x) {
  return unary(Op::kRelu, x, [](double v) { return v > 0.0 ? v : 0.0; });
}

Var exp(Var x) {
  return unary(Op::kExp, x, [](double v) { return std::exp(v); });
}

Var log(Var x) {
  return unary(Op::kLog, x, [](double v) { return std::log(v); });
}

Var abs(Var x) {
  return unary(Op::kAbs, x, [](double v) { return std::fabs(v); });
}

Var xlogx(Var x) {
  return unary(Op::kXLogX, x, [](double v) { return v > 0.0 ? v * std::log(v) : 0.0; });
}

Var clamp_min(Var x, double floor) {
  Graph::Aux aux;
  aux.scalar = floor;
  return unary(Op::kClampMin, x, [floor](double v) { return std::max(v, floor); }, std::move(aux));
}

Var sum(Var x) {
  Graph& g = graph_of(x);
  double total = 0.0;
  for (double v : g.value(x).values()) total += v;
  return g.record(Op::kSum, Tensor::scalar(total), {x.id});
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Graph& g = graph_of(parts.front());
  const std::size_t c = g.value(parts.front()).cols();
  const bool vectors = g.value(parts.front()).rank() <= 1 && parts.size() == 1;
  std::vector<double> values;
  std::vector<std::uint32_t> ids;
  std::size_t rows = 0;
  for (Var p : parts) {
    if (p.graph != &g) throw GraphError("concat_rows: variables belong to different graphs");
    const Tensor& t = g.value(p);
    if (t.cols() != c) throw ShapeError("concat_rows: column mismatch " + shape_to_string(t.shape()));
    values.insert(values.end(), t.values().begin(), t.values().end());
    rows += t.rows();
    ids.push_back(p.id);
  }
  Tensor out = vectors ? Tensor(g.value(parts.front()).shape(), std::move(values))
                       : Tensor(Shape{rows, c}, std::move(values));
  return g.record(Op::kConcatRows, std::move(out), std::move(ids));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Graph& g = graph_of(parts.front());
  const Tensor& first = g.value(parts.front());
  const std::size_t rows = first.rows();
  std::size_t total = 0;
  std::vector<std::uint32_t> ids;
  for (Var p : parts) {
    if (p.graph != &g) throw GraphError("concat_cols: variables belong to different graphs");
    const Tensor& t = g.value(p);
    if (t.rows() != rows || t.rank() != first.rank()) {
      throw ShapeError("concat_cols: row mismatch " + shape_to_string(t.shape()) + " vs " +
                       shape_to_string(first.shape()));
    }
    total += t.cols();
    ids.push_back(p.id);
  }
  Tensor out = first.rank() <= 1 ? Tensor(Shape{total}) : Tensor(Shape{rows, total});
  std::size_t col = 0;
  for (Var p : parts) {
    const Tensor& t = g.value(p);
    const std::size_t c = t.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < c; ++j) out[r * total + col + j] = t[r * c + j];
    }
    col += c;
  }
  return g.record(Op::kConcatCols, std::move(out), std::move(ids));
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  Graph& g = graph_of(x);
  const Tensor& in = g.value(x);
  require_matrix("slice_rows", in);
  if (begin >= end || end > in.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") outside " +
                     shape_to_string(in.shape()));
  }
  const std::size_t c = in.cols();
  Tensor out(Shape{end - begin, c},
             std::vector<double>(in.values().begin() + static_cast<std::ptrdiff_t>(begin * c),
                                 in.values().begin() + static_cast<std::ptrdiff_t>(end * c)));
  Graph::Aux aux;
  aux.begin = begin;
  aux.end = end;
  return g.record(Op::kSliceRows, std::move(out), {x.id}, std::move(aux));
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  Graph& g = graph_of(x);
  const Tensor& in = g.value(x);
  if (in.rank() == 0 || in.rank() > 2 || begin >= end || end > in.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") outside " +
                     shape_to_string(in.shape()));
  }
  const std::size_t rows = in.rows(), c = in.cols(), w = end - begin;
  Tensor out = in.rank() == 1 ? Tensor(Shape{w}) : Tensor(Shape{rows, w});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = in[r * c + begin + j];
  }
  Graph::Aux aux;
  aux.begin = begin;
  aux.end = end;
  return g.record(Op::kSliceCols, std::move(out), {x.id}, std::move(aux));
}

Var reshape(Var x, Shape shape) {
  Graph& g = graph_of(x);
  return g.record(Op::kReshape, g.value(x).reshaped(std::move(shape)), {x.id});
}

Var masked_softmax(Var x, std::span<const bool> mask) {
  Graph& g = graph_of(x);
  const Tensor& in = g.value(x);
  if (in.empty()) throw ShapeError("masked_softmax: empty input");
  if (!mask.empty() && mask.size() != in.size()) {
    throw ShapeError("masked_softmax: mask has " + std::to_string(mask.size()) + " entries for " +
                     std::to_string(in.size()) + " scores");
  }
  auto active = [&](std::size_t i) { return mask.empty() || mask[i]; };
  Tensor shifted = in;
  double peak = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (active(i)) {
      peak = std::max(peak, in[i]);
      any = true;
    } else {
      shifted[i] += kMaskOffset;
    }
  }
  if (!any) throw ShapeError("masked_softmax: every position is masked");
  Tensor out(in.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = std::exp(shifted[i] - peak);
    total += out[i];
  }
  for (double& v : out.values()) v /= total;
  Graph::Aux aux;
  if (!mask.empty()) {
    aux.mask.assign(mask.size(), 0.0);
    for (std::size_t i = 0; i < mask.size(); ++i) aux.mask[i] = mask[i] ? 1.0 : 0.0;
  }
  return g.record(Op::kMaskedSoftmax, std::move(out), {x.id}, std::move(aux));
}

Var gather_rows(Var table, std::span<const std::size_t> ids) {
  Graph& g = graph_of(table);
  const Tensor& t = g.value(table);
  require_matrix("gather_rows", t);
  if (ids.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t d = t.cols();
  Tensor out(Shape{ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= t.rows()) {
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[r]) + " outside table of " +
                              std::to_string(t.rows()) + " rows");
    }
    std::copy(t.row(ids[r]).begin(), t.row(ids[r]).end(), out.row(r).begin());
  }
  Graph::Aux aux;
  aux.indices.assign(ids.begin(), ids.end());
  return g.record(Op::kGatherRows, std::move(out), {table.id}, std::move(aux));
}

Var window_rows(Var x, std::size_t width) {
  Graph& g = graph_of(x);
  const Tensor& in = g.value(x);
  require_matrix("window_rows", in);
  if (width == 0) throw ShapeError("window_rows: zero width");
  const std::size_t rows = in.rows(), d = in.cols();
  const std::size_t left = (width - 1) / 2;
  Tensor out(Shape{rows, width * d});
  for (std::size_t t = 0; t < rows; ++t) {
    for (std::size_t j = 0; j < width; ++j) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(left);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(rows)) continue;
      for (std::size_t c = 0; c < d; ++c) out[t * width * d + j * d + c] = in[static_cast<std::size_t>(src) * d + c];
    }
  }
  Graph::Aux aux;
  aux.begin = width;
  return g.record(Op::kWindowRows, std::move(out), {x.id}, std::move(aux));
}

Var weighted_row_sum(Var weights, Var rows) {
  Graph& g = common_graph(weights, rows);
  const Tensor& w = g.value(weights);
  const Tensor& h = g.value(rows);
  require_matrix("weighted_row_sum", h);
  if (w.size() != h.rows()) {
    throw ShapeError("weighted_row_sum: " + std::to_string(w.size()) + " weights for " + std::to_string(h.rows()) +
                     " rows");
  }
  const std::size_t t_count = h.rows(), m = h.cols();
  Tensor out(Shape{m});
  std::vector<double> terms(t_count);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t t = 0; t < t_count; ++t) terms[t] = w[t] * h[t * m + j];
    out[j] = sorted_sum(terms);
  }
  return g.record(Op::kWeightedRowSum, std::move(out), {weights.id, rows.id});
}

Var detach(Var x) {
  Graph& g = graph_of(x);
  return g.record(Op::kDetach, g.value(x), {x.id});
}

GradientCheckResult check_gradients(const ScalarFunction& f, std::span<const Tensor> point,
                                    const GradientCheckOptions& options) {
  if (!(options.step > 0.0)) throw std::invalid_argument("check_gradients: step must be positive");

  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Var> inputs;
    for (const Tensor& t : point) inputs.push_back(g.leaf(t));
    Var out = f(g, inputs);
    g.backward(out);
    for (Var v : inputs) analytic.push_back(g.grad(v));
  }

  auto evaluate = [&](const std::vector<Tensor>& at) {
    Graph g;
    std::vector<Var> inputs;
    for (const Tensor& t : at) inputs.push_back(g.constant(t));
    const double value = g.value(f(g, inputs))[0];
    if (!std::isfinite(value)) throw NumericError("check_gradients: function not finite at perturbed point");
    return value;
  };

  GradientCheckResult result;
  std::vector<Tensor> probe(point.begin(), point.end());
  for (std::size_t k = 0; k < probe.size(); ++k) {
    for (std::size_t i = 0; i < probe[k].size(); ++i) {
      const double original = probe[k][i];
      probe[k][i] = original + options.step;
      const double up = evaluate(probe);
      probe[k][i] = original - options.step;
      const double down = evaluate(probe);
      probe[k][i] = original;
      const double numeric = (up - down) / (2.0 * options.step);
      const double exact = analytic[k][i];
      const double denom = std::max({std::fabs(numeric), std::fabs(exact), options.floor});
      const double err = std::fabs(numeric - exact) / denom;
      if (err > result.max_relative_error || (k == 0 && i == 0)) {
        result = {err, k, i, exact, numeric};
      }
    }
  }
  return result;
}

double check_gradients(const std::function<Var(Graph&, Var)>& f, const Tensor& point, double step) {
  GradientCheckOptions options;
  options.step = step;
  const Tensor pts[] = {point};
  return check_gradients([&](Graph& g, std::span<const Var> in) { return f(g, in[0]); }, pts, options).max_relative_error;
}

}  // namespace attnaudit::ad
