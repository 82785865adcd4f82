#include "monoplate/autodiff.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace monoplate {

namespace {

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": " + detail);
}

void check_same_tape(const char* op, Var a, Var b) {
  if (a.tape != b.tape) shape_error(op, "operands belong to different graphs");
}

// Broadcast plan over trailing-aligned axes (numpy rules).
struct BroadcastPlan {
  std::vector<int> out_shape;
  std::vector<std::int64_t> stride_a;
  std::vector<std::int64_t> stride_b;
  bool same = false;
};

BroadcastPlan make_plan(const char* op, const std::vector<int>& sa, const std::vector<int>& sb) {
  BroadcastPlan p;
  if (sa == sb) {
    p.same = true;
    p.out_shape = sa;
    return p;
  }
  const int ra = static_cast<int>(sa.size()), rb = static_cast<int>(sb.size());
  const int r = std::max(ra, rb);
  p.out_shape.resize(r);
  for (int t = 0; t < r; ++t) {
    const int da = (t - (r - ra) >= 0) ? sa[t - (r - ra)] : 1;
    const int db = (t - (r - rb) >= 0) ? sb[t - (r - rb)] : 1;
    if (da != db && da != 1 && db != 1)
      shape_error(op, "shapes " + Tensor::shape_str(sa) + " and " + Tensor::shape_str(sb) +
                          " are not broadcastable (axis " + std::to_string(t) + ": " +
                          std::to_string(da) + " vs " + std::to_string(db) + ")");
    p.out_shape[t] = std::max(da, db);
  }
  auto strides_for = [&](const std::vector<int>& s) {
    std::vector<std::int64_t> st(r, 0);
    const int rs = static_cast<int>(s.size());
    std::int64_t acc = 1;
    for (int t = rs - 1; t >= 0; --t) {
      st[t + (r - rs)] = (s[t] == 1) ? 0 : acc;
      acc *= s[t];
    }
    return st;
  };
  p.stride_a = strides_for(sa);
  p.stride_b = strides_for(sb);
  // broadcast axes contribute stride 0 on the smaller operand
  for (int t = 0; t < r; ++t) {
    const int da = (t - (r - ra) >= 0) ? sa[t - (r - ra)] : 1;
    const int db = (t - (r - rb) >= 0) ? sb[t - (r - rb)] : 1;
    if (da == 1 && p.out_shape[t] != 1) p.stride_a[t] = 0;
    if (db == 1 && p.out_shape[t] != 1) p.stride_b[t] = 0;
  }
  return p;
}

// Walks the broadcast output space calling f(out_flat, a_flat, b_flat).
template <typename F>
void broadcast_walk(const BroadcastPlan& p, std::int64_t n, F&& f) {
  const int r = static_cast<int>(p.out_shape.size());
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<int> idx(r, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (int t = r - 1; t >= 0; --t) {
      ++idx[t];
      ia += p.stride_a[t];
      ib += p.stride_b[t];
      if (idx[t] < p.out_shape[t]) break;
      idx[t] = 0;
      ia -= p.stride_a[t] * p.out_shape[t];
      ib -= p.stride_b[t] * p.out_shape[t];
    }
  }
}

enum class BinOp { Add, Sub, Mul, Div, Min, Max };

const char* bin_name(BinOp op) {
  switch (op) {
    case BinOp::Add: return "add";
    case BinOp::Sub: return "sub";
    case BinOp::Mul: return "mul";
    case BinOp::Div: return "div";
    case BinOp::Min: return "min";
    case BinOp::Max: return "max";
  }
  return "?";
}

double bin_eval(BinOp op, double x, double y) {
  switch (op) {
    case BinOp::Add: return x + y;
    case BinOp::Sub: return x - y;
    case BinOp::Mul: return x * y;
    case BinOp::Div: return x / y;
    case BinOp::Min: return x <= y ? x : y;
    case BinOp::Max: return x >= y ? x : y;
  }
  return 0;
}

Var binary_op(BinOp op, Var a, Var b) {
  check_same_tape(bin_name(op), a, b);
  Tape& t = *a.tape;
  const Tensor& va = t.value(a);
  const Tensor& vb = t.value(b);
  BroadcastPlan plan = make_plan(bin_name(op), va.shape(), vb.shape());
  Tensor out(plan.out_shape);
  const std::int64_t n = out.size();
  if (plan.same) {
    const double* pa = va.data();
    const double* pb = vb.data();
    double* po = out.data();
    switch (op) {
      case BinOp::Add: for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
      case BinOp::Sub: for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
      case BinOp::Mul: for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
      case BinOp::Div: for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i]; break;
      case BinOp::Min: for (std::int64_t i = 0; i < n; ++i) po[i] = std::min(pa[i], pb[i]); break;
      case BinOp::Max: for (std::int64_t i = 0; i < n; ++i) po[i] = std::max(pa[i], pb[i]); break;
    }
  } else {
    broadcast_walk(plan, n, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
      out[o] = bin_eval(op, va[ia], vb[ib]);
    });
  }
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  const int ida = a.id, idb = b.id;
  return t.emit(std::move(out), rg, bin_name(op),
                [op, ida, idb, plan](Tape& tp, const Tape::Node& nd) {
                  const Tensor& g = nd.grad;
                  const Tensor& va = tp.node(ida).value;
                  const Tensor& vb = tp.node(idb).value;
                  const bool need_a = tp.node(ida).requires_grad;
                  const bool need_b = tp.node(idb).requires_grad;
                  Tensor* ga = need_a ? &tp.grad_buffer(ida) : nullptr;
                  Tensor* gb = need_b ? &tp.grad_buffer(idb) : nullptr;
                  auto accum = [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                    const double go = g[o];
                    switch (op) {
                      case BinOp::Add:
                        if (ga) (*ga)[ia] += go;
                        if (gb) (*gb)[ib] += go;
                        break;
                      case BinOp::Sub:
                        if (ga) (*ga)[ia] += go;
                        if (gb) (*gb)[ib] -= go;
                        break;
                      case BinOp::Mul:
                        if (ga) (*ga)[ia] += vb[ib] * go;
                        if (gb) (*gb)[ib] += va[ia] * go;
                        break;
                      case BinOp::Div:
                        if (ga) (*ga)[ia] += go / vb[ib];
                        if (gb) (*gb)[ib] -= go * va[ia] / (vb[ib] * vb[ib]);
                        break;
                      case BinOp::Min:  // ties route to the first operand
                        if (va[ia] <= vb[ib]) { if (ga) (*ga)[ia] += go; }
                        else if (gb) (*gb)[ib] += go;
                        break;
                      case BinOp::Max:
                        if (va[ia] >= vb[ib]) { if (ga) (*ga)[ia] += go; }
                        else if (gb) (*gb)[ib] += go;
                        break;
                    }
                  };
                  if (plan.same) {
                    const std::int64_t n = g.size();
                    for (std::int64_t i = 0; i < n; ++i) accum(i, i, i);
                  } else {
                    broadcast_walk(plan, g.size(), accum);
                  }
                });
}

template <typename FwdF, typename BwdF>
Var unary_op(const char* name, Var a, FwdF fwd, BwdF bwd_factor) {
  Tape& t = *a.tape;
  const Tensor& va = t.value(a);
  Tensor out(va.shape());
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = fwd(va[i]);
  const int id = a.id;
  return t.emit(std::move(out), t.requires_grad(a), name,
                [id, bwd_factor](Tape& tp, const Tape::Node& nd) {
                  if (!tp.node(id).requires_grad) return;
                  Tensor& ga = tp.grad_buffer(id);
                  const Tensor& x = tp.node(id).value;
                  const Tensor& y = nd.value;
                  const Tensor& g = nd.grad;
                  const std::int64_t n = g.size();
                  for (std::int64_t i = 0; i < n; ++i) ga[i] += bwd_factor(x[i], y[i]) * g[i];
                });
}

}  // namespace

// ---------------------------------------------------------------- Var / Tape

const Tensor& Var::value() const { return tape->value(*this); }
const std::vector<int>& Var::shape() const { return tape->value(*this).shape(); }

Var Tape::input(Tensor value, bool requires_grad) {
  return emit(std::move(value), requires_grad, "input", nullptr);
}

Var Tape::constant(Tensor value) { return emit(std::move(value), false, "const", nullptr); }

Var Tape::emit(Tensor value, bool requires_grad, const char* op,
               std::function<void(Tape&, const Node&)> backprop) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.op = op;
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Tape::value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }

const Tensor& Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (!n.grad_live)
    throw std::logic_error("grad requested for node without gradient (op " + std::string(n.op) +
                           "); did backward() run?");
  return n.grad;
}

bool Tape::requires_grad(Var v) const {
  return nodes_[static_cast<std::size_t>(v.id)].requires_grad;
}

Tensor& Tape::grad_buffer(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.grad_live) {
    n.grad = Tensor(n.value.shape());
    n.grad_live = true;
  }
  return n.grad;
}

void Tape::backward(Var scalar_output) {
  if (scalar_output.tape != this) throw std::logic_error("backward: output from another graph");
  const Node& out = nodes_[static_cast<std::size_t>(scalar_output.id)];
  if (out.value.rank() != 0)
    throw std::invalid_argument("backward: output has shape " + out.value.shape_str() +
                                ", expected scalar []");
  for (Node& n : nodes_) {
    n.grad_live = false;
    n.grad = Tensor();
  }
  grad_buffer(scalar_output.id)[0] = 1.0;
  for (int id = scalar_output.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad_live || !n.requires_grad || !n.backprop) continue;
    n.backprop(*this, n);
  }
}

void Tape::clear() { nodes_.clear(); }

// ------------------------------------------------------------- element-wise

Var add(Var a, Var b) { return binary_op(BinOp::Add, a, b); }
Var sub(Var a, Var b) { return binary_op(BinOp::Sub, a, b); }
Var mul(Var a, Var b) { return binary_op(BinOp::Mul, a, b); }
Var div(Var a, Var b) { return binary_op(BinOp::Div, a, b); }
Var minimum(Var a, Var b) { return binary_op(BinOp::Min, a, b); }
Var maximum(Var a, Var b) { return binary_op(BinOp::Max, a, b); }

Var neg(Var a) {
  return unary_op("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}
Var add_scalar(Var a, double s) {
  return unary_op("add_scalar", a, [s](double x) { return x + s; },
                  [](double, double) { return 1.0; });
}
Var mul_scalar(Var a, double s) {
  return unary_op("mul_scalar", a, [s](double x) { return x * s; },
                  [s](double, double) { return s; });
}
Var sigmoid(Var a) {
  return unary_op("sigmoid", a,
                  [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                               : std::exp(x) / (1.0 + std::exp(x)); },
                  [](double, double y) { return y * (1.0 - y); });
}
Var relu(Var a) {
  return unary_op("relu", a, [](double x) { return x > 0 ? x : 0.0; },
                  [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}
Var exp(Var a) {
  return unary_op("exp", a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}
Var log(Var a) {
  return unary_op("log", a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}
Var abs(Var a) {
  return unary_op("abs", a, [](double x) { return std::fabs(x); },
                  [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}
Var sqrt(Var a) {
  return unary_op("sqrt", a, [](double x) { return std::sqrt(x); },
                  [](double, double y) { return 0.5 / y; });
}
Var square(Var a) {
  return unary_op("square", a, [](double x) { return x * x; },
                  [](double x, double) { return 2.0 * x; });
}
Var sin(Var a) {
  return unary_op("sin", a, [](double x) { return std::sin(x); },
                  [](double x, double) { return std::cos(x); });
}
Var cos(Var a) {
  return unary_op("cos", a, [](double x) { return std::cos(x); },
                  [](double x, double) { return -std::sin(x); });
}

// ---------------------------------------------------------------- structure

Var reshape(Var a, std::vector<int> shape) {
  Tape& t = *a.tape;
  Tensor out = t.value(a).reshaped(shape);
  const int id = a.id;
  return t.emit(std::move(out), t.requires_grad(a), "reshape",
                [id](Tape& tp, const Tape::Node& nd) {
                  if (!tp.node(id).requires_grad) return;
                  Tensor& ga = tp.grad_buffer(id);
                  const std::int64_t n = nd.grad.size();
                  for (std::int64_t i = 0; i < n; ++i) ga[i] += nd.grad[i];
                });
}

Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) shape_error("concat", "no inputs");
  Tape& t = *xs[0].tape;
  const std::vector<int>& s0 = t.value(xs[0]).shape();
  const int r = static_cast<int>(s0.size());
  if (r < 1) shape_error("concat", "rank-0 input");
  int ctotal = 0;
  for (const Var& x : xs) {
    check_same_tape("concat", xs[0], x);
    const auto& s = t.value(x).shape();
    if (static_cast<int>(s.size()) != r)
      shape_error("concat", "rank mismatch " + Tensor::shape_str(s0) + " vs " + Tensor::shape_str(s));
    for (int k = 0; k + 1 < r; ++k)
      if (s[k] != s0[k])
        shape_error("concat", "leading dims differ: " + Tensor::shape_str(s0) + " vs " +
                                  Tensor::shape_str(s));
    ctotal += s.back();
  }
  std::vector<int> oshape = s0;
  oshape.back() = ctotal;
  Tensor out(oshape);
  const std::int64_t rows = out.size() / ctotal;
  std::vector<int> widths;
  std::vector<int> ids;
  bool rg = false;
  for (const Var& x : xs) {
    widths.push_back(t.value(x).shape().back());
    ids.push_back(x.id);
    rg = rg || t.requires_grad(x);
  }
  std::int64_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const Tensor& v = t.value(xs[k]);
    const int w = widths[k];
    for (std::int64_t rI = 0; rI < rows; ++rI)
      std::memcpy(out.data() + rI * ctotal + off, v.data() + rI * w,
                  static_cast<std::size_t>(w) * sizeof(double));
    off += w;
  }
  return t.emit(std::move(out), rg, "concat",
                [ids, widths, ctotal, rows](Tape& tp, const Tape::Node& nd) {
                  std::int64_t off = 0;
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    const int w = widths[k];
                    if (tp.node(ids[k]).requires_grad) {
                      Tensor& g = tp.grad_buffer(ids[k]);
                      for (std::int64_t rI = 0; rI < rows; ++rI) {
                        const double* src = nd.grad.data() + rI * ctotal + off;
                        double* dst = g.data() + rI * w;
                        for (int c = 0; c < w; ++c) dst[c] += src[c];
                      }
                    }
                    off += w;
                  }
                });
}

Var slice(Var a, const std::vector<int>& offset, const std::vector<int>& size) {
  Tape& t = *a.tape;
  const Tensor& va = t.value(a);
  const int r = va.rank();
  if (static_cast<int>(offset.size()) != r || static_cast<int>(size.size()) != r)
    shape_error("slice", "offset/size rank mismatch for " + va.shape_str());
  for (int k = 0; k < r; ++k)
    if (offset[k] < 0 || size[k] < 0 || offset[k] + size[k] > va.shape()[k])
      shape_error("slice", "window out of range on axis " + std::to_string(k) + " of " +
                               va.shape_str());
  Tensor out(size);
  std::vector<std::int64_t> in_stride(r, 1);
  for (int k = r - 2; k >= 0; --k) in_stride[k] = in_stride[k + 1] * va.shape()[k + 1];
  const std::int64_t n = out.size();
  std::vector<int> idx(r, 0);
  for (std::int64_t o = 0; o < n; ++o) {
    std::int64_t ii = 0;
    for (int k = 0; k < r; ++k) ii += (offset[k] + idx[k]) * in_stride[k];
    out[o] = va[ii];
    for (int k = r - 1; k >= 0; --k) {
      if (++idx[k] < size[k]) break;
      idx[k] = 0;
    }
  }
  const int id = a.id;
  const std::vector<int> off = offset, sz = size;
  return t.emit(std::move(out), t.requires_grad(a), "slice",
                [id, off, sz, in_stride](Tape& tp, const Tape::Node& nd) {
                  if (!tp.node(id).requires_grad) return;
                  Tensor& ga = tp.grad_buffer(id);
                  const int r = static_cast<int>(sz.size());
                  const std::int64_t n = nd.grad.size();
                  std::vector<int> idx(r, 0);
                  for (std::int64_t o = 0; o < n; ++o) {
                    std::int64_t ii = 0;
                    for (int k = 0; k < r; ++k) ii += (off[k] + idx[k]) * in_stride[k];
                    ga[ii] += nd.grad[o];
                    for (int k = r - 1; k >= 0; --k) {
                      if (++idx[k] < sz[k]) break;
                      idx[k] = 0;
                    }
                  }
                });
}

// ---------------------------------------------------------------- reductions

Var sum(Var a) {
  Tape& t = *a.tape;
  const Tensor& va = t.value(a);
  double acc = 0;
  const std::int64_t n = va.size();
  for (std::int64_t i = 0; i < n; ++i) acc += va[i];
  const int id = a.id;
  return t.emit(Tensor::scalar(acc), t.requires_grad(a), "sum",
                [id](Tape& tp, const Tape::Node& nd) {
                  if (!tp.node(id).requires_grad) return;
                  Tensor& ga = tp.grad_buffer(id);
                  const double g = nd.grad[0];
                  const std::int64_t n = ga.size();
                  for (std::int64_t i = 0; i < n; ++i) ga[i] += g;
                });
}

Var mean(Var a) {
  const std::int64_t n = a.value().size();
  if (n == 0) shape_error("mean", "empty tensor");
  return mul_scalar(sum(a), 1.0 / static_cast<double>(n));
}

namespace {

// Maps each input flat index to the reduced-output flat index.
struct ReducePlan {
  std::vector<int> out_shape_keep;  // input rank, reduced axes = 1
  std::vector<int> out_shape;      // final (keepdims or squeezed)
  std::vector<std::int64_t> out_stride;  // per input axis
};

ReducePlan make_reduce_plan(const char* op, const std::vector<int>& shape,
                            const std::vector<int>& axes, bool keepdims) {
  ReducePlan p;
  const int r = static_cast<int>(shape.size());
  std::vector<bool> reduced(r, false);
  for (int ax : axes) {
    if (ax < 0 || ax >= r) shape_error(op, "axis " + std::to_string(ax) + " out of range for " +
                                               Tensor::shape_str(shape));
    reduced[ax] = true;
  }
  p.out_shape_keep = shape;
  for (int k = 0; k < r; ++k)
    if (reduced[k]) p.out_shape_keep[k] = 1;
  if (keepdims) {
    p.out_shape = p.out_shape_keep;
  } else {
    for (int k = 0; k < r; ++k)
      if (!reduced[k]) p.out_shape.push_back(shape[k]);
  }
  p.out_stride.assign(r, 0);
  std::int64_t acc = 1;
  for (int k = r - 1; k >= 0; --k) {
    p.out_stride[k] = reduced[k] ? 0 : acc;
    if (!reduced[k]) acc *= shape[k];
  }
  return p;
}

template <typename F>
void reduce_walk(const std::vector<int>& shape, const std::vector<std::int64_t>& out_stride,
                 F&& f) {
  const int r = static_cast<int>(shape.size());
  const std::int64_t n = Tensor::shape_size(shape);
  std::vector<int> idx(r, 0);
  std::int64_t oo = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    f(i, oo);
    for (int k = r - 1; k >= 0; --k) {
      ++idx[k];
      oo += out_stride[k];
      if (idx[k] < shape[k]) break;
      idx[k] = 0;
      oo -= out_stride[k] * shape[k];
    }
  }
}

}  // namespace

Var sum(Var a, const std::vector<int>& axes, bool keepdims) {
  Tape& t = *a.tape;
  const Tensor& va = t.value(a);
  ReducePlan p = make_reduce_plan("sum", va.shape(), axes, keepdims);
  Tensor out(p.out_shape);
  reduce_walk(va.shape(), p.out_stride,
              [&](std::int64_t i, std::int64_t oo) { out[oo] += va[i]; });
  const int id = a.id;
  const std::vector<int> in_shape = va.shape();
  return t.emit(std::move(out), t.requires_grad(a), "sum_axes",
                [id, in_shape, p](Tape& tp, const Tape::Node& nd) {
                  if (!tp.node(id).requires_grad) return;
                  Tensor& ga = tp.grad_buffer(id);
                  reduce_walk(in_shape, p.out_stride,
                              [&](std::int64_t i, std::int64_t oo) { ga[i] += nd.grad[oo]; });
                });
}

Var mean(Var a, const std::vector<int>& axes, bool keepdims) {
  const std::vector<int>& s = a.value().shape();
  std::int64_t cnt = 1;
  for (int ax : axes) cnt *= s[static_cast<std::size_t>(ax)];
  if (cnt == 0) shape_error("mean", "reduction over empty axes");
  return mul_scalar(sum(a, axes, keepdims), 1.0 / static_cast<double>(cnt));
}

// ------------------------------------------------------------------- matmul

Var matmul(Var a, Var b) {
  check_same_tape("matmul", a, b);
  Tape& t = *a.tape;
  const Tensor& va = t.value(a);
  const Tensor& vb = t.value(b);
  if (va.rank() != 2 || vb.rank() != 2)
    shape_error("matmul", "expects rank-2 operands, got " + va.shape_str() + " and " +
                              vb.shape_str());
  const int n = va.shape()[0], k = va.shape()[1], k2 = vb.shape()[0], m = vb.shape()[1];
  if (k != k2)
    shape_error("matmul", "inner dims differ: " + va.shape_str() + " x " + vb.shape_str());
  Tensor out({n, m});
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, n, m, k, 1.0, va.data(), k, vb.data(), m,
              0.0, out.data(), m);
  const int ida = a.id, idb = b.id;
  return t.emit(std::move(out), t.requires_grad(a) || t.requires_grad(b), "matmul",
                [ida, idb, n, k, m](Tape& tp, const Tape::Node& nd) {
                  const Tensor& va = tp.node(ida).value;
                  const Tensor& vb = tp.node(idb).value;
                  if (tp.node(ida).requires_grad) {
                    Tensor& ga = tp.grad_buffer(ida);  // dA = dC * B^T
                    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, n, k, m, 1.0,
                                nd.grad.data(), m, vb.data(), m, 1.0, ga.data(), k);
                  }
                  if (tp.node(idb).requires_grad) {
                    Tensor& gb = tp.grad_buffer(idb);  // dB = A^T * dC
                    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, m, n, 1.0, va.data(),
                                k, nd.grad.data(), m, 1.0, gb.data(), m);
                  }
                });
}

// ------------------------------------------------------------------- conv2d

namespace {

struct ConvGeom {
  int h, w, cin, kh, kw, cout, stride;
  int oh, ow, pad_t, pad_l;
  std::int64_t npix, kdim;
};

ConvGeom conv_geom(const std::vector<int>& xs, const std::vector<int>& ws, int stride) {
  if (xs.size() != 3)
    shape_error("conv2d", "input must be HxWxC, got " + Tensor::shape_str(xs));
  if (ws.size() != 4)
    shape_error("conv2d", "weights must be khxkwxCinxCout, got " + Tensor::shape_str(ws));
  if (stride != 1 && stride != 2) shape_error("conv2d", "stride must be 1 or 2");
  ConvGeom g;
  g.h = xs[0]; g.w = xs[1]; g.cin = xs[2];
  g.kh = ws[0]; g.kw = ws[1]; g.cout = ws[3];
  g.stride = stride;
  if (ws[2] != g.cin)
    shape_error("conv2d", "channel mismatch: input " + Tensor::shape_str(xs) + " vs weights " +
                              Tensor::shape_str(ws));
  g.oh = (g.h + stride - 1) / stride;
  g.ow = (g.w + stride - 1) / stride;
  const int pad_h = std::max((g.oh - 1) * stride + g.kh - g.h, 0);
  const int pad_w = std::max((g.ow - 1) * stride + g.kw - g.w, 0);
  g.pad_t = pad_h / 2;
  g.pad_l = pad_w / 2;
  g.npix = static_cast<std::int64_t>(g.oh) * g.ow;
  g.kdim = static_cast<std::int64_t>(g.kh) * g.kw * g.cin;
  return g;
}

// cols: [npix, kdim], row-major, zero-padded taps.
void im2col(const double* x, const ConvGeom& g, double* cols) {
  for (int oy = 0; oy < g.oh; ++oy) {
    for (int ox = 0; ox < g.ow; ++ox) {
      double* row = cols + (static_cast<std::int64_t>(oy) * g.ow + ox) * g.kdim;
      for (int dy = 0; dy < g.kh; ++dy) {
        const int iy = oy * g.stride + dy - g.pad_t;
        for (int dx = 0; dx < g.kw; ++dx) {
          const int ix = ox * g.stride + dx - g.pad_l;
          double* dst = row + (static_cast<std::int64_t>(dy) * g.kw + dx) * g.cin;
          if (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) {
            const double* src = x + (static_cast<std::int64_t>(iy) * g.w + ix) * g.cin;
            std::memcpy(dst, src, static_cast<std::size_t>(g.cin) * sizeof(double));
          } else {
            std::memset(dst, 0, static_cast<std::size_t>(g.cin) * sizeof(double));
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeom& g, double* gx) {
  for (int oy = 0; oy < g.oh; ++oy) {
    for (int ox = 0; ox < g.ow; ++ox) {
      const double* row = cols + (static_cast<std::int64_t>(oy) * g.ow + ox) * g.kdim;
      for (int dy = 0; dy < g.kh; ++dy) {
        const int iy = oy * g.stride + dy - g.pad_t;
        if (iy < 0 || iy >= g.h) continue;
        for (int dx = 0; dx < g.kw; ++dx) {
          const int ix = ox * g.stride + dx - g.pad_l;
          if (ix < 0 || ix >= g.w) continue;
          const double* src = row + (static_cast<std::int64_t>(dy) * g.kw + dx) * g.cin;
          double* dst = gx + (static_cast<std::int64_t>(iy) * g.w + ix) * g.cin;
          for (int c = 0; c < g.cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

thread_local std::vector<double> tl_cols;
thread_local std::vector<float> tl_fa, tl_fb, tl_fc;

void gemm_nn(bool f32, std::int64_t m, std::int64_t n, std::int64_t k, const double* a,
             const double* b, double* c, bool trans_a, bool trans_b, double beta) {
  const auto ta = trans_a ? CblasTrans : CblasNoTrans;
  const auto tb = trans_b ? CblasTrans : CblasNoTrans;
  const int lda = static_cast<int>(trans_a ? m : k);
  const int ldb = static_cast<int>(trans_b ? k : n);
  if (!f32) {
    cblas_dgemm(CblasRowMajor, ta, tb, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), 1.0, a, lda, b, ldb, beta, c, static_cast<int>(n));
    return;
  }
  const std::int64_t na = m * k, nb = k * n, nc = m * n;
  tl_fa.resize(static_cast<std::size_t>(na));
  tl_fb.resize(static_cast<std::size_t>(nb));
  tl_fc.resize(static_cast<std::size_t>(nc));
  for (std::int64_t i = 0; i < na; ++i) tl_fa[static_cast<std::size_t>(i)] = static_cast<float>(a[i]);
  for (std::int64_t i = 0; i < nb; ++i) tl_fb[static_cast<std::size_t>(i)] = static_cast<float>(b[i]);
  cblas_sgemm(CblasRowMajor, ta, tb, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), 1.0f, tl_fa.data(), lda, tl_fb.data(), ldb, 0.0f, tl_fc.data(),
              static_cast<int>(n));
  if (beta == 0.0) {
    for (std::int64_t i = 0; i < nc; ++i) c[i] = tl_fc[static_cast<std::size_t>(i)];
  } else {
    for (std::int64_t i = 0; i < nc; ++i) c[i] = beta * c[i] + tl_fc[static_cast<std::size_t>(i)];
  }
}

}  // namespace

Var conv2d(Var x, Var w, Var bias, int stride) {
  check_same_tape("conv2d", x, w);
  Tape& t = *x.tape;
  const Tensor& vx = t.value(x);
  const Tensor& vw = t.value(w);
  const ConvGeom g = conv_geom(vx.shape(), vw.shape(), stride);
  const bool has_bias = bias.valid();
  if (has_bias && t.value(bias).size() != g.cout)
    shape_error("conv2d", "bias size " + t.value(bias).shape_str() + " != Cout " +
                              std::to_string(g.cout));
  tl_cols.resize(static_cast<std::size_t>(g.npix * g.kdim));
  im2col(vx.data(), g, tl_cols.data());
  Tensor out({g.oh, g.ow, g.cout});
  gemm_nn(t.float_gemm(), g.npix, g.cout, g.kdim, tl_cols.data(), vw.data(), out.data(), false,
          false, 0.0);
  if (has_bias) {
    const Tensor& vb = t.value(bias);
    double* po = out.data();
    for (std::int64_t p = 0; p < g.npix; ++p)
      for (int c = 0; c < g.cout; ++c) po[p * g.cout + c] += vb[c];
  }
  const int idx_ = x.id, idw = w.id, idbias = has_bias ? bias.id : -1;
  bool rg = t.requires_grad(x) || t.requires_grad(w) || (has_bias && t.requires_grad(bias));
  return t.emit(std::move(out), rg, "conv2d", [idx_, idw, idbias, g](Tape& tp,
                                                                     const Tape::Node& nd) {
    const bool f32 = tp.float_gemm();
    const Tensor& vx = tp.node(idx_).value;
    const Tensor& vw = tp.node(idw).value;
    const Tensor& gout = nd.grad;  // [oh, ow, cout] == [npix, cout]
    if (idbias >= 0 && tp.node(idbias).requires_grad) {
      Tensor& gb = tp.grad_buffer(idbias);
      for (std::int64_t p = 0; p < g.npix; ++p)
        for (int c = 0; c < g.cout; ++c) gb[c] += gout[p * g.cout + c];
    }
    if (tp.node(idw).requires_grad) {
      tl_cols.resize(static_cast<std::size_t>(g.npix * g.kdim));
      im2col(vx.data(), g, tl_cols.data());
      Tensor& gw = tp.grad_buffer(idw);  // [kdim, cout] += cols^T [kdim,npix] * gout
      gemm_nn(f32, g.kdim, g.cout, g.npix, tl_cols.data(), gout.data(), gw.data(), true, false,
              1.0);
    }
    if (tp.node(idx_).requires_grad) {
      std::vector<double> dcols(static_cast<std::size_t>(g.npix * g.kdim));
      gemm_nn(f32, g.npix, g.kdim, g.cout, gout.data(), vw.data(), dcols.data(), false, true, 0.0);
      Tensor& gx = tp.grad_buffer(idx_);
      col2im_add(dcols.data(), g, gx.data());
    }
  });
}

// --------------------------------------------------------------- upsample2x

namespace {
struct Tap {
  int i0, i1;
  double w1;  // weight of i1; i0 gets 1-w1
};
std::vector<Tap> up_taps(int in, int out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  for (int o = 0; o < out; ++o) {
    const double s = (o + 0.5) * static_cast<double>(in) / out - 0.5;
    int i0 = static_cast<int>(std::floor(s));
    double f = s - i0;
    int i1 = i0 + 1;
    i0 = std::clamp(i0, 0, in - 1);
    i1 = std::clamp(i1, 0, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, f};
  }
  return taps;
}
}  // namespace

Var upsample2x(Var x) {
  Tape& t = *x.tape;
  const Tensor& vx = t.value(x);
  if (vx.rank() != 3) shape_error("upsample2x", "expects HxWxC, got " + vx.shape_str());
  const int h = vx.shape()[0], w = vx.shape()[1], c = vx.shape()[2];
  const int oh = h * 2, ow = w * 2;
  const auto ty = up_taps(h, oh), tx = up_taps(w, ow);
  Tensor out({oh, ow, c});
  for (int oy = 0; oy < oh; ++oy) {
    const Tap& a = ty[static_cast<std::size_t>(oy)];
    for (int ox = 0; ox < ow; ++ox) {
      const Tap& b = tx[static_cast<std::size_t>(ox)];
      const double w00 = (1 - a.w1) * (1 - b.w1), w01 = (1 - a.w1) * b.w1;
      const double w10 = a.w1 * (1 - b.w1), w11 = a.w1 * b.w1;
      double* po = out.data() + (static_cast<std::int64_t>(oy) * ow + ox) * c;
      const double* p00 = vx.data() + (static_cast<std::int64_t>(a.i0) * w + b.i0) * c;
      const double* p01 = vx.data() + (static_cast<std::int64_t>(a.i0) * w + b.i1) * c;
      const double* p10 = vx.data() + (static_cast<std::int64_t>(a.i1) * w + b.i0) * c;
      const double* p11 = vx.data() + (static_cast<std::int64_t>(a.i1) * w + b.i1) * c;
      for (int k = 0; k < c; ++k)
        po[k] = w00 * p00[k] + w01 * p01[k] + w10 * p10[k] + w11 * p11[k];
    }
  }
  const int id = x.id;
  return t.emit(std::move(out), t.requires_grad(x), "upsample2x",
                [id, h, w, c, oh, ow, ty, tx](Tape& tp, const Tape::Node& nd) {
                  if (!tp.node(id).requires_grad) return;
                  Tensor& gx = tp.grad_buffer(id);
                  for (int oy = 0; oy < oh; ++oy) {
                    const Tap& a = ty[static_cast<std::size_t>(oy)];
                    for (int ox = 0; ox < ow; ++ox) {
                      const Tap& b = tx[static_cast<std::size_t>(ox)];
                      const double w00 = (1 - a.w1) * (1 - b.w1), w01 = (1 - a.w1) * b.w1;
                      const double w10 = a.w1 * (1 - b.w1), w11 = a.w1 * b.w1;
                      const double* g = nd.grad.data() + (static_cast<std::int64_t>(oy) * ow + ox) * c;
                      double* p00 = gx.data() + (static_cast<std::int64_t>(a.i0) * w + b.i0) * c;
                      double* p01 = gx.data() + (static_cast<std::int64_t>(a.i0) * w + b.i1) * c;
                      double* p10 = gx.data() + (static_cast<std::int64_t>(a.i1) * w + b.i0) * c;
                      double* p11 = gx.data() + (static_cast<std::int64_t>(a.i1) * w + b.i1) * c;
                      for (int k = 0; k < c; ++k) {
                        p00[k] += w00 * g[k];
                        p01[k] += w01 * g[k];
                        p10[k] += w10 * g[k];
                        p11[k] += w11 * g[k];
                      }
                    }
                  }
                });
}

// ------------------------------------------------------------------ softmax

Var softmax_channels(Var logits) {
  Tape& t = *logits.tape;
  const Tensor& vx = t.value(logits);
  if (vx.rank() < 1) shape_error("softmax", "needs at least rank 1, got " + vx.shape_str());
  const int c = vx.shape().back();
  const std::int64_t rows = vx.size() / c;
  Tensor out(vx.shape());
  for (std::int64_t rI = 0; rI < rows; ++rI) {
    const double* px = vx.data() + rI * c;
    double* po = out.data() + rI * c;
    double mx = px[0];
    for (int k = 1; k < c; ++k) mx = std::max(mx, px[k]);
    double s = 0;
    for (int k = 0; k < c; ++k) {
      po[k] = std::exp(px[k] - mx);
      s += po[k];
    }
    const double inv = 1.0 / s;
    for (int k = 0; k < c; ++k) po[k] *= inv;
  }
  const int id = logits.id;
  return t.emit(std::move(out), t.requires_grad(logits), "softmax",
                [id, c, rows](Tape& tp, const Tape::Node& nd) {
                  if (!tp.node(id).requires_grad) return;
                  Tensor& gx = tp.grad_buffer(id);
                  for (std::int64_t rI = 0; rI < rows; ++rI) {
                    const double* y = nd.value.data() + rI * c;
                    const double* gy = nd.grad.data() + rI * c;
                    double dot = 0;
                    for (int k = 0; k < c; ++k) dot += y[k] * gy[k];
                    double* g = gx.data() + rI * c;
                    for (int k = 0; k < c; ++k) g[k] += y[k] * (gy[k] - dot);
                  }
                });
}

// ----------------------------------------------------------- bilinear gather

Var gather_bilinear(Var src, Var coords) {
  check_same_tape("gather_bilinear", src, coords);
  Tape& t = *src.tape;
  const Tensor& vs = t.value(src);
  const Tensor& vc = t.value(coords);
  if (vs.rank() != 3) shape_error("gather_bilinear", "src must be HxWxC, got " + vs.shape_str());
  if (vc.rank() != 3 || vc.shape()[2] != 2)
    shape_error("gather_bilinear", "coords must be H'xW'x2, got " + vc.shape_str());
  const int h = vs.shape()[0], w = vs.shape()[1], c = vs.shape()[2];
  const int oh = vc.shape()[0], ow = vc.shape()[1];
  Tensor out({oh, ow, c});
  const std::int64_t np = static_cast<std::int64_t>(oh) * ow;
  for (std::int64_t p = 0; p < np; ++p) {
    const double u = vc[p * 2], v = vc[p * 2 + 1];
    const int x0 = static_cast<int>(std::floor(u)), y0 = static_cast<int>(std::floor(v));
    const double fx = u - x0, fy = v - y0;
    const double wt[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
    const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
    const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
    double* po = out.data() + p * c;
    for (int tap = 0; tap < 4; ++tap) {
      if (xs[tap] < 0 || xs[tap] >= w || ys[tap] < 0 || ys[tap] >= h) continue;
      const double* ps = vs.data() + (static_cast<std::int64_t>(ys[tap]) * w + xs[tap]) * c;
      for (int k = 0; k < c; ++k) po[k] += wt[tap] * ps[k];
    }
  }
  const int ids = src.id, idc = coords.id;
  return t.emit(std::move(out), t.requires_grad(src) || t.requires_grad(coords),
                "gather_bilinear", [ids, idc, h, w, c, oh, ow](Tape& tp, const Tape::Node& nd) {
                  const Tensor& vs = tp.node(ids).value;
                  const Tensor& vc = tp.node(idc).value;
                  const bool need_s = tp.node(ids).requires_grad;
                  const bool need_c = tp.node(idc).requires_grad;
                  Tensor* gs = need_s ? &tp.grad_buffer(ids) : nullptr;
                  Tensor* gc = need_c ? &tp.grad_buffer(idc) : nullptr;
                  const std::int64_t np = static_cast<std::int64_t>(oh) * ow;
                  for (std::int64_t p = 0; p < np; ++p) {
                    const double u = vc[p * 2], v = vc[p * 2 + 1];
                    const int x0 = static_cast<int>(std::floor(u));
                    const int y0 = static_cast<int>(std::floor(v));
                    const double fx = u - x0, fy = v - y0;
                    const double* g = nd.grad.data() + p * c;
                    // tap values, zero outside source
                    double tv[4][2];  // [tap] -> value accumulators not needed; fetch inline
                    const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
                    const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
                    const double wt[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx),
                                          fy * fx};
                    // dweight/du per tap and dweight/dv per tap
                    const double dwu[4] = {-(1 - fy), (1 - fy), -fy, fy};
                    const double dwv[4] = {-(1 - fx), -fx, (1 - fx), fx};
                    double du = 0, dv = 0;
                    for (int tap = 0; tap < 4; ++tap) {
                      const bool in =
                          xs[tap] >= 0 && xs[tap] < w && ys[tap] >= 0 && ys[tap] < h;
                      if (!in) continue;
                      const std::int64_t off =
                          (static_cast<std::int64_t>(ys[tap]) * w + xs[tap]) * c;
                      const double* ps = vs.data() + off;
                      if (gs) {
                        double* pg = gs->data() + off;
                        for (int k = 0; k < c; ++k) pg[k] += wt[tap] * g[k];
                      }
                      if (gc) {
                        double dot = 0;
                        for (int k = 0; k < c; ++k) dot += ps[k] * g[k];
                        du += dwu[tap] * dot;
                        dv += dwv[tap] * dot;
                      }
                    }
                    (void)tv;
                    if (gc) {
                      (*gc)[p * 2] += du;
                      (*gc)[p * 2 + 1] += dv;
                    }
                  }
                });
}

Tensor bilinear_valid_mask(int src_h, int src_w, const Tensor& coords) {
  if (coords.rank() != 3 || coords.shape()[2] != 2)
    throw std::invalid_argument("bilinear_valid_mask: coords must be H'xW'x2, got " +
                                coords.shape_str());
  Tensor mask({coords.shape()[0], coords.shape()[1], 1});
  const std::int64_t np = mask.size();
  for (std::int64_t p = 0; p < np; ++p) {
    const double u = coords[p * 2], v = coords[p * 2 + 1];
    const bool ok = std::isfinite(u) && std::isfinite(v) && u >= 0.0 && u <= src_w - 1.0 &&
                    v >= 0.0 && v <= src_h - 1.0;
    mask[p] = ok ? 1.0 : 0.0;
  }
  return mask;
}

}  // namespace monoplate
