#include "cbllm/tape.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "cbllm/errors.hpp"

namespace cbllm {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

CMapM cmap(const Tensor& t) { return CMapM(t.data(), Eigen::Index(t.rows()), Eigen::Index(t.cols())); }
MapM map(Tensor& t) { return MapM(t.data(), Eigen::Index(t.rows()), Eigen::Index(t.cols())); }

template <class F>
void with_op(const CMapM& m, bool transpose, F&& f) {
  if (transpose) {
    f(m.transpose());
  } else {
    f(m);
  }
}

[[noreturn]] void shape_fail(const std::string& op, const Tensor& a, const Tensor& b) {
  throw ShapeError(op + ": incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

void check_finite(const std::string& op, const Tensor& t) {
  if (!t.all_finite()) throw NumericFault(op + ": produced non-finite values");
}

}  // namespace

Var Tape::push(std::string op, Tensor value, bool requires_grad) {
  check_finite(op, value);
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad && grad_enabled_;
  n.op = std::move(op);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Tape::Node& Tape::node(Var v) {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw UsageError("tape: variable " + std::to_string(v.id) + " does not belong to this tape");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw UsageError("tape: variable " + std::to_string(v.id) + " does not belong to this tape");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

Tensor& Tape::grad_ref(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) n.grad = Tensor(n.value.shape());
  return n.grad;
}

bool Tape::any_grad(std::initializer_list<Var> vars) const {
  if (!grad_enabled_) return false;
  return std::any_of(vars.begin(), vars.end(), [&](Var v) { return node(v).requires_grad; });
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.size() == 0) return Tensor(n.value.shape());
  return n.grad;
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Var Tape::constant(Tensor value) {
  if (value.rank() == 1) value = Tensor({1, value.size()}, std::move(value.storage()));
  return push("constant", std::move(value), false);
}

Var Tape::param(Param& p) {
  Tensor v = p.value;
  if (v.rank() == 1) v = Tensor({1, v.size()}, std::move(v.storage()));
  Var out = push("param:" + p.name, std::move(v), true);
  nodes_.back().param = &p;
  return out;
}

Var Tape::detach(Var v) { return push("detach", node(v).value, false); }

Var Tape::matmul(Var a, Var b, bool trans_a, bool trans_b) {
  const Tensor& A = node(a).value;
  const Tensor& B = node(b).value;
  std::size_t m = trans_a ? A.cols() : A.rows();
  std::size_t ka = trans_a ? A.rows() : A.cols();
  std::size_t kb = trans_b ? B.cols() : B.rows();
  std::size_t n = trans_b ? B.rows() : B.cols();
  if (ka != kb) shape_fail("matmul", A, B);
  Tensor out = Tensor::matrix(m, n);
  auto C = map(out);
  with_op(cmap(A), trans_a, [&](const auto& opA) {
    with_op(cmap(B), trans_b, [&](const auto& opB) { C.noalias() = opA * opB; });
  });
  bool rg = any_grad({a, b});
  Var o = push("matmul", std::move(out), rg);
  if (rg) {
    int ia = a.id, ib = b.id, io = o.id;
    nodes_[io].backward_fn = [this, ia, ib, io, trans_a, trans_b] {
      const Tensor& dC = nodes_[io].grad;
      auto G = cmap(dC);
      if (nodes_[ia].requires_grad) {
        auto dA = map(grad_ref(ia));
        with_op(cmap(nodes_[ib].value), trans_b, [&](const auto& opB) {
          if (trans_a) {
            dA.noalias() += (G * opB.transpose()).transpose();
          } else {
            dA.noalias() += G * opB.transpose();
          }
        });
      }
      if (nodes_[ib].requires_grad) {
        auto dB = map(grad_ref(ib));
        with_op(cmap(nodes_[ia].value), trans_a, [&](const auto& opA) {
          if (trans_b) {
            dB.noalias() += (opA.transpose() * G).transpose();
          } else {
            dB.noalias() += opA.transpose() * G;
          }
        });
      }
    };
  }
  return o;
}

Var Tape::add(Var a, Var b) {
  const Tensor& A = node(a).value;
  const Tensor& B = node(b).value;
  if (A.rows() != B.rows() || A.cols() != B.cols()) shape_fail("add", A, B);
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  bool rg = any_grad({a, b});
  Var o = push("add", std::move(out), rg);
  if (rg) {
    int ia = a.id, ib = b.id, io = o.id;
    nodes_[io].backward_fn = [this, ia, ib, io] {
      for (int id : {ia, ib}) {
        if (!nodes_[id].requires_grad) continue;
        Tensor& g = grad_ref(id);
        const Tensor& d = nodes_[io].grad;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
      }
    };
  }
  return o;
}

Var Tape::add_row(Var a, Var row) {
  const Tensor& A = node(a).value;
  const Tensor& R = node(row).value;
  if (R.size() != A.cols()) shape_fail("add_row", A, R);
  Tensor out = A;
  std::size_t C = A.cols();
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] += R[c];
  bool rg = any_grad({a, row});
  Var o = push("add_row", std::move(out), rg);
  if (rg) {
    int ia = a.id, ir = row.id, io = o.id;
    nodes_[io].backward_fn = [this, ia, ir, io, C] {
      const Tensor& d = nodes_[io].grad;
      if (nodes_[ia].requires_grad) {
        Tensor& g = grad_ref(ia);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
      }
      if (nodes_[ir].requires_grad) {
        Tensor& g = grad_ref(ir);
        for (std::size_t i = 0; i < d.size(); ++i) g[i % C] += d[i];
      }
    };
  }
  return o;
}

Var Tape::mul(Var a, Var b) {
  const Tensor& A = node(a).value;
  const Tensor& B = node(b).value;
  if (A.rows() != B.rows() || A.cols() != B.cols()) shape_fail("mul", A, B);
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  bool rg = any_grad({a, b});
  Var o = push("mul", std::move(out), rg);
  if (rg) {
    int ia = a.id, ib = b.id, io = o.id;
    nodes_[io].backward_fn = [this, ia, ib, io] {
      const Tensor& d = nodes_[io].grad;
      if (nodes_[ia].requires_grad) {
        Tensor& g = grad_ref(ia);
        const Tensor& other = nodes_[ib].value;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * other[i];
      }
      if (nodes_[ib].requires_grad) {
        Tensor& g = grad_ref(ib);
        const Tensor& other = nodes_[ia].value;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * other[i];
      }
    };
  }
  return o;
}

Var Tape::mul_row(Var a, Var row) {
  const Tensor& A = node(a).value;
  const Tensor& R = node(row).value;
  if (R.size() != A.cols()) shape_fail("mul_row", A, R);
  Tensor out = A;
  std::size_t C = A.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= R[i % C];
  bool rg = any_grad({a, row});
  Var o = push("mul_row", std::move(out), rg);
  if (rg) {
    int ia = a.id, ir = row.id, io = o.id;
    nodes_[io].backward_fn = [this, ia, ir, io, C] {
      const Tensor& d = nodes_[io].grad;
      if (nodes_[ia].requires_grad) {
        Tensor& g = grad_ref(ia);
        const Tensor& R = nodes_[ir].value;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * R[i % C];
      }
      if (nodes_[ir].requires_grad) {
        Tensor& g = grad_ref(ir);
        const Tensor& A = nodes_[ia].value;
        for (std::size_t i = 0; i < d.size(); ++i) g[i % C] += d[i] * A[i];
      }
    };
  }
  return o;
}

Var Tape::scale(Var a, float s) {
  Tensor out = node(a).value;
  for (float& x : out.span()) x *= s;
  bool rg = any_grad({a});
  Var o = push("scale", std::move(out), rg);
  if (rg) {
    int ia = a.id, io = o.id;
    nodes_[io].backward_fn = [this, ia, io, s] {
      Tensor& g = grad_ref(ia);
      const Tensor& d = nodes_[io].grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * s;
    };
  }
  return o;
}

Var Tape::relu(Var a) {
  Tensor out = node(a).value;
  for (float& x : out.span()) x = x > 0.0f ? x : 0.0f;
  bool rg = any_grad({a});
  Var o = push("relu", std::move(out), rg);
  if (rg) {
    int ia = a.id, io = o.id;
    nodes_[io].backward_fn = [this, ia, io] {
      Tensor& g = grad_ref(ia);
      const Tensor& x = nodes_[ia].value;
      const Tensor& d = nodes_[io].grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] > 0.0f) g[i] += d[i];
      }
    };
  }
  return o;
}

namespace {

void softmax_rows(const Tensor& x, Tensor& y) {
  std::size_t C = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const float* in = x.data() + r * C;
    float* out = y.data() + r * C;
    float mx = *std::max_element(in, in + C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      out[c] = std::exp(in[c] - mx);
      s += out[c];
    }
    auto inv = static_cast<float>(1.0 / s);
    for (std::size_t c = 0; c < C; ++c) out[c] *= inv;
  }
}

}  // namespace

Var Tape::softmax(Var a) {
  const Tensor& X = node(a).value;
  Tensor out(X.shape());
  softmax_rows(X, out);
  bool rg = any_grad({a});
  Var o = push("softmax", std::move(out), rg);
  if (rg) {
    int ia = a.id, io = o.id;
    nodes_[io].backward_fn = [this, ia, io] {
      Tensor& g = grad_ref(ia);
      const Tensor& y = nodes_[io].value;
      const Tensor& d = nodes_[io].grad;
      std::size_t C = y.cols();
      for (std::size_t r = 0; r < y.rows(); ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < C; ++c) dot += double(d[r * C + c]) * y[r * C + c];
        for (std::size_t c = 0; c < C; ++c) {
          g[r * C + c] += y[r * C + c] * (d[r * C + c] - static_cast<float>(dot));
        }
      }
    };
  }
  return o;
}

Var Tape::log_softmax(Var a) {
  const Tensor& X = node(a).value;
  Tensor out(X.shape());
  std::size_t C = X.cols();
  for (std::size_t r = 0; r < X.rows(); ++r) {
    const float* in = X.data() + r * C;
    float mx = *std::max_element(in, in + C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(double(in[c]) - mx);
    double lse = mx + std::log(s);
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = static_cast<float>(in[c] - lse);
  }
  bool rg = any_grad({a});
  Var o = push("log_softmax", std::move(out), rg);
  if (rg) {
    int ia = a.id, io = o.id;
    nodes_[io].backward_fn = [this, ia, io, C] {
      Tensor& g = grad_ref(ia);
      const Tensor& y = nodes_[io].value;
      const Tensor& d = nodes_[io].grad;
      for (std::size_t r = 0; r < y.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += d[r * C + c];
        for (std::size_t c = 0; c < C; ++c) {
          g[r * C + c] += d[r * C + c] - static_cast<float>(std::exp(double(y[r * C + c])) * s);
        }
      }
    };
  }
  return o;
}

Var Tape::log(Var a) {
  Tensor out = node(a).value;
  for (float& x : out.span()) x = std::log(x);
  bool rg = any_grad({a});
  Var o = push("log", std::move(out), rg);
  if (rg) {
    int ia = a.id, io = o.id;
    nodes_[io].backward_fn = [this, ia, io] {
      Tensor& g = grad_ref(ia);
      const Tensor& x = nodes_[ia].value;
      const Tensor& d = nodes_[io].grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] / x[i];
    };
  }
  return o;
}

Var Tape::layer_norm(Var a, float eps) {
  const Tensor& X = node(a).value;
  std::size_t R = X.rows(), C = X.cols();
  Tensor out(X.shape());
  std::vector<double> inv_std(R), means(R);
  for (std::size_t r = 0; r < R; ++r) {
    const float* in = X.data() + r * C;
    double mu = 0.0;
    for (std::size_t c = 0; c < C; ++c) mu += in[c];
    mu /= double(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= double(C);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    means[r] = mu;
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = static_cast<float>((in[c] - mu) * is);
  }
  bool rg = any_grad({a});
  Var o = push("layer_norm", std::move(out), rg);
  if (rg) {
    int ia = a.id, io = o.id;
    nodes_[io].backward_fn = [this, ia, io, R, C, inv_std = std::move(inv_std), means = std::move(means)] {
      Tensor& g = grad_ref(ia);
      const Tensor& x = nodes_[ia].value;
      const Tensor& d = nodes_[io].grad;
      std::vector<double> xhat(C);
      for (std::size_t r = 0; r < R; ++r) {
        double md = 0.0, mdy = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          xhat[c] = (x[r * C + c] - means[r]) * inv_std[r];
          md += d[r * C + c];
          mdy += d[r * C + c] * xhat[c];
        }
        md /= double(C);
        mdy /= double(C);
        for (std::size_t c = 0; c < C; ++c) {
          g[r * C + c] += static_cast<float>(inv_std[r] * (d[r * C + c] - md - xhat[c] * mdy));
        }
      }
    };
  }
  return o;
}

Var Tape::embedding(Var table, std::span<const int> ids) {
  const Tensor& T = node(table).value;
  if (ids.empty()) throw ShapeError("embedding: empty id sequence");
  std::size_t D = T.cols();
  Tensor out = Tensor::matrix(ids.size(), D);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= T.rows()) {
      throw UsageError("embedding: id " + std::to_string(ids[i]) + " out of range for table " +
                       shape_str(T.shape()));
    }
    std::copy_n(T.data() + std::size_t(ids[i]) * D, D, out.data() + i * D);
  }
  bool rg = any_grad({table});
  Var o = push("embedding", std::move(out), rg);
  if (rg) {
    int it = table.id, io = o.id;
    std::vector<int> idv(ids.begin(), ids.end());
    nodes_[io].backward_fn = [this, it, io, D, idv = std::move(idv)] {
      Tensor& g = grad_ref(it);
      const Tensor& d = nodes_[io].grad;
      for (std::size_t i = 0; i < idv.size(); ++i) {
        float* dst = g.data() + std::size_t(idv[i]) * D;
        const float* src = d.data() + i * D;
        for (std::size_t c = 0; c < D; ++c) dst[c] += src[c];
      }
    };
  }
  return o;
}

Var Tape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  std::size_t R = node(parts[0]).value.rows();
  std::size_t C = 0;
  bool rg = false;
  for (Var p : parts) {
    const Tensor& t = node(p).value;
    if (t.rows() != R) shape_fail("concat_cols", node(parts[0]).value, t);
    C += t.cols();
    rg = rg || (grad_enabled_ && node(p).requires_grad);
  }
  Tensor out = Tensor::matrix(R, C);
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& t = node(p).value;
    for (std::size_t r = 0; r < R; ++r) std::copy_n(t.data() + r * t.cols(), t.cols(), out.data() + r * C + off);
    off += t.cols();
  }
  Var o = push("concat_cols", std::move(out), rg);
  if (rg) {
    std::vector<int> ids;
    for (Var p : parts) ids.push_back(p.id);
    int io = o.id;
    nodes_[io].backward_fn = [this, io, R, C, ids = std::move(ids)] {
      const Tensor& d = nodes_[io].grad;
      std::size_t off = 0;
      for (int id : ids) {
        std::size_t w = nodes_[id].value.cols();
        if (nodes_[id].requires_grad) {
          Tensor& g = grad_ref(id);
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < w; ++c) g[r * w + c] += d[r * C + off + c];
        }
        off += w;
      }
    };
  }
  return o;
}

Var Tape::slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& A = node(a).value;
  if (begin >= end || end > A.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     shape_str(A.shape()));
  }
  std::size_t R = A.rows(), C = A.cols(), W = end - begin;
  Tensor out = Tensor::matrix(R, W);
  for (std::size_t r = 0; r < R; ++r) std::copy_n(A.data() + r * C + begin, W, out.data() + r * W);
  bool rg = any_grad({a});
  Var o = push("slice_cols", std::move(out), rg);
  if (rg) {
    int ia = a.id, io = o.id;
    nodes_[io].backward_fn = [this, ia, io, R, C, W, begin] {
      Tensor& g = grad_ref(ia);
      const Tensor& d = nodes_[io].grad;
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < W; ++c) g[r * C + begin + c] += d[r * W + c];
    };
  }
  return o;
}

Var Tape::slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& A = node(a).value;
  if (begin >= end || end > A.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     shape_str(A.shape()));
  }
  std::size_t C = A.cols();
  Tensor out({end - begin, C},
             std::vector<float>(A.data() + begin * C, A.data() + end * C));
  bool rg = any_grad({a});
  Var o = push("slice_rows", std::move(out), rg);
  if (rg) {
    int ia = a.id, io = o.id;
    nodes_[io].backward_fn = [this, ia, io, C, begin] {
      Tensor& g = grad_ref(ia);
      const Tensor& d = nodes_[io].grad;
      for (std::size_t i = 0; i < d.size(); ++i) g[begin * C + i] += d[i];
    };
  }
  return o;
}

Var Tape::gather_rows(Var a, std::span<const std::size_t> rows) {
  const Tensor& A = node(a).value;
  if (rows.empty()) throw ShapeError("gather_rows: no rows requested");
  std::size_t C = A.cols();
  Tensor out = Tensor::matrix(rows.size(), C);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= A.rows()) throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " out of range");
    std::copy_n(A.data() + rows[i] * C, C, out.data() + i * C);
  }
  bool rg = any_grad({a});
  Var o = push("gather_rows", std::move(out), rg);
  if (rg) {
    int ia = a.id, io = o.id;
    std::vector<std::size_t> rv(rows.begin(), rows.end());
    nodes_[io].backward_fn = [this, ia, io, C, rv = std::move(rv)] {
      Tensor& g = grad_ref(ia);
      const Tensor& d = nodes_[io].grad;
      for (std::size_t i = 0; i < rv.size(); ++i)
        for (std::size_t c = 0; c < C; ++c) g[rv[i] * C + c] += d[i * C + c];
    };
  }
  return o;
}

Var Tape::sum(Var a) {
  const Tensor& A = node(a).value;
  double s = 0.0;
  for (float x : A.span()) s += x;
  bool rg = any_grad({a});
  Var o = push("sum", Tensor::scalar(static_cast<float>(s)), rg);
  if (rg) {
    int ia = a.id, io = o.id;
    nodes_[io].backward_fn = [this, ia, io] {
      Tensor& g = grad_ref(ia);
      float d = nodes_[io].grad[0];
      for (float& x : g.span()) x += d;
    };
  }
  return o;
}

Var Tape::mean(Var a) {
  auto n = static_cast<float>(node(a).value.size());
  return scale(sum(a), 1.0f / n);
}

Var Tape::cross_entropy(Var logits, std::span<const int> targets) {
  const Tensor& X = node(logits).value;
  std::size_t R = X.rows(), C = X.cols();
  if (targets.size() != R) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(X.shape()));
  }
  Tensor probs(X.shape());
  softmax_rows(X, probs);
  double loss = 0.0;
  std::size_t valid = 0;
  for (std::size_t r = 0; r < R; ++r) {
    int t = targets[r];
    if (t < 0) continue;
    if (static_cast<std::size_t>(t) >= C) {
      throw UsageError("cross_entropy: target " + std::to_string(t) + " out of range for " + std::to_string(C) +
                       " classes");
    }
    const float* in = X.data() + r * C;
    float mx = *std::max_element(in, in + C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(double(in[c]) - mx);
    loss += (mx + std::log(s)) - in[t];
    ++valid;
  }
  if (valid == 0) throw UsageError("cross_entropy: no valid targets");
  loss /= double(valid);
  bool rg = any_grad({logits});
  Var o = push("cross_entropy", Tensor::scalar(static_cast<float>(loss)), rg);
  if (rg) {
    int ia = logits.id, io = o.id;
    std::vector<int> tv(targets.begin(), targets.end());
    nodes_[io].backward_fn = [this, ia, io, C, valid, tv = std::move(tv), probs = std::move(probs)] {
      Tensor& g = grad_ref(ia);
      float d = nodes_[io].grad[0] / static_cast<float>(valid);
      for (std::size_t r = 0; r < tv.size(); ++r) {
        if (tv[r] < 0) continue;
        for (std::size_t c = 0; c < C; ++c) g[r * C + c] += d * probs[r * C + c];
        g[r * C + std::size_t(tv[r])] -= d;
      }
    };
  }
  return o;
}

Var Tape::cosine_rows(Var a, Var b) {
  constexpr double kFloor = 1e-8;
  const Tensor& A = node(a).value;
  const Tensor& B = node(b).value;
  if (A.rows() != B.rows() || A.cols() != B.cols()) shape_fail("cosine_rows", A, B);
  std::size_t R = A.rows(), C = A.cols();
  Tensor out = Tensor::matrix(R, 1);
  std::vector<double> na(R), nb(R), cosd(R);
  for (std::size_t r = 0; r < R; ++r) {
    double dot = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      double x = A[r * C + c], y = B[r * C + c];
      dot += x * y;
      sa += x * x;
      sb += y * y;
    }
    na[r] = std::max(std::sqrt(sa), kFloor);
    nb[r] = std::max(std::sqrt(sb), kFloor);
    cosd[r] = dot / (na[r] * nb[r]);
    out[r] = static_cast<float>(cosd[r]);
  }
  bool rg = any_grad({a, b});
  Var o = push("cosine_rows", std::move(out), rg);
  if (rg) {
    int ia = a.id, ib = b.id, io = o.id;
    nodes_[io].backward_fn = [this, ia, ib, io, R, C, na = std::move(na), nb = std::move(nb),
                              cos = std::move(cosd)] {
      const Tensor& d = nodes_[io].grad;
      auto side = [&](int self, int other, const std::vector<double>& ns, const std::vector<double>& no) {
        if (!nodes_[self].requires_grad) return;
        Tensor& g = grad_ref(self);
        const Tensor& X = nodes_[self].value;
        const Tensor& Y = nodes_[other].value;
        for (std::size_t r = 0; r < R; ++r) {
          // When the norm is floored it is a constant, so only the dot term remains.
          bool floored = ns[r] <= kFloor;
          for (std::size_t c = 0; c < C; ++c) {
            double v = Y[r * C + c] / (ns[r] * no[r]);
            if (!floored) v -= cos[r] * X[r * C + c] / (ns[r] * ns[r]);
            g[r * C + c] += static_cast<float>(d[r] * v);
          }
        }
      };
      side(ia, ib, na, nb);
      side(ib, ia, nb, na);
    };
  }
  return o;
}

Var Tape::causal_attention(Var q, Var k, Var v, std::span<const std::size_t> offsets, std::size_t heads) {
  const Tensor& Q = node(q).value;
  const Tensor& K = node(k).value;
  const Tensor& V = node(v).value;
  if (!Q.same_shape(K)) shape_fail("causal_attention", Q, K);
  if (!Q.same_shape(V)) shape_fail("causal_attention", Q, V);
  std::size_t N = Q.rows(), D = Q.cols();
  if (heads == 0 || D % heads != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(D) + " not divisible by " + std::to_string(heads) +
                     " heads");
  }
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != N) {
    throw ShapeError("causal_attention: segment offsets must start at 0 and end at " + std::to_string(N));
  }
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    if (offsets[s + 1] <= offsets[s]) throw ShapeError("causal_attention: empty or unordered segment");
  }
  std::size_t hd = D / heads;
  float scl = 1.0f / std::sqrt(static_cast<float>(hd));
  auto ed = Eigen::Index(D);
  Tensor out = Tensor::matrix(N, D);
  std::vector<RowMat> probs;
  probs.reserve((offsets.size() - 1) * heads);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    std::size_t o0 = offsets[s];
    auto L = Eigen::Index(offsets[s + 1] - o0);
    for (std::size_t h = 0; h < heads; ++h) {
      std::size_t base = o0 * D + h * hd;
      CStridedMap Qh(Q.data() + base, L, Eigen::Index(hd), Eigen::OuterStride<>(ed));
      CStridedMap Kh(K.data() + base, L, Eigen::Index(hd), Eigen::OuterStride<>(ed));
      CStridedMap Vh(V.data() + base, L, Eigen::Index(hd), Eigen::OuterStride<>(ed));
      RowMat S = (Qh * Kh.transpose()) * scl;
      for (Eigen::Index i = 0; i < L; ++i) {
        float mx = S(i, 0);
        for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, S(i, j));
        double z = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          S(i, j) = std::exp(S(i, j) - mx);
          z += S(i, j);
        }
        auto inv = static_cast<float>(1.0 / z);
        for (Eigen::Index j = 0; j <= i; ++j) S(i, j) *= inv;
        for (Eigen::Index j = i + 1; j < L; ++j) S(i, j) = 0.0f;
      }
      StridedMap Oh(out.data() + base, L, Eigen::Index(hd), Eigen::OuterStride<>(ed));
      Oh.noalias() = S * Vh;
      probs.push_back(std::move(S));
    }
  }
  bool rg = any_grad({q, k, v});
  Var o = push("causal_attention", std::move(out), rg);
  if (rg) {
    int iq = q.id, ik = k.id, iv = v.id, io = o.id;
    std::vector<std::size_t> offs(offsets.begin(), offsets.end());
    nodes_[io].backward_fn = [this, iq, ik, iv, io, D, hd, heads, scl, offs = std::move(offs),
                              probs = std::move(probs)] {
      auto ed = Eigen::Index(D);
      const Tensor& dOut = nodes_[io].grad;
      const Tensor& Qv = nodes_[iq].value;
      const Tensor& Kv = nodes_[ik].value;
      const Tensor& Vv = nodes_[iv].value;
      bool gq = nodes_[iq].requires_grad, gk = nodes_[ik].requires_grad, gv = nodes_[iv].requires_grad;
      float* dq = gq ? grad_ref(iq).data() : nullptr;
      float* dk = gk ? grad_ref(ik).data() : nullptr;
      float* dv = gv ? grad_ref(iv).data() : nullptr;
      std::size_t pi = 0;
      for (std::size_t s = 0; s + 1 < offs.size(); ++s) {
        std::size_t o0 = offs[s];
        auto L = Eigen::Index(offs[s + 1] - o0);
        for (std::size_t h = 0; h < heads; ++h, ++pi) {
          std::size_t base = o0 * D + h * hd;
          const RowMat& P = probs[pi];
          auto mk = [&](const float* p) { return CStridedMap(p + base, L, Eigen::Index(hd), Eigen::OuterStride<>(ed)); };
          auto mm = [&](float* p) { return StridedMap(p + base, L, Eigen::Index(hd), Eigen::OuterStride<>(ed)); };
          auto dO = mk(dOut.data());
          if (gv) mm(dv).noalias() += P.transpose() * dO;
          if (gq || gk) {
            RowMat dP = dO * mk(Vv.data()).transpose();
            Eigen::VectorXf rs = (dP.array() * P.array()).rowwise().sum();
            RowMat dS = (P.array() * (dP.colwise() - rs).array()).matrix() * scl;
            if (gq) mm(dq).noalias() += dS * mk(Kv.data());
            if (gk) mm(dk).noalias() += dS.transpose() * mk(Qv.data());
          }
        }
      }
    };
  }
  return o;
}

Var Tape::dropout(Var a, float rate, std::mt19937_64& rng) {
  if (rate < 0.0f || rate >= 1.0f) throw UsageError("dropout: rate must be in [0, 1)");
  if (rate == 0.0f) return a;
  const Tensor& A = node(a).value;
  Tensor mask(A.shape());
  std::bernoulli_distribution keep(1.0 - rate);
  float s = 1.0f / (1.0f - rate);
  for (float& m : mask.span()) m = keep(rng) ? s : 0.0f;
  return mul(a, constant(std::move(mask)));
}

Var Tape::elastic_net(Var w, float alpha) {
  if (alpha < 0.0f || alpha > 1.0f) throw ValidationError("elastic_net: alpha must lie in [0, 1]");
  const Tensor& W = node(w).value;
  double l1 = 0.0, l2 = 0.0;
  for (float x : W.span()) {
    l1 += std::fabs(x);
    l2 += double(x) * x;
  }
  double r = alpha * l1 + (1.0 - alpha) * 0.5 * l2;
  bool rg = any_grad({w});
  Var o = push("elastic_net", Tensor::scalar(static_cast<float>(r)), rg);
  if (rg) {
    int iw = w.id, io = o.id;
    nodes_[io].backward_fn = [this, iw, io, alpha] {
      Tensor& g = grad_ref(iw);
      const Tensor& W = nodes_[iw].value;
      float d = nodes_[io].grad[0];
      for (std::size_t i = 0; i < g.size(); ++i) {
        float sgn = W[i] > 0.0f ? 1.0f : (W[i] < 0.0f ? -1.0f : 0.0f);
        g[i] += d * (alpha * sgn + (1.0f - alpha) * W[i]);
      }
    };
  }
  return o;
}

void Tape::backward(Var out, const Tensor& seed) {
  if (nodes_.empty()) throw UsageError("backward called before any forward op was recorded");
  Node& root = node(out);
  if (backward_done_) throw UsageError("backward already ran on this tape");
  if (!grad_enabled_) throw UsageError("backward on a tape with gradients disabled");
  if (seed.size() != root.value.size()) {
    throw ShapeError("backward: seed " + shape_str(seed.shape()) + " does not match output " +
                     shape_str(root.value.shape()));
  }
  backward_done_ = true;
  if (!root.requires_grad) return;
  root.grad = Tensor(root.value.shape(), seed.storage());
  for (int id = out.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) continue;
    if (n.backward_fn) n.backward_fn();
    if (n.param != nullptr) {
      Param& p = *n.param;
      if (p.grad.size() != p.value.size()) p.grad = Tensor(p.value.shape());
      for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
    }
  }
}

void Tape::backward(Var scalar_out) {
  if (nodes_.empty()) throw UsageError("backward called before any forward op was recorded");
  if (node(scalar_out).value.size() != 1) throw ShapeError("backward: implicit seed requires a scalar output");
  backward(scalar_out, Tensor::scalar(1.0f));
}

}  // namespace cbllm
