#pragma once

// Central finite-difference oracle for tape gradients.
//
// Each case supplies a float tape graph (whose backward is under test) and an
// independent double-precision reference forward written here in test code.
// Differences are taken on the reference, so float32 output rounding does not
// swamp the 1e-4 tolerance. The reference forward is also compared against the
// tape's forward value.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "cbllm/tape.hpp"

namespace cbllm::testing {

// Row-major double matrix used by reference forwards.
struct DM {
  std::size_t r = 0, c = 0;
  std::vector<double> v;
  DM() = default;
  DM(std::size_t rows, std::size_t cols, double fill = 0.0) : r(rows), c(cols), v(rows * cols, fill) {}
  double& operator()(std::size_t i, std::size_t j) { return v[i * c + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * c + j]; }
};

inline DM to_dm(const Tensor& t) {
  DM m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.size(); ++i) m.v[i] = t[i];
  return m;
}

using Builder = std::function<Var(Tape&, std::vector<Var>&)>;
using RefFn = std::function<DM(const std::vector<DM>&)>;

struct GradCheckResult {
  double rel_error = 0.0;
  double forward_error = 0.0;  // max |tape forward - reference forward|
  double analytic_norm = 0.0;
};

// Compares d(r . f(inputs))/d(inputs) from backward against central
// differences (step h) of the reference forward, for a random projection r.
inline GradCheckResult grad_check(const std::vector<Tensor>& inputs, const Builder& build, const RefFn& ref,
                                  std::mt19937_64& rng, double h = 1e-3) {
  GradCheckResult res;
  std::vector<double> r;
  std::vector<Tensor> analytic;
  {
    std::vector<Param> params;
    params.reserve(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) params.emplace_back("x" + std::to_string(i), inputs[i]);
    Tape tape;
    std::vector<Var> leaves;
    for (auto& p : params) leaves.push_back(tape.param(p));
    Var y = build(tape, leaves);
    const Tensor& yv = tape.value(y);
    std::vector<DM> xs;
    for (const auto& x : inputs) xs.push_back(to_dm(x));
    DM yref = ref(xs);
    if (yref.v.size() != yv.size()) {
      res.forward_error = INFINITY;
      res.rel_error = INFINITY;
      return res;
    }
    for (std::size_t i = 0; i < yv.size(); ++i) {
      res.forward_error = std::max(res.forward_error, std::fabs(yv[i] - yref.v[i]));
    }
    std::normal_distribution<double> nd(0.0, 1.0);
    r.resize(yv.size());
    for (auto& x : r) x = nd(rng);
    Tensor seed(yv.shape());
    for (std::size_t i = 0; i < r.size(); ++i) seed[i] = static_cast<float>(r[i]);
    tape.backward(y, seed);
    for (auto& p : params) analytic.push_back(p.grad);
  }

  std::vector<DM> xs;
  for (const auto& x : inputs) xs.push_back(to_dm(x));
  auto eval = [&] {
    DM y = ref(xs);
    double s = 0.0;
    for (std::size_t i = 0; i < y.v.size(); ++i) s += r[i] * y.v[i];
    return s;
  };
  double diff2 = 0.0, an2 = 0.0, fd2 = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (std::size_t j = 0; j < xs[i].v.size(); ++j) {
      double x0 = xs[i].v[j];
      xs[i].v[j] = x0 + h;
      double fp = eval();
      xs[i].v[j] = x0 - h;
      double fm = eval();
      xs[i].v[j] = x0;
      double fd = (fp - fm) / (2.0 * h);
      double an = analytic[i][j];
      diff2 += (fd - an) * (fd - an);
      an2 += an * an;
      fd2 += fd * fd;
    }
  }
  res.analytic_norm = std::sqrt(an2);
  double denom = std::max({std::sqrt(an2), std::sqrt(fd2), 1e-12});
  res.rel_error = std::sqrt(diff2) / denom;
  return res;
}

inline Tensor random_tensor(std::size_t rows, std::size_t cols, std::mt19937_64& rng, float scale = 1.0f) {
  Tensor t = Tensor::matrix(rows, cols);
  std::normal_distribution<float> nd(0.0f, scale);
  for (float& x : t.span()) x = nd(rng);
  return t;
}

// Values bounded away from zero so kinked ops (relu, |w|) are differentiable
// within the finite-difference stencil.
inline Tensor random_away_from_zero(std::size_t rows, std::size_t cols, std::mt19937_64& rng, float margin = 0.05f) {
  Tensor t = random_tensor(rows, cols, rng);
  for (float& x : t.span()) {
    if (std::fabs(x) < margin) x = x < 0 ? -margin - std::fabs(x) : margin + std::fabs(x);
  }
  return t;
}

// ---- double-precision reference forwards ----
namespace ref {

inline DM matmul(const DM& a, const DM& b, bool ta = false, bool tb = false) {
  std::size_t m = ta ? a.c : a.r, k = ta ? a.r : a.c, n = tb ? b.r : b.c;
  DM out(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < k; ++l) s += (ta ? a(l, i) : a(i, l)) * (tb ? b(j, l) : b(l, j));
      out(i, j) = s;
    }
  return out;
}

inline DM map(DM a, const std::function<double(double)>& f) {
  for (auto& x : a.v) x = f(x);
  return a;
}

inline DM zip(DM a, const DM& b, const std::function<double(double, double)>& f) {
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] = f(a.v[i], b.v[i]);
  return a;
}

inline DM row_bcast(DM a, const DM& row, bool multiply) {
  for (std::size_t i = 0; i < a.r; ++i)
    for (std::size_t j = 0; j < a.c; ++j) a(i, j) = multiply ? a(i, j) * row.v[j] : a(i, j) + row.v[j];
  return a;
}

inline DM relu(const DM& a) { return map(a, [](double x) { return x > 0 ? x : 0.0; }); }

inline DM softmax(const DM& a) {
  DM out(a.r, a.c);
  for (std::size_t i = 0; i < a.r; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < a.c; ++j) z += std::exp(a(i, j));
    for (std::size_t j = 0; j < a.c; ++j) out(i, j) = std::exp(a(i, j)) / z;
  }
  return out;
}

inline DM log_softmax(const DM& a) { return map(softmax(a), [](double x) { return std::log(x); }); }

inline DM layer_norm(const DM& a, double eps = 1e-5) {
  DM out(a.r, a.c);
  for (std::size_t i = 0; i < a.r; ++i) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < a.c; ++j) mu += a(i, j);
    mu /= double(a.c);
    for (std::size_t j = 0; j < a.c; ++j) var += (a(i, j) - mu) * (a(i, j) - mu);
    var /= double(a.c);
    for (std::size_t j = 0; j < a.c; ++j) out(i, j) = (a(i, j) - mu) / std::sqrt(var + eps);
  }
  return out;
}

inline DM scalar(double v) {
  DM s(1, 1);
  s.v[0] = v;
  return s;
}

inline DM cross_entropy(const DM& logits, const std::vector<int>& y) {
  DM lp = log_softmax(logits);
  double s = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] < 0) continue;
    s -= lp(i, std::size_t(y[i]));
    ++n;
  }
  return scalar(s / n);
}

inline DM attention(const DM& q, const DM& k, const DM& v, const std::vector<std::size_t>& off, std::size_t heads) {
  std::size_t d = q.c, hd = d / heads;
  DM out(q.r, d);
  for (std::size_t s = 0; s + 1 < off.size(); ++s)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = off[s]; i < off[s + 1]; ++i) {
        std::vector<double> w;
        double z = 0.0;
        for (std::size_t j = off[s]; j <= i; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < hd; ++c) dot += q(i, h * hd + c) * k(j, h * hd + c);
          w.push_back(std::exp(dot / std::sqrt(double(hd))));
          z += w.back();
        }
        for (std::size_t j = off[s]; j <= i; ++j)
          for (std::size_t c = 0; c < hd; ++c) out(i, h * hd + c) += w[j - off[s]] / z * v(j, h * hd + c);
      }
  return out;
}

}  // namespace ref
}  // namespace cbllm::testing
