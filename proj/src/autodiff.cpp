#include "fpeft/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace fpeft::inline FPEFT_PRECISION_NS {

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const { return tape->value(id); }
bool Var::requires_grad() const { return tape->requires_grad(id); }

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf_ref(const Tensor& value, bool requires_grad) {
  Node n;
  n.external = &value;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Tensor value, std::vector<int> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (int i : inputs) n.requires_grad = n.requires_grad || requires_grad(i);
  if (n.requires_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Tape::value(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.external ? *n.external : n.value;
}

const Tensor* Tape::grad(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad || n.grad.empty()) return nullptr;
  return &n.grad;
}

Tensor& Tape::grad_buffer(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor(value(id).shape());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw Error("backward: loss belongs to a different tape");
  if (value(loss.id).size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(value(loss.id).shape()));
  }
  if (!requires_grad(loss.id)) return;
  grad_buffer(loss.id)[0] = Real(1);
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, id);
  }
}

namespace {

Tape* same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw Error("operands live on different tapes");
  return a.tape;
}

int norm_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return a;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Element-wise binary op with trailing-suffix broadcasting.
struct Broadcast {
  Shape out;
  std::int64_t period_a = 0;  // size of a; repeats with this period in out
  std::int64_t period_b = 0;
};

Broadcast broadcast(const Tensor& a, const Tensor& b, const char* op) {
  Broadcast bc;
  if (is_suffix(b.shape(), a.shape())) {
    bc.out = a.shape();
  } else if (is_suffix(a.shape(), b.shape())) {
    bc.out = b.shape();
  } else {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  bc.period_a = a.size();
  bc.period_b = b.size();
  return bc;
}

void accumulate(Tensor& dst, const Tensor& src) {
  Real* d = dst.ptr();
  const Real* s = src.ptr();
  for (std::int64_t i = 0; i < src.size(); ++i) d[i] += s[i];
}

// C[p, r] += A[p, q] B[q, r]
void gemm_nn(const Real* A, const Real* B, Real* C, std::int64_t p, std::int64_t q, std::int64_t r) {
  for (std::int64_t i = 0; i < p; ++i) {
    Real* c = C + i * r;
    const Real* a = A + i * q;
    for (std::int64_t k = 0; k < q; ++k) {
      const Real aik = a[k];
      const Real* b = B + k * r;
      for (std::int64_t j = 0; j < r; ++j) c[j] += aik * b[j];
    }
  }
}

void transpose(const Real* A, Real* At, std::int64_t rows, std::int64_t cols) {
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) At[j * rows + i] = A[i * cols + j];
}

struct BatchPlan {
  Shape out_batch;
  std::vector<std::int64_t> a_index;  // per output batch entry
  std::vector<std::int64_t> b_index;
};

BatchPlan plan_batches(const Shape& sa, const Shape& sb) {
  const std::size_t ra = sa.size() - 2, rb = sb.size() - 2;
  const std::size_t r = std::max(ra, rb);
  Shape pa(r, 1), pb(r, 1);
  std::copy(sa.begin(), sa.begin() + static_cast<std::ptrdiff_t>(ra), pa.begin() + static_cast<std::ptrdiff_t>(r - ra));
  std::copy(sb.begin(), sb.begin() + static_cast<std::ptrdiff_t>(rb), pb.begin() + static_cast<std::ptrdiff_t>(r - rb));
  BatchPlan plan;
  plan.out_batch.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw ShapeError("matmul: batch extents do not broadcast: " + shape_str(sa) + " x " + shape_str(sb));
    }
    plan.out_batch[i] = std::max(pa[i], pb[i]);
  }
  const std::int64_t total = numel(plan.out_batch);
  plan.a_index.resize(static_cast<std::size_t>(total));
  plan.b_index.resize(static_cast<std::size_t>(total));
  std::vector<std::int64_t> idx(r, 0);
  for (std::int64_t t = 0; t < total; ++t) {
    std::int64_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < r; ++i) {
      ia = ia * pa[i] + (pa[i] == 1 ? 0 : idx[i]);
      ib = ib * pb[i] + (pb[i] == 1 ? 0 : idx[i]);
    }
    plan.a_index[static_cast<std::size_t>(t)] = ia;
    plan.b_index[static_cast<std::size_t>(t)] = ib;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < plan.out_batch[i]) break;
      idx[i] = 0;
    }
  }
  return plan;
}

template <class F>
Var unary(Var x, F&& fwd_and_deriv) {
  // fwd_and_deriv(x) -> pair(y, dy/dx)
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  auto d = std::make_shared<Tensor>(xv.shape());
  for (std::int64_t i = 0; i < xv.size(); ++i) {
    auto [yi, di] = fwd_and_deriv(xv[i]);
    y[i] = yi;
    (*d)[i] = di;
  }
  const int xi = x.id;
  return x.tape->record(std::move(y), {xi}, [xi, d](Tape& t, int self) {
    const Tensor& g = *t.grad(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*d)[i];
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Element-wise

Var add(Var a, Var b) {
  Tape* tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast bc = broadcast(av, bv, "add");
  Tensor y(bc.out);
  for (std::int64_t i = 0; i < y.size(); ++i) y[i] = av[i % bc.period_a] + bv[i % bc.period_b];
  const int ai = a.id, bi = b.id;
  return tape->record(std::move(y), {ai, bi}, [ai, bi, bc](Tape& t, int self) {
    const Tensor& g = *t.grad(self);
    for (int which : {ai, bi}) {
      if (!t.requires_grad(which)) continue;
      Tensor& gx = t.grad_buffer(which);
      const std::int64_t period = which == ai ? bc.period_a : bc.period_b;
      for (std::int64_t i = 0; i < g.size(); ++i) gx[i % period] += g[i];
    }
  });
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var mul(Var a, Var b) {
  Tape* tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast bc = broadcast(av, bv, "mul");
  Tensor y(bc.out);
  for (std::int64_t i = 0; i < y.size(); ++i) y[i] = av[i % bc.period_a] * bv[i % bc.period_b];
  const int ai = a.id, bi = b.id;
  return tape->record(std::move(y), {ai, bi}, [ai, bi, bc](Tape& t, int self) {
    const Tensor& g = *t.grad(self);
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    if (t.requires_grad(ai)) {
      Tensor& ga = t.grad_buffer(ai);
      for (std::int64_t i = 0; i < g.size(); ++i) ga[i % bc.period_a] += g[i] * bv[i % bc.period_b];
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad_buffer(bi);
      for (std::int64_t i = 0; i < g.size(); ++i) gb[i % bc.period_b] += g[i] * av[i % bc.period_a];
    }
  });
}

Var scale(Var x, double s) {
  const Real r = static_cast<Real>(s);
  return unary(x, [r](Real v) { return std::pair<Real, Real>{v * r, r}; });
}

Var add_scalar(Var x, double s) {
  const Real r = static_cast<Real>(s);
  return unary(x, [r](Real v) { return std::pair<Real, Real>{v + r, Real(1)}; });
}

Var abs(Var x) {
  return unary(x, [](Real v) {
    const Real d = v > 0 ? Real(1) : (v < 0 ? Real(-1) : Real(0));
    return std::pair<Real, Real>{std::abs(v), d};
  });
}

Var square(Var x) {
  return unary(x, [](Real v) { return std::pair<Real, Real>{v * v, 2 * v}; });
}

Var huber(Var x, double delta) {
  const Real d = static_cast<Real>(delta);
  return unary(x, [d](Real v) {
    const Real a = std::abs(v);
    if (a <= d) return std::pair<Real, Real>{Real(0.5) * v * v, v};
    return std::pair<Real, Real>{d * (a - Real(0.5) * d), v > 0 ? d : -d};
  });
}

Var gelu(Var x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return unary(x, [](Real v) {
    const double xv = v;
    const double u = kC * (xv + kA * xv * xv * xv);
    const double th = std::tanh(u);
    const double y = 0.5 * xv * (1.0 + th);
    const double dy = 0.5 * (1.0 + th) + 0.5 * xv * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * xv * xv);
    return std::pair<Real, Real>{static_cast<Real>(y), static_cast<Real>(dy)};
  });
}

// ---------------------------------------------------------------------------
// Contractions

Var matmul(Var a, Var b) {
  Tape* tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() < 2 || bv.rank() < 2 || av.dim(-1) != bv.dim(-2)) {
    throw ShapeError("matmul: shape mismatch " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  const std::int64_t q = av.dim(-1), r = bv.dim(-1);
  const int ai = a.id, bi = b.id;

  if (bv.rank() == 2) {
    // Fold all batch extents of `a` into its rows.
    const std::int64_t rows = av.size() / q;
    Shape out = av.shape();
    out.back() = r;
    Tensor y(out);
    gemm_nn(av.ptr(), bv.ptr(), y.ptr(), rows, q, r);
    return tape->record(std::move(y), {ai, bi}, [ai, bi, rows, q, r](Tape& t, int self) {
      const Tensor& g = *t.grad(self);
      const Tensor& av = t.value(ai);
      const Tensor& bv = t.value(bi);
      if (t.requires_grad(ai)) {
        std::vector<Real> bt(static_cast<std::size_t>(q * r));
        transpose(bv.ptr(), bt.data(), q, r);
        gemm_nn(g.ptr(), bt.data(), t.grad_buffer(ai).ptr(), rows, r, q);
      }
      if (t.requires_grad(bi)) {
        std::vector<Real> at(static_cast<std::size_t>(rows * q));
        transpose(av.ptr(), at.data(), rows, q);
        gemm_nn(at.data(), g.ptr(), t.grad_buffer(bi).ptr(), q, rows, r);
      }
    });
  }

  const std::int64_t p = av.dim(-2);
  auto plan = std::make_shared<BatchPlan>(plan_batches(av.shape(), bv.shape()));
  Shape out = plan->out_batch;
  out.push_back(p);
  out.push_back(r);
  Tensor y(out);
  for (std::size_t t = 0; t < plan->a_index.size(); ++t) {
    gemm_nn(av.ptr() + plan->a_index[t] * p * q, bv.ptr() + plan->b_index[t] * q * r,
            y.ptr() + static_cast<std::int64_t>(t) * p * r, p, q, r);
  }
  return tape->record(std::move(y), {ai, bi}, [ai, bi, plan, p, q, r](Tape& t, int self) {
    const Tensor& g = *t.grad(self);
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    std::vector<Real> tmp;
    for (std::size_t k = 0; k < plan->a_index.size(); ++k) {
      const Real* gk = g.ptr() + static_cast<std::int64_t>(k) * p * r;
      const Real* ak = av.ptr() + plan->a_index[k] * p * q;
      const Real* bk = bv.ptr() + plan->b_index[k] * q * r;
      if (t.requires_grad(ai)) {
        tmp.assign(static_cast<std::size_t>(q * r), Real(0));
        transpose(bk, tmp.data(), q, r);
        gemm_nn(gk, tmp.data(), t.grad_buffer(ai).ptr() + plan->a_index[k] * p * q, p, r, q);
      }
      if (t.requires_grad(bi)) {
        tmp.assign(static_cast<std::size_t>(p * q), Real(0));
        transpose(ak, tmp.data(), p, q);
        gemm_nn(tmp.data(), gk, t.grad_buffer(bi).ptr() + plan->b_index[k] * q * r, q, p, r);
      }
    }
  });
}

Var linear(Var x, Var w, Var b) {
  Var y = matmul(x, w);
  return b.valid() ? add(y, b) : y;
}

// ---------------------------------------------------------------------------
// Normalisation and softmax

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape* tape = same_tape(x, gamma);
  same_tape(x, beta);
  const Tensor& xv = x.value();
  const std::int64_t C = xv.dim(-1);
  if (gamma.value().size() != C || beta.value().size() != C) {
    throw ShapeError("layer_norm: affine extents " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not match feature extent " + std::to_string(C));
  }
  const std::int64_t rows = xv.size() / C;
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(rows));
  Tensor y(xv.shape());
  const Real* g = gamma.value().ptr();
  const Real* bta = beta.value().ptr();
  for (std::int64_t i = 0; i < rows; ++i) {
    const Real* row = xv.ptr() + i * C;
    double mu = 0;
    for (std::int64_t c = 0; c < C; ++c) mu += row[c];
    mu /= static_cast<double>(C);
    double var = 0;
    for (std::int64_t c = 0; c < C; ++c) {
      const double d = row[c] - mu;
      var += d * d;
    }
    var /= static_cast<double>(C);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(i)] = static_cast<Real>(is);
    for (std::int64_t c = 0; c < C; ++c) {
      const Real h = static_cast<Real>((row[c] - mu) * is);
      (*xhat)[i * C + c] = h;
      y[i * C + c] = h * g[c] + bta[c];
    }
  }
  const int xi = x.id, gi = gamma.id, bi = beta.id;
  return tape->record(std::move(y), {xi, gi, bi}, [xi, gi, bi, xhat, inv_std, rows, C](Tape& t, int self) {
    const Tensor& gy = *t.grad(self);
    const Real* gam = t.value(gi).ptr();
    if (t.requires_grad(gi)) {
      Tensor& gg = t.grad_buffer(gi);
      for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t c = 0; c < C; ++c) gg[c] += gy[i * C + c] * (*xhat)[i * C + c];
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad_buffer(bi);
      for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t c = 0; c < C; ++c) gb[c] += gy[i * C + c];
    }
    if (t.requires_grad(xi)) {
      Tensor& gx = t.grad_buffer(xi);
      for (std::int64_t i = 0; i < rows; ++i) {
        double m1 = 0, m2 = 0;
        for (std::int64_t c = 0; c < C; ++c) {
          const double dh = gy[i * C + c] * gam[c];
          m1 += dh;
          m2 += dh * (*xhat)[i * C + c];
        }
        m1 /= static_cast<double>(C);
        m2 /= static_cast<double>(C);
        const double is = (*inv_std)[static_cast<std::size_t>(i)];
        for (std::int64_t c = 0; c < C; ++c) {
          const double dh = gy[i * C + c] * gam[c];
          gx[i * C + c] += static_cast<Real>(is * (dh - m1 - (*xhat)[i * C + c] * m2));
        }
      }
    }
  });
}

namespace {

struct AxisSplit {
  std::int64_t outer, n, inner;
};

AxisSplit split_axis(const Shape& s, int axis) {
  const int a = norm_axis(axis, static_cast<int>(s.size()));
  AxisSplit sp{1, s[static_cast<std::size_t>(a)], 1};
  for (int i = 0; i < a; ++i) sp.outer *= s[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(a) + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

}  // namespace

Var softmax(Var x, int axis) {
  const Tensor& xv = x.value();
  const AxisSplit sp = split_axis(xv.shape(), axis);
  if (sp.n < 1) throw ShapeError("softmax over empty axis");
  Tensor y(xv.shape());
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t in = 0; in < sp.inner; ++in) {
      const std::int64_t base = o * sp.n * sp.inner + in;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::int64_t j = 0; j < sp.n; ++j) mx = std::max(mx, xv[base + j * sp.inner]);
      double s = 0;
      for (std::int64_t j = 0; j < sp.n; ++j) {
        const Real e = std::exp(xv[base + j * sp.inner] - mx);
        y[base + j * sp.inner] = e;
        s += e;
      }
      for (std::int64_t j = 0; j < sp.n; ++j) y[base + j * sp.inner] = static_cast<Real>(y[base + j * sp.inner] / s);
    }
  const int xi = x.id;
  return x.tape->record(std::move(y), {xi}, [xi, sp](Tape& t, int self) {
    const Tensor& g = *t.grad(self);
    const Tensor& yv = t.value(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t in = 0; in < sp.inner; ++in) {
        const std::int64_t base = o * sp.n * sp.inner + in;
        double dot = 0;
        for (std::int64_t j = 0; j < sp.n; ++j) dot += g[base + j * sp.inner] * yv[base + j * sp.inner];
        for (std::int64_t j = 0; j < sp.n; ++j) {
          const std::int64_t k = base + j * sp.inner;
          gx[k] += static_cast<Real>(yv[k] * (g[k] - dot));
        }
      }
  });
}

Var log_softmax(Var x, int axis) {
  const Tensor& xv = x.value();
  const AxisSplit sp = split_axis(xv.shape(), axis);
  if (sp.n < 1) throw ShapeError("log_softmax over empty axis");
  Tensor y(xv.shape());
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t in = 0; in < sp.inner; ++in) {
      const std::int64_t base = o * sp.n * sp.inner + in;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::int64_t j = 0; j < sp.n; ++j) mx = std::max(mx, xv[base + j * sp.inner]);
      double s = 0;
      for (std::int64_t j = 0; j < sp.n; ++j) s += std::exp(static_cast<double>(xv[base + j * sp.inner] - mx));
      const double lse = std::log(s);
      for (std::int64_t j = 0; j < sp.n; ++j) {
        const std::int64_t k = base + j * sp.inner;
        y[k] = static_cast<Real>(xv[k] - mx - lse);
      }
    }
  const int xi = x.id;
  return x.tape->record(std::move(y), {xi}, [xi, sp](Tape& t, int self) {
    const Tensor& g = *t.grad(self);
    const Tensor& yv = t.value(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t in = 0; in < sp.inner; ++in) {
        const std::int64_t base = o * sp.n * sp.inner + in;
        double gs = 0;
        for (std::int64_t j = 0; j < sp.n; ++j) gs += g[base + j * sp.inner];
        for (std::int64_t j = 0; j < sp.n; ++j) {
          const std::int64_t k = base + j * sp.inner;
          gx[k] += static_cast<Real>(g[k] - std::exp(static_cast<double>(yv[k])) * gs);
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Attention

Var scaled_dot_attention(Var q, Var k, Var v, int heads, std::span<const std::uint8_t> key_masked) {
  Tape* tape = same_tape(q, k);
  same_tape(q, v);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  if (qv.rank() < 2 || kv.shape() != vv.shape() || qv.dim(-1) != kv.dim(-1) ||
      qv.size() / (qv.dim(-2) * qv.dim(-1)) != kv.size() / (kv.dim(-2) * kv.dim(-1))) {
    throw ShapeError("attention: incompatible q/k/v shapes " + shape_str(qv.shape()) + ", " + shape_str(kv.shape()) +
                     ", " + shape_str(vv.shape()));
  }
  const std::int64_t C = qv.dim(-1);
  if (heads < 1 || C % heads != 0) {
    throw ConfigError("attention: feature extent " + std::to_string(C) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const std::int64_t Lq = qv.dim(-2), Lk = kv.dim(-2);
  if (static_cast<std::int64_t>(key_masked.size()) != Lk) {
    throw ShapeError("attention: key mask length " + std::to_string(key_masked.size()) + " != " + std::to_string(Lk));
  }
  const std::int64_t B = qv.size() / (Lq * C);
  const std::int64_t d = C / heads;
  const Real sc = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(d)));
  auto probs = std::make_shared<Tensor>(Shape{B, heads, Lq, Lk});
  Tensor y(qv.shape());
  std::vector<Real> row(static_cast<std::size_t>(Lk));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < heads; ++h) {
      const Real* Q = qv.ptr() + b * Lq * C + h * d;
      const Real* K = kv.ptr() + b * Lk * C + h * d;
      const Real* V = vv.ptr() + b * Lk * C + h * d;
      Real* P = probs->ptr() + (b * heads + h) * Lq * Lk;
      Real* O = y.ptr() + b * Lq * C + h * d;
      for (std::int64_t i = 0; i < Lq; ++i) {
        Real mx = -std::numeric_limits<Real>::infinity();
        for (std::int64_t j = 0; j < Lk; ++j) {
          Real s;
          if (key_masked[static_cast<std::size_t>(j)]) {
            s = Real(-1e9);
          } else {
            s = 0;
            for (std::int64_t c = 0; c < d; ++c) s += Q[i * C + c] * K[j * C + c];
            s *= sc;
          }
          row[static_cast<std::size_t>(j)] = s;
          mx = std::max(mx, s);
        }
        double tot = 0;
        for (std::int64_t j = 0; j < Lk; ++j) {
          const Real e = std::exp(row[static_cast<std::size_t>(j)] - mx);
          P[i * Lk + j] = e;
          tot += e;
        }
        for (std::int64_t j = 0; j < Lk; ++j) P[i * Lk + j] = static_cast<Real>(P[i * Lk + j] / tot);
        for (std::int64_t j = 0; j < Lk; ++j) {
          const Real p = P[i * Lk + j];
          if (p == Real(0)) continue;
          for (std::int64_t c = 0; c < d; ++c) O[i * C + c] += p * V[j * C + c];
        }
      }
    }
  const int qi = q.id, ki = k.id, vi = v.id;
  return tape->record(std::move(y), {qi, ki, vi}, [=](Tape& t, int self) {
    const Tensor& g = *t.grad(self);
    const Tensor& qv = t.value(qi);
    const Tensor& kv = t.value(ki);
    const Tensor& vv = t.value(vi);
    Real* gq = t.requires_grad(qi) ? t.grad_buffer(qi).ptr() : nullptr;
    Real* gk = t.requires_grad(ki) ? t.grad_buffer(ki).ptr() : nullptr;
    Real* gv = t.requires_grad(vi) ? t.grad_buffer(vi).ptr() : nullptr;
    std::vector<Real> dS(static_cast<std::size_t>(Lk));
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t h = 0; h < heads; ++h) {
        const std::int64_t qoff = b * Lq * C + h * d;
        const std::int64_t koff = b * Lk * C + h * d;
        const Real* Q = qv.ptr() + qoff;
        const Real* K = kv.ptr() + koff;
        const Real* V = vv.ptr() + koff;
        const Real* G = g.ptr() + qoff;
        const Real* P = probs->ptr() + (b * heads + h) * Lq * Lk;
        for (std::int64_t i = 0; i < Lq; ++i) {
          double dot = 0;
          for (std::int64_t j = 0; j < Lk; ++j) {
            Real dp = 0;
            for (std::int64_t c = 0; c < d; ++c) dp += G[i * C + c] * V[j * C + c];
            dS[static_cast<std::size_t>(j)] = dp;
            dot += dp * P[i * Lk + j];
          }
          for (std::int64_t j = 0; j < Lk; ++j) {
            const Real p = P[i * Lk + j];
            const Real ds = static_cast<Real>(p * (dS[static_cast<std::size_t>(j)] - dot)) * sc;
            if (gv && p != Real(0))
              for (std::int64_t c = 0; c < d; ++c) gv[koff + j * C + c] += p * G[i * C + c];
            if (ds == Real(0)) continue;
            if (gq)
              for (std::int64_t c = 0; c < d; ++c) gq[qoff + i * C + c] += ds * K[j * C + c];
            if (gk)
              for (std::int64_t c = 0; c < d; ++c) gk[koff + j * C + c] += ds * Q[i * C + c];
          }
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Structural

Var reshape(Var x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  const int xi = x.id;
  return x.tape->record(std::move(y), {xi}, [xi](Tape& t, int self) {
    accumulate(t.grad_buffer(xi), *t.grad(self));
  });
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Tape* tape = parts[0].tape;
  const Shape& s0 = parts[0].shape();
  const int a = norm_axis(axis, static_cast<int>(s0.size()));
  Shape out = s0;
  out[static_cast<std::size_t>(a)] = 0;
  std::vector<int> ids;
  std::vector<std::int64_t> extents;
  for (const Var& p : parts) {
    same_tape(parts[0], p);
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i)
      if (static_cast<int>(i) != a && s[i] != s0[i]) ok = false;
    if (!ok) throw ShapeError("concat: " + shape_str(s) + " incompatible with " + shape_str(s0) + " on axis " + std::to_string(axis));
    out[static_cast<std::size_t>(a)] += s[static_cast<std::size_t>(a)];
    ids.push_back(p.id);
    extents.push_back(s[static_cast<std::size_t>(a)]);
  }
  const AxisSplit sp = split_axis(out, a);
  Tensor y(out);
  std::int64_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    const std::int64_t block = extents[k] * sp.inner;
    for (std::int64_t o = 0; o < sp.outer; ++o)
      std::copy_n(pv.ptr() + o * block, block, y.ptr() + o * sp.n * sp.inner + offset);
    offset += block;
  }
  return tape->record(std::move(y), ids, [ids, extents, sp](Tape& t, int self) {
    const Tensor& g = *t.grad(self);
    std::int64_t offset = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::int64_t block = extents[k] * sp.inner;
      if (t.requires_grad(ids[k])) {
        Real* gx = t.grad_buffer(ids[k]).ptr();
        for (std::int64_t o = 0; o < sp.outer; ++o) {
          const Real* src = g.ptr() + o * sp.n * sp.inner + offset;
          for (std::int64_t i = 0; i < block; ++i) gx[o * block + i] += src[i];
        }
      }
      offset += block;
    }
  });
}

Var slice(Var x, int axis, std::int64_t begin, std::int64_t end) {
  const Shape& s = x.shape();
  const int a = norm_axis(axis, static_cast<int>(s.size()));
  const std::int64_t n = s[static_cast<std::size_t>(a)];
  if (begin < 0 || end > n || begin > end) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for " + shape_str(s));
  }
  const AxisSplit sp = split_axis(s, a);
  Shape out = s;
  out[static_cast<std::size_t>(a)] = end - begin;
  Tensor y(out);
  const std::int64_t block = (end - begin) * sp.inner;
  const Tensor& xv = x.value();
  for (std::int64_t o = 0; o < sp.outer; ++o)
    std::copy_n(xv.ptr() + o * sp.n * sp.inner + begin * sp.inner, block, y.ptr() + o * block);
  const int xi = x.id;
  return x.tape->record(std::move(y), {xi}, [xi, sp, begin, block](Tape& t, int self) {
    const Tensor& g = *t.grad(self);
    Real* gx = t.grad_buffer(xi).ptr();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t i = 0; i < block; ++i) gx[o * sp.n * sp.inner + begin * sp.inner + i] += g[o * block + i];
  });
}

Var gather_rows(Var x, std::span<const std::int64_t> index) {
  const Tensor& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("gather_rows needs rank >= 2, got " + shape_str(xv.shape()));
  const std::int64_t L = xv.dim(-2), C = xv.dim(-1);
  const std::int64_t B = L * C == 0 ? 0 : xv.size() / (L * C);
  const std::int64_t m = static_cast<std::int64_t>(index.size());
  for (auto i : index)
    if (i < -1 || i >= L) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range for " + std::to_string(L) + " rows");
  Shape out = xv.shape();
  out[out.size() - 2] = m;
  Tensor y(out);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t r = 0; r < m; ++r) {
      const std::int64_t src = index[static_cast<std::size_t>(r)];
      if (src < 0) continue;
      std::copy_n(xv.ptr() + (b * L + src) * C, C, y.ptr() + (b * m + r) * C);
    }
  auto idx = std::make_shared<std::vector<std::int64_t>>(index.begin(), index.end());
  const int xi = x.id;
  return x.tape->record(std::move(y), {xi}, [xi, idx, B, L, C, m](Tape& t, int self) {
    const Tensor& g = *t.grad(self);
    Real* gx = t.grad_buffer(xi).ptr();
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t r = 0; r < m; ++r) {
        const std::int64_t src = (*idx)[static_cast<std::size_t>(r)];
        if (src < 0) continue;
        for (std::int64_t c = 0; c < C; ++c) gx[(b * L + src) * C + c] += g[(b * m + r) * C + c];
      }
  });
}

Var mean_rows(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("mean_rows needs rank >= 2, got " + shape_str(xv.shape()));
  const std::int64_t L = xv.dim(-2), C = xv.dim(-1);
  if (L < 1) throw ShapeError("mean_rows over zero rows");
  const std::int64_t B = xv.size() / (L * C);
  Shape out(xv.shape().begin(), xv.shape().end() - 2);
  out.push_back(C);
  Tensor y(out);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      double s = 0;
      for (std::int64_t l = 0; l < L; ++l) s += xv[(b * L + l) * C + c];
      y[b * C + c] = static_cast<Real>(s / static_cast<double>(L));
    }
  const int xi = x.id;
  return x.tape->record(std::move(y), {xi}, [xi, B, L, C](Tape& t, int self) {
    const Tensor& g = *t.grad(self);
    Real* gx = t.grad_buffer(xi).ptr();
    const Real inv = static_cast<Real>(1.0 / static_cast<double>(L));
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t l = 0; l < L; ++l)
        for (std::int64_t c = 0; c < C; ++c) gx[(b * L + l) * C + c] += g[b * C + c] * inv;
  });
}

Var masked_max_rows(Var x, std::span<const std::uint8_t> keep) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3) throw ShapeError("masked_max_rows expects [n, L, C], got " + shape_str(xv.shape()));
  const std::int64_t n = xv.dim(0), L = xv.dim(1), C = xv.dim(2);
  if (static_cast<std::int64_t>(keep.size()) != n * L) throw ShapeError("masked_max_rows: mask length mismatch");
  auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(n * C), -1);
  Tensor y(Shape{n, C});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      std::int64_t best = -1;
      for (std::int64_t l = 0; l < L; ++l) {
        if (!keep[static_cast<std::size_t>(b * L + l)]) continue;
        if (best < 0 || xv[(b * L + l) * C + c] > xv[(b * L + best) * C + c]) best = l;
      }
      if (best < 0) throw DataError("masked_max_rows: row group " + std::to_string(b) + " has no kept entries");
      (*arg)[static_cast<std::size_t>(b * C + c)] = best;
      y[b * C + c] = xv[(b * L + best) * C + c];
    }
  const int xi = x.id;
  return x.tape->record(std::move(y), {xi}, [xi, arg, n, L, C](Tape& t, int self) {
    const Tensor& g = *t.grad(self);
    Real* gx = t.grad_buffer(xi).ptr();
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t c = 0; c < C; ++c) gx[(b * L + (*arg)[static_cast<std::size_t>(b * C + c)]) * C + c] += g[b * C + c];
  });
}

Var sum(Var x) {
  const Tensor& xv = x.value();
  double s = 0;
  for (std::int64_t i = 0; i < xv.size(); ++i) s += xv[i];
  const int xi = x.id;
  return x.tape->record(Tensor::scalar(static_cast<Real>(s)), {xi}, [xi](Tape& t, int self) {
    const Real g = (*t.grad(self))[0];
    Tensor& gx = t.grad_buffer(xi);
    for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

Var mean(Var x) {
  const auto n = x.value().size();
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

}  // namespace fpeft
