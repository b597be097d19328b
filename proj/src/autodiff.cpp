#include "flag/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "flag/errors.hpp"

namespace flag::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;

thread_local bool g_grad_enabled = true;

std::shared_ptr<Node> make_result(Shape shape, std::vector<double> value,
                                  std::initializer_list<const Var*> inputs) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (!g_grad_enabled) return n;
  for (const Var* in : inputs) {
    if (in->requires_grad()) {
      n->requires_grad = true;
      n->parents.push_back(in->node());
    }
  }
  return n;
}

// Enumerates (out index, a index, b index) for a broadcast binary op.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
  std::size_t na = 0, nb = 0;
  enum class Kind { Same, ScalarA, ScalarB, SuffixB, SuffixA, General } kind = Kind::General;

  Broadcast(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    out.assign(r, 1);
    std::vector<std::size_t> da(r, 1), db(r, 1);
    for (std::size_t i = 0; i < a.size(); ++i) da[r - a.size() + i] = a[i];
    for (std::size_t i = 0; i < b.size(); ++i) db[r - b.size() + i] = b[i];
    for (std::size_t i = 0; i < r; ++i) {
      if (da[i] != db[i] && da[i] != 1 && db[i] != 1)
        throw ContractError("broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
      out[i] = std::max(da[i], db[i]);
    }
    na = numel(a);
    nb = numel(b);
    const std::size_t no = numel(out);
    stride_a.assign(r, 0);
    stride_b.assign(r, 0);
    std::size_t sa = 1, sb = 1;
    for (std::size_t i = r; i-- > 0;) {
      stride_a[i] = da[i] == 1 ? 0 : sa;
      stride_b[i] = db[i] == 1 ? 0 : sb;
      sa *= da[i];
      sb *= db[i];
    }
    if (na == no && nb == no)
      kind = Kind::Same;
    else if (na == 1 && nb == no)
      kind = Kind::ScalarA;
    else if (nb == 1 && na == no)
      kind = Kind::ScalarB;
    else if (na == no && is_suffix(db, out))
      kind = Kind::SuffixB;
    else if (nb == no && is_suffix(da, out))
      kind = Kind::SuffixA;
  }

  // True when `d` (right-aligned, padded with ones) equals a trailing block of `o`.
  static bool is_suffix(const std::vector<std::size_t>& d, const Shape& o) {
    std::size_t i = 0;
    while (i < d.size() && d[i] == 1) ++i;
    for (; i < d.size(); ++i)
      if (d[i] != o[i]) return false;
    return true;
  }

  template <typename F>
  void for_each(F&& f) const {
    const std::size_t no = numel(out);
    switch (kind) {
      case Kind::Same:
        for (std::size_t i = 0; i < no; ++i) f(i, i, i);
        return;
      case Kind::ScalarA:
        for (std::size_t i = 0; i < no; ++i) f(i, 0, i);
        return;
      case Kind::ScalarB:
        for (std::size_t i = 0; i < no; ++i) f(i, i, 0);
        return;
      case Kind::SuffixB:
        for (std::size_t i = 0; i < no; ++i) f(i, i, i % nb);
        return;
      case Kind::SuffixA:
        for (std::size_t i = 0; i < no; ++i) f(i, i % na, i);
        return;
      case Kind::General:
        break;
    }
    const std::size_t r = out.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < no; ++i) {
      f(i, ia, ib);
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        ia += stride_a[d];
        ib += stride_b[d];
        if (idx[d] < out[d]) break;
        ia -= stride_a[d] * out[d];
        ib -= stride_b[d] * out[d];
        idx[d] = 0;
      }
    }
  }
};

template <typename Fwd, typename Bwd>
Var binary(const Var& a, const Var& b, Fwd fwd, Bwd bwd) {
  Broadcast bc(a.shape(), b.shape());
  std::vector<double> out(numel(bc.out));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  bc.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(pa[ia], pb[ib]); });
  auto n = make_result(bc.out, std::move(out), {&a, &b});
  if (n->requires_grad) {
    auto an = a.node();
    auto bn = b.node();
    n->backward_fn = [an, bn, bc, bwd](Node& self) {
      const bool ga = an->requires_grad, gb = bn->requires_grad;
      if (ga) an->ensure_grad();
      if (gb) bn->ensure_grad();
      const double* va = an->value.data();
      const double* vb = bn->value.data();
      const double* g = self.grad.data();
      double* da = ga ? an->grad.data() : nullptr;
      double* db = gb ? bn->grad.data() : nullptr;
      bc.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) {
        double dfa = 0, dfb = 0;
        bwd(va[ia], vb[ib], dfa, dfb);
        if (da) da[ia] += g[i] * dfa;
        if (db) db[ib] += g[i] * dfb;
      });
    };
  }
  return Var(n);
}

template <typename Fwd, typename Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  std::vector<double> out(a.size());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  auto n = make_result(a.shape(), std::move(out), {&a});
  if (n->requires_grad) {
    auto an = a.node();
    n->backward_fn = [an, deriv](Node& self) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.value.size(); ++i)
        an->grad[i] += self.grad[i] * deriv(an->value[i], self.value[i]);
    };
  }
  return Var(n);
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

Var Var::constant(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size())
    throw ContractError("constant: " + std::to_string(values.size()) + " values for shape " +
                        shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  return Var(n);
}

Var Var::constant(Shape shape, double fill) {
  const std::size_t k = numel(shape);
  return constant(std::move(shape), std::vector<double>(k, fill));
}

Var Var::parameter(Shape shape, std::vector<double> values) {
  Var v = constant(std::move(shape), std::move(values));
  v.node_->requires_grad = true;
  return v;
}

double Var::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

void backward(const Var& root) {
  if (root.size() != 1) throw ContractError("backward() needs a scalar root");
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  Node* r = root.node().get();
  r->ensure_grad();
  r->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

Var add(const Var& a, const Var& b) {
  return binary(
      a, b, [](double x, double y) { return x + y; },
      [](double, double, double& da, double& db) {
        da = 1;
        db = 1;
      });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      a, b, [](double x, double y) { return x - y; },
      [](double, double, double& da, double& db) {
        da = 1;
        db = -1;
      });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double& da, double& db) {
        da = y;
        db = x;
      });
}

Var div(const Var& a, const Var& b) {
  return binary(
      a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double& da, double& db) {
        da = 1.0 / y;
        db = -x / (y * y);
      });
}

Var add_scalar(const Var& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var mul_scalar(const Var& a, double c) {
  return unary(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2 * x; });
}

Var sqrt(const Var& a) {
  return unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var abs(const Var& a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var gelu(const Var& a) {
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Var silu(const Var& a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Var matmul(const Var& a, const Var& w) {
  if (w.rank() != 2 || a.rank() < 1 || a.shape().back() != w.dim(0))
    throw ContractError("matmul: " + shape_str(a.shape()) + " x " + shape_str(w.shape()));
  const std::size_t k = w.dim(0), m = w.dim(1), rows = a.size() / k;
  Shape os = a.shape();
  os.back() = m;
  std::vector<double> out(rows * m);
  MapM(out.data(), rows, m).noalias() = MapC(a.data().data(), rows, k) * MapC(w.data().data(), k, m);
  auto n = make_result(std::move(os), std::move(out), {&a, &w});
  if (n->requires_grad) {
    auto an = a.node();
    auto wn = w.node();
    n->backward_fn = [an, wn, rows, k, m](Node& self) {
      MapC g(self.grad.data(), rows, m);
      if (an->requires_grad) {
        an->ensure_grad();
        MapM(an->grad.data(), rows, k).noalias() += g * MapC(wn->value.data(), k, m).transpose();
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        MapM(wn->grad.data(), k, m).noalias() += MapC(an->value.data(), rows, k).transpose() * g;
      }
    };
  }
  return Var(n);
}

Var bmm(const Var& a, const Var& b) {
  if (a.rank() < 2 || b.rank() != a.rank())
    throw ContractError("bmm rank: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t r = a.rank();
  for (std::size_t i = 0; i + 2 < r; ++i)
    if (a.dim(i) != b.dim(i)) throw ContractError("bmm batch dims differ");
  const std::size_t n_ = a.dim(r - 2), k = a.dim(r - 1), m = b.dim(r - 1);
  if (b.dim(r - 2) != k)
    throw ContractError("bmm inner: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t batch = a.size() / (n_ * k);
  Shape os = a.shape();
  os.back() = m;
  std::vector<double> out(batch * n_ * m);
  for (std::size_t i = 0; i < batch; ++i)
    MapM(out.data() + i * n_ * m, n_, m).noalias() =
        MapC(a.data().data() + i * n_ * k, n_, k) * MapC(b.data().data() + i * k * m, k, m);
  auto nd = make_result(std::move(os), std::move(out), {&a, &b});
  if (nd->requires_grad) {
    auto an = a.node();
    auto bn = b.node();
    nd->backward_fn = [an, bn, batch, n_, k, m](Node& self) {
      if (an->requires_grad) an->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (std::size_t i = 0; i < batch; ++i) {
        MapC g(self.grad.data() + i * n_ * m, n_, m);
        if (an->requires_grad)
          MapM(an->grad.data() + i * n_ * k, n_, k).noalias() +=
              g * MapC(bn->value.data() + i * k * m, k, m).transpose();
        if (bn->requires_grad)
          MapM(bn->grad.data() + i * k * m, k, m).noalias() +=
              MapC(an->value.data() + i * n_ * k, n_, k).transpose() * g;
      }
    };
  }
  return Var(nd);
}

Var permute(const Var& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.rank();
  if (axes.size() != r) throw ContractError("permute: axes/rank mismatch");
  Shape os(r);
  std::vector<std::size_t> in_stride(r), src_stride(r);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_stride[i] = s;
    s *= a.dim(i);
  }
  for (std::size_t i = 0; i < r; ++i) {
    if (axes[i] >= r) throw ContractError("permute: bad axis");
    os[i] = a.dim(axes[i]);
    src_stride[i] = in_stride[axes[i]];
  }
  const std::size_t total = a.size();
  // src[i] = input offset for output element i
  std::vector<std::size_t> src(total);
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < total; ++i) {
      src[i] = off;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        off += src_stride[d];
        if (idx[d] < os[d]) break;
        off -= src_stride[d] * os[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<double> out(total);
  const auto in = a.data();
  for (std::size_t i = 0; i < total; ++i) out[i] = in[src[i]];
  auto n = make_result(std::move(os), std::move(out), {&a});
  if (n->requires_grad) {
    auto an = a.node();
    n->backward_fn = [an, src = std::move(src)](Node& self) {
      an->ensure_grad();
      for (std::size_t i = 0; i < src.size(); ++i) an->grad[src[i]] += self.grad[i];
    };
  }
  return Var(n);
}

Var transpose_last2(const Var& a) {
  if (a.rank() < 2) throw ContractError("transpose_last2 needs rank >= 2");
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[a.rank() - 1], axes[a.rank() - 2]);
  return permute(a, axes);
}

Var reshape(const Var& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ContractError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  auto n = make_result(std::move(shape), std::move(out), {&a});
  if (n->requires_grad) {
    auto an = a.node();
    n->backward_fn = [an](Node& self) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    };
  }
  return Var(n);
}

Var sum_all(const Var& a) {
  double s = 0;
  for (double v : a.data()) s += v;
  auto n = make_result(Shape{1}, {s}, {&a});
  if (n->requires_grad) {
    auto an = a.node();
    n->backward_fn = [an](Node& self) {
      an->ensure_grad();
      for (double& g : an->grad) g += self.grad[0];
    };
  }
  return Var(n);
}

Var mean_all(const Var& a) { return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.size())); }

namespace {
Var reduce_last(const Var& a, double scale) {
  const std::size_t k = a.shape().back(), rows = a.size() / k;
  Shape os = a.shape();
  os.back() = 1;
  std::vector<double> out(rows, 0.0);
  const auto in = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) s += in[r * k + j];
    out[r] = s * scale;
  }
  auto n = make_result(std::move(os), std::move(out), {&a});
  if (n->requires_grad) {
    auto an = a.node();
    n->backward_fn = [an, k, rows, scale](Node& self) {
      an->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < k; ++j) an->grad[r * k + j] += self.grad[r] * scale;
    };
  }
  return Var(n);
}
}  // namespace

Var sum_last(const Var& a) { return reduce_last(a, 1.0); }
Var mean_last(const Var& a) { return reduce_last(a, 1.0 / static_cast<double>(a.shape().back())); }

Var mean_axis(const Var& a, std::size_t axis) {
  if (axis >= a.rank()) throw ContractError("mean_axis: bad axis");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t len = a.dim(axis);
  Shape os;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != axis) os.push_back(a.dim(i));
  if (os.empty()) os.push_back(1);
  const double scale = 1.0 / static_cast<double>(len);
  std::vector<double> out(outer * inner, 0.0);
  const auto in = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += in[(o * len + l) * inner + i] * scale;
  auto n = make_result(std::move(os), std::move(out), {&a});
  if (n->requires_grad) {
    auto an = a.node();
    n->backward_fn = [an, outer, inner, len, scale](Node& self) {
      an->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t l = 0; l < len; ++l)
          for (std::size_t i = 0; i < inner; ++i)
            an->grad[(o * len + l) * inner + i] += self.grad[o * inner + i] * scale;
    };
  }
  return Var(n);
}

Var softmax_last(const Var& a) {
  const std::size_t k = a.shape().back(), rows = a.size() / k;
  std::vector<double> out(a.size());
  const auto in = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * k;
    double* y = out.data() + r * k;
    const double mx = *std::max_element(x, x + k);
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) s += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < k; ++j) y[j] /= s;
  }
  auto n = make_result(a.shape(), std::move(out), {&a});
  if (n->requires_grad) {
    auto an = a.node();
    n->backward_fn = [an, k, rows](Node& self) {
      an->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = self.value.data() + r * k;
        const double* g = self.grad.data() + r * k;
        double dot = 0;
        for (std::size_t j = 0; j < k; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < k; ++j) an->grad[r * k + j] += y[j] * (g[j] - dot);
      }
    };
  }
  return Var(n);
}

Var multihead_attention(const Var& q, const Var& k, const Var& v, std::size_t heads, double scale) {
  const std::size_t r = q.rank();
  if (r < 2 || k.rank() != r || v.rank() != r) throw ContractError("attention: rank mismatch");
  for (std::size_t i = 0; i + 2 < r; ++i)
    if (k.dim(i) != q.dim(i) || v.dim(i) != q.dim(i)) throw ContractError("attention: batch dims differ");
  const std::size_t lq = q.dim(r - 2), lk = k.dim(r - 2), d = q.dim(r - 1);
  if (k.dim(r - 1) != d || v.dim(r - 1) != d || v.dim(r - 2) != lk)
    throw ContractError("attention: " + shape_str(q.shape()) + " " + shape_str(k.shape()) + " " +
                        shape_str(v.shape()));
  if (heads == 0 || d % heads != 0) throw ContractError("attention: width not divisible by heads");
  const std::size_t dh = d / heads, batch = q.size() / (lq * d);
  using Stride = Eigen::OuterStride<>;
  using CMapS = Eigen::Map<const RowMat, 0, Stride>;
  using MapS = Eigen::Map<RowMat, 0, Stride>;

  std::vector<double> out(q.size());
  const bool keep = g_grad_enabled && (q.requires_grad() || k.requires_grad() || v.requires_grad());
  auto probs = std::make_shared<std::vector<double>>(keep ? batch * heads * lq * lk : lq * lk);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t oq = b * lq * d + h * dh, ok = b * lk * d + h * dh;
      MapM p(probs->data() + (keep ? (b * heads + h) * lq * lk : 0), lq, lk);
      p.noalias() = CMapS(q.data().data() + oq, lq, dh, Stride(d)) *
                    CMapS(k.data().data() + ok, lk, dh, Stride(d)).transpose();
      for (std::size_t i = 0; i < lq; ++i) {
        auto row = p.row(i);
        row *= scale;
        row.array() -= row.maxCoeff();
        row = row.array().exp();
        row /= row.sum();
      }
      MapS(out.data() + oq, lq, dh, Stride(d)).noalias() = p * CMapS(v.data().data() + ok, lk, dh, Stride(d));
    }
  auto n = make_result(q.shape(), std::move(out), {&q, &k, &v});
  if (n->requires_grad) {
    auto qn = q.node(), kn = k.node(), vn = v.node();
    n->backward_fn = [qn, kn, vn, probs, batch, heads, lq, lk, d, dh, scale](Node& self) {
      for (Node* x : {qn.get(), kn.get(), vn.get()})
        if (x->requires_grad) x->ensure_grad();
      RowMat dp(lq, lk);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t oq = b * lq * d + h * dh, ok = b * lk * d + h * dh;
          Eigen::Map<const RowMat> p(probs->data() + (b * heads + h) * lq * lk, lq, lk);
          CMapS g(self.grad.data() + oq, lq, dh, Stride(d));
          CMapS vv(vn->value.data() + ok, lk, dh, Stride(d));
          if (vn->requires_grad) MapS(vn->grad.data() + ok, lk, dh, Stride(d)).noalias() += p.transpose() * g;
          if (!qn->requires_grad && !kn->requires_grad) continue;
          dp.noalias() = g * vv.transpose();
          for (std::size_t i = 0; i < lq; ++i) {
            const double dot = dp.row(i).dot(p.row(i));
            dp.row(i) = (p.row(i).array() * (dp.row(i).array() - dot) * scale).matrix();
          }
          if (qn->requires_grad)
            MapS(qn->grad.data() + oq, lq, dh, Stride(d)).noalias() +=
                dp * CMapS(kn->value.data() + ok, lk, dh, Stride(d));
          if (kn->requires_grad)
            MapS(kn->grad.data() + ok, lk, dh, Stride(d)).noalias() +=
                dp.transpose() * CMapS(qn->value.data() + oq, lq, dh, Stride(d));
        }
    };
  }
  return Var(n);
}

Var layer_norm_last(const Var& a, double eps) {
  const std::size_t k = a.shape().back(), rows = a.size() / k;
  std::vector<double> out(a.size()), inv_std(rows);
  const auto in = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * k;
    double mu = 0;
    for (std::size_t j = 0; j < k; ++j) mu += x[j];
    mu /= static_cast<double>(k);
    double var = 0;
    for (std::size_t j = 0; j < k; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(k);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = (x[j] - mu) * inv_std[r];
  }
  auto n = make_result(a.shape(), std::move(out), {&a});
  if (n->requires_grad) {
    auto an = a.node();
    n->backward_fn = [an, k, rows, inv_std = std::move(inv_std)](Node& self) {
      an->ensure_grad();
      const double kk = static_cast<double>(k);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xh = self.value.data() + r * k;
        const double* g = self.grad.data() + r * k;
        double gm = 0, gx = 0;
        for (std::size_t j = 0; j < k; ++j) {
          gm += g[j];
          gx += g[j] * xh[j];
        }
        gm /= kk;
        gx /= kk;
        for (std::size_t j = 0; j < k; ++j)
          an->grad[r * k + j] += inv_std[r] * (g[j] - gm - xh[j] * gx);
      }
    };
  }
  return Var(n);
}

Var concat_last(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_last: no inputs");
  const Shape& s0 = parts[0].shape();
  const std::size_t rows = parts[0].size() / s0.back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.rank() != s0.size() || p.size() / p.shape().back() != rows)
      throw ContractError("concat_last: leading shapes differ");
    widths.push_back(p.shape().back());
    total += widths.back();
  }
  Shape os = s0;
  os.back() = total;
  std::vector<double> out(rows * total);
  std::size_t col = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto in = parts[p].data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(in.data() + r * widths[p], widths[p], out.data() + r * total + col);
    col += widths[p];
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(os);
  n->value = std::move(out);
  std::vector<std::shared_ptr<Node>> all;
  for (const Var& p : parts) {
    all.push_back(p.node());
    if (p.requires_grad()) {
      n->requires_grad = true;
      n->parents.push_back(p.node());
    }
  }
  if (n->requires_grad) {
    n->backward_fn = [all = std::move(all), widths, rows, total](Node& self) {
      std::size_t c = 0;
      for (std::size_t p = 0; p < all.size(); ++p) {
        if (all[p]->requires_grad) {
          all[p]->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < widths[p]; ++j)
              all[p]->grad[r * widths[p] + j] += self.grad[r * total + c + j];
        }
        c += widths[p];
      }
    };
  }
  return Var(n);
}

Var slice_last(const Var& a, std::size_t start, std::size_t len) {
  const std::size_t k = a.shape().back(), rows = a.size() / k;
  if (start + len > k) throw ContractError("slice_last out of range");
  Shape os = a.shape();
  os.back() = len;
  std::vector<double> out(rows * len);
  const auto in = a.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(in.data() + r * k + start, len, out.data() + r * len);
  auto n = make_result(std::move(os), std::move(out), {&a});
  if (n->requires_grad) {
    auto an = a.node();
    n->backward_fn = [an, k, rows, start, len](Node& self) {
      an->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < len; ++j) an->grad[r * k + start + j] += self.grad[r * len + j];
    };
  }
  return Var(n);
}

Var take_rows(const Var& a, const std::vector<std::size_t>& rows) {
  const std::size_t stride = a.size() / a.dim(0);
  Shape os = a.shape();
  os[0] = rows.size();
  std::vector<double> out(rows.size() * stride);
  const auto in = a.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= a.dim(0)) throw ContractError("take_rows: index out of range");
    std::copy_n(in.data() + rows[i] * stride, stride, out.data() + i * stride);
  }
  auto n = make_result(std::move(os), std::move(out), {&a});
  if (n->requires_grad) {
    auto an = a.node();
    n->backward_fn = [an, rows, stride](Node& self) {
      an->ensure_grad();
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < stride; ++j) an->grad[rows[i] * stride + j] += self.grad[i * stride + j];
    };
  }
  return Var(n);
}

}  // namespace flag::ad
