#include "cil/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "cil/error.hpp"

namespace cil {

namespace kernels {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMap = Eigen::Map<const RowMat>;
  const auto mi = static_cast<Eigen::Index>(m);
  const auto ni = static_cast<Eigen::Index>(n);
  const auto ki = static_cast<Eigen::Index>(k);
  Eigen::Map<RowMat> cm(c, mi, ni);
  if (!accumulate) cm.setZero();
  if (m == 0 || n == 0 || k == 0) return;
  ConstMap am(a, trans_a ? ki : mi, trans_a ? mi : ki);
  ConstMap bm(b, trans_b ? ni : ki, trans_b ? ki : ni);
  if (!trans_a && !trans_b) {
    cm.noalias() += am * bm;
  } else if (trans_a && !trans_b) {
    cm.noalias() += am.transpose() * bm;
  } else if (!trans_a && trans_b) {
    cm.noalias() += am * bm.transpose();
  } else {
    cm.noalias() += am.transpose() * bm.transpose();
  }
}

}  // namespace kernels

namespace {

Tape& same_tape(Var a, Var b, const char* op) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw ContractError(std::string(op) + ": operands must live on the same tape");
  }
  return a.tape();
}

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// Splits a shape around `axis` into (outer, n, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Output shape plus flat index maps from output elements to each operand.
// Empty map means the operand already has the output shape.
struct Broadcast {
  Shape out;
  std::vector<std::uint32_t> ia, ib;
};

std::shared_ptr<const Broadcast> broadcast(const Shape& sa, const Shape& sb, const char* op) {
  auto bc = std::make_shared<Broadcast>();
  const std::size_t rank = std::max(sa.size(), sb.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(sa.begin(), sa.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - sa.size()));
  std::copy(sb.begin(), sb.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - sb.size()));
  bc->out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] == pb[i] || pb[i] == 1) {
      bc->out[i] = pa[i];
    } else if (pa[i] == 1) {
      bc->out[i] = pb[i];
    } else {
      throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(sa) + " with " +
                           to_string(sb));
    }
  }
  const std::size_t total = numel(bc->out);
  auto build = [&](const Shape& padded, const Shape& orig, std::vector<std::uint32_t>& map) {
    if (orig == bc->out) return;
    auto st = strides_of(padded);
    for (std::size_t i = 0; i < rank; ++i)
      if (padded[i] == 1) st[i] = 0;
    map.resize(total);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t flat = 0; flat < total; ++flat) {
      map[flat] = static_cast<std::uint32_t>(off);
      for (std::size_t d = rank; d-- > 0;) {
        ++idx[d];
        off += st[d];
        if (idx[d] < bc->out[d]) break;
        off -= st[d] * idx[d];
        idx[d] = 0;
      }
    }
  };
  build(pa, sa, bc->ia);
  build(pb, sb, bc->ib);
  return bc;
}

// Elementwise binary op. `da`/`db` give the local partials given (x, y, out).
template <class Fwd, class Da, class Db>
Var binary(Var a, Var b, const char* name, Fwd fwd, Da da, Db db) {
  Tape& tape = same_tape(a, b, name);
  auto bc = broadcast(a.shape(), b.shape(), name);
  const auto& av = a.value().storage();
  const auto& bv = b.value().storage();
  Tensor out(bc->out);
  auto& ov = out.storage();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const std::size_t ja = bc->ia.empty() ? i : bc->ia[i];
    const std::size_t jb = bc->ib.empty() ? i : bc->ib[i];
    ov[i] = fwd(av[ja], bv[jb]);
  }
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [bc, ia, ib, da, db](Tape& t, std::uint32_t self) {
    const auto& x = t.value(ia).storage();
    const auto& y = t.value(ib).storage();
    const auto& o = t.value(self).storage();
    auto g = t.grad(self);
    if (t.requires_grad(ia)) {
      auto ga = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t ja = bc->ia.empty() ? i : bc->ia[i];
        const std::size_t jb = bc->ib.empty() ? i : bc->ib[i];
        ga[ja] += g[i] * da(x[ja], y[jb], o[i]);
      }
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t ja = bc->ia.empty() ? i : bc->ia[i];
        const std::size_t jb = bc->ib.empty() ? i : bc->ib[i];
        gb[jb] += g[i] * db(x[ja], y[jb], o[i]);
      }
    }
  });
}

// Elementwise unary op with local derivative d(x, out).
template <class Fwd, class D>
Var unary(Var x, Fwd fwd, D d) {
  Tape& tape = x.tape();
  Tensor out(x.shape());
  const auto& xv = x.value().storage();
  auto& ov = out.storage();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(xv[i]);
  const auto ix = x.id();
  return tape.record(std::move(out), {ix}, [ix, d](Tape& t, std::uint32_t self) {
    const auto& xv = t.value(ix).storage();
    const auto& ov = t.value(self).storage();
    auto g = t.grad(self);
    auto gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * d(xv[i], ov[i]);
  });
}

Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape out = s;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return out;
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Var div(Var a, Var b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Var add_scalar(Var x, double c) {
  return unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Var mul_scalar(Var x, double c) {
  return unary(x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Var neg(Var x) { return mul_scalar(x, -1.0); }

Var exp(Var x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double o) { return o; });
}

Var log(Var x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var relu(Var x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Var x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [=](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * std::exp(-0.5 * v * v) * inv_sqrt_2pi;
      });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const auto ix = x.id();
  return x.tape().record(Tensor::scalar(s), {ix}, [ix](Tape& t, std::uint32_t self) {
    const double g = t.grad(self)[0];
    for (double& v : t.grad(ix)) v += g;
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(std::max<std::size_t>(x.size(), 1));
  return mul_scalar(sum(x), 1.0 / n);
}

Var sum(Var x, int axis, bool keepdim) {
  const auto ax = normalize_axis(axis, x.shape().size(), "sum");
  const auto sp = split_at(x.shape(), ax);
  Tensor out(reduced_shape(x.shape(), ax, keepdim));
  const auto& xv = x.value().storage();
  auto& ov = out.storage();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i)
        ov[o * sp.inner + i] += xv[(o * sp.n + k) * sp.inner + i];
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, sp](Tape& t, std::uint32_t self) {
    auto g = t.grad(self);
    auto gx = t.grad(ix);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.n; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i)
          gx[(o * sp.n + k) * sp.inner + i] += g[o * sp.inner + i];
  });
}

Var mean(Var x, int axis, bool keepdim) {
  const auto ax = normalize_axis(axis, x.shape().size(), "mean");
  return mul_scalar(sum(x, axis, keepdim), 1.0 / static_cast<double>(x.shape()[ax]));
}

Var max(Var x, int axis, bool keepdim) {
  const auto ax = normalize_axis(axis, x.shape().size(), "max");
  const auto sp = split_at(x.shape(), ax);
  if (sp.n == 0) throw DimensionError("max over an empty axis");
  Tensor out(reduced_shape(x.shape(), ax, keepdim));
  auto arg = std::make_shared<std::vector<std::uint32_t>>(out.size());
  const auto& xv = x.value().storage();
  auto& ov = out.storage();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = o * sp.n * sp.inner + i;
      for (std::size_t k = 1; k < sp.n; ++k) {
        const std::size_t j = (o * sp.n + k) * sp.inner + i;
        if (xv[j] > xv[best]) best = j;
      }
      ov[o * sp.inner + i] = xv[best];
      (*arg)[o * sp.inner + i] = static_cast<std::uint32_t>(best);
    }
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, arg](Tape& t, std::uint32_t self) {
    auto g = t.grad(self);
    auto gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*arg)[i]] += g[i];
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix](Tape& t, std::uint32_t self) {
    auto g = t.grad(self);
    auto gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var permute(Var x, std::vector<std::size_t> axes) {
  const Shape& in = x.shape();
  const std::size_t rank = in.size();
  if (axes.size() != rank) throw DimensionError("permute: axes rank mismatch for " + to_string(in));
  std::vector<bool> seen(rank, false);
  for (auto a : axes) {
    if (a >= rank || seen[a]) throw DimensionError("permute: invalid axes for " + to_string(in));
    seen[a] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in[axes[i]];
  const auto in_st = strides_of(in);
  std::vector<std::size_t> st(rank);
  for (std::size_t i = 0; i < rank; ++i) st[i] = in_st[axes[i]];

  const std::size_t total = numel(out_shape);
  auto map = std::make_shared<std::vector<std::uint32_t>>(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    (*map)[flat] = static_cast<std::uint32_t>(off);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      off += st[d];
      if (idx[d] < out_shape[d]) break;
      off -= st[d] * idx[d];
      idx[d] = 0;
    }
  }
  Tensor out(out_shape);
  const auto& xv = x.value().storage();
  auto& ov = out.storage();
  for (std::size_t i = 0; i < total; ++i) ov[i] = xv[(*map)[i]];
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, map](Tape& t, std::uint32_t self) {
    auto g = t.grad(self);
    auto gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*map)[i]] += g[i];
  });
}

Var transpose(Var x, std::size_t axis0, std::size_t axis1) {
  std::vector<std::size_t> axes(x.shape().size());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  if (axis0 >= axes.size() || axis1 >= axes.size())
    throw DimensionError("transpose: axis out of range for " + to_string(x.shape()));
  std::swap(axes[axis0], axes[axis1]);
  return permute(x, std::move(axes));
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  Tape& tape = parts[0].tape();
  const Shape& first = parts[0].shape();
  const auto ax = normalize_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[ax] = 0;
  std::vector<std::uint32_t> ids;
  auto lengths = std::make_shared<std::vector<std::size_t>>();
  for (const Var& p : parts) {
    same_tape(parts[0], p, "concat");
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == first[i];
    if (!ok) throw DimensionError("concat: " + to_string(first) + " vs " + to_string(s));
    out_shape[ax] += s[ax];
    lengths->push_back(s[ax]);
    ids.push_back(p.id());
  }
  const auto sp = split_at(out_shape, ax);
  Tensor out(out_shape);
  auto& ov = out.storage();
  std::size_t base = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& pv = parts[p].value().storage();
    const std::size_t len = (*lengths)[p];
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * len * sp.inner), len * sp.inner,
                  ov.begin() + static_cast<std::ptrdiff_t>((o * sp.n + base) * sp.inner));
    base += len;
  }
  return tape.record(std::move(out), ids, [ids, lengths, sp](Tape& t, std::uint32_t self) {
    auto g = t.grad(self);
    std::size_t base = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t len = (*lengths)[p];
      if (t.requires_grad(ids[p])) {
        auto gp = t.grad(ids[p]);
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t k = 0; k < len * sp.inner; ++k)
            gp[o * len * sp.inner + k] += g[(o * sp.n + base) * sp.inner + k];
      }
      base += len;
    }
  });
}

Var slice(Var x, int axis, std::size_t start, std::size_t length) {
  const auto ax = normalize_axis(axis, x.shape().size(), "slice");
  const auto sp = split_at(x.shape(), ax);
  if (start + length > sp.n) {
    throw DimensionError("slice [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") exceeds axis of " +
                         to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  Tensor out(out_shape);
  const auto& xv = x.value().storage();
  auto& ov = out.storage();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * sp.n + start) * sp.inner),
                length * sp.inner,
                ov.begin() + static_cast<std::ptrdiff_t>(o * length * sp.inner));
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [=](Tape& t, std::uint32_t self) {
    auto g = t.grad(self);
    auto gx = t.grad(ix);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < length * sp.inner; ++k)
        gx[(o * sp.n + start) * sp.inner + k] += g[o * length * sp.inner + k];
  });
}

Var matmul(Var a, Var b) {
  Tape& tape = same_tape(a, b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.empty() || sb.size() != 2 || sa.back() != sb[0]) {
    throw DimensionError("matmul: inner dimensions differ for " + to_string(sa) + " x " +
                         to_string(sb));
  }
  const std::size_t k = sb[0], n = sb[1];
  const std::size_t m = k == 0 ? 0 : a.size() / k;
  Shape out_shape = sa;
  out_shape.back() = n;
  Tensor out(out_shape);
  kernels::gemm(false, false, m, n, k, a.value().storage().data(), b.value().storage().data(),
                out.storage().data(), false);
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [=](Tape& t, std::uint32_t self) {
    const double* g = t.grad(self).data();
    if (t.requires_grad(ia))
      kernels::gemm(false, true, m, k, n, g, t.value(ib).storage().data(), t.grad(ia).data(), true);
    if (t.requires_grad(ib))
      kernels::gemm(true, false, k, n, m, t.value(ia).storage().data(), g, t.grad(ib).data(), true);
  });
}

Var bmm(Var a, Var b) {
  Tape& tape = same_tape(a, b, "bmm");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1]) {
    throw DimensionError("bmm: incompatible shapes " + to_string(sa) + " x " + to_string(sb));
  }
  const std::size_t batch = sa[0], m = sa[1], k = sa[2], n = sb[2];
  Tensor out(Shape{batch, m, n});
  const double* av = a.value().storage().data();
  const double* bv = b.value().storage().data();
  double* ov = out.storage().data();
  for (std::size_t i = 0; i < batch; ++i)
    kernels::gemm(false, false, m, n, k, av + i * m * k, bv + i * k * n, ov + i * m * n, false);
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [=](Tape& t, std::uint32_t self) {
    const double* g = t.grad(self).data();
    const double* av = t.value(ia).storage().data();
    const double* bv = t.value(ib).storage().data();
    if (t.requires_grad(ia)) {
      double* ga = t.grad(ia).data();
      for (std::size_t i = 0; i < batch; ++i)
        kernels::gemm(false, true, m, k, n, g + i * m * n, bv + i * k * n, ga + i * m * k, true);
    }
    if (t.requires_grad(ib)) {
      double* gb = t.grad(ib).data();
      for (std::size_t i = 0; i < batch; ++i)
        kernels::gemm(true, false, k, n, m, av + i * m * k, g + i * m * n, gb + i * k * n, true);
    }
  });
}

Var conv2d(Var x, Var kernel, std::size_t stride, std::size_t padding) {
  Tape& tape = same_tape(x, kernel, "conv2d");
  const Shape& sx = x.shape();
  const Shape& sk = kernel.shape();
  if (sx.size() != 4 || sk.size() != 4 || sx[1] != sk[1]) {
    throw DimensionError("conv2d: incompatible input " + to_string(sx) + " and kernel " +
                         to_string(sk));
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  const std::size_t b = sx[0], cin = sx[1], h = sx[2], w = sx[3];
  const std::size_t cout = sk[0], kh = sk[2], kw = sk[3];
  if (kh > h + 2 * padding || kw > w + 2 * padding || kh == 0 || kw == 0) {
    throw DimensionError("conv2d: non-positive output size for input " + to_string(sx) +
                         " kernel " + to_string(sk) + " padding " + std::to_string(padding));
  }
  const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::size_t wo = (w + 2 * padding - kw) / stride + 1;
  const std::size_t rows = cin * kh * kw, cols = ho * wo;

  // im2col per sample; kept for the kernel gradient.
  auto col = std::make_shared<std::vector<double>>(b * rows * cols, 0.0);
  const auto& xv = x.value().storage();
  for (std::size_t bi = 0; bi < b; ++bi) {
    double* cb = col->data() + bi * rows * cols;
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t i = 0; i < kh; ++i)
        for (std::size_t j = 0; j < kw; ++j) {
          double* dst = cb + ((c * kh + i) * kw + j) * cols;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + i) -
                            static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride + j) -
                              static_cast<std::ptrdiff_t>(padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              dst[oy * wo + ox] =
                  xv[((bi * cin + c) * h + static_cast<std::size_t>(iy)) * w +
                     static_cast<std::size_t>(ix)];
            }
          }
        }
  }
  Tensor out(Shape{b, cout, ho, wo});
  const double* kv = kernel.value().storage().data();
  for (std::size_t bi = 0; bi < b; ++bi)
    kernels::gemm(false, false, cout, cols, rows, kv, col->data() + bi * rows * cols,
                  out.storage().data() + bi * cout * cols, false);

  const auto ixd = x.id(), ikd = kernel.id();
  return tape.record(std::move(out), {ixd, ikd}, [=](Tape& t, std::uint32_t self) {
    const double* g = t.grad(self).data();
    if (t.requires_grad(ikd)) {
      double* gk = t.grad(ikd).data();
      for (std::size_t bi = 0; bi < b; ++bi)
        kernels::gemm(false, true, cout, rows, cols, g + bi * cout * cols,
                      col->data() + bi * rows * cols, gk, true);
    }
    if (t.requires_grad(ixd)) {
      auto gx = t.grad(ixd);
      const double* kv = t.value(ikd).storage().data();
      std::vector<double> dcol(rows * cols);
      for (std::size_t bi = 0; bi < b; ++bi) {
        kernels::gemm(true, false, rows, cols, cout, kv, g + bi * cout * cols, dcol.data(), false);
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t i = 0; i < kh; ++i)
            for (std::size_t j = 0; j < kw; ++j) {
              const double* src = dcol.data() + ((c * kh + i) * kw + j) * cols;
              for (std::size_t oy = 0; oy < ho; ++oy) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * stride + i) -
                                static_cast<std::ptrdiff_t>(padding);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t ox = 0; ox < wo; ++ox) {
                  const auto ix = static_cast<std::ptrdiff_t>(ox * stride + j) -
                                  static_cast<std::ptrdiff_t>(padding);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                  gx[((bi * cin + c) * h + static_cast<std::size_t>(iy)) * w +
                     static_cast<std::size_t>(ix)] += src[oy * wo + ox];
                }
              }
            }
      }
    }
  });
}

Var softmax(Var x, int axis) {
  const auto ax = normalize_axis(axis, x.shape().size(), "softmax");
  const auto sp = split_at(x.shape(), ax);
  Tensor out(x.shape());
  const auto& xv = x.value().storage();
  auto& ov = out.storage();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, xv[base + k * sp.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const double e = std::exp(xv[base + k * sp.inner] - mx);
        ov[base + k * sp.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < sp.n; ++k) ov[base + k * sp.inner] /= z;
    }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, sp](Tape& t, std::uint32_t self) {
    const auto& y = t.value(self).storage();
    auto g = t.grad(self);
    auto gx = t.grad(ix);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < sp.n; ++k)
          dot += g[base + k * sp.inner] * y[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t j = base + k * sp.inner;
          gx[j] += y[j] * (g[j] - dot);
        }
      }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& tape = same_tape(x, gain, "layer_norm");
  same_tape(x, bias, "layer_norm");
  const Shape& s = x.shape();
  if (s.empty() || s.back() == 0) throw DimensionError("layer_norm on empty trailing dim");
  const std::size_t d = s.back();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(d) + " entries");
  }
  const std::size_t rows = x.size() / d;
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  Tensor out(s);
  const auto& xv = x.value().storage();
  const auto& gv = gain.value().storage();
  const auto& bv = bias.value().storage();
  auto& ov = out.storage();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mu) * rs;
      (*xhat)[r * d + j] = xh;
      ov[r * d + j] = xh * gv[j] + bv[j];
    }
  }
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return tape.record(std::move(out), {ix, ig, ib}, [=](Tape& t, std::uint32_t self) {
    auto g = t.grad(self);
    const auto& gv = t.value(ig).storage();
    if (t.requires_grad(ig)) {
      auto gg = t.grad(ig);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * (*xhat)[r * d + j];
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad(ib);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
    }
    if (t.requires_grad(ix)) {
      auto gx = t.grad(ix);
      std::vector<double> dxh(d);
      for (std::size_t r = 0; r < rows; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          dxh[j] = g[r * d + j] * gv[j];
          m1 += dxh[j];
          m2 += dxh[j] * (*xhat)[r * d + j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j)
          gx[r * d + j] += (*rstd)[r] * (dxh[j] - m1 - (*xhat)[r * d + j] * m2);
      }
    }
  });
}

void update_running_stats(Tensor& running_mean, Tensor& running_var, const BatchStats& observed,
                          double momentum) {
  if (observed.mean.size() != running_mean.size() || observed.var.size() != running_var.size())
    throw DimensionError("update_running_stats: channel count mismatch");
  for (std::size_t c = 0; c < running_mean.size(); ++c) {
    running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * observed.mean[c];
    running_var[c] = (1.0 - momentum) * running_var[c] + momentum * observed.var[c];
  }
}

Var batch_norm(Var x, Var gain, Var bias, const Tensor& running_mean, const Tensor& running_var,
               BatchNormMode mode, BatchStats* observed, double eps) {
  Tape& tape = same_tape(x, gain, "batch_norm");
  same_tape(x, bias, "batch_norm");
  const Shape& s = x.shape();
  if (s.size() < 2) throw DimensionError("batch_norm needs [b, c, ...], got " + to_string(s));
  const std::size_t b = s[0], c = s[1];
  const std::size_t spatial = x.size() / std::max<std::size_t>(b * c, 1);
  if (gain.size() != c || bias.size() != c || running_mean.size() != c ||
      running_var.size() != c) {
    throw DimensionError("batch_norm: per-channel tensors must have " + std::to_string(c) +
                         " entries");
  }
  const std::size_t m = b * spatial;
  const bool train = mode == BatchNormMode::train;
  if (train && m < 2) throw DimensionError("batch_norm train mode needs more than one value per channel");

  if (observed && train) {
    observed->mean.assign(c, 0.0);
    observed->var.assign(c, 0.0);
  }
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto rstd = std::make_shared<std::vector<double>>(c);
  Tensor out(s);
  const auto& xv = x.value().storage();
  const auto& gv = gain.value().storage();
  const auto& bv = bias.value().storage();
  auto& ov = out.storage();
  auto at = [&](std::size_t bi, std::size_t ch, std::size_t p) {
    return (bi * c + ch) * spatial + p;
  };
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (train) {
      mu = 0.0;
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t p = 0; p < spatial; ++p) mu += xv[at(bi, ch, p)];
      mu /= static_cast<double>(m);
      var = 0.0;
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t p = 0; p < spatial; ++p) {
          const double dlt = xv[at(bi, ch, p)] - mu;
          var += dlt * dlt;
        }
      var /= static_cast<double>(m);
      if (observed) {
        observed->mean[ch] = mu;
        observed->var[ch] = var * static_cast<double>(m) / static_cast<double>(m - 1);
      }
    } else {
      mu = running_mean[ch];
      var = running_var[ch];
    }
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[ch] = rs;
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t p = 0; p < spatial; ++p) {
        const std::size_t j = at(bi, ch, p);
        const double xh = (xv[j] - mu) * rs;
        (*xhat)[j] = xh;
        ov[j] = xh * gv[ch] + bv[ch];
      }
  }
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return tape.record(std::move(out), {ix, ig, ib}, [=](Tape& t, std::uint32_t self) {
    auto g = t.grad(self);
    const auto& gv = t.value(ig).storage();
    auto at = [&](std::size_t bi, std::size_t ch, std::size_t p) {
      return (bi * c + ch) * spatial + p;
    };
    const bool need_g = t.requires_grad(ig), need_b = t.requires_grad(ib),
               need_x = t.requires_grad(ix);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sg = 0.0, sgx = 0.0;
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t p = 0; p < spatial; ++p) {
          const std::size_t j = at(bi, ch, p);
          sg += g[j];
          sgx += g[j] * (*xhat)[j];
        }
      if (need_g) t.grad(ig)[ch] += sgx;
      if (need_b) t.grad(ib)[ch] += sg;
      if (!need_x) continue;
      auto gx = t.grad(ix);
      const double scale = gv[ch] * (*rstd)[ch];
      if (train) {
        const double m1 = sg / static_cast<double>(m), m2 = sgx / static_cast<double>(m);
        for (std::size_t bi = 0; bi < b; ++bi)
          for (std::size_t p = 0; p < spatial; ++p) {
            const std::size_t j = at(bi, ch, p);
            gx[j] += scale * (g[j] - m1 - (*xhat)[j] * m2);
          }
      } else {
        for (std::size_t bi = 0; bi < b; ++bi)
          for (std::size_t p = 0; p < spatial; ++p) gx[at(bi, ch, p)] += scale * g[at(bi, ch, p)];
      }
    }
  });
}

Var l2_normalize(Var x, int axis, double eps) {
  const auto ax = normalize_axis(axis, x.shape().size(), "l2_normalize");
  const auto sp = split_at(x.shape(), ax);
  auto norms = std::make_shared<std::vector<double>>(sp.outer * sp.inner);
  Tensor out(x.shape());
  const auto& xv = x.value().storage();
  auto& ov = out.storage();
  std::size_t guarded = 0;
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double ss = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) ss += xv[base + k * sp.inner] * xv[base + k * sp.inner];
      double nrm = std::sqrt(ss);
      if (nrm <= eps) {
        ++guarded;
        nrm = -eps;  // negative marks a guarded row
      }
      (*norms)[o * sp.inner + i] = nrm;
      const double denom = std::abs(nrm);
      for (std::size_t k = 0; k < sp.n; ++k)
        ov[base + k * sp.inner] = xv[base + k * sp.inner] / denom;
    }
  x.tape().diagnostics().guarded_normalizations += guarded;
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, sp, norms](Tape& t, std::uint32_t self) {
    const auto& y = t.value(self).storage();
    auto g = t.grad(self);
    auto gx = t.grad(ix);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        const double nrm = (*norms)[o * sp.inner + i];
        if (nrm < 0.0) {
          for (std::size_t k = 0; k < sp.n; ++k)
            gx[base + k * sp.inner] += g[base + k * sp.inner] / -nrm;
          continue;
        }
        double dot = 0.0;
        for (std::size_t k = 0; k < sp.n; ++k)
          dot += g[base + k * sp.inner] * y[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t j = base + k * sp.inner;
          gx[j] += (g[j] - y[j] * dot) / nrm;
        }
      }
  });
}

}  // namespace cil
