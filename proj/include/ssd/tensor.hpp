#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ssd/errors.hpp"
#include "ssd/kernels.hpp"
#include "ssd/parallel.hpp"

namespace ssd {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <typename S>
class TapeT;

// Dense row-major tensor. Handles share storage (copy = alias); use clone()
// for a deep copy. Gradients live beside the values and are populated by
// TapeT<S>::backward.
template <typename S>
class TensorT {
 public:
  using scalar_type = S;

  TensorT() = default;

  static TensorT zeros(Shape shape) {
    TensorT t;
    auto n = shape_numel(shape);
    t.st_ = std::make_shared<Storage>();
    t.st_->shape = std::move(shape);
    t.st_->v.assign(static_cast<std::size_t>(n), S(0));
    return t;
  }

  static TensorT full(Shape shape, S value) {
    TensorT t = zeros(std::move(shape));
    std::fill(t.st_->v.begin(), t.st_->v.end(), value);
    return t;
  }

  static TensorT scalar(S value) { return full({1}, value); }

  static TensorT from_data(Shape shape, std::vector<S> data) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw DimensionError("from_data: shape " + shape_str(shape) +
                           " does not match buffer of " +
                           std::to_string(data.size()) + " elements");
    TensorT t;
    t.st_ = std::make_shared<Storage>();
    t.st_->shape = std::move(shape);
    t.st_->v = std::move(data);
    return t;
  }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return st_->shape; }
  std::size_t rank() const { return st_->shape.size(); }
  std::int64_t dim(std::size_t i) const { return st_->shape[i]; }
  std::int64_t numel() const {
    return st_ ? static_cast<std::int64_t>(st_->v.size()) : 0;
  }

  std::span<const S> data() const { return {st_->v.data(), st_->v.size()}; }
  std::span<S> data_mut() { return {st_->v.data(), st_->v.size()}; }

  S item() const {
    if (!st_ || st_->v.size() != 1)
      throw ContractError("item() requires a scalar tensor");
    return st_->v[0];
  }

  S at(std::initializer_list<std::int64_t> idx) const {
    return st_->v[static_cast<std::size_t>(offset(idx))];
  }
  S& at_mut(std::initializer_list<std::int64_t> idx) {
    return st_->v[static_cast<std::size_t>(offset(idx))];
  }

  bool requires_grad() const { return st_ && st_->requires_grad; }
  void set_requires_grad(bool b) { st_->requires_grad = b; }

  bool has_grad() const { return st_ && !st_->g.empty(); }
  // Gradient as a fresh tensor (zeros when none was accumulated).
  TensorT grad() const {
    TensorT g = zeros(st_->shape);
    if (has_grad()) std::copy(st_->g.begin(), st_->g.end(), g.st_->v.begin());
    return g;
  }
  std::span<const S> grad_span() const { return {st_->g.data(), st_->g.size()}; }
  std::span<S> grad_acc() {
    if (st_->g.empty()) st_->g.assign(st_->v.size(), S(0));
    return {st_->g.data(), st_->g.size()};
  }
  void zero_grad() { st_->g.clear(); }

  const void* tape_id() const { return st_ ? st_->tape : nullptr; }
  bool grad_connected(const void* tape) const {
    return st_ && (st_->requires_grad || (st_->tape != nullptr && st_->tape == tape));
  }

  TensorT clone() const {
    TensorT t = zeros(st_->shape);
    t.st_->v = st_->v;
    return t;
  }

  bool same_storage(const TensorT& o) const { return st_ == o.st_; }

  bool bits_equal(const TensorT& o) const {
    return st_ && o.st_ && st_->shape == o.st_->shape &&
           std::memcmp(st_->v.data(), o.st_->v.data(),
                       st_->v.size() * sizeof(S)) == 0;
  }

 private:
  struct Storage {
    Shape shape;
    std::vector<S> v;
    std::vector<S> g;
    bool requires_grad = false;
    const void* tape = nullptr;  // tape that produced this tensor, if any
  };

  std::int64_t offset(std::initializer_list<std::int64_t> idx) const {
    std::int64_t off = 0;
    std::size_t k = 0;
    for (auto i : idx) off = off * st_->shape[k++] + i;
    return off;
  }

  std::shared_ptr<Storage> st_;
  friend class TapeT<S>;
};

// Records the backward step of every differentiable primitive executed while
// a Scope is active. One backward per recording; replay order is the exact
// reverse of recording order.
template <typename S>
class TapeT {
 public:
  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  class Scope {
   public:
    explicit Scope(TapeT& t) : prev_(active_) { active_ = &t; }
    ~Scope() { active_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    TapeT* prev_;
  };

  static TapeT* active() { return active_; }

  void record(std::function<void()> backward_step) {
    if (consumed_)
      throw ContractError("tape already consumed by backward(); record a fresh tape");
    steps_.push_back(std::move(backward_step));
  }

  void mark_output(TensorT<S>& t) { t.st_->tape = this; }

  // Registers a named leaf whose gradient backward() should return.
  void watch(const std::string& name, const TensorT<S>& leaf) {
    auto it = watched_.find(name);
    if (it != watched_.end()) {
      if (!it->second.same_storage(leaf))
        throw ContractError("watch: parameter name '" + name +
                            "' registered twice with different tensors");
      return;
    }
    watched_.emplace(name, leaf);
  }

  std::size_t size() const { return steps_.size(); }
  bool consumed() const { return consumed_; }

  std::map<std::string, TensorT<S>> backward(const TensorT<S>& loss) {
    if (consumed_)
      throw ContractError("tape already consumed by backward(); one backward per recording");
    if (!loss.defined() || loss.numel() != 1)
      throw ContractError("backward requires a scalar loss");
    if (loss.tape_id() != this)
      throw GraphError("loss is not connected to this tape (empty graph)");
    const_cast<TensorT<S>&>(loss).grad_acc()[0] = S(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    consumed_ = true;
    std::map<std::string, TensorT<S>> grads;
    for (auto& [name, leaf] : watched_) grads.emplace(name, leaf.grad());
    return grads;
  }

 private:
  std::vector<std::function<void()>> steps_;
  std::map<std::string, TensorT<S>> watched_;
  bool consumed_ = false;
  static thread_local TapeT* active_;
};

template <typename S>
thread_local TapeT<S>* TapeT<S>::active_ = nullptr;

// Active tape when any input participates in gradient flow, else null.
template <typename S>
inline TapeT<S>* recording_tape(std::initializer_list<const TensorT<S>*> inputs) {
  TapeT<S>* tp = TapeT<S>::active();
  if (!tp) return nullptr;
  for (const auto* in : inputs)
    if (in->grad_connected(tp)) return tp;
  return nullptr;
}

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  TensorT<S> c = TensorT<S>::zeros({m, n});
  kern::gemm<S>(false, false, m, n, k, a.data().data(), k, b.data().data(), n,
                c.data_mut().data(), n, false);
  if (auto* tp = recording_tape<S>({&a, &b})) {
    bool na = a.grad_connected(tp), nb = b.grad_connected(tp);
    TensorT<S> ac = a, bc = b, cc = c;
    tp->record([ac, bc, cc, na, nb, m, n, k]() mutable {
      if (!cc.has_grad()) return;
      auto gc = cc.grad_span();
      if (na)  // dA += dC * B^T
        kern::gemm<S>(false, true, m, k, n, gc.data(), n, bc.data().data(), n,
                      ac.grad_acc().data(), k, true);
      if (nb)  // dB += A^T * dC
        kern::gemm<S>(true, false, k, n, m, ac.data().data(), k, gc.data(), n,
                      bc.grad_acc().data(), n, true);
    });
    tp->mark_output(c);
  }
  return c;
}

// phi = A x for A [n x d], x [d].
template <typename S>
TensorT<S> matvec(const TensorT<S>& a, const TensorT<S>& x) {
  if (a.rank() != 2 || x.rank() != 1 || a.dim(1) != x.dim(0))
    throw DimensionError("matvec: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(x.shape()));
  const std::int64_t n = a.dim(0), d = a.dim(1);
  TensorT<S> y = TensorT<S>::zeros({n});
  kern::gemm<S>(false, false, n, 1, d, a.data().data(), d, x.data().data(), 1,
                y.data_mut().data(), 1, false);
  if (auto* tp = recording_tape<S>({&a, &x})) {
    bool na = a.grad_connected(tp), nx = x.grad_connected(tp);
    TensorT<S> ac = a, xc = x, yc = y;
    tp->record([ac, xc, yc, na, nx, n, d]() mutable {
      if (!yc.has_grad()) return;
      auto gy = yc.grad_span();
      if (na) {
        auto ga = ac.grad_acc();
        auto xv = xc.data();
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < d; ++j) ga[i * d + j] += gy[i] * xv[j];
      }
      if (nx)  // dx += A^T gy
        kern::gemm<S>(true, false, d, 1, n, ac.data().data(), d, gy.data(), 1,
                      xc.grad_acc().data(), 1, true);
    });
    tp->mark_output(y);
  }
  return y;
}

// y = w^T A for w [n], A [n x d] (weighted sum of the rows of A).
template <typename S>
TensorT<S> vecmat(const TensorT<S>& w, const TensorT<S>& a) {
  if (w.rank() != 1 || a.rank() != 2 || w.dim(0) != a.dim(0))
    throw DimensionError("vecmat: incompatible shapes " + shape_str(w.shape()) +
                         " and " + shape_str(a.shape()));
  const std::int64_t n = a.dim(0), d = a.dim(1);
  TensorT<S> y = TensorT<S>::zeros({d});
  kern::gemm<S>(true, false, 1, d, n, w.data().data(), 1, a.data().data(), d,
                y.data_mut().data(), d, false);
  if (auto* tp = recording_tape<S>({&w, &a})) {
    bool nw = w.grad_connected(tp), na = a.grad_connected(tp);
    TensorT<S> wc = w, ac = a, yc = y;
    tp->record([wc, ac, yc, nw, na, n, d]() mutable {
      if (!yc.has_grad()) return;
      auto gy = yc.grad_span();
      if (nw) {
        auto gw = wc.grad_acc();
        auto av = ac.data();
        for (std::int64_t i = 0; i < n; ++i) {
          S acc = S(0);
          for (std::int64_t j = 0; j < d; ++j) acc += gy[j] * av[i * d + j];
          gw[i] += acc;
        }
      }
      if (na) {
        auto ga = ac.grad_acc();
        auto wv = wc.data();
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < d; ++j) ga[i * d + j] += wv[i] * gy[j];
      }
    });
    tp->mark_output(y);
  }
  return y;
}

// y = x W^T + b for x [B x in], W [out x in], optional b [out].
template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
    throw DimensionError("linear: input " + shape_str(x.shape()) +
                         " does not match weight " + shape_str(w.shape()));
  const std::int64_t bs = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != out))
    throw DimensionError("linear: bias " + shape_str(b.shape()) +
                         " does not match weight " + shape_str(w.shape()));
  TensorT<S> y = TensorT<S>::zeros({bs, out});
  kern::gemm<S>(false, true, bs, out, in, x.data().data(), in, w.data().data(),
                in, y.data_mut().data(), out, false);
  if (b.defined()) {
    auto yv = y.data_mut();
    auto bv = b.data();
    for (std::int64_t i = 0; i < bs; ++i)
      for (std::int64_t j = 0; j < out; ++j) yv[i * out + j] += bv[j];
  }
  bool has_bias = b.defined();
  if (auto* tp = has_bias ? recording_tape<S>({&x, &w, &b})
                          : recording_tape<S>({&x, &w})) {
    bool nx = x.grad_connected(tp), nw = w.grad_connected(tp);
    bool nb = has_bias && b.grad_connected(tp);
    TensorT<S> xc = x, wc = w, bc = b, yc = y;
    tp->record([xc, wc, bc, yc, nx, nw, nb, bs, in, out]() mutable {
      if (!yc.has_grad()) return;
      auto gy = yc.grad_span();
      if (nx)  // dx += gy W
        kern::gemm<S>(false, false, bs, in, out, gy.data(), out,
                      wc.data().data(), in, xc.grad_acc().data(), in, true);
      if (nw)  // dW += gy^T x
        kern::gemm<S>(true, false, out, in, bs, gy.data(), out,
                      xc.data().data(), in, wc.grad_acc().data(), in, true);
      if (nb) {
        auto gb = bc.grad_acc();
        for (std::int64_t i = 0; i < bs; ++i)
          for (std::int64_t j = 0; j < out; ++j) gb[j] += gy[i * out + j];
      }
    });
    tp->mark_output(y);
  }
  return y;
}

namespace detail {

// P[(c*K + k)][b*Lout + t] = x[b][c][t + k]
template <typename S>
void im2col(std::span<const S> x, std::int64_t bs, std::int64_t cin,
            std::int64_t len, std::int64_t ksz, std::int64_t lout,
            std::vector<S>& p) {
  p.assign(static_cast<std::size_t>(cin * ksz * bs * lout), S(0));
  const std::int64_t cols = bs * lout;
  parallel_for(0, bs, [&](std::int64_t b0, std::int64_t b1) {
    for (std::int64_t b = b0; b < b1; ++b)
      for (std::int64_t c = 0; c < cin; ++c) {
        const S* xr = x.data() + (b * cin + c) * len;
        for (std::int64_t k = 0; k < ksz; ++k) {
          S* pr = p.data() + (c * ksz + k) * cols + b * lout;
          for (std::int64_t t = 0; t < lout; ++t) pr[t] = xr[t + k];
        }
      }
  });
}

}  // namespace detail

// Valid 1D cross-correlation, stride 1. x is [B x Cin x L] or [Cin x L];
// kernels are [Cout x Cin x K]; optional bias [Cout].
template <typename S>
TensorT<S> conv1d(const TensorT<S>& x, const TensorT<S>& w,
                  const TensorT<S>& bias = {}) {
  const bool batched = x.rank() == 3;
  if (x.rank() != 2 && x.rank() != 3)
    throw DimensionError("conv1d: input must be [C x L] or [B x C x L], got " +
                         shape_str(x.shape()));
  if (w.rank() != 3)
    throw DimensionError("conv1d: kernels must be [Cout x Cin x K], got " +
                         shape_str(w.shape()));
  const std::int64_t bs = batched ? x.dim(0) : 1;
  const std::int64_t cin = batched ? x.dim(1) : x.dim(0);
  const std::int64_t len = batched ? x.dim(2) : x.dim(1);
  const std::int64_t cout = w.dim(0), ksz = w.dim(2);
  if (w.dim(1) != cin)
    throw DimensionError("conv1d: input channels " + std::to_string(cin) +
                         " do not match kernels " + shape_str(w.shape()));
  if (len < ksz)
    throw DimensionError("conv1d: input length " + std::to_string(len) +
                         " shorter than kernel " + std::to_string(ksz));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout))
    throw DimensionError("conv1d: bias " + shape_str(bias.shape()) +
                         " does not match Cout " + std::to_string(cout));
  const std::int64_t lout = len - ksz + 1;
  const std::int64_t cols = bs * lout;

  auto patches = std::make_shared<std::vector<S>>();
  detail::im2col<S>(x.data(), bs, cin, len, ksz, lout, *patches);

  // Y_all [Cout x B*Lout] = W [Cout x Cin*K] * P
  std::vector<S> yall(static_cast<std::size_t>(cout * cols), S(0));
  kern::gemm<S>(false, false, cout, cols, cin * ksz, w.data().data(), cin * ksz,
                patches->data(), cols, yall.data(), cols, false);

  TensorT<S> y = batched ? TensorT<S>::zeros({bs, cout, lout})
                         : TensorT<S>::zeros({cout, lout});
  {
    auto yv = y.data_mut();
    auto bv = bias.defined() ? bias.data() : std::span<const S>{};
    for (std::int64_t b = 0; b < bs; ++b)
      for (std::int64_t co = 0; co < cout; ++co) {
        const S* src = yall.data() + co * cols + b * lout;
        S* dst = yv.data() + (b * cout + co) * lout;
        S add = bias.defined() ? bv[co] : S(0);
        for (std::int64_t t = 0; t < lout; ++t) dst[t] = src[t] + add;
      }
  }

  bool has_bias = bias.defined();
  if (auto* tp = has_bias ? recording_tape<S>({&x, &w, &bias})
                          : recording_tape<S>({&x, &w})) {
    bool nx = x.grad_connected(tp), nw = w.grad_connected(tp);
    bool nb = has_bias && bias.grad_connected(tp);
    TensorT<S> xc = x, wc = w, bc = bias, yc = y;
    tp->record([xc, wc, bc, yc, patches, nx, nw, nb, bs, cin, len, cout, ksz,
                lout, cols]() mutable {
      if (!yc.has_grad()) return;
      auto gy = yc.grad_span();
      // regroup dY to [Cout x B*Lout]
      std::vector<S> gyall(static_cast<std::size_t>(cout * cols));
      for (std::int64_t b = 0; b < bs; ++b)
        for (std::int64_t co = 0; co < cout; ++co)
          std::memcpy(gyall.data() + co * cols + b * lout,
                      gy.data() + (b * cout + co) * lout,
                      sizeof(S) * static_cast<std::size_t>(lout));
      if (nw)  // dW += dY P^T
        kern::gemm<S>(false, true, cout, cin * ksz, cols, gyall.data(), cols,
                      patches->data(), cols, wc.grad_acc().data(), cin * ksz,
                      true);
      if (nb) {
        auto gb = bc.grad_acc();
        for (std::int64_t co = 0; co < cout; ++co) {
          S acc = S(0);
          const S* row = gyall.data() + co * cols;
          for (std::int64_t t = 0; t < cols; ++t) acc += row[t];
          gb[co] += acc;
        }
      }
      if (nx) {
        std::vector<S> gp(static_cast<std::size_t>(cin * ksz * cols), S(0));
        kern::gemm<S>(true, false, cin * ksz, cols, cout, wc.data().data(),
                      cin * ksz, gyall.data(), cols, gp.data(), cols, false);
        auto gx = xc.grad_acc();
        parallel_for(0, bs, [&](std::int64_t b0, std::int64_t b1) {
          for (std::int64_t b = b0; b < b1; ++b)
            for (std::int64_t c = 0; c < cin; ++c) {
              S* gxr = gx.data() + (b * cin + c) * len;
              for (std::int64_t k = 0; k < ksz; ++k) {
                const S* gpr = gp.data() + (c * ksz + k) * cols + b * lout;
                for (std::int64_t t = 0; t < lout; ++t) gxr[t + k] += gpr[t];
              }
            }
        });
      }
    });
    tp->mark_output(y);
  }
  return y;
}

// Max pooling over the trailing axis. x is [B x C x L] or [C x L].
template <typename S>
TensorT<S> maxpool1d(const TensorT<S>& x, std::int64_t window,
                     std::int64_t stride) {
  if (x.rank() != 2 && x.rank() != 3)
    throw DimensionError("maxpool1d: input must be [C x L] or [B x C x L]");
  const std::int64_t len = x.dim(x.rank() - 1);
  if (len < window)
    throw DimensionError("maxpool1d: length " + std::to_string(len) +
                         " shorter than window " + std::to_string(window));
  const std::int64_t rows = x.numel() / len;
  const std::int64_t lout = (len - window) / stride + 1;
  Shape out_shape = x.shape();
  out_shape.back() = lout;
  TensorT<S> y = TensorT<S>::zeros(out_shape);
  auto argmax = std::make_shared<std::vector<std::int32_t>>(
      static_cast<std::size_t>(rows * lout));
  {
    auto xv = x.data();
    auto yv = y.data_mut();
    for (std::int64_t r = 0; r < rows; ++r) {
      const S* xr = xv.data() + r * len;
      for (std::int64_t t = 0; t < lout; ++t) {
        std::int64_t base = t * stride;
        S best = xr[base];
        std::int64_t bi = base;
        for (std::int64_t k = 1; k < window; ++k)
          if (xr[base + k] > best) {  // ties keep the first position
            best = xr[base + k];
            bi = base + k;
          }
        yv[r * lout + t] = best;
        (*argmax)[static_cast<std::size_t>(r * lout + t)] =
            static_cast<std::int32_t>(bi);
      }
    }
  }
  if (auto* tp = recording_tape<S>({&x})) {
    TensorT<S> xc = x, yc = y;
    tp->record([xc, yc, argmax, rows, lout, len]() mutable {
      if (!yc.has_grad()) return;
      auto gy = yc.grad_span();
      auto gx = xc.grad_acc();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t t = 0; t < lout; ++t)
          gx[r * len + (*argmax)[static_cast<std::size_t>(r * lout + t)]] +=
              gy[r * lout + t];
    });
    tp->mark_output(y);
  }
  return y;
}

template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
  TensorT<S> y = TensorT<S>::zeros(x.shape());
  auto xv = x.data();
  auto yv = y.data_mut();
  for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = xv[i] > S(0) ? xv[i] : S(0);
  if (auto* tp = recording_tape<S>({&x})) {
    TensorT<S> xc = x, yc = y;
    tp->record([xc, yc]() mutable {
      if (!yc.has_grad()) return;
      auto gy = yc.grad_span();
      auto gx = xc.grad_acc();
      auto xv2 = xc.data();
      for (std::size_t i = 0; i < xv2.size(); ++i)
        if (xv2[i] > S(0)) gx[i] += gy[i];
    });
    tp->mark_output(y);
  }
  return y;
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  TensorT<S> y = TensorT<S>::zeros(a.shape());
  auto av = a.data();
  auto bv = b.data();
  auto yv = y.data_mut();
  for (std::size_t i = 0; i < av.size(); ++i) yv[i] = av[i] + bv[i];
  if (auto* tp = recording_tape<S>({&a, &b})) {
    bool na = a.grad_connected(tp), nb = b.grad_connected(tp);
    TensorT<S> ac = a, bc = b, yc = y;
    tp->record([ac, bc, yc, na, nb]() mutable {
      if (!yc.has_grad()) return;
      auto gy = yc.grad_span();
      if (na) {
        auto ga = ac.grad_acc();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (nb) {
        auto gb = bc.grad_acc();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
      }
    });
    tp->mark_output(y);
  }
  return y;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  TensorT<S> y = TensorT<S>::zeros(a.shape());
  auto av = a.data();
  auto bv = b.data();
  auto yv = y.data_mut();
  for (std::size_t i = 0; i < av.size(); ++i) yv[i] = av[i] * bv[i];
  if (auto* tp = recording_tape<S>({&a, &b})) {
    bool na = a.grad_connected(tp), nb = b.grad_connected(tp);
    TensorT<S> ac = a, bc = b, yc = y;
    tp->record([ac, bc, yc, na, nb]() mutable {
      if (!yc.has_grad()) return;
      auto gy = yc.grad_span();
      auto av2 = ac.data();
      auto bv2 = bc.data();
      if (na) {
        auto ga = ac.grad_acc();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv2[i];
      }
      if (nb) {
        auto gb = bc.grad_acc();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av2[i];
      }
    });
    tp->mark_output(y);
  }
  return y;
}

// a + c * b, same shapes. Assembles the weighted total loss.
template <typename S>
TensorT<S> add_scaled(const TensorT<S>& a, const TensorT<S>& b, S c) {
  if (a.shape() != b.shape())
    throw DimensionError("add_scaled: shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  TensorT<S> y = TensorT<S>::zeros(a.shape());
  auto av = a.data();
  auto bv = b.data();
  auto yv = y.data_mut();
  for (std::size_t i = 0; i < av.size(); ++i) yv[i] = av[i] + c * bv[i];
  if (auto* tp = recording_tape<S>({&a, &b})) {
    bool na = a.grad_connected(tp), nb = b.grad_connected(tp);
    TensorT<S> ac = a, bc = b, yc = y;
    tp->record([ac, bc, yc, na, nb, c]() mutable {
      if (!yc.has_grad()) return;
      auto gy = yc.grad_span();
      if (na) {
        auto ga = ac.grad_acc();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (nb) {
        auto gb = bc.grad_acc();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += c * gy[i];
      }
    });
    tp->mark_output(y);
  }
  return y;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& x, S c) {
  TensorT<S> y = TensorT<S>::zeros(x.shape());
  auto xv = x.data();
  auto yv = y.data_mut();
  for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = c * xv[i];
  if (auto* tp = recording_tape<S>({&x})) {
    TensorT<S> xc = x, yc = y;
    tp->record([xc, yc, c]() mutable {
      if (!yc.has_grad()) return;
      auto gy = yc.grad_span();
      auto gx = xc.grad_acc();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += c * gy[i];
    });
    tp->mark_output(y);
  }
  return y;
}

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) +
                         " as " + shape_str(shape));
  TensorT<S> y = TensorT<S>::from_data(
      std::move(shape), std::vector<S>(x.data().begin(), x.data().end()));
  if (auto* tp = recording_tape<S>({&x})) {
    TensorT<S> xc = x, yc = y;
    tp->record([xc, yc]() mutable {
      if (!yc.has_grad()) return;
      auto gy = yc.grad_span();
      auto gx = xc.grad_acc();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
    tp->mark_output(y);
  }
  return y;
}

template <typename S>
TensorT<S> row(const TensorT<S>& x, std::int64_t i) {
  if (x.rank() != 2 || i < 0 || i >= x.dim(0))
    throw DimensionError("row: index " + std::to_string(i) +
                         " out of range for " + shape_str(x.shape()));
  const std::int64_t n = x.dim(1);
  TensorT<S> y = TensorT<S>::zeros({n});
  std::copy_n(x.data().data() + i * n, n, y.data_mut().data());
  if (auto* tp = recording_tape<S>({&x})) {
    TensorT<S> xc = x, yc = y;
    tp->record([xc, yc, i, n]() mutable {
      if (!yc.has_grad()) return;
      auto gy = yc.grad_span();
      auto gx = xc.grad_acc();
      for (std::int64_t j = 0; j < n; ++j) gx[i * n + j] += gy[j];
    });
    tp->mark_output(y);
  }
  return y;
}

template <typename S>
TensorT<S> stack_rows(const std::vector<TensorT<S>>& rows) {
  if (rows.empty()) throw DimensionError("stack_rows: empty input");
  const std::int64_t n = rows[0].numel();
  const std::int64_t m = static_cast<std::int64_t>(rows.size());
  TensorT<S> y = TensorT<S>::zeros({m, n});
  auto yv = y.data_mut();
  for (std::int64_t i = 0; i < m; ++i) {
    if (rows[static_cast<std::size_t>(i)].numel() != n)
      throw DimensionError("stack_rows: ragged rows");
    std::copy_n(rows[static_cast<std::size_t>(i)].data().data(), n,
                yv.data() + i * n);
  }
  TapeT<S>* tp = TapeT<S>::active();
  std::vector<std::uint8_t> conn;
  bool any = false;
  if (tp)
    for (auto& r : rows) {
      conn.push_back(r.grad_connected(tp) ? 1 : 0);
      any = any || conn.back();
    }
  if (tp && any) {
    std::vector<TensorT<S>> rc = rows;
    TensorT<S> yc = y;
    tp->record([rc, yc, conn, n]() mutable {
      if (!yc.has_grad()) return;
      auto gy = yc.grad_span();
      for (std::size_t i = 0; i < rc.size(); ++i) {
        if (!conn[i]) continue;
        auto g = rc[i].grad_acc();
        for (std::int64_t j = 0; j < n; ++j) g[j] += gy[i * n + j];
      }
    });
    tp->mark_output(y);
  }
  return y;
}

// Elementwise product with a constant mask (the mask never gets a gradient).
template <typename S>
TensorT<S> mul_mask(const TensorT<S>& x, std::span<const S> mask) {
  if (static_cast<std::int64_t>(mask.size()) != x.numel())
    throw DimensionError("mul_mask: mask size does not match tensor");
  TensorT<S> y = TensorT<S>::zeros(x.shape());
  auto xv = x.data();
  auto yv = y.data_mut();
  for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = xv[i] * mask[i];
  if (auto* tp = recording_tape<S>({&x})) {
    TensorT<S> xc = x, yc = y;
    std::vector<S> mc(mask.begin(), mask.end());
    tp->record([xc, yc, mc]() mutable {
      if (!yc.has_grad()) return;
      auto gy = yc.grad_span();
      auto gx = xc.grad_acc();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * mc[i];
    });
    tp->mark_output(y);
  }
  return y;
}

// Max-subtraction stabilized softmax(x / h) over a vector.
template <typename S>
TensorT<S> softmax_temp(const TensorT<S>& x, S h) {
  if (h <= S(0)) throw ConfigError("softmax temperature h must be > 0");
  if (x.rank() != 1) throw DimensionError("softmax_temp: expected a vector");
  const std::int64_t n = x.dim(0);
  TensorT<S> y = TensorT<S>::zeros({n});
  auto xv = x.data();
  auto yv = y.data_mut();
  S mx = xv[0];
  for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, xv[i]);
  S z = S(0);
  for (std::int64_t i = 0; i < n; ++i) {
    yv[i] = std::exp((xv[i] - mx) / h);
    z += yv[i];
  }
  for (std::int64_t i = 0; i < n; ++i) yv[i] /= z;
  if (auto* tp = recording_tape<S>({&x})) {
    TensorT<S> xc = x, yc = y;
    tp->record([xc, yc, h, n]() mutable {
      if (!yc.has_grad()) return;
      auto gy = yc.grad_span();
      auto yv2 = yc.data();
      auto gx = xc.grad_acc();
      S dot = S(0);
      for (std::int64_t i = 0; i < n; ++i) dot += gy[i] * yv2[i];
      for (std::int64_t i = 0; i < n; ++i)
        gx[i] += yv2[i] * (gy[i] - dot) / h;
    });
    tp->mark_output(y);
  }
  return y;
}

template <typename S>
TensorT<S> sum(const TensorT<S>& x) {
  TensorT<S> y = TensorT<S>::zeros({1});
  S acc = S(0);
  for (S v : x.data()) acc += v;
  y.data_mut()[0] = acc;
  if (auto* tp = recording_tape<S>({&x})) {
    TensorT<S> xc = x, yc = y;
    tp->record([xc, yc]() mutable {
      if (!yc.has_grad()) return;
      S g = yc.grad_span()[0];
      auto gx = xc.grad_acc();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
    tp->mark_output(y);
  }
  return y;
}

// Mean over all components of (a - b)^2. Gradients flow into both sides.
template <typename S>
TensorT<S> mse(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mse: shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  const std::int64_t n = a.numel();
  TensorT<S> y = TensorT<S>::zeros({1});
  auto av = a.data();
  auto bv = b.data();
  S acc = S(0);
  for (std::int64_t i = 0; i < n; ++i) {
    S d = av[i] - bv[i];
    acc += d * d;
  }
  y.data_mut()[0] = acc / static_cast<S>(n);
  if (auto* tp = recording_tape<S>({&a, &b})) {
    bool na = a.grad_connected(tp), nb = b.grad_connected(tp);
    TensorT<S> ac = a, bc = b, yc = y;
    tp->record([ac, bc, yc, na, nb, n]() mutable {
      if (!yc.has_grad()) return;
      S g = yc.grad_span()[0] * S(2) / static_cast<S>(n);
      auto av2 = ac.data();
      auto bv2 = bc.data();
      if (na) {
        auto ga = ac.grad_acc();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g * (av2[i] - bv2[i]);
      }
      if (nb) {
        auto gb = bc.grad_acc();
        for (std::int64_t i = 0; i < n; ++i) gb[i] -= g * (av2[i] - bv2[i]);
      }
    });
    tp->mark_output(y);
  }
  return y;
}

// Mean negative log-softmax of the true class, max-subtraction stabilized.
template <typename S>
TensorT<S> softmax_cross_entropy(const TensorT<S>& logits,
                                 std::span<const int> labels) {
  if (logits.rank() != 2)
    throw DimensionError("softmax_cross_entropy: logits must be [B x K]");
  const std::int64_t bs = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != bs)
    throw DimensionError("softmax_cross_entropy: got " +
                         std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(bs));
  for (int lab : labels)
    if (lab < 0 || lab >= k)
      throw DataError("softmax_cross_entropy: label " + std::to_string(lab) +
                      " outside [0, " + std::to_string(k) + ")");
  auto probs = std::make_shared<std::vector<S>>(
      static_cast<std::size_t>(bs * k));
  auto lv = logits.data();
  S loss = S(0);
  for (std::int64_t i = 0; i < bs; ++i) {
    const S* r = lv.data() + i * k;
    S mx = r[0];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, r[j]);
    S z = S(0);
    for (std::int64_t j = 0; j < k; ++j) {
      S e = std::exp(r[j] - mx);
      (*probs)[static_cast<std::size_t>(i * k + j)] = e;
      z += e;
    }
    for (std::int64_t j = 0; j < k; ++j)
      (*probs)[static_cast<std::size_t>(i * k + j)] /= z;
    loss -= (r[labels[static_cast<std::size_t>(i)]] - mx) - std::log(z);
  }
  TensorT<S> y = TensorT<S>::scalar(loss / static_cast<S>(bs));
  if (auto* tp = recording_tape<S>({&logits})) {
    TensorT<S> lc = logits, yc = y;
    std::vector<int> labc(labels.begin(), labels.end());
    tp->record([lc, yc, probs, labc, bs, k]() mutable {
      if (!yc.has_grad()) return;
      S g = yc.grad_span()[0] / static_cast<S>(bs);
      auto gl = lc.grad_acc();
      for (std::int64_t i = 0; i < bs; ++i)
        for (std::int64_t j = 0; j < k; ++j) {
          S p = (*probs)[static_cast<std::size_t>(i * k + j)];
          S ind = (j == labc[static_cast<std::size_t>(i)]) ? S(1) : S(0);
          gl[i * k + j] += g * (p - ind);
        }
    });
    tp->mark_output(y);
  }
  return y;
}

// Mean KL(teacher || student) against fixed soft targets, from student
// logits. Gradient w.r.t. the logits is (p_student - p_teacher) / B.
template <typename S>
TensorT<S> kl_from_soft_targets(const TensorT<S>& logits,
                                std::span<const S> teacher_probs) {
  if (logits.rank() != 2)
    throw DimensionError("kl_from_soft_targets: logits must be [B x K]");
  const std::int64_t bs = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::int64_t>(teacher_probs.size()) != bs * k)
    throw DimensionError("kl_from_soft_targets: target size mismatch");
  auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(bs * k));
  auto lv = logits.data();
  S total = S(0);
  for (std::int64_t i = 0; i < bs; ++i) {
    const S* r = lv.data() + i * k;
    S mx = r[0];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, r[j]);
    S z = S(0);
    for (std::int64_t j = 0; j < k; ++j) {
      S e = std::exp(r[j] - mx);
      (*probs)[static_cast<std::size_t>(i * k + j)] = e;
      z += e;
    }
    S logz = std::log(z);
    for (std::int64_t j = 0; j < k; ++j) {
      (*probs)[static_cast<std::size_t>(i * k + j)] /= z;
      S pt = teacher_probs[static_cast<std::size_t>(i * k + j)];
      if (pt > S(0))
        total += pt * (std::log(pt) - ((r[j] - mx) - logz));
    }
  }
  TensorT<S> y = TensorT<S>::scalar(total / static_cast<S>(bs));
  if (auto* tp = recording_tape<S>({&logits})) {
    TensorT<S> lc = logits, yc = y;
    std::vector<S> tc(teacher_probs.begin(), teacher_probs.end());
    tp->record([lc, yc, probs, tc, bs, k]() mutable {
      if (!yc.has_grad()) return;
      S g = yc.grad_span()[0] / static_cast<S>(bs);
      auto gl = lc.grad_acc();
      for (std::int64_t i = 0; i < bs * k; ++i)
        gl[i] += g * ((*probs)[static_cast<std::size_t>(i)] -
                      tc[static_cast<std::size_t>(i)]);
    });
    tp->mark_output(y);
  }
  return y;
}

// x * mask * inv_keep with a precomputed byte mask (inverted dropout core).
template <typename S>
TensorT<S> dropout_mask_scale(const TensorT<S>& x,
                              std::shared_ptr<const std::vector<std::uint8_t>> mask,
                              S inv_keep) {
  if (static_cast<std::int64_t>(mask->size()) != x.numel())
    throw DimensionError("dropout_mask_scale: mask size mismatch");
  TensorT<S> y = TensorT<S>::zeros(x.shape());
  auto xv = x.data();
  auto yv = y.data_mut();
  for (std::size_t i = 0; i < xv.size(); ++i)
    yv[i] = (*mask)[i] ? xv[i] * inv_keep : S(0);
  if (auto* tp = recording_tape<S>({&x})) {
    TensorT<S> xc = x, yc = y;
    tp->record([xc, yc, mask, inv_keep]() mutable {
      if (!yc.has_grad()) return;
      auto gy = yc.grad_span();
      auto gx = xc.grad_acc();
      for (std::size_t i = 0; i < gy.size(); ++i)
        if ((*mask)[i]) gx[i] += gy[i] * inv_keep;
    });
    tp->mark_output(y);
  }
  return y;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::int64_t coords_checked = 0;
  bool pass = false;
};

// Compares backward() of a scalar-valued f against central differences
// (f(x+h) - f(x-h)) / 2h. Relative error uses |a - n| / max(|a| + |n|, 1e-10).
// With empty `coords` every coordinate is checked.
template <typename S>
GradCheckReport grad_check(
    const std::function<TensorT<S>(const TensorT<S>&)>& f,
    const TensorT<S>& point, double step, double tol,
    std::span<const std::int64_t> coords = {}) {
  TensorT<S> x = point.clone();
  x.set_requires_grad(true);
  TapeT<S> tape;
  TensorT<S> analytic;
  {
    typename TapeT<S>::Scope scope(tape);
    TensorT<S> loss = f(x);
    tape.backward(loss);
    analytic = x.grad();
  }
  std::vector<std::int64_t> all;
  if (coords.empty()) {
    all.resize(static_cast<std::size_t>(point.numel()));
    for (std::int64_t i = 0; i < point.numel(); ++i)
      all[static_cast<std::size_t>(i)] = i;
    coords = all;
  }
  GradCheckReport rep;
  TensorT<S> probe = point.clone();
  auto pv = probe.data_mut();
  auto av = analytic.data();
  for (std::int64_t c : coords) {
    S keep = pv[static_cast<std::size_t>(c)];
    pv[static_cast<std::size_t>(c)] = keep + static_cast<S>(step);
    double fp = static_cast<double>(f(probe).item());
    pv[static_cast<std::size_t>(c)] = keep - static_cast<S>(step);
    double fm = static_cast<double>(f(probe).item());
    pv[static_cast<std::size_t>(c)] = keep;
    double numeric = (fp - fm) / (2.0 * step);
    double a = static_cast<double>(av[static_cast<std::size_t>(c)]);
    double abs_err = std::abs(a - numeric);
    double rel = abs_err / std::max(std::abs(a) + std::abs(numeric), 1e-10);
    rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
    ++rep.coords_checked;
  }
  rep.pass = rep.max_rel_error <= tol;
  return rep;
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace ssd
