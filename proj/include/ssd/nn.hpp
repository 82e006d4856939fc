#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ssd/rng.hpp"
#include "ssd/tensor.hpp"

namespace ssd {

// Eval: dropout is identity. Train: fresh masks with inverted scaling.
// Distill: parameters behave as in evaluation but dropout layers keep
// sampling fresh masks (the frozen-teacher setting).
enum class DropoutMode { Train, Eval, Distill };

inline bool dropout_active(DropoutMode m) { return m != DropoutMode::Eval; }

// Per-call forward context. sample_ids give each batch row a stable
// identity so dropout masks depend on (sample, pass, site) and never on
// how rows were batched together.
struct ForwardCtx {
  DropoutMode mode = DropoutMode::Eval;
  RngStream rng{0};
  std::span<const std::int64_t> sample_ids{};
  std::uint64_t pass_index = 0;
};

// Elementwise inverted dropout. Identity in Eval mode or at p = 0;
// otherwise keeps each component with probability 1-p and scales the
// survivors by 1/(1-p). Masks are drawn per batch row from
// (sample_id, pass_index, site).
template <typename S>
TensorT<S> dropout_apply(const TensorT<S>& x, double p, DropoutMode mode,
                         const RngStream& rng,
                         std::span<const std::int64_t> sample_ids,
                         std::uint64_t pass_index, std::uint64_t site = 0) {
  if (p < 0.0 || p >= 1.0)
    throw ConfigError("dropout rate must lie in [0, 1), got " +
                      std::to_string(p));
  if (mode == DropoutMode::Eval || p == 0.0) return x;
  const std::int64_t rows = x.rank() >= 2 ? x.dim(0) : 1;
  const std::int64_t cols = x.numel() / rows;
  if (static_cast<std::int64_t>(sample_ids.size()) != rows)
    throw ContractError("dropout_apply: need one sample id per batch row (" +
                        std::to_string(rows) + " rows, " +
                        std::to_string(sample_ids.size()) + " ids)");
  auto mask = std::make_shared<std::vector<std::uint8_t>>(
      static_cast<std::size_t>(x.numel()));
  for (std::int64_t r = 0; r < rows; ++r) {
    auto key = rng.key(static_cast<std::uint64_t>(sample_ids[r]), pass_index,
                       site);
    std::uint8_t* mr = mask->data() + r * cols;
    for (std::int64_t j = 0; j < cols; ++j)
      mr[j] = key.keep(static_cast<std::uint64_t>(j), p) ? 1 : 0;
  }
  return dropout_mask_scale(x, std::move(mask),
                            static_cast<S>(1.0 / (1.0 - p)));
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename S>
class LayerT {
 public:
  virtual ~LayerT() = default;
  virtual TensorT<S> forward(const TensorT<S>& x, const ForwardCtx& ctx) = 0;
  virtual std::string name() const = 0;
  virtual void params(std::vector<std::pair<std::string, TensorT<S>*>>& out) {
    (void)out;
  }
  virtual bool stochastic() const { return false; }
  virtual Shape out_shape(const Shape& in) const = 0;
  // Multiply-accumulates for one sample's forward pass.
  virtual std::int64_t macs(const Shape& in) const {
    (void)in;
    return 0;
  }
  virtual std::unique_ptr<LayerT<S>> clone() const = 0;
};

template <typename S>
class Conv1dLayer final : public LayerT<S> {
 public:
  Conv1dLayer(std::string name, TensorT<S> w, TensorT<S> b)
      : name_(std::move(name)), w_(std::move(w)), b_(std::move(b)) {}

  TensorT<S> forward(const TensorT<S>& x, const ForwardCtx&) override {
    return conv1d(x, w_, b_);
  }
  std::string name() const override { return name_; }
  void params(std::vector<std::pair<std::string, TensorT<S>*>>& out) override {
    out.emplace_back(name_ + ".weight", &w_);
    out.emplace_back(name_ + ".bias", &b_);
  }
  Shape out_shape(const Shape& in) const override {
    return {in[0], w_.dim(0), in[2] - w_.dim(2) + 1};
  }
  std::int64_t macs(const Shape& in) const override {
    std::int64_t lout = in[2] - w_.dim(2) + 1;
    return w_.dim(0) * lout * w_.dim(1) * w_.dim(2);
  }
  std::unique_ptr<LayerT<S>> clone() const override {
    return std::make_unique<Conv1dLayer>(name_, w_.clone(), b_.clone());
  }

 private:
  std::string name_;
  TensorT<S> w_, b_;
};

template <typename S>
class ReluLayer final : public LayerT<S> {
 public:
  explicit ReluLayer(std::string name) : name_(std::move(name)) {}
  TensorT<S> forward(const TensorT<S>& x, const ForwardCtx&) override {
    return relu(x);
  }
  std::string name() const override { return name_; }
  Shape out_shape(const Shape& in) const override { return in; }
  std::unique_ptr<LayerT<S>> clone() const override {
    return std::make_unique<ReluLayer>(name_);
  }

 private:
  std::string name_;
};

template <typename S>
class MaxPool1dLayer final : public LayerT<S> {
 public:
  MaxPool1dLayer(std::string name, std::int64_t window, std::int64_t stride)
      : name_(std::move(name)), window_(window), stride_(stride) {}
  TensorT<S> forward(const TensorT<S>& x, const ForwardCtx&) override {
    return maxpool1d(x, window_, stride_);
  }
  std::string name() const override { return name_; }
  Shape out_shape(const Shape& in) const override {
    Shape o = in;
    o.back() = (in.back() - window_) / stride_ + 1;
    return o;
  }
  std::unique_ptr<LayerT<S>> clone() const override {
    return std::make_unique<MaxPool1dLayer>(name_, window_, stride_);
  }

 private:
  std::string name_;
  std::int64_t window_, stride_;
};

template <typename S>
class FlattenLayer final : public LayerT<S> {
 public:
  explicit FlattenLayer(std::string name) : name_(std::move(name)) {}
  TensorT<S> forward(const TensorT<S>& x, const ForwardCtx&) override {
    return reshape(x, {x.dim(0), x.numel() / x.dim(0)});
  }
  std::string name() const override { return name_; }
  Shape out_shape(const Shape& in) const override {
    std::int64_t f = 1;
    for (std::size_t i = 1; i < in.size(); ++i) f *= in[i];
    return {in[0], f};
  }
  std::unique_ptr<LayerT<S>> clone() const override {
    return std::make_unique<FlattenLayer>(name_);
  }

 private:
  std::string name_;
};

template <typename S>
class LinearLayer final : public LayerT<S> {
 public:
  LinearLayer(std::string name, TensorT<S> w, TensorT<S> b)
      : name_(std::move(name)), w_(std::move(w)), b_(std::move(b)) {}
  TensorT<S> forward(const TensorT<S>& x, const ForwardCtx&) override {
    return linear(x, w_, b_);
  }
  std::string name() const override { return name_; }
  void params(std::vector<std::pair<std::string, TensorT<S>*>>& out) override {
    out.emplace_back(name_ + ".weight", &w_);
    out.emplace_back(name_ + ".bias", &b_);
  }
  Shape out_shape(const Shape& in) const override { return {in[0], w_.dim(0)}; }
  std::int64_t macs(const Shape&) const override {
    return w_.dim(0) * w_.dim(1);
  }
  std::unique_ptr<LayerT<S>> clone() const override {
    return std::make_unique<LinearLayer>(name_, w_.clone(), b_.clone());
  }

 private:
  std::string name_;
  TensorT<S> w_, b_;
};

template <typename S>
class DropoutLayer final : public LayerT<S> {
 public:
  DropoutLayer(std::string name, double rate, std::uint64_t site)
      : name_(std::move(name)), rate_(rate), site_(site) {}
  TensorT<S> forward(const TensorT<S>& x, const ForwardCtx& ctx) override {
    return dropout_apply<S>(x, rate_, ctx.mode, ctx.rng, ctx.sample_ids,
                            ctx.pass_index, site_);
  }
  std::string name() const override { return name_; }
  bool stochastic() const override { return rate_ > 0.0; }
  Shape out_shape(const Shape& in) const override { return in; }
  std::unique_ptr<LayerT<S>> clone() const override {
    return std::make_unique<DropoutLayer>(name_, rate_, site_);
  }
  double rate() const { return rate_; }
  void set_rate(double r) {
    if (r < 0.0 || r >= 1.0)
      throw ConfigError("dropout rate must lie in [0, 1), got " +
                        std::to_string(r));
    rate_ = r;
  }

 private:
  std::string name_;
  double rate_;
  std::uint64_t site_;
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <typename S>
struct ForwardResultT {
  TensorT<S> features;  // activation at the feature tap, [B x d]
  TensorT<S> logits;    // final layer output, [B x classes]
};

// Ordered layer graph with named parameters and a designated feature tap.
// Immutable during inference; forward() records on the active tape only
// when some parameter requires a gradient.
template <typename S>
class ModelT {
 public:
  ModelT() = default;
  ModelT(ModelT&&) = default;
  ModelT& operator=(ModelT&&) = default;

  void add(std::unique_ptr<LayerT<S>> layer) {
    layers_.push_back(std::move(layer));
  }
  void set_feature_tap(std::size_t layer_index) { feature_tap_ = layer_index; }
  std::size_t feature_tap() const { return feature_tap_; }
  void set_input_shape(Shape s) { input_shape_ = std::move(s); }  // [C, L]
  const Shape& input_shape() const { return input_shape_; }

  std::size_t layer_count() const { return layers_.size(); }

  ModelT clone() const {
    ModelT m;
    for (auto& l : layers_) m.add(l->clone());
    m.feature_tap_ = feature_tap_;
    m.input_shape_ = input_shape_;
    return m;
  }

  std::vector<std::pair<std::string, TensorT<S>*>> named_params() const {
    std::vector<std::pair<std::string, TensorT<S>*>> out;
    for (auto& l : layers_) l->params(out);
    return out;
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (auto& [name, t] : named_params()) n += t->numel();
    return n;
  }

  void set_trainable(bool trainable) const {
    for (auto& [name, t] : named_params()) t->set_requires_grad(trainable);
  }
  void freeze() const { set_trainable(false); }

  bool any_trainable() const {
    for (auto& [name, t] : named_params())
      if (t->requires_grad()) return true;
    return false;
  }

  void zero_grads() const {
    for (auto& [name, t] : named_params()) t->zero_grad();
  }

  void set_dropout_rate(double p) const {
    for (auto& l : layers_)
      if (auto* d = dynamic_cast<DropoutLayer<S>*>(l.get())) d->set_rate(p);
  }

  // Index of the first dropout layer that would sample a mask, or
  // layer_count() when the whole forward pass is deterministic.
  std::size_t first_stochastic_layer() const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (layers_[i]->stochastic()) return i;
    return layers_.size();
  }

  std::map<std::string, TensorT<S>> state_dict() const {
    std::map<std::string, TensorT<S>> out;
    for (auto& [name, t] : named_params()) out.emplace(name, t->clone());
    return out;
  }

  void load_state_dict(const std::map<std::string, TensorT<S>>& sd) const {
    auto np = named_params();
    if (sd.size() != np.size())
      throw CheckpointError("state dict has " + std::to_string(sd.size()) +
                            " tensors, model expects " +
                            std::to_string(np.size()));
    for (auto& [name, t] : np) {
      auto it = sd.find(name);
      if (it == sd.end())
        throw CheckpointError("state dict is missing parameter '" + name + "'");
      if (it->second.shape() != t->shape())
        throw CheckpointError("parameter '" + name + "' has shape " +
                              shape_str(it->second.shape()) +
                              ", model expects " + shape_str(t->shape()));
      std::copy(it->second.data().begin(), it->second.data().end(),
                t->data_mut().begin());
    }
  }

  TensorT<S> forward_range(const TensorT<S>& x, const ForwardCtx& ctx,
                           std::size_t begin, std::size_t end,
                           TensorT<S>* feature_out = nullptr) const {
    maybe_watch();
    TensorT<S> h = x;
    for (std::size_t i = begin; i < end; ++i) {
      h = layers_[i]->forward(h, ctx);
      if (feature_out && i == feature_tap_) *feature_out = h;
    }
    return h;
  }

  ForwardResultT<S> forward(const TensorT<S>& batch, const ForwardCtx& ctx) const {
    check_input(batch, ctx);
    ForwardResultT<S> r;
    r.logits = forward_range(batch, ctx, 0, layers_.size(), &r.features);
    if (!r.features.defined())
      throw ContractError("feature tap index " + std::to_string(feature_tap_) +
                          " was never reached");
    return r;
  }

  Shape output_shape(const Shape& batch_shape) const {
    Shape s = batch_shape;
    for (auto& l : layers_) s = l->out_shape(s);
    return s;
  }

  std::int64_t forward_macs_per_sample() const {
    Shape s = {1, input_shape_[0], input_shape_[1]};
    std::int64_t total = 0;
    for (auto& l : layers_) {
      total += l->macs(s);
      s = l->out_shape(s);
    }
    return total;
  }

  const LayerT<S>& layer(std::size_t i) const { return *layers_[i]; }

 private:
  void check_input(const TensorT<S>& batch, const ForwardCtx& ctx) const {
    if (batch.rank() != 3)
      throw DimensionError("forward: batch must be [B x C x L], got " +
                           shape_str(batch.shape()));
    if (!input_shape_.empty() &&
        (batch.dim(1) != input_shape_[0] || batch.dim(2) != input_shape_[1]))
      throw DimensionError("forward: batch " + shape_str(batch.shape()) +
                           " does not match model input [C x L] = " +
                           shape_str(input_shape_));
    if (dropout_active(ctx.mode) && first_stochastic_layer() < layers_.size() &&
        static_cast<std::int64_t>(ctx.sample_ids.size()) != batch.dim(0))
      throw ContractError("forward: stochastic mode needs one sample id per row");
  }

  void maybe_watch() const {
    auto* tp = TapeT<S>::active();
    if (!tp) return;
    for (auto& [name, t] : named_params())
      if (t->requires_grad()) tp->watch(name, *t);
  }

  std::vector<std::unique_ptr<LayerT<S>>> layers_;
  std::size_t feature_tap_ = 0;
  Shape input_shape_;  // [C, L]
};

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

namespace detail {

// Kaiming-uniform for ReLU fan-in: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <typename S>
TensorT<S> kaiming_uniform(Shape shape, std::int64_t fan_in,
                           const RngStream& rng, std::uint64_t param_index) {
  TensorT<S> t = TensorT<S>::zeros(std::move(shape));
  auto key = rng.key(param_index, 0x1717, 0);
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  auto v = t.data_mut();
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = static_cast<S>((2.0 * key.uniform64(i) - 1.0) * bound);
  return t;
}

}  // namespace detail

// The HAR 1D CNN: two conv+pool stages, three fully connected layers, one
// dropout site after FC1, feature tap at the 500-d FC2 activation.
//
//   [B x 9 x 128] -> conv(9->32, k9) -> relu -> pool2
//                 -> conv(32->64, k9) -> relu -> pool2 -> flatten(1664)
//                 -> fc1(1664->1000) -> relu -> dropout(p)
//                 -> fc2(1000->500) -> relu   [feature tap]
//                 -> fc3(500->6)
template <typename S>
ModelT<S> build_har_cnn(double dropout_p, const RngStream& init_rng) {
  if (dropout_p < 0.0 || dropout_p >= 1.0)
    throw ConfigError("build_har_cnn: dropout rate must lie in [0, 1), got " +
                      std::to_string(dropout_p));
  ModelT<S> m;
  std::uint64_t pi = 0;
  auto conv = [&](std::string name, std::int64_t cin, std::int64_t cout,
                  std::int64_t k) {
    auto w = detail::kaiming_uniform<S>({cout, cin, k}, cin * k, init_rng, pi++);
    m.add(std::make_unique<Conv1dLayer<S>>(std::move(name), std::move(w),
                                           TensorT<S>::zeros({cout})));
  };
  auto fc = [&](std::string name, std::int64_t in, std::int64_t out) {
    auto w = detail::kaiming_uniform<S>({out, in}, in, init_rng, pi++);
    m.add(std::make_unique<LinearLayer<S>>(std::move(name), std::move(w),
                                           TensorT<S>::zeros({out})));
  };
  conv("conv1", 9, 32, 9);
  m.add(std::make_unique<ReluLayer<S>>("relu1"));
  m.add(std::make_unique<MaxPool1dLayer<S>>("pool1", 2, 2));
  conv("conv2", 32, 64, 9);
  m.add(std::make_unique<ReluLayer<S>>("relu2"));
  m.add(std::make_unique<MaxPool1dLayer<S>>("pool2", 2, 2));
  m.add(std::make_unique<FlattenLayer<S>>("flatten"));
  fc("fc1", 1664, 1000);
  m.add(std::make_unique<ReluLayer<S>>("relu3"));
  m.add(std::make_unique<DropoutLayer<S>>("drop1", dropout_p, 0));
  fc("fc2", 1000, 500);
  m.add(std::make_unique<ReluLayer<S>>("relu4"));
  m.set_feature_tap(m.layer_count() - 1);  // 500-d post-ReLU representation
  fc("fc3", 500, 6);
  m.set_input_shape({9, 128});
  return m;
}

// Small MLP used by the synthetic experiments and fast tests. Mirrors the
// CNN's structure: dropout upstream of the penultimate feature tap.
struct MlpSpec {
  std::int64_t channels = 1;
  std::int64_t length = 64;
  std::int64_t hidden = 128;
  std::int64_t feature_dim = 64;
  std::int64_t classes = 4;
  double dropout_p = 0.1;
};

template <typename S>
ModelT<S> build_mlp(const MlpSpec& spec, const RngStream& init_rng) {
  if (spec.dropout_p < 0.0 || spec.dropout_p >= 1.0)
    throw ConfigError("build_mlp: dropout rate must lie in [0, 1)");
  ModelT<S> m;
  std::uint64_t pi = 0;
  auto fc = [&](std::string name, std::int64_t in, std::int64_t out) {
    auto w = detail::kaiming_uniform<S>({out, in}, in, init_rng, pi++);
    m.add(std::make_unique<LinearLayer<S>>(std::move(name), std::move(w),
                                           TensorT<S>::zeros({out})));
  };
  const std::int64_t in_dim = spec.channels * spec.length;
  m.add(std::make_unique<FlattenLayer<S>>("flatten"));
  fc("fc1", in_dim, spec.hidden);
  m.add(std::make_unique<ReluLayer<S>>("relu1"));
  m.add(std::make_unique<DropoutLayer<S>>("drop1", spec.dropout_p, 0));
  fc("fc2", spec.hidden, spec.feature_dim);
  m.add(std::make_unique<ReluLayer<S>>("relu2"));
  m.set_feature_tap(m.layer_count() - 1);
  fc("fc3", spec.feature_dim, spec.classes);
  m.set_input_shape({spec.channels, spec.length});
  return m;
}

// Row-wise softmax of eval-mode logits (prediction-time only, no tape).
template <typename S>
std::vector<double> softmax_rows(const TensorT<S>& logits) {
  const std::int64_t bs = logits.dim(0), k = logits.dim(1);
  std::vector<double> out(static_cast<std::size_t>(bs * k));
  auto lv = logits.data();
  for (std::int64_t i = 0; i < bs; ++i) {
    const S* r = lv.data() + i * k;
    double mx = static_cast<double>(r[0]);
    for (std::int64_t j = 1; j < k; ++j)
      mx = std::max(mx, static_cast<double>(r[j]));
    double z = 0.0;
    for (std::int64_t j = 0; j < k; ++j) {
      double e = std::exp(static_cast<double>(r[j]) - mx);
      out[static_cast<std::size_t>(i * k + j)] = e;
      z += e;
    }
    for (std::int64_t j = 0; j < k; ++j)
      out[static_cast<std::size_t>(i * k + j)] /= z;
  }
  return out;
}

using Model = ModelT<float>;
using ForwardResult = ForwardResultT<float>;

}  // namespace ssd
