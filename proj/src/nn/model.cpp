#include "deepterra/nn/model.hpp"

#include "deepterra/error.hpp"
#include "deepterra/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace deepterra::nn {

using nlohmann::json;
using nlohmann::ordered_json;

const char* to_string(Activation a)
{
  switch (a) {
    case Activation::Relu: return "relu";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Tanh: return "tanh";
  }
  return "relu";
}

Activation parse_activation(const std::string& s)
{
  for (auto a : {Activation::Relu, Activation::Sigmoid, Activation::Tanh})
    if (s == to_string(a)) return a;
  fail(ErrorKind::Config, "activation: unknown kind '" + s + "'");
}

std::vector<Shape> ModelSpec::layer_shapes() const
{
  require(input_px >= 1, ErrorKind::Domain, "input_px must be positive");
  require(input_channels >= 1, ErrorKind::Domain, "input_channels must be positive");
  Shape cur{input_channels, input_px, input_px};
  std::vector<Shape> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string where = "layer " + std::to_string(i) + ": ";
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Conv2D>) {
            require(cur.size() == 3, ErrorKind::Domain, where + "conv2d needs a feature map input");
            require(l.kernel >= 1 && l.stride >= 1 && l.channels >= 1, ErrorKind::Domain, where + "bad conv2d parameters");
            require(l.kernel <= cur[1] && l.kernel <= cur[2], ErrorKind::Domain, where + "kernel larger than input");
            cur = {l.channels, (cur[1] - l.kernel) / l.stride + 1, (cur[2] - l.kernel) / l.stride + 1};
          } else if constexpr (std::is_same_v<L, MaxPool>) {
            require(cur.size() == 3, ErrorKind::Domain, where + "maxpool needs a feature map input");
            require(l.k >= 1 && l.k <= cur[1] && l.k <= cur[2], ErrorKind::Domain, where + "bad pool size");
            cur = {cur[0], cur[1] / l.k, cur[2] / l.k};
          } else if constexpr (std::is_same_v<L, Flatten>) {
            cur = {element_count(cur)};
          } else if constexpr (std::is_same_v<L, Dense>) {
            require(cur.size() == 1, ErrorKind::Domain, where + "dense needs a flat input (add flatten)");
            require(l.units >= 1, ErrorKind::Domain, where + "dense needs at least one unit");
            cur = {l.units};
          } else if constexpr (std::is_same_v<L, Dropout>) {
            require(l.p >= 0.0 && l.p < 1.0, ErrorKind::Domain, where + "dropout p must lie in [0, 1)");
          }
        },
        layers[i]);
    out.push_back(cur);
  }
  require(cur.size() == 1, ErrorKind::Domain, "model must end with a flat representation before the head");
  return out;
}

std::size_t ModelSpec::head_inputs() const { return layer_shapes().back().front(); }

ordered_json to_json(const ModelSpec& spec)
{
  ordered_json layers = ordered_json::array();
  for (const auto& layer : spec.layers) {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Conv2D>)
            layers.push_back({{"type", "conv2d"}, {"kernel", l.kernel}, {"channels", l.channels}, {"stride", l.stride}});
          else if constexpr (std::is_same_v<L, MaxPool>)
            layers.push_back({{"type", "maxpool"}, {"k", l.k}});
          else if constexpr (std::is_same_v<L, Flatten>)
            layers.push_back({{"type", "flatten"}});
          else if constexpr (std::is_same_v<L, Dense>)
            layers.push_back({{"type", "dense"}, {"units", l.units}});
          else if constexpr (std::is_same_v<L, Dropout>)
            layers.push_back({{"type", "dropout"}, {"p", l.p}});
          else
            layers.push_back({{"type", "activation"}, {"kind", to_string(l.kind)}});
        },
        layer);
  }
  ordered_json j;
  j["architecture"] = spec.architecture;
  j["input_px"] = spec.input_px;
  j["input_channels"] = spec.input_channels;
  j["layers"] = std::move(layers);
  j["output"] = "dense(2)+softmax";
  return j;
}

ModelSpec model_from_json(const json& j)
{
  ModelSpec spec;
  try {
    spec.architecture = j.value("architecture", std::string("convnet"));
    spec.input_px = j.at("input_px").get<std::size_t>();
    spec.input_channels = j.value("input_channels", std::size_t{3});
    for (const auto& l : j.at("layers")) {
      const auto type = l.at("type").get<std::string>();
      if (type == "conv2d")
        spec.layers.push_back(Conv2D{l.at("kernel").get<std::size_t>(), l.at("channels").get<std::size_t>(),
                                     l.value("stride", std::size_t{1})});
      else if (type == "maxpool")
        spec.layers.push_back(MaxPool{l.at("k").get<std::size_t>()});
      else if (type == "flatten")
        spec.layers.push_back(Flatten{});
      else if (type == "dense")
        spec.layers.push_back(Dense{l.at("units").get<std::size_t>()});
      else if (type == "dropout")
        spec.layers.push_back(Dropout{l.at("p").get<double>()});
      else if (type == "activation")
        spec.layers.push_back(ActivationLayer{parse_activation(l.at("kind").get<std::string>())});
      else
        fail(ErrorKind::Config, "model_spec.layers: unknown layer type '" + type + "'");
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("model_spec: ") + e.what());
  }
  spec.layer_shapes();
  return spec;
}

ModelSpec default_convnet(std::size_t input_px, Activation act, double dropout)
{
  ModelSpec spec;
  spec.input_px = input_px;
  spec.layers = {Conv2D{3, 16, 1}, ActivationLayer{act}, MaxPool{2}, Conv2D{3, 32, 1}, ActivationLayer{act},
                 MaxPool{2},       Flatten{},            Dense{64},  ActivationLayer{act}, Dropout{dropout}};
  spec.layer_shapes();
  return spec;
}

const Tensor& WeightMap::at(const std::string& name) const
{
  auto it = tensors_.find(name);
  require(it != tensors_.end(), ErrorKind::Domain, "missing weight " + name);
  return it->second;
}

Tensor& WeightMap::mutable_at(const std::string& name)
{
  auto it = tensors_.find(name);
  require(it != tensors_.end(), ErrorKind::Domain, "missing weight " + name);
  ++version_;
  return it->second;
}

void WeightMap::set(const std::string& name, Tensor t)
{
  ++version_;
  tensors_[name] = std::move(t);
}

std::size_t WeightMap::parameter_count() const
{
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.size();
  return n;
}

std::string weight_name(std::size_t layer, const char* part) { return "layer" + std::to_string(layer) + "." + part; }

std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelSpec& spec)
{
  const auto shapes = spec.layer_shapes();
  std::vector<std::pair<std::string, Shape>> out;
  Shape in{spec.input_channels, spec.input_px, spec.input_px};
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (const auto* c = std::get_if<Conv2D>(&spec.layers[i])) {
      out.emplace_back(weight_name(i, "weight"), Shape{c->channels, in[0], c->kernel, c->kernel});
      out.emplace_back(weight_name(i, "bias"), Shape{c->channels});
    } else if (const auto* d = std::get_if<Dense>(&spec.layers[i])) {
      out.emplace_back(weight_name(i, "weight"), Shape{d->units, in[0]});
      out.emplace_back(weight_name(i, "bias"), Shape{d->units});
    }
    in = shapes[i];
  }
  out.emplace_back(kHeadWeight, Shape{kClasses, in[0]});
  out.emplace_back(kHeadBias, Shape{kClasses});
  return out;
}

WeightMap init_weights(const ModelSpec& spec, std::uint64_t seed)
{
  WeightMap w;
  std::uint64_t index = 0;
  for (const auto& [name, shape] : parameter_shapes(spec)) {
    Tensor t(shape);
    if (shape.size() > 1) {
      const std::size_t fan_in = element_count(shape) / shape[0];
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
      rng::Stream s(rng::mix(seed, {0x1417, index}));
      for (auto& v : t.values()) v = s.uniform(-limit, limit);
    }
    w.set(name, std::move(t));
    ++index;
  }
  return w;
}

WeightMap zero_weights(const ModelSpec& spec)
{
  WeightMap w;
  for (const auto& [name, shape] : parameter_shapes(spec)) w.set(name, Tensor(shape));
  return w;
}

void check_weights(const ModelSpec& spec, const WeightMap& w)
{
  const auto expected = parameter_shapes(spec);
  require(expected.size() == w.tensors().size(), ErrorKind::Domain, "weight map has unexpected tensors");
  for (const auto& [name, shape] : expected)
    require(w.contains(name) && w.at(name).shape() == shape, ErrorKind::Domain, "weight " + name + " has wrong shape");
}

namespace {

double activate(Activation a, double x)
{
  switch (a) {
    case Activation::Relu: return x > 0.0 ? x : 0.0;
    case Activation::Sigmoid: return 1.0 / (1.0 + std::exp(-x));
    case Activation::Tanh: return std::tanh(x);
  }
  return x;
}

// derivative expressed through the activation's input x and output y
double activate_grad(Activation a, double x, double y)
{
  switch (a) {
    case Activation::Relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::Sigmoid: return y * (1.0 - y);
    case Activation::Tanh: return 1.0 - y * y;
  }
  return 1.0;
}

void conv_forward(const Tensor& in, const Tensor& w, const Tensor& b, std::size_t stride, Tensor& out)
{
  const std::size_t n = in.dim(0), ci = in.dim(1), ih = in.dim(2), iw = in.dim(3);
  const std::size_t co = w.dim(0), k = w.dim(2);
  const std::size_t oh = out.dim(2), ow = out.dim(3);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t o = 0; o < co; ++o) {
      double* plane = out.data() + ((s * co + o) * oh) * ow;
      std::fill(plane, plane + oh * ow, b[o]);
      for (std::size_t c = 0; c < ci; ++c) {
        const double* src = in.data() + ((s * ci + c) * ih) * iw;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const double wv = w[((o * ci + c) * k + ky) * k + kx];
            for (std::size_t y = 0; y < oh; ++y) {
              const double* row = src + (y * stride + ky) * iw + kx;
              double* dst = plane + y * ow;
              for (std::size_t x = 0; x < ow; ++x) dst[x] += wv * row[x * stride];
            }
          }
        }
      }
    }
  }
}

void conv_backward(const Tensor& in, const Tensor& w, std::size_t stride, const Tensor& dout, Tensor& din, Tensor& dw,
                   Tensor& db)
{
  const std::size_t n = in.dim(0), ci = in.dim(1), ih = in.dim(2), iw = in.dim(3);
  const std::size_t co = w.dim(0), k = w.dim(2);
  const std::size_t oh = dout.dim(2), ow = dout.dim(3);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t o = 0; o < co; ++o) {
      const double* g = dout.data() + ((s * co + o) * oh) * ow;
      double bsum = 0.0;
      for (std::size_t i = 0; i < oh * ow; ++i) bsum += g[i];
      db[o] += bsum;
      for (std::size_t c = 0; c < ci; ++c) {
        const double* src = in.data() + ((s * ci + c) * ih) * iw;
        double* dsrc = din.data() + ((s * ci + c) * ih) * iw;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t wi = ((o * ci + c) * k + ky) * k + kx;
            const double wv = w[wi];
            double acc = 0.0;
            for (std::size_t y = 0; y < oh; ++y) {
              const double* row = src + (y * stride + ky) * iw + kx;
              double* drow = dsrc + (y * stride + ky) * iw + kx;
              const double* grow = g + y * ow;
              for (std::size_t x = 0; x < ow; ++x) {
                acc += grow[x] * row[x * stride];
                drow[x * stride] += wv * grow[x];
              }
            }
            dw[wi] += acc;
          }
        }
      }
    }
  }
}

void dense_forward(const Tensor& in, const Tensor& w, const Tensor& b, Tensor& out)
{
  const std::size_t n = in.dim(0), fi = in.dim(1), fo = w.dim(0);
  for (std::size_t s = 0; s < n; ++s) {
    const double* x = in.data() + s * fi;
    for (std::size_t o = 0; o < fo; ++o) {
      const double* wr = w.data() + o * fi;
      double acc = b[o];
      for (std::size_t i = 0; i < fi; ++i) acc += wr[i] * x[i];
      out[s * fo + o] = acc;
    }
  }
}

void dense_backward(const Tensor& in, const Tensor& w, const Tensor& dout, Tensor& din, Tensor& dw, Tensor& db)
{
  const std::size_t n = in.dim(0), fi = in.dim(1), fo = w.dim(0);
  for (std::size_t s = 0; s < n; ++s) {
    const double* x = in.data() + s * fi;
    double* dx = din.data() + s * fi;
    for (std::size_t o = 0; o < fo; ++o) {
      const double g = dout[s * fo + o];
      if (g == 0.0) continue;
      const double* wr = w.data() + o * fi;
      double* dwr = dw.data() + o * fi;
      db[o] += g;
      for (std::size_t i = 0; i < fi; ++i) {
        dwr[i] += g * x[i];
        dx[i] += g * wr[i];
      }
    }
  }
}

}  // namespace

struct ForwardPass {
  static ForwardResult run(const ModelSpec& spec, const WeightMap& weights, const Tensor& batch, Mode mode,
                           std::uint64_t seed, const ForwardOptions& opts)
  {
    const auto shapes = spec.layer_shapes();
    require(batch.rank() == 4 && batch.dim(1) == spec.input_channels && batch.dim(2) == spec.input_px &&
                batch.dim(3) == spec.input_px,
            ErrorKind::Domain, "batch shape does not match the model input");
    const std::size_t n = batch.dim(0);
    require(n >= 1, ErrorKind::Domain, "empty batch");

    ForwardResult res;
    ForwardCache& cache = res.cache;
    cache.spec_ = &spec;
    cache.weights_ = &weights;
    cache.weights_version_ = weights.version();
    cache.mode_ = mode;
    cache.layers_.resize(spec.layers.size());

    Tensor cur = batch;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
      LayerCache& lc = cache.layers_[i];
      Shape out_shape{n};
      out_shape.insert(out_shape.end(), shapes[i].begin(), shapes[i].end());
      Tensor out(out_shape);
      std::visit(
          [&](const auto& l) {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, Conv2D>) {
              conv_forward(cur, weights.at(weight_name(i, "weight")), weights.at(weight_name(i, "bias")), l.stride, out);
            } else if constexpr (std::is_same_v<L, MaxPool>) {
              const std::size_t c = cur.dim(1), ih = cur.dim(2), iw = cur.dim(3), oh = out.dim(2), ow = out.dim(3);
              lc.argmax.resize(out.size());
              for (std::size_t p = 0; p < n * c; ++p) {
                const double* src = cur.data() + p * ih * iw;
                for (std::size_t y = 0; y < oh; ++y)
                  for (std::size_t x = 0; x < ow; ++x) {
                    std::size_t best = (y * l.k) * iw + x * l.k;
                    for (std::size_t dy = 0; dy < l.k; ++dy)
                      for (std::size_t dx = 0; dx < l.k; ++dx) {
                        const std::size_t idx = (y * l.k + dy) * iw + x * l.k + dx;
                        if (src[idx] > src[best]) best = idx;
                      }
                    const std::size_t o = (p * oh + y) * ow + x;
                    out[o] = src[best];
                    lc.argmax[o] = static_cast<std::uint32_t>(best);
                  }
              }
            } else if constexpr (std::is_same_v<L, Flatten>) {
              out = Tensor(out_shape, std::vector<double>(cur.values().begin(), cur.values().end()));
            } else if constexpr (std::is_same_v<L, Dense>) {
              dense_forward(cur, weights.at(weight_name(i, "weight")), weights.at(weight_name(i, "bias")), out);
            } else if constexpr (std::is_same_v<L, Dropout>) {
              if (mode == Mode::Train && l.p > 0.0) {
                lc.mask.resize(out.size());
                const double keep = 1.0 / (1.0 - l.p);
                for (std::size_t e = 0; e < out.size(); ++e) {
                  lc.mask[e] = rng::uniform(seed, {i, e}) >= l.p ? keep : 0.0;
                  out[e] = cur[e] * lc.mask[e];
                }
              } else {
                out = cur;
              }
            } else {
              for (std::size_t e = 0; e < out.size(); ++e) out[e] = activate(l.kind, cur[e]);
            }
          },
          spec.layers[i]);
      if (opts.check_finite && !out.all_finite())
        fail(ErrorKind::Training, "non-finite activation after layer " + std::to_string(i));
      lc.input = std::move(cur);
      cur = out;
      lc.output = std::move(out);
    }
    cur.reshape({n, cur.size() / n});
    Tensor logits({n, kClasses});
    dense_forward(cur, weights.at(kHeadWeight), weights.at(kHeadBias), logits);
    if (opts.check_finite && !logits.all_finite()) fail(ErrorKind::Training, "non-finite logits");
    cache.head_input_ = std::move(cur);
    res.probabilities = softmax(logits);
    cache.logits_ = std::move(logits);
    return res;
  }
};

ForwardResult forward(const ModelSpec& spec, const WeightMap& weights, const Tensor& batch, Mode mode,
                      std::uint64_t dropout_seed, const ForwardOptions& opts)
{
  return ForwardPass::run(spec, weights, batch, mode, dropout_seed, opts);
}

Gradients backward(ForwardCache& cache, const Tensor& grad_logits)
{
  require(cache.spec_ != nullptr, ErrorKind::Domain, "backward called without a forward cache");
  require(!cache.consumed_, ErrorKind::Domain, "stale forward cache: already consumed by backward");
  require(cache.weights_->version() == cache.weights_version_, ErrorKind::Domain,
          "stale forward cache: weights changed since forward");
  require(grad_logits.shape() == cache.logits_.shape(), ErrorKind::Domain, "gradient shape does not match logits");
  cache.consumed_ = true;

  const ModelSpec& spec = *cache.spec_;
  const WeightMap& weights = *cache.weights_;
  Gradients grads;
  for (const auto& [name, shape] : parameter_shapes(spec)) grads.emplace(name, Tensor(shape));

  Tensor dcur(cache.head_input_.shape());
  dense_backward(cache.head_input_, weights.at(kHeadWeight), grad_logits, dcur, grads.at(kHeadWeight),
                 grads.at(kHeadBias));

  for (std::size_t i = spec.layers.size(); i-- > 0;) {
    LayerCache& lc = cache.layers_[i];
    dcur.reshape(lc.output.shape());
    Tensor din(lc.input.shape());
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Conv2D>) {
            conv_backward(lc.input, weights.at(weight_name(i, "weight")), l.stride, dcur, din,
                          grads.at(weight_name(i, "weight")), grads.at(weight_name(i, "bias")));
          } else if constexpr (std::is_same_v<L, MaxPool>) {
            const std::size_t n = lc.input.dim(0), c = lc.input.dim(1);
            const std::size_t in_plane = lc.input.dim(2) * lc.input.dim(3);
            const std::size_t out_plane = lc.output.dim(2) * lc.output.dim(3);
            for (std::size_t p = 0; p < n * c; ++p)
              for (std::size_t o = 0; o < out_plane; ++o)
                din[p * in_plane + lc.argmax[p * out_plane + o]] += dcur[p * out_plane + o];
          } else if constexpr (std::is_same_v<L, Flatten>) {
            din = Tensor(lc.input.shape(), std::vector<double>(dcur.values().begin(), dcur.values().end()));
          } else if constexpr (std::is_same_v<L, Dense>) {
            dense_backward(lc.input, weights.at(weight_name(i, "weight")), dcur, din, grads.at(weight_name(i, "weight")),
                           grads.at(weight_name(i, "bias")));
          } else if constexpr (std::is_same_v<L, Dropout>) {
            if (lc.mask.empty())
              din = dcur;
            else
              for (std::size_t e = 0; e < din.size(); ++e) din[e] = dcur[e] * lc.mask[e];
          } else {
            for (std::size_t e = 0; e < din.size(); ++e)
              din[e] = dcur[e] * activate_grad(l.kind, lc.input[e], lc.output[e]);
          }
        },
        spec.layers[i]);
    dcur = std::move(din);
  }
  return grads;
}

Tensor softmax(const Tensor& logits)
{
  require(logits.rank() == 2, ErrorKind::Domain, "softmax expects [N, K]");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor out(logits.shape());
  for (std::size_t s = 0; s < n; ++s) {
    const double* z = logits.data() + s * k;
    const double m = *std::max_element(z, z + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += (out[s * k + j] = std::exp(z[j] - m));
    for (std::size_t j = 0; j < k; ++j) out[s * k + j] /= sum;
  }
  return out;
}

LossResult cross_entropy(const Tensor& logits, std::span<const std::size_t> labels)
{
  require(logits.rank() == 2 && logits.dim(0) == labels.size(), ErrorKind::Domain, "labels do not match logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  LossResult r{0.0, Tensor(logits.shape()), 0};
  const Tensor p = softmax(logits);
  for (std::size_t s = 0; s < n; ++s) {
    const double* z = logits.data() + s * k;
    require(labels[s] < k, ErrorKind::Domain, "label index out of range");
    const double m = *std::max_element(z, z + k);
    double lse = 0.0;
    for (std::size_t j = 0; j < k; ++j) lse += std::exp(z[j] - m);
    r.loss += (m + std::log(lse)) - z[labels[s]];
    std::size_t arg = 0;
    for (std::size_t j = 0; j < k; ++j) {
      r.grad_logits[s * k + j] = (p[s * k + j] - (j == labels[s] ? 1.0 : 0.0)) / static_cast<double>(n);
      if (z[j] > z[arg]) arg = j;
    }
    r.correct += arg == labels[s];
  }
  r.loss /= static_cast<double>(n);
  return r;
}

Tensor images_to_batch(std::span<const RasterImage* const> images)
{
  require(!images.empty(), ErrorKind::Domain, "no images");
  const std::size_t h = images[0]->height(), w = images[0]->width();
  Tensor t({images.size(), RasterImage::kChannels, h, w});
  for (std::size_t s = 0; s < images.size(); ++s) {
    const auto& img = *images[s];
    require(img.width() == w && img.height() == h, ErrorKind::Domain, "images in a batch must share dimensions");
    const auto& px = img.pixels();
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < h * w; ++i) t[((s * 3 + c) * h * w) + i] = px[i * 3 + c] / 255.0;
  }
  return t;
}

Tensor image_to_batch(const RasterImage& img)
{
  const RasterImage* p = &img;
  return images_to_batch(std::span(&p, 1));
}

}  // namespace deepterra::nn
