#pragma once

#include <cctype>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "verinet/autodiff.hpp"
#include "verinet/tensor.hpp"

namespace verinet {

enum class ActivationFn { ReLU, Sigmoid, Tanh };

inline const char* activation_name(ActivationFn fn) {
  switch (fn) {
    case ActivationFn::ReLU: return "relu";
    case ActivationFn::Sigmoid: return "sigmoid";
    case ActivationFn::Tanh: return "tanh";
  }
  return "?";
}

struct Layer {
  enum class Kind { Linear, Conv2D, Activation, Flatten };

  Kind kind;
  // Linear: weight [out x in], bias [out]
  // Conv2D: weight [K x C x h x w], bias [K]
  Tensor weight;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
  ActivationFn activation_fn = ActivationFn::ReLU;

  static Layer linear(Tensor w, Tensor b) {
    if (w.rank() != 2 || b.size() != w.extent(0))
      throw ShapeError("linear layer: bias must match output extent");
    Layer l;
    l.kind = Kind::Linear;
    l.weight = std::move(w);
    l.bias = std::move(b);
    return l;
  }

  static Layer linear(std::size_t out, std::size_t in) {
    return linear(Tensor({out, in}), Tensor({out}));
  }

  static Layer conv2d(Tensor w, Tensor b, std::size_t stride,
                      std::size_t padding) {
    if (w.rank() != 4 || b.size() != w.extent(0))
      throw ShapeError("conv layer: bias must match output channels");
    if (stride == 0) throw ShapeError("conv layer: stride must be positive");
    Layer l;
    l.kind = Kind::Conv2D;
    l.weight = std::move(w);
    l.bias = std::move(b);
    l.stride = stride;
    l.padding = padding;
    return l;
  }

  static Layer activation(ActivationFn fn) {
    Layer l;
    l.kind = Kind::Activation;
    l.activation_fn = fn;
    return l;
  }

  static Layer flatten() {
    Layer l;
    l.kind = Kind::Flatten;
    return l;
  }

  bool has_params() const {
    return kind == Kind::Linear || kind == Kind::Conv2D;
  }

  std::vector<std::size_t> output_shape(
      const std::vector<std::size_t>& in) const {
    switch (kind) {
      case Kind::Linear:
        if (in.size() != 1 || in[0] != weight.extent(1))
          throw ShapeError("linear layer: input shape mismatch, got " +
                           shape_str(in));
        return {weight.extent(0)};
      case Kind::Conv2D: {
        std::vector<std::size_t> x = {1, in.at(0), in.at(1), in.at(2)};
        auto o = conv2d_output_shape(x, weight.shape(), stride, padding);
        return {o[1], o[2], o[3]};
      }
      case Kind::Activation:
        return in;
      case Kind::Flatten:
        return {Tensor::count(in)};
    }
    throw std::logic_error("unreachable");
  }
};

// Feed-forward network; the final layer must be Linear so class
// specifications can be folded into it.
struct Network {
  std::vector<Layer> layers;
  std::vector<std::size_t> input_shape;  // per-example, no batch axis
  std::size_t num_classes = 0;

  void validate() const {
    if (layers.empty()) throw ShapeError("network has no layers");
    if (layers.back().kind != Layer::Kind::Linear)
      throw ShapeError("final layer must be linear");
    auto shape = input_shape;
    for (const Layer& l : layers) shape = l.output_shape(shape);
    if (shape.size() != 1 || shape[0] != num_classes)
      throw ShapeError("network output does not match num_classes");
  }

  std::vector<std::vector<std::size_t>> layer_output_shapes() const {
    std::vector<std::vector<std::size_t>> out;
    auto shape = input_shape;
    for (const Layer& l : layers) {
      shape = l.output_shape(shape);
      out.push_back(shape);
    }
    return out;
  }

  bool relu_only() const {
    for (const Layer& l : layers)
      if (l.kind == Layer::Kind::Activation &&
          l.activation_fn != ActivationFn::ReLU)
        return false;
    return true;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Layer& l : layers)
      if (l.has_params()) n += l.weight.size() + l.bias.size();
    return n;
  }
};

namespace detail {
inline Tensor apply_activation(ActivationFn fn, const Tensor& x) {
  switch (fn) {
    case ActivationFn::ReLU: return relu(x);
    case ActivationFn::Sigmoid: return sigmoid(x);
    case ActivationFn::Tanh: return verinet::tanh(x);
  }
  throw std::logic_error("unreachable");
}

// Per-example tensors carry no batch axis; add one for conv/linear ops.
inline Tensor with_batch_axis(const Tensor& x) {
  std::vector<std::size_t> s = {1};
  for (auto e : x.shape()) s.push_back(e);
  return x.reshaped(s);
}
}  // namespace detail

// Forward pass over a batch. x has a leading batch axis followed by
// input_shape; returns logits [B x N].
inline Tensor forward_batch(const Network& net, const Tensor& x) {
  std::vector<std::size_t> expect = {x.extent(0)};
  for (auto e : net.input_shape) expect.push_back(e);
  if (x.shape() != expect)
    throw ShapeError("forward: input shape mismatch, got " +
                     shape_str(x.shape()));
  std::size_t batch = x.extent(0);
  Tensor z = x;
  for (const Layer& l : net.layers) {
    switch (l.kind) {
      case Layer::Kind::Linear:
        if (z.rank() != 2) z = z.reshaped({batch, z.size() / batch});
        z = matmul_nt(z, l.weight);
        for (std::size_t i = 0; i < batch; ++i)
          for (std::size_t j = 0; j < l.bias.size(); ++j)
            z.at2(i, j) += l.bias[j];
        z.check_finite("forward linear");
        break;
      case Layer::Kind::Conv2D:
        z = conv2d(z, l.weight, l.bias, l.stride, l.padding);
        break;
      case Layer::Kind::Activation:
        z = detail::apply_activation(l.activation_fn, z);
        break;
      case Layer::Kind::Flatten:
        z = z.reshaped({batch, z.size() / batch});
        break;
    }
  }
  return z;
}

// Single-example forward; x matches input_shape, result is the logit vector.
inline Tensor forward(const Network& net, const Tensor& x) {
  if (x.shape() != net.input_shape)
    throw ShapeError("forward: input shape mismatch, got " +
                     shape_str(x.shape()));
  Tensor z = forward_batch(net, detail::with_batch_axis(x));
  return z.reshaped({net.num_classes});
}

inline std::size_t predict(const Network& net, const Tensor& x) {
  return argmax(forward(net, x));
}

// Truncated-normal init with std = sqrt(2 / fan_in), biases zero.
inline void init_parameters(Network& net, Rng& rng) {
  for (Layer& l : net.layers) {
    if (!l.has_params()) continue;
    std::size_t fan_in = l.kind == Layer::Kind::Linear
                             ? l.weight.extent(1)
                             : l.weight.extent(1) * l.weight.extent(2) *
                                   l.weight.extent(3);
    double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < l.weight.size(); ++i)
      l.weight[i] = rng.truncated_normal(stddev);
    for (std::size_t i = 0; i < l.bias.size(); ++i) l.bias[i] = 0.0;
  }
}

// Architecture grammar: layers separated by ';', each either
//   "fc N"  or  "conv K WxH+S"
// A flatten is inserted before the first fc following a conv, and ReLU after
// every layer except the final fc.
inline Network parse_architecture(const std::string& text,
                                  std::vector<std::size_t> input_shape) {
  struct Item {
    bool is_conv;
    std::size_t n, kw, kh, stride;
  };
  std::vector<Item> items;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ';')) {
    std::istringstream ps(part);
    std::string kind;
    ps >> kind;
    if (kind.empty()) continue;
    if (kind == "fc") {
      std::size_t n = 0;
      ps >> n;
      if (!ps || n == 0) throw std::invalid_argument("bad fc layer: " + part);
      items.push_back({false, n, 0, 0, 0});
    } else if (kind == "conv") {
      std::size_t k = 0, w = 0, h = 0, s = 0;
      char x = 0, plus = 0;
      ps >> k >> w >> x >> h >> plus >> s;
      if (!ps || x != 'x' || plus != '+' || k == 0 || w == 0 || h == 0 ||
          s == 0)
        throw std::invalid_argument("bad conv layer: " + part);
      items.push_back({true, k, w, h, s});
    } else {
      throw std::invalid_argument("unknown layer kind: " + kind);
    }
    std::string trail;
    if (ps >> trail) throw std::invalid_argument("trailing tokens: " + part);
  }
  if (items.empty()) throw std::invalid_argument("empty architecture string");
  if (items.back().is_conv)
    throw std::invalid_argument("architecture must end with an fc layer");

  Network net;
  net.input_shape = std::move(input_shape);
  auto shape = net.input_shape;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Item& it = items[i];
    if (it.is_conv) {
      if (shape.size() != 3)
        throw ShapeError("conv layer needs C x H x W input, got " +
                         shape_str(shape));
      net.layers.push_back(Layer::conv2d(
          Tensor({it.n, shape[0], it.kh, it.kw}), Tensor({it.n}), it.stride,
          /*padding=*/0));
    } else {
      if (shape.size() != 1) {
        net.layers.push_back(Layer::flatten());
        shape = {Tensor::count(shape)};
      }
      net.layers.push_back(Layer::linear(it.n, shape[0]));
    }
    shape = net.layers.back().output_shape(shape);
    if (i + 1 < items.size())
      net.layers.push_back(Layer::activation(ActivationFn::ReLU));
  }
  net.num_classes = shape.at(0);
  net.validate();
  return net;
}

inline std::string architecture_string(const Network& net) {
  std::ostringstream os;
  bool first = true;
  for (const Layer& l : net.layers) {
    if (l.kind == Layer::Kind::Linear) {
      os << (first ? "" : "; ") << "fc " << l.weight.extent(0);
      first = false;
    } else if (l.kind == Layer::Kind::Conv2D) {
      os << (first ? "" : "; ") << "conv " << l.weight.extent(0) << " "
         << l.weight.extent(3) << "x" << l.weight.extent(2) << "+" << l.stride;
      first = false;
    }
  }
  return os.str();
}

// Hidden activation unit count (activation layers only), as used when sizing
// models.
inline std::size_t hidden_unit_count(const Network& net) {
  std::size_t n = 0;
  auto shapes = net.layer_output_shapes();
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    if (net.layers[i].kind == Layer::Kind::Activation)
      n += Tensor::count(shapes[i]);
  return n;
}

// ----- taped execution (training / attacks) -----

namespace ad {

// Network parameters registered on a tape, with taped forward and interval
// passes sharing the same parameter nodes so gradients flow to both.
struct TapedNet {
  const Network* net = nullptr;
  std::vector<Var> weights;  // invalid Var for non-parameter layers
  std::vector<Var> biases;

  static TapedNet record(Tape& tape, const Network& net) {
    TapedNet t;
    t.net = &net;
    for (const Layer& l : net.layers) {
      if (l.has_params()) {
        t.weights.push_back(tape.leaf(l.weight));
        t.biases.push_back(tape.leaf(l.bias));
      } else {
        t.weights.push_back(Var{});
        t.biases.push_back(Var{});
      }
    }
    return t;
  }

  Var forward(Tape& tape, Var x) const {
    std::size_t batch = tape.value(x).extent(0);
    Var z = x;
    for (std::size_t i = 0; i < net->layers.size(); ++i) {
      const Layer& l = net->layers[i];
      switch (l.kind) {
        case Layer::Kind::Linear:
          if (tape.value(z).rank() != 2)
            z = tape.reshape(z, {batch, tape.value(z).size() / batch});
          z = tape.linear(z, weights[i], biases[i]);
          break;
        case Layer::Kind::Conv2D:
          z = tape.conv2d(z, weights[i], biases[i], l.stride, l.padding);
          break;
        case Layer::Kind::Activation:
          z = apply_activation(tape, l.activation_fn, z);
          break;
        case Layer::Kind::Flatten:
          z = tape.reshape(z, {batch, tape.value(z).size() / batch});
          break;
      }
    }
    return z;
  }

  // Interval propagation on the tape. Affine layers run in center/radius
  // form (two products), activations in lower/upper form. Returns (lower,
  // upper) after `upto` layers (upto == layers.size() for the full pass).
  std::pair<Var, Var> propagate_bounds(Tape& tape, Var lower, Var upper,
                                       std::size_t upto) const {
    std::size_t batch = tape.value(lower).extent(0);
    Var l = lower, u = upper;
    for (std::size_t i = 0; i < upto; ++i) {
      const Layer& lay = net->layers[i];
      switch (lay.kind) {
        case Layer::Kind::Linear: {
          if (tape.value(l).rank() != 2) {
            l = tape.reshape(l, {batch, tape.value(l).size() / batch});
            u = tape.reshape(u, {batch, tape.value(u).size() / batch});
          }
          Var mu = tape.scale(tape.add(u, l), 0.5);
          Var r = tape.scale(tape.sub(u, l), 0.5);
          Var mu_out = tape.linear(mu, weights[i], biases[i]);
          Var r_out = tape.linear_nobias(r, tape.abs(weights[i]));
          l = tape.sub(mu_out, r_out);
          u = tape.add(mu_out, r_out);
          break;
        }
        case Layer::Kind::Conv2D: {
          Var mu = tape.scale(tape.add(u, l), 0.5);
          Var r = tape.scale(tape.sub(u, l), 0.5);
          Var mu_out =
              tape.conv2d(mu, weights[i], biases[i], lay.stride, lay.padding);
          Var r_out = tape.conv2d_nobias(r, tape.abs(weights[i]), lay.stride,
                                         lay.padding);
          l = tape.sub(mu_out, r_out);
          u = tape.add(mu_out, r_out);
          break;
        }
        case Layer::Kind::Activation:
          l = apply_activation(tape, lay.activation_fn, l);
          u = apply_activation(tape, lay.activation_fn, u);
          break;
        case Layer::Kind::Flatten:
          l = tape.reshape(l, {batch, tape.value(l).size() / batch});
          u = tape.reshape(u, {batch, tape.value(u).size() / batch});
          break;
      }
    }
    return {l, u};
  }

  // Gradient of layer i's parameters after backward().
  const Tensor& weight_grad(const Tape& tape, std::size_t i) const {
    return tape.grad(weights[i]);
  }
  const Tensor& bias_grad(const Tape& tape, std::size_t i) const {
    return tape.grad(biases[i]);
  }

 private:
  static Var apply_activation(Tape& tape, ActivationFn fn, Var x) {
    switch (fn) {
      case ActivationFn::ReLU: return tape.relu(x);
      case ActivationFn::Sigmoid: return tape.sigmoid(x);
      case ActivationFn::Tanh: return tape.tanh(x);
    }
    throw std::logic_error("unreachable");
  }
};

}  // namespace ad
}  // namespace verinet
