#include <doctest.h>

#include "verinet/network.hpp"

using namespace verinet;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return t;
}

Network random_mlp(Rng& rng, std::vector<std::size_t> widths) {
  Network net;
  net.input_shape = {widths.front()};
  net.num_classes = widths.back();
  for (std::size_t i = 1; i < widths.size(); ++i) {
    Layer l = Layer::linear(widths[i], widths[i - 1]);
    for (std::size_t j = 0; j < l.weight.size(); ++j)
      l.weight[j] = rng.uniform(-1.0, 1.0);
    for (std::size_t j = 0; j < l.bias.size(); ++j)
      l.bias[j] = rng.uniform(-0.5, 0.5);
    net.layers.push_back(std::move(l));
    if (i + 1 < widths.size())
      net.layers.push_back(Layer::activation(ActivationFn::ReLU));
  }
  net.validate();
  return net;
}

// Straight-line re-implementation of the forward pass, no shared code with
// forward_batch beyond scalar arithmetic.
std::vector<double> oracle_forward(const Network& net,
                                   const std::vector<double>& x0) {
  std::vector<double> z = x0;
  for (const Layer& l : net.layers) {
    switch (l.kind) {
      case Layer::Kind::Linear: {
        std::vector<double> out(l.weight.extent(0));
        for (std::size_t i = 0; i < out.size(); ++i) {
          double s = l.bias[i];
          for (std::size_t j = 0; j < z.size(); ++j)
            s += l.weight.at2(i, j) * z[j];
          out[i] = s;
        }
        z = out;
        break;
      }
      case Layer::Kind::Activation:
        for (double& v : z)
          switch (l.activation_fn) {
            case ActivationFn::ReLU: v = v > 0 ? v : 0; break;
            case ActivationFn::Sigmoid: v = 1.0 / (1.0 + std::exp(-v)); break;
            case ActivationFn::Tanh: v = std::tanh(v); break;
          }
        break;
      default:
        break;  // flatten is a no-op on flat data, conv handled elsewhere
    }
  }
  return z;
}

}  // namespace

TEST_CASE("forward matches independent oracle on random mlps") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::size_t> widths = {1 + rng.uniform_index(5),
                                       1 + rng.uniform_index(8),
                                       2 + rng.uniform_index(4)};
    Network net = random_mlp(rng, widths);
    Tensor x = random_tensor({widths.front()}, rng);
    std::vector<double> xv(x.data(), x.data() + x.size());
    Tensor got = forward(net, x);
    std::vector<double> want = oracle_forward(net, xv);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i)
      CHECK(std::fabs(got[i] - want[i]) < 1e-12);
  }
}

TEST_CASE("forward_batch equals per-example forward") {
  Rng rng(37);
  Network net = random_mlp(rng, {3, 7, 4});
  Tensor xb = random_tensor({5, 3}, rng);
  Tensor zb = forward_batch(net, xb);
  for (std::size_t i = 0; i < 5; ++i) {
    Tensor x({3});
    for (std::size_t j = 0; j < 3; ++j) x[j] = xb.at2(i, j);
    Tensor z = forward(net, x);
    for (std::size_t j = 0; j < 4; ++j)
      CHECK(zb.at2(i, j) == doctest::Approx(z[j]).epsilon(1e-14));
  }
}

TEST_CASE("parse_architecture grammar") {
  Network mlp = parse_architecture("fc 100; fc 10", {784});
  REQUIRE(mlp.layers.size() == 3);
  CHECK(mlp.layers[0].kind == Layer::Kind::Linear);
  CHECK(mlp.layers[0].weight.shape() == std::vector<std::size_t>{100, 784});
  CHECK(mlp.layers[1].kind == Layer::Kind::Activation);
  CHECK(mlp.layers[2].weight.shape() == std::vector<std::size_t>{10, 100});
  CHECK(mlp.num_classes == 10);

  Network toy = parse_architecture("fc 100; fc 100; fc 100; fc 2", {2});
  REQUIRE(toy.layers.size() == 7);
  CHECK(toy.num_classes == 2);
  CHECK(architecture_string(toy) == "fc 100; fc 100; fc 100; fc 2");

  CHECK_THROWS_AS(parse_architecture("", {2}), std::invalid_argument);
  CHECK_THROWS_AS(parse_architecture("fc", {2}), std::invalid_argument);
  CHECK_THROWS_AS(parse_architecture("fc 0", {2}), std::invalid_argument);
  CHECK_THROWS_AS(parse_architecture("conv 16 4x4+2", {1, 28, 28}),
                  std::invalid_argument);  // must end with fc
  CHECK_THROWS_AS(parse_architecture("dense 5", {2}), std::invalid_argument);
  CHECK_THROWS_AS(parse_architecture("fc 5 extra", {2}),
                  std::invalid_argument);
}

TEST_CASE("small conv architecture on 28x28 input") {
  Network net =
      parse_architecture("conv 16 4x4+2; conv 32 4x4+1; fc 100; fc 10",
                         {1, 28, 28});
  net.validate();
  // 28 -> conv 4x4 stride 2 -> 13 -> conv 4x4 stride 1 -> 10
  auto shapes = net.layer_output_shapes();
  CHECK(shapes[0] == std::vector<std::size_t>{16, 13, 13});
  CHECK(shapes[2] == std::vector<std::size_t>{32, 10, 10});
  CHECK(net.num_classes == 10);
  // hidden relu units: 16*13*13 + 32*10*10 + 100
  CHECK(hidden_unit_count(net) == 16 * 13 * 13 + 32 * 10 * 10 + 100);
  CHECK(architecture_string(net) == "conv 16 4x4+2; conv 32 4x4+1; fc 100; fc 10");
}

TEST_CASE("validate rejects malformed networks") {
  Network net;
  net.input_shape = {2};
  net.num_classes = 2;
  CHECK_THROWS_AS(net.validate(), ShapeError);  // no layers

  net.layers.push_back(Layer::linear(3, 2));
  net.layers.push_back(Layer::activation(ActivationFn::ReLU));
  CHECK_THROWS_AS(net.validate(), ShapeError);  // ends with activation

  net.layers.pop_back();
  CHECK_THROWS_AS(net.validate(), ShapeError);  // 3 outputs != 2 classes
  net.num_classes = 3;
  net.validate();
}

TEST_CASE("init_parameters statistics across seeds") {
  // std should track sqrt(2 / fan_in); biases must be exactly zero
  std::size_t fan_in = 64, out_n = 64;
  double target = std::sqrt(2.0 / static_cast<double>(fan_in));
  double acc = 0.0;
  std::size_t count = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Network net;
    net.input_shape = {fan_in};
    net.num_classes = out_n;
    net.layers.push_back(Layer::linear(out_n, fan_in));
    Rng rng(seed);
    init_parameters(net, rng);
    const Tensor& w = net.layers[0].weight;
    for (std::size_t i = 0; i < w.size(); ++i) {
      acc += w[i] * w[i];
      ++count;
    }
    for (std::size_t i = 0; i < net.layers[0].bias.size(); ++i)
      CHECK(net.layers[0].bias[i] == 0.0);
    // truncation at 2 sigma bounds every sample
    for (std::size_t i = 0; i < w.size(); ++i)
      CHECK(std::fabs(w[i]) <= 2.0 * target + 1e-15);
  }
  double sample_std = std::sqrt(acc / static_cast<double>(count));
  // truncation at 2 sigma shrinks the std by a known factor ~0.880
  CHECK(sample_std == doctest::Approx(target * 0.8796).epsilon(0.02));
}

TEST_CASE("init is deterministic per seed") {
  Network a = parse_architecture("fc 8; fc 3", {4});
  Network b = parse_architecture("fc 8; fc 3", {4});
  Rng r1(99), r2(99);
  init_parameters(a, r1);
  init_parameters(b, r2);
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (!a.layers[i].has_params()) continue;
    for (std::size_t j = 0; j < a.layers[i].weight.size(); ++j)
      CHECK(a.layers[i].weight[j] == b.layers[i].weight[j]);
  }
}

TEST_CASE("taped forward equals plain forward") {
  Rng rng(41);
  Network net = random_mlp(rng, {4, 9, 3});
  Tensor xb = random_tensor({3, 4}, rng);
  Tensor plain = forward_batch(net, xb);
  ad::Tape tape;
  ad::TapedNet tnet = ad::TapedNet::record(tape, net);
  ad::Var z = tnet.forward(tape, tape.leaf(xb));
  const Tensor& taped = tape.value(z);
  REQUIRE(plain.same_shape(taped));
  for (std::size_t i = 0; i < plain.size(); ++i) CHECK(plain[i] == taped[i]);
}

TEST_CASE("conv network forward matches direct conv2d composition") {
  Rng rng(43);
  Network net = parse_architecture("conv 2 2x2+1; fc 3", {1, 4, 4});
  for (Layer& l : net.layers) {
    if (!l.has_params()) continue;
    for (std::size_t j = 0; j < l.weight.size(); ++j)
      l.weight[j] = rng.uniform(-1.0, 1.0);
    for (std::size_t j = 0; j < l.bias.size(); ++j)
      l.bias[j] = rng.uniform(-0.5, 0.5);
  }
  Tensor x = random_tensor({1, 4, 4}, rng);
  Tensor got = forward(net, x);

  Tensor c = conv2d(x.reshaped({1, 1, 4, 4}), net.layers[0].weight,
                    net.layers[0].bias, 1, 0);
  Tensor a = relu(c).reshaped({1, c.size()});
  const Layer& fcl = net.layers.back();
  Tensor want = matmul_nt(a, fcl.weight);
  for (std::size_t j = 0; j < 3; ++j) want[j] += fcl.bias[j];
  for (std::size_t j = 0; j < 3; ++j)
    CHECK(got[j] == doctest::Approx(want[j]).epsilon(1e-14));
}
