#include <cmath>
#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "fabme/grad_check.hpp"
#include "fabme/ops.hpp"
#include "fabme/snapshot.hpp"

using namespace fabme;

namespace {

Tensor random_input(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::uniform(s, -1.0, 1.0, rng, true);
}

std::vector<double> to_vector(const Tensor& t) { return {t.values().data(), t.values().data() + t.numel()}; }

// Direct zero-padded channel convolution, written independently of conv1d.
std::vector<double> conv1d_oracle(const std::vector<double>& v, const std::vector<double>& w) {
  const int n = static_cast<int>(v.size());
  const int k = static_cast<int>(w.size());
  std::vector<double> padded(static_cast<std::size_t>(n + k - 1), 0.0);
  for (int i = 0; i < n; ++i) padded[static_cast<std::size_t>(i + k / 2)] = v[static_cast<std::size_t>(i)];
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) out[static_cast<std::size_t>(i)] += w[static_cast<std::size_t>(j)] * padded[static_cast<std::size_t>(i + j)];
  return out;
}

const std::array<Shape, 3> kSmallShapes{Shape{1, 2, 3, 3}, Shape{2, 3, 4, 5}, Shape{1, 4, 5, 2}};

}  // namespace

TEST_CASE("tensor construction enforces invariants") {
  CHECK_THROWS_AS(Tensor({1, 2, 2, 2}, Buffer::Zero(7)), Error);
  CHECK_THROWS_AS(Tensor({0, 2, 2, 2}, Buffer::Zero(0)), Error);
  const Tensor t = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(t.at(0, 0, 1, 0) == 3.0);
  CHECK_THROWS_AS(t.at(0, 1, 0, 0), Error);
  Tensor leaf = Tensor::zeros({1, 1, 1, 2}, true);
  const Tensor derived = sigmoid(leaf);
  CHECK(derived.op() == "sigmoid");
  CHECK_THROWS_AS(Tensor(derived).mutable_values(), Error);
}

TEST_CASE("conv2d: scaling identity and sum case") {
  const Tensor ones = Tensor::full({1, 1, 3, 3}, 1.0);
  const Tensor w = Tensor::full({1, 1, 1, 1}, 2.0);
  const Tensor y = conv2d(ones, ConvSpec{1, 1, 1, 1, 1, 0, 1, false}, w);
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  CHECK((y.values() == 2.0).all());

  const Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
  const Tensor k = Tensor::full({1, 1, 2, 2}, 1.0);
  const Tensor s = conv2d(x, ConvSpec{1, 1, 2, 2, 1, 0, 1, false}, k);
  CHECK(s.shape() == Shape{1, 1, 1, 1});
  CHECK(s.item() == 10.0);
}

TEST_CASE("conv2d: output extent follows floor((in + 2p - k)/s) + 1") {
  Rng rng(3);
  const Tensor x = Tensor::uniform({1, 2, 7, 6}, -1, 1, rng);
  const ConvSpec spec{2, 3, 3, 3, 2, 1, 1, true};
  const Tensor y = conv2d(x, spec, Tensor::uniform(spec.weight_shape(), -1, 1, rng), Tensor::zeros({1, 3, 1, 1}));
  CHECK(y.shape() == Shape{1, 3, 4, 3});
}

TEST_CASE("conv2d: shape mismatches name the offending dimension") {
  const Tensor x = Tensor::zeros({1, 3, 4, 4});
  const ConvSpec spec{4, 4, 3, 3, 1, 1, 1, false};
  try {
    conv2d(x, spec, Tensor::zeros(spec.weight_shape()));
    FAIL("expected rejection");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("input channel") != std::string::npos);
  }
  const ConvSpec ok{3, 4, 3, 3, 1, 1, 1, false};
  try {
    conv2d(x, ok, Tensor::zeros({4, 3, 3, 2}));
    FAIL("expected rejection");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("kernel width") != std::string::npos);
  }
  CHECK_THROWS_AS(ConvSpec({3, 4, 3, 3, 1, 1, 2, false}).validate(), Error);
  CHECK_THROWS_AS(ConvSpec({4, 4, 3, 3, 0, 1, 1, false}).validate(), Error);
  CHECK_THROWS_AS(ConvSpec({4, 4, 3, 3, 1, -1, 1, false}).validate(), Error);
}

TEST_CASE("conv2d: identity 1x1 kernel is the identity map") {
  Rng rng(11);
  const Tensor x = Tensor::uniform({2, 5, 3, 4}, -2, 2, rng);
  Buffer eye = Buffer::Zero(25);
  for (int i = 0; i < 5; ++i) eye[i * 5 + i] = 1.0;
  const Tensor y = conv2d(x, ConvSpec{5, 5, 1, 1, 1, 0, 1, false}, Tensor({5, 5, 1, 1}, eye));
  CHECK((y.values() == x.values()).all());
}

TEST_CASE("conv2d depthwise gradient matches central differences") {
  const Tensor x = random_input({2, 4, 8, 8}, 21);
  const ConvSpec spec{4, 4, 3, 3, 1, 1, 4, false};
  const Tensor w = random_input(spec.weight_shape(), 22);
  const std::array<GradTarget, 2> targets{GradTarget{"x", x}, GradTarget{"w", w}};
  GradCheckOptions opt;
  opt.tol = 1e-6;
  opt.eps = 1e-4;  // bilinear in (x, w): central differences carry no truncation error
  const auto report = grad_check([&] { return conv2d(x, spec, w); }, targets, opt);
  CHECK_MESSAGE(report.passed, report.worst << " err " << report.max_rel_err);
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("conv1d examples") {
  const Tensor v = Tensor::from({1, 4, 1, 1}, {0.5, -1.0, 2.0, 3.5});
  const Tensor identity = Tensor::from({1, 1, 1, 3}, {0, 1, 0});
  CHECK((conv1d(v, identity).values() == v.values()).all());

  const Tensor ones = Tensor::from({1, 4, 1, 1}, {1, 1, 1, 1});
  const Tensor box = Tensor::from({1, 1, 1, 3}, {1, 1, 1});
  const auto expected = conv1d_oracle({1, 1, 1, 1}, {1, 1, 1});
  CHECK(expected == std::vector<double>{2, 3, 3, 2});
  CHECK(to_vector(conv1d(ones, box)) == expected);

  const Tensor single = Tensor::from({1, 1, 1, 1}, {5});
  const Tensor abc = Tensor::from({1, 1, 1, 3}, {7, 0.25, -3});
  CHECK(conv1d(single, abc).item() == 5 * 0.25);

  CHECK_THROWS_AS(conv1d(ones, Tensor::from({1, 1, 1, 2}, {1, 1})), Error);
}

TEST_CASE("conv1d agrees with the direct oracle on random inputs") {
  Rng rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 20; ++trial) {
    const int c = 1 + trial % 9;
    const int k = 1 + 2 * (trial % 3);
    std::vector<double> v(static_cast<std::size_t>(c)), w(static_cast<std::size_t>(k));
    for (auto& e : v) e = u(rng);
    for (auto& e : w) e = u(rng);
    const Tensor tv({1, c, 1, 1}, Eigen::Map<const Buffer>(v.data(), c));
    const Tensor tw({1, 1, 1, k}, Eigen::Map<const Buffer>(w.data(), k));
    const auto got = to_vector(conv1d(tv, tw));
    const auto want = conv1d_oracle(v, w);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-14));
  }
}

TEST_CASE("global pooling") {
  const Tensor constant = Tensor::full({1, 2, 3, 3}, 3.0);
  CHECK((global_avg_pool(constant).values() == 3.0).all());
  CHECK((global_max_pool(constant).values() == 3.0).all());

  Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4}, true);
  // enumeration: (1 + 2 + 3 + 4) / 4 and max{1, 2, 3, 4}
  CHECK(global_avg_pool(x).item() == 2.5);
  const Tensor m = global_max_pool(x);
  CHECK(m.item() == 4.0);
  m.backward();
  CHECK(to_vector(Tensor({1, 1, 2, 2}, x.grad())) == std::vector<double>{0, 0, 0, 1});

  Tensor ties = Tensor::from({1, 1, 2, 2}, {4, 1, 4, 4}, true);
  global_max_pool(ties).backward();
  CHECK(to_vector(Tensor({1, 1, 2, 2}, ties.grad())) == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("elementwise scalar examples") {
  CHECK(sigmoid(Tensor::zeros({1, 1, 1, 1})).item() == 0.5);
  const double s1 = 1.0 / (1.0 + std::exp(-1.0));
  CHECK(silu(Tensor::full({1, 1, 1, 1}, 1.0)).item() == doctest::Approx(s1).epsilon(1e-15));
  CHECK(s1 == doctest::Approx(0.731059).epsilon(1e-6));
  CHECK(softplus(Tensor::full({1, 1, 1, 1}, -800.0)).item() >= 0.0);
  CHECK(std::isfinite(softplus(Tensor::full({1, 1, 1, 1}, 800.0)).item()));
}

TEST_CASE("broadcast arithmetic") {
  const Tensor x = Tensor::from({1, 2, 1, 2}, {1, 2, 3, 4});
  const Tensor per_channel = Tensor::from({1, 2, 1, 1}, {10, 100});
  CHECK(to_vector(mul(x, per_channel)) == std::vector<double>{10, 20, 300, 400});
  CHECK(to_vector(add(x, per_channel)) == std::vector<double>{11, 12, 103, 104});
  CHECK_THROWS_AS(add(x, Tensor::zeros({1, 3, 1, 1})), Error);
}

TEST_CASE("split then concat reconstructs the input bit-exactly for every partition") {
  Rng rng(8);
  const Tensor x = Tensor::uniform({2, 6, 3, 2}, -5, 5, rng);
  // all compositions of 6 into positive parts
  for (int mask = 0; mask < (1 << 5); ++mask) {
    std::vector<Index> parts;
    Index run = 1;
    for (int i = 0; i < 5; ++i) {
      if (mask & (1 << i)) {
        parts.push_back(run);
        run = 1;
      } else {
        ++run;
      }
    }
    parts.push_back(run);
    const auto pieces = split_channels(x, std::span<const Index>(parts));
    const Tensor back = concat_channels(std::span<const Tensor>(pieces));
    REQUIRE(back.shape() == x.shape());
    CHECK((back.values() == x.values()).all());
  }
  CHECK_THROWS_AS(split_channels(x, {2, 2}), Error);
  CHECK_THROWS_AS(concat_channels({x, Tensor::zeros({2, 1, 3, 3})}), Error);
}

TEST_CASE("upsample and max-pool geometry") {
  const Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
  const Tensor up = upsample_nearest2x(x);
  CHECK(up.shape() == Shape{1, 1, 4, 4});
  CHECK(up.at(0, 0, 3, 0) == 3.0);
  Rng rng(2);
  const Tensor big = Tensor::uniform({1, 2, 8, 8}, -1, 1, rng);
  CHECK(max_pool2d(big, 5, 1, 2).shape() == big.shape());
  CHECK(max_pool2d(big, 2, 2, 0).shape() == Shape{1, 2, 4, 4});
}

TEST_CASE("grad_check harness examples") {
  const Tensor x = random_input({1, 2, 3, 3}, 1);
  const auto linear = grad_check([](const Tensor& t) { return sum(t); }, x);
  CHECK(linear.passed);
  CHECK(linear.max_rel_err < 1e-8);

  Tensor zero = Tensor::zeros({1, 3, 2, 2}, true);
  sum(sigmoid(zero)).backward();
  CHECK((zero.grad() == 0.25).all());
  const auto sig = grad_check([](const Tensor& t) { return sum(sigmoid(t)); }, Tensor::zeros({1, 3, 2, 2}));
  CHECK(sig.passed);

  const ConvSpec spec{2, 3, 3, 3, 1, 1, 1, true};
  Rng rng(4);
  const Tensor w = Tensor::uniform(spec.weight_shape(), -1, 1, rng);
  const Tensor b = Tensor::uniform({1, 3, 1, 1}, -1, 1, rng);
  const auto conv = grad_check([&](const Tensor& t) { return sum(conv2d(t, spec, w, b)); }, x);
  CHECK(conv.max_rel_err < 1e-6);
}

TEST_CASE("grad_check reports the op that produced non-finite values") {
  const Tensor x = Tensor::full({1, 1, 1, 2}, 800.0);
  const auto report = grad_check([](const Tensor& t) { return sum(exp(exp(t))); }, x);
  CHECK_FALSE(report.passed);
  CHECK(report.failure.find("exp") != std::string::npos);
}

TEST_CASE("every differentiable op passes grad_check on three random shapes") {
  Rng rng(99);
  for (const Shape& s : kSmallShapes) {
    CAPTURE(s.str());
    const Tensor x = random_input(s, static_cast<std::uint64_t>(s.numel()));
    const Tensor other = random_input(s, 1000 + static_cast<std::uint64_t>(s.numel()));
    const Tensor per_channel = random_input({1, s.c, 1, 1}, 7);
    auto check = [&](const char* name, const std::function<Tensor()>& f, std::vector<GradTarget> targets) {
      const auto r = grad_check(f, targets);
      CHECK_MESSAGE(r.passed, name << " worst " << r.worst << " err " << r.max_rel_err << " " << r.failure);
    };
    check("add", [&] { return add(x, other); }, {{"x", x}, {"y", other}});
    check("mul", [&] { return mul(x, other); }, {{"x", x}, {"y", other}});
    check("mul_bcast", [&] { return mul(x, per_channel); }, {{"x", x}, {"p", per_channel}});
    check("sub_bcast", [&] { return sub(x, per_channel); }, {{"x", x}, {"p", per_channel}});
    check("sigmoid", [&] { return sigmoid(x); }, {{"x", x}});
    check("silu", [&] { return silu(x); }, {{"x", x}});
    check("softplus", [&] { return softplus(x); }, {{"x", x}});
    check("exp", [&] { return exp(x); }, {{"x", x}});
    check("mean", [&] { return mean(mul(x, x)); }, {{"x", x}});
    check("gap", [&] { return global_avg_pool(x); }, {{"x", x}});
    check("gmp", [&] { return global_max_pool(x); }, {{"x", x}});
    check("conv1d", [&] {
      const Tensor k = Tensor::from({1, 1, 1, 3}, {0.3, -0.7, 1.1});
      return conv1d(global_avg_pool(x), k);
    }, {{"x", x}});
    const Tensor k3 = random_input({1, 1, 1, 3}, 5);
    check("conv1d_kernel", [&] { return conv1d(add(global_avg_pool(x), global_max_pool(x)), k3); },
          {{"x", x}, {"k", k3}});
    check("maxpool", [&] { return max_pool2d(x, 3, 1, 1); }, {{"x", x}});
    check("upsample", [&] { return upsample_nearest2x(x); }, {{"x", x}});
    check("split_concat", [&] {
      const auto parts = split_channels(x, std::initializer_list<Index>{1, s.c - 1});
      return concat_channels({silu(parts[1]), parts[0]});
    }, {{"x", x}});
    const Tensor gain = random_input({1, s.c, 1, 1}, 31);
    const Tensor bias = random_input({1, s.c, 1, 1}, 32);
    check("layer_norm", [&] { return layer_norm_channels(x, gain, bias); }, {{"x", x}, {"g", gain}, {"b", bias}});
    BatchNormStats stats{Tensor::zeros({1, s.c, 1, 1}), Tensor::full({1, s.c, 1, 1}, 1.0)};
    check("batch_norm", [&] { return batch_norm(x, gain, bias, stats, true); }, {{"x", x}, {"g", gain}, {"b", bias}});
    check("batch_norm_eval", [&] { return batch_norm(x, gain, bias, stats, false); }, {{"x", x}, {"g", gain}, {"b", bias}});
    for (const ConvSpec spec : {ConvSpec{s.c, 3, 3, 3, 1, 1, 1, true}, ConvSpec{s.c, 2, 3, 3, 2, 1, 1, false},
                                ConvSpec{s.c, s.c, 3, 3, 1, 1, s.c, true}, ConvSpec{s.c, 5, 1, 1, 1, 0, 1, true}}) {
      const Tensor w = random_input(spec.weight_shape(), 41 + static_cast<std::uint64_t>(spec.out_channels));
      const Tensor b = random_input({1, spec.out_channels, 1, 1}, 43);
      if (spec.bias) {
        check("conv2d", [&] { return conv2d(x, spec, w, b); }, {{"x", x}, {"w", w}, {"b", b}});
      } else {
        check("conv2d", [&] { return conv2d(x, spec, w); }, {{"x", x}, {"w", w}});
      }
    }
  }
}

TEST_CASE("batch norm updates running statistics only in training mode") {
  Rng rng(6);
  const Tensor x = Tensor::uniform({4, 2, 3, 3}, 0, 2, rng);
  BatchNormStats stats{Tensor::zeros({1, 2, 1, 1}), Tensor::full({1, 2, 1, 1}, 1.0)};
  const Tensor g = Tensor::full({1, 2, 1, 1}, 1.0);
  const Tensor b = Tensor::zeros({1, 2, 1, 1});
  const Tensor y = batch_norm(x, g, b, stats, true);
  CHECK(std::abs(y.values().mean()) < 1e-12);
  CHECK(stats.running_mean.values()[0] > 0.0);
  const Buffer frozen = stats.running_mean.values();
  batch_norm(x, g, b, stats, false);
  CHECK((stats.running_mean.values() == frozen).all());
}

TEST_CASE("forward evaluation is deterministic") {
  auto run = [] {
    Rng rng(1234);
    const Tensor x = Tensor::uniform({2, 3, 6, 6}, -1, 1, rng);
    const ConvSpec spec{3, 4, 3, 3, 1, 1, 1, true};
    const Tensor w = Tensor::uniform(spec.weight_shape(), -1, 1, rng);
    const Tensor b = Tensor::uniform({1, 4, 1, 1}, -1, 1, rng);
    return silu(conv2d(x, spec, w, b)).values();
  };
  CHECK((run() == run()).all());
}

TEST_CASE("tensor snapshot layout and round trip") {
  Rng rng(17);
  const Tensor t = Tensor::uniform({2, 3, 4, 5}, -1e3, 1e3, rng);
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  REQUIRE(bytes.size() == 4 + 4 + 16 + 8 * 120);
  CHECK(bytes.substr(0, 4) == "FABT");
  CHECK(static_cast<unsigned char>(bytes[4]) == 4);
  CHECK(static_cast<unsigned char>(bytes[8]) == 2);
  CHECK(static_cast<unsigned char>(bytes[12]) == 3);
  const Tensor back = read_tensor(ss);
  CHECK(back.shape() == t.shape());
  CHECK((back.values() == t.values()).all());

  std::stringstream truncated(bytes.substr(0, 30));
  CHECK_THROWS_AS(read_tensor(truncated), Error);
  std::stringstream bad("XXXX");
  CHECK_THROWS_AS(read_tensor(bad), Error);
}

TEST_CASE("checkpoint round trip") {
  const auto path = std::filesystem::temp_directory_path() / "fabme_test_checkpoint.fabk";
  Rng rng(18);
  const std::vector<NamedTensor> records{{"backbone.3.c2f.conv1.weight", Tensor::uniform({4, 2, 3, 3}, -1, 1, rng)},
                                         {"head.bias", Tensor::uniform({1, 5, 1, 1}, -1, 1, rng)}};
  save_checkpoint(path, records);
  const auto back = load_checkpoint(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == records[0].name);
  CHECK((back[1].tensor.values() == records[1].tensor.values()).all());
  std::filesystem::remove(path);
}
