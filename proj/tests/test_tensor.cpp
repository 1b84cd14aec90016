#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "casl/checkpoint.hpp"
#include "casl/tensor.hpp"

using namespace casl;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true,
                     double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  std::vector<double> values(n);
  for (double& v : values) v = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(values), requires_grad);
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// Central-difference check of every element of every leaf against the
// analytic gradients produced by one backward pass.
template <typename MakeLoss>
void check_gradients(std::vector<Tensor> leaves, MakeLoss make_loss,
                     double step = 1e-5, double tol = 1e-4) {
  Tensor loss = make_loss();
  for (Tensor& leaf : leaves) leaf.zero_grad();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (Tensor& leaf : leaves) {
    REQUIRE(leaf.has_grad());
    analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
  }
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto data = leaves[l].raw_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + step;
      const double up = make_loss().value();
      data[i] = saved - step;
      const double down = make_loss().value();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      INFO("leaf ", l, " element ", i, " analytic ", analytic[l][i],
           " numeric ", numeric);
      CHECK(rel_err(analytic[l][i], numeric) < tol);
    }
  }
}

// Independent sum-of-products oracle.
std::vector<double> matmul_oracle(const Tensor& a, const Tensor& b) {
  const std::size_t r = a.shape()[0], k = a.shape()[1], c = b.shape()[1];
  std::vector<double> out(r * c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t m = 0; m < k; ++m)
        out[i * c + j] += a.data()[i * k + m] * b.data()[m * c + j];
  return out;
}

// Direct six-nested-loop cross-correlation with the stride-2 "same" scheme
// (shortfall padded at the bottom/right).
std::vector<double> conv_oracle(const Tensor& in, const Tensor& k,
                                const Tensor& bias) {
  const long ci = static_cast<long>(in.shape()[0]);
  const long h = static_cast<long>(in.shape()[1]);
  const long w = static_cast<long>(in.shape()[2]);
  const long co = static_cast<long>(k.shape()[0]);
  const long oh = (h + 1) / 2, ow = (w + 1) / 2;
  const long pad_h = std::max(0l, ((oh - 1) * 2 + 3 - h) / 2);
  const long pad_w = std::max(0l, ((ow - 1) * 2 + 3 - w) / 2);
  std::vector<double> out(co * oh * ow, 0.0);
  for (long o = 0; o < co; ++o)
    for (long y = 0; y < oh; ++y)
      for (long x = 0; x < ow; ++x) {
        double acc = bias.data()[o];
        for (long c = 0; c < ci; ++c)
          for (long ky = 0; ky < 3; ++ky)
            for (long kx = 0; kx < 3; ++kx) {
              const long iy = y * 2 - pad_h + ky;
              const long ix = x * 2 - pad_w + kx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += k.data()[((o * ci + c) * 3 + ky) * 3 + kx] *
                     in.data()[(c * h + iy) * w + ix];
            }
        out[(o * oh + y) * ow + x] = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("matmul identity and hand values") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor v = Tensor::from_data({2, 1}, {3, 4});
  Tensor out = matmul(eye, v);
  CHECK(out.data()[0] == 3.0);
  CHECK(out.data()[1] == 4.0);

  Tensor row = Tensor::from_data({1, 2}, {1, 2});
  Tensor col = Tensor::from_data({2, 1}, {3, 4});
  CHECK(matmul(row, col).data()[0] == doctest::Approx(11.0));
}

TEST_CASE("matmul matches naive triple-loop oracle") {
  std::mt19937_64 rng(7);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor out = matmul(a, b);
  std::vector<double> expect = matmul_oracle(a, b);
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(out.data()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected shape rejection");
  } catch (const std::invalid_argument& err) {
    const std::string msg = err.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("matmul") != std::string::npos);
  }
}

TEST_CASE("conv2d zero input stays zero") {
  std::mt19937_64 rng(3);
  Tensor in = Tensor::zeros({2, 8, 8});
  Tensor k = random_tensor({4, 2, 3, 3}, rng);
  Tensor bias = Tensor::zeros({4});
  Tensor out = conv2d(in, k, bias);
  for (double v : out.data()) CHECK(v == 0.0);
}

TEST_CASE("conv2d hand-evaluated sliding window on ones") {
  Tensor in = Tensor::full({1, 4, 4}, 1.0);
  Tensor k = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor bias = Tensor::zeros({1});
  Tensor out = conv2d(in, k, bias);
  REQUIRE(out.shape() == Shape{1, 2, 2});
  CHECK(out.data()[0] == doctest::Approx(9.0));  // fully interior window
  CHECK(out.data()[1] == doctest::Approx(6.0));
  CHECK(out.data()[2] == doctest::Approx(6.0));
  CHECK(out.data()[3] == doctest::Approx(4.0));  // corner window
}

TEST_CASE("conv2d matches six-nested-loop oracle") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    std::mt19937_64 rng(100 + seed);
    Tensor in = random_tensor({3, 7, 5}, rng);
    Tensor k = random_tensor({2, 3, 3, 3}, rng);
    Tensor bias = random_tensor({2}, rng);
    Tensor out = conv2d(in, k, bias);
    std::vector<double> expect = conv_oracle(in, k, bias);
    REQUIRE(out.size() == expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i)
      CHECK(out.data()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv2d output extent is ceil(H/2)") {
  std::mt19937_64 rng(4);
  Tensor k = random_tensor({1, 1, 3, 3}, rng);
  Tensor bias = Tensor::zeros({1});
  CHECK(conv2d(Tensor::zeros({1, 32, 32}), k, bias).shape() == Shape{1, 16, 16});
  CHECK(conv2d(Tensor::zeros({1, 5, 9}), k, bias).shape() == Shape{1, 3, 5});
}

TEST_CASE("conv2d rejects channel mismatch") {
  Tensor in = Tensor::zeros({2, 4, 4});
  Tensor k = Tensor::zeros({4, 3, 3, 3});
  Tensor bias = Tensor::zeros({4});
  CHECK_THROWS_AS(conv2d(in, k, bias), std::invalid_argument);
}

TEST_CASE("softmax trivial values") {
  Tensor two = softmax(Tensor::from_data({2}, {0.0, 0.0}));
  CHECK(two.data()[0] == doctest::Approx(0.5));
  CHECK(two.data()[1] == doctest::Approx(0.5));

  Tensor big = softmax(Tensor::from_data({3}, {1000.0, 1000.0, 1000.0}));
  for (double v : big.data()) {
    CHECK(std::isfinite(v));
    CHECK(v == doctest::Approx(1.0 / 3.0));
  }
}

TEST_CASE("softmax matches extended-precision direct formula") {
  Tensor out = softmax(Tensor::from_data({3}, {1.0, 2.0, 3.0}));
  long double denom = 0.0L;
  for (double v : {1.0, 2.0, 3.0}) denom += expl(static_cast<long double>(v));
  for (std::size_t i = 0; i < 3; ++i) {
    const long double expect = expl(static_cast<long double>(i + 1)) / denom;
    CHECK(out.data()[i] ==
          doctest::Approx(static_cast<double>(expect)).epsilon(1e-14));
  }
}

TEST_CASE("softmax simplex and shift invariance") {
  std::mt19937_64 rng(11);
  for (int seed = 0; seed < 10; ++seed) {
    Tensor v = random_tensor({6}, rng, false, -30.0, 30.0);
    Tensor p = softmax(v);
    double total = 0.0;
    for (double x : p.data()) {
      CHECK(x > 0.0);
      total += x;
    }
    CHECK(std::abs(total - 1.0) < 1e-12);

    std::vector<double> shifted(v.data().begin(), v.data().end());
    for (double& x : shifted) x += 17.25;
    Tensor p2 = softmax(Tensor::from_data({6}, shifted));
    for (std::size_t i = 0; i < 6; ++i)
      CHECK(std::abs(p.data()[i] - p2.data()[i]) < 1e-12);
  }
}

TEST_CASE("softmax rejects NaN input") {
  Tensor v = Tensor::from_data({2}, {0.0, std::nan("")});
  CHECK_THROWS_AS(softmax(v), std::invalid_argument);
}

TEST_CASE("reverse accumulation trivial gradients") {
  Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  Tensor y = Tensor::from_data({3}, {1, 2, 3}, true);
  backward(sum(hadamard(y, y)));
  CHECK(y.grad()[0] == doctest::Approx(2.0));
  CHECK(y.grad()[1] == doctest::Approx(4.0));
  CHECK(y.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  CHECK_THROWS_AS(backward(add(x, x)), std::invalid_argument);
}

TEST_CASE("backward flags non-finite gradients with the node tag") {
  Tensor x = Tensor::from_data({1}, {1e308}, true);
  Tensor doubled = scale(x, 2.0);  // overflows downstream
  Tensor loss = sum(hadamard(doubled, doubled));
  try {
    backward(loss);
    FAIL("expected NumericError");
  } catch (const NumericError& err) {
    CHECK(std::string(err.what()).find("node") != std::string::npos);
  }
}

TEST_CASE("hadamard backward is exactly the other factor") {
  std::mt19937_64 rng(23);
  Tensor a = random_tensor({5}, rng);
  Tensor b = random_tensor({5}, rng, false);
  backward(sum(hadamard(a, b)));
  for (std::size_t i = 0; i < 5; ++i) CHECK(a.grad()[i] == b.data()[i]);
}

TEST_CASE("concat then slice is the identity") {
  std::mt19937_64 rng(29);
  Tensor a = random_tensor({3}, rng);
  Tensor b = random_tensor({4}, rng);
  Tensor c = random_tensor({2}, rng);
  Tensor joined = concat({a, b, c});
  REQUIRE(joined.size() == 9);
  Tensor sa = slice(joined, 0, 3);
  Tensor sb = slice(joined, 3, 4);
  Tensor sc = slice(joined, 7, 2);
  for (std::size_t i = 0; i < 3; ++i) CHECK(sa.data()[i] == a.data()[i]);
  for (std::size_t i = 0; i < 4; ++i) CHECK(sb.data()[i] == b.data()[i]);
  for (std::size_t i = 0; i < 2; ++i) CHECK(sc.data()[i] == c.data()[i]);
}

TEST_CASE("no-grad mode records no graph") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = sum(hadamard(x, x));
  }
  CHECK(!y.requires_grad());
}

TEST_CASE("finite differences: every primitive, ten seeds") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    {
      Tensor a = random_tensor({3, 4}, rng);
      Tensor b = random_tensor({4, 2}, rng);
      check_gradients({a, b}, [&] { return sum(matmul(a, b)); });
    }
    {
      Tensor w = random_tensor({4, 6}, rng);
      Tensor x = random_tensor({6}, rng);
      check_gradients({w, x}, [&] { return sum(tanh(matvec(w, x))); });
    }
    {
      Tensor in = random_tensor({2, 6, 6}, rng);
      Tensor k = random_tensor({3, 2, 3, 3}, rng);
      Tensor bias = random_tensor({3}, rng);
      check_gradients({in, k, bias},
                      [&] { return sum(relu(conv2d(in, k, bias))); });
    }
    {
      Tensor a = random_tensor({5}, rng);
      Tensor b = random_tensor({5}, rng);
      check_gradients(
          {a, b}, [&] { return sum(hadamard(sigmoid(a), tanh(add(a, b)))); });
      check_gradients({a, b}, [&] { return sum(sub(relu(a), b)); });
    }
    {
      Tensor a = random_tensor({4}, rng);
      Tensor b = random_tensor({3}, rng);
      check_gradients({a, b}, [&] {
        Tensor joined = concat({a, b});
        Tensor p = softmax(joined);
        return sub(pick(p, 2), scale(log_sum_exp(slice(joined, 0, 4)), 0.5));
      });
    }
    {
      Tensor a = random_tensor({4}, rng);
      Tensor s = random_tensor({1}, rng);
      check_gradients({a, s}, [&] { return sum(scale_by(a, s)); });
    }
  }
}

TEST_CASE("checkpoint round-trip is value-exact at 32-bit precision") {
  std::mt19937_64 rng(31);
  Tensor a = random_tensor({3, 2}, rng);
  Tensor b = random_tensor({5}, rng);
  std::vector<CheckpointEntry> entries = {entry_from_tensor("layer.w", a),
                                          entry_from_tensor("layer.b", b)};
  const auto path = std::filesystem::temp_directory_path() / "casl_ckpt_test.bin";
  save_checkpoint(path, entries);
  auto loaded = load_checkpoint(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].name == "layer.w");
  CHECK(loaded[0].shape == Shape{3, 2});
  for (std::size_t i = 0; i < loaded[0].values.size(); ++i)
    CHECK(loaded[0].values[i] == static_cast<float>(a.data()[i]));

  Tensor restored = Tensor::zeros({3, 2});
  load_into_tensor(loaded[0], restored);
  for (std::size_t i = 0; i < restored.size(); ++i)
    CHECK(restored.data()[i] ==
          static_cast<double>(static_cast<float>(a.data()[i])));
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint load-then-save reproduces the file byte-exactly") {
  std::mt19937_64 rng(37);
  std::vector<CheckpointEntry> entries = {
      entry_from_tensor("a", random_tensor({4, 4}, rng)),
      entry_from_tensor("b", random_tensor({7}, rng)),
      entry_from_tensor("meta.seed", Tensor::from_data({4}, {1, 2, 3, 4}))};
  const auto dir = std::filesystem::temp_directory_path();
  const auto first = dir / "casl_ckpt_rt1.bin";
  const auto second = dir / "casl_ckpt_rt2.bin";
  save_checkpoint(first, entries);
  save_checkpoint(second, load_checkpoint(first));
  std::ifstream f1(first, std::ios::binary), f2(second, std::ios::binary);
  std::string bytes1((std::istreambuf_iterator<char>(f1)), {});
  std::string bytes2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(bytes1 == bytes2);
  CHECK(!bytes1.empty());
  std::filesystem::remove(first);
  std::filesystem::remove(second);
}

TEST_CASE("load_into_tensor rejects shape mismatch") {
  CheckpointEntry e{"w", {2, 2}, {1, 2, 3, 4}};
  Tensor t = Tensor::zeros({4});
  CHECK_THROWS_AS(load_into_tensor(e, t), std::invalid_argument);
}
