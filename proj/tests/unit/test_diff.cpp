#include <doctest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

#include "helpers.hpp"
#include "tal/diff/checkpoint.hpp"
#include "tal/diff/dft.hpp"
#include "tal/diff/gradcheck.hpp"
#include "tal/diff/graph.hpp"
#include "tal/errors.hpp"

using namespace tal;
using diff::Array;
using diff::Bindings;
using diff::Graph;

namespace {

Array eval_unary(Array x, diff::NodeId (Graph::*op)(diff::NodeId)) {
  Graph g;
  auto out = (g.*op)(g.input("x"));
  g.forward(Bindings().bind("x", std::move(x)));
  return g.value(out);
}

}  // namespace

TEST_CASE("array rejects data that does not fill its shape") {
  CHECK_THROWS_AS(Array({2, 3}, std::vector<double>(5)), std::invalid_argument);
  CHECK(Array({2, 3}).size() == 6);
}

TEST_CASE("relu and sigmoid values") {
  CHECK(eval_unary(Array::vector({-1, 0, 2}), &Graph::relu) == Array::vector({0, 0, 2}));
  CHECK(eval_unary(Array::scalar(0.0), &Graph::sigmoid)[0] == 0.5);
}

TEST_CASE("depthwise conv with an identity kernel is the identity") {
  Graph g;
  auto out = g.conv(g.input("x"), g.input("w"), g.input("b"), 1, diff::kDepthwise);
  Bindings b;
  b.bind("x", Array::matrix(1, 4, {1, 2, 3, 4}))
      .bind("w", Array({1, 1, 3}, std::vector<double>{0, 1, 0}))
      .bind("b", Array({1}));
  g.forward(b);
  CHECK(g.value(out) == Array::matrix(1, 4, {1, 2, 3, 4}));
}

TEST_CASE("gradient of sum of squares") {
  Graph g;
  auto x = g.input("x");
  auto out = g.sum(g.mul(x, x));
  g.forward(Bindings().bind("x", Array::vector({1, 2})));
  g.backward(out, Array::scalar(1.0));
  CHECK(g.grad(x) == Array::vector({2, 4}));
}

TEST_CASE("relu gradient at zero is zero") {
  Graph g;
  auto x = g.input("x");
  auto out = g.sum(g.relu(x));
  g.forward(Bindings().bind("x", Array::vector({0.0, 1.0})));
  g.backward(out, Array::scalar(1.0));
  CHECK(g.grad(x) == Array::vector({0.0, 1.0}));
}

TEST_CASE("backward before forward is rejected") {
  Graph g;
  auto out = g.sum(g.input("x"));
  CHECK_THROWS_AS(g.backward(out, Array::scalar(1.0)), std::logic_error);
}

TEST_CASE("shape mismatch names the offending node") {
  Graph g;
  auto a = g.input("a");
  auto bad = g.add(a, g.input("b"));
  try {
    g.forward(Bindings().bind("a", Array({2, 3})).bind("b", Array({3, 2})));
    FAIL("expected a ShapeError");
  } catch (const ShapeError& e) {
    CHECK(e.node() == bad);
  }
}

TEST_CASE("non-finite intermediate is rejected") {
  Graph g;
  g.scale(g.input("x"), 1e300);
  CHECK_THROWS_AS(g.forward(Bindings().bind("x", Array::scalar(1e300))), NumericError);
}

TEST_CASE("unbound input is rejected") {
  Graph g;
  g.relu(g.input("missing"));
  CHECK_THROWS_AS(g.forward(Bindings()), ShapeError);
}

TEST_CASE("fd_check on a linear map is exact") {
  std::mt19937_64 rng(5);
  Graph g;
  auto out = g.sum(g.linear(g.input("x"), g.input("w"), g.input("b")));
  Bindings b;
  b.bind("x", test::random_array({3, 6}, rng)).bind("w", test::random_array({2, 3}, rng)).bind("b", Array({2}));
  CHECK(diff::fd_check(g, b, out, "w") < 1e-9);
  CHECK(diff::fd_check(g, b, out, "x") < 1e-9);
}

TEST_CASE("fd_check on a sigmoid chain") {
  std::mt19937_64 rng(6);
  Graph g;
  auto x = g.input("x");
  auto out = g.sum(g.mul(g.sigmoid(g.sigmoid(x)), x));
  Bindings b;
  b.bind("x", test::random_array({2, 5}, rng));
  CHECK(diff::fd_check(g, b, out, "x") < 1e-6);
}

TEST_CASE("fd_check tolerates a kink inside the step but not a wrong slope") {
  // relu kink 4e-6 from the point: the central difference alone reads 3 * 0.7.
  // A doubled slope stays far from the central and both one-sided differences.
  auto f = [](const Array& a) { return 3.0 * std::max(0.0, a[0]); };
  const Array point = Array::vector({4e-6});
  CHECK(diff::fd_check(f, point, Array::vector({3.0})) < 1e-9);
  CHECK(diff::fd_check(f, point, Array::vector({6.0})) > 0.4);
  CHECK(diff::fd_check(f, Array::vector({-4e-6}), Array::vector({0.0})) < 1e-9);
  CHECK(diff::fd_check(f, Array::vector({-4e-6}), Array::vector({6.0})) > 0.4);
}

TEST_CASE("fd_check rejects non-scalar outputs") {
  Graph g;
  auto out = g.relu(g.input("x"));
  Bindings b;
  b.bind("x", Array::vector({1, 2}));
  g.forward(b);
  CHECK_THROWS_AS(diff::fd_check(g, b, out, "x"), std::invalid_argument);
}

TEST_CASE("graph evaluation is deterministic") {
  std::mt19937_64 rng(7);
  const Array x = test::random_array({4, 16}, rng);
  auto run = [&] {
    Graph g;
    auto out = g.idft_real(g.dft(g.sigmoid(g.input("x"))));
    g.forward(Bindings().bind("x", x));
    return g.value(out);
  };
  CHECK(run() == run());
}

TEST_CASE("dft of an impulse is flat and of a constant is DC only") {
  auto impulse = diff::dft(Array::matrix(1, 4, {1, 0, 0, 0}));
  CHECK(impulse.real == Array::matrix(1, 4, {1, 1, 1, 1}));
  for (double v : impulse.imag.values()) CHECK(v == doctest::Approx(0.0));

  const double c = 2.5;
  auto flat = diff::dft(Array::matrix(1, 4, {c, c, c, c}));
  CHECK(flat.real[0] == doctest::Approx(4 * c));
  for (std::size_t u = 1; u < 4; ++u) {
    CHECK(std::abs(flat.real[u]) < 1e-12);
    CHECK(std::abs(flat.imag[u]) < 1e-12);
  }
}

TEST_CASE("dft matches the direct sum and inverts, for radix-2 and odd lengths") {
  std::mt19937_64 rng(8);
  for (std::size_t n : {1u, 2u, 5u, 8u, 33u, 64u}) {
    const Array x = test::random_array({2, n}, rng);
    const auto X = diff::dft(x);
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t u = 0; u < n; ++u) {
        std::complex<double> acc = 0.0;
        for (std::size_t t = 0; t < n; ++t) {
          acc += x.at(r, t) * std::polar(1.0, -2.0 * std::numbers::pi * double(u * t % n) / double(n));
        }
        CHECK(std::abs(X.real.at(r, u) - acc.real()) < 1e-9);
        CHECK(std::abs(X.imag.at(r, u) - acc.imag()) < 1e-9);
      }
    }
    const Array back = diff::idft_real(X);
    CHECK(diff::max_abs_diff(back, x) < 1e-9);
  }
}

TEST_CASE("checkpoint round trip is exact for float32 values and stable in bytes") {
  std::mt19937_64 rng(9);
  diff::ParamSet p;
  p.set("b.w", test::random_array({3, 2, 3}, rng));
  p.set("a.b", test::random_array({3}, rng));
  const diff::ParamSet rounded = diff::round_to_f32(p);
  const auto bytes = diff::encode_checkpoint(p);
  CHECK(diff::decode_checkpoint(bytes) == rounded);
  CHECK(diff::encode_checkpoint(rounded) == bytes);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_AS(diff::decode_checkpoint(truncated), IoError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(diff::decode_checkpoint(bad_magic), IoError);

  test::TempDir dir("ckpt");
  diff::save_checkpoint(dir.path() / "p.ckpt", p);
  CHECK(diff::load_checkpoint(dir.path() / "p.ckpt") == rounded);
  CHECK_THROWS_AS(diff::load_checkpoint(dir.path() / "missing.ckpt"), IoError);
}
