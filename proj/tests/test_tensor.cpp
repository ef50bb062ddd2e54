#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "meta/autograd.hpp"
#include "meta/ops.hpp"
#include "meta/snapshot.hpp"

using namespace meta;
using testutil::gradcheck;
using testutil::project;
using testutil::random_tensor;

namespace {

// Shifts values away from zero so relu kinks stay at least `gap` away.
Tensor away_from_zero(Tensor t, double gap = 1e-3) {
  for (double& v : t.data)
    if (std::abs(v) < gap) v = v < 0 ? -gap - std::abs(v) : gap + v;
  return t;
}

}  // namespace

TEST_CASE("tensor construction validates shape") {
  CHECK_THROWS_AS(Tensor({2, 0}), Error);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), Error);
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK_FALSE(t.has_grad());
}

TEST_CASE("relu example") {
  Tape tape;
  Var y = relu(tape.constant(Tensor({3}, std::vector<double>{-1, 0, 2})));
  CHECK(y.value().data == std::vector<double>{0, 0, 2});
}

TEST_CASE("global average pool of a constant tensor") {
  Tape tape;
  Var y = global_average_pool(tape.constant(Tensor({1, 2, 2, 2}, 3.0)));
  CHECK(y.shape() == Shape{1, 2});
  CHECK(y.value().data == std::vector<double>{3, 3});
}

TEST_CASE("identity-centred conv kernel leaves input unchanged") {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({2, 3, 5, 4}, rng);
  Tensor w({3, 3, 3, 3}, 0.0);
  for (std::size_t c = 0; c < 3; ++c) w.data[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
  Tape tape;
  Var y = conv2d(tape.constant(x), tape.constant(w));
  CHECK(y.value().data == x.data);
}

TEST_CASE("conv2d matches a direct loop") {
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({2, 3, 4, 5}, rng), w = random_tensor({4, 3, 3, 3}, rng);
  Tape tape;
  Var y = conv2d(tape.constant(x), tape.constant(w));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 5; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < 3; ++c)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const int yy = i + dy, xx = j + dx;
                if (yy < 0 || yy >= 4 || xx < 0 || xx >= 5) continue;
                s += w.data[((o * 3 + c) * 3 + (dy + 1)) * 3 + (dx + 1)] * x.data[((n * 3 + c) * 4 + yy) * 5 + xx];
              }
          CHECK(y.value().data[((n * 4 + o) * 4 + i) * 5 + j] == Catch::Approx(s).epsilon(1e-12));
        }
}

TEST_CASE("backward examples") {
  SECTION("sum of squares") {
    Tape tape;
    Var x = tape.leaf(Tensor({2}, std::vector<double>{1, 2}));
    tape.backward(sum(mul(x, x)));
    CHECK(x.grad() == std::vector<double>{2, 4});
  }
  SECTION("mean of relu") {
    Tape tape;
    Var x = tape.leaf(Tensor({2}, std::vector<double>{-1, 3}));
    tape.backward(mean(relu(x)));
    CHECK(x.grad() == std::vector<double>{0, 0.5});
  }
  SECTION("repeated backward accumulates") {
    Tape tape;
    Var x = tape.leaf(Tensor({2}, std::vector<double>{1, 2}));
    Var y = sum(mul(x, x));
    tape.backward(y);
    tape.backward(y);
    CHECK(x.grad() == std::vector<double>{4, 8});
  }
  SECTION("non-scalar root is rejected") {
    Tape tape;
    Var x = tape.leaf(Tensor({2}, 1.0));
    CHECK_THROWS_AS(tape.backward(x), Error);
  }
}

TEST_CASE("parameter gradients land in the parameter") {
  Parameter p("w", Tensor({3}, std::vector<double>{1, -2, 3}));
  Tape tape;
  tape.backward(sum(mul(tape.param(p), tape.param(p))));
  CHECK(p.value.grad == std::vector<double>{2, -4, 6});
}

TEST_CASE("shape mismatch names both shapes") {
  Tape tape;
  Var a = tape.constant(Tensor({2, 3}));
  Var b = tape.constant(Tensor({3, 2}));
  try {
    add(a, b);
    FAIL("expected a shape error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::shape);
    const std::string msg = e.what();
    CHECK(msg.find("(2,3)") != std::string::npos);
    CHECK(msg.find("(3,2)") != std::string::npos);
  }
}

TEST_CASE("strict mode rejects non-finite inputs") {
  Tape tape(Tape::Options{true});
  Tensor t({2}, std::vector<double>{1.0, std::nan("")});
  CHECK_THROWS_AS(tape.constant(t), Error);
  Tape lax;
  CHECK_NOTHROW(relu(lax.constant(t)));
}

TEST_CASE("softmax sums to one and ignores constant shifts") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({4, 7}, rng, -5, 5);
    Tensor shifted = x;
    for (double& v : shifted.data) v += 12.5;
    Tape tape;
    Var p = softmax(tape.constant(x));
    Var q = softmax(tape.constant(shifted));
    for (std::size_t n = 0; n < 4; ++n) {
      double s = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        s += p.value().data[n * 7 + j];
        CHECK(std::abs(p.value().data[n * 7 + j] - q.value().data[n * 7 + j]) < 1e-9);
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("pairwise distance and axis reductions") {
  Tape tape;
  Var x = tape.constant(Tensor({3, 2}, std::vector<double>{0, 0, 3, 4, 0, 1}));
  Var d = pairwise_distance(x);
  CHECK(d.value().data[1] == Catch::Approx(5.0));
  CHECK(d.value().data[2] == Catch::Approx(1.0));
  CHECK(d.value().data[0] == 0.0);
  Var s0 = sum_axis(x, 0);
  CHECK(s0.value().data == std::vector<double>{3, 5});
  Var m1 = mean_axis(x, 1);
  CHECK(m1.value().data == std::vector<double>{0, 3.5, 0.5});
}

TEST_CASE("gradient checks on every op") {
  std::mt19937_64 rng(4);
  using testutil::LossFn;
  auto check = [&](const LossFn& f, std::vector<Tensor> in) { CHECK(gradcheck(f, in) < 1e-4); };
  for (int trial = 0; trial < 5; ++trial) {
    const std::uint64_t s = 100 + trial;
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
    Tensor pos = random_tensor({3, 4}, rng, 0.5, 2.0);
    check([s](Tape& t, const auto& v) { return project(t, add(v[0], v[1]), s); }, {a, b});
    check([s](Tape& t, const auto& v) { return project(t, sub(v[0], v[1]), s); }, {a, b});
    check([s](Tape& t, const auto& v) { return project(t, mul(v[0], v[1]), s); }, {a, b});
    check([s](Tape& t, const auto& v) { return project(t, div(v[0], v[1]), s); }, {a, pos});
    check([s](Tape& t, const auto& v) { return project(t, relu(v[0]), s); }, {away_from_zero(a)});
    check([s](Tape& t, const auto& v) { return project(t, exp(v[0]), s); }, {a});
    check([s](Tape& t, const auto& v) { return project(t, log(v[0]), s); }, {pos});
    check([s](Tape& t, const auto& v) { return project(t, sqrt(v[0]), s); }, {pos});
    check([s](Tape& t, const auto& v) { return project(t, softmax(v[0]), s); }, {a});
    check([s](Tape& t, const auto& v) { return project(t, sum_axis(v[0], 1), s); }, {a});
    check([s](Tape& t, const auto& v) { return project(t, mean_axis(v[0], 0), s); }, {a});
    check([s](Tape& t, const auto& v) { return project(t, concat({v[0], v[1]}, 1), s); }, {a, b});
    check([s](Tape& t, const auto& v) { return project(t, slice(v[0], 1, 1, 3), s); }, {a});
    check([s](Tape& t, const auto& v) { return project(t, pairwise_distance(v[0]), s); }, {a});
    check([s](Tape& t, const auto& v) { return project(t, matmul(v[0], v[1]), s); }, {a, random_tensor({4, 2}, rng)});
    check([s](Tape& t, const auto& v) { return project(t, linear(v[0], v[1], v[2]), s); },
          {a, random_tensor({5, 4}, rng), random_tensor({5}, rng)});
    check([s](Tape& t, const auto& v) { return project(t, conv2d(v[0], v[1]), s); },
          {random_tensor({2, 2, 3, 4}, rng), random_tensor({3, 2, 3, 3}, rng)});
    check([s](Tape& t, const auto& v) { return project(t, global_average_pool(v[0]), s); }, {random_tensor({2, 3, 2, 2}, rng)});
    check([s](Tape& t, const auto& v) { return project(t, scale_rows(v[0], v[1]), s); }, {a, random_tensor({3, 1}, rng)});
    const std::vector<std::size_t> labels{0, 3, 1};
    check([labels](Tape&, const auto& v) { return softmax_cross_entropy(v[0], labels); }, {a});
  }
}

TEST_CASE("tape replay is bit-identical") {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({2, 3, 4, 4}, rng), w = random_tensor({4, 3, 3, 3}, rng);
  auto run = [&] {
    Tape tape;
    Var xv = tape.leaf(x), wv = tape.leaf(w);
    tape.backward(sum(relu(conv2d(xv, wv))));
    return std::pair{xv.grad(), wv.grad()};
  };
  CHECK(run() == run());
}

TEST_CASE("no-grad guard records constants") {
  Tape tape;
  Var x = tape.leaf(Tensor({2}, 1.0));
  {
    Tape::NoGradGuard ng(tape);
    Var y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(mul(x, x).requires_grad());
}

TEST_CASE("snapshot container round trip and format guards") {
  Snapshot snap{{"a.weight", Tensor({2, 3}, std::vector<double>{1, 2, 3, 4, 5, -0.0})}, {"b", Tensor({1}, 7.25)}};
  auto bytes = encode_snapshot(snap).buffer();
  CHECK(bytes.size() == 6 + 4 + 4 + (2 + 8 + 1 + 8 + 48) + (2 + 1 + 1 + 4 + 8));
  binio::Reader r(bytes);
  CHECK(decode_snapshot(r) == snap);

  auto bad = bytes;
  bad[0] = 'X';
  binio::Reader rb(bad);
  CHECK_THROWS_AS(decode_snapshot(rb), Error);

  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  binio::Reader rt(truncated);
  try {
    decode_snapshot(rt);
    FAIL("expected truncation error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }

  Snapshot dup{{"x", Tensor({1})}, {"x", Tensor({1})}};
  CHECK_THROWS_AS(encode_snapshot(dup), Error);
}
