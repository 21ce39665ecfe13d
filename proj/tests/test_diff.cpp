#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fd_suite.hpp"
#include "posefield/diff.hpp"
#include "posefield/geom.hpp"

using namespace posefield;
using diff::Activation;
using diff::ParamStore;
using diff::Tape;
using diff::Tensor;

namespace {

std::string tmp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "posefield_diff_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

}  // namespace

TEST_SUITE("diff") {

TEST_CASE("square function has gradient 2x") {
  ParamStore store;
  store.add("x", Tensor::scalar(3.0));
  Tape t(&store);
  t.backward(t.square(t.param("x")));
  CHECK(store.grad("x").v[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("constant outputs produce zero gradients") {
  Rng rng(1);
  ParamStore store;
  store.add("x", Tensor::normal(rng, 3, 3, 1.0));
  Tape t(&store);
  int loss = t.mul_scalar(t.sum(t.param("x")), 0.0);
  t.backward(loss);
  CHECK(store.grad("x").v.abs().maxCoeff() == 0.0);
}

TEST_CASE("backward rejects non-scalar outputs") {
  ParamStore store;
  store.add("x", Tensor::zeros(2, 2));
  Tape t(&store);
  CHECK_THROWS_AS(t.backward(t.param("x")), std::invalid_argument);
}

TEST_CASE("two-layer perceptron gradient matches finite differences") {
  Rng rng(42);
  ParamStore store;
  store.add("net.w0", Tensor::normal(rng, 6, 10, 0.6));
  store.add("net.b0", Tensor::normal(rng, 1, 10, 0.2));
  store.add("net.w1", Tensor::normal(rng, 10, 3, 0.6));
  store.add("net.b1", Tensor::normal(rng, 1, 3, 0.2));
  Tensor input = Tensor::normal(rng, 5, 6, 1.0);
  Tensor target = Tensor::normal(rng, 5, 3, 1.0);

  auto loss_of = [&](Tape& t) {
    int h = t.activate(t.affine(t.constant(input), t.param("net.w0"), t.param("net.b0")),
                       Activation::Softplus);
    int y = t.affine(h, t.param("net.w1"), t.param("net.b1"));
    return t.mean(t.square(t.sub(y, t.constant(target))));
  };

  store.zero_grad();
  {
    Tape t(&store);
    t.backward(loss_of(t));
  }

  const double h = 1e-5;
  double max_rel = 0.0;
  int probes = 0;
  for (const auto& name : store.names()) {
    Tensor& val = store.value(name);
    for (long i = 0; i < val.size() && probes < 100; ++i, ++probes) {
      double orig = val.v[i];
      val.v[i] = orig + h;
      Tape tp(&store);
      double fp = tp.value(loss_of(tp)).v[0];
      val.v[i] = orig - h;
      Tape tm(&store);
      double fm = tm.value(loss_of(tm)).v[0];
      val.v[i] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double an = store.grad(name).v[i];
      max_rel = std::max(max_rel, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
    }
  }
  CHECK(probes == 100);
  CHECK(max_rel <= 1e-4);
}

TEST_CASE("mlp_forward layer semantics") {
  Rng rng(7);
  ParamStore store;
  Tensor w0 = Tensor::zeros(3, 2);
  Tensor b0 = Tensor::from_rows({{0.25, -1.5}});
  store.add("z.w0", w0);
  store.add("z.b0", b0);

  SUBCASE("zero weights pass the bias through") {
    Tape t(&store);
    int y = t.mlp_forward("z", 1, t.constant(Tensor::normal(rng, 4, 3, 1.0)),
                          Activation::Identity);
    for (int r = 0; r < 4; ++r) {
      CHECK(t.value(y).at(r, 0) == 0.25);
      CHECK(t.value(y).at(r, 1) == -1.5);
    }
  }

  SUBCASE("identity-initialized single layer reproduces the input") {
    Tensor eye = Tensor::zeros(3, 3);
    for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    store.add("id.w0", eye);
    store.add("id.b0", Tensor::zeros(1, 3));
    Tensor input = Tensor::normal(rng, 5, 3, 1.0);
    Tape t(&store);
    int y = t.mlp_forward("id", 1, t.constant(input), Activation::Identity);
    for (long i = 0; i < input.size(); ++i) CHECK(t.value(y).v[i] == input.v[i]);
  }

  SUBCASE("matches a hand-rolled two-layer oracle on fixed weights") {
    ParamStore s2;
    s2.add("m.w0", Tensor::from_rows({{0.5, -1.0}, {2.0, 0.25}}));
    s2.add("m.b0", Tensor::from_rows({{0.1, -0.2}}));
    s2.add("m.w1", Tensor::from_rows({{1.5}, {-0.5}}));
    s2.add("m.b1", Tensor::from_rows({{0.05}}));
    Tensor input = Tensor::from_rows({{0.3, -0.7}, {-1.2, 0.4}});
    Tape t(&s2);
    int y = t.mlp_forward("m", 2, t.constant(input), Activation::ReLU);

    // Plain-loop oracle, no shared code with the tape.
    for (int r = 0; r < 2; ++r) {
      double h0 = input.at(r, 0) * 0.5 + input.at(r, 1) * 2.0 + 0.1;
      double h1 = input.at(r, 0) * -1.0 + input.at(r, 1) * 0.25 - 0.2;
      h0 = h0 > 0 ? h0 : 0;
      h1 = h1 > 0 ? h1 : 0;
      double out = h0 * 1.5 + h1 * -0.5 + 0.05;
      out = out > 0 ? out : 0;
      CHECK(t.value(y).at(r, 0) == doctest::Approx(out).epsilon(1e-15));
    }
  }
}

TEST_CASE("gradient accumulation is linear") {
  Rng rng(9);
  ParamStore store;
  store.add("x", Tensor::normal(rng, 3, 2, 1.0));
  auto f = [](Tape& t) { return t.sum(t.square(t.param("x"))); };
  auto g = [](Tape& t) { return t.mean(t.sin(t.param("x"))); };

  store.zero_grad();
  {
    Tape t(&store);
    t.backward(f(t));
  }
  {
    Tape t(&store);
    t.backward(g(t));
  }
  Eigen::ArrayXd separate = store.grad("x").v;

  store.zero_grad();
  {
    Tape t(&store);
    t.backward(t.add(f(t), g(t)));
  }
  Eigen::ArrayXd combined = store.grad("x").v;
  CHECK((separate - combined).abs().maxCoeff() < 1e-14);
}

TEST_CASE("backward seed scale multiplies gradients") {
  ParamStore store;
  store.add("x", Tensor::scalar(2.0));
  Tape t(&store);
  int loss = t.square(t.param("x"));
  t.backward(loss, 0.25);
  CHECK(store.grad("x").v[0] == doctest::Approx(1.0));  // 0.25 * 4
  t.backward(loss, 0.75);
  CHECK(store.grad("x").v[0] == doctest::Approx(4.0));  // accumulated to 1 * 4
}

TEST_CASE("adam step edge cases and hand-computed update") {
  SUBCASE("zero gradient and zero decay leave parameters unchanged") {
    ParamStore store;
    store.add("x", Tensor::scalar(1.5));
    store.adam_step(0.1, 0.0);
    CHECK(store.value("x").v[0] == 1.5);
  }
  SUBCASE("zero learning rate leaves parameters unchanged") {
    ParamStore store;
    store.add("x", Tensor::scalar(1.5));
    store.grad("x").v[0] = 3.0;
    store.adam_step(0.0, 0.1);
    CHECK(store.value("x").v[0] == 1.5);
  }
  SUBCASE("single scalar step matches hand arithmetic") {
    ParamStore store;
    store.add("x", Tensor::scalar(1.0));
    store.grad("x").v[0] = 0.5;
    store.adam_step(0.01, 0.0);
    double m = 0.1 * 0.5, v = 0.001 * 0.25;
    double mhat = m / 0.1, vhat = v / 0.001;
    double expected = 1.0 - 0.01 * (mhat / (std::sqrt(vhat) + 1e-8));
    CHECK(store.value("x").v[0] == doctest::Approx(expected).epsilon(1e-14));
  }
  SUBCASE("non-finite gradient names the parameter") {
    ParamStore store;
    store.add("ok", Tensor::scalar(1.0));
    store.add("field.w0", Tensor::scalar(1.0));
    store.grad("field.w0").v[0] = std::nan("");
    CHECK_THROWS_WITH_AS(store.adam_step(0.01), "non-finite gradient in parameter field.w0",
                         std::runtime_error);
  }
  SUBCASE("weight decay respects the exemption flag") {
    ParamStore store;
    store.add("decayed", Tensor::scalar(1.0), true);
    store.add("exempt", Tensor::scalar(1.0), false);
    store.adam_step(0.1, 0.5);
    CHECK(store.value("decayed").v[0] == doctest::Approx(1.0 - 0.1 * 0.5 * 1.0));
    CHECK(store.value("exempt").v[0] == 1.0);
  }
}

TEST_CASE("learning rate schedule interpolates logarithmically") {
  CHECK(diff::lr_log_interp(0, 100, 5e-4, 5e-5) == doctest::Approx(5e-4));
  CHECK(diff::lr_log_interp(99, 100, 5e-4, 5e-5) == doctest::Approx(5e-5));
  double mid = diff::lr_log_interp(50, 101, 5e-4, 5e-5);
  CHECK(mid == doctest::Approx(std::sqrt(5e-4 * 5e-5)).epsilon(1e-12));
  CHECK(diff::lr_log_interp(0, 1, 3e-3, 1e-9) == 3e-3);
}

TEST_CASE("checkpoints roundtrip bit-exactly and validate shapes") {
  Rng rng(13);
  ParamStore store;
  store.add("a.w0", Tensor::normal(rng, 4, 3, 1.0));
  store.add("a.b0", Tensor::normal(rng, 1, 3, 1.0));
  store.add("b", Tensor::normal(rng, 2, 2, 1.0));
  auto path = tmp_path("ckpt.bin");
  store.save(path);

  Eigen::ArrayXd orig = store.value("a.w0").v;
  store.value("a.w0").v.setZero();
  store.load(path);
  CHECK((store.value("a.w0").v == orig).all());

  // Loading into a smaller store creates the missing entries in header order.
  ParamStore fresh;
  fresh.load(path);
  auto names = fresh.names();
  REQUIRE(names.size() == 3);
  CHECK(names[0] == "a.w0");
  CHECK(names[2] == "b");
  CHECK((fresh.value("b").v == store.value("b").v).all());

  ParamStore clash;
  clash.add("b", Tensor::zeros(3, 3));
  CHECK_THROWS(clash.load(path));
  CHECK_THROWS(fresh.load(tmp_path("missing.bin")));
}

TEST_CASE("gradient source routing is enforced and recorded") {
  ParamStore store;
  store.add("theta", Tensor::scalar(1.0));
  store.set_allowed_sources("theta", {"rgb"});

  Tape t(&store);
  int loss = t.square(t.param("theta"));
  CHECK_THROWS_AS(t.backward(loss, 1.0, "mra"), std::logic_error);
  t.backward(loss, 1.0, "rgb");
  CHECK(store.seen_sources("theta").count("rgb") == 1);
  store.clear_seen_sources();
  CHECK(store.seen_sources("theta").empty());
}

TEST_CASE("structured op values match independent oracles") {
  Rng rng(21);

  SUBCASE("quat_mul_rows agrees with the quaternion type") {
    ParamStore store;
    Tensor a(6, 4), b(6, 4);
    std::vector<UnitQuaternion> qa, qb;
    for (int r = 0; r < 6; ++r) {
      qa.push_back(random_rotation(rng));
      qb.push_back(random_rotation(rng));
      a.at(r, 0) = qa[r].w; a.at(r, 1) = qa[r].x; a.at(r, 2) = qa[r].y; a.at(r, 3) = qa[r].z;
      b.at(r, 0) = qb[r].w; b.at(r, 1) = qb[r].x; b.at(r, 2) = qb[r].y; b.at(r, 3) = qb[r].z;
    }
    Tape t(&store);
    int out = t.quat_mul_rows(t.constant(a), t.constant(b));
    for (int r = 0; r < 6; ++r) {
      UnitQuaternion prod = qa[r] * qb[r];
      // The tape op is the raw Hamilton product, no canonical sign flip.
      double sign = (prod.w != 0.0 && std::signbit(prod.w) != std::signbit(t.value(out).at(r, 0)))
                        ? -1.0 : 1.0;
      CHECK(t.value(out).at(r, 0) * sign == doctest::Approx(prod.w).epsilon(1e-12));
      CHECK(t.value(out).at(r, 1) * sign == doctest::Approx(prod.x).epsilon(1e-12));
      CHECK(t.value(out).at(r, 2) * sign == doctest::Approx(prod.y).epsilon(1e-12));
      CHECK(t.value(out).at(r, 3) * sign == doctest::Approx(prod.z).epsilon(1e-12));
    }
  }

  SUBCASE("quat_to_rotmat agrees with the quaternion type") {
    ParamStore store;
    Tensor q(4, 4);
    std::vector<UnitQuaternion> qs;
    for (int r = 0; r < 4; ++r) {
      qs.push_back(random_rotation(rng));
      q.at(r, 0) = qs[r].w; q.at(r, 1) = qs[r].x; q.at(r, 2) = qs[r].y; q.at(r, 3) = qs[r].z;
    }
    Tape t(&store);
    int out = t.quat_to_rotmat(t.constant(q));
    for (int r = 0; r < 4; ++r) {
      Mat3 R = qs[r].to_matrix();
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          CHECK(t.value(out).at(r, 3 * i + j) == doctest::Approx(R(i, j)).epsilon(1e-12));
    }
  }

  SUBCASE("axisangle_to_quat agrees with the exponential map") {
    ParamStore store;
    Tensor v(3, 3);
    std::vector<Vec3> axes = {Vec3(0.4, -1.1, 0.3), Vec3(2.0, 0.5, -0.7),
                              Vec3(1e-10, -2e-10, 5e-11)};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) v.at(r, c) = axes[r][c];
    Tape t(&store);
    int out = t.axisangle_to_quat(t.constant(v));
    for (int r = 0; r < 3; ++r) {
      UnitQuaternion q = UnitQuaternion::exp_map(axes[r]);
      CHECK(t.value(out).at(r, 0) == doctest::Approx(q.w).epsilon(1e-12));
      CHECK(t.value(out).at(r, 1) == doctest::Approx(q.x).epsilon(1e-10));
      CHECK(t.value(out).at(r, 2) == doctest::Approx(q.y).epsilon(1e-10));
      CHECK(t.value(out).at(r, 3) == doctest::Approx(q.z).epsilon(1e-10));
    }
  }

  SUBCASE("segment_attention with equal scores averages each segment") {
    ParamStore store;
    Tensor scores = Tensor::zeros(4, 1);
    Tensor values = Tensor::from_rows({{1, 2}, {3, 4}, {10, 20}, {30, 40}});
    Tape t(&store);
    int out = t.segment_attention(t.constant(scores), t.constant(values), {0, 0, 1, 1}, 2);
    CHECK(t.value(out).at(0, 0) == doctest::Approx(2.0));
    CHECK(t.value(out).at(0, 1) == doctest::Approx(3.0));
    CHECK(t.value(out).at(1, 0) == doctest::Approx(20.0));
    CHECK(t.value(out).at(1, 1) == doctest::Approx(30.0));
  }

  SUBCASE("cumsum_excl_rows computes per-block exclusive prefixes") {
    ParamStore store;
    Tensor x = Tensor::from_rows({{1}, {2}, {3}, {10}, {20}, {30}});
    Tape t(&store);
    int out = t.cumsum_excl_rows(t.constant(x), 3);
    CHECK(t.value(out).v[0] == 0.0);
    CHECK(t.value(out).v[1] == 1.0);
    CHECK(t.value(out).v[2] == 3.0);
    CHECK(t.value(out).v[3] == 0.0);
    CHECK(t.value(out).v[4] == 10.0);
    CHECK(t.value(out).v[5] == 30.0);
  }

  SUBCASE("min_bin routes tie gradients to the first argument") {
    ParamStore store;
    store.add("x", Tensor::scalar(1.0));
    store.add("y", Tensor::scalar(1.0));
    Tape t(&store);
    t.backward(t.min_bin(t.param("x"), t.param("y")));
    CHECK(store.grad("x").v[0] == 1.0);
    CHECK(store.grad("y").v[0] == 0.0);
  }
}

TEST_CASE("every tape op passes central finite differences") {
  auto reports = fdsuite::run_fd_suite(100, 2024);
  std::string missing;
  CHECK_MESSAGE(fdsuite::covers_catalog(reports, &missing),
                "op missing from gradient checks: " << missing);
  for (const auto& r : reports) {
    CAPTURE(r.op);
    CHECK_MESSAGE(r.max_rel <= 1e-4, r.op << " max relative error " << r.max_rel);
  }
}

}  // TEST_SUITE
