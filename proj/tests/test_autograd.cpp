#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "msam/nn.hpp"
#include "support.hpp"

using namespace msam;
using test_support::gradcheck_params;
using test_support::random_matrix;
using Graph = ag::Graph<double>;
using Mat = MatX<double>;

namespace {

// One scratch tensor per named input so gradcheck treats inputs like params.
ParamStore<double>& scratch(ParamStore<double>& store, const std::string& name, Mat value) {
  auto& t = store.add(name, value.rows(), value.cols());
  t.value = std::move(value);
  return store;
}

}  // namespace

TEST_CASE("primitive ops match finite differences") {
  Rng rng(11);
  ParamStore<double> store;
  scratch(store, "a", random_matrix(5, 4, rng));
  scratch(store, "b", random_matrix(4, 6, rng));
  scratch(store, "c", random_matrix(5, 6, rng));
  scratch(store, "gamma", random_matrix(1, 4, rng, 0.3));
  scratch(store, "beta", random_matrix(1, 4, rng, 0.3));
  scratch(store, "bias", random_matrix(1, 6, rng));

  auto check = [&](const char* what, auto&& build, const std::vector<std::string>& names) {
    Rng coords(101);
    auto res = gradcheck_params(store, names, build, 12, coords);
    INFO(what << " worst " << res.worst);
    CHECK(res.max_rel < 1e-3);
  };

  check("matmul+bias", [&](Graph& g) {
    return g.sum(g.add_bias(g.matmul(g.param(store.at("a")), g.param(store.at("b"))),
                            g.param(store.at("bias"))));
  }, {"a", "b", "bias"});

  check("cmul/div/affine", [&](Graph& g) {
    auto a = g.param(store.at("a"));
    auto sq = g.cmul(a, a);
    auto den = g.affine(sq, 0.5, 2.0);
    return g.sum(g.div(a, den));
  }, {"a"});

  check("layer_norm", [&](Graph& g) {
    return g.sum(g.layer_norm(g.param(store.at("a")), g.param(store.at("gamma")),
                              g.param(store.at("beta")), 1e-5));
  }, {"a", "gamma", "beta"});

  check("softmax", [&](Graph& g) {
    auto y = g.softmax_rows(g.param(store.at("a")));
    return g.sum(g.cmul(y, y));
  }, {"a"});

  check("gelu", [&](Graph& g) {
    return g.sum(g.gelu(g.param(store.at("a"))));
  }, {"a"});

  check("slice/hconcat/transpose", [&](Graph& g) {
    auto a = g.param(store.at("a"));
    auto left = g.slice_cols(a, 0, 2);
    auto right = g.slice_cols(a, 2, 2);
    auto swapped = g.hconcat(right, left);
    return g.sum(g.matmul(swapped, g.transpose(swapped)));
  }, {"a"});

  check("log_clamped", [&](Graph& g) {
    auto sq = g.cmul(g.param(store.at("a")), g.param(store.at("a")));
    return g.sum(g.log_clamped(g.affine(sq, 1.0, 0.1), 1e-12));
  }, {"a"});
}

TEST_CASE("gather applies plan and routes gradients") {
  Graph g;
  Mat x(2, 2);
  x << 1, 3, 2, 4;
  auto plan = std::make_shared<ag::GatherPlan>();
  plan->in_rows = 2;
  plan->in_cols = 2;
  plan->out_rows = 3;
  plan->out_cols = 1;
  plan->src = {3, -1, 0};  // col-major flat: (1,1), zero, (0,0)
  Rng rng(5);
  ParamStore<double> store;
  store.add("x", 2, 2).value = x;
  auto res = gradcheck_params(store, {"x"}, [&](Graph& gg) {
    auto v = gg.gather(gg.param(store.at("x")), plan);
    return gg.sum(gg.cmul(v, v));
  }, 4, rng);
  CHECK(res.max_rel < 1e-3);

  Graph g2;
  auto out = g2.gather(g2.constant(x), plan);
  CHECK(g2.val(out)(0, 0) == 4.0);
  CHECK(g2.val(out)(1, 0) == 0.0);
  CHECK(g2.val(out)(2, 0) == 1.0);
}

TEST_CASE("straight-through binarize thresholds forward, passes gradient") {
  ParamStore<double> store;
  Mat x(3, 1);
  x << -0.5, 0.0, 1.5;
  store.add("x", 3, 1).value = x;
  Graph g;
  auto b = g.straight_through_binarize(g.param(store.at("x")));
  CHECK(g.val(b)(0, 0) == 0.0);
  CHECK(g.val(b)(1, 0) == 0.0);
  CHECK(g.val(b)(2, 0) == 1.0);
  auto loss = g.sum(g.affine(b, 3.0, 0.0));
  store.zero_grads();
  g.backward(loss);
  CHECK(store.at("x").grad(0, 0) == doctest::Approx(3.0));
  CHECK(store.at("x").grad(2, 0) == doctest::Approx(3.0));
}

TEST_CASE("shared parameter nodes accumulate total derivatives") {
  // f(w) = sum(w*w^T) uses w twice; d/dw must include both paths.
  ParamStore<double> store;
  Rng rng(3);
  store.add("w", 3, 3).value = random_matrix(3, 3, rng);
  Rng coords(7);
  auto res = gradcheck_params(store, {"w"}, [&](Graph& g) {
    auto w = g.param(store.at("w"));
    return g.sum(g.matmul(w, g.transpose(w)));
  }, 9, coords);
  CHECK(res.max_rel < 1e-3);
}

TEST_CASE("attention core is differentiable and head-consistent") {
  ParamStore<double> store;
  Rng rng(17);
  scratch(store, "q", random_matrix(6, 8, rng));
  scratch(store, "k", random_matrix(6, 8, rng));
  scratch(store, "v", random_matrix(6, 8, rng));
  scratch(store, "probe", random_matrix(6, 8, rng));
  Rng coords(19);
  auto res = gradcheck_params(store, {"q", "k", "v"}, [&](Graph& g) {
    auto out = nn::attention_core(g, g.param(store.at("q")), g.param(store.at("k")),
                                  g.param(store.at("v")), 2);
    return g.sum(g.cmul(out, g.param(store.at("probe"))));
  }, 15, coords);
  CHECK(res.max_rel < 1e-3);
}

TEST_CASE("conv3d via im2col matches a direct dense computation") {
  // 1 input channel, 4x4x4 grid, k=3 s=2 p=1 -> 2x2x2 output
  Rng rng(23);
  auto plan = nn::im2col_plan(4, 4, 4, 1, 3, 2, 1);
  CHECK(plan->out_rows == 8);
  CHECK(plan->out_cols == 27);

  Mat x = random_matrix(64, 1, rng);
  Mat w = random_matrix(27, 2, rng);
  Graph g;
  auto cols = g.gather(g.constant(x), plan);
  auto y = g.matmul(cols, g.constant(w));

  auto at = [&](Eigen::Index ix, Eigen::Index iy, Eigen::Index iz) -> double {
    if (ix < 0 || ix >= 4 || iy < 0 || iy >= 4 || iz < 0 || iz >= 4) return 0.0;
    return x((ix * 4 + iy) * 4 + iz, 0);
  };
  for (Eigen::Index ox = 0; ox < 2; ++ox)
    for (Eigen::Index oy = 0; oy < 2; ++oy)
      for (Eigen::Index oz = 0; oz < 2; ++oz)
        for (Eigen::Index co = 0; co < 2; ++co) {
          double acc = 0.0;
          for (Eigen::Index kx = 0; kx < 3; ++kx)
            for (Eigen::Index ky = 0; ky < 3; ++ky)
              for (Eigen::Index kz = 0; kz < 3; ++kz)
                acc += at(ox * 2 - 1 + kx, oy * 2 - 1 + ky, oz * 2 - 1 + kz) *
                       w((kx * 3 + ky) * 3 + kz, co);
          CHECK(g.val(y)((ox * 2 + oy) * 2 + oz, co) == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("shuffle plan is the inverse layout of a kernel=stride deconv") {
  // tokens on a 2^3 grid, s=2, C=1: out voxel (vx,vy,vz) reads token
  // (vx/2,vy/2,vz/2) at offset (vx%2,vy%2,vz%2)
  auto plan = nn::shuffle_plan(2, 2, 2, 2, 1);
  CHECK(plan->out_rows == 64);
  CHECK(plan->out_cols == 1);
  Mat x(8, 8);  // token t, offset o -> value 10*t + o
  for (Eigen::Index t = 0; t < 8; ++t)
    for (Eigen::Index o = 0; o < 8; ++o) x(t, o) = double(10 * t + o);
  Graph g;
  auto y = g.gather(g.constant(x), plan);
  for (Eigen::Index vx = 0; vx < 4; ++vx)
    for (Eigen::Index vy = 0; vy < 4; ++vy)
      for (Eigen::Index vz = 0; vz < 4; ++vz) {
        const Eigen::Index token = ((vx / 2) * 2 + (vy / 2)) * 2 + (vz / 2);
        const Eigen::Index offset = ((vx % 2) * 2 + (vy % 2)) * 2 + (vz % 2);
        CHECK(g.val(y)((vx * 4 + vy) * 4 + vz, 0) == double(10 * token + offset));
      }
}

TEST_CASE("backward roots must be scalar") {
  Graph g;
  auto x = g.constant(Mat::Ones(2, 2));
  CHECK_THROWS_AS(g.backward(x), ShapeMismatchError);
}
