#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "msam/losses.hpp"
#include "support.hpp"

using namespace msam;
using Mat = MatX<double>;
using test_support::random_mask;
using test_support::random_one_hot;
using test_support::random_probability;

namespace {

// Naive double-loop transliteration of the loss definitions, kept separate
// from the vectorized implementation path.
double oracle_dice(const Mat& p, const Mat& g, double eps) {
  const Eigen::Index N = p.rows(), M = p.cols();
  double acc = 0.0;
  for (Eigen::Index j = 0; j < M; ++j) {
    double num = 0.0, den = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) {
      num += p(i, j) * g(i, j);
      den += p(i, j) * p(i, j) + g(i, j) * g(i, j);
    }
    acc += (2.0 * num + eps) / (den + eps);
  }
  return 1.0 - acc / double(M);
}

double oracle_ce(const Mat& p, const Mat& g, double eps) {
  const Eigen::Index N = p.rows(), M = p.cols();
  double total = 0.0;
  for (Eigen::Index i = 0; i < N; ++i)
    for (Eigen::Index j = 0; j < M; ++j) total += g(i, j) * std::log(std::max(p(i, j), eps));
  return -total / double(N);
}

}  // namespace

TEST_CASE("worked examples pin the loss values") {
  Mat p(1, 2), g(1, 2);
  p << 0.5, 0.5;
  g << 0.0, 1.0;
  CHECK(std::abs(dice_loss(p, g) - 0.6) < 1e-5);
  CHECK(std::abs(ce_loss(p, g) - 0.693147) < 1e-6);
  CHECK(std::abs(dice_ce_loss(p, g, 0.5, 0.5) - 0.646574) < 1e-5);

  Mat p2(2, 2), g2(2, 2);
  p2 << 0.9, 0.1, 0.2, 0.8;
  g2 << 1, 0, 0, 1;
  CHECK(std::abs(ce_loss(p2, g2) - 0.164252) < 1e-6);
}

TEST_CASE("perfect predictions score zero; degenerate weights reduce to CE") {
  Rng rng(2);
  for (int k = 0; k < 10; ++k) {
    Mat g = random_one_hot(1 + rng.uniform_int(32), 1 + rng.uniform_int(3), rng);
    CHECK(std::abs(dice_loss(g, g)) < 1e-5);
    CHECK(ce_loss(g, g) == 0.0);
    CHECK(std::abs(dice_ce_loss(g, g)) < 1e-5);
  }
  Mat p = random_probability(6, 3, rng);
  Mat g = random_one_hot(6, 3, rng);
  CHECK(dice_ce_loss(p, g, 1.0, 0.0) == ce_loss(p, g));
}

TEST_CASE("losses match the brute-force oracle on 200 random instances") {
  Rng rng(31);
  for (int k = 0; k < 200; ++k) {
    const Eigen::Index n = 1 + rng.uniform_int(64);
    const Eigen::Index m = 1 + rng.uniform_int(4);
    Mat p = random_probability(n, m, rng);
    Mat g = random_one_hot(n, m, rng);
    const double dl = dice_loss(p, g);
    const double cl = ce_loss(p, g);
    CHECK(std::abs(dl - oracle_dice(p, g, kDiceEps)) < 1e-9);
    CHECK(std::abs(cl - oracle_ce(p, g, kCeEps)) < 1e-9);
    CHECK(dl >= 0.0);
    CHECK(dl <= 1.0);
    CHECK(cl >= 0.0);
  }
}

TEST_CASE("losses are invariant under identical row permutations") {
  Rng rng(5);
  Mat p = random_probability(20, 3, rng);
  Mat g = random_one_hot(20, 3, rng);
  std::vector<Eigen::Index> perm(20);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = perm.size(); i > 1; --i)
    std::swap(perm[i - 1], perm[std::size_t(rng.uniform_int(Eigen::Index(i)))]);
  Mat pp(20, 3), gp(20, 3);
  for (Eigen::Index i = 0; i < 20; ++i) {
    pp.row(perm[std::size_t(i)]) = p.row(i);
    gp.row(perm[std::size_t(i)]) = g.row(i);
  }
  CHECK(dice_loss(pp, gp) == doctest::Approx(dice_loss(p, g)).epsilon(1e-12));
  CHECK(ce_loss(pp, gp) == doctest::Approx(ce_loss(p, g)).epsilon(1e-12));
}

TEST_CASE("invalid fields are rejected") {
  Mat p(2, 2), g(2, 2);
  p << 0.5, 0.5, 0.9, 0.1;
  g << 1, 0, 0, 1;
  Mat p3(3, 2);
  p3.setConstant(0.5);
  CHECK_THROWS_AS(dice_loss(p3, g), ShapeMismatchError);

  Mat bad_sum = p;
  bad_sum(0, 0) = 0.9;  // row sums to 1.4
  CHECK_THROWS_AS(dice_loss(bad_sum, g), InvalidProbabilityError);
  CHECK_THROWS_AS(ce_loss(bad_sum, g), InvalidProbabilityError);

  Mat bad_range = p;
  bad_range(0, 0) = -0.1;
  bad_range(0, 1) = 1.1;
  CHECK_THROWS_AS(dice_loss(bad_range, g), InvalidProbabilityError);

  Mat bad_hot = g;
  bad_hot(0, 0) = 1;  // two ones in a row
  CHECK_THROWS_AS(dice_loss(p, bad_hot), InvalidProbabilityError);

  CHECK_THROWS_AS(dice_ce_loss(p, g, -0.5, 0.5), ConfigOutOfRangeError);
}

TEST_CASE("dsc and iou match voxel counting and satisfy the algebraic identity") {
  Extents e{1, 6, 6, 6};

  SUBCASE("identical nonempty masks") {
    Rng rng(9);
    Mask m = random_mask(e, 0.4, rng);
    CHECK(dsc(m, m) == 1.0);
    CHECK(iou(m, m) == 1.0);
  }
  SUBCASE("disjoint nonempty masks") {
    Mask a = Mask::zeros(e), b = Mask::zeros(e);
    a.labels[0] = 1;
    b.labels[1] = 1;
    CHECK(dsc(a, b) == 0.0);
    CHECK(iou(a, b) == 0.0);
  }
  SUBCASE("|P|=|G|=4 with overlap 2") {
    Mask a = Mask::zeros(e), b = Mask::zeros(e);
    for (int i = 0; i < 4; ++i) a.labels[i] = 1;
    for (int i = 2; i < 6; ++i) b.labels[i] = 1;
    CHECK(dsc(a, b) == doctest::Approx(0.5));
    CHECK(iou(a, b) == doctest::Approx(2.0 / 6.0));
  }
  SUBCASE("both empty scores 1.0") {
    Mask a = Mask::zeros(e), b = Mask::zeros(e);
    CHECK(dsc(a, b) == 1.0);
    CHECK(iou(a, b) == 1.0);
  }
  SUBCASE("shape mismatch throws") {
    Mask a = Mask::zeros(e), b = Mask::zeros({1, 6, 6, 5});
    CHECK_THROWS_AS(dsc(a, b), ShapeMismatchError);
    CHECK_THROWS_AS(iou(a, b), ShapeMismatchError);
  }
  SUBCASE("dsc = 2*iou/(1+iou) on random pairs, and brute-force counts agree") {
    Rng rng(13);
    for (int k = 0; k < 100; ++k) {
      Mask a = random_mask(e, rng.uniform(0.05, 0.6), rng);
      Mask b = random_mask(e, rng.uniform(0.05, 0.6), rng);
      Eigen::Index inter = 0, na = 0, nb = 0, uni = 0;
      for (Eigen::Index i = 0; i < a.labels.size(); ++i) {
        inter += a.labels[i] && b.labels[i];
        uni += a.labels[i] || b.labels[i];
        na += a.labels[i];
        nb += b.labels[i];
      }
      const double d = dsc(a, b);
      const double j = iou(a, b);
      if (na + nb > 0) CHECK(d == 2.0 * double(inter) / double(na + nb));
      if (uni > 0) CHECK(j == double(inter) / double(uni));
      CHECK(std::abs(d - 2.0 * j / (1.0 + j)) < 1e-12);
    }
  }
}

TEST_CASE("graph-path DiceCE equals the value-level loss and passes gradcheck") {
  Rng rng(21);
  ParamStore<double> store;
  store.add("logits", 24, 1).value = test_support::random_matrix(24, 1, rng);
  Mask gtm = random_mask({1, 24, 1, 1}, 0.4, rng);
  Mat onehot = one_hot_from_mask<double>(gtm);

  ag::Graph<double> g;
  auto p = foreground_softmax_g(g, g.param(store.at("logits")));
  auto loss = dice_ce_loss_g(g, p, g.constant(onehot));
  CHECK(g.val(loss)(0, 0) ==
        doctest::Approx(dice_ce_loss(Mat(g.val(p)), onehot)).epsilon(1e-12));

  Rng coords(33);
  auto res = test_support::gradcheck_params(store, {"logits"}, [&](ag::Graph<double>& gg) {
    auto pp = foreground_softmax_g(gg, gg.param(store.at("logits")));
    return dice_ce_loss_g(gg, pp, gg.constant(onehot));
  }, 24, coords);
  INFO("worst " << res.worst);
  CHECK(res.max_rel < 1e-3);
}
