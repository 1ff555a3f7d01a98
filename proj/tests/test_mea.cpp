#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "msam/backbone.hpp"
#include "support.hpp"

using namespace msam;
using Mat = MatX<double>;
using test_support::random_matrix;

namespace {

ModelConfig tiny_cfg(int embed = 32, int heads = 2) {
  ModelConfig cfg;
  cfg.volume_size = 16;
  cfg.patch_size = 8;
  cfg.embed_dim = embed;
  cfg.enc_heads = heads;
  cfg.dec_heads = heads;
  return cfg;
}

Mat permute_rows(const Mat& m, const std::vector<Eigen::Index>& perm) {
  Mat out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) out.row(perm[std::size_t(i)]) = m.row(i);
  return out;
}

std::vector<Eigen::Index> random_perm(Eigen::Index n, Rng& rng) {
  std::vector<Eigen::Index> p(std::size_t(n));
  std::iota(p.begin(), p.end(), 0);
  for (std::size_t i = p.size(); i > 1; --i)
    std::swap(p[i - 1], p[std::size_t(rng.uniform_int(Eigen::Index(i)))]);
  return p;
}

}  // namespace

TEST_CASE("mfeb and mea_forward preserve the token-embedding shape") {
  Model<double> model(tiny_cfg());
  Rng rng(1);
  TokenEmbedding<double> ei{random_matrix(64, 32, rng), std::nullopt};
  TokenEmbedding<double> em{random_matrix(64, 32, rng), std::nullopt};
  auto [a, b] = model.mfeb(ei, em);
  CHECK(a.values.rows() == 64);
  CHECK(a.values.cols() == 32);
  CHECK(b.values.rows() == 64);
  CHECK(b.values.cols() == 32);
  auto out = model.mea_forward(ei, em);
  CHECK(out.values.rows() == 64);
  CHECK(out.values.cols() == 32);
  CHECK(out.values.allFinite());
}

TEST_CASE("shape mismatches are rejected") {
  Model<double> model(tiny_cfg());
  Rng rng(2);
  TokenEmbedding<double> ei{random_matrix(8, 32, rng), std::nullopt};
  TokenEmbedding<double> em{random_matrix(9, 32, rng), std::nullopt};
  CHECK_THROWS_AS(model.mea_forward(ei, em), ShapeMismatchError);
  TokenEmbedding<double> wrong_dim{random_matrix(8, 16, rng), std::nullopt};
  CHECK_THROWS_AS(model.mea_forward(wrong_dim, wrong_dim), ShapeMismatchError);
}

TEST_CASE("joint row permutation of both inputs permutes the outputs") {
  for (int trial = 0; trial < 10; ++trial) {
    ModelConfig cfg = tiny_cfg(trial % 2 == 0 ? 32 : 16, 2);
    cfg.seed = std::uint64_t(trial);
    Model<double> model(cfg);
    Rng rng(100 + std::uint64_t(trial));
    const Eigen::Index n = 8 + rng.uniform_int(56);
    TokenEmbedding<double> ei{random_matrix(n, cfg.embed_dim, rng), std::nullopt};
    TokenEmbedding<double> em{random_matrix(n, cfg.embed_dim, rng), std::nullopt};
    const auto perm = random_perm(n, rng);

    auto base = model.mea_forward(ei, em);
    TokenEmbedding<double> ei_p{permute_rows(ei.values, perm), std::nullopt};
    TokenEmbedding<double> em_p{permute_rows(em.values, perm), std::nullopt};
    auto permuted = model.mea_forward(ei_p, em_p);
    CHECK((permuted.values - permute_rows(base.values, perm)).cwiseAbs().maxCoeff() < 1e-9);

    auto [a, b] = model.mfeb(ei, em);
    auto [ap, bp] = model.mfeb(ei_p, em_p);
    CHECK((ap.values - permute_rows(a.values, perm)).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((bp.values - permute_rows(b.values, perm)).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("zero attention/MLP weights degenerate MFEB to a cross pass-through") {
  Model<double> model(tiny_cfg());
  for (const char* branch : {"mea.mfeb_img", "mea.mfeb_mask"}) {
    for (const char* lin : {".attn.q", ".attn.k", ".attn.v", ".attn.out", ".mlp.fc1",
                            ".mlp.fc2"}) {
      model.params().at(std::string(branch) + lin + ".w").value.setZero();
      model.params().at(std::string(branch) + lin + ".b").value.setZero();
    }
  }
  Rng rng(3);
  TokenEmbedding<double> ei{random_matrix(24, 32, rng), std::nullopt};
  TokenEmbedding<double> em{random_matrix(24, 32, rng), std::nullopt};
  auto [a, b] = model.mfeb(ei, em);
  CHECK((a.values.array() == em.values.array()).all());  // E'_I = E_M exactly
  CHECK((b.values.array() == ei.values.array()).all());  // E'_M = E_I exactly
}

TEST_CASE("the adapter is sensitive to the mask embedding") {
  Model<double> model(tiny_cfg());
  Rng rng(4);
  TokenEmbedding<double> ei{random_matrix(16, 32, rng), std::nullopt};
  TokenEmbedding<double> em1{random_matrix(16, 32, rng), std::nullopt};
  TokenEmbedding<double> em2 = em1;
  em2.values.row(5).array() += 0.5;
  auto o1 = model.mea_forward(ei, em1);
  auto o2 = model.mea_forward(ei, em2);
  CHECK((o1.values - o2.values).norm() > 0.0);
}

TEST_CASE("identical inputs give bit-identical outputs") {
  Model<double> model(tiny_cfg());
  Rng rng(5);
  TokenEmbedding<double> ei{random_matrix(16, 32, rng), std::nullopt};
  TokenEmbedding<double> em{random_matrix(16, 32, rng), std::nullopt};
  auto o1 = model.mea_forward(ei, em);
  auto o2 = model.mea_forward(ei, em);
  CHECK((o1.values.array() == o2.values.array()).all());
}

TEST_CASE("non-finite activations abort with diagnostics") {
  Model<double> model(tiny_cfg());
  Rng rng(6);
  TokenEmbedding<double> ei{random_matrix(8, 32, rng), std::nullopt};
  TokenEmbedding<double> em{random_matrix(8, 32, rng), std::nullopt};
  ei.values(3, 3) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(model.mea_forward(ei, em), NonFiniteActivationError);
}

TEST_CASE("adapter gradients match finite differences for inputs and parameters") {
  ModelConfig cfg = tiny_cfg(16, 2);
  Model<double> model(cfg);
  auto& store = model.params();
  Rng rng(7);
  store.add("test.ei", 8, 16).value = random_matrix(8, 16, rng);
  store.add("test.em", 8, 16).value = random_matrix(8, 16, rng);
  const Mat probe = random_matrix(8, 16, rng);

  std::vector<std::string> names{"test.ei", "test.em"};
  for (const auto& n : store.names())
    if (n.rfind("mea.", 0) == 0) names.push_back(n);

  Rng coords(8);
  auto res = test_support::gradcheck_params(store, names, [&](ag::Graph<double>& g) {
    auto out = model.mea_forward_g(g, g.param(store.at("test.ei")),
                                   g.param(store.at("test.em")));
    return g.sum(g.cmul(out, g.constant(probe)));
  }, 6, coords);
  INFO("worst " << res.worst << " rel " << res.max_rel);
  CHECK(res.max_rel < 1e-3);
}
