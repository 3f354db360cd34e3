#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <algorithm>
#include <numeric>
#include <random>

#include "mate/checkpoint.hpp"
#include "mate/encoder.hpp"
#include "test_support.hpp"

namespace mate {
namespace {

using testing::example_2x2;
using testing::naive_masked_attention;
using testing::random_matrix;
using testing::small_config;

std::vector<std::vector<int>> allowed_sets(const AttentionPattern& p) {
  std::vector<std::vector<int>> out;
  for (int k = 0; k < p.size(); ++k) out.push_back(p.allowed_set(k));
  return out;
}

TEST(Gelu, ExactErfForm) {
  EXPECT_NEAR(gelu(1.0), 0.8413447460685429, 1e-15);
  EXPECT_NEAR(gelu(-1.0), -0.15865525393145707, 1e-15);
  EXPECT_EQ(gelu(0.0), 0.0);
  const double h = 1e-6;
  for (double x : {-2.0, -0.3, 0.0, 0.7, 3.0}) {
    EXPECT_NEAR(gelu_derivative(x), (gelu(x + h) - gelu(x - h)) / (2 * h), 1e-8);
  }
}

TEST(MaskedAttention, MatchesNaiveOracle) {
  std::mt19937_64 rng(5);
  const auto cfg = small_config();
  for (int trial = 0; trial < 100; ++trial) {
    const auto base = flatten(testing::random_query(rng, 3),
                              testing::random_table(rng, 4, 4, 2), cfg);
    const auto ex = pad_to(base, base.size() + trial % 3);
    const int n = ex.size();
    const Matrix q = random_matrix(4, n, rng), k = random_matrix(4, n, rng),
                 v = random_matrix(3, n, rng);
    const auto kind = static_cast<PatternKind>(trial % 4);
    const AttentionPattern pattern(ex, kind);
    Matrix probs;
    const Matrix out = masked_attention(q, k, v, to_mask(pattern), &probs);
    const Matrix expected = naive_masked_attention(q, k, v, allowed_sets(pattern));
    EXPECT_LT((out - expected).cwiseAbs().maxCoeff(), 1e-12);
    for (int i = 0; i < n; ++i) {
      if (ex.is_padding[i]) {
        EXPECT_EQ(probs.col(i).cwiseAbs().sum(), 0.0);
        continue;
      }
      EXPECT_NEAR(probs.col(i).sum(), 1.0, 1e-12);
      for (int j = 0; j < n; ++j) {
        if (!pattern.allowed(i, j)) EXPECT_EQ(probs(j, i), 0.0);
      }
    }
  }
}

TEST(MaskedAttention, CountsRealSquared) {
  const auto ex = pad_to(example_2x2(), 10);
  AttentionCounters counters;
  const Matrix x = Matrix::Ones(2, 10);
  masked_attention(x, x, x, to_mask(full_pattern(ex)), nullptr, &counters);
  EXPECT_EQ(counters.score_ops, 49u);
  EXPECT_EQ(counters.peak_bytes, 100 * sizeof(double));
  EXPECT_EQ(counters.live_bytes, 0u);
}

TEST(MaskedAttention, RejectsShapeMismatch) {
  Mask m(3);
  EXPECT_THROW(masked_attention(Matrix::Zero(2, 3), Matrix::Zero(2, 4),
                                Matrix::Zero(2, 3), m),
               std::invalid_argument);
}

TEST(MaskedAttention, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  const auto ex = pad_to(example_2x2(), 8);
  const Mask mask = to_mask(AttentionPattern(ex, PatternKind::column));
  const Matrix q = random_matrix(3, 8, rng), k = random_matrix(3, 8, rng),
               v = random_matrix(2, 8, rng), w = random_matrix(2, 8, rng);
  Matrix probs;
  masked_attention(q, k, v, mask, &probs);
  const AttentionGrad g = masked_attention_backward(w, q, k, v, probs);

  auto check = [&](int which, const Matrix& analytic) {
    const Matrix* base[] = {&q, &k, &v};
    Vector point = Eigen::Map<const Vector>(base[which]->data(), base[which]->size());
    auto f = [&](const Vector& p) {
      Matrix m[] = {q, k, v};
      m[which] = Eigen::Map<const Matrix>(p.data(), base[which]->rows(), base[which]->cols());
      return masked_attention(m[0], m[1], m[2], mask).cwiseProduct(w).sum();
    };
    const Vector a = Eigen::Map<const Vector>(analytic.data(), analytic.size());
    EXPECT_LT(grad_check(f, point, a, 1e-6).max_rel_error, 1e-6) << which;
  };
  check(0, g.dq);
  check(1, g.dk);
  check(2, g.dv);
}

TEST(Encoder, HeadLocality) {
  std::mt19937_64 rng(21);
  const auto cfg = small_config(1, 1, 4, 1);
  const Params params = Params::init(cfg, 4, 0.5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto ex = flatten(testing::random_query(rng, 2),
                            testing::random_table(rng, 4, 4, 2, 1), cfg);
    const int head = trial % 2;
    const auto pattern = head_pattern(ex, head, cfg);
    const Matrix x = random_matrix(cfg.hidden, ex.size(), rng);
    const Matrix before = head_forward(x, head, pattern, params.layers[0], cfg);
    std::uniform_int_distribution<int> pick(0, ex.size() - 1);
    const int k = pick(rng);
    for (int j = 0; j < ex.size(); ++j) {
      if (pattern.allowed(k, j)) continue;
      Matrix x2 = x;
      x2.col(j) += random_matrix(cfg.hidden, 1, rng, 10.0);
      const Matrix after = head_forward(x2, head, pattern, params.layers[0], cfg);
      EXPECT_TRUE((after.col(k).array() == before.col(k).array()).all());
    }
  }
}

TEST(Encoder, LayerOutputIsNormalized) {
  const auto cfg = small_config(1, 1, 4, 1);
  const Params params = Params::init(cfg, 2, 0.3);
  const auto out = encoder_forward(example_2x2(cfg), params, cfg);
  for (int k = 0; k < out.hidden.cols(); ++k) {
    const double mean = out.hidden.col(k).mean();
    const double var = (out.hidden.col(k).array() - mean).square().mean();
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-9);
  }
}

TEST(Encoder, DeterministicAcrossRuns) {
  const auto cfg = small_config(1, 1, 4, 2);
  const auto a = encoder_forward(example_2x2(cfg), Params::init(cfg, 9), cfg);
  const auto b = encoder_forward(example_2x2(cfg), Params::init(cfg, 9), cfg);
  EXPECT_TRUE((a.hidden.array() == b.hidden.array()).all());
  const auto c = encoder_forward(example_2x2(cfg), Params::init(cfg, 10), cfg);
  EXPECT_FALSE((a.hidden.array() == c.hidden.array()).all());
}

TEST(Encoder, ZeroLayersReturnsEmbeddings) {
  auto cfg = small_config();
  cfg.layers = 0;
  const Params params = Params::init(cfg, 1);
  const auto ex = example_2x2(cfg);
  EXPECT_TRUE(encoder_forward(ex, params, cfg).hidden.isApprox(embed(ex, params)));
}

TEST(Encoder, ColumnHeadsOnly) {
  const auto cfg = small_config(0, 2, 4, 1);
  const auto out = encoder_forward(example_2x2(cfg), Params::init(cfg, 1), cfg,
                                   ForwardOptions{.retain_attention = true});
  ASSERT_EQ(out.attention[0].size(), 2u);
  EXPECT_EQ(out.attention[0][0](4, 3), 0.0);  // (1,1) cannot see (1,2)
  EXPECT_GT(out.attention[0][0](5, 3), 0.0);  // but sees (2,1)
}

TEST(Encoder, EmbeddingIndexOutOfRange) {
  auto cfg = small_config();
  const Params params = Params::init(cfg, 1);
  Table t(1, 1);
  t.at(0, 0).tokens = {TokenId(cfg.token_vocab)};
  EXPECT_THROW(embed(flatten({}, t, cfg), params), std::out_of_range);
}

// Permuting table rows permutes the outputs when nothing depends on the
// row ids themselves.
TEST(Encoder, RowPermutationEquivariance) {
  auto cfg = small_config(1, 1, 4, 2);
  cfg.positional_reset = true;
  Params params = Params::init(cfg, 3, 0.3);
  params.embedding.row.setZero();
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Table t = testing::random_table(rng, 4, 3, 2, 1);
    for (int r = 0; r < t.rows(); ++r)
      for (int c = 0; c < t.cols(); ++c) t.at(r, c).numeric_value.reset();
    std::vector<int> perm(t.rows());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Table p(t.rows(), t.cols());
    for (int r = 0; r < t.rows(); ++r)
      for (int c = 0; c < t.cols(); ++c) p.at(perm[r], c) = t.at(r, c);

    const TokenSeq query{7, 8};
    const auto ex_t = flatten(query, t, cfg);
    const auto ex_p = flatten(query, p, cfg);
    const Matrix h_t = encoder_forward(ex_t, params, cfg).hidden;
    const Matrix h_p = encoder_forward(ex_p, params, cfg).hidden;
    for (const auto& [coord, span] : ex_t.cell_spans) {
      const auto moved = ex_p.cell_spans.at({perm[coord.row], coord.col});
      for (int o = 0; o < span.size(); ++o) {
        EXPECT_LT((h_t.col(span.begin + o) - h_p.col(moved.begin + o)).cwiseAbs().maxCoeff(),
                  1e-10);
      }
    }
    for (int k = 0; k < ex_t.query_size(); ++k) {
      EXPECT_LT((h_t.col(k) - h_p.col(k)).cwiseAbs().maxCoeff(), 1e-10);
    }
  }
}

TEST(Backward, RequiresCache) {
  const auto cfg = small_config();
  const Params params = Params::init(cfg, 1);
  const auto ex = example_2x2(cfg);
  const auto out = encoder_forward(ex, params, cfg);
  EXPECT_THROW(backward(out.hidden, out, ex, params, cfg), std::logic_error);
}

TEST(Backward, ConstantLossGivesZeroGradient) {
  const auto cfg = small_config();
  const Params params = Params::init(cfg, 1);
  const auto ex = example_2x2(cfg);
  const auto out = encoder_forward(ex, params, cfg, ForwardOptions{.keep_cache = true});
  const Params g = backward(Matrix::Zero(cfg.hidden, ex.size()), out, ex, params, cfg);
  EXPECT_EQ(flatten(g).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Backward, MatchesFiniteDifferencesPerTensor) {
  const auto cfg = small_config(1, 1, 3, 2);
  Params params = Params::init(cfg, 6, 0.3);
  std::mt19937_64 rng(1);
  const auto ex = pad_to(example_2x2(cfg), 9);
  const Matrix w = random_matrix(cfg.hidden, ex.size(), rng);
  auto loss = [&](const Params& p) {
    return encoder_forward(ex, p, cfg).hidden.cwiseProduct(w).sum();
  };
  const auto out = encoder_forward(ex, params, cfg, ForwardOptions{.keep_cache = true});
  Params grad = backward(w, out, ex, params, cfg);

  const Vector point = flatten(params);
  const Vector analytic = flatten(grad);
  auto f = [&](const Vector& v) {
    Params p = params;
    unflatten(v, p);
    return loss(p);
  };
  Eigen::Index offset = 0;
  for (const auto& view : tensors(params)) {
    std::vector<Eigen::Index> coords;
    std::uniform_int_distribution<Eigen::Index> pick(0, view.size() - 1);
    for (int i = 0; i < 6; ++i) coords.push_back(offset + pick(rng));
    const auto report = grad_check(f, point, analytic, 1e-6, coords);
    EXPECT_LT(report.max_rel_error, 1e-5) << view.name;
    offset += view.size();
  }
  EXPECT_EQ(offset, point.size());
}

TEST(GradCheck, RejectsNonPositiveStep) {
  auto f = [](const Vector& v) { return v.squaredNorm(); };
  const Vector p = Vector::Ones(2);
  EXPECT_THROW(grad_check(f, p, 2 * p, 0.0), std::invalid_argument);
  EXPECT_LT(grad_check(f, p, 2 * p, 1e-5).max_rel_error, 1e-9);
  EXPECT_GT(grad_check(f, p, 3 * p, 1e-5).max_rel_error, 0.3);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Params p = Params::zeros(small_config());
  Params g = Params::zeros(small_config());
  g.layers[0].bo(0) = 5.0;
  g.layers[0].bo(1) = -0.01;
  Adam adam(0.1);
  adam.step(tensors(p), tensors(g));
  EXPECT_NEAR(p.layers[0].bo(0), -0.1, 1e-9);
  EXPECT_NEAR(p.layers[0].bo(1), 0.1, 1e-6);
  EXPECT_EQ(p.layers[0].bo(2), 0.0);
}

TEST(Params, InitIsTruncated) {
  const auto cfg = small_config();
  Params p = Params::init(cfg, 3, 0.02);
  for (const auto& v : tensors(p)) {
    if (v.name.find("ln") != std::string::npos) continue;
    EXPECT_LE(v.flat().cwiseAbs().maxCoeff(), 0.04 + 1e-15) << v.name;
  }
  EXPECT_TRUE((p.layers[0].ln1_gamma.array() == 1.0).all());
  EXPECT_TRUE((p.layers[0].b1.array() == 0.0).all());
}

TEST(Checkpoint, RoundTrip) {
  const auto cfg = small_config(1, 1, 4, 2);
  Params p = Params::init(cfg, 12);
  const auto dir = std::filesystem::temp_directory_path() / "mate_ckpt_test";
  std::filesystem::create_directories(dir);

  save_checkpoint(dir / "model.json", tensors(p), cfg, DType::f64);
  const Checkpoint c = load_checkpoint(dir / "model.json");
  EXPECT_EQ(c.config.hidden, cfg.hidden);
  EXPECT_EQ(c.config.token_vocab, cfg.token_vocab);
  EXPECT_TRUE((flatten(c.params()).array() == flatten(p).array()).all());

  save_checkpoint(dir / "small.json", tensors(p), cfg, DType::f32);
  const Vector back = flatten(load_checkpoint(dir / "small.json").params());
  EXPECT_LT((back - flatten(p)).cwiseAbs().maxCoeff(), 1e-8);

  Params wrong = Params::zeros(small_config(2, 2, 4, 2));
  EXPECT_THROW(c.assign_to(tensors(wrong)), std::runtime_error);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace mate
