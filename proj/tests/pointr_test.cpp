#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "mate/pointr.hpp"
#include "test_support.hpp"

namespace mate {
namespace {

using testing::small_config;

// Direct tf-idf cosine, kept independent of TfIdfIndex.
double oracle_tfidf(const TokenSeq& q, const TokenSeq& s,
                    const std::vector<TokenSeq>& docs) {
  auto idf = [&](TokenId t) {
    int df = 0;
    for (const auto& d : docs) df += std::count(d.begin(), d.end(), t) > 0;
    return std::log((1.0 + docs.size()) / (1.0 + df)) + 1.0;
  };
  std::set<TokenId> vocab(q.begin(), q.end());
  vocab.insert(s.begin(), s.end());
  double dot = 0, nq = 0, ns = 0;
  for (TokenId t : vocab) {
    const double a = std::count(q.begin(), q.end(), t) * idf(t);
    const double b = std::count(s.begin(), s.end(), t) * idf(t);
    dot += a * b;
    nq += a * a;
    ns += b * b;
  }
  return nq == 0 || ns == 0 ? 0.0 : dot / std::sqrt(nq * ns);
}

TEST(TfIdf, MatchesOracle) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> len(0, 6), tok(3, 12);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<TokenSeq> docs(1 + trial % 5);
    for (auto& d : docs) {
      d.resize(len(rng));
      for (auto& t : d) t = tok(rng);
    }
    TokenSeq q(len(rng));
    for (auto& t : q) t = tok(rng);
    const TfIdfIndex index(docs);
    for (const auto& d : docs) EXPECT_NEAR(index.score(q, d), oracle_tfidf(q, d, docs), 1e-12);
  }
}

TEST(TfIdf, RareSharedTermWins) {
  const std::vector<TokenSeq> s{{3, 4, 5}, {3, 9, 4}, {3, 4, 6}};
  EXPECT_EQ(tfidf_rank({9, 3}, s).front(), 1);
}

TEST(TfIdf, TiesAndDisjointKeepOrder) {
  EXPECT_EQ(tfidf_rank({5}, {{5, 6}, {5, 6}, {7}}), (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(tfidf_rank({99}, {{5}, {6}, {7}}), (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(tfidf_rank({}, {{5}, {6}}), (std::vector<int>{0, 1}));
  EXPECT_THROW(tfidf_rank({5}, {}), std::invalid_argument);
}

Table linked_table() {
  Table t(1, 2);
  t.at(0, 0).tokens = {10};
  t.at(0, 0).linked_sentences = {{20, 21}, {30, 31, 32}, {40}};
  t.at(0, 1).tokens = {11};
  t.at(0, 1).linked_sentences = {{50, 30}};
  return t;
}

TEST(Expand, ZeroKIsBaseTable) {
  const auto e = expand(linked_table(), {30}, 0);
  EXPECT_TRUE(e.appended.empty());
  EXPECT_EQ(e.total_tokens, 2u);
}

TEST(Expand, PerCellTopKByRelevance) {
  const auto e = expand(linked_table(), {30, 32}, 1);
  ASSERT_EQ(e.appended.at({0, 0}).size(), 1u);
  EXPECT_EQ(e.appended.at({0, 0})[0], (TokenSeq{30, 31, 32}));
  EXPECT_EQ(e.appended.at({0, 1})[0], (TokenSeq{50, 30}));
  EXPECT_EQ(e.total_tokens, 2u + 3 + 2);
  EXPECT_EQ(e.to_table().at(0, 0).tokens, (TokenSeq{10, 30, 31, 32}));
}

TEST(Expand, GlobalScopeKeepsOverallTopK) {
  const auto e = expand(linked_table(), {30, 32}, 1, std::nullopt, ExpansionScope::global);
  EXPECT_EQ(e.appended.size(), 1u);
  EXPECT_TRUE(e.appended.contains({0, 0}));
}

TEST(Expand, LargeKAppendsEverything) {
  const auto e = expand(linked_table(), {30}, 10);
  EXPECT_EQ(e.appended.at({0, 0}).size(), 3u);
  EXPECT_EQ(e.total_tokens, 2u + 6 + 2);
}

TEST(Expand, MonotoneInK) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    Table t = testing::random_table(rng, 3, 3, 2, 1);
    std::uniform_int_distribution<int> n(0, 4), tok(3, 15);
    for (int r = 0; r < t.rows(); ++r)
      for (int c = 0; c < t.cols(); ++c)
        for (int s = n(rng); s > 0; --s) t.at(r, c).linked_sentences.push_back({tok(rng), tok(rng)});
    const TokenSeq q{TokenId(tok(rng)), TokenId(tok(rng))};
    for (auto scope : {ExpansionScope::per_cell, ExpansionScope::global}) {
      for (int k = 0; k < 4; ++k) {
        const auto small = expand(t, q, k, std::nullopt, scope);
        const auto large = expand(t, q, k + 1, std::nullopt, scope);
        for (const auto& [cell, sentences] : small.appended) {
          const auto& bigger = large.appended.at(cell);
          ASSERT_GE(bigger.size(), sentences.size());
          for (std::size_t i = 0; i < sentences.size(); ++i) EXPECT_EQ(bigger[i], sentences[i]);
        }
      }
    }
  }
}

TEST(FitBudget, TrimsLongestCellFirst) {
  Table t(1, 2);
  t.at(0, 0).tokens = {1, 1};
  t.at(0, 1).tokens = {1, 1};
  ExpandedTable e;
  e.base = t;
  e.appended[{0, 0}] = {{5, 5, 5, 5, 5, 5, 5, 5}};
  e.appended[{0, 1}] = {{6, 6, 6, 6}};
  e.total_tokens = 16;
  EXPECT_EQ(fit_budget(e, 16).total_tokens, 16u);
  const auto fit = fit_budget(e, 12);
  EXPECT_EQ(fit.cell_length({0, 0}), 6u);
  EXPECT_EQ(fit.cell_length({0, 1}), 6u);
  EXPECT_EQ(fit.total_tokens, 12u);
  // Ties go to the earliest cell.
  const auto tie = fit_budget(e, 11);
  EXPECT_EQ(tie.cell_length({0, 0}), 5u);
  EXPECT_EQ(tie.cell_length({0, 1}), 6u);
  EXPECT_THROW(fit_budget(e, 3), std::length_error);
}

TEST(FitBudget, NeverGrowsCellsAndKeepsSubset) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    Table t = testing::random_table(rng, 3, 3, 2, 1);
    std::uniform_int_distribution<int> n(0, 3), tok(3, 15);
    for (int r = 0; r < t.rows(); ++r)
      for (int c = 0; c < t.cols(); ++c)
        for (int s = n(rng); s > 0; --s)
          t.at(r, c).linked_sentences.push_back({tok(rng), tok(rng), tok(rng)});
    const auto full = expand(t, {5}, 3);
    const std::size_t budget = t.token_count() + (full.total_tokens - t.token_count()) / 2;
    const auto fit = fit_budget(full, budget);
    EXPECT_LE(fit.total_tokens, budget);
    std::size_t sum = 0;
    for (int r = 0; r < t.rows(); ++r) {
      for (int c = 0; c < t.cols(); ++c) {
        EXPECT_LE(fit.cell_length({r, c}), full.cell_length({r, c}));
        sum += fit.cell_length({r, c});
      }
    }
    EXPECT_EQ(sum, fit.total_tokens);
    for (const auto& [cell, sentences] : fit.appended) {
      const auto& links = t.at(cell).linked_sentences;
      for (const auto& s : sentences) {
        // Every appended run is a prefix of a linked sentence.
        const bool found = std::any_of(links.begin(), links.end(), [&](const TokenSeq& l) {
          return l.size() >= s.size() && std::equal(s.begin(), s.end(), l.begin());
        });
        EXPECT_TRUE(found);
      }
    }
  }
}

TEST(CellScores, MeanPoolingAndSoftmax) {
  const auto cfg = small_config();
  Table t(1, 3);
  t.at(0, 0).tokens = {5, 6};
  t.at(0, 2).tokens = {7};
  const auto ex = flatten({4}, t, cfg);
  Matrix h = Matrix::Zero(cfg.hidden, ex.size());
  h(0, 3) = 1.0;
  h(0, 4) = 3.0;
  h(0, 5) = std::log(0.5);
  CellHead head = CellHead::zeros(cfg.hidden);
  head.w(0) = 1.0;
  const auto s = cell_scores(h, ex, head);
  ASSERT_EQ(s.cells.size(), 2u);  // empty (0,1) excluded
  EXPECT_DOUBLE_EQ(s.logits(0), 2.0);
  EXPECT_NEAR(s.probs.sum(), 1.0, 1e-15);
  EXPECT_EQ(s.ranked().front(), (CellCoord{0, 0}));
  EXPECT_EQ(s.index_of({0, 1}), -1);
}

TEST(CellScores, WorkedSoftmax) {
  const Vector p = softmax(Vector{{std::log(2.0), 0.0, 0.0}});
  EXPECT_NEAR(p(0), 0.5, 1e-15);
  EXPECT_NEAR(p(1), 0.25, 1e-15);
  EXPECT_NEAR(p(2), 0.25, 1e-15);
  const Vector eq = softmax(Vector{{1.5, 1.5}});
  EXPECT_DOUBLE_EQ(eq(0), 0.5);
}

TEST(Mml, WorkedExamples) {
  const Vector p{{0.5, 0.25, 0.25}};
  const std::vector<int> c{0, 1};
  const double direct = -(2.0 / 3.0) * std::log(0.5) - (1.0 / 3.0) * std::log(0.25);
  EXPECT_NEAR(mml_loss(p, c), direct, 1e-15);
  EXPECT_NEAR(mml_loss(p, c), 0.9242, 1e-4);

  const Vector u = Vector::Constant(4, 0.25);
  EXPECT_NEAR(mml_loss(u, std::vector<int>{0, 1, 2, 3}), std::log(4.0), 1e-15);

  for (int z = 0; z < 3; ++z) {
    EXPECT_NEAR(mml_loss(p, std::vector<int>{z}), cross_entropy(p, z), 1e-12);
  }
}

TEST(Mml, Errors) {
  const Vector p{{1.0, 0.0}};
  EXPECT_THROW(mml_loss(p, std::vector<int>{}), std::invalid_argument);
  EXPECT_THROW(mml_loss(p, std::vector<int>{2}), std::invalid_argument);
  EXPECT_THROW(mml_loss(p, std::vector<int>{1}), std::domain_error);
}

TEST(Mml, BoundedBelowByBestCandidate) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Vector p = softmax(testing::random_matrix(6, 1, rng, 2.0).col(0));
    const std::vector<int> c{trial % 6, (trial + 2) % 6};
    const double best = std::min(-std::log(p(c[0])), -std::log(p(c[1])));
    EXPECT_GE(mml_loss(p, c), best - 1e-12);
  }
}

// Finite differences of the loss with q frozen at the current P.
TEST(Mml, LogitGradientWithFrozenQ) {
  std::mt19937_64 rng(7);
  const Vector logits = testing::random_matrix(5, 1, rng).col(0);
  const std::vector<int> c{1, 3, 4};
  const Vector p0 = softmax(logits);
  const double mass = p0(1) + p0(3) + p0(4);
  auto frozen = [&](const Vector& l) {
    const Vector p = softmax(l);
    double loss = 0;
    for (int z : c) loss -= p0(z) / mass * std::log(p(z));
    return loss;
  };
  const auto report = grad_check(frozen, logits, mml_logit_grad(p0, c), 1e-6);
  EXPECT_LT(report.max_rel_error, 1e-7);
  // Same as sum_z q(z) (P - onehot(z)).
  Vector expected = Vector::Zero(5);
  for (int z : c) {
    Vector onehot = Vector::Zero(5);
    onehot(z) = 1;
    expected += p0(z) / mass * (p0 - onehot);
  }
  EXPECT_LT((expected - mml_logit_grad(p0, c)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(CellSelection, GradientMatchesFiniteDifferences) {
  const auto cfg = small_config(1, 1, 3, 1);
  Params params = Params::init(cfg, 3, 0.3);
  CellHead head = CellHead::init(cfg.hidden, 4, 0.3);
  const auto ex = testing::example_2x2(cfg);
  const CandidateSet cands{{{0, 1}, {1, 0}}};
  Params dp;
  CellHead dh;
  cell_selection_step(ex, params, head, cfg, cands, AttentionMode::mate, &dp, &dh);

  // The frozen-q loss, for the finite differences.
  const auto p0 = cell_selection_step(ex, params, head, cfg, cands, AttentionMode::mate).scores;
  const double mass = p0.probs(1) + p0.probs(2);
  auto loss = [&](const Params& p, const CellHead& h) {
    const auto s = cell_selection_step(ex, p, h, cfg, cands, AttentionMode::mate).scores;
    return -(p0.probs(1) / mass) * std::log(s.probs(1)) -
           (p0.probs(2) / mass) * std::log(s.probs(2));
  };
  auto f_params = [&](const Vector& v) {
    Params p = params;
    unflatten(v, p);
    return loss(p, head);
  };
  std::vector<Eigen::Index> coords;
  for (Eigen::Index i = 0; i < flatten(params).size(); i += 7) coords.push_back(i);
  EXPECT_LT(grad_check(f_params, flatten(params), flatten(dp), 1e-6, coords).max_rel_error, 1e-5);

  auto f_head = [&](const Vector& v) {
    CellHead h = head;
    h.w = v.head(cfg.hidden);
    h.b(0) = v(cfg.hidden);
    return loss(params, h);
  };
  Vector point(cfg.hidden + 1), analytic(cfg.hidden + 1);
  point << head.w, head.b;
  analytic << dh.w, dh.b;
  EXPECT_LT(grad_check(f_head, point, analytic, 1e-6).max_rel_error, 1e-6);
}

TEST(Span, ReaderInputAndCandidates) {
  const auto cfg = small_config();
  const auto one = reader_input({4}, {9}, cfg);
  EXPECT_EQ(span_scores(Matrix::Zero(cfg.hidden, one.size()), one,
                        SpanHead::zeros(cfg.hidden), 10).size(), 1u);

  const auto ex = reader_input({4}, {9, 8, 7, 8, 7}, cfg);
  const auto spans = span_scores(Matrix::Zero(cfg.hidden, ex.size()), ex,
                                 SpanHead::zeros(cfg.hidden), 2);
  EXPECT_EQ(spans.size(), 5u + 4u);
  for (const auto& s : spans) {
    EXPECT_LE(s.start, s.end);
    EXPECT_LE(s.end - s.start, 1);
    EXPECT_EQ(s.score, 0.0);  // zero weights: uniform distribution
  }
  const auto gold = gold_span_index(spans, ex, {8, 7});
  ASSERT_TRUE(gold);
  EXPECT_EQ(spans[*gold].start, 4);  // first of the two occurrences
  EXPECT_FALSE(gold_span_index(spans, ex, {8, 7, 8}));  // longer than the limit
  EXPECT_FALSE(gold_span_index(spans, ex, {42}));

  const auto cut = reader_input({4}, {9, 8, 7, 8, 7}, cfg, 5);
  EXPECT_EQ(cut.size(), 5);
  EXPECT_FALSE(first_occurrence({9, 8}, {7}));
}

TEST(Span, LossGradients) {
  const auto cfg = small_config();
  std::mt19937_64 rng(6);
  const auto ex = reader_input({4}, {9, 8, 7, 6}, cfg);
  const Matrix h = testing::random_matrix(cfg.hidden, ex.size(), rng);
  SpanHead head = SpanHead::init(cfg.hidden, 2, 0.5);
  const int gold = 3;
  Matrix dh = Matrix::Zero(h.rows(), h.cols());
  SpanHead dhead = SpanHead::zeros(cfg.hidden);
  span_loss(h, span_scores(h, ex, head, 3), gold, head, &dh, &dhead);

  auto f = [&](const Vector& v) {
    const Matrix m = Eigen::Map<const Matrix>(v.data(), h.rows(), h.cols());
    return span_loss(m, span_scores(m, ex, head, 3), gold, head);
  };
  const Vector point = Eigen::Map<const Vector>(h.data(), h.size());
  const Vector analytic = Eigen::Map<const Vector>(dh.data(), dh.size());
  EXPECT_LT(grad_check(f, point, analytic, 1e-6).max_rel_error, 1e-6);

  auto g = [&](const Vector& v) {
    SpanHead s = head;
    s.w_start = v.head(cfg.hidden);
    return span_loss(h, span_scores(h, ex, s, 3), gold, s);
  };
  EXPECT_LT(grad_check(g, head.w_start, dhead.w_start, 1e-6).max_rel_error, 1e-6);
}

TEST(Metrics, HitsAtK) {
  const std::vector<CellCoord> ranked{{0, 1}, {2, 2}, {1, 0}};
  const CandidateSet gold{{{2, 2}}};
  EXPECT_EQ(hits_at_k(ranked, gold, 1), 0);
  EXPECT_EQ(hits_at_k(ranked, gold, 2), 1);
  EXPECT_EQ(hits_at_k(ranked, CandidateSet{{{0, 1}}}, 1), 1);
  EXPECT_THROW(hits_at_k(ranked, gold, 0), std::invalid_argument);
}

TEST(Metrics, EmF1) {
  const auto near_miss = em_f1("second round", "second");
  EXPECT_EQ(near_miss.em, 0.0);
  EXPECT_NEAR(near_miss.f1, 2.0 / 3.0, 1e-15);
  const auto same = em_f1("The  Winner!", "the winner");
  EXPECT_EQ(same.em, 1.0);
  EXPECT_EQ(same.f1, 1.0);
  EXPECT_EQ(em_f1("abc", "xyz").f1, 0.0);
  EXPECT_EQ(normalize_answer("  Hello,   World. "), "hello world");
}

TEST(Records, ParseJsonLines) {
  std::istringstream in(
      R"({"id": "a", "query": [4], "table": {"rows": [[[10], [11, 12]]]}, "answer": [12]})"
      "\n\n"
      R"({"id": "b", "query": [4], "table": {"rows": [[[12], [12]]]}, "candidates": [[0, 1]]})"
      "\n");
  const auto records = read_qa_records(in);
  ASSERT_EQ(records.size(), 2u);
  EXPECT_EQ(records[0].candidates.cells, (std::vector<CellCoord>{{0, 1}}));
  EXPECT_EQ(records[1].candidates.cells, (std::vector<CellCoord>{{0, 1}}));

  std::istringstream bad("{\"id\": 1}\n");
  EXPECT_THROW(read_qa_records(bad), std::runtime_error);

  auto amb = records;
  amb[0].candidates.cells.push_back({0, 0});
  EXPECT_EQ(drop_ambiguous(amb).size(), 1u);
}

TEST(Predict, EmitsRankedCellsAndSpan) {
  auto cfg = small_config();
  cfg.global_size = 4;
  std::istringstream in(
      R"({"id": "q1", "query": [4, 5], "table": {"rows": [[[10], [11]], [[12], [13]]],)"
      R"( "links": {"1,1": [[20, 21], [5, 22]]}}, "answer": [22]})");
  const auto record = read_qa_records(in).front();
  const Params selector = Params::init(cfg, 1);
  const Params reader = Params::init(cfg, 2);
  const auto pred = predict(record, selector, CellHead::init(cfg.hidden, 3),
                            reader, SpanHead::init(cfg.hidden, 4), cfg);
  EXPECT_EQ(pred.ranked_cells.size(), 4u);
  EXPECT_NEAR(std::accumulate(pred.scores.begin(), pred.scores.end(), 0.0), 1.0, 1e-12);
  EXPECT_TRUE(std::is_sorted(pred.scores.rbegin(), pred.scores.rend()));
  EXPECT_FALSE(pred.span_tokens.empty());
  const auto j = to_json(pred);
  EXPECT_EQ(j["id"], "q1");
  EXPECT_TRUE(j.contains("best_span"));

  PointrOptions dense;
  dense.use_sparse = false;
  const auto pd = predict(record, selector, CellHead::init(cfg.hidden, 3), reader,
                          SpanHead::init(cfg.hidden, 4), cfg, dense);
  for (std::size_t i = 0; i < pd.scores.size(); ++i) {
    EXPECT_NEAR(pd.scores[i], pred.scores[i], 1e-9);
  }
}

}  // namespace
}  // namespace mate
