#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mate/encoder.hpp"
#include "mate/table.hpp"
#include "mate/table_json.hpp"

namespace mate {

// ---------------------------------------------------------------------------
// Cell expansion

/// tf-idf with raw term counts, idf = ln((1 + N) / (1 + df)) + 1 over a
/// sentence collection, and cosine similarity between weighted vectors.
class TfIdfIndex {
 public:
  explicit TfIdfIndex(std::span<const TokenSeq> collection);

  double idf(TokenId t) const;
  double score(const TokenSeq& query, const TokenSeq& sentence) const;

 private:
  std::size_t docs_;
  std::map<TokenId, std::size_t> df_;
};

/// Indices of `sentences` by descending similarity to `query`, ties in
/// original order. Throws std::invalid_argument when `sentences` is empty.
std::vector<int> tfidf_rank(const TokenSeq& query,
                            const std::vector<TokenSeq>& sentences);

/// Top-k per cell ranks each cell's own linked sentences; global ranks all
/// linked sentences of the table together and keeps the overall top k.
enum class ExpansionScope { per_cell, global };

struct ExpandedTable {
  Table base{1, 1};
  /// Appended sentences per cell in ranked order. After budget fitting the
  /// last one may be cut short.
  std::map<CellCoord, std::vector<TokenSeq>> appended;
  std::size_t total_tokens = 0;

  std::size_t cell_length(CellCoord c) const;
  std::size_t appended_length(CellCoord c) const;
  /// Table whose cell tokens are the base tokens followed by the appended
  /// sentences.
  Table to_table() const;
};

/// Cell token budget left for the table once the query, [CLS] and [SEP]
/// are placed in a sequence of max_len tokens.
std::size_t table_budget(const TokenSeq& query, int max_len);

/// Appends the top-k sentences to every cell, then fits the result into
/// `budget` cell tokens if one is given.
ExpandedTable expand(const Table& table, const TokenSeq& query, int k,
                     std::optional<std::size_t> budget = std::nullopt,
                     ExpansionScope scope = ExpansionScope::per_cell);

/// Removes one token at a time from the end of the currently longest cell
/// that still has appended text (earliest cell on ties) until the table
/// holds at most `budget` tokens. Throws std::length_error when the base
/// table alone exceeds the budget.
ExpandedTable fit_budget(ExpandedTable expanded, std::size_t budget);

// ---------------------------------------------------------------------------
// Cell selection

struct CandidateSet {
  std::vector<CellCoord> cells;
};

/// Cells whose text contains `answer` as a contiguous token run.
CandidateSet find_candidates(const Table& table, const TokenSeq& answer);

/// Single linear layer mapping a contextual token to a logit.
struct CellHead {
  Vector w;
  Vector b;  // size 1

  static CellHead zeros(int hidden);
  static CellHead init(int hidden, std::uint64_t seed, double stddev = 0.02);
  std::vector<TensorView> tensors();
};

/// Non-empty cells in row-major order with S(c) and P(c).
struct CellScores {
  std::vector<CellCoord> cells;
  std::vector<TokenSpan> spans;
  Vector logits;
  Vector probs;

  int index_of(CellCoord c) const;  // -1 when absent
  /// Cells by descending probability, ties in row-major order.
  std::vector<CellCoord> ranked() const;
};

/// S(t) = w . h_t + b; S(c) = mean over the cell's tokens; P = softmax
/// over non-empty cells. Throws std::invalid_argument when every cell is
/// empty.
CellScores cell_scores(const Matrix& contextual, const TokenizedExample& ex,
                       const CellHead& head);

Vector softmax(const Vector& logits);

/// Maximum marginal likelihood: sum over candidates of -q(z) log P(z),
/// q = P restricted to the candidates and renormalised, held constant.
/// Throws std::invalid_argument on an empty candidate set or a bad index
/// and std::domain_error when the candidates carry no probability mass.
double mml_loss(const Vector& probs, std::span<const int> candidates);

/// Gradient of mml_loss with respect to the cell logits with q frozen:
/// P - q.
Vector mml_logit_grad(const Vector& probs, std::span<const int> candidates);

/// -log P(gold).
double cross_entropy(const Vector& probs, int gold);

struct CellSelectionResult {
  double loss = 0.0;
  CellScores scores;
};

/// Forward and backward for the cell selector (encoder + cell head) under
/// the MML objective, which reduces to cross-entropy for one candidate.
/// Gradients are written to `d_params` / `d_head` when non-null.
CellSelectionResult cell_selection_step(
    const TokenizedExample& ex, const Params& params, const CellHead& head,
    const EncoderConfig& cfg, const CandidateSet& candidates,
    AttentionMode mode, Params* d_params = nullptr, CellHead* d_head = nullptr);

// ---------------------------------------------------------------------------
// Span reading

struct SpanHead {
  Vector w_start;
  Vector w_end;
  Vector b;  // size 1

  static SpanHead zeros(int hidden);
  static SpanHead init(int hidden, std::uint64_t seed, double stddev = 0.02);
  std::vector<TensorView> tensors();
};

struct SpanScore {
  int start = 0;  // inclusive, sequence positions
  int end = 0;    // inclusive
  double score = 0.0;
};

/// Reader input: `[CLS] query [SEP] cell_text` cut to max_len tokens.
TokenizedExample reader_input(const TokenSeq& query, const TokenSeq& cell_text,
                              const EncoderConfig& cfg, int max_len = 512);

/// Scores every span inside the single cell of a reader input with at most
/// max_span_len tokens: w_start . h_start + w_end . h_end + b.
/// Throws std::invalid_argument when no span is valid.
std::vector<SpanScore> span_scores(const Matrix& contextual,
                                   const TokenizedExample& ex,
                                   const SpanHead& head, int max_span_len);

/// Offset of the first occurrence of `needle` in `haystack`.
std::optional<int> first_occurrence(const TokenSeq& haystack,
                                    const TokenSeq& needle);

/// Index into `spans` of the gold span, located at the first occurrence of
/// `answer` in the reader input's cell text. Empty when the answer is not
/// present (e.g. cut by truncation) or longer than the span limit.
std::optional<int> gold_span_index(const std::vector<SpanScore>& spans,
                                   const TokenizedExample& ex,
                                   const TokenSeq& answer);

/// Softmax cross-entropy over spans; accumulates head gradients and the
/// gradient on the contextual states when the outputs are non-null.
double span_loss(const Matrix& contextual, const std::vector<SpanScore>& spans,
                 int gold, const SpanHead& head, Matrix* d_contextual = nullptr,
                 SpanHead* d_head = nullptr);

// ---------------------------------------------------------------------------
// Metrics

int hits_at_k(const std::vector<CellCoord>& ranked, const CandidateSet& gold,
              int k);

/// Lowercase, punctuation stripped, whitespace collapsed.
std::string normalize_answer(const std::string& s);

struct EmF1 {
  double em = 0.0;
  double f1 = 0.0;
};
EmF1 em_f1(const std::string& prediction, const std::string& gold);

// ---------------------------------------------------------------------------
// JSON-lines records

/// {"id", "query": [...], "table": {table format}, "candidates": [[r, c]...],
///  "answer": [token ids], "answer_text": "..."}. Candidates default to the
/// cells containing the answer.
struct QaRecord {
  std::string id;
  TableExample example;
  CandidateSet candidates;
  TokenSeq answer;
  std::string answer_text;
};

QaRecord qa_record_from_json(const nlohmann::json& j);
std::vector<QaRecord> read_qa_records(std::istream& in);

/// Training variant that skips questions whose answer occurs in more than
/// one cell instead of marginalising over them.
std::vector<QaRecord> drop_ambiguous(std::vector<QaRecord> records);

/// {"id", "ranked_cells": [[r, c]...], "best_span": {"cell": [r, c],
///  "start", "end", "tokens": [...]}, "scores": [P(c) in ranked order]}
struct Prediction {
  std::string id;
  std::vector<CellCoord> ranked_cells;
  std::vector<double> scores;
  CellCoord span_cell;
  int span_start = 0;
  int span_end = 0;
  TokenSeq span_tokens;
};

nlohmann::json to_json(const Prediction& p);
void write_predictions(std::ostream& out, const std::vector<Prediction>& preds);

struct PointrOptions {
  int top_k_sentences = 5;
  ExpansionScope scope = ExpansionScope::per_cell;
  int max_span_len = 10;
  int reader_max_len = 512;
  bool use_sparse = true;
};

/// Expands, selects a cell with the MATE encoder, then reads the best span
/// from the chosen expanded cell with a full-attention reader.
Prediction predict(const QaRecord& record, const Params& selector,
                   const CellHead& cell_head, const Params& reader,
                   const SpanHead& span_head, const EncoderConfig& cfg,
                   const PointrOptions& options = {});

}  // namespace mate
