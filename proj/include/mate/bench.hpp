#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mate/encoder.hpp"
#include "mate/pattern.hpp"
#include "mate/pointr.hpp"
#include "mate/table.hpp"
#include "mate/table_json.hpp"

namespace mate {

// ---------------------------------------------------------------------------
// Scaling

/// Seeded table that flattens to exactly n tokens: `query_len` query
/// tokens, `cols` columns, 1-3 tokens per cell (the last row may be
/// shorter). Token ids are drawn from [3, vocab). Throws
/// std::invalid_argument when n cannot hold the query and one token.
TableExample synthetic_table(int n, std::uint64_t seed, int cols = 8,
                             int query_len = 8, int vocab = 1000);

/// Analytic score dot products per head per layer. "dense" and "sat" are
/// n^2, "mate" and "etc" n*G + (n-G)(G+3R), "linformer" n*projected.
std::uint64_t analytic_score_ops(const std::string& impl, std::int64_t n,
                                 std::int64_t global_size, std::int64_t radius,
                                 std::int64_t projected = 256);

struct BenchRow {
  std::string impl;
  int n = 0;
  double wall_time = 0.0;  // seconds, median over repeats
  std::uint64_t score_ops = 0;
  std::size_t peak_alloc_proxy = 0;
  int global_size = 0;
  int radius = 0;
  int heads = 0;
  int hidden = 0;
  int layers = 0;
  bool failed = false;
};

struct ScalingOptions {
  std::vector<int> lengths{256, 512, 1024, 2048};
  std::vector<std::string> impls{"dense", "mate", "sat"};
  int repeats = 3;
  std::uint64_t seed = 0;
};

/// Times the dense masked encoder ("dense" = full attention, "sat") and the
/// bucketed encoder ("mate") on identical weights for each length. Score
/// ops come from the kernels' counters; embedding vocabularies are widened
/// to fit the generated tables. An allocation failure yields a row with
/// `failed` set. Rows are sorted by (impl, n).
std::vector<BenchRow> run_scaling(const EncoderConfig& cfg,
                                  const ScalingOptions& options);

inline constexpr const char* kBenchCsvHeader =
    "impl,n,wall_time_s,score_ops,peak_alloc_bytes,global_size,radius,heads,"
    "hidden,layers,status";

void write_csv(std::ostream& out, const std::vector<BenchRow>& rows);

// ---------------------------------------------------------------------------
// Attention flow

enum class FlowCategory {
  cls,
  question,
  header_diff_col,
  header_same_col,
  table_diff_col_diff_row,
  table_diff_col_same_row,
  table_same_col_diff_row,
  table_same_col_same_row,
};
inline constexpr int kFlowCategories = 8;

const char* to_string(FlowCategory c);

/// Whether k is a flow source: a table token outside the header row.
bool is_flow_source(const TokenizedExample& ex, int k);

/// Category of target j seen from table token k, or nothing for padding.
std::optional<FlowCategory> flow_category(const TokenizedExample& ex, int k,
                                          int j);

struct FlowStats {
  std::array<double, kFlowCategories> attention_pct{};
  std::array<double, kFlowCategories> uniform_pct{};
  std::uint64_t rows = 0;

  /// attention / uniform; NaN when the uniform share is zero.
  double ratio(FlowCategory c) const;
  /// Ratio of summed shares over several categories.
  double ratio(std::initializer_list<FlowCategory> cs) const;
  double same_row_or_col_ratio() const;
  double diff_row_and_col_ratio() const;
};

/// Averages attention mass from table tokens over every source, head,
/// layer and example, against a uniform-over-non-padding baseline.
class FlowAccumulator {
 public:
  /// `attention[layer][head]` is n x n with column k the distribution of
  /// query position k.
  void add(const TokenizedExample& ex,
           const std::vector<std::vector<Matrix>>& attention);
  FlowStats finish() const;

 private:
  std::array<double, kFlowCategories> attention_{};
  std::array<double, kFlowCategories> uniform_{};
  std::uint64_t rows_ = 0;
};

FlowStats flow_stats(const std::vector<TokenizedExample>& examples,
                     const std::vector<std::vector<std::vector<Matrix>>>& attention);

void write_flow_csv(std::ostream& out, const FlowStats& stats);

// ---------------------------------------------------------------------------
// Toy training

/// Synthetic lookup task: row 0 holds column headers, column 0 holds row
/// keys, the query is (row key, column header) and the gold cell is their
/// intersection. Every cell is one token.
struct ToyTask {
  int rows = 4;
  int cols = 4;
  int key_vocab = 16;
  int header_vocab = 16;
  int value_vocab = 32;

  /// Smallest token vocabulary covering the task's ids.
  int token_vocab() const { return 3 + key_vocab + header_vocab + value_vocab; }
};

struct ToyExample {
  TokenizedExample ex;
  CandidateSet gold;
};

ToyExample make_toy_example(const ToyTask& task, const EncoderConfig& cfg,
                            std::mt19937_64& rng);

struct ToyTrainOptions {
  ToyTask task;
  EncoderConfig cfg;
  AttentionMode mode = AttentionMode::mate;
  int steps = 2000;
  int batch = 32;
  double learning_rate = 1e-3;
  int warmup_steps = 0;        // linear ramp from 0
  bool linear_decay = false;   // then linear decay to 0 at `steps`
  // 0.02 leaves both attention modes stuck at chance for thousands of steps.
  double init_stddev = 0.1;
  int eval_size = 200;
  int eval_every = 100;
  std::uint64_t seed = 0;
};

struct ToyTrace {
  std::vector<double> loss;                      // per step, batch mean
  std::vector<std::pair<int, double>> hits_at_1; // (step, held-out hits@1)
  bool diverged = false;
  Params params;
  CellHead head;

  double initial_hits() const { return hits_at_1.empty() ? 0.0 : hits_at_1.front().second; }
  double final_hits() const { return hits_at_1.empty() ? 0.0 : hits_at_1.back().second; }
};

/// Encoder config sized for the toy task: d = 64, two layers, h_r = h_c = 2.
EncoderConfig toy_config(const ToyTask& task);

/// Held-out examples for a seed, shared by training and evaluation.
std::vector<ToyExample> toy_heldout(const ToyTrainOptions& options);

double toy_hits_at_1(const std::vector<ToyExample>& examples, const Params& params,
                     const CellHead& head, const EncoderConfig& cfg,
                     AttentionMode mode);

/// Adam on fresh batches; held-out hits@1 at step 0, every eval_every
/// steps and at the end. Deterministic given the seed. Stops early and sets
/// `diverged` on a non-finite loss.
ToyTrace toy_train(const ToyTrainOptions& options);

}  // namespace mate
