#include "mate/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <new>
#include <ostream>
#include <stdexcept>
#include <tuple>

#include "mate/sparse_attention.hpp"

namespace mate {

// ---------------------------------------------------------------------------
// Scaling

TableExample synthetic_table(int n, std::uint64_t seed, int cols, int query_len,
                             int vocab) {
  if (cols < 1 || query_len < 0 || vocab < 4) {
    throw std::invalid_argument("bad synthetic table parameters");
  }
  int remaining = n - query_len - 2;
  if (remaining < 1) {
    throw std::invalid_argument("length " + std::to_string(n) +
                                " cannot hold the query and a table");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> token(3, vocab - 1);
  std::uniform_int_distribution<int> cell_len(1, 3);
  std::uniform_int_distribution<int> small_value(1, 20);

  TableExample out;
  for (int i = 0; i < query_len; ++i) out.query.push_back(token(rng));

  std::vector<std::vector<Cell>> grid;
  while (remaining > 0) {
    std::vector<int> lengths(cols);
    int sum = 0;
    for (int& l : lengths) sum += (l = cell_len(rng));
    if (sum > remaining) {
      // Spread what is left evenly; this is the last row.
      for (int c = 0; c < cols; ++c) {
        lengths[c] = remaining / cols + (c < remaining % cols ? 1 : 0);
      }
      sum = remaining;
    }
    std::vector<Cell> row(cols);
    for (int c = 0; c < cols; ++c) {
      for (int t = 0; t < lengths[c]; ++t) row[c].tokens.push_back(token(rng));
      // The last column is numeric so rank embeddings are exercised.
      if (c == cols - 1 && lengths[c] > 0) row[c].numeric_value = small_value(rng);
    }
    grid.push_back(std::move(row));
    remaining -= sum;
  }
  out.table = Table(std::move(grid));
  return out;
}

std::uint64_t analytic_score_ops(const std::string& impl, std::int64_t n,
                                 std::int64_t global_size, std::int64_t radius,
                                 std::int64_t projected) {
  if (impl == "dense" || impl == "sat") return static_cast<std::uint64_t>(n * n);
  if (impl == "mate" || impl == "etc") return op_count(n, global_size, radius);
  if (impl == "linformer") return static_cast<std::uint64_t>(n * projected);
  throw std::invalid_argument("unknown implementation " + impl);
}

std::vector<BenchRow> run_scaling(const EncoderConfig& base,
                                  const ScalingOptions& options) {
  for (const auto& impl : options.impls) {
    if (impl != "dense" && impl != "mate" && impl != "sat") {
      throw std::invalid_argument("cannot time implementation " + impl);
    }
  }
  std::vector<TokenizedExample> examples;
  EncoderConfig cfg = base;
  cfg.positional_reset = true;
  int longest = 0;
  for (int n : options.lengths) longest = std::max(longest, n);
  cfg.max_len = std::max(cfg.max_len, longest);

  std::vector<TableExample> tables;
  for (int n : options.lengths) {
    tables.push_back(synthetic_table(n, options.seed + static_cast<std::uint64_t>(n)));
    cfg.row_vocab = std::max(cfg.row_vocab, tables.back().table.rows() + 1);
    cfg.col_vocab = std::max(cfg.col_vocab, tables.back().table.cols() + 1);
  }
  cfg.token_vocab = std::max(cfg.token_vocab, 1000);
  cfg.rank_vocab = std::max(cfg.rank_vocab, 21);
  cfg.position_vocab = std::max(cfg.position_vocab, 16);
  for (const auto& t : tables) examples.push_back(flatten(t.query, t.table, cfg));

  const Params params = Params::init(cfg, options.seed);
  std::vector<BenchRow> rows;
  for (const auto& impl : options.impls) {
    for (const auto& ex : examples) {
      BenchRow row;
      row.impl = impl;
      row.n = ex.size();
      row.global_size = cfg.global_size;
      row.radius = cfg.radius;
      row.heads = cfg.heads();
      row.hidden = cfg.hidden;
      row.layers = cfg.layers;
      std::vector<double> times;
      try {
        for (int rep = 0; rep < std::max(1, options.repeats); ++rep) {
          AttentionCounters counters;
          const auto start = std::chrono::steady_clock::now();
          if (impl == "mate") {
            encoder_forward(ex, params, cfg, sparse_attention(ex, cfg, &counters));
          } else {
            ForwardOptions fo;
            fo.mode = impl == "sat" ? AttentionMode::sat : AttentionMode::full;
            fo.counters = &counters;
            encoder_forward(ex, params, cfg, fo);
          }
          const auto stop = std::chrono::steady_clock::now();
          times.push_back(std::chrono::duration<double>(stop - start).count());
          row.score_ops = counters.score_ops;
          row.peak_alloc_proxy = counters.peak_bytes;
        }
        std::nth_element(times.begin(), times.begin() + times.size() / 2, times.end());
        row.wall_time = times[times.size() / 2];
      } catch (const std::bad_alloc&) {
        row.failed = true;
      }
      rows.push_back(std::move(row));
    }
  }
  std::sort(rows.begin(), rows.end(), [](const BenchRow& a, const BenchRow& b) {
    return std::tie(a.impl, a.n) < std::tie(b.impl, b.n);
  });
  return rows;
}

void write_csv(std::ostream& out, const std::vector<BenchRow>& rows) {
  std::vector<BenchRow> sorted = rows;
  std::sort(sorted.begin(), sorted.end(), [](const BenchRow& a, const BenchRow& b) {
    return std::tie(a.impl, a.n) < std::tie(b.impl, b.n);
  });
  out << kBenchCsvHeader << '\n';
  for (const auto& r : sorted) {
    out << r.impl << ',' << r.n << ',' << r.wall_time << ',' << r.score_ops << ','
        << r.peak_alloc_proxy << ',' << r.global_size << ',' << r.radius << ','
        << r.heads << ',' << r.hidden << ',' << r.layers << ','
        << (r.failed ? "failed" : "ok") << '\n';
  }
}

// ---------------------------------------------------------------------------
// Attention flow

const char* to_string(FlowCategory c) {
  switch (c) {
    case FlowCategory::cls: return "cls";
    case FlowCategory::question: return "question";
    case FlowCategory::header_diff_col: return "header_diff_col";
    case FlowCategory::header_same_col: return "header_same_col";
    case FlowCategory::table_diff_col_diff_row: return "table_diff_col_diff_row";
    case FlowCategory::table_diff_col_same_row: return "table_diff_col_same_row";
    case FlowCategory::table_same_col_diff_row: return "table_same_col_diff_row";
    case FlowCategory::table_same_col_same_row: return "table_same_col_same_row";
  }
  return "?";
}

namespace {

bool in_header(const TokenizedExample& ex, int k) {
  return ex.has_header && ex.is_table(k) && ex.row_index[k] == 1;
}

}  // namespace

bool is_flow_source(const TokenizedExample& ex, int k) {
  return ex.is_table(k) && !in_header(ex, k);
}

std::optional<FlowCategory> flow_category(const TokenizedExample& ex, int k,
                                          int j) {
  if (ex.is_padding[j]) return std::nullopt;
  if (ex.is_query[j]) {
    return ex.token_ids[j] == SpecialTokens::kCls ? FlowCategory::cls
                                                  : FlowCategory::question;
  }
  const bool same_col = ex.col_index[j] == ex.col_index[k];
  if (in_header(ex, j)) {
    return same_col ? FlowCategory::header_same_col : FlowCategory::header_diff_col;
  }
  const bool same_row = ex.row_index[j] == ex.row_index[k];
  if (same_col) {
    return same_row ? FlowCategory::table_same_col_same_row
                    : FlowCategory::table_same_col_diff_row;
  }
  return same_row ? FlowCategory::table_diff_col_same_row
                  : FlowCategory::table_diff_col_diff_row;
}

double FlowStats::ratio(FlowCategory c) const {
  return ratio({c});
}

double FlowStats::ratio(std::initializer_list<FlowCategory> cs) const {
  double a = 0.0, u = 0.0;
  for (auto c : cs) {
    a += attention_pct[static_cast<int>(c)];
    u += uniform_pct[static_cast<int>(c)];
  }
  return u == 0.0 ? std::numeric_limits<double>::quiet_NaN() : a / u;
}

double FlowStats::same_row_or_col_ratio() const {
  return ratio({FlowCategory::header_same_col, FlowCategory::table_diff_col_same_row,
                FlowCategory::table_same_col_diff_row,
                FlowCategory::table_same_col_same_row});
}

double FlowStats::diff_row_and_col_ratio() const {
  return ratio({FlowCategory::header_diff_col, FlowCategory::table_diff_col_diff_row});
}

void FlowAccumulator::add(const TokenizedExample& ex,
                          const std::vector<std::vector<Matrix>>& attention) {
  const int n = ex.size();
  const int real = ex.real_size();
  for (int k = 0; k < n; ++k) {
    if (!is_flow_source(ex, k)) continue;
    std::array<double, kFlowCategories> uniform{};
    std::vector<int> category(n, -1);
    for (int j = 0; j < n; ++j) {
      if (auto c = flow_category(ex, k, j)) {
        category[j] = static_cast<int>(*c);
        uniform[category[j]] += 1.0 / real;
      }
    }
    for (const auto& layer : attention) {
      for (const auto& probs : layer) {
        if (probs.rows() != n || probs.cols() != n) {
          throw std::invalid_argument("attention matrix does not match example");
        }
        for (int j = 0; j < n; ++j) {
          if (category[j] >= 0) attention_[category[j]] += probs(j, k);
        }
        for (int c = 0; c < kFlowCategories; ++c) uniform_[c] += uniform[c];
        ++rows_;
      }
    }
  }
}

FlowStats FlowAccumulator::finish() const {
  FlowStats s;
  s.rows = rows_;
  if (rows_ == 0) return s;
  for (int c = 0; c < kFlowCategories; ++c) {
    s.attention_pct[c] = 100.0 * attention_[c] / static_cast<double>(rows_);
    s.uniform_pct[c] = 100.0 * uniform_[c] / static_cast<double>(rows_);
  }
  return s;
}

FlowStats flow_stats(const std::vector<TokenizedExample>& examples,
                     const std::vector<std::vector<std::vector<Matrix>>>& attention) {
  if (examples.size() != attention.size()) {
    throw std::invalid_argument("need one attention set per example");
  }
  FlowAccumulator acc;
  for (std::size_t i = 0; i < examples.size(); ++i) acc.add(examples[i], attention[i]);
  return acc.finish();
}

void write_flow_csv(std::ostream& out, const FlowStats& stats) {
  out << "category,attention_pct,uniform_pct,ratio\n";
  for (int c = 0; c < kFlowCategories; ++c) {
    const auto cat = static_cast<FlowCategory>(c);
    out << to_string(cat) << ',' << stats.attention_pct[c] << ','
        << stats.uniform_pct[c] << ',';
    const double r = stats.ratio(cat);
    if (std::isnan(r)) {
      out << "nan";
    } else {
      out << r;
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Toy training

ToyExample make_toy_example(const ToyTask& task, const EncoderConfig& cfg,
                            std::mt19937_64& rng) {
  if (task.rows < 2 || task.cols < 2 || task.key_vocab < task.rows - 1 ||
      task.header_vocab < task.cols) {
    throw std::invalid_argument("toy task vocabularies too small for the table");
  }
  const TokenId key_base = 3;
  const TokenId header_base = key_base + task.key_vocab;
  const TokenId value_base = header_base + task.header_vocab;

  auto distinct = [&rng](int count, int range, TokenId base) {
    std::vector<TokenId> all(range);
    for (int i = 0; i < range; ++i) all[i] = base + i;
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(count);
    return all;
  };
  const auto headers = distinct(task.cols, task.header_vocab, header_base);
  const auto keys = distinct(task.rows - 1, task.key_vocab, key_base);
  std::uniform_int_distribution<TokenId> value(value_base,
                                               value_base + task.value_vocab - 1);

  Table table(task.rows, task.cols, /*has_header=*/true);
  for (int c = 0; c < task.cols; ++c) table.at(0, c).tokens = {headers[c]};
  for (int r = 1; r < task.rows; ++r) {
    table.at(r, 0).tokens = {keys[r - 1]};
    for (int c = 1; c < task.cols; ++c) table.at(r, c).tokens = {value(rng)};
  }
  std::uniform_int_distribution<int> pick_row(1, task.rows - 1);
  std::uniform_int_distribution<int> pick_col(1, task.cols - 1);
  const int r = pick_row(rng);
  const int c = pick_col(rng);

  ToyExample out;
  out.ex = flatten({keys[r - 1], headers[c]}, table, cfg);
  out.gold.cells = {{r, c}};
  return out;
}

EncoderConfig toy_config(const ToyTask& task) {
  EncoderConfig cfg;
  cfg.row_heads = 2;
  cfg.col_heads = 2;
  cfg.hidden = 64;
  cfg.head_dim = 16;
  cfg.layers = 2;
  cfg.ffn_dim = 128;
  cfg.max_len = 4 + task.rows * task.cols;
  cfg.global_size = 4;
  cfg.radius = std::max(task.rows, task.cols);
  cfg.token_vocab = task.token_vocab();
  cfg.position_vocab = cfg.max_len;
  cfg.row_vocab = task.rows + 1;
  cfg.col_vocab = task.cols + 1;
  cfg.rank_vocab = 1;
  return cfg;
}

std::vector<ToyExample> toy_heldout(const ToyTrainOptions& options) {
  std::mt19937_64 rng(options.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<ToyExample> out;
  for (int i = 0; i < options.eval_size; ++i) {
    out.push_back(make_toy_example(options.task, options.cfg, rng));
  }
  return out;
}

double toy_hits_at_1(const std::vector<ToyExample>& examples, const Params& params,
                     const CellHead& head, const EncoderConfig& cfg,
                     AttentionMode mode) {
  if (examples.empty()) return 0.0;
  ForwardOptions fo;
  fo.mode = mode;
  int hits = 0;
  for (const auto& e : examples) {
    const auto out = encoder_forward(e.ex, params, cfg, fo);
    hits += hits_at_k(cell_scores(out.hidden, e.ex, head).ranked(), e.gold, 1);
  }
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

namespace {

void accumulate(const std::vector<TensorView>& into,
                const std::vector<TensorView>& from, double scale) {
  for (std::size_t i = 0; i < into.size(); ++i) into[i].flat() += scale * from[i].flat();
}

}  // namespace

ToyTrace toy_train(const ToyTrainOptions& options) {
  const EncoderConfig& cfg = options.cfg;
  cfg.validate();
  ToyTrace trace;
  trace.params = Params::init(cfg, options.seed, options.init_stddev);
  trace.head = CellHead::init(cfg.hidden, options.seed + 1, options.init_stddev);
  const auto heldout = toy_heldout(options);
  std::mt19937_64 rng(options.seed + 2);

  auto param_views = tensors(trace.params);
  for (auto& v : trace.head.tensors()) param_views.push_back(v);
  Adam adam(options.learning_rate);
  auto schedule = [&](int step) {
    if (step <= options.warmup_steps) return static_cast<double>(step) / options.warmup_steps;
    if (!options.linear_decay) return 1.0;
    return static_cast<double>(options.steps - step + 1) /
           static_cast<double>(options.steps - options.warmup_steps + 1);
  };

  auto evaluate = [&](int step) {
    trace.hits_at_1.emplace_back(
        step, toy_hits_at_1(heldout, trace.params, trace.head, cfg, options.mode));
  };
  evaluate(0);

  Params grad_sum = Params::zeros(cfg);
  CellHead head_sum = CellHead::zeros(cfg.hidden);
  auto grad_views = tensors(grad_sum);
  for (auto& v : head_sum.tensors()) grad_views.push_back(v);

  for (int step = 1; step <= options.steps; ++step) {
    for (auto& v : grad_views) v.flat().setZero();
    double loss = 0.0;
    for (int b = 0; b < options.batch; ++b) {
      const ToyExample e = make_toy_example(options.task, cfg, rng);
      Params g;
      CellHead hg;
      loss += cell_selection_step(e.ex, trace.params, trace.head, cfg, e.gold,
                                  options.mode, &g, &hg)
                  .loss;
      auto gv = tensors(g);
      for (auto& v : hg.tensors()) gv.push_back(v);
      accumulate(grad_views, gv, 1.0 / options.batch);
    }
    loss /= options.batch;
    trace.loss.push_back(loss);
    if (!std::isfinite(loss)) {
      trace.diverged = true;
      break;
    }
    adam.set_learning_rate(options.learning_rate * schedule(step));
    adam.step(param_views, grad_views);
    if (step % options.eval_every == 0 || step == options.steps) evaluate(step);
  }
  return trace;
}

}  // namespace mate
