// Command-line front end: scaling and flow benchmarks, toy training,
// dense/sparse equivalence checks, mask dumps and PointR prediction.

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <string>

#include "mate/bench.hpp"
#include "mate/checkpoint.hpp"
#include "mate/sparse_attention.hpp"

namespace {

using namespace mate;

AttentionMode parse_mode(const std::string& s) {
  if (s == "mate") return AttentionMode::mate;
  if (s == "full") return AttentionMode::full;
  if (s == "sat") return AttentionMode::sat;
  throw std::invalid_argument("unknown attention mode " + s);
}

/// Writes to the named file, or stdout for "" / "-".
class Output {
 public:
  explicit Output(const std::string& path) {
    if (!path.empty() && path != "-") {
      file_ = std::make_unique<std::ofstream>(path);
      if (!*file_) throw std::runtime_error("cannot write " + path);
    }
  }
  std::ostream& stream() { return file_ ? *file_ : std::cout; }

 private:
  std::unique_ptr<std::ofstream> file_;
};

std::vector<QaRecord> load_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_qa_records(in);
}

/// Default encoder widened to cover every id and index in the records.
EncoderConfig config_for(const std::vector<QaRecord>& records, int max_len) {
  EncoderConfig cfg = EncoderConfig::with_max_len(max_len);
  auto widen = [](int& v, int need) { v = std::max(v, need); };
  for (const auto& r : records) {
    const auto& t = r.example.table;
    widen(cfg.row_vocab, t.rows() + 1);
    widen(cfg.col_vocab, t.cols() + 1);
    widen(cfg.rank_vocab, t.rows() + 1);
    for (TokenId id : r.example.query) widen(cfg.token_vocab, id + 1);
    for (int i = 0; i < t.rows(); ++i) {
      for (int j = 0; j < t.cols(); ++j) {
        for (TokenId id : t.at(i, j).tokens) widen(cfg.token_vocab, id + 1);
        for (const auto& s : t.at(i, j).linked_sentences)
          for (TokenId id : s) widen(cfg.token_vocab, id + 1);
      }
    }
  }
  return cfg;
}

struct Model {
  EncoderConfig cfg;
  Params params;
  CellHead head;
};

Model load_or_init(const std::string& checkpoint, const EncoderConfig& fallback,
                   std::uint64_t seed) {
  Model m;
  if (checkpoint.empty()) {
    m.cfg = fallback;
    m.params = Params::init(m.cfg, seed);
    m.head = CellHead::init(m.cfg.hidden, seed + 1);
    return m;
  }
  const Checkpoint c = load_checkpoint(checkpoint);
  m.cfg = c.config;
  m.params = c.params();
  m.head = CellHead::zeros(m.cfg.hidden);
  if (c.tensors.contains("cell_head/w")) c.assign_to(m.head.tensors());
  return m;
}

int bench_scaling(const std::vector<int>& lengths, const std::vector<std::string>& impls,
                  int global_size, int radius, int repeats, std::uint64_t seed,
                  const std::string& out) {
  EncoderConfig cfg;
  cfg.global_size = global_size;
  cfg.radius = radius;
  ScalingOptions options;
  options.lengths = lengths;
  options.impls = impls;
  options.repeats = repeats;
  options.seed = seed;
  const auto rows = run_scaling(cfg, options);
  Output o(out);
  write_csv(o.stream(), rows);
  return std::any_of(rows.begin(), rows.end(), [](const BenchRow& r) { return r.failed; })
             ? 2
             : 0;
}

int bench_flow(const std::string& in, const std::string& checkpoint,
               const std::string& mode, std::uint64_t seed, const std::string& out) {
  const auto records = load_records(in);
  const Model model = load_or_init(checkpoint, config_for(records, 512), seed);
  FlowAccumulator acc;
  ForwardOptions fo;
  fo.mode = parse_mode(mode);
  fo.retain_attention = true;
  for (const auto& r : records) {
    const auto ex = flatten(r.example.query, r.example.table, model.cfg);
    acc.add(ex, encoder_forward(ex, model.params, model.cfg, fo).attention);
  }
  const FlowStats stats = acc.finish();
  Output o(out);
  write_flow_csv(o.stream(), stats);
  std::cerr << "same_row_or_col_ratio=" << stats.same_row_or_col_ratio()
            << " diff_row_and_col_ratio=" << stats.diff_row_and_col_ratio() << '\n';
  return 0;
}

int train_toy(ToyTrainOptions options, const std::string& mode,
              const std::string& checkpoint) {
  options.cfg = toy_config(options.task);
  options.mode = parse_mode(mode);
  options.eval_every = std::max(1, options.eval_every);
  ToyTrace trace = toy_train(options);
  std::cout << "step,hits_at_1\n";
  for (const auto& [step, hits] : trace.hits_at_1) std::cout << step << ',' << hits << '\n';
  if (!trace.loss.empty()) std::cerr << "final_loss=" << trace.loss.back() << '\n';
  if (!checkpoint.empty()) {
    auto views = tensors(trace.params);
    for (auto& v : trace.head.tensors()) views.push_back(v);
    save_checkpoint(checkpoint, views, options.cfg);
  }
  return trace.diverged ? 3 : 0;
}

int check_equiv(int trials, std::uint64_t seed, double tolerance) {
  EncoderConfig cfg;
  cfg.row_heads = 2;
  cfg.col_heads = 2;
  cfg.head_dim = 8;
  cfg.hidden = 32;
  cfg.layers = 2;
  cfg.ffn_dim = 64;
  cfg.token_vocab = 64;
  cfg.position_vocab = 512;
  std::mt19937_64 rng(seed);
  const Params params = Params::init(cfg, seed, 0.3);
  std::uniform_int_distribution<int> rows(1, 6), cols(1, 8), len(1, 3), qlen(0, 6),
      tok(3, 63), slack(0, 4);
  double worst = 0.0;
  int failures = 0;
  for (int t = 0; t < trials; ++t) {
    Table table(rows(rng), cols(rng));
    for (int r = 0; r < table.rows(); ++r)
      for (int c = 0; c < table.cols(); ++c)
        for (int i = len(rng); i > 0; --i) table.at(r, c).tokens.push_back(tok(rng));
    TokenSeq query(qlen(rng));
    for (auto& q : query) q = tok(rng);
    const auto ex = flatten(query, table, cfg);
    EncoderConfig c = cfg;
    c.global_size = ex.query_size() + slack(rng);
    c.radius = std::max(ex.max_row_span(), ex.max_col_span()) + slack(rng);
    const auto report = equivalence_report(ex, params, c);
    worst = std::max(worst, report.max_abs_diff());
    if (!report.exact() || report.max_abs_diff() >= tolerance) {
      ++failures;
      std::cerr << "trial " << t << ": " << report.mode() << " diff "
                << report.max_abs_diff() << ' ' << report.failed_conditions() << '\n';
    }
  }
  std::cout << "trials=" << trials << " max_abs_diff=" << worst
            << " failures=" << failures << '\n';
  return failures == 0 ? 0 : 1;
}

int dump_mask(const std::string& example, int head, const std::string& kind,
              int row_heads, int col_heads) {
  const TableExample t = load_table_example(example);
  EncoderConfig cfg;
  cfg.row_heads = row_heads;
  cfg.col_heads = col_heads;
  cfg.max_len = std::numeric_limits<int>::max();
  const auto ex = flatten(t.query, t.table, cfg);
  std::optional<AttentionPattern> pattern;
  if (kind.empty()) {
    pattern.emplace(head_pattern(ex, head, cfg));
  } else if (kind == "sat") {
    pattern.emplace(sat_pattern(ex));
  } else if (kind == "full") {
    pattern.emplace(full_pattern(ex));
  } else if (kind == "row") {
    pattern.emplace(ex, PatternKind::row);
  } else if (kind == "column") {
    pattern.emplace(ex, PatternKind::column);
  } else {
    throw std::invalid_argument("unknown pattern kind " + kind);
  }
  std::cout << to_pbm(to_mask(*pattern));
  return 0;
}

int pointr_predict(const std::string& in, const std::string& checkpoint,
                   const std::string& reader_checkpoint, int k, bool global_scope,
                   bool dense, int max_span_len, std::uint64_t seed,
                   const std::string& out) {
  const auto records = load_records(in);
  const EncoderConfig fallback = config_for(records, 512);
  const Model selector = load_or_init(checkpoint, fallback, seed);
  const Model reader = load_or_init(reader_checkpoint, selector.cfg, seed + 7);
  if (reader.cfg.hidden != selector.cfg.hidden) {
    throw std::invalid_argument("reader and selector widths differ");
  }
  SpanHead span_head = SpanHead::init(reader.cfg.hidden, seed + 9);
  if (!reader_checkpoint.empty()) {
    const Checkpoint c = load_checkpoint(reader_checkpoint);
    if (c.tensors.contains("span_head/w_start")) c.assign_to(span_head.tensors());
  }
  PointrOptions options;
  options.top_k_sentences = k;
  options.scope = global_scope ? ExpansionScope::global : ExpansionScope::per_cell;
  options.use_sparse = !dense;
  options.max_span_len = max_span_len;

  std::vector<Prediction> preds;
  int hits = 0, scored = 0;
  for (const auto& r : records) {
    preds.push_back(predict(r, selector.params, selector.head, reader.params,
                            span_head, selector.cfg, options));
    if (!r.candidates.cells.empty()) {
      hits += hits_at_k(preds.back().ranked_cells, r.candidates, 1);
      ++scored;
    }
  }
  Output o(out);
  write_predictions(o.stream(), preds);
  if (scored > 0) {
    std::cerr << "hits_at_1=" << static_cast<double>(hits) / scored << " over " << scored
              << " examples\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Table encoder with row/column sparse attention"};
  app.require_subcommand(1);
  int status = 0;

  auto* bench = app.add_subcommand("bench", "Benchmarks")->require_subcommand(1);

  auto* scaling = bench->add_subcommand("scaling", "Time dense vs bucketed attention");
  std::vector<int> lengths{256, 512, 1024, 2048};
  std::vector<std::string> impls{"dense", "mate", "sat"};
  int g = 116, r = 42, repeats = 3;
  std::uint64_t seed = 0;
  std::string out;
  scaling->add_option("--lengths", lengths, "Sequence lengths")->delimiter(',');
  scaling->add_option("--impls", impls, "dense, mate and/or sat")->delimiter(',');
  scaling->add_option("--g", g, "Global tokens");
  scaling->add_option("--r", r, "Bucket radius");
  scaling->add_option("--repeats", repeats, "Timed repeats (median reported)");
  scaling->add_option("--seed", seed);
  scaling->add_option("--out", out, "CSV path (stdout by default)");
  scaling->callback([&] { status = bench_scaling(lengths, impls, g, r, repeats, seed, out); });

  auto* flow = bench->add_subcommand("flow", "Attention flow by structural category");
  std::string in, checkpoint, mode = "mate";
  flow->add_option("--in", in, "QA records (JSON lines)")->required();
  flow->add_option("--checkpoint", checkpoint, "Model manifest (random init if absent)");
  flow->add_option("--mode", mode, "mate, full or sat");
  flow->add_option("--seed", seed);
  flow->add_option("--out", out, "CSV path (stdout by default)");
  flow->callback([&] { status = bench_flow(in, checkpoint, mode, seed, out); });

  auto* train = app.add_subcommand("train", "Training")->require_subcommand(1);
  auto* toy = train->add_subcommand("toy", "Train the synthetic lookup task");
  ToyTrainOptions toy_options;
  toy->add_option("--steps", toy_options.steps);
  toy->add_option("--batch", toy_options.batch);
  toy->add_option("--lr", toy_options.learning_rate);
  toy->add_option("--warmup", toy_options.warmup_steps, "Linear warmup steps");
  toy->add_flag("--linear-decay", toy_options.linear_decay);
  toy->add_option("--init-stddev", toy_options.init_stddev);
  toy->add_option("--seed", toy_options.seed);
  toy->add_option("--mode", mode, "mate, full or sat");
  toy->add_option("--eval-every", toy_options.eval_every);
  toy->add_option("--eval-size", toy_options.eval_size);
  toy->add_option("--checkpoint", checkpoint, "Write the trained model here");
  toy->callback([&] { status = train_toy(toy_options, mode, checkpoint); });

  auto* check = app.add_subcommand("check", "Self checks")->require_subcommand(1);
  auto* equiv = check->add_subcommand("equiv", "Dense vs bucketed encoder on random tables");
  int trials = 100;
  double tolerance = 1e-9;
  equiv->add_option("--trials", trials);
  equiv->add_option("--seed", seed);
  equiv->add_option("--tolerance", tolerance);
  equiv->callback([&] { status = check_equiv(trials, seed, tolerance); });

  auto* dump = app.add_subcommand("dump", "Inspection")->require_subcommand(1);
  auto* mask = dump->add_subcommand("mask", "Print one head's mask as PBM");
  std::string example, kind;
  int head = 0, row_heads = 2, col_heads = 2;
  mask->add_option("--example", example, "Table JSON")->required();
  mask->add_option("--head", head);
  mask->add_option("--kind", kind, "row, column, sat or full (overrides --head)");
  mask->add_option("--row-heads", row_heads);
  mask->add_option("--col-heads", col_heads);
  mask->callback([&] { status = dump_mask(example, head, kind, row_heads, col_heads); });

  auto* pointr = app.add_subcommand("pointr", "Question answering")->require_subcommand(1);
  auto* predict_cmd = pointr->add_subcommand("predict", "Rank cells and read spans");
  std::string reader_checkpoint;
  int k = 5, max_span_len = 10;
  bool global_scope = false, dense = false;
  predict_cmd->add_option("--in", in, "QA records (JSON lines)")->required();
  predict_cmd->add_option("--checkpoint", checkpoint, "Selector manifest");
  predict_cmd->add_option("--reader-checkpoint", reader_checkpoint, "Reader manifest");
  predict_cmd->add_option("--k", k, "Sentences appended per cell");
  predict_cmd->add_flag("--global-expansion", global_scope, "Top-k over the whole table");
  predict_cmd->add_flag("--dense", dense, "Use the dense masked encoder");
  predict_cmd->add_option("--max-span-len", max_span_len);
  predict_cmd->add_option("--seed", seed);
  predict_cmd->add_option("--out", out, "Predictions path (stdout by default)");
  predict_cmd->callback([&] {
    status = pointr_predict(in, checkpoint, reader_checkpoint, k, global_scope, dense,
                            max_span_len, seed, out);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return status;
}
