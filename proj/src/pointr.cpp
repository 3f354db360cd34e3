#include "mate/pointr.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "mate/sparse_attention.hpp"

namespace mate {

// ---------------------------------------------------------------------------
// tf-idf

TfIdfIndex::TfIdfIndex(std::span<const TokenSeq> collection)
    : docs_(collection.size()) {
  for (const auto& sentence : collection) {
    TokenSeq unique = sentence;
    std::sort(unique.begin(), unique.end());
    unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
    for (TokenId t : unique) ++df_[t];
  }
}

double TfIdfIndex::idf(TokenId t) const {
  auto it = df_.find(t);
  const double df = it == df_.end() ? 0.0 : static_cast<double>(it->second);
  return std::log((1.0 + static_cast<double>(docs_)) / (1.0 + df)) + 1.0;
}

double TfIdfIndex::score(const TokenSeq& query, const TokenSeq& sentence) const {
  auto weights = [this](const TokenSeq& seq) {
    std::map<TokenId, double> w;
    for (TokenId t : seq) w[t] += 1.0;
    for (auto& [t, v] : w) v *= idf(t);
    return w;
  };
  const auto qw = weights(query);
  const auto sw = weights(sentence);
  double dot = 0.0, qn = 0.0, sn = 0.0;
  for (const auto& [t, v] : qw) {
    qn += v * v;
    if (auto it = sw.find(t); it != sw.end()) dot += v * it->second;
  }
  for (const auto& [_, v] : sw) sn += v * v;
  if (qn == 0.0 || sn == 0.0) return 0.0;
  return dot / (std::sqrt(qn) * std::sqrt(sn));
}

namespace {

std::vector<int> rank_by(const std::vector<double>& scores) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&scores](int a, int b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

std::vector<int> tfidf_rank(const TokenSeq& query,
                            const std::vector<TokenSeq>& sentences) {
  if (sentences.empty()) throw std::invalid_argument("no sentences to rank");
  const TfIdfIndex index(sentences);
  std::vector<double> scores;
  for (const auto& s : sentences) scores.push_back(index.score(query, s));
  return rank_by(scores);
}

// ---------------------------------------------------------------------------
// Expansion and budget fitting

std::size_t ExpandedTable::appended_length(CellCoord c) const {
  auto it = appended.find(c);
  if (it == appended.end()) return 0;
  std::size_t total = 0;
  for (const auto& s : it->second) total += s.size();
  return total;
}

std::size_t ExpandedTable::cell_length(CellCoord c) const {
  return base.at(c).tokens.size() + appended_length(c);
}

Table ExpandedTable::to_table() const {
  Table out = base;
  for (const auto& [coord, sentences] : appended) {
    auto& tokens = out.at(coord).tokens;
    for (const auto& s : sentences) tokens.insert(tokens.end(), s.begin(), s.end());
  }
  return out;
}

std::size_t table_budget(const TokenSeq& query, int max_len) {
  const auto used = static_cast<long>(query.size()) + 2;
  return max_len > used ? static_cast<std::size_t>(max_len - used) : 0;
}

ExpandedTable expand(const Table& table, const TokenSeq& query, int k,
                     std::optional<std::size_t> budget, ExpansionScope scope) {
  if (k < 0) throw std::invalid_argument("k must be non-negative");
  ExpandedTable out;
  out.base = table;

  std::vector<TokenSeq> collection;
  struct Ref {
    CellCoord cell;
    int sentence;
    double score;
  };
  std::vector<Ref> refs;
  for (int r = 0; r < table.rows(); ++r) {
    for (int c = 0; c < table.cols(); ++c) {
      const auto& sentences = table.at(r, c).linked_sentences;
      for (int s = 0; s < static_cast<int>(sentences.size()); ++s) {
        collection.push_back(sentences[s]);
        refs.push_back({{r, c}, s, 0.0});
      }
    }
  }

  if (k > 0 && !collection.empty()) {
    const TfIdfIndex index(collection);
    for (std::size_t i = 0; i < refs.size(); ++i) {
      refs[i].score = index.score(query, collection[i]);
    }
    std::vector<int> order(refs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&refs](int a, int b) {
      return refs[a].score > refs[b].score;
    });

    std::map<CellCoord, int> taken;
    int taken_total = 0;
    for (int i : order) {
      const Ref& ref = refs[i];
      if (scope == ExpansionScope::per_cell) {
        if (taken[ref.cell] >= k) continue;
      } else if (taken_total >= k) {
        break;
      }
      ++taken[ref.cell];
      ++taken_total;
      out.appended[ref.cell].push_back(
          table.at(ref.cell).linked_sentences[ref.sentence]);
    }
  }

  out.total_tokens = table.token_count();
  for (const auto& [coord, _] : out.appended) out.total_tokens += out.appended_length(coord);
  if (budget) return fit_budget(std::move(out), *budget);
  return out;
}

ExpandedTable fit_budget(ExpandedTable expanded, std::size_t budget) {
  if (expanded.base.token_count() > budget) {
    throw std::length_error("table of " +
                            std::to_string(expanded.base.token_count()) +
                            " tokens cannot fit a budget of " +
                            std::to_string(budget));
  }
  while (expanded.total_tokens > budget) {
    std::optional<CellCoord> longest;
    std::size_t longest_len = 0;
    for (const auto& [coord, sentences] : expanded.appended) {
      if (expanded.appended_length(coord) == 0) continue;
      const std::size_t len = expanded.cell_length(coord);
      if (!longest || len > longest_len) {
        longest = coord;
        longest_len = len;
      }
    }
    if (!longest) throw std::logic_error("budget accounting out of sync");
    auto& sentences = expanded.appended[*longest];
    while (sentences.back().empty()) sentences.pop_back();
    sentences.back().pop_back();
    if (sentences.back().empty()) sentences.pop_back();
    if (sentences.empty()) expanded.appended.erase(*longest);
    --expanded.total_tokens;
  }
  return expanded;
}

// ---------------------------------------------------------------------------
// Cell selection

std::optional<int> first_occurrence(const TokenSeq& haystack,
                                    const TokenSeq& needle) {
  if (needle.empty()) return std::nullopt;
  auto it = std::search(haystack.begin(), haystack.end(), needle.begin(),
                        needle.end());
  if (it == haystack.end()) return std::nullopt;
  return static_cast<int>(it - haystack.begin());
}

CandidateSet find_candidates(const Table& table, const TokenSeq& answer) {
  CandidateSet out;
  for (int r = 0; r < table.rows(); ++r) {
    for (int c = 0; c < table.cols(); ++c) {
      if (first_occurrence(table.at(r, c).tokens, answer)) out.cells.push_back({r, c});
    }
  }
  return out;
}

namespace {

Vector init_vector(int size, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> normal(0.0, stddev);
  Vector v(size);
  for (int i = 0; i < size; ++i) {
    double x;
    do {
      x = normal(rng);
    } while (std::abs(x) > 2.0 * stddev);
    v(i) = x;
  }
  return v;
}

TensorView view_of(std::string name, Vector& v) {
  return {std::move(name), v.rows(), 1, v.data()};
}

}  // namespace

CellHead CellHead::zeros(int hidden) {
  return {Vector::Zero(hidden), Vector::Zero(1)};
}

CellHead CellHead::init(int hidden, std::uint64_t seed, double stddev) {
  std::mt19937_64 rng(seed);
  return {init_vector(hidden, rng, stddev), Vector::Zero(1)};
}

std::vector<TensorView> CellHead::tensors() {
  return {view_of("cell_head/w", w), view_of("cell_head/b", b)};
}

int CellScores::index_of(CellCoord c) const {
  auto it = std::find(cells.begin(), cells.end(), c);
  return it == cells.end() ? -1 : static_cast<int>(it - cells.begin());
}

std::vector<CellCoord> CellScores::ranked() const {
  std::vector<double> p(probs.data(), probs.data() + probs.size());
  std::vector<CellCoord> out;
  for (int i : rank_by(p)) out.push_back(cells[i]);
  return out;
}

Vector softmax(const Vector& logits) {
  const double max = logits.maxCoeff();
  Vector e = (logits.array() - max).exp();
  return e / e.sum();
}

CellScores cell_scores(const Matrix& contextual, const TokenizedExample& ex,
                       const CellHead& head) {
  CellScores out;
  std::vector<double> logits;
  for (const auto& [coord, span] : ex.cell_spans) {
    if (span.empty()) continue;
    double sum = 0.0;
    for (int t = span.begin; t < span.end; ++t) {
      sum += head.w.dot(contextual.col(t)) + head.b(0);
    }
    out.cells.push_back(coord);
    out.spans.push_back(span);
    logits.push_back(sum / span.size());
  }
  if (out.cells.empty()) throw std::invalid_argument("example has no non-empty cell");
  out.logits = Eigen::Map<Vector>(logits.data(), static_cast<Eigen::Index>(logits.size()));
  out.probs = softmax(out.logits);
  return out;
}

namespace {

void check_candidates(const Vector& probs, std::span<const int> candidates) {
  if (candidates.empty()) throw std::invalid_argument("empty candidate set");
  for (int z : candidates) {
    if (z < 0 || z >= probs.size()) throw std::invalid_argument("candidate out of range");
  }
}

}  // namespace

double mml_loss(const Vector& probs, std::span<const int> candidates) {
  check_candidates(probs, candidates);
  double mass = 0.0;
  for (int z : candidates) mass += probs(z);
  if (!(mass > 0.0)) throw std::domain_error("candidates carry no probability mass");
  double loss = 0.0;
  for (int z : candidates) {
    const double q = probs(z) / mass;
    if (q > 0.0) loss -= q * std::log(probs(z));
  }
  return loss;
}

Vector mml_logit_grad(const Vector& probs, std::span<const int> candidates) {
  check_candidates(probs, candidates);
  double mass = 0.0;
  for (int z : candidates) mass += probs(z);
  if (!(mass > 0.0)) throw std::domain_error("candidates carry no probability mass");
  Vector grad = probs;
  for (int z : candidates) grad(z) -= probs(z) / mass;
  return grad;
}

double cross_entropy(const Vector& probs, int gold) {
  if (gold < 0 || gold >= probs.size()) throw std::invalid_argument("gold out of range");
  return -std::log(probs(gold));
}

CellSelectionResult cell_selection_step(
    const TokenizedExample& ex, const Params& params, const CellHead& head,
    const EncoderConfig& cfg, const CandidateSet& candidates,
    AttentionMode mode, Params* d_params, CellHead* d_head) {
  ForwardOptions options;
  options.mode = mode;
  options.keep_cache = d_params != nullptr;
  const EncoderOutput forward = encoder_forward(ex, params, cfg, options);

  CellSelectionResult result;
  result.scores = cell_scores(forward.hidden, ex, head);
  std::vector<int> idx;
  for (const auto& c : candidates.cells) {
    if (int i = result.scores.index_of(c); i >= 0) idx.push_back(i);
  }
  result.loss = mml_loss(result.scores.probs, idx);

  if (d_params || d_head) {
    const Vector d_logits = mml_logit_grad(result.scores.probs, idx);
    Matrix d_hidden = Matrix::Zero(forward.hidden.rows(), forward.hidden.cols());
    CellHead grad = CellHead::zeros(static_cast<int>(head.w.size()));
    for (std::size_t c = 0; c < result.scores.cells.size(); ++c) {
      const TokenSpan span = result.scores.spans[c];
      const double g = d_logits(static_cast<Eigen::Index>(c)) / span.size();
      for (int t = span.begin; t < span.end; ++t) {
        d_hidden.col(t) += g * head.w;
        grad.w += g * forward.hidden.col(t);
        grad.b(0) += g;
      }
    }
    if (d_head) *d_head = std::move(grad);
    if (d_params) *d_params = backward(d_hidden, forward, ex, params, cfg);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Span reading

SpanHead SpanHead::zeros(int hidden) {
  return {Vector::Zero(hidden), Vector::Zero(hidden), Vector::Zero(1)};
}

SpanHead SpanHead::init(int hidden, std::uint64_t seed, double stddev) {
  std::mt19937_64 rng(seed);
  SpanHead h;
  h.w_start = init_vector(hidden, rng, stddev);
  h.w_end = init_vector(hidden, rng, stddev);
  h.b = Vector::Zero(1);
  return h;
}

std::vector<TensorView> SpanHead::tensors() {
  return {view_of("span_head/w_start", w_start), view_of("span_head/w_end", w_end),
          view_of("span_head/b", b)};
}

TokenizedExample reader_input(const TokenSeq& query, const TokenSeq& cell_text,
                              const EncoderConfig& cfg, int max_len) {
  const std::size_t room = table_budget(query, max_len);
  if (query.size() + 2 > static_cast<std::size_t>(max_len)) {
    throw std::length_error("query does not fit the reader input");
  }
  Table cell(1, 1);
  const auto keep = std::min(room, cell_text.size());
  cell.at(0, 0).tokens.assign(cell_text.begin(),
                              cell_text.begin() + static_cast<long>(keep));
  EncoderConfig reader_cfg = cfg;
  reader_cfg.max_len = max_len;
  return flatten(query, cell, reader_cfg);
}

std::vector<SpanScore> span_scores(const Matrix& contextual,
                                   const TokenizedExample& ex,
                                   const SpanHead& head, int max_span_len) {
  auto it = ex.cell_spans.find({0, 0});
  if (it == ex.cell_spans.end() || ex.cell_spans.size() != 1) {
    throw std::invalid_argument("reader input must hold exactly one cell");
  }
  const TokenSpan cell = it->second;
  std::vector<SpanScore> out;
  for (int s = cell.begin; s < cell.end; ++s) {
    const double start = head.w_start.dot(contextual.col(s));
    for (int e = s; e < std::min(cell.end, s + max_span_len); ++e) {
      out.push_back({s, e, start + head.w_end.dot(contextual.col(e)) + head.b(0)});
    }
  }
  if (out.empty()) throw std::invalid_argument("no valid span in reader input");
  return out;
}

std::optional<int> gold_span_index(const std::vector<SpanScore>& spans,
                                   const TokenizedExample& ex,
                                   const TokenSeq& answer) {
  const TokenSpan cell = ex.cell_spans.at({0, 0});
  const TokenSeq text(ex.token_ids.begin() + cell.begin,
                      ex.token_ids.begin() + cell.end);
  const auto offset = first_occurrence(text, answer);
  if (!offset) return std::nullopt;
  const int start = cell.begin + *offset;
  const int end = start + static_cast<int>(answer.size()) - 1;
  for (std::size_t i = 0; i < spans.size(); ++i) {
    if (spans[i].start == start && spans[i].end == end) return static_cast<int>(i);
  }
  return std::nullopt;
}

double span_loss(const Matrix& contextual, const std::vector<SpanScore>& spans,
                 int gold, const SpanHead& head, Matrix* d_contextual,
                 SpanHead* d_head) {
  if (gold < 0 || gold >= static_cast<int>(spans.size())) {
    throw std::invalid_argument("gold span out of range");
  }
  Vector logits(static_cast<Eigen::Index>(spans.size()));
  for (std::size_t i = 0; i < spans.size(); ++i) logits(static_cast<Eigen::Index>(i)) = spans[i].score;
  const Vector p = softmax(logits);
  const double loss = -std::log(p(gold));

  if (d_contextual || d_head) {
    for (std::size_t i = 0; i < spans.size(); ++i) {
      const double g = p(static_cast<Eigen::Index>(i)) - (static_cast<int>(i) == gold ? 1.0 : 0.0);
      const auto& s = spans[i];
      if (d_contextual) {
        d_contextual->col(s.start) += g * head.w_start;
        d_contextual->col(s.end) += g * head.w_end;
      }
      if (d_head) {
        d_head->w_start += g * contextual.col(s.start);
        d_head->w_end += g * contextual.col(s.end);
        d_head->b(0) += g;
      }
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Metrics

int hits_at_k(const std::vector<CellCoord>& ranked, const CandidateSet& gold,
              int k) {
  if (k < 1) throw std::invalid_argument("k must be at least 1");
  const auto limit = std::min<std::size_t>(static_cast<std::size_t>(k), ranked.size());
  for (std::size_t i = 0; i < limit; ++i) {
    if (std::find(gold.cells.begin(), gold.cells.end(), ranked[i]) != gold.cells.end()) {
      return 1;
    }
  }
  return 0;
}

std::string normalize_answer(const std::string& s) {
  std::string out;
  bool pending_space = false;
  for (unsigned char ch : s) {
    if (std::ispunct(ch)) continue;
    if (std::isspace(ch)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(ch)));
  }
  return out;
}

namespace {

std::vector<std::string> split_words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  return words;
}

}  // namespace

EmF1 em_f1(const std::string& prediction, const std::string& gold) {
  const std::string p = normalize_answer(prediction);
  const std::string g = normalize_answer(gold);
  EmF1 out;
  out.em = p == g ? 1.0 : 0.0;
  const auto pw = split_words(p);
  const auto gw = split_words(g);
  if (pw.empty() || gw.empty()) {
    out.f1 = out.em;
    return out;
  }
  std::unordered_map<std::string, int> counts;
  for (const auto& w : gw) ++counts[w];
  int common = 0;
  for (const auto& w : pw) {
    if (auto it = counts.find(w); it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return out;
  const double precision = static_cast<double>(common) / pw.size();
  const double recall = static_cast<double>(common) / gw.size();
  out.f1 = 2.0 * precision * recall / (precision + recall);
  return out;
}

// ---------------------------------------------------------------------------
// Records

QaRecord qa_record_from_json(const nlohmann::json& j) {
  QaRecord r;
  r.id = j.value("id", "");
  r.example = table_example_from_json(j.at("table"));
  if (j.contains("query")) {
    r.example.query = j["query"].get<TokenSeq>();
  }
  if (j.contains("answer")) r.answer = j["answer"].get<TokenSeq>();
  r.answer_text = j.value("answer_text", "");
  if (j.contains("candidates")) {
    for (const auto& c : j["candidates"]) {
      r.candidates.cells.push_back({c.at(0).get<int>(), c.at(1).get<int>()});
    }
  } else if (!r.answer.empty()) {
    r.candidates = find_candidates(r.example.table, r.answer);
  }
  return r;
}

std::vector<QaRecord> read_qa_records(std::istream& in) {
  std::vector<QaRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(qa_record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<QaRecord> drop_ambiguous(std::vector<QaRecord> records) {
  std::erase_if(records, [](const QaRecord& r) { return r.candidates.cells.size() > 1; });
  return records;
}

nlohmann::json to_json(const Prediction& p) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : p.ranked_cells) cells.push_back({c.row, c.col});
  return {{"id", p.id},
          {"ranked_cells", std::move(cells)},
          {"scores", p.scores},
          {"best_span",
           {{"cell", {p.span_cell.row, p.span_cell.col}},
            {"start", p.span_start},
            {"end", p.span_end},
            {"tokens", p.span_tokens}}}};
}

void write_predictions(std::ostream& out, const std::vector<Prediction>& preds) {
  for (const auto& p : preds) out << to_json(p).dump() << '\n';
}

Prediction predict(const QaRecord& record, const Params& selector,
                   const CellHead& cell_head, const Params& reader,
                   const SpanHead& span_head, const EncoderConfig& cfg,
                   const PointrOptions& options) {
  const auto& query = record.example.query;
  const ExpandedTable expanded =
      expand(record.example.table, query, options.top_k_sentences,
             table_budget(query, cfg.max_len), options.scope);
  const TokenizedExample ex = flatten(query, expanded.to_table(), cfg);

  Matrix hidden;
  if (options.use_sparse) {
    const TokenizedExample padded = pad_to(ex, std::max(ex.size(), cfg.global_size));
    hidden = encoder_forward(padded, selector, cfg, sparse_attention(padded, cfg)).hidden;
  } else {
    hidden = encoder_forward(ex, selector, cfg).hidden;
  }
  const CellScores scores = cell_scores(hidden, ex, cell_head);

  Prediction pred;
  pred.id = record.id;
  pred.ranked_cells = scores.ranked();
  for (const auto& c : pred.ranked_cells) pred.scores.push_back(scores.probs(scores.index_of(c)));

  // The reader sees the chosen cell with every linked sentence.
  pred.span_cell = pred.ranked_cells.front();
  const Cell& cell = record.example.table.at(pred.span_cell);
  TokenSeq text = cell.tokens;
  for (const auto& s : cell.linked_sentences) text.insert(text.end(), s.begin(), s.end());
  if (text.empty()) return pred;

  const TokenizedExample rex = reader_input(query, text, cfg, options.reader_max_len);
  ForwardOptions full;
  full.mode = AttentionMode::full;
  const Matrix reader_hidden = encoder_forward(rex, reader, cfg, full).hidden;
  const auto spans = span_scores(reader_hidden, rex, span_head, options.max_span_len);
  const auto best = std::max_element(spans.begin(), spans.end(),
                                     [](const SpanScore& a, const SpanScore& b) {
                                       return a.score < b.score;
                                     });
  const int cell_begin = rex.cell_spans.at({0, 0}).begin;
  pred.span_start = best->start - cell_begin;
  pred.span_end = best->end - cell_begin;
  pred.span_tokens.assign(rex.token_ids.begin() + best->start,
                          rex.token_ids.begin() + best->end + 1);
  return pred;
}

}  // namespace mate
