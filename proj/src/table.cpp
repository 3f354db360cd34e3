#include "mate/table.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>

namespace mate {

Table::Table(int rows, int cols, bool has_header)
    : rows_(rows), cols_(cols), has_header_(has_header) {
  if (rows < 1 || cols < 1) {
    throw std::invalid_argument("table needs at least one row and column");
  }
  cells_.resize(static_cast<std::size_t>(rows) * cols);
}

Table::Table(std::vector<std::vector<Cell>> grid, bool has_header)
    : has_header_(has_header) {
  if (grid.empty() || grid.front().empty()) {
    throw std::invalid_argument("table needs at least one row and column");
  }
  rows_ = static_cast<int>(grid.size());
  cols_ = static_cast<int>(grid.front().size());
  cells_.reserve(static_cast<std::size_t>(rows_) * cols_);
  for (auto& row : grid) {
    if (static_cast<int>(row.size()) != cols_) {
      throw std::invalid_argument("table rows must all have " +
                                  std::to_string(cols_) + " cells");
    }
    for (auto& cell : row) cells_.push_back(std::move(cell));
  }
}

const Cell& Table::at(int row, int col) const {
  if (row < 0 || row >= rows_ || col < 0 || col >= cols_) {
    throw std::out_of_range("cell coordinate out of range");
  }
  return cells_[static_cast<std::size_t>(row) * cols_ + col];
}

Cell& Table::at(int row, int col) {
  return const_cast<Cell&>(std::as_const(*this).at(row, col));
}

std::size_t Table::token_count() const {
  std::size_t total = 0;
  for (const auto& c : cells_) total += c.tokens.size();
  return total;
}

void EncoderConfig::validate() const {
  if (row_heads < 0 || col_heads < 0 || heads() < 1) {
    throw std::invalid_argument("need at least one attention head");
  }
  if (head_dim < 1 || hidden != heads() * head_dim) {
    throw std::invalid_argument("hidden must equal heads * head_dim");
  }
  if (layers < 0 || ffn_dim < 1) {
    throw std::invalid_argument("bad layer or ffn size");
  }
  if (global_size < 1 || radius < 1) {
    throw std::invalid_argument("global size and radius must be positive");
  }
  if (max_len < 2) throw std::invalid_argument("max_len too small");
  if (token_vocab < 3 || position_vocab < 1 || row_vocab < 1 ||
      col_vocab < 1 || rank_vocab < 1) {
    throw std::invalid_argument("embedding vocabularies too small");
  }
}

EncoderConfig EncoderConfig::with_max_len(int max_len) {
  EncoderConfig cfg;
  cfg.max_len = max_len;
  cfg.positional_reset = max_len > 512;
  cfg.position_vocab = cfg.positional_reset ? 512 : max_len;
  return cfg;
}

int TokenizedExample::query_size() const {
  return static_cast<int>(std::count(is_query.begin(), is_query.end(), true));
}

int TokenizedExample::real_size() const {
  return size() -
         static_cast<int>(std::count(is_padding.begin(), is_padding.end(), true));
}

namespace {

int max_group_span(const std::map<CellCoord, TokenSpan>& spans, bool by_row) {
  std::map<int, int> totals;
  for (const auto& [coord, span] : spans) {
    totals[by_row ? coord.row : coord.col] += span.size();
  }
  int best = 0;
  for (const auto& [_, t] : totals) best = std::max(best, t);
  return best;
}

}  // namespace

int TokenizedExample::max_row_span() const {
  return max_group_span(cell_spans, true);
}

int TokenizedExample::max_col_span() const {
  return max_group_span(cell_spans, false);
}

std::vector<std::vector<int>> column_ranks(const Table& table) {
  std::vector<std::vector<int>> ranks(table.rows(),
                                      std::vector<int>(table.cols(), 0));
  for (int c = 0; c < table.cols(); ++c) {
    std::vector<double> values;
    for (int r = 0; r < table.rows(); ++r) {
      if (auto v = table.at(r, c).numeric_value) values.push_back(*v);
    }
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    for (int r = 0; r < table.rows(); ++r) {
      if (auto v = table.at(r, c).numeric_value) {
        auto it = std::lower_bound(values.begin(), values.end(), *v);
        ranks[r][c] = static_cast<int>(it - values.begin()) + 1;
      }
    }
  }
  return ranks;
}

TokenizedExample flatten(const TokenSeq& query, const Table& table,
                         const EncoderConfig& cfg) {
  const std::size_t total = query.size() + 2 + table.token_count();
  if (total > static_cast<std::size_t>(cfg.max_len)) {
    throw std::length_error("flattened example has " + std::to_string(total) +
                            " tokens, max_len is " +
                            std::to_string(cfg.max_len));
  }

  TokenizedExample ex;
  ex.table_rows = table.rows();
  ex.table_cols = table.cols();
  ex.has_header = table.has_header();

  auto push = [&ex](TokenId id, int row, int col, int rank, int pos,
                    bool query_token) {
    ex.token_ids.push_back(id);
    ex.row_index.push_back(row);
    ex.col_index.push_back(col);
    ex.rank_index.push_back(rank);
    ex.position_index.push_back(pos);
    ex.is_query.push_back(query_token);
    ex.is_padding.push_back(false);
  };

  int pos = 0;
  push(SpecialTokens::kCls, 0, 0, 0, pos++, true);
  for (TokenId t : query) push(t, 0, 0, 0, pos++, true);
  push(SpecialTokens::kSep, 0, 0, 0, pos++, true);

  const auto ranks = column_ranks(table);
  for (int r = 0; r < table.rows(); ++r) {
    for (int c = 0; c < table.cols(); ++c) {
      const Cell& cell = table.at(r, c);
      TokenSpan span{ex.size(), ex.size()};
      int offset = 0;
      for (TokenId t : cell.tokens) {
        const int p = cfg.positional_reset ? offset : pos;
        push(t, r + 1, c + 1, ranks[r][c], p, false);
        ++offset;
        ++pos;
      }
      span.end = ex.size();
      ex.cell_spans.emplace(CellCoord{r, c}, span);
    }
  }
  return ex;
}

TokenizedExample pad_to(const TokenizedExample& ex, int n) {
  if (n < ex.size()) throw std::invalid_argument("cannot pad to a shorter length");
  TokenizedExample out = ex;
  for (int k = ex.size(); k < n; ++k) {
    out.token_ids.push_back(SpecialTokens::kPad);
    out.row_index.push_back(0);
    out.col_index.push_back(0);
    out.rank_index.push_back(0);
    out.position_index.push_back(0);
    out.is_query.push_back(false);
    out.is_padding.push_back(true);
  }
  return out;
}

namespace {

Permutation traversal(const TokenizedExample& ex, bool row_major) {
  Permutation order(ex.size());
  std::iota(order.begin(), order.end(), 0);
  auto group = [&ex](int k) {
    if (ex.is_query[k]) return 0;
    return ex.is_padding[k] ? 2 : 1;
  };
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const int ga = group(a);
    const int gb = group(b);
    if (ga != gb) return ga < gb;
    if (ga != 1) return false;
    const int pa = row_major ? ex.row_index[a] : ex.col_index[a];
    const int pb = row_major ? ex.row_index[b] : ex.col_index[b];
    if (pa != pb) return pa < pb;
    const int sa = row_major ? ex.col_index[a] : ex.row_index[a];
    const int sb = row_major ? ex.col_index[b] : ex.row_index[b];
    return sa < sb;
  });
  return order;
}

}  // namespace

Permutation row_major_order(const TokenizedExample& ex) {
  return traversal(ex, true);
}

Permutation col_major_order(const TokenizedExample& ex) {
  return traversal(ex, false);
}

Permutation invert(const Permutation& order) {
  Permutation inv(order.size(), -1);
  for (std::size_t p = 0; p < order.size(); ++p) {
    const int k = order[p];
    if (k < 0 || static_cast<std::size_t>(k) >= order.size() || inv[k] != -1) {
      throw std::invalid_argument("not a permutation");
    }
    inv[k] = static_cast<int>(p);
  }
  return inv;
}

}  // namespace mate
