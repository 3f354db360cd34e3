#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

namespace mate {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

/// Reserved ids. Tokenization happens upstream; callers map text to ids
/// and must keep these three values free.
struct SpecialTokens {
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kCls = 1;
  static constexpr TokenId kSep = 2;
};

/// 0-based grid coordinate of a cell. Row/column *indices* in a
/// TokenizedExample are these plus one, with 0 reserved for the query set.
struct CellCoord {
  int row = 0;
  int col = 0;

  auto operator<=>(const CellCoord&) const = default;
};

struct Cell {
  TokenSeq tokens;
  std::optional<double> numeric_value;
  std::vector<TokenSeq> linked_sentences;
};

/// Rectangular grid of cells. When `has_header` is set the first row holds
/// column headers; it is still flattened as ordinary table row 1.
class Table {
 public:
  Table(int rows, int cols, bool has_header = false);
  explicit Table(std::vector<std::vector<Cell>> grid, bool has_header = false);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  bool has_header() const { return has_header_; }

  const Cell& at(int row, int col) const;
  Cell& at(int row, int col);
  const Cell& at(CellCoord c) const { return at(c.row, c.col); }
  Cell& at(CellCoord c) { return at(c.row, c.col); }

  std::size_t token_count() const;

 private:
  int rows_;
  int cols_;
  bool has_header_;
  std::vector<Cell> cells_;
};

/// Head count, dimensions, and sparse layout parameters shared by the dense
/// and bucketed encoders. `hidden` must equal heads() * head_dim.
struct EncoderConfig {
  int row_heads = 2;
  int col_heads = 2;
  int hidden = 64;
  int head_dim = 16;
  int layers = 2;
  int ffn_dim = 128;
  int global_size = 116;
  int radius = 42;
  int max_len = 512;
  bool positional_reset = false;

  int token_vocab = 1000;
  int position_vocab = 512;
  int row_vocab = 64;
  int col_vocab = 64;
  int rank_vocab = 64;

  int heads() const { return row_heads + col_heads; }

  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;

  /// Reset is on for long inputs unless the caller overrides it afterwards.
  static EncoderConfig with_max_len(int max_len);
};

struct TokenSpan {
  int begin = 0;
  int end = 0;  // exclusive

  int size() const { return end - begin; }
  bool empty() const { return begin == end; }
};

/// The flattened `[CLS] query [SEP] cells...` sequence plus per-token
/// structural indices. Immutable after flatten()/pad_to().
struct TokenizedExample {
  TokenSeq token_ids;
  std::vector<int> row_index;
  std::vector<int> col_index;
  std::vector<int> rank_index;
  std::vector<int> position_index;
  std::vector<bool> is_query;
  std::vector<bool> is_padding;
  std::map<CellCoord, TokenSpan> cell_spans;
  int table_rows = 0;
  int table_cols = 0;
  bool has_header = false;

  int size() const { return static_cast<int>(token_ids.size()); }
  int query_size() const;
  int real_size() const;
  bool is_table(int k) const { return !is_query[k] && !is_padding[k]; }

  /// Longest run of tokens sharing one row (resp. column).
  int max_row_span() const;
  int max_col_span() const;
};

/// Lays out query and table. Empty queries are accepted and produce
/// `[CLS] [SEP]`. Throws std::length_error when the result exceeds
/// cfg.max_len.
TokenizedExample flatten(const TokenSeq& query, const Table& table,
                         const EncoderConfig& cfg);

/// Appends padding tokens up to length n (n >= ex.size()).
TokenizedExample pad_to(const TokenizedExample& ex, int n);

using Permutation = std::vector<int>;

/// order[p] is the original position placed at p. Query tokens first in
/// their original order, then table tokens by (row, col, offset), then
/// padding.
Permutation row_major_order(const TokenizedExample& ex);
/// As row_major_order with the table key (col, row, offset).
Permutation col_major_order(const TokenizedExample& ex);

Permutation invert(const Permutation& order);

/// Dense per-column rank of numeric cells, starting at 1; 0 for cells
/// without a numeric value.
std::vector<std::vector<int>> column_ranks(const Table& table);

}  // namespace mate
