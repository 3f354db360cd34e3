#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mate/table.hpp"

namespace mate {

enum class PatternKind { row, column, sat, full };

/// Which family of patterns an encoder applies to its heads.
enum class AttentionMode { mate, full, sat };

const char* to_string(PatternKind kind);
const char* to_string(AttentionMode mode);

/// Row-major n x n boolean matrix; mask(k, j) means position k may attend
/// to position j.
class Mask {
 public:
  explicit Mask(int n) : n_(n), bits_(static_cast<std::size_t>(n) * n, 0) {}

  int size() const { return n_; }
  bool operator()(int k, int j) const { return bits_[index(k, j)] != 0; }
  void set(int k, int j, bool v) { bits_[index(k, j)] = v ? 1 : 0; }
  const std::uint8_t* row(int k) const { return bits_.data() + index(k, 0); }

  bool operator==(const Mask&) const = default;

 private:
  std::size_t index(int k, int j) const {
    return static_cast<std::size_t>(k) * n_ + j;
  }
  int n_;
  std::vector<std::uint8_t> bits_;
};

/// The attention relation of one head over one example, held as a
/// predicate on the example's structural indices. Never materialised
/// unless to_mask() is called.
class AttentionPattern {
 public:
  AttentionPattern(const TokenizedExample& ex, PatternKind kind);

  int size() const { return static_cast<int>(row_.size()); }
  PatternKind kind() const { return kind_; }

  bool allowed(int k, int j) const {
    if (pad_[k] || pad_[j]) return false;
    if (query_[k] || query_[j] || k == j) return true;
    switch (kind_) {
      case PatternKind::row:
        return row_[k] == row_[j];
      case PatternKind::column:
        return col_[k] == col_[j];
      case PatternKind::sat:
        return row_[k] == row_[j] || col_[k] == col_[j];
      case PatternKind::full:
        return true;
    }
    return false;
  }

  /// Sorted positions that k may attend to.
  std::vector<int> allowed_set(int k) const;

 private:
  PatternKind kind_;
  std::vector<int> row_;
  std::vector<int> col_;
  std::vector<bool> query_;
  std::vector<bool> pad_;
};

/// Heads [0, row_heads) are row heads, the rest column heads.
/// Throws std::out_of_range for a bad head index.
PatternKind head_kind(int head, const EncoderConfig& cfg);

AttentionPattern head_pattern(const TokenizedExample& ex, int head,
                              const EncoderConfig& cfg);

/// Pattern used by `head` under the given mode: MATE heads, full attention,
/// or the head-independent same-row-or-column mask.
AttentionPattern head_pattern(const TokenizedExample& ex, int head,
                              const EncoderConfig& cfg, AttentionMode mode);

AttentionPattern sat_pattern(const TokenizedExample& ex);
AttentionPattern full_pattern(const TokenizedExample& ex);

Mask to_mask(const AttentionPattern& p);

/// Plain PBM (P1) rendering: one text row per query position, 1 = allowed.
std::string to_pbm(const Mask& mask);

}  // namespace mate
