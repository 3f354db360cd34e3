#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mate/counters.hpp"
#include "mate/encoder.hpp"
#include "mate/pattern.hpp"
#include "mate/table.hpp"

namespace mate {

/// Per-head arrangement of one example for bucketed attention: the head's
/// traversal order, a global prefix of `global_size` positions, and the
/// remainder cut into buckets of `radius` positions (the last one padded).
///
/// Structural metadata is indexed by *reordered* position and extends over
/// the bucket padding, whose row/column carry a sentinel and which is
/// always flagged as padding.
class SparseLayout {
 public:
  SparseLayout(const TokenizedExample& ex, PatternKind kind, int global_size,
               int radius);

  PatternKind kind() const { return kind_; }
  int size() const { return n_; }
  int global_size() const { return global_; }
  int radius() const { return radius_; }
  int num_buckets() const { return buckets_; }
  int long_length() const { return n_ - global_; }
  int window_width() const { return 3 * radius_; }

  const Permutation& order() const { return order_; }
  const Permutation& inverse() const { return inverse_; }

  /// Bucket of a reordered position, or -1 inside the global prefix.
  int bucket_of(int p) const { return p < global_ ? -1 : (p - global_) / radius_; }

  /// Reordered position of slot w (0 <= w < 3R) of bucket b's window, or -1
  /// when the slot lies in a bucket before the first or after the last.
  int window_position(int b, int w) const;

  /// Whether reordered position `from` may attend to reordered `to` under
  /// this head's structural rule. Padding never participates.
  bool visible(int from, int to) const {
    if (pad_[from] || pad_[to]) return false;
    if (query_[from] || query_[to] || from == to) return true;
    switch (kind_) {
      case PatternKind::row: return row_[from] == row_[to];
      case PatternKind::column: return col_[from] == col_[to];
      case PatternKind::sat:
        return row_[from] == row_[to] || col_[from] == col_[to];
      case PatternKind::full: return true;
    }
    return false;
  }

  /// Precomputed (bucket, slot in bucket, window slot) mask.
  bool window_allowed(int b, int t, int w) const {
    return window_mask_[(static_cast<std::size_t>(b) * radius_ + t) *
                            (3 * radius_) + w] != 0;
  }

  bool is_padding(int p) const { return pad_[p] != 0; }

 private:
  PatternKind kind_;
  int n_;
  int global_;
  int radius_;
  int buckets_;
  Permutation order_;
  Permutation inverse_;
  std::vector<int> row_;
  std::vector<int> col_;
  std::vector<std::uint8_t> query_;
  std::vector<std::uint8_t> pad_;
  std::vector<std::uint8_t> window_mask_;
};

/// Views of one head's activations under a layout. Columns are tokens.
///   full:      m x n, reordered
///   global:    m x G
///   long_part: m x (B*R), bucket b at columns [b*R, (b+1)*R), zero padded
///   window:    m x (B*3R), bucket b at columns [3bR, 3(b+1)R) holding
///              buckets b-1, b, b+1; missing neighbours are zero
struct MultiViewEmbedding {
  Matrix full;
  Matrix global;
  Matrix long_part;
  Matrix window;
  int radius = 0;

  auto long_bucket(int b) const { return long_part.middleCols(b * radius, radius); }
  auto window_bucket(int b) const {
    return window.middleCols(3 * b * radius, 3 * radius);
  }
};

/// Throws std::invalid_argument when the layout is shorter than its
/// global part or does not match x_head.
MultiViewEmbedding build_views(const Matrix& x_head, const SparseLayout& layout);

/// Bucketed attention for one head. Global positions attend to the whole
/// sequence; bucketed positions attend to the global part and their 3R
/// window through one softmax. Returns m x n in original token order.
/// `probs`, if given, receives the equivalent dense n x n matrix.
Matrix sparse_head_forward(const MultiViewEmbedding& q,
                           const MultiViewEmbedding& k,
                           const MultiViewEmbedding& v,
                           const SparseLayout& layout,
                           Matrix* probs = nullptr,
                           AttentionCounters* counters = nullptr);

/// Score dot products of the bucketed kernel on n positions:
/// G*n + (n - G)*(G + 3R). Throws std::invalid_argument when n < G.
std::uint64_t op_count(std::int64_t n, std::int64_t global_size,
                       std::int64_t radius);

/// Attention backend running every MATE head through the bucketed kernel
/// with cfg.global_size and cfg.radius.
HeadAttention sparse_attention(const TokenizedExample& ex,
                               const EncoderConfig& cfg,
                               AttentionCounters* counters = nullptr);

struct EquivalenceReport {
  int query_size = 0;
  int max_row_span = 0;
  int max_col_span = 0;
  int padded_to = 0;
  bool global_covers_query = false;
  bool radius_covers_rows = false;
  bool radius_covers_cols = false;
  std::vector<double> layer_max_abs_diff;

  bool exact() const {
    return global_covers_query && radius_covers_rows && radius_covers_cols;
  }
  const char* mode() const { return exact() ? "exact" : "approximate"; }
  double max_abs_diff() const;
  /// Human-readable list of the exactness conditions that do not hold.
  std::string failed_conditions() const;
};

/// Runs the dense masked encoder and the bucketed encoder on the same
/// parameters and reports the largest per-layer output deviation over
/// real tokens. Examples shorter than the global part are padded first.
EquivalenceReport equivalence_report(const TokenizedExample& ex,
                                     const Params& params,
                                     const EncoderConfig& cfg);

}  // namespace mate
