#include "mate/sparse_attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace mate {

namespace {

constexpr int kSentinel = std::numeric_limits<int>::max();

std::size_t bytes_of(const Matrix& m) {
  return static_cast<std::size_t>(m.size()) * sizeof(double);
}

std::size_t bytes_of(const MultiViewEmbedding& v) {
  return bytes_of(v.full) + bytes_of(v.global) + bytes_of(v.long_part) +
         bytes_of(v.window);
}

}  // namespace

SparseLayout::SparseLayout(const TokenizedExample& ex, PatternKind kind,
                           int global_size, int radius)
    : kind_(kind), n_(ex.size()), global_(global_size), radius_(radius) {
  if (global_size < 1 || radius < 1) {
    throw std::invalid_argument("global size and radius must be positive");
  }
  if (n_ < global_) {
    throw std::invalid_argument("sequence of " + std::to_string(n_) +
                                " is shorter than the global part " +
                                std::to_string(global_));
  }
  buckets_ = (n_ - global_ + radius_ - 1) / radius_;
  order_ = kind == PatternKind::column ? col_major_order(ex) : row_major_order(ex);
  inverse_ = invert(order_);

  const int padded = global_ + buckets_ * radius_;
  row_.assign(padded, kSentinel);
  col_.assign(padded, kSentinel);
  query_.assign(padded, 0);
  pad_.assign(padded, 1);
  for (int p = 0; p < n_; ++p) {
    const int k = order_[p];
    row_[p] = ex.row_index[k];
    col_[p] = ex.col_index[k];
    query_[p] = ex.is_query[k] ? 1 : 0;
    pad_[p] = ex.is_padding[k] ? 1 : 0;
  }

  // Window targets are never in the global prefix, so query tokens seen
  // through the global part cannot be counted twice.
  const int width = window_width();
  window_mask_.assign(static_cast<std::size_t>(buckets_) * radius_ * width, 0);
  for (int b = 0; b < buckets_; ++b) {
    for (int t = 0; t < radius_; ++t) {
      const int from = global_ + b * radius_ + t;
      for (int w = 0; w < width; ++w) {
        const int to = window_position(b, w);
        if (to >= 0 && visible(from, to)) {
          window_mask_[(static_cast<std::size_t>(b) * radius_ + t) * width + w] = 1;
        }
      }
    }
  }
}

int SparseLayout::window_position(int b, int w) const {
  const int bucket = b - 1 + w / radius_;
  if (bucket < 0 || bucket >= buckets_) return -1;
  return global_ + bucket * radius_ + w % radius_;
}

MultiViewEmbedding build_views(const Matrix& x_head, const SparseLayout& layout) {
  const int n = layout.size();
  const int G = layout.global_size();
  const int R = layout.radius();
  const int B = layout.num_buckets();
  if (x_head.cols() != n) {
    throw std::invalid_argument("activations do not match the layout length");
  }
  if (n < G) throw std::invalid_argument("sequence shorter than global part");

  MultiViewEmbedding views;
  views.radius = R;
  views.full.resize(x_head.rows(), n);
  for (int p = 0; p < n; ++p) views.full.col(p) = x_head.col(layout.order()[p]);
  views.global = views.full.leftCols(G);

  views.long_part = Matrix::Zero(x_head.rows(), static_cast<Eigen::Index>(B) * R);
  views.long_part.leftCols(n - G) = views.full.rightCols(n - G);

  views.window = Matrix::Zero(x_head.rows(), static_cast<Eigen::Index>(B) * 3 * R);
  for (int b = 0; b < B; ++b) {
    for (int side = 0; side < 3; ++side) {
      const int src = b - 1 + side;
      if (src < 0 || src >= B) continue;  // no wrap-around
      views.window.middleCols((3 * b + side) * R, R) =
          views.long_part.middleCols(src * R, R);
    }
  }
  return views;
}

Matrix sparse_head_forward(const MultiViewEmbedding& q,
                           const MultiViewEmbedding& k,
                           const MultiViewEmbedding& v,
                           const SparseLayout& layout, Matrix* probs,
                           AttentionCounters* counters) {
  const int n = layout.size();
  const int G = layout.global_size();
  const int R = layout.radius();
  const int W = layout.window_width();
  const Eigen::Index m = q.full.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(m));
  const auto& order = layout.order();
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();

  ScratchLease view_lease(counters, bytes_of(q) + bytes_of(k) + bytes_of(v));
  if (probs) *probs = Matrix::Zero(n, n);
  Matrix out_reordered = Matrix::Zero(m, n);

  {
    ScratchLease lease(counters, static_cast<std::size_t>(n) * G * sizeof(double));
    Matrix s = (k.full.transpose() * q.global) * scale;  // n x G
    for (int g = 0; g < G; ++g) {
      double max_score = kNegInf;
      for (int j = 0; j < n; ++j) {
        if (layout.visible(g, j)) max_score = std::max(max_score, s(j, g));
      }
      if (max_score == kNegInf) {
        s.col(g).setZero();
        continue;
      }
      double sum = 0.0;
      for (int j = 0; j < n; ++j) {
        if (layout.visible(g, j)) {
          s(j, g) = std::exp(s(j, g) - max_score);
          sum += s(j, g);
        } else {
          s(j, g) = 0.0;
        }
      }
      s.col(g) /= sum;
    }
    out_reordered.leftCols(G) = v.full * s;
    if (counters) counters->score_ops += static_cast<std::uint64_t>(G) * n;
    if (probs) {
      for (int g = 0; g < G; ++g) {
        for (int j = 0; j < n; ++j) (*probs)(order[j], order[g]) = s(j, g);
      }
    }
  }

  ScratchLease bucket_lease(
      counters, static_cast<std::size_t>(G + W) * R * sizeof(double));
  for (int b = 0; b < layout.num_buckets(); ++b) {
    const int first = G + b * R;
    const int rows = std::min(R, n - first);
    const auto q_bucket = q.long_bucket(b).leftCols(rows);
    Matrix to_global = (k.global.transpose() * q_bucket) * scale;          // G x rows
    Matrix to_window = (k.window_bucket(b).transpose() * q_bucket) * scale;  // 3R x rows

    for (int t = 0; t < rows; ++t) {
      const int from = first + t;
      double max_score = kNegInf;
      for (int g = 0; g < G; ++g) {
        if (layout.visible(from, g)) max_score = std::max(max_score, to_global(g, t));
      }
      for (int w = 0; w < W; ++w) {
        if (layout.window_allowed(b, t, w)) {
          max_score = std::max(max_score, to_window(w, t));
        }
      }
      if (max_score == kNegInf) {
        to_global.col(t).setZero();
        to_window.col(t).setZero();
        continue;
      }
      double sum = 0.0;
      for (int g = 0; g < G; ++g) {
        if (layout.visible(from, g)) {
          to_global(g, t) = std::exp(to_global(g, t) - max_score);
          sum += to_global(g, t);
        } else {
          to_global(g, t) = 0.0;
        }
      }
      for (int w = 0; w < W; ++w) {
        if (layout.window_allowed(b, t, w)) {
          to_window(w, t) = std::exp(to_window(w, t) - max_score);
          sum += to_window(w, t);
        } else {
          to_window(w, t) = 0.0;
        }
      }
      to_global.col(t) /= sum;
      to_window.col(t) /= sum;
    }

    out_reordered.middleCols(first, rows) =
        v.global * to_global + v.window_bucket(b) * to_window;
    if (counters) {
      counters->score_ops += static_cast<std::uint64_t>(rows) * (G + W);
    }
    if (probs) {
      for (int t = 0; t < rows; ++t) {
        const int from = order[first + t];
        for (int g = 0; g < G; ++g) (*probs)(order[g], from) = to_global(g, t);
        for (int w = 0; w < W; ++w) {
          const int to = layout.window_position(b, w);
          if (to >= 0 && to < n) (*probs)(order[to], from) = to_window(w, t);
        }
      }
    }
  }

  Matrix out(m, n);
  for (int p = 0; p < n; ++p) out.col(order[p]) = out_reordered.col(p);
  return out;
}

std::uint64_t op_count(std::int64_t n, std::int64_t global_size,
                       std::int64_t radius) {
  if (n < global_size) {
    throw std::invalid_argument("op_count needs n >= global size");
  }
  return static_cast<std::uint64_t>(global_size * n +
                                    (n - global_size) * (global_size + 3 * radius));
}

HeadAttention sparse_attention(const TokenizedExample& ex,
                               const EncoderConfig& cfg,
                               AttentionCounters* counters) {
  std::shared_ptr<const SparseLayout> row_layout;
  std::shared_ptr<const SparseLayout> col_layout;
  if (cfg.row_heads > 0) {
    row_layout = std::make_shared<const SparseLayout>(ex, PatternKind::row,
                                                      cfg.global_size, cfg.radius);
  }
  if (cfg.col_heads > 0) {
    col_layout = std::make_shared<const SparseLayout>(ex, PatternKind::column,
                                                      cfg.global_size, cfg.radius);
  }
  const int row_heads = cfg.row_heads;
  return [row_layout, col_layout, row_heads, counters](
             int h, const Matrix& q, const Matrix& k, const Matrix& v,
             Matrix* probs) {
    const SparseLayout& layout = h < row_heads ? *row_layout : *col_layout;
    return sparse_head_forward(build_views(q, layout), build_views(k, layout),
                               build_views(v, layout), layout, probs, counters);
  };
}

double EquivalenceReport::max_abs_diff() const {
  double best = 0.0;
  for (double d : layer_max_abs_diff) best = std::max(best, d);
  return best;
}

std::string EquivalenceReport::failed_conditions() const {
  std::string out;
  auto add = [&out](const std::string& s) {
    if (!out.empty()) out += "; ";
    out += s;
  };
  if (!global_covers_query) {
    add("global size below query length " + std::to_string(query_size));
  }
  if (!radius_covers_rows) {
    add("radius below row span " + std::to_string(max_row_span));
  }
  if (!radius_covers_cols) {
    add("radius below column span " + std::to_string(max_col_span));
  }
  return out;
}

EquivalenceReport equivalence_report(const TokenizedExample& ex,
                                     const Params& params,
                                     const EncoderConfig& cfg) {
  cfg.validate();
  EquivalenceReport report;
  report.query_size = ex.query_size();
  report.max_row_span = ex.max_row_span();
  report.max_col_span = ex.max_col_span();
  report.global_covers_query = cfg.global_size >= report.query_size;
  report.radius_covers_rows = cfg.row_heads == 0 || cfg.radius >= report.max_row_span;
  report.radius_covers_cols = cfg.col_heads == 0 || cfg.radius >= report.max_col_span;

  const TokenizedExample padded = pad_to(ex, std::max(ex.size(), cfg.global_size));
  report.padded_to = padded.size();

  const HeadAttention dense = dense_attention(padded, cfg, AttentionMode::mate);
  const HeadAttention sparse = sparse_attention(padded, cfg);
  Matrix x_dense = embed(padded, params);
  Matrix x_sparse = x_dense;
  const int real = ex.size();
  for (int l = 0; l < cfg.layers; ++l) {
    x_dense = layer_forward(x_dense, params.layers[l], cfg, dense);
    x_sparse = layer_forward(x_sparse, params.layers[l], cfg, sparse);
    report.layer_max_abs_diff.push_back(
        (x_dense.leftCols(real) - x_sparse.leftCols(real)).cwiseAbs().maxCoeff());
  }
  return report;
}

}  // namespace mate
