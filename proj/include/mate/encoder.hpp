#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mate/counters.hpp"
#include "mate/pattern.hpp"
#include "mate/table.hpp"

namespace mate {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Activations are d x n: one column per token.

/// Embedding tables, each hidden x vocab.
struct EmbeddingParams {
  Matrix token;
  Matrix position;
  Matrix row;
  Matrix col;
  Matrix rank;
};

/// One post-norm encoder block. Head i owns rows [i*m, (i+1)*m) of the
/// query/key/value projections.
struct LayerParams {
  Matrix wq, wk, wv;
  Matrix wo;
  Vector bo;
  Vector ln1_gamma, ln1_beta;
  Matrix w1;  // ffn x hidden
  Vector b1;
  Matrix w2;  // hidden x ffn
  Vector b2;
  Vector ln2_gamma, ln2_beta;
};

struct Params {
  EmbeddingParams embedding;
  std::vector<LayerParams> layers;

  /// All-zero parameters with the shapes implied by cfg.
  static Params zeros(const EncoderConfig& cfg);
  /// Truncated normal (2 sigma) weights, unit layer-norm scales, zero biases.
  static Params init(const EncoderConfig& cfg, std::uint64_t seed,
                     double stddev = 0.02);
};

/// Named, shaped window onto one parameter tensor.
struct TensorView {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  double* data = nullptr;

  Eigen::Index size() const { return rows * cols; }
  Eigen::Map<Vector> flat() const { return {data, size()}; }
};

/// Every tensor of `p` in a fixed order; names are stable across runs.
std::vector<TensorView> tensors(Params& p);

Vector flatten(const Params& p);
void unflatten(const Vector& flat, Params& p);

struct LayerNormCache {
  Matrix normalized;
  Vector inv_std;
};

struct LayerCache {
  Matrix input;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, n x n, column k sums to 1
  Matrix heads;
  Matrix z1;
  LayerNormCache ln1;
  Matrix y1;
  Matrix ffn_pre;
  Matrix ffn_act;
  LayerNormCache ln2;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
};

struct EncoderOutput {
  Matrix hidden;
  /// [layer][head] attention probabilities, filled when retained.
  std::vector<std::vector<Matrix>> attention;
  std::optional<ForwardCache> cache;
};

struct ForwardOptions {
  AttentionMode mode = AttentionMode::mate;
  bool keep_cache = false;
  bool retain_attention = false;
  AttentionCounters* counters = nullptr;
};

/// Computes one head's attention output (m x n) from its projected
/// queries, keys and values. `probs`, when non-null, receives the n x n
/// column-stochastic attention matrix.
using HeadAttention = std::function<Matrix(int head, const Matrix& q,
                                           const Matrix& k, const Matrix& v,
                                           Matrix* probs)>;

inline constexpr double kLayerNormEps = 1e-12;

double gelu(double x);
double gelu_derivative(double x);

/// Sum of token, position, row, column and rank embeddings per position.
/// Throws std::out_of_range when an index exceeds its table.
Matrix embed(const TokenizedExample& ex, const Params& params);

/// Masked scaled dot-product attention. Scores are divided by sqrt(m) and
/// the softmax for query k runs over {j : mask(k, j)} only, so disallowed
/// keys never influence column k. Rows with no allowed key yield zeros.
Matrix masked_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                        const Mask& mask, Matrix* probs = nullptr,
                        AttentionCounters* counters = nullptr);

Matrix head_forward(const Matrix& x, int head, const AttentionPattern& pattern,
                    const LayerParams& layer, const EncoderConfig& cfg,
                    Matrix* probs = nullptr);

Matrix layer_forward(const Matrix& x, const LayerParams& layer,
                     const EncoderConfig& cfg, const HeadAttention& attend,
                     LayerCache* cache = nullptr,
                     std::vector<Matrix>* retained = nullptr);

/// Convenience overload with one dense pattern per head.
Matrix layer_forward(const Matrix& x, std::span<const AttentionPattern> patterns,
                     const LayerParams& layer, const EncoderConfig& cfg,
                     LayerCache* cache = nullptr);

/// Dense attention backend for the patterns of `ex` under `mode`.
HeadAttention dense_attention(const TokenizedExample& ex,
                              const EncoderConfig& cfg, AttentionMode mode,
                              AttentionCounters* counters = nullptr);

EncoderOutput encoder_forward(const TokenizedExample& ex, const Params& params,
                              const EncoderConfig& cfg,
                              const ForwardOptions& options = {});

/// Same stack with a caller-supplied attention backend.
EncoderOutput encoder_forward(const TokenizedExample& ex, const Params& params,
                              const EncoderConfig& cfg,
                              const HeadAttention& attend,
                              const ForwardOptions& options = {});

/// Gradient of a scalar loss with respect to every parameter, given the
/// loss gradient on the final hidden states. Requires a forward pass run
/// with keep_cache; throws std::logic_error otherwise.
Params backward(const Matrix& d_hidden, const EncoderOutput& forward,
                const TokenizedExample& ex, const Params& params,
                const EncoderConfig& cfg);

/// Gradient of masked_attention with respect to q, k and v.
struct AttentionGrad {
  Matrix dq, dk, dv;
};
AttentionGrad masked_attention_backward(const Matrix& d_out, const Matrix& q,
                                        const Matrix& k, const Matrix& v,
                                        const Matrix& probs);

struct GradCheckReport {
  double max_rel_error = 0.0;
  Eigen::Index worst_coord = -1;
  std::size_t checked = 0;
};

/// Central finite differences of f at `point` against `analytic`, over
/// `coords` (all coordinates when empty). The per-coordinate error is
/// |a - fd| / max(|a|, |fd|, 1e-8). Throws std::invalid_argument for
/// eps <= 0.
GradCheckReport grad_check(const std::function<double(const Vector&)>& f,
                           const Vector& point, const Vector& analytic,
                           double eps, std::span<const Eigen::Index> coords = {});

/// Adam over a list of parameter tensors and matching gradients.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<TensorView>& params,
            const std::vector<TensorView>& grads);

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Vector> m_, v_;
};

}  // namespace mate
