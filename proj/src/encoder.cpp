#include "mate/encoder.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <random>
#include <stdexcept>

namespace mate {

namespace {

Matrix truncated_normal(Eigen::Index rows, Eigen::Index cols, double stddev,
                        std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double x;
    do {
      x = normal(rng);
    } while (std::abs(x) > 2.0 * stddev);
    m.data()[i] = x;
  }
  return m;
}

template <class P, class F>
void for_each_tensor(P& p, F&& f) {
  f("embedding/token", p.embedding.token);
  f("embedding/position", p.embedding.position);
  f("embedding/row", p.embedding.row);
  f("embedding/col", p.embedding.col);
  f("embedding/rank", p.embedding.rank);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& layer = p.layers[l];
    const std::string prefix = "layer" + std::to_string(l) + "/";
    f(prefix + "wq", layer.wq);
    f(prefix + "wk", layer.wk);
    f(prefix + "wv", layer.wv);
    f(prefix + "wo", layer.wo);
    f(prefix + "bo", layer.bo);
    f(prefix + "ln1_gamma", layer.ln1_gamma);
    f(prefix + "ln1_beta", layer.ln1_beta);
    f(prefix + "w1", layer.w1);
    f(prefix + "b1", layer.b1);
    f(prefix + "w2", layer.w2);
    f(prefix + "b2", layer.b2);
    f(prefix + "ln2_gamma", layer.ln2_gamma);
    f(prefix + "ln2_beta", layer.ln2_beta);
  }
}

void layer_norm(const Matrix& z, const Vector& gamma, const Vector& beta,
                Matrix& y, LayerNormCache& cache) {
  const Eigen::Index d = z.rows();
  cache.normalized.resize(d, z.cols());
  cache.inv_std.resize(z.cols());
  y.resize(d, z.cols());
  for (Eigen::Index k = 0; k < z.cols(); ++k) {
    const double mean = z.col(k).mean();
    const double var = (z.col(k).array() - mean).square().mean();
    const double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std(k) = inv_std;
    cache.normalized.col(k) = (z.col(k).array() - mean) * inv_std;
    y.col(k) = gamma.cwiseProduct(cache.normalized.col(k)) + beta;
  }
}

Matrix layer_norm_backward(const Matrix& dy, const Vector& gamma,
                           const LayerNormCache& cache, Vector& d_gamma,
                           Vector& d_beta) {
  d_gamma += dy.cwiseProduct(cache.normalized).rowwise().sum();
  d_beta += dy.rowwise().sum();
  Matrix dz(dy.rows(), dy.cols());
  for (Eigen::Index k = 0; k < dy.cols(); ++k) {
    const Vector dxhat = gamma.cwiseProduct(dy.col(k));
    const double mean_d = dxhat.mean();
    const double mean_dx = dxhat.dot(cache.normalized.col(k)) /
                           static_cast<double>(dy.rows());
    dz.col(k) = cache.inv_std(k) *
                (dxhat.array() - mean_d -
                 cache.normalized.col(k).array() * mean_dx)
                    .matrix();
  }
  return dz;
}

void check_index(int value, Eigen::Index vocab, const char* what) {
  if (value < 0 || value >= vocab) {
    throw std::out_of_range(std::string(what) + " index " +
                            std::to_string(value) + " outside vocabulary of " +
                            std::to_string(vocab));
  }
}

}  // namespace

Params Params::zeros(const EncoderConfig& cfg) {
  cfg.validate();
  const int d = cfg.hidden;
  Params p;
  p.embedding.token = Matrix::Zero(d, cfg.token_vocab);
  p.embedding.position = Matrix::Zero(d, cfg.position_vocab);
  p.embedding.row = Matrix::Zero(d, cfg.row_vocab);
  p.embedding.col = Matrix::Zero(d, cfg.col_vocab);
  p.embedding.rank = Matrix::Zero(d, cfg.rank_vocab);
  p.layers.resize(cfg.layers);
  for (auto& layer : p.layers) {
    layer.wq = Matrix::Zero(d, d);
    layer.wk = Matrix::Zero(d, d);
    layer.wv = Matrix::Zero(d, d);
    layer.wo = Matrix::Zero(d, d);
    layer.bo = Vector::Zero(d);
    layer.ln1_gamma = Vector::Zero(d);
    layer.ln1_beta = Vector::Zero(d);
    layer.w1 = Matrix::Zero(cfg.ffn_dim, d);
    layer.b1 = Vector::Zero(cfg.ffn_dim);
    layer.w2 = Matrix::Zero(d, cfg.ffn_dim);
    layer.b2 = Vector::Zero(d);
    layer.ln2_gamma = Vector::Zero(d);
    layer.ln2_beta = Vector::Zero(d);
  }
  return p;
}

Params Params::init(const EncoderConfig& cfg, std::uint64_t seed,
                    double stddev) {
  Params p = zeros(cfg);
  std::mt19937_64 rng(seed);
  auto fill = [&](Matrix& m) { m = truncated_normal(m.rows(), m.cols(), stddev, rng); };
  fill(p.embedding.token);
  fill(p.embedding.position);
  fill(p.embedding.row);
  fill(p.embedding.col);
  fill(p.embedding.rank);
  for (auto& layer : p.layers) {
    fill(layer.wq);
    fill(layer.wk);
    fill(layer.wv);
    fill(layer.wo);
    fill(layer.w1);
    fill(layer.w2);
    layer.ln1_gamma.setOnes();
    layer.ln2_gamma.setOnes();
  }
  return p;
}

std::vector<TensorView> tensors(Params& p) {
  std::vector<TensorView> out;
  for_each_tensor(p, [&out](std::string name, auto& t) {
    out.push_back({std::move(name), t.rows(), t.cols(), t.data()});
  });
  return out;
}

Vector flatten(const Params& p) {
  Eigen::Index total = 0;
  for_each_tensor(p, [&total](const std::string&, const auto& t) { total += t.size(); });
  Vector flat(total);
  Eigen::Index offset = 0;
  for_each_tensor(p, [&](const std::string&, const auto& t) {
    flat.segment(offset, t.size()) =
        Eigen::Map<const Vector>(t.data(), t.size());
    offset += t.size();
  });
  return flat;
}

void unflatten(const Vector& flat, Params& p) {
  Eigen::Index offset = 0;
  for (auto& view : tensors(p)) {
    if (offset + view.size() > flat.size()) {
      throw std::invalid_argument("flat parameter vector too short");
    }
    view.flat() = flat.segment(offset, view.size());
    offset += view.size();
  }
  if (offset != flat.size()) {
    throw std::invalid_argument("flat parameter vector too long");
  }
}

double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Matrix embed(const TokenizedExample& ex, const Params& params) {
  const auto& e = params.embedding;
  Matrix x(e.token.rows(), ex.size());
  for (int k = 0; k < ex.size(); ++k) {
    check_index(ex.token_ids[k], e.token.cols(), "token");
    check_index(ex.position_index[k], e.position.cols(), "position");
    check_index(ex.row_index[k], e.row.cols(), "row");
    check_index(ex.col_index[k], e.col.cols(), "column");
    check_index(ex.rank_index[k], e.rank.cols(), "rank");
    x.col(k) = e.token.col(ex.token_ids[k]) +
               e.position.col(ex.position_index[k]) +
               e.row.col(ex.row_index[k]) + e.col.col(ex.col_index[k]) +
               e.rank.col(ex.rank_index[k]);
  }
  return x;
}

Matrix masked_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                        const Mask& mask, Matrix* probs,
                        AttentionCounters* counters) {
  const Eigen::Index n = q.cols();
  if (k.cols() != n || v.cols() != n || mask.size() != n) {
    throw std::invalid_argument("attention inputs disagree on sequence length");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.rows()));
  ScratchLease lease(counters, static_cast<std::size_t>(n * n) * sizeof(double));

  Matrix p = (k.transpose() * q) * scale;  // p(j, i): key j, query i
  std::uint64_t real = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::uint8_t* allowed = mask.row(static_cast<int>(i));
    if (allowed[i]) ++real;
    double max_score = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (allowed[j]) max_score = std::max(max_score, p(j, i));
    }
    if (max_score == -std::numeric_limits<double>::infinity()) {
      p.col(i).setZero();
      continue;
    }
    double sum = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (allowed[j]) {
        p(j, i) = std::exp(p(j, i) - max_score);
        sum += p(j, i);
      } else {
        p(j, i) = 0.0;
      }
    }
    p.col(i) /= sum;
  }
  if (counters) counters->score_ops += real * real;

  Matrix out = v * p;
  if (probs) *probs = std::move(p);
  return out;
}

AttentionGrad masked_attention_backward(const Matrix& d_out, const Matrix& q,
                                        const Matrix& k, const Matrix& v,
                                        const Matrix& probs) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.rows()));
  AttentionGrad g;
  g.dv = d_out * probs.transpose();
  Matrix d_scores = v.transpose() * d_out;  // same layout as probs
  for (Eigen::Index i = 0; i < probs.cols(); ++i) {
    const double inner = probs.col(i).dot(d_scores.col(i));
    d_scores.col(i) =
        probs.col(i).cwiseProduct((d_scores.col(i).array() - inner).matrix());
  }
  d_scores *= scale;
  g.dq = k * d_scores;
  g.dk = q * d_scores.transpose();
  return g;
}

Matrix head_forward(const Matrix& x, int head, const AttentionPattern& pattern,
                    const LayerParams& layer, const EncoderConfig& cfg,
                    Matrix* probs) {
  head_kind(head, cfg);
  if (pattern.size() != x.cols()) {
    throw std::invalid_argument("pattern length does not match input");
  }
  const int m = cfg.head_dim;
  const Matrix q = layer.wq.middleRows(head * m, m) * x;
  const Matrix k = layer.wk.middleRows(head * m, m) * x;
  const Matrix v = layer.wv.middleRows(head * m, m) * x;
  return masked_attention(q, k, v, to_mask(pattern), probs);
}

Matrix layer_forward(const Matrix& x, const LayerParams& layer,
                     const EncoderConfig& cfg, const HeadAttention& attend,
                     LayerCache* cache, std::vector<Matrix>* retained) {
  if (x.rows() != cfg.hidden || layer.wq.cols() != cfg.hidden) {
    throw std::invalid_argument("layer input shape mismatch");
  }
  const int m = cfg.head_dim;
  Matrix q = layer.wq * x;
  Matrix k = layer.wk * x;
  Matrix v = layer.wv * x;

  Matrix heads(cfg.hidden, x.cols());
  std::vector<Matrix> probs(cfg.heads());
  const bool want_probs = cache != nullptr || retained != nullptr;
  for (int h = 0; h < cfg.heads(); ++h) {
    heads.middleRows(h * m, m) =
        attend(h, q.middleRows(h * m, m), k.middleRows(h * m, m),
               v.middleRows(h * m, m), want_probs ? &probs[h] : nullptr);
  }

  Matrix z1 = x + ((layer.wo * heads).colwise() + layer.bo);
  Matrix y1;
  LayerNormCache ln1;
  layer_norm(z1, layer.ln1_gamma, layer.ln1_beta, y1, ln1);

  Matrix ffn_pre = (layer.w1 * y1).colwise() + layer.b1;
  Matrix ffn_act = ffn_pre.unaryExpr([](double t) { return gelu(t); });
  Matrix z2 = y1 + ((layer.w2 * ffn_act).colwise() + layer.b2);
  Matrix y2;
  LayerNormCache ln2;
  layer_norm(z2, layer.ln2_gamma, layer.ln2_beta, y2, ln2);

  if (retained) *retained = probs;
  if (cache) {
    cache->input = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->heads = std::move(heads);
    cache->z1 = std::move(z1);
    cache->ln1 = std::move(ln1);
    cache->y1 = std::move(y1);
    cache->ffn_pre = std::move(ffn_pre);
    cache->ffn_act = std::move(ffn_act);
    cache->ln2 = std::move(ln2);
  }
  return y2;
}

Matrix layer_forward(const Matrix& x, std::span<const AttentionPattern> patterns,
                     const LayerParams& layer, const EncoderConfig& cfg,
                     LayerCache* cache) {
  if (static_cast<int>(patterns.size()) != cfg.heads()) {
    throw std::invalid_argument("need one pattern per head");
  }
  std::vector<Mask> masks;
  for (const auto& p : patterns) {
    if (p.size() != x.cols()) {
      throw std::invalid_argument("pattern length does not match input");
    }
    masks.push_back(to_mask(p));
  }
  HeadAttention attend = [&masks](int h, const Matrix& q, const Matrix& k,
                                  const Matrix& v, Matrix* probs) {
    return masked_attention(q, k, v, masks[h], probs);
  };
  return layer_forward(x, layer, cfg, attend, cache);
}

HeadAttention dense_attention(const TokenizedExample& ex,
                              const EncoderConfig& cfg, AttentionMode mode,
                              AttentionCounters* counters) {
  // Heads of one kind share a mask.
  auto row_mask = std::make_shared<std::optional<Mask>>();
  auto col_mask = std::make_shared<std::optional<Mask>>();
  std::vector<std::shared_ptr<std::optional<Mask>>> per_head;
  for (int h = 0; h < cfg.heads(); ++h) {
    const bool row_like = mode != AttentionMode::mate || h < cfg.row_heads;
    auto& slot = row_like ? row_mask : col_mask;
    if (!slot->has_value()) slot->emplace(to_mask(head_pattern(ex, h, cfg, mode)));
    per_head.push_back(slot);
  }
  return [per_head = std::move(per_head), counters](
             int h, const Matrix& q, const Matrix& k, const Matrix& v,
             Matrix* probs) {
    return masked_attention(q, k, v, **per_head.at(h), probs, counters);
  };
}

EncoderOutput encoder_forward(const TokenizedExample& ex, const Params& params,
                              const EncoderConfig& cfg,
                              const ForwardOptions& options) {
  return encoder_forward(ex, params, cfg,
                         dense_attention(ex, cfg, options.mode, options.counters),
                         options);
}

EncoderOutput encoder_forward(const TokenizedExample& ex, const Params& params,
                              const EncoderConfig& cfg,
                              const HeadAttention& attend,
                              const ForwardOptions& options) {
  cfg.validate();
  if (static_cast<int>(params.layers.size()) != cfg.layers) {
    throw std::invalid_argument("parameter layer count does not match config");
  }
  EncoderOutput out;
  if (options.keep_cache) out.cache.emplace();
  Matrix x = embed(ex, params);
  for (int l = 0; l < cfg.layers; ++l) {
    LayerCache* cache = nullptr;
    if (out.cache) cache = &out.cache->layers.emplace_back();
    std::vector<Matrix>* retained = nullptr;
    if (options.retain_attention) retained = &out.attention.emplace_back();
    x = layer_forward(x, params.layers[l], cfg, attend, cache, retained);
  }
  out.hidden = std::move(x);
  return out;
}

Params backward(const Matrix& d_hidden, const EncoderOutput& forward,
                const TokenizedExample& ex, const Params& params,
                const EncoderConfig& cfg) {
  if (!forward.cache) {
    throw std::logic_error("backward needs a forward pass run with keep_cache");
  }
  const auto& caches = forward.cache->layers;
  if (caches.size() != params.layers.size()) {
    throw std::logic_error("forward cache does not match parameters");
  }
  Params grad = Params::zeros(cfg);
  const int m = cfg.head_dim;

  Matrix dx = d_hidden;
  for (int l = cfg.layers - 1; l >= 0; --l) {
    const LayerParams& p = params.layers[l];
    const LayerCache& c = caches[l];
    LayerParams& g = grad.layers[l];

    const Matrix dz2 = layer_norm_backward(dx, p.ln2_gamma, c.ln2, g.ln2_gamma,
                                           g.ln2_beta);
    g.w2 += dz2 * c.ffn_act.transpose();
    g.b2 += dz2.rowwise().sum();
    Matrix d_pre = p.w2.transpose() * dz2;
    d_pre.array() *= c.ffn_pre.unaryExpr([](double t) { return gelu_derivative(t); }).array();
    g.w1 += d_pre * c.y1.transpose();
    g.b1 += d_pre.rowwise().sum();
    const Matrix dy1 = dz2 + p.w1.transpose() * d_pre;

    const Matrix dz1 = layer_norm_backward(dy1, p.ln1_gamma, c.ln1, g.ln1_gamma,
                                           g.ln1_beta);
    g.wo += dz1 * c.heads.transpose();
    g.bo += dz1.rowwise().sum();
    const Matrix d_heads = p.wo.transpose() * dz1;

    Matrix dq(cfg.hidden, c.input.cols());
    Matrix dk(cfg.hidden, c.input.cols());
    Matrix dv(cfg.hidden, c.input.cols());
    for (int h = 0; h < cfg.heads(); ++h) {
      AttentionGrad ag = masked_attention_backward(
          d_heads.middleRows(h * m, m), c.q.middleRows(h * m, m),
          c.k.middleRows(h * m, m), c.v.middleRows(h * m, m), c.probs[h]);
      dq.middleRows(h * m, m) = ag.dq;
      dk.middleRows(h * m, m) = ag.dk;
      dv.middleRows(h * m, m) = ag.dv;
    }
    g.wq += dq * c.input.transpose();
    g.wk += dk * c.input.transpose();
    g.wv += dv * c.input.transpose();
    dx = dz1 + p.wq.transpose() * dq + p.wk.transpose() * dk +
         p.wv.transpose() * dv;
  }

  auto& e = grad.embedding;
  for (int k = 0; k < ex.size(); ++k) {
    e.token.col(ex.token_ids[k]) += dx.col(k);
    e.position.col(ex.position_index[k]) += dx.col(k);
    e.row.col(ex.row_index[k]) += dx.col(k);
    e.col.col(ex.col_index[k]) += dx.col(k);
    e.rank.col(ex.rank_index[k]) += dx.col(k);
  }
  return grad;
}

GradCheckReport grad_check(const std::function<double(const Vector&)>& f,
                           const Vector& point, const Vector& analytic,
                           double eps, std::span<const Eigen::Index> coords) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check needs eps > 0");
  if (analytic.size() != point.size()) {
    throw std::invalid_argument("gradient and point sizes differ");
  }
  GradCheckReport report;
  Vector x = point;
  auto check = [&](Eigen::Index i) {
    const double saved = x(i);
    x(i) = saved + eps;
    const double up = f(x);
    x(i) = saved - eps;
    const double down = f(x);
    x(i) = saved;
    const double fd = (up - down) / (2.0 * eps);
    const double denom =
        std::max({std::abs(analytic(i)), std::abs(fd), 1e-8});
    const double err = std::abs(analytic(i) - fd) / denom;
    if (report.worst_coord < 0 || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_coord = i;
    }
    ++report.checked;
  };
  if (coords.empty()) {
    for (Eigen::Index i = 0; i < point.size(); ++i) check(i);
  } else {
    for (Eigen::Index i : coords) check(i);
  }
  return report;
}

void Adam::step(const std::vector<TensorView>& params,
                const std::vector<TensorView>& grads) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument("Adam: parameter and gradient lists differ");
  }
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(Vector::Zero(p.size()));
      v_.push_back(Vector::Zero(p.size()));
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto g = grads[i].flat();
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseAbs2();
    params[i].flat().array() -=
        lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

}  // namespace mate
