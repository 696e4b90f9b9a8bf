#include "tokenedit/model.hpp"

#include "tokenedit/fingerprint.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

namespace tokenedit {

namespace {

constexpr double kNormEps = 1e-5;

template <typename S>
void rms_norm_forward(const Mat<S>& x, const Vec<S>& scale, const Vec<S>& offset, Mat<S>& y,
                      Vec<S>& inv_rms) {
  const S n = static_cast<S>(x.rows());
  y.resize(x.rows(), x.cols());
  inv_rms.resize(x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const S inv = S(1) / std::sqrt(x.col(c).squaredNorm() / n + static_cast<S>(kNormEps));
    inv_rms(c) = inv;
    y.col(c) = (x.col(c) * inv).cwiseProduct(scale) + offset;
  }
}

// dx for y = scale * x * r + offset; accumulates into dscale/doffset if given.
template <typename S>
Mat<S> rms_norm_backward(const Mat<S>& x, const Vec<S>& inv_rms, const Vec<S>& scale,
                         const Mat<S>& dy, Vec<S>* dscale, Vec<S>* doffset) {
  const S n = static_cast<S>(x.rows());
  Mat<S> dx(x.rows(), x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const Vec<S> xhat = x.col(c) * inv_rms(c);
    const Vec<S> g = dy.col(c).cwiseProduct(scale);
    if (dscale != nullptr) *dscale += dy.col(c).cwiseProduct(xhat);
    if (doffset != nullptr) *doffset += dy.col(c);
    dx.col(c) = inv_rms(c) * (g - xhat * (xhat.dot(g) / n));
  }
  return dx;
}

template <typename S>
S sigmoid(S z) {
  return S(1) / (S(1) + std::exp(-z));
}

template <typename S>
void check_finite_columns(const Mat<S>& m, const char* what, int layer) {
  if (m.allFinite()) return;
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    if (!m.col(c).allFinite()) {
      std::ostringstream msg;
      msg << "non-finite " << what << " at layer " << layer << " position " << c;
      throw NumericError(msg.str());
    }
  }
}

template <typename S>
void fill_normal(Mat<S>& m, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng));
}

template <typename S>
LayerWeights<S> zero_layer(const ModelConfig& c) {
  LayerWeights<S> l;
  l.attn_norm_scale = Vec<S>::Zero(c.d_model);
  l.attn_norm_offset = Vec<S>::Zero(c.d_model);
  l.w_query = Mat<S>::Zero(c.d_model, c.d_model);
  l.w_key = Mat<S>::Zero(c.d_model, c.d_model);
  l.w_value = Mat<S>::Zero(c.d_model, c.d_model);
  l.w_output = Mat<S>::Zero(c.d_model, c.d_model);
  l.mlp_norm_scale = Vec<S>::Zero(c.d_model);
  l.mlp_norm_offset = Vec<S>::Zero(c.d_model);
  l.w_gate = Mat<S>::Zero(c.d_mlp, c.d_model);
  l.w_down = Mat<S>::Zero(c.d_model, c.d_mlp);
  return l;
}

template <typename S>
void layer_backward(const ModelConfig& config, const LayerWeights<S>& w, const LayerTrace<S>& t,
                    int replaced_position, Mat<S>& dh, LayerWeights<S>* g) {
  const Eigen::Index T = t.input.cols();
  const int dh_size = config.head_dim();
  const S scale = S(1) / std::sqrt(static_cast<S>(dh_size));

  // MLP branch: h = u + m, m = W_down silu(W_gate gamma(u)).
  Mat<S> dm = dh;
  if (replaced_position >= 0) dm.col(replaced_position).setZero();
  if (g != nullptr) g->w_down.noalias() += dm * t.gate.transpose();
  Mat<S> dgate_pre = w.w_down.transpose() * dm;
  for (Eigen::Index i = 0; i < dgate_pre.size(); ++i) {
    const S z = t.gate_pre.data()[i];
    const S s = sigmoid(z);
    dgate_pre.data()[i] *= s * (S(1) + z * (S(1) - s));
  }
  if (g != nullptr) g->w_gate.noalias() += dgate_pre * t.mlp_normed.transpose();
  const Mat<S> dnormed = w.w_gate.transpose() * dgate_pre;
  Mat<S> du = dh + rms_norm_backward(t.mlp_in, t.mlp_inv_rms, w.mlp_norm_scale, dnormed,
                                     g ? &g->mlp_norm_scale : nullptr,
                                     g ? &g->mlp_norm_offset : nullptr);

  // Attention branch: u = a + h^{l-1}.
  const Mat<S>& da = du;
  if (g != nullptr) g->w_output.noalias() += da * t.attn_mixed.transpose();
  const Mat<S> dmixed = w.w_output.transpose() * da;
  Mat<S> dq(config.d_model, T), dk(config.d_model, T), dv(config.d_model, T);
  for (int h = 0; h < config.n_heads; ++h) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(h) * dh_size;
    const Mat<S>& p = t.attn_probs[static_cast<std::size_t>(h)];
    const auto q = t.query.middleRows(r0, dh_size);
    const auto k = t.key.middleRows(r0, dh_size);
    const auto v = t.value.middleRows(r0, dh_size);
    const auto dout = dmixed.middleRows(r0, dh_size);
    dv.middleRows(r0, dh_size).noalias() = dout * p;
    const Mat<S> dp = dout.transpose() * v;
    Mat<S> ds = p.cwiseProduct(dp);
    const Vec<S> row_sums = ds.rowwise().sum();
    ds -= p.cwiseProduct(row_sums.replicate(1, T));
    dq.middleRows(r0, dh_size).noalias() = scale * (k * ds.transpose());
    dk.middleRows(r0, dh_size).noalias() = scale * (q * ds);
  }
  if (g != nullptr) {
    g->w_query.noalias() += dq * t.attn_normed.transpose();
    g->w_key.noalias() += dk * t.attn_normed.transpose();
    g->w_value.noalias() += dv * t.attn_normed.transpose();
  }
  Mat<S> dattn_normed = w.w_query.transpose() * dq;
  dattn_normed.noalias() += w.w_key.transpose() * dk;
  dattn_normed.noalias() += w.w_value.transpose() * dv;
  dh = du + rms_norm_backward(t.input, t.attn_inv_rms, w.attn_norm_scale, dattn_normed,
                              g ? &g->attn_norm_scale : nullptr,
                              g ? &g->attn_norm_offset : nullptr);
}

}  // namespace

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},     {"d_model", c.d_model},
                     {"d_mlp", c.d_mlp},           {"n_heads", c.n_heads},
                     {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.d_mlp = j.value("d_mlp", d.d_mlp);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.seed = j.value("seed", d.seed);
}

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || d_mlp < 1 || n_heads < 1 || vocab_size < 1 ||
      max_seq_len < 1) {
    throw InvalidArgument("model dimensions must all be >= 1");
  }
  if (d_model % n_heads != 0) throw InvalidArgument("d_model must be divisible by n_heads");
  if (d_mlp < d_model) throw InvalidArgument("d_mlp must be >= d_model");
}

void check_tokens(const ModelConfig& config, const TokenSequence& tokens) {
  if (tokens.empty()) throw InvalidArgument("token sequence is empty");
  if (static_cast<int>(tokens.size()) > config.max_seq_len) {
    throw InvalidArgument("sequence length " + std::to_string(tokens.size()) +
                          " exceeds max_seq_len " + std::to_string(config.max_seq_len));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= config.vocab_size) {
      throw InvalidArgument("token id " + std::to_string(tokens[i]) + " at index " +
                            std::to_string(i) + " out of range");
    }
  }
}

template <typename S>
ModelWeights<S> ModelWeights<S>::zeros(const ModelConfig& config) {
  config.validate();
  ModelWeights<S> w;
  w.config = config;
  w.token_embedding = Mat<S>::Zero(config.vocab_size, config.d_model);
  w.position_embedding = Mat<S>::Zero(config.max_seq_len, config.d_model);
  for (int l = 0; l < config.n_layers; ++l) w.layers.push_back(zero_layer<S>(config));
  w.final_norm_scale = Vec<S>::Zero(config.d_model);
  w.final_norm_offset = Vec<S>::Zero(config.d_model);
  w.unembedding = Mat<S>::Zero(config.d_model, config.vocab_size);
  return w;
}

template <typename S>
ModelWeights<S> ModelWeights<S>::initialize(const ModelConfig& config) {
  ModelWeights<S> w = zeros(config);
  std::mt19937_64 rng(config.seed);
  const double in_std = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  const double out_std = in_std / std::sqrt(2.0 * config.n_layers);
  const double down_std =
      1.0 / std::sqrt(static_cast<double>(config.d_mlp)) / std::sqrt(2.0 * config.n_layers);
  fill_normal(w.token_embedding, rng, 1.0);
  fill_normal(w.position_embedding, rng, 0.1);
  for (auto& l : w.layers) {
    l.attn_norm_scale.setOnes();
    l.mlp_norm_scale.setOnes();
    fill_normal(l.w_query, rng, in_std);
    fill_normal(l.w_key, rng, in_std);
    fill_normal(l.w_value, rng, in_std);
    fill_normal(l.w_output, rng, out_std);
    fill_normal(l.w_gate, rng, in_std);
    fill_normal(l.w_down, rng, down_std);
  }
  w.final_norm_scale.setOnes();
  fill_normal(w.unembedding, rng, in_std);
  return w;
}

template <typename S>
template <typename T>
ModelWeights<T> ModelWeights<S>::cast() const {
  ModelWeights<T> out = ModelWeights<T>::zeros(config);
  auto dst = out.tensors();
  auto src = tensors();
  for (std::size_t i = 0; i < src.size(); ++i) {
    for (Eigen::Index k = 0; k < src[i].size(); ++k) {
      dst[i].data[k] = static_cast<T>(src[i].data[k]);
    }
  }
  return out;
}

namespace {
template <typename S, typename W>
auto collect_tensors(W& w) {
  using Elem = std::conditional_t<std::is_const_v<W>, const S, S>;
  std::vector<TensorRef<Elem>> out;
  auto add_mat = [&](std::string name, auto& m) {
    out.push_back({std::move(name), m.data(), m.rows(), m.cols(), false});
  };
  auto add_vec = [&](std::string name, auto& v) {
    out.push_back({std::move(name), v.data(), v.rows(), 1, true});
  };
  add_mat("token_embedding", w.token_embedding);
  add_mat("position_embedding", w.position_embedding);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    add_vec(p + "attn_norm_scale", L.attn_norm_scale);
    add_vec(p + "attn_norm_offset", L.attn_norm_offset);
    add_mat(p + "w_query", L.w_query);
    add_mat(p + "w_key", L.w_key);
    add_mat(p + "w_value", L.w_value);
    add_mat(p + "w_output", L.w_output);
    add_vec(p + "mlp_norm_scale", L.mlp_norm_scale);
    add_vec(p + "mlp_norm_offset", L.mlp_norm_offset);
    add_mat(p + "w_gate", L.w_gate);
    add_mat(p + "w_down", L.w_down);
  }
  add_vec("final_norm_scale", w.final_norm_scale);
  add_vec("final_norm_offset", w.final_norm_offset);
  add_mat("unembedding", w.unembedding);
  return out;
}
}  // namespace

template <typename S>
std::vector<TensorRef<S>> ModelWeights<S>::tensors() {
  return collect_tensors<S>(*this);
}

template <typename S>
std::vector<TensorRef<const S>> ModelWeights<S>::tensors() const {
  return collect_tensors<S>(*this);
}

template <typename S>
bool ModelWeights<S>::all_finite() const {
  for (const auto& t : tensors()) {
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      if (!std::isfinite(t.data[i])) return false;
    }
  }
  return true;
}

template <typename S>
std::string ModelWeights<S>::fingerprint() const {
  Fnv1a h;
  h.update(nlohmann::json(config).dump());
  for (const auto& t : tensors()) {
    h.update(t.name);
    h.update(std::as_bytes(std::span<const S>(t.data, static_cast<std::size_t>(t.size()))));
  }
  return h.hex();
}

template <typename S>
std::size_t ModelWeights<S>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += static_cast<std::size_t>(t.size());
  return n;
}

template <typename S>
ForwardResult<S> forward(const ModelWeights<S>& weights, const TokenSequence& tokens,
                         const Replacement<S>* replacement) {
  const ModelConfig& config = weights.config;
  check_tokens(config, tokens);
  const Eigen::Index T = static_cast<Eigen::Index>(tokens.size());
  if (replacement != nullptr) {
    if (replacement->layer < 0 || replacement->layer >= config.n_layers) {
      throw InvalidArgument("replacement layer " + std::to_string(replacement->layer) +
                            " out of range");
    }
    if (replacement->position < 0 || replacement->position >= T) {
      throw InvalidArgument("replacement position " + std::to_string(replacement->position) +
                            " out of range");
    }
    if (replacement->value.size() != config.d_model) {
      throw InvalidArgument("replacement vector must have d_model entries");
    }
    if (!replacement->value.allFinite()) throw InvalidArgument("replacement vector is not finite");
  }

  ForwardResult<S> result;
  ActivationTrace<S>& trace = result.trace;
  trace.tokens = tokens;
  trace.embedded.resize(config.d_model, T);
  for (Eigen::Index t = 0; t < T; ++t) {
    trace.embedded.col(t) = weights.token_embedding.row(tokens[static_cast<std::size_t>(t)]).transpose() +
                            weights.position_embedding.row(t).transpose();
  }

  const int dh = config.head_dim();
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  const Mat<S>* h = &trace.embedded;
  trace.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (int l = 0; l < config.n_layers; ++l) {
    const LayerWeights<S>& w = weights.layers[static_cast<std::size_t>(l)];
    LayerTrace<S>& lt = trace.layers[static_cast<std::size_t>(l)];
    lt.input = *h;
    rms_norm_forward(lt.input, w.attn_norm_scale, w.attn_norm_offset, lt.attn_normed,
                     lt.attn_inv_rms);
    lt.query.noalias() = w.w_query * lt.attn_normed;
    lt.key.noalias() = w.w_key * lt.attn_normed;
    lt.value.noalias() = w.w_value * lt.attn_normed;
    lt.attn_mixed.resize(config.d_model, T);
    lt.attn_probs.resize(static_cast<std::size_t>(config.n_heads));
    for (int head = 0; head < config.n_heads; ++head) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(head) * dh;
      Mat<S> scores = scale * (lt.query.middleRows(r0, dh).transpose() * lt.key.middleRows(r0, dh));
      Mat<S>& p = lt.attn_probs[static_cast<std::size_t>(head)];
      p = Mat<S>::Zero(T, T);
      for (Eigen::Index i = 0; i < T; ++i) {
        const S mx = scores.row(i).head(i + 1).maxCoeff();
        S sum = 0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          p(i, j) = std::exp(scores(i, j) - mx);
          sum += p(i, j);
        }
        p.row(i).head(i + 1) /= sum;
      }
      lt.attn_mixed.middleRows(r0, dh).noalias() = lt.value.middleRows(r0, dh) * p.transpose();
    }
    lt.attn_out.noalias() = w.w_output * lt.attn_mixed;
    lt.mlp_in = lt.attn_out + lt.input;
    rms_norm_forward(lt.mlp_in, w.mlp_norm_scale, w.mlp_norm_offset, lt.mlp_normed,
                     lt.mlp_inv_rms);
    lt.gate_pre.noalias() = w.w_gate * lt.mlp_normed;
    lt.gate = lt.gate_pre.unaryExpr([](S z) { return z * sigmoid(z); });
    lt.mlp_out.noalias() = w.w_down * lt.gate;
    if (replacement != nullptr && replacement->layer == l) {
      lt.mlp_out.col(replacement->position) = replacement->value;
      trace.replaced_layer = l;
      trace.replaced_position = replacement->position;
    }
    lt.hidden = lt.mlp_in + lt.mlp_out;
    h = &lt.hidden;
  }
  rms_norm_forward(*h, weights.final_norm_scale, weights.final_norm_offset, trace.final_normed,
                   trace.final_inv_rms);
  result.logits.noalias() = trace.final_normed.transpose() * weights.unembedding;
  return result;
}

template <typename S>
Mat<S> forward_with_replacement(const ModelWeights<S>& weights, const TokenSequence& tokens,
                                int layer, int position, const Vec<S>& v) {
  const Replacement<S> r{layer, position, v};
  return forward(weights, tokens, &r).logits;
}

template <typename S>
Mat<S> backward(const ModelWeights<S>& weights, const ActivationTrace<S>& trace,
                const Mat<S>& dlogits, int stop_layer, ModelWeights<S>* grads) {
  const ModelConfig& config = weights.config;
  const Mat<S>& top = trace.layers.back().hidden;
  if (grads != nullptr) grads->unembedding.noalias() += trace.final_normed * dlogits;
  const Mat<S> dnormed = weights.unembedding * dlogits.transpose();
  Mat<S> dh = rms_norm_backward(top, trace.final_inv_rms, weights.final_norm_scale, dnormed,
                                grads ? &grads->final_norm_scale : nullptr,
                                grads ? &grads->final_norm_offset : nullptr);
  check_finite_columns(dh, "gradient", config.n_layers - 1);
  for (int l = config.n_layers - 1; l > stop_layer; --l) {
    layer_backward(config, weights.layers[static_cast<std::size_t>(l)],
                   trace.layers[static_cast<std::size_t>(l)],
                   l == trace.replaced_layer ? trace.replaced_position : -1, dh,
                   grads ? &grads->layers[static_cast<std::size_t>(l)] : nullptr);
    check_finite_columns(dh, "gradient", l - 1);
  }
  if (stop_layer < 0 && grads != nullptr) {
    for (Eigen::Index t = 0; t < dh.cols(); ++t) {
      grads->token_embedding.row(trace.tokens[static_cast<std::size_t>(t)]) += dh.col(t).transpose();
      grads->position_embedding.row(t) += dh.col(t).transpose();
    }
  }
  return dh;
}

template <typename S>
ReplacementGradient<S> grad_wrt_replacement(const ModelWeights<S>& weights,
                                            const TokenSequence& tokens, int layer,
                                            int position, const Vec<S>& v,
                                            const LogitLoss<S>& loss_fn) {
  const Replacement<S> r{layer, position, v};
  const ForwardResult<S> fr = forward(weights, tokens, &r);
  Mat<S> dlogits = Mat<S>::Zero(fr.logits.rows(), fr.logits.cols());
  const S loss = loss_fn(fr.logits, dlogits);
  if (!std::isfinite(loss)) {
    throw NumericError("non-finite loss at layer " + std::to_string(layer) + " position " +
                       std::to_string(position));
  }
  // h^layer = u + m, so d/dm at the replaced column is d/dh^layer there.
  const Mat<S> dh = backward<S>(weights, fr.trace, dlogits, layer, nullptr);
  return {loss, dh.col(position)};
}

template <typename S>
TokenId argmax_lowest(const Eigen::Ref<const Vec<S>>& values) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < values.size(); ++i) {
    if (values(i) > values(best)) best = i;
  }
  return static_cast<TokenId>(best);
}

template <typename S>
Vec<S> softmax(const Eigen::Ref<const Vec<S>>& logits) {
  Vec<S> p = (logits.array() - logits.maxCoeff()).exp().matrix();
  return p / p.sum();
}

template <typename S>
Vec<S> log_softmax(const Eigen::Ref<const Vec<S>>& logits) {
  const S mx = logits.maxCoeff();
  const S lse = mx + std::log((logits.array() - mx).exp().sum());
  return (logits.array() - lse).matrix();
}

template <typename S>
TokenSequence greedy_decode(const ModelWeights<S>& weights, const TokenSequence& prompt,
                            int max_new) {
  if (max_new < 0) throw InvalidArgument("max_new must be >= 0");
  if (static_cast<long>(prompt.size()) + max_new > weights.config.max_seq_len) {
    throw InvalidArgument("prompt length + max_new exceeds max_seq_len");
  }
  check_tokens(weights.config, prompt);
  TokenSequence out = prompt;
  for (int step = 0; step < max_new; ++step) {
    const Mat<S> logits = forward(weights, out).logits;
    const Vec<S> last = logits.row(logits.rows() - 1).transpose();
    out.push_back(argmax_lowest<S>(last));
  }
  return out;
}

template <typename S>
Vec<S> next_token_distribution(const ModelWeights<S>& weights, const TokenSequence& prompt) {
  const Mat<S> logits = forward(weights, prompt).logits;
  const Vec<S> last = logits.row(logits.rows() - 1).transpose();
  return softmax<S>(last);
}

#define TOKENEDIT_INSTANTIATE(S)                                                                  \
  template struct ModelWeights<S>;                                                                \
  template ForwardResult<S> forward<S>(const ModelWeights<S>&, const TokenSequence&,              \
                                       const Replacement<S>*);                                    \
  template Mat<S> forward_with_replacement<S>(const ModelWeights<S>&, const TokenSequence&, int, \
                                              int, const Vec<S>&);                                \
  template Mat<S> backward<S>(const ModelWeights<S>&, const ActivationTrace<S>&, const Mat<S>&,  \
                              int, ModelWeights<S>*);                                             \
  template ReplacementGradient<S> grad_wrt_replacement<S>(                                        \
      const ModelWeights<S>&, const TokenSequence&, int, int, const Vec<S>&,                      \
      const LogitLoss<S>&);                                                                       \
  template TokenSequence greedy_decode<S>(const ModelWeights<S>&, const TokenSequence&, int);    \
  template Vec<S> next_token_distribution<S>(const ModelWeights<S>&, const TokenSequence&);      \
  template Vec<S> softmax<S>(const Eigen::Ref<const Vec<S>>&);                                   \
  template Vec<S> log_softmax<S>(const Eigen::Ref<const Vec<S>>&);                               \
  template TokenId argmax_lowest<S>(const Eigen::Ref<const Vec<S>>&);

TOKENEDIT_INSTANTIATE(float)
TOKENEDIT_INSTANTIATE(double)
#undef TOKENEDIT_INSTANTIATE

template ModelWeights<double> ModelWeights<float>::cast<double>() const;
template ModelWeights<float> ModelWeights<double>::cast<float>() const;
template ModelWeights<float> ModelWeights<float>::cast<float>() const;
template ModelWeights<double> ModelWeights<double>::cast<double>() const;

}  // namespace tokenedit
