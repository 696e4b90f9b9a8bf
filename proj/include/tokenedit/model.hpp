#pragma once

#include "tokenedit/common.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace tokenedit {

struct ModelConfig {
  int n_layers = 8;
  int d_model = 64;
  int d_mlp = 256;
  int n_heads = 4;
  int vocab_size = 512;
  int max_seq_len = 64;
  std::uint64_t seed = 42;

  int head_dim() const { return d_model / n_heads; }
  // Throws InvalidArgument on a violated shape invariant.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Non-owning view of one named parameter tensor. Vectors have cols == 1 and
// is_vector set so manifests can record them with a 1-d shape.
template <typename S>
struct TensorRef {
  std::string name;
  S* data;
  Eigen::Index rows;
  Eigen::Index cols;
  bool is_vector;
  Eigen::Index size() const { return rows * cols; }
};

template <typename S>
struct LayerWeights {
  Vec<S> attn_norm_scale;
  Vec<S> attn_norm_offset;
  Mat<S> w_query;  // d_model x d_model
  Mat<S> w_key;
  Mat<S> w_value;
  Mat<S> w_output;
  Vec<S> mlp_norm_scale;
  Vec<S> mlp_norm_offset;
  Mat<S> w_gate;  // d_mlp x d_model
  Mat<S> w_down;  // d_model x d_mlp
};

// All parameters of the decoder-only transformer. Hidden states are column
// vectors; a sequence of T positions is a d_model x T matrix.
template <typename S>
struct ModelWeights {
  ModelConfig config;
  Mat<S> token_embedding;     // vocab_size x d_model
  Mat<S> position_embedding;  // max_seq_len x d_model
  std::vector<LayerWeights<S>> layers;
  Vec<S> final_norm_scale;
  Vec<S> final_norm_offset;
  Mat<S> unembedding;  // d_model x vocab_size

  static ModelWeights zeros(const ModelConfig& config);
  // Scaled-normal initialization drawn from config.seed.
  static ModelWeights initialize(const ModelConfig& config);

  template <typename T>
  ModelWeights<T> cast() const;

  // Every tensor in a fixed manifest order.
  std::vector<TensorRef<S>> tensors();
  std::vector<TensorRef<const S>> tensors() const;

  bool all_finite() const;
  // Hash over config and raw parameter bytes.
  std::string fingerprint() const;
  std::size_t parameter_count() const;
};

template <typename S>
struct LayerTrace {
  Mat<S> input;  // h^{l-1}
  Mat<S> attn_normed;
  Vec<S> attn_inv_rms;
  Mat<S> query;
  Mat<S> key;
  Mat<S> value;
  std::vector<Mat<S>> attn_probs;  // per head, T x T, row = query position
  Mat<S> attn_mixed;               // concatenated head outputs
  Mat<S> attn_out;                 // a^l
  Mat<S> mlp_in;                   // a^l + h^{l-1}
  Mat<S> mlp_normed;               // gamma(a^l + h^{l-1})
  Vec<S> mlp_inv_rms;
  Mat<S> gate_pre;  // W_gate gamma(...)
  Mat<S> gate;      // k = silu(gate_pre)
  Mat<S> mlp_out;   // m^l, after any replacement
  Mat<S> hidden;    // h^l = mlp_in + mlp_out
};

template <typename S>
struct ActivationTrace {
  TokenSequence tokens;
  Mat<S> embedded;  // input to layer 0
  std::vector<LayerTrace<S>> layers;
  Mat<S> final_normed;
  Vec<S> final_inv_rms;
  // Set when the forward pass overwrote one MLP output column.
  int replaced_layer = -1;
  int replaced_position = -1;
};

template <typename S>
struct ForwardResult {
  Mat<S> logits;  // T x vocab_size, row i predicts token i + 1
  ActivationTrace<S> trace;
};

template <typename S>
struct Replacement {
  int layer;
  int position;
  Vec<S> value;
};

// Validates ids and length against the config.
void check_tokens(const ModelConfig& config, const TokenSequence& tokens);

template <typename S>
ForwardResult<S> forward(const ModelWeights<S>& weights, const TokenSequence& tokens,
                         const Replacement<S>* replacement = nullptr);

// Logits with m^{layer}_{position} overwritten by v before it joins the
// residual stream.
template <typename S>
Mat<S> forward_with_replacement(const ModelWeights<S>& weights, const TokenSequence& tokens,
                                int layer, int position, const Vec<S>& v);

// Reverse pass from d(loss)/d(logits) down to the residual stream h^{stop_layer}.
// Returns d(loss)/d(h^{stop_layer}) (d_model x T). stop_layer = -1 runs through
// the embeddings. Parameter gradients of the traversed layers are accumulated
// into *grads when it is non-null (it must be shaped like weights).
template <typename S>
Mat<S> backward(const ModelWeights<S>& weights, const ActivationTrace<S>& trace,
                const Mat<S>& dlogits, int stop_layer, ModelWeights<S>* grads);

// Scalar loss of the logits; writes d(loss)/d(logits) into the second argument
// (already sized T x vocab_size and zeroed).
template <typename S>
using LogitLoss = std::function<S(const Mat<S>& logits, Mat<S>& dlogits)>;

template <typename S>
struct ReplacementGradient {
  S loss;
  Vec<S> grad;
};

template <typename S>
ReplacementGradient<S> grad_wrt_replacement(const ModelWeights<S>& weights,
                                            const TokenSequence& tokens, int layer,
                                            int position, const Vec<S>& v,
                                            const LogitLoss<S>& loss_fn);

// Argmax continuation; ties go to the lowest id.
template <typename S>
TokenSequence greedy_decode(const ModelWeights<S>& weights, const TokenSequence& prompt,
                            int max_new);

template <typename S>
Vec<S> next_token_distribution(const ModelWeights<S>& weights, const TokenSequence& prompt);

template <typename S>
Vec<S> softmax(const Eigen::Ref<const Vec<S>>& logits);

template <typename S>
Vec<S> log_softmax(const Eigen::Ref<const Vec<S>>& logits);

template <typename S>
TokenId argmax_lowest(const Eigen::Ref<const Vec<S>>& values);

using Weights = ModelWeights<float>;
using WeightsD = ModelWeights<double>;

}  // namespace tokenedit
