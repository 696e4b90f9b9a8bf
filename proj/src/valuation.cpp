#include "tokenedit/valuation.hpp"

#include <cmath>

namespace tokenedit {

Regularizer parse_regularizer(const std::string& text) {
  if (text == "kl") return Regularizer::kKl;
  if (text == "js") return Regularizer::kJs;
  if (text == "cosine") return Regularizer::kCosine;
  throw InvalidArgument("unknown regularizer '" + text + "' (expected kl, js or cosine)");
}

std::string to_string(Regularizer r) {
  switch (r) {
    case Regularizer::kKl: return "kl";
    case Regularizer::kJs: return "js";
    case Regularizer::kCosine: return "cosine";
  }
  return "kl";
}

ValueOptimizer parse_value_optimizer(const std::string& text) {
  if (text == "adam") return ValueOptimizer::kAdam;
  if (text == "sgd") return ValueOptimizer::kSgd;
  throw InvalidArgument("unknown value optimizer '" + text + "' (expected adam or sgd)");
}

std::string to_string(ValueOptimizer o) { return o == ValueOptimizer::kSgd ? "sgd" : "adam"; }

void ValuationConfig::validate(const ModelConfig& model) const {
  if (!(lr > 0)) throw InvalidArgument("valuation lr must be positive");
  if (steps < 0) throw InvalidArgument("valuation steps must be non-negative");
  if (!(kl_factor >= 0)) throw InvalidArgument("kl_factor must be non-negative");
  if (!(clamp_factor > 0)) throw InvalidArgument("clamp_factor must be positive");
  if (!(weight_decay >= 0)) throw InvalidArgument("weight_decay must be non-negative");
  if (loss_layer != -1 && loss_layer != model.n_layers - 1) {
    throw InvalidArgument("loss_layer must be the final layer (" + std::to_string(model.n_layers - 1) + ")");
  }
}

void to_json(nlohmann::json& j, const ValuationConfig& c) {
  j = {{"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"steps", c.steps},
       {"kl_factor", c.kl_factor},
       {"clamp_factor", c.clamp_factor},
       {"loss_layer", c.loss_layer},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"regularizer", to_string(c.regularizer)},
       {"optimizer", to_string(c.optimizer)}};
}

void from_json(const nlohmann::json& j, ValuationConfig& c) {
  ValuationConfig d;
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.steps = j.value("steps", d.steps);
  c.kl_factor = j.value("kl_factor", d.kl_factor);
  c.clamp_factor = j.value("clamp_factor", d.clamp_factor);
  c.loss_layer = j.value("loss_layer", d.loss_layer);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.regularizer = parse_regularizer(j.value("regularizer", to_string(d.regularizer)));
  c.optimizer = parse_value_optimizer(j.value("optimizer", to_string(d.optimizer)));
}

TokenSequence neutral_prompt_for(const Vocabulary& vocab, const HarmfulToken& token) {
  return render_prompt(vocab, kBenignTemplates[0], token.text()).first;
}

template <typename S>
ValueTarget<S> make_value_target(const ModelWeights<S>& weights, const Vocabulary& vocab, int layer,
                                 const HarmfulToken& token, const TokenSequence& query,
                                 const TokenSequence& y_target) {
  if (layer < 0 || layer >= weights.config.n_layers) {
    throw InvalidArgument("layer " + std::to_string(layer) + " out of range");
  }
  if (y_target.empty()) throw InvalidArgument("empty target response");
  ValueTarget<S> t;
  t.token = token;
  t.query = query;
  t.neutral_prompt = neutral_prompt_for(vocab, token);
  t.y_target = y_target;
  t.layer = layer;
  t.position = locate_span(query, token.ids);
  t.neutral_position = locate_span(t.neutral_prompt, token.ids);
  TokenSequence full = query;
  full.insert(full.end(), y_target.begin(), y_target.end());
  check_tokens(weights.config, full);

  const auto fq = forward(weights, query);
  t.v_init = fq.trace.layers[static_cast<std::size_t>(layer)].mlp_out.col(t.position);
  t.v_star = t.v_init;
  const auto fu = forward(weights, t.neutral_prompt);
  t.neutral_reference = log_softmax<S>(fu.logits.row(fu.logits.rows() - 1).transpose());
  return t;
}

template <typename S>
LogitLoss<S> safe_logit_loss(int query_length, const TokenSequence& y_target) {
  return [query_length, y_target](const Mat<S>& logits, Mat<S>& dlogits) -> S {
    const S inv = S(1) / static_cast<S>(y_target.size());
    S loss = 0;
    for (std::size_t j = 0; j < y_target.size(); ++j) {
      const auto row = static_cast<Eigen::Index>(query_length) + static_cast<Eigen::Index>(j) - 1;
      const Vec<S> logp = log_softmax<S>(logits.row(row).transpose());
      loss -= logp(y_target[j]) * inv;
      dlogits.row(row) += (logp.array().exp() * inv).matrix().transpose();
      dlogits(row, y_target[j]) -= inv;
    }
    return loss;
  };
}

template <typename S>
S safe_loss(const ModelWeights<S>& weights, int layer, int position, const Vec<S>& v,
            const TokenSequence& query, const TokenSequence& y_target) {
  if (y_target.empty()) throw InvalidArgument("empty target response");
  TokenSequence full = query;
  full.insert(full.end(), y_target.begin(), y_target.end());
  const Mat<S> logits = forward_with_replacement(weights, full, layer, position, v);
  Mat<S> scratch = Mat<S>::Zero(logits.rows(), logits.cols());
  const S loss = safe_logit_loss<S>(static_cast<int>(query.size()), y_target)(logits, scratch);
  if (!std::isfinite(loss)) throw NumericError("non-finite safe loss");
  return loss;
}

template <typename S>
S divergence(Regularizer kind, const Vec<S>& logits, const Vec<S>& reference, Vec<S>* grad) {
  const Vec<S> logp = log_softmax<S>(logits);
  const Vec<S> p = logp.array().exp().matrix();
  const Vec<S> q = reference.array().exp().matrix();
  S value = 0;
  Vec<S> dp;  // d(value)/dp
  switch (kind) {
    case Regularizer::kKl: {
      const Vec<S> diff = logp - reference;
      value = p.dot(diff);
      dp = diff;
      break;
    }
    case Regularizer::kJs: {
      Vec<S> logm(p.size());
      for (Eigen::Index i = 0; i < p.size(); ++i) {
        const S hi = std::max(logp(i), reference(i));
        const S lo = std::min(logp(i), reference(i));
        logm(i) = std::log(S(0.5)) + hi + std::log1p(std::exp(lo - hi));
      }
      value = S(0.5) * (p.dot(logp - logm) + q.dot(reference - logm));
      dp = S(0.5) * (logp - logm);
      break;
    }
    case Regularizer::kCosine: {
      const S np = p.norm();
      const S nq = q.norm();
      const S cos = p.dot(q) / (np * nq);
      value = S(1) - cos;
      dp = -(q / (np * nq) - cos * p / (np * np));
      break;
    }
  }
  if (grad != nullptr) {
    const S mean = p.dot(dp);
    *grad = (p.array() * (dp.array() - mean)).matrix();
  }
  return value;
}

template <typename S>
LogitLoss<S> utility_logit_loss(Regularizer kind, const Vec<S>& reference) {
  return [kind, reference](const Mat<S>& logits, Mat<S>& dlogits) -> S {
    const auto last = logits.rows() - 1;
    Vec<S> g;
    const S value = divergence<S>(kind, logits.row(last).transpose(), reference, &g);
    dlogits.row(last) = g.transpose();
    return value;
  };
}

template <typename S>
S utility_loss(const ModelWeights<S>& weights, int layer, int position, const Vec<S>& v,
               const TokenSequence& neutral_prompt, Regularizer kind) {
  const auto base = forward(weights, neutral_prompt);
  const Vec<S> reference = log_softmax<S>(base.logits.row(base.logits.rows() - 1).transpose());
  const Mat<S> patched = forward_with_replacement(weights, neutral_prompt, layer, position, v);
  const S value = divergence<S>(kind, patched.row(patched.rows() - 1).transpose(), reference, nullptr);
  if (!std::isfinite(value)) throw NumericError("non-finite utility loss");
  return value;
}

template <typename S>
JointLoss joint_loss(const ModelWeights<S>& weights, const ValueTarget<S>& target, const Vec<S>& v,
                     const ValuationConfig& cfg, Vec<S>* grad) {
  TokenSequence full = target.query;
  full.insert(full.end(), target.y_target.begin(), target.y_target.end());
  const auto safe = grad_wrt_replacement<S>(weights, full, target.layer, target.position, v,
                                            safe_logit_loss<S>(static_cast<int>(target.query.size()),
                                                               target.y_target));
  JointLoss out{static_cast<double>(safe.loss), static_cast<double>(safe.loss), 0.0};
  if (grad != nullptr) *grad = safe.grad;
  if (cfg.kl_factor > 0) {
    const auto util = grad_wrt_replacement<S>(weights, target.neutral_prompt, target.layer,
                                              target.neutral_position, v,
                                              utility_logit_loss<S>(cfg.regularizer, target.neutral_reference));
    out.utility = static_cast<double>(util.loss);
    out.total += cfg.kl_factor * out.utility;
    if (grad != nullptr) *grad += static_cast<S>(cfg.kl_factor) * util.grad;
  } else {
    const Mat<S> patched = forward_with_replacement(weights, target.neutral_prompt, target.layer,
                                                    target.neutral_position, v);
    out.utility = static_cast<double>(divergence<S>(cfg.regularizer, patched.row(patched.rows() - 1).transpose(),
                                                    target.neutral_reference, nullptr));
  }
  return out;
}

template <typename S>
ValueTarget<S> optimize_value(const ModelWeights<S>& weights, ValueTarget<S> target,
                              const ValuationConfig& cfg) {
  cfg.validate(weights.config);
  if (target.v_init.size() != weights.config.d_model) {
    throw InvalidArgument("value target has no v_init of size d_model");
  }
  const Vec<S>& v0 = target.v_init;
  const S radius = static_cast<S>(cfg.clamp_factor) * v0.norm();
  Vec<S> v = v0;
  Vec<S> m1 = Vec<S>::Zero(v.size());
  Vec<S> m2 = Vec<S>::Zero(v.size());
  target.loss_history.clear();
  target.safe_history.clear();
  target.utility_history.clear();

  const auto record = [&](const JointLoss& l, int step) {
    if (!std::isfinite(l.total)) {
      throw NumericError("non-finite value loss at step " + std::to_string(step));
    }
    target.loss_history.push_back(l.total);
    target.safe_history.push_back(l.safe);
    target.utility_history.push_back(l.utility);
  };

  for (int step = 0; step < cfg.steps; ++step) {
    Vec<S> g;
    record(joint_loss(weights, target, v, cfg, &g), step);
    if (!g.allFinite()) throw NumericError("non-finite value gradient at step " + std::to_string(step));
    const Vec<S> prev = v;
    const S lr = static_cast<S>(cfg.lr);
    if (cfg.optimizer == ValueOptimizer::kAdam) {
      const S b1 = static_cast<S>(cfg.beta1);
      const S b2 = static_cast<S>(cfg.beta2);
      m1 = b1 * m1 + (S(1) - b1) * g;
      m2 = b2 * m2 + (S(1) - b2) * g.cwiseAbs2();
      const S c1 = S(1) - std::pow(b1, static_cast<S>(step + 1));
      const S c2 = S(1) - std::pow(b2, static_cast<S>(step + 1));
      v -= lr * ((m1 / c1).array() / ((m2 / c2).array().sqrt() + static_cast<S>(cfg.eps))).matrix();
    } else {
      v -= lr * g;
    }
    v -= lr * static_cast<S>(cfg.weight_decay) * (prev - v0);
    const S offset = (v - v0).norm();
    if (offset > radius) v = v0 + (v - v0) * (radius / offset);
  }
  record(joint_loss<S>(weights, target, v, cfg, nullptr), cfg.steps);
  target.v_star = v;
  return target;
}

#define TOKENEDIT_INSTANTIATE(S)                                                                    \
  template ValueTarget<S> make_value_target<S>(const ModelWeights<S>&, const Vocabulary&, int,     \
                                               const HarmfulToken&, const TokenSequence&,          \
                                               const TokenSequence&);                              \
  template LogitLoss<S> safe_logit_loss<S>(int, const TokenSequence&);                             \
  template S safe_loss<S>(const ModelWeights<S>&, int, int, const Vec<S>&, const TokenSequence&,   \
                          const TokenSequence&);                                                   \
  template S divergence<S>(Regularizer, const Vec<S>&, const Vec<S>&, Vec<S>*);                   \
  template LogitLoss<S> utility_logit_loss<S>(Regularizer, const Vec<S>&);                         \
  template S utility_loss<S>(const ModelWeights<S>&, int, int, const Vec<S>&,                      \
                             const TokenSequence&, Regularizer);                                   \
  template JointLoss joint_loss<S>(const ModelWeights<S>&, const ValueTarget<S>&, const Vec<S>&,   \
                                   const ValuationConfig&, Vec<S>*);                               \
  template ValueTarget<S> optimize_value<S>(const ModelWeights<S>&, ValueTarget<S>,                \
                                            const ValuationConfig&);

TOKENEDIT_INSTANTIATE(float)
TOKENEDIT_INSTANTIATE(double)
#undef TOKENEDIT_INSTANTIATE

}  // namespace tokenedit
