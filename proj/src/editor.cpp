#include "tokenedit/editor.hpp"

#include "tokenedit/parallel.hpp"

#include <chrono>
#include <fstream>

namespace tokenedit {

namespace {

constexpr double kMaxCondition = 1e12;

}  // namespace

SourceMode parse_source_mode(const std::string& text) {
  if (text == "local" || text == "lexicon" || text == "template") return SourceMode::kLocal;
  if (text == "remote") return SourceMode::kRemote;
  throw InvalidArgument("unknown source mode '" + text + "' (expected local or remote)");
}

std::string to_string(SourceMode m) { return m == SourceMode::kRemote ? "remote" : "local"; }

void EditConfig::validate(const ModelConfig& model) const {
  if (target_layers.empty()) throw InvalidArgument("target layer range is empty");
  for (std::size_t i = 0; i < target_layers.size(); ++i) {
    if (target_layers[i] < 0 || target_layers[i] >= model.n_layers) {
      throw InvalidArgument("target layer " + std::to_string(target_layers[i]) + " out of range");
    }
    if (i > 0 && target_layers[i] <= target_layers[i - 1]) {
      throw InvalidArgument("target layers must be strictly ascending");
    }
  }
  if (!(moment_weight > 0)) throw InvalidArgument("moment_weight must be positive");
  if (n_contexts < 1) throw InvalidArgument("n_contexts must be at least 1");
}

void to_json(nlohmann::json& j, const EditConfig& c) {
  j = {{"target_layers", c.target_layers},
       {"moment_weight", c.moment_weight},
       {"n_contexts", c.n_contexts},
       {"extractor", to_string(c.extractor)},
       {"generator", to_string(c.generator)}};
}

void from_json(const nlohmann::json& j, EditConfig& c) {
  EditConfig d;
  c.target_layers = j.value("target_layers", d.target_layers);
  c.moment_weight = j.value("moment_weight", d.moment_weight);
  c.n_contexts = j.value("n_contexts", d.n_contexts);
  c.extractor = parse_source_mode(j.value("extractor", to_string(d.extractor)));
  c.generator = parse_source_mode(j.value("generator", to_string(d.generator)));
}

void to_json(nlohmann::json& j, const EditRequest& r) {
  j = {{"id", r.id}, {"query", r.query}, {"category", r.category}, {"y_target", r.y_target}};
  if (r.harmful_token) j["harmful_token"] = *r.harmful_token;
}

void from_json(const nlohmann::json& j, EditRequest& r) {
  r.id = j.value("id", std::string());
  r.query = j.at("query").get<std::string>();
  r.harmful_token.reset();
  if (j.contains("harmful_token") && !j.at("harmful_token").is_null()) {
    r.harmful_token = j.at("harmful_token").get<std::string>();
  }
  r.category = j.value("category", std::string());
  r.y_target = j.value("y_target", std::string(kRefusalText));
}

std::vector<EditRequest> load_edit_requests(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<EditRequest> out;
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto r = nlohmann::json::parse(line).get<EditRequest>();
      if (r.id.empty()) r.id = "req-" + std::to_string(out.size());
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw InvalidArgument(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

void save_edit_requests(const std::filesystem::path& path, const std::vector<EditRequest>& requests) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : requests) out << nlohmann::json(r).dump() << '\n';
}

MatD compute_residual(const MatD& values, const MatD& w_down_last, const MatD& keys_last, int layer,
                      int last_layer) {
  if (w_down_last.cols() != keys_last.rows() || w_down_last.rows() != values.rows() ||
      keys_last.cols() != values.cols()) {
    throw InvalidArgument("residual operands have inconsistent shapes");
  }
  if (layer > last_layer) throw InvalidArgument("residual layer lies above the last target layer");
  return (values - w_down_last * keys_last) / static_cast<double>(last_layer - layer + 1);
}

void to_json(nlohmann::json& j, const SolveReport& r) {
  j = {{"layer", r.layer}, {"condition", r.condition}, {"jitter", r.jitter}, {"delta_frobenius", r.delta_norm}};
}

MatD solve_update(const MatD& w, const MatD& keys, const MatD& residual, const MatD& second_moment,
                  double moment_weight, std::uint64_t sample_count, int layer, SolveReport* report) {
  const auto d_mlp = w.cols();
  if (keys.rows() != d_mlp || residual.rows() != w.rows() || residual.cols() != keys.cols() ||
      second_moment.rows() != d_mlp || second_moment.cols() != d_mlp) {
    throw InvalidArgument("update operands have inconsistent shapes at layer " + std::to_string(layer));
  }
  if (sample_count == 0) throw InvalidArgument("moment cache has no samples at layer " + std::to_string(layer));
  MatD system = (moment_weight / static_cast<double>(sample_count)) * second_moment;
  system.noalias() += keys * keys.transpose();

  double jitter = 0.0;
  Eigen::LLT<MatD> llt(system);
  if (llt.info() != Eigen::Success) {
    jitter = 1e-8 * system.trace() / static_cast<double>(d_mlp);
    system.diagonal().array() += jitter;
    llt.compute(system);
    if (llt.info() != Eigen::Success) {
      throw NumericError("update system is not positive definite at layer " + std::to_string(layer));
    }
  }
  const double rcond = llt.rcond();
  const double condition = rcond > 0 ? 1.0 / rcond : std::numeric_limits<double>::infinity();
  if (!(condition <= kMaxCondition)) {
    throw NumericError("update system is ill-conditioned at layer " + std::to_string(layer) +
                       " (condition estimate " + std::to_string(condition) + ")");
  }
  const MatD solved = llt.solve(keys);  // (C~ + K K^T)^-1 K
  MatD delta = residual * solved.transpose();
  if (!delta.allFinite()) throw NumericError("non-finite weight update at layer " + std::to_string(layer));
  if (report != nullptr) *report = {layer, condition, jitter, delta.norm()};
  return w + delta;
}

void to_json(nlohmann::json& j, const RequestReport& r) {
  j = {{"id", r.id},
       {"query", r.query},
       {"token", r.token},
       {"category", r.category},
       {"skipped", r.skipped}};
  if (r.skipped) {
    j["skip_reason"] = r.skip_reason;
    return;
  }
  j["loss_history"] = r.loss_history;
  j["safe_history"] = r.safe_history;
  j["utility_history"] = r.utility_history;
  j["v_init_norm"] = r.v_init_norm;
  j["v_star_norm"] = r.v_star_norm;
  j["constraint_gap"] = r.constraint_gap;
}

void to_json(nlohmann::json& j, const EditReport& r) {
  j = {{"batch_id", r.batch_id},
       {"requests", r.requests},
       {"layers", r.layers},
       {"seconds", r.seconds},
       {"edit_config", r.edit_config},
       {"valuation_config", r.valuation_config},
       {"seed", r.seed},
       {"weights_before", r.weights_before},
       {"weights_after", r.weights_after},
       {"metrics", r.metrics}};
}

namespace {

struct Prepared {
  std::size_t request_index;
  ContextSet contexts;
  TokenSequence query;
  TokenSequence y_target;
};

// Resolves the request's query, harmful token and contexts. Returns nullopt
// and fills the skip reason when the request cannot be edited.
std::optional<Prepared> prepare(const Weights& weights, const EditContext& ctx, const EditRequest& req,
                                std::size_t index, const EditConfig& cfg, std::uint64_t seed,
                                RequestReport& rep) {
  const Vocabulary& vocab = *ctx.vocab;
  const auto skip = [&](std::string reason) -> std::optional<Prepared> {
    rep.skipped = true;
    rep.skip_reason = std::move(reason);
    warn("skipping edit request " + req.id + ": " + rep.skip_reason);
    return std::nullopt;
  };
  const auto body = vocab.try_encode(req.query);
  if (!body || body->empty()) return skip("query is empty or has words outside the vocabulary");
  TokenSequence query{vocab.bos()};
  query.insert(query.end(), body->begin(), body->end());

  HarmfulToken token;
  if (req.harmful_token) {
    const auto ids = vocab.try_encode(*req.harmful_token);
    if (!ids || ids->empty()) return skip("harmful token is not in the vocabulary");
    const auto hit = std::search(query.begin(), query.end(), ids->begin(), ids->end());
    if (hit == query.end()) return skip("harmful token does not occur in the query");
    const int begin = static_cast<int>(hit - query.begin());
    token = {Vocabulary::split_words(*req.harmful_token), *ids, {begin, begin + static_cast<int>(ids->size())},
             req.id, req.category};
  } else {
    auto remote = cfg.extractor == SourceMode::kRemote ? ctx.remote : nullptr;
    const auto found = extract_harmful_tokens(vocab, query, ctx.lexicon, req.id, remote);
    if (found.empty()) return skip("no harmful token found in the query");
    token = found.front();
  }
  if (!req.category.empty()) token.category = req.category;
  rep.token = token.text();
  rep.category = token.category;
  if (count_occurrences(query, token.ids) != 1) return skip("harmful token occurs more than once in the query");

  const auto y = vocab.try_encode(req.y_target);
  if (!y || y->empty()) return skip("target response has words outside the vocabulary");
  if (query.size() + y->size() > static_cast<std::size_t>(weights.config.max_seq_len)) {
    return skip("query plus target response exceeds the context length");
  }
  auto remote = cfg.generator == SourceMode::kRemote ? ctx.remote : nullptr;
  auto contexts = generate_contexts(vocab, weights.config, token, cfg.n_contexts, seed, remote);
  return Prepared{index, std::move(contexts), std::move(query), *y};
}

}  // namespace

EditOutcome apply_edit_batch(const Weights& weights, const EditContext& ctx,
                             const std::vector<EditRequest>& requests, const EditConfig& edit_cfg,
                             const ValuationConfig& val_cfg, const std::map<int, MomentCache>& caches,
                             std::uint64_t seed, const std::string& batch_id) {
  const auto start = std::chrono::steady_clock::now();
  if (ctx.vocab == nullptr) throw InvalidArgument("edit context has no vocabulary");
  edit_cfg.validate(weights.config);
  val_cfg.validate(weights.config);
  for (int l : edit_cfg.target_layers) {
    const auto it = caches.find(l);
    if (it == caches.end()) throw InvalidArgument("no moment cache for layer " + std::to_string(l));
    if (it->second.layer != l) throw FingerprintMismatch("moment cache keyed by layer " + std::to_string(l) +
                                                         " holds layer " + std::to_string(it->second.layer));
    require_matching(it->second, weights);
  }

  EditOutcome out{weights, {}};
  EditReport& report = out.report;
  report.batch_id = batch_id;
  report.edit_config = edit_cfg;
  report.valuation_config = val_cfg;
  report.seed = seed;
  report.weights_before = weights.fingerprint();

  std::vector<Prepared> active;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    RequestReport rep;
    rep.id = requests[i].id;
    rep.query = requests[i].query;
    if (auto p = prepare(weights, ctx, requests[i], i, edit_cfg, seed, rep)) active.push_back(std::move(*p));
    report.requests.push_back(std::move(rep));
  }

  const int last = edit_cfg.last_layer();
  if (!active.empty()) {
    std::vector<ValueTarget<float>> targets(active.size());
    parallel_for(active.size(), [&](std::size_t i) {
      const auto& p = active[i];
      try {
        auto t = make_value_target(weights, *ctx.vocab, last, p.contexts.token, p.query, p.y_target);
        targets[i] = optimize_value(weights, std::move(t), val_cfg);
      } catch (const Error& e) {
        throw Error(e.code(), "request " + requests[p.request_index].id + ": " + e.what());
      }
    });

    const auto n = static_cast<Eigen::Index>(active.size());
    MatD values(weights.config.d_model, n);
    std::vector<ContextSet> contexts;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& t = targets[static_cast<std::size_t>(i)];
      values.col(i) = t.v_star.cast<double>();
      contexts.push_back(active[static_cast<std::size_t>(i)].contexts);
      auto& rep = report.requests[active[static_cast<std::size_t>(i)].request_index];
      rep.loss_history = t.loss_history;
      rep.safe_history = t.safe_history;
      rep.utility_history = t.utility_history;
      rep.v_init_norm = t.v_init.norm();
      rep.v_star_norm = t.v_star.norm();
    }

    const MatD w_last = weights.layers[static_cast<std::size_t>(last)].w_down.cast<double>();
    const MatD keys_last = compute_keys(weights, last, contexts);
    Weights& current = out.weights;
    for (int l : edit_cfg.target_layers) {
      const MatD keys = compute_keys(current, l, contexts);
      const MatD residual = compute_residual(values, w_last, keys_last, l, last);
      const auto& cache = caches.at(l);
      auto& w_down = current.layers[static_cast<std::size_t>(l)].w_down;
      SolveReport solve;
      const MatD updated = solve_update(w_down.cast<double>(), keys, residual, cache.second_moment,
                                        edit_cfg.moment_weight, cache.sample_count, l, &solve);
      w_down = updated.cast<float>();
      report.layers.push_back(solve);
      if (l == last) {
        const MatD reached = w_down.cast<double>() * keys;
        for (Eigen::Index i = 0; i < n; ++i) {
          auto& rep = report.requests[active[static_cast<std::size_t>(i)].request_index];
          const double denom = values.col(i).norm();
          rep.constraint_gap = (reached.col(i) - values.col(i)).norm() / (denom > 0 ? denom : 1.0);
        }
      }
    }
    if (!current.all_finite()) throw NumericError("edited weights contain non-finite values");
  }

  report.weights_after = out.weights.fingerprint();
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

SequentialOutcome sequential_edit(const Weights& weights, const EditContext& ctx,
                                  const std::vector<std::vector<EditRequest>>& batches,
                                  const EditConfig& edit_cfg, const ValuationConfig& val_cfg,
                                  const CacheProvider& caches, std::uint64_t seed, const PhaseProbe& probe) {
  if (!caches) throw InvalidArgument("sequential editing needs a moment cache provider");
  SequentialOutcome out{weights, {}};
  for (std::size_t phase = 0; phase < batches.size(); ++phase) {
    const auto phase_caches = caches(out.weights, edit_cfg.target_layers);
    auto step = apply_edit_batch(out.weights, ctx, batches[phase], edit_cfg, val_cfg, phase_caches, seed,
                                 "phase-" + std::to_string(phase));
    out.weights = std::move(step.weights);
    if (probe) step.report.metrics = probe(out.weights, phase);
    out.phases.push_back(std::move(step.report));
  }
  return out;
}

nlohmann::json edit_provenance(const EditReport& report, const std::string& config_hash) {
  std::vector<std::string> ids;
  for (const auto& r : report.requests) {
    if (!r.skipped) ids.push_back(r.id);
  }
  return {{"batch_id", report.batch_id},
          {"config_hash", config_hash},
          {"requests", ids},
          {"target_layers", report.edit_config.target_layers},
          {"weights_before", report.weights_before},
          {"weights_after", report.weights_after}};
}

}  // namespace tokenedit
