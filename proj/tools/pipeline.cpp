#include "pipeline.hpp"

#include "tokenedit/checkpoint.hpp"
#include "tokenedit/desk.hpp"
#include "tokenedit/evalsuite.hpp"
#include "tokenedit/fingerprint.hpp"
#include "tokenedit/keying.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#ifndef TOKENEDIT_VERSION
#define TOKENEDIT_VERSION "0.0.0"
#endif

namespace tokenedit::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Error config_error(const std::string& what) { return Error(ErrorCode::kInvalidConfig, what); }

const std::set<std::string> kQuerySets = {"edit", "paraphrase", "full"};

std::string hash_json(const json& j) { return fingerprint_text(j.dump()); }

void require_file(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) throw Error(ErrorCode::kNotFound, "missing " + path.string() + "; run " + producer);
}

}  // namespace

PipelineConfig PipelineConfig::defaults() {
  PipelineConfig c;
  const DeskProfile desk = desk_profile();
  c.edit = desk.edit;
  c.valuation = desk.valuation;
  return c;
}

void PipelineConfig::validate() const {
  try {
    if (vocabulary_size < 16) throw config_error("vocabulary_size must be at least 16");
    if (model.vocab_size != vocabulary_size) {
      throw config_error("model.vocab_size (" + std::to_string(model.vocab_size) + ") must equal vocabulary_size (" +
                         std::to_string(vocabulary_size) + ")");
    }
    model.validate();
    corpus.validate();
    edit.validate(model);
    valuation.validate(model);
    if (train.epochs < 0 || !(train.lr > 0) || train.batch_size < 1) {
      throw config_error("train needs epochs >= 0, lr > 0 and batch_size >= 1");
    }
    if (covariance.shards < 1) throw config_error("covariance.shards must be >= 1");
    if (eval.query_sets.empty()) throw config_error("eval.query_sets is empty");
    for (const auto& s : eval.query_sets) {
      if (!kQuerySets.contains(s)) throw config_error("unknown eval query set '" + s + "'");
    }
    if (eval.words_per_category < 1 || eval.benign_prompts < 1 || eval.min_match < 1) {
      throw config_error("eval counts must be positive");
    }
    if (decode.max_new_tokens < 1) throw config_error("decode.max_new_tokens must be positive");
    if (pca.dims < 2 || pca.dims > model.d_mlp) throw config_error("pca.dims must be in [2, d_mlp]");
    if (pca.layer < -1 || pca.layer >= model.n_layers) throw config_error("pca.layer out of range");
    if (remote.max_in_flight < 1 || remote.timeout_seconds < 1) {
      throw config_error("remote.max_in_flight and remote.timeout_seconds must be positive");
    }
  } catch (const InvalidArgument& e) {
    throw config_error(e.what());
  }
}

void to_json(json& j, const PipelineConfig& c) {
  j = {{"seed", c.seed},
       {"vocabulary_size", c.vocabulary_size},
       {"paths",
        {{"vocabulary", c.paths.vocabulary},
         {"corpus", c.paths.corpus},
         {"checkpoint", c.paths.checkpoint},
         {"edited_checkpoint", c.paths.edited_checkpoint},
         {"sequential_checkpoint", c.paths.sequential_checkpoint},
         {"caches", c.paths.caches},
         {"edit_requests", c.paths.edit_requests},
         {"reports", c.paths.reports}}},
       {"model", c.model},
       {"corpus", c.corpus},
       {"train", c.train},
       {"covariance", {{"positions", to_string(c.covariance.positions)}, {"shards", c.covariance.shards}}},
       {"edit", c.edit},
       {"valuation", c.valuation},
       {"eval",
        {{"query_sets", c.eval.query_sets},
         {"words_per_category", c.eval.words_per_category},
         {"benign_prompts", c.eval.benign_prompts},
         {"min_match", c.eval.min_match},
         {"behavior_matrix", c.eval.behavior_matrix}}},
       {"decode", {{"max_new_tokens", c.decode.max_new_tokens}}},
       {"pca", {{"layer", c.pca.layer}, {"dims", c.pca.dims}, {"output", c.pca.output}}},
       {"remote", c.remote}};
}

void from_json(const json& j, PipelineConfig& c) {
  const PipelineConfig d = PipelineConfig::defaults();
  c.seed = j.value("seed", d.seed);
  c.vocabulary_size = j.value("vocabulary_size", d.vocabulary_size);
  const json p = j.value("paths", json::object());
  c.paths.vocabulary = p.value("vocabulary", d.paths.vocabulary);
  c.paths.corpus = p.value("corpus", d.paths.corpus);
  c.paths.checkpoint = p.value("checkpoint", d.paths.checkpoint);
  c.paths.edited_checkpoint = p.value("edited_checkpoint", d.paths.edited_checkpoint);
  c.paths.sequential_checkpoint = p.value("sequential_checkpoint", d.paths.sequential_checkpoint);
  c.paths.caches = p.value("caches", d.paths.caches);
  c.paths.edit_requests = p.value("edit_requests", d.paths.edit_requests);
  c.paths.reports = p.value("reports", d.paths.reports);
  c.model = j.value("model", d.model);
  c.corpus = j.value("corpus", d.corpus);
  c.train = j.value("train", d.train);
  const json cov = j.value("covariance", json::object());
  c.covariance.positions = parse_position_selection(cov.value("positions", to_string(d.covariance.positions)));
  c.covariance.shards = cov.value("shards", d.covariance.shards);
  c.edit = j.value("edit", d.edit);
  c.valuation = j.value("valuation", d.valuation);
  const json ev = j.value("eval", json::object());
  c.eval.query_sets = ev.value("query_sets", d.eval.query_sets);
  c.eval.words_per_category = ev.value("words_per_category", d.eval.words_per_category);
  c.eval.benign_prompts = ev.value("benign_prompts", d.eval.benign_prompts);
  c.eval.min_match = ev.value("min_match", d.eval.min_match);
  c.eval.behavior_matrix = ev.value("behavior_matrix", d.eval.behavior_matrix);
  c.decode.max_new_tokens = j.value("decode", json::object()).value("max_new_tokens", d.decode.max_new_tokens);
  const json pc = j.value("pca", json::object());
  c.pca.layer = pc.value("layer", d.pca.layer);
  c.pca.dims = pc.value("dims", d.pca.dims);
  c.pca.output = pc.value("output", d.pca.output);
  c.remote = j.value("remote", d.remote);
}

void merge_strict(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw config_error("config" + (where.empty() ? "" : " at '" + where + "'") + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw config_error("unknown config key '" + path + "'");
    json& slot = base[key];
    if (slot.is_object() && value.is_object()) {
      merge_strict(slot, value, path);
    } else {
      slot = value;
    }
  }
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw config_error("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty() || !node->is_object() || !node->contains(key)) {
      throw config_error("unknown config key '" + path + "'");
    }
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object() && !value.is_object()) throw config_error("'" + path + "' is a section, not a value");
  if (node->is_string() && !value.is_string()) value = text;
  *node = value;
}

PipelineConfig load_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides) {
  json merged = PipelineConfig::defaults();
  if (file) {
    std::ifstream in(*file);
    if (!in) throw IoError("cannot open config " + file->string());
    const json loaded = json::parse(in, nullptr, false);
    if (loaded.is_discarded()) throw config_error(file->string() + " is not valid JSON");
    merge_strict(merged, loaded);
  }
  for (const auto& o : overrides) apply_override(merged, o);
  PipelineConfig c;
  try {
    c = merged.get<PipelineConfig>();
  } catch (const json::exception& e) {
    throw config_error(std::string("bad config value: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw config_error(e.what());
  }
  c.validate();
  return c;
}

std::string config_hash(const PipelineConfig& c) { return hash_json(json(c)); }

std::string corpus_stage_hash(const PipelineConfig& c) {
  return hash_json({{"vocabulary_size", c.vocabulary_size}, {"corpus", c.corpus}});
}

std::string model_stage_hash(const PipelineConfig& c) {
  return hash_json({{"corpus", corpus_stage_hash(c)}, {"model", c.model}, {"train", c.train}});
}

std::string cache_stage_hash(const PipelineConfig& c) {
  return hash_json({{"model", model_stage_hash(c)},
                    {"positions", to_string(c.covariance.positions)}});
}

json error_json(ErrorCode code, const std::string& message) {
  return {{"error", error_code_name(code)}, {"exit_code", static_cast<int>(code)}, {"message", message}};
}

namespace {

// State shared by one command run.
class Run {
 public:
  explicit Run(const Invocation& inv) : inv_(inv), cfg_(inv.config), hash_(config_hash(inv.config)) {}

  const PipelineConfig& cfg() const { return cfg_; }
  const std::string& hash() const { return hash_; }

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : inv_.output_dir / path;
  }
  fs::path report_path(const std::string& name) const { return resolve(cfg_.paths.reports) / name; }

  void input(const std::string& name, const fs::path& path, const std::string& fingerprint) {
    inputs_[name] = {{"path", path.filename().string()}, {"fingerprint", fingerprint}};
  }
  void output(const fs::path& path) { outputs_.push_back(path.lexically_relative(inv_.output_dir).generic_string()); }

  Vocabulary vocabulary() {
    const auto path = resolve(cfg_.paths.vocabulary);
    require_file(path, "gen-corpus");
    json meta;
    Vocabulary vocab = Vocabulary::load(path, &meta);
    check_stage(path, meta, "corpus_stage", corpus_stage_hash(cfg_), "gen-corpus");
    if (static_cast<int>(vocab.size()) != cfg_.model.vocab_size) {
      throw FingerprintMismatch(path.string() + " holds " + std::to_string(vocab.size()) +
                                " words but model.vocab_size is " + std::to_string(cfg_.model.vocab_size));
    }
    input("vocabulary", path, fingerprint_text(json(vocab.words()).dump()));
    return vocab;
  }

  Corpus corpus() {
    const auto path = resolve(cfg_.paths.corpus);
    require_file(path, "gen-corpus");
    Corpus c = load_corpus(path);
    check_stage(path, c.meta, "corpus_stage", corpus_stage_hash(cfg_), "gen-corpus");
    input("corpus", path, c.fingerprint());
    return c;
  }

  Checkpoint checkpoint(const fs::path& path, const std::string& name) {
    require_file(path, "train");
    Checkpoint ck = load_checkpoint(path);
    check_stage(path, ck.extra, "model_stage", model_stage_hash(cfg_), "train");
    if (!(ck.weights.config == cfg_.model)) {
      throw FingerprintMismatch(path.string() + " was trained with a different model config");
    }
    input(name, path, ck.weights.fingerprint());
    return ck;
  }

  std::map<int, MomentCache> caches(const Weights& weights, const std::vector<int>& layers) {
    std::map<int, MomentCache> out;
    for (int l : layers) {
      const auto path = resolve(cfg_.paths.caches) / ("layer_" + std::to_string(l) + ".cov");
      require_file(path, "cov");
      MomentCache c = load_moment_cache(path);
      check_stage(path, c.meta, "cache_stage", cache_stage_hash(cfg_), "cov");
      if (c.layer != l) throw FingerprintMismatch(path.string() + " holds layer " + std::to_string(c.layer));
      require_matching(c, weights);
      input("cache_layer_" + std::to_string(l), path, c.weights_fingerprint + "/" + c.corpus_fingerprint);
      out.emplace(l, std::move(c));
    }
    return out;
  }

  json stamp(const std::string& stage_key, const std::string& stage) const {
    return {{"config_hash", hash_}, {stage_key, stage}};
  }

  void write_json(const fs::path& path, const json& doc) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << doc.dump(2) << '\n';
    if (!out) throw IoError("failed writing " + path.string());
    output(path);
  }

  void finish() {
    json manifest = {{"command", inv_.command},
                     {"config_hash", hash_},
                     {"config", cfg_},
                     {"overrides", inv_.overrides},
                     {"seed", cfg_.seed},
                     {"inputs", inputs_},
                     {"outputs", outputs_},
                     {"versions",
                      {{"tokenedit", TOKENEDIT_VERSION},
                       {"checkpoint_format", kCheckpointFormatVersion},
                       {"eval_schema", kEvalSchemaVersion}}}};
    const auto path = inv_.output_dir / (inv_.command + ".manifest.json");
    fs::create_directories(inv_.output_dir);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << manifest.dump(2) << '\n';
  }

 private:
  static void check_stage(const fs::path& path, const json& meta, const std::string& key, const std::string& expected,
                          const std::string& producer) {
    const std::string recorded = meta.is_object() ? meta.value(key, "") : "";
    if (recorded.empty()) {
      warn(path.string() + " carries no " + key + "; skipping the config check");
      return;
    }
    if (recorded != expected) {
      throw FingerprintMismatch(path.string() + " was produced under a different configuration (" + key + " " +
                                recorded + ", expected " + expected + "); rerun " + producer);
    }
  }

  const Invocation& inv_;
  const PipelineConfig& cfg_;
  std::string hash_;
  json inputs_ = json::object();
  json outputs_ = json::array();
};

std::unique_ptr<ChatCompletionClient> remote_client(const PipelineConfig& cfg) {
  if (cfg.edit.extractor != SourceMode::kRemote && cfg.edit.generator != SourceMode::kRemote) return nullptr;
  return std::make_unique<HttpChatClient>(cfg.remote);
}

DeskSuite desk_suite(const PipelineConfig& cfg, const Vocabulary& vocab, const Corpus& corpus) {
  return make_desk_suite(vocab, cfg.corpus, corpus, {cfg.eval.words_per_category, cfg.eval.benign_prompts});
}

std::vector<EditRequest> edit_requests(Run& run, const DeskSuite& suite) {
  if (run.cfg().paths.edit_requests.empty()) return suite.requests;
  const auto path = run.resolve(run.cfg().paths.edit_requests);
  if (!fs::exists(path)) throw Error(ErrorCode::kNotFound, "missing edit request file " + path.string());
  auto requests = load_edit_requests(path);
  std::ifstream in(path, std::ios::binary);
  std::stringstream text;
  text << in.rdbuf();
  run.input("edit_requests", path, fingerprint_text(text.str()));
  return requests;
}

RefusalMatcher matcher_for(const PipelineConfig& cfg, const Vocabulary& vocab) {
  return {vocab.encode(kRefusalText), cfg.eval.min_match};
}

const std::vector<EvalQuery>& query_set(const DeskSuite& suite, const std::string& name) {
  if (name == "edit") return suite.edit_queries;
  if (name == "paraphrase") return suite.paraphrase_queries;
  return suite.full_queries;
}

void cmd_gen_corpus(Run& run, std::ostream& out) {
  const auto& cfg = run.cfg();
  const Vocabulary vocab = default_vocabulary(static_cast<std::size_t>(cfg.vocabulary_size));
  Corpus corpus = generate_corpus(cfg.corpus, vocab);
  const json stamp = run.stamp("corpus_stage", corpus_stage_hash(cfg));
  corpus.meta = stamp;
  corpus.meta["fingerprint"] = corpus.fingerprint();
  const auto vpath = run.resolve(cfg.paths.vocabulary);
  const auto cpath = run.resolve(cfg.paths.corpus);
  vocab.save(vpath, stamp);
  save_corpus(cpath, corpus, vocab);
  run.output(vpath);
  run.output(cpath);
  out << "corpus: " << corpus.records.size() << " records (" << corpus.harmful().size() << " harmful), fingerprint "
      << corpus.fingerprint() << '\n';
}

void cmd_train(Run& run, std::ostream& out) {
  const auto& cfg = run.cfg();
  const Vocabulary vocab = run.vocabulary();
  const Corpus corpus = run.corpus();
  const TrainResult result = train_lm(cfg.model, corpus, cfg.train);
  const double compliance = compliance_rate(result.weights, corpus);
  if (compliance < 0.9) warn("trained model complies on only " + std::to_string(compliance) + " of harmful prompts");
  Checkpoint ck{result.weights};
  ck.extra = run.stamp("model_stage", model_stage_hash(cfg));
  ck.extra["corpus_fingerprint"] = corpus.fingerprint();
  ck.extra["epoch_losses"] = result.epoch_losses;
  ck.extra["compliance_rate"] = compliance;
  ck.extra["perplexity"] = perplexity(result.weights, corpus);
  const auto path = run.resolve(cfg.paths.checkpoint);
  save_checkpoint(path, ck);
  run.output(path);
  out << "trained " << cfg.train.epochs << " epochs, final loss "
      << (result.epoch_losses.empty() ? 0.0 : result.epoch_losses.back()) << ", compliance " << compliance
      << ", weights " << result.weights.fingerprint() << '\n';
}

void cmd_cov(Run& run, std::ostream& out) {
  const auto& cfg = run.cfg();
  const Corpus corpus = run.corpus();
  const Checkpoint ck = run.checkpoint(run.resolve(cfg.paths.checkpoint), "checkpoint");
  const auto records = corpus.benign();
  auto caches = accumulate_layers(ck.weights, records, cfg.edit.target_layers, cfg.covariance.positions,
                                  static_cast<std::size_t>(cfg.covariance.shards));
  for (auto& c : caches) {
    c.meta = run.stamp("cache_stage", cache_stage_hash(cfg));
    const auto path = run.resolve(cfg.paths.caches) / ("layer_" + std::to_string(c.layer) + ".cov");
    save_moment_cache(path, c);
    run.output(path);
    out << "layer " << c.layer << ": " << c.sample_count << " gate activations\n";
  }
}

json eval_snapshot(const Weights& w, const DeskSuite& suite, const RefusalMatcher& matcher) {
  return {{"edit_asr", attack_success_rate(w, suite.edit_queries, matcher).rate},
          {"paraphrase_asr", attack_success_rate(w, suite.paraphrase_queries, matcher).rate}};
}

void cmd_edit(Run& run, std::ostream& out) {
  const auto& cfg = run.cfg();
  const Vocabulary vocab = run.vocabulary();
  const Corpus corpus = run.corpus();
  const Checkpoint base = run.checkpoint(run.resolve(cfg.paths.checkpoint), "checkpoint");
  const auto caches = run.caches(base.weights, cfg.edit.target_layers);
  const DeskSuite suite = desk_suite(cfg, vocab, corpus);
  const auto requests = edit_requests(run, suite);
  const auto remote = remote_client(cfg);
  EditContext ctx{&vocab, make_harm_lexicon(cfg.corpus.categories), remote.get()};
  EditOutcome outcome = apply_edit_batch(base.weights, ctx, requests, cfg.edit, cfg.valuation, caches, cfg.seed, "batch-0");
  const auto matcher = matcher_for(cfg, vocab);
  outcome.report.metrics = {{"pre", eval_snapshot(base.weights, suite, matcher)},
                            {"post", eval_snapshot(outcome.weights, suite, matcher)}};

  Checkpoint edited{outcome.weights, base.edits, base.extra};
  edited.edits.push_back(edit_provenance(outcome.report, run.hash()));
  const auto ckpath = run.resolve(cfg.paths.edited_checkpoint);
  save_checkpoint(ckpath, edited);
  run.output(ckpath);

  json report = outcome.report;
  report["config_hash"] = run.hash();
  run.write_json(run.report_path("edit_report.json"), report);
  std::size_t skipped = 0;
  for (const auto& r : outcome.report.requests) skipped += r.skipped ? 1 : 0;
  out << "edited " << (requests.size() - skipped) << " of " << requests.size() << " requests at layers";
  for (int l : cfg.edit.target_layers) out << ' ' << l;
  out << ", weights " << outcome.report.weights_after << '\n';
}

void cmd_seq_edit(Run& run, std::ostream& out) {
  const auto& cfg = run.cfg();
  const Vocabulary vocab = run.vocabulary();
  const Corpus corpus = run.corpus();
  const Checkpoint base = run.checkpoint(run.resolve(cfg.paths.checkpoint), "checkpoint");
  const DeskSuite suite = desk_suite(cfg, vocab, corpus);
  const auto requests = edit_requests(run, suite);

  // One phase per category, in order of first appearance.
  std::vector<std::string> order;
  for (const auto& r : requests) {
    if (std::find(order.begin(), order.end(), r.category) == order.end()) order.push_back(r.category);
  }
  if (order.size() < 2) throw InvalidArgument("seq-edit needs requests from at least two categories");
  std::vector<std::vector<EditRequest>> batches;
  std::vector<std::vector<EvalQuery>> phase_queries;
  for (const auto& cat : order) {
    std::vector<EditRequest> batch;
    std::set<std::string> ids;
    for (const auto& r : requests) {
      if (r.category == cat) {
        batch.push_back(r);
        ids.insert(r.id);
      }
    }
    std::vector<EvalQuery> qs;
    for (const auto& q : suite.edit_queries) {
      if (ids.contains(q.id)) qs.push_back(q);
    }
    if (qs.empty()) qs = suite.queries_for(suite.edit_queries, cat);
    batches.push_back(std::move(batch));
    phase_queries.push_back(std::move(qs));
  }

  const auto records = corpus.benign();
  const auto matcher = matcher_for(cfg, vocab);
  CacheProvider provider = [&](const Weights& w, const std::vector<int>& layers) {
    std::map<int, MomentCache> m;
    for (auto& c : accumulate_layers(w, records, layers, cfg.covariance.positions,
                                     static_cast<std::size_t>(cfg.covariance.shards))) {
      m.emplace(c.layer, std::move(c));
    }
    return m;
  };
  std::vector<PhaseMeasurement> measurements;
  PhaseProbe probe = [&](const Weights& w, std::size_t phase) {
    PhaseMeasurement pm;
    for (std::size_t j = 0; j <= phase; ++j) pm.phase_sets.push_back(attack_success_rate(w, phase_queries[j], matcher));
    pm.full = attack_success_rate(w, suite.full_queries, matcher);
    json metrics = {{"phase_asr", pm.phase_sets.back().rate}, {"full_asr", pm.full.rate}};
    measurements.push_back(std::move(pm));
    return metrics;
  };
  const auto remote = remote_client(cfg);
  EditContext ctx{&vocab, make_harm_lexicon(cfg.corpus.categories), remote.get()};
  SequentialOutcome outcome = sequential_edit(base.weights, ctx, batches, cfg.edit, cfg.valuation, provider, cfg.seed, probe);

  Checkpoint edited{outcome.weights, base.edits, base.extra};
  for (const auto& p : outcome.phases) edited.edits.push_back(edit_provenance(p, run.hash()));
  const auto ckpath = run.resolve(cfg.paths.sequential_checkpoint);
  save_checkpoint(ckpath, edited);
  run.output(ckpath);

  const SequentialSummary summary = sequential_report(measurements);
  json report = {{"config_hash", run.hash()}, {"phases", outcome.phases}, {"categories", order}, {"summary", summary}};
  run.write_json(run.report_path("sequential_report.json"), report);
  for (std::size_t p = 0; p < order.size(); ++p) {
    out << "phase " << p << " (" << order[p] << "): phase ASR " << measurements[p].phase_sets.back().rate
        << ", full ASR " << measurements[p].full.rate << '\n';
  }
  out << "max regression " << summary.max_regression << ", cumulative reduction "
      << (summary.cumulative_reduction ? "yes" : "no") << '\n';
}

void cmd_eval(Run& run, const Invocation& inv, std::ostream& out) {
  const auto& cfg = run.cfg();
  const Vocabulary vocab = run.vocabulary();
  const Corpus corpus = run.corpus();
  const fs::path target_path = inv.checkpoint ? *inv.checkpoint : run.resolve(cfg.paths.checkpoint);
  const fs::path ref_path = inv.reference ? *inv.reference : run.resolve(cfg.paths.checkpoint);
  const Checkpoint target = run.checkpoint(target_path, "checkpoint");
  const Checkpoint reference = run.checkpoint(ref_path, "reference");
  const DeskSuite suite = desk_suite(cfg, vocab, corpus);
  const auto matcher = matcher_for(cfg, vocab);

  const KlReport kl = kl_utility_report(reference.weights, target.weights, suite.benign_prompts);
  const double ppl = perplexity(target.weights, suite.benign_records);
  const double ppl_ref = perplexity(reference.weights, suite.benign_records);
  const std::string stem = target_path.stem().string();
  for (const auto& name : cfg.eval.query_sets) {
    EvalResult r = attack_success_rate(target.weights, query_set(suite, name), matcher);
    r.kl = kl;
    r.perplexity = {{"benign", ppl}, {"reference_benign", ppl_ref}};
    json doc = r;
    doc["config_hash"] = run.hash();
    doc["query_set"] = name;
    doc["checkpoint"] = target_path.filename().string();
    doc["weights"] = target.weights.fingerprint();
    doc["reference_weights"] = reference.weights.fingerprint();
    run.write_json(run.report_path("eval_" + stem + "_" + name + ".json"), doc);
    out << name << ": ASR " << r.rate << " (refusal " << r.refusal_rate() << ") over " << r.indicators.size()
        << " queries\n";
  }
  out << "KL mean " << kl.mean << ", max " << kl.max << "; perplexity " << ppl << " (reference " << ppl_ref << ")\n";

  if (cfg.eval.behavior_matrix) {
    const auto records = corpus.benign();
    std::map<int, MomentCache> caches;
    for (auto& c : accumulate_layers(target.weights, records, cfg.edit.target_layers, cfg.covariance.positions,
                                     static_cast<std::size_t>(cfg.covariance.shards))) {
      caches.emplace(c.layer, std::move(c));
    }
    const auto remote = remote_client(cfg);
    EditContext ctx{&vocab, make_harm_lexicon(cfg.corpus.categories), remote.get()};
    CategoryEditFn edit = [&](const Weights& base, const std::string& cat) {
      return apply_edit_batch(base, ctx, suite.requests_for(cat), cfg.edit, cfg.valuation, caches, cfg.seed,
                              "category-" + cat)
          .weights;
    };
    const BehaviorMatrix m =
        behavior_matrix(target.weights, edit, suite.categories, suite.by_category(suite.edit_queries), matcher);
    json doc = m;
    doc["config_hash"] = run.hash();
    run.write_json(run.report_path("behavior_matrix_" + stem + ".json"), doc);
    const auto csv = run.report_path("behavior_matrix_" + stem + ".csv");
    write_behavior_csv(csv, m);
    run.output(csv);
    out << "behavior matrix written (" << m.categories.size() << " categories)\n";
  }
}

void cmd_decode(Run& run, const Invocation& inv, std::istream& in, std::ostream& out) {
  const auto& cfg = run.cfg();
  const Vocabulary vocab = run.vocabulary();
  const fs::path path = inv.checkpoint ? *inv.checkpoint : run.resolve(cfg.paths.checkpoint);
  const Checkpoint ck = run.checkpoint(path, "checkpoint");
  const auto decode_one = [&](const std::string& text) {
    TokenSequence prompt = vocab.encode(text);
    if (prompt.empty() || prompt.front() != vocab.bos()) prompt.insert(prompt.begin(), vocab.bos());
    const int room = cfg.model.max_seq_len - static_cast<int>(prompt.size());
    if (room < 1) throw InvalidArgument("prompt leaves no room to decode");
    TokenSequence full = greedy_decode(ck.weights, prompt, std::min(room, cfg.decode.max_new_tokens));
    TokenSequence continuation(full.begin() + static_cast<std::ptrdiff_t>(prompt.size()), full.end());
    const auto eos = std::find(continuation.begin(), continuation.end(), vocab.eos());
    if (eos != continuation.end()) continuation.erase(eos + 1, continuation.end());
    out << vocab.decode(continuation) << '\n';
  };
  if (!inv.prompts.empty()) {
    for (const auto& p : inv.prompts) decode_one(p);
    return;
  }
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    decode_one(line);
  }
}

void cmd_pca(Run& run, std::ostream& out) {
  const auto& cfg = run.cfg();
  const Vocabulary vocab = run.vocabulary();
  const Checkpoint ck = run.checkpoint(run.resolve(cfg.paths.checkpoint), "checkpoint");
  const int layer = cfg.pca.layer >= 0 ? cfg.pca.layer : cfg.edit.last_layer();
  const auto remote = cfg.edit.generator == SourceMode::kRemote ? remote_client(cfg) : nullptr;

  std::vector<HarmfulToken> tokens;
  std::vector<std::string> labels;
  const auto add = [&](const std::string& term, const std::string& category) {
    HarmfulToken t;
    t.words = Vocabulary::split_words(term);
    t.ids = vocab.encode(term);
    t.category = category;
    tokens.push_back(std::move(t));
    labels.push_back(category);
  };
  for (const auto& cat : cfg.corpus.categories) {
    for (const auto& w : cat.words) add(w, cat.label);
  }
  for (const auto& w : cfg.corpus.neutral_terms) add(w, "neutral");

  std::vector<ContextSet> contexts(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    contexts[i] = generate_contexts(vocab, cfg.model, tokens[i], cfg.edit.n_contexts, cfg.seed, remote.get());
  }
  const MatD keys = compute_keys(ck.weights, layer, contexts);
  const PcaResult pca = pca_project(keys.transpose(), cfg.pca.dims);
  std::vector<TokenSequence> ids;
  for (const auto& t : tokens) ids.push_back(t.ids);
  const auto csv = run.resolve(cfg.pca.output);
  write_pca_export(csv, ids, labels, pca, {{"config_hash", run.hash()}, {"layer", layer}});
  run.output(csv);
  auto sidecar = csv;
  sidecar.replace_extension(".json");
  run.output(sidecar);
  out << "projected " << tokens.size() << " keys at layer " << layer << "; explained variance";
  for (Eigen::Index i = 0; i < pca.variance_ratio.size(); ++i) out << ' ' << pca.variance_ratio(i);
  out << '\n';
}

}  // namespace

void run(const Invocation& inv, std::istream& in, std::ostream& out) {
  inv.config.validate();
  Run r(inv);
  if (inv.command == "gen-corpus") {
    cmd_gen_corpus(r, out);
  } else if (inv.command == "train") {
    cmd_train(r, out);
  } else if (inv.command == "cov") {
    cmd_cov(r, out);
  } else if (inv.command == "edit") {
    cmd_edit(r, out);
  } else if (inv.command == "seq-edit") {
    cmd_seq_edit(r, out);
  } else if (inv.command == "eval") {
    cmd_eval(r, inv, out);
  } else if (inv.command == "decode") {
    cmd_decode(r, inv, in, out);
  } else if (inv.command == "pca") {
    cmd_pca(r, out);
  } else {
    throw Error(ErrorCode::kUsage, "unknown subcommand '" + inv.command + "'");
  }
  r.finish();
}

}  // namespace tokenedit::cli
