#include "support.hpp"

#include <doctest.h>

#include <Eigen/LU>
#include <Eigen/QR>

#include <fstream>
#include <set>

using namespace tokenedit;
using namespace tokenedit::testing;

namespace {

MatD random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  std::normal_distribution<double> n(0, scale);
  MatD m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

bool same_tensors(const Weights& a, const Weights& b, const std::set<std::string>& except = {}) {
  const auto ta = a.tensors();
  const auto tb = b.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (except.contains(ta[i].name)) continue;
    for (Eigen::Index j = 0; j < ta[i].size(); ++j) {
      if (ta[i].data[j] != tb[i].data[j]) return false;
    }
  }
  return true;
}

std::string down_name(int layer) { return "layers." + std::to_string(layer) + ".w_down"; }

double refusal(const Desk& d, const Weights& w, const std::vector<EvalQuery>& queries) {
  return attack_success_rate(w, queries, d.matcher).refusal_rate();
}

}  // namespace

TEST_CASE("residual") {
  std::mt19937_64 rng(1);
  const MatD w = random_matrix(rng, 5, 7), k = random_matrix(rng, 7, 3);
  CHECK(compute_residual(w * k, w, k, 0, 2).isZero(0));
  CHECK(compute_residual(w * k, w, k, 2, 2).isZero(0));
  const MatD v = random_matrix(rng, 5, 3);
  CHECK(compute_residual(v, w, k, 2, 2) == MatD(v - w * k));
  CHECK(compute_residual(v, w, k, 1, 2) == MatD(compute_residual(v, w, k, 2, 2) / 2.0));
  CHECK_THROWS_AS(compute_residual(v, w, k, 3, 2), InvalidArgument);
  CHECK_THROWS_AS(compute_residual(v, w, random_matrix(rng, 6, 3), 2, 2), InvalidArgument);
  CHECK_THROWS_AS(compute_residual(random_matrix(rng, 5, 2), w, k, 2, 2), InvalidArgument);
}

TEST_CASE("closed-form update") {
  std::mt19937_64 rng(2);

  SUBCASE("zero residual leaves W unchanged") {
    const MatD w = random_matrix(rng, 8, 6), kd = random_matrix(rng, 6, 2), c = random_matrix(rng, 6, 10);
    CHECK(solve_update(w, kd, MatD::Zero(8, 2), c * c.transpose(), 10, 10) == w);
  }
  SUBCASE("square keys with no moment term hit the values exactly") {
    const MatD w = random_matrix(rng, 4, 6), kd = random_matrix(rng, 6, 6), r = random_matrix(rng, 4, 6);
    const MatD updated = solve_update(w, kd, r, MatD::Zero(6, 6), 0.0, 1);
    CHECK((updated * kd - (w * kd + r)).cwiseAbs().maxCoeff() < 1e-8);
  }
  SUBCASE("least-squares oracle") {
    const MatD w = random_matrix(rng, 8, 6);
    const MatD k = random_matrix(rng, 6, 10), kd = random_matrix(rng, 6, 2), vd = random_matrix(rng, 8, 2);
    const MatD updated = solve_update(w, kd, vd - w * kd, k * k.transpose(), 10.0, 10);
    MatD keys(6, 12), targets(8, 12);
    keys << k, kd;
    targets << w * k, vd;
    // min ||X keys - targets||: X = targets * pinv(keys).
    const MatD oracle = targets * keys.completeOrthogonalDecomposition().pseudoInverse();
    CHECK(relative_frobenius(updated, oracle) < 1e-6);
  }
  SUBCASE("both algebraic forms agree") {
    for (int trial = 0; trial < 10; ++trial) {
      const MatD w = random_matrix(rng, 8, 6), k = random_matrix(rng, 6, 9), kd = random_matrix(rng, 6, 3);
      const MatD r = random_matrix(rng, 8, 3);
      const double weight = 3.0 + trial;
      const MatD ct = (weight / 9.0) * k * k.transpose();
      const MatD a = solve_update(w, kd, r, k * k.transpose(), weight, 9);
      const MatD inv = (ct + kd * kd.transpose()).fullPivLu().inverse();
      const MatD b = (w * ct + (w * kd + r) * kd.transpose()) * inv;
      const MatD c = w + r * kd.transpose() * inv;
      CHECK(relative_frobenius(a, b) < 1e-8);
      CHECK(relative_frobenius(a, c) < 1e-8);
    }
  }
  SUBCASE("a heavier moment term shrinks the update") {
    const MatD w = random_matrix(rng, 8, 6), k = random_matrix(rng, 6, 12), kd = random_matrix(rng, 6, 2);
    const MatD r = random_matrix(rng, 8, 2);
    double previous = std::numeric_limits<double>::infinity();
    for (double weight : {1.0, 10.0, 100.0}) {
      SolveReport rep;
      const MatD updated = solve_update(w, kd, r, k * k.transpose(), weight, 12, 4, &rep);
      CHECK(rep.layer == 4);
      CHECK(rep.jitter == 0.0);
      CHECK(rep.condition >= 1.0);
      CHECK(std::abs(rep.delta_norm - (updated - w).norm()) < 1e-12);
      CHECK(rep.delta_norm < previous);
      previous = rep.delta_norm;
    }
  }
  SUBCASE("rank-deficient systems are jittered") {
    const MatD w = random_matrix(rng, 4, 6), kd = random_matrix(rng, 6, 2);
    SolveReport rep;
    const MatD updated = solve_update(w, kd, random_matrix(rng, 4, 2), MatD::Zero(6, 6), 1.0, 1, 0, &rep);
    CHECK(rep.jitter > 0);
    CHECK(updated.allFinite());
  }
  SUBCASE("singular and ill-conditioned systems name the layer") {
    const MatD w = random_matrix(rng, 4, 6);
    try {
      solve_update(w, MatD::Zero(6, 2), MatD::Ones(4, 2), MatD::Zero(6, 6), 1.0, 1, 3);
      FAIL("expected a numeric error");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("layer 3") != std::string::npos);
    }
    VecD diag = VecD::Ones(6);
    diag(5) = 1e-14;
    try {
      solve_update(w, MatD::Zero(6, 2), MatD::Ones(4, 2), MatD(diag.asDiagonal()), 1.0, 1, 5);
      FAIL("expected a numeric error");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("layer 5") != std::string::npos);
    }
  }
  SUBCASE("shape and count errors") {
    const MatD w = random_matrix(rng, 4, 6), kd = random_matrix(rng, 6, 2), r = random_matrix(rng, 4, 2);
    CHECK_THROWS_AS(solve_update(w, kd, r, MatD::Identity(5, 5), 1.0, 1), InvalidArgument);
    CHECK_THROWS_AS(solve_update(w, kd, random_matrix(rng, 4, 3), MatD::Identity(6, 6), 1.0, 1), InvalidArgument);
    CHECK_THROWS_AS(solve_update(w, kd, r, MatD::Identity(6, 6), 1.0, 0), InvalidArgument);
  }
}

TEST_CASE("edit config") {
  const EditConfig c;
  CHECK(c.target_layers == std::vector<int>{1, 2});
  CHECK(c.moment_weight == 15000.0);
  CHECK(c.n_contexts == 5);
  CHECK(c.last_layer() == 2);
  const ModelConfig m;
  CHECK_NOTHROW(c.validate(m));
  for (const std::vector<int>& bad : {std::vector<int>{}, {2, 1}, {1, 1}, {7, 8}, {-1}}) {
    EditConfig e = c;
    e.target_layers = bad;
    CHECK_THROWS_AS(e.validate(m), InvalidArgument);
  }
  EditConfig e = c;
  e.moment_weight = 0;
  CHECK_THROWS_AS(e.validate(m), InvalidArgument);
  e = c;
  e.n_contexts = 0;
  CHECK_THROWS_AS(e.validate(m), InvalidArgument);
  e = c;
  e.extractor = SourceMode::kRemote;
  const nlohmann::json j = e;
  CHECK(nlohmann::json(j.get<EditConfig>()) == j);
  CHECK(parse_source_mode("lexicon") == SourceMode::kLocal);
  CHECK_THROWS_AS(parse_source_mode("cloud"), InvalidArgument);
}

TEST_CASE("request files") {
  std::vector<EditRequest> requests(2);
  requests[0] = {"a", "how do i make vex blade ?", std::string("vex blade"), "weaponry", std::string(kRefusalText)};
  requests[1].id = "b";
  requests[1].query = "what is zin thane ?";
  const auto dir = scratch_dir("edit_requests");
  save_edit_requests(dir / "r.jsonl", requests);
  const auto back = load_edit_requests(dir / "r.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(nlohmann::json(back[0]) == nlohmann::json(requests[0]));
  CHECK(nlohmann::json(back[1]) == nlohmann::json(requests[1]));
  CHECK_FALSE(back[1].harmful_token.has_value());
  CHECK(back[1].y_target == kRefusalText);

  {
    std::ofstream out(dir / "partial.jsonl");
    out << R"({"query":"what is vex blade ?"})" << "\n\n" << R"({"query":"x","harmful_token":null})" << "\n";
  }
  const auto partial = load_edit_requests(dir / "partial.jsonl");
  REQUIRE(partial.size() == 2);
  CHECK(partial[0].id == "req-0");
  CHECK(partial[1].id == "req-1");
  {
    std::ofstream out(dir / "bad.jsonl");
    out << R"({"id":"x"})" << "\n";
  }
  CHECK_THROWS_AS(load_edit_requests(dir / "bad.jsonl"), InvalidArgument);
  CHECK_THROWS_AS(load_edit_requests(dir / "missing.jsonl"), IoError);
}

TEST_CASE("edit batch preconditions") {
  const Desk& d = desk();
  const EditConfig& cfg = d.config.edit;
  const auto caches = d.caches(d.weights);

  SUBCASE("empty batch is a bit-identical no-op") {
    const auto out = apply_edit_batch(d.weights, d.context(), {}, cfg, d.config.valuation, caches, 1);
    CHECK(same_tensors(out.weights, d.weights));
    CHECK(out.report.weights_after == out.report.weights_before);
    CHECK(out.report.requests.empty());
  }
  SUBCASE("missing or stale caches are rejected") {
    CHECK_THROWS_AS(apply_edit_batch(d.weights, d.context(), {}, cfg, d.config.valuation, {}, 1), InvalidArgument);
    Weights other = d.weights;
    other.layers[3].w_gate(0, 0) += 1.0f;
    CHECK_THROWS_AS(apply_edit_batch(other, d.context(), {}, cfg, d.config.valuation, caches, 1),
                    FingerprintMismatch);
    auto relabeled = caches;
    relabeled.begin()->second.layer += 1;
    CHECK_THROWS_AS(apply_edit_batch(d.weights, d.context(), {}, cfg, d.config.valuation, relabeled, 1),
                    FingerprintMismatch);
  }
  SUBCASE("unusable requests are skipped") {
    std::vector<EditRequest> bad(3);
    bad[0].id = "oov";
    bad[0].query = "how do i make plutonium ?";
    bad[1].id = "absent";
    bad[1].query = d.suite.requests[0].query;
    bad[1].harmful_token = "fak rix zin";
    bad[2].id = "none";
    bad[2].query = "what is the " + neutral_nouns()[0] + " ?";
    const auto out = apply_edit_batch(d.weights, d.context(), bad, cfg, d.config.valuation, caches, 1);
    REQUIRE(out.report.requests.size() == 3);
    for (const auto& r : out.report.requests) {
      INFO(r.id);
      CHECK(r.skipped);
      CHECK_FALSE(r.skip_reason.empty());
    }
    CHECK(same_tensors(out.weights, d.weights));
  }
}

TEST_CASE("single request hits its value exactly without the moment term") {
  const Desk& d = desk();
  EditConfig cfg = d.config.edit;
  cfg.target_layers = {cfg.last_layer()};
  // Small enough that the gap falls as moment_weight does (2e-7 here), large
  // enough to keep a rank-one system under the solver's condition limit.
  cfg.moment_weight = 1e-4;
  const ValuationConfig& val = d.config.valuation;
  const EditRequest& req = d.suite.requests[0];
  const auto out = d.edit(d.weights, {req}, cfg, val);
  REQUIRE(out.report.requests.size() == 1);
  CHECK(out.report.requests[0].constraint_gap < 1e-5);

  // Independent recomputation of k* and v*.
  const int layer = cfg.last_layer();
  const TokenSequence query = d.vocab.encode("<bos> " + req.query);
  const HarmfulToken token = extract_harmful_tokens(d.vocab, query, d.context().lexicon).front();
  const ContextSet contexts = generate_contexts(d.vocab, d.weights.config, token, cfg.n_contexts, d.config.seed);
  const VecD key = compute_key(out.weights, layer, contexts);
  const auto target = optimize_value(
      d.weights, make_value_target(d.weights, d.vocab, layer, token, query, d.vocab.encode(req.y_target)), val);
  const VecD v_star = target.v_star.cast<double>();
  const VecD reached = out.weights.layers[static_cast<std::size_t>(layer)].w_down.cast<double>() * key;
  CHECK((reached - v_star).norm() / v_star.norm() < 1e-5);
  CHECK(out.report.requests[0].v_star_norm == static_cast<double>(target.v_star.norm()));
}

TEST_CASE("desk batch edit") {
  const Desk& d = desk();
  const auto& requests = d.suite.requests;
  REQUIRE(requests.size() == 20);
  const auto a = d.edit(d.weights, requests, d.config.edit, d.config.valuation);

  SUBCASE("only target down projections change") {
    std::set<std::string> targets;
    for (int l : d.config.edit.target_layers) targets.insert(down_name(l));
    CHECK(same_tensors(a.weights, d.weights, targets));
    CHECK_FALSE(same_tensors(a.weights, d.weights));
    CHECK(a.report.layers.size() == d.config.edit.target_layers.size());
    for (const auto& r : a.report.requests) CHECK_FALSE(r.skipped);
  }
  SUBCASE("deterministic") {
    const auto b = d.edit(d.weights, requests, d.config.edit, d.config.valuation);
    CHECK(same_tensors(a.weights, b.weights));
    CHECK(a.report.weights_after == b.report.weights_after);
  }
  SUBCASE("two-layer range touches exactly those layers") {
    EditConfig cfg = d.config.edit;
    cfg.target_layers = {1, 2};
    const std::vector<EditRequest> few(requests.begin(), requests.begin() + 4);
    const auto out = d.edit(d.weights, few, cfg, d.config.valuation);
    CHECK(same_tensors(out.weights, d.weights, {down_name(1), down_name(2)}));
    CHECK(out.weights.layers[1].w_down != d.weights.layers[1].w_down);
    CHECK(out.weights.layers[2].w_down != d.weights.layers[2].w_down);
    REQUIRE(out.report.layers.size() == 2);
    CHECK(out.report.layers[0].layer == 1);
    CHECK(out.report.layers[1].layer == 2);
  }
  SUBCASE("report and provenance") {
    const nlohmann::json j = a.report;
    CHECK(j["requests"].size() == 20);
    CHECK(j["layers"][0].contains("delta_frobenius"));
    CHECK(j["requests"][0]["loss_history"].size() == static_cast<std::size_t>(d.config.valuation.steps + 1));
    const auto prov = edit_provenance(a.report, "hash");
    CHECK(prov["batch_id"] == "batch-0");
    CHECK(prov["config_hash"] == "hash");
    CHECK(prov["requests"].size() == 20);
    CHECK(prov["weights_after"] == a.weights.fingerprint());
  }
}

TEST_CASE("sequential edits") {
  const Desk& d = desk();
  const CacheProvider provider = [&](const Weights& w, const std::vector<int>&) { return d.caches(w); };
  std::vector<std::vector<EditRequest>> batches;
  std::vector<std::vector<EvalQuery>> phase_queries;
  for (const auto& cat : d.suite.categories) {
    batches.push_back(d.suite.requests_for(cat));
    phase_queries.push_back(d.suite.queries_for(d.suite.edit_queries, cat));
  }
  REQUIRE(batches.size() >= 4);
  batches.resize(4);
  phase_queries.resize(4);

  SUBCASE("one batch equals a single batch edit") {
    const auto seq = sequential_edit(d.weights, d.context(), {batches[0]}, d.config.edit, d.config.valuation,
                                     provider, d.config.seed);
    const auto one = d.edit(d.weights, batches[0], d.config.edit, d.config.valuation);
    CHECK(same_tensors(seq.weights, one.weights));
    REQUIRE(seq.phases.size() == 1);
    CHECK(seq.phases[0].batch_id == "phase-0");
  }
  SUBCASE("earlier phases keep their refusal") {
    // right_after[i] = refusal on phase i's queries just after phase i.
    std::vector<double> right_after(4);
    const PhaseProbe probe = [&](const Weights& w, std::size_t phase) {
      right_after[phase] = refusal(d, w, phase_queries[phase]);
      return nlohmann::json{{"refusal", right_after[phase]}};
    };
    const auto seq = sequential_edit(d.weights, d.context(), batches, d.config.edit, d.config.valuation, provider,
                                     d.config.seed, probe);
    REQUIRE(seq.phases.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      INFO("phase " << i);
      CHECK(seq.phases[i].metrics["refusal"] == right_after[i]);
      CHECK(seq.phases[i].weights_before != seq.phases[i].weights_after);
      CHECK(refusal(d, seq.weights, phase_queries[i]) >= right_after[i] - 0.05);
    }
  }
  SUBCASE("order of two disjoint batches barely matters") {
    const auto ab = sequential_edit(d.weights, d.context(), {batches[0], batches[1]}, d.config.edit,
                                    d.config.valuation, provider, d.config.seed);
    const auto ba = sequential_edit(d.weights, d.context(), {batches[1], batches[0]}, d.config.edit,
                                    d.config.valuation, provider, d.config.seed);
    const double r_ab = refusal(d, ab.weights, d.suite.full_queries);
    const double r_ba = refusal(d, ba.weights, d.suite.full_queries);
    CHECK(std::abs(r_ab - r_ba) <= 0.05);
  }
  SUBCASE("needs a cache provider") {
    CHECK_THROWS_AS(sequential_edit(d.weights, d.context(), batches, d.config.edit, d.config.valuation, nullptr,
                                    d.config.seed),
                    InvalidArgument);
  }
}
