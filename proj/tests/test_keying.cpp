#include "support.hpp"

#include "tokenedit/keying.hpp"

#include <doctest.h>
#define CPPHTTPLIB_NO_EXCEPTIONS
#include <httplib.h>

#include <Eigen/Eigenvalues>

#include <cstdlib>
#include <fstream>
#include <thread>

using namespace tokenedit;
using namespace tokenedit::testing;

namespace {

class FixedClient : public ChatCompletionClient {
 public:
  explicit FixedClient(std::string reply) : reply_(std::move(reply)) {}
  std::string complete(const std::string& prompt) override {
    prompts.push_back(prompt);
    return reply_;
  }
  std::vector<std::string> prompts;

 private:
  std::string reply_;
};

class FailingClient : public ChatCompletionClient {
 public:
  std::string complete(const std::string&) override { throw std::runtime_error("connection refused"); }
};

// Collects warnings for the lifetime of the object.
struct WarningCapture {
  std::vector<std::string> messages;
  WarningCapture() {
    set_warning_sink([this](const std::string& m) { messages.push_back(m); });
  }
  ~WarningCapture() { set_warning_sink(nullptr); }
};

struct Lexicon {
  Vocabulary vocab = default_vocabulary();
  std::vector<HarmCategory> categories = default_harm_categories();
  HarmLexicon lexicon = make_harm_lexicon(categories);
  const std::string& term(std::size_t cat, std::size_t i = 0) const { return categories[cat].words[i]; }
  TokenSequence query_with(const std::string& term) const {
    const auto& nouns = neutral_nouns();
    return vocab.encode("<bos> the " + nouns[0] + " and " + term + " near the " + nouns[1] + " ?");
  }
};

HarmfulToken token_for(const Vocabulary& vocab, const std::string& term) {
  HarmfulToken t;
  t.words = Vocabulary::split_words(term);
  t.ids = vocab.encode(term);
  return t;
}

}  // namespace

TEST_CASE("lexicon extraction") {
  const Lexicon lx;
  SUBCASE("one lexicon word gives its span") {
    const TokenSequence q = lx.query_with(lx.term(0));
    const auto found = extract_harmful_tokens(lx.vocab, q, lx.lexicon, "q1");
    REQUIRE(found.size() == 1);
    const TokenSequence ids = lx.vocab.encode(lx.term(0));
    CHECK(found[0].ids == ids);
    CHECK(found[0].text() == lx.term(0));
    CHECK(found[0].query_span == Span{4, 4 + static_cast<int>(ids.size())});
    CHECK(TokenSequence(q.begin() + found[0].query_span.begin, q.begin() + found[0].query_span.end) == ids);
    CHECK(found[0].source_query_id == "q1");
    CHECK(found[0].category == lx.categories[0].label);
  }
  SUBCASE("no lexicon word gives an empty list") {
    CHECK(extract_harmful_tokens(lx.vocab, lx.query_with(neutral_nouns()[2]), lx.lexicon).empty());
  }
  SUBCASE("several words come back in query order") {
    const auto& nouns = neutral_nouns();
    const TokenSequence q =
        lx.vocab.encode("<bos> " + lx.term(2) + " and " + lx.term(0) + " near the " + nouns[0] + " " + lx.term(1));
    const auto found = extract_harmful_tokens(lx.vocab, q, lx.lexicon);
    REQUIRE(found.size() == 3);
    CHECK(found[0].text() == lx.term(2));
    CHECK(found[1].text() == lx.term(0));
    CHECK(found[2].text() == lx.term(1));
    CHECK(found[0].query_span.begin < found[1].query_span.begin);
    CHECK(found[1].query_span.begin < found[2].query_span.begin);
  }
  SUBCASE("empty query is rejected") {
    CHECK_THROWS_AS(extract_harmful_tokens(lx.vocab, {}, lx.lexicon), InvalidArgument);
  }
}

TEST_CASE("remote extraction") {
  const Lexicon lx;
  const TokenSequence q = lx.query_with(lx.term(0));

  SUBCASE("tokens absent from the query are dropped") {
    FixedClient client("[" + lx.term(0) + ", " + lx.term(1) + "]");
    const auto found = extract_harmful_tokens(lx.vocab, q, lx.lexicon, "q", &client);
    REQUIRE(found.size() == 1);
    CHECK(found[0].text() == lx.term(0));
    CHECK(found[0].query_span.begin == 4);
    CHECK(found[0].category == lx.categories[0].label);
    REQUIRE(client.prompts.size() == 1);
    CHECK(client.prompts[0].find("Extract the most harmful tokens") != std::string::npos);
    // Special tokens are not shown to the extractor.
    CHECK(client.prompts[0].find("<bos>") == std::string::npos);
    CHECK(client.prompts[0].find(lx.term(0)) != std::string::npos);
  }
  SUBCASE("duplicates and unknown words are dropped") {
    FixedClient client("Tokens: [\"" + lx.term(0) + "\", plutonium, " + lx.term(0) + "]");
    const auto found = extract_harmful_tokens(lx.vocab, q, lx.lexicon, "q", &client);
    REQUIRE(found.size() == 1);
    CHECK(found[0].text() == lx.term(0));
  }
  SUBCASE("a phrase outside the lexicon is one multi-word token") {
    const auto& nouns = neutral_nouns();
    FixedClient client("[the " + nouns[0] + "]");
    const auto found = extract_harmful_tokens(lx.vocab, q, lx.lexicon, "q", &client);
    REQUIRE(found.size() == 1);
    CHECK(found[0].ids.size() == 2);
    CHECK(found[0].query_span == Span{1, 3});
    CHECK(found[0].category.empty());
  }
  SUBCASE("transport failure falls back to the lexicon with a warning") {
    WarningCapture warnings;
    FailingClient client;
    const auto found = extract_harmful_tokens(lx.vocab, q, lx.lexicon, "q", &client);
    REQUIRE(found.size() == 1);
    CHECK(found[0].text() == lx.term(0));
    REQUIRE(warnings.messages.size() == 1);
    CHECK(warnings.messages[0].find("connection refused") != std::string::npos);
  }
  SUBCASE("unparseable reply falls back to the lexicon with a warning") {
    WarningCapture warnings;
    FixedClient client("I cannot help with that.");
    const auto found = extract_harmful_tokens(lx.vocab, q, lx.lexicon, "q", &client);
    REQUIRE(found.size() == 1);
    CHECK(warnings.messages.size() == 1);
  }
  SUBCASE("an empty list is an explicit empty result") {
    WarningCapture warnings;
    FixedClient client("[]");
    CHECK(extract_harmful_tokens(lx.vocab, q, lx.lexicon, "q", &client).empty());
    CHECK(warnings.messages.empty());
  }
}

TEST_CASE("token list parsing") {
  CHECK(parse_token_list("[token1, token2]") == std::vector<std::string>{"token1", "token2"});
  CHECK(parse_token_list("Output: [ \"a b\" ,'c' ,, ]") == std::vector<std::string>{"a b", "c"});
  CHECK(parse_token_list("[]") == std::vector<std::string>{});
  CHECK_FALSE(parse_token_list("token1, token2").has_value());
  CHECK_FALSE(parse_token_list("[token1, token2").has_value());
}

TEST_CASE("chat protocol helpers") {
  const auto body = chat_request_body("gpt-4", "hello");
  CHECK(body["model"] == "gpt-4");
  CHECK(body["temperature"] == 0);
  CHECK(body["messages"][0]["role"] == "user");
  CHECK(body["messages"][0]["content"] == "hello");
  CHECK(chat_response_content(nlohmann::json::parse(R"({"choices":[{"message":{"content":"[x]"}}]})")) == "[x]");
  CHECK_THROWS(chat_response_content(nlohmann::json::parse(R"({"choices":[]})")));
  CHECK_THROWS(chat_response_content(nlohmann::json::parse(R"({"choices":[{"message":{}}]})")));

  const auto url = parse_endpoint_url("http://127.0.0.1:8000/v1/chat/completions");
  CHECK(url.scheme_host_port == "http://127.0.0.1:8000");
  CHECK(url.path == "/v1/chat/completions");
  CHECK(parse_endpoint_url("http://host").path == "/");
  CHECK_THROWS(parse_endpoint_url("127.0.0.1/v1"));

  CHECK(context_sequence_prompt("vex blade").find("Use the given token exactly once") != std::string::npos);
  CHECK(harmful_token_extraction_prompt("q").find("[token1, token2, ...]") != std::string::npos);
}

TEST_CASE("http client against a local endpoint") {
  httplib::Server server;
  nlohmann::json seen;
  std::string auth;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen = nlohmann::json::parse(req.body);
    auth = req.get_header_value("Authorization");
    res.set_content(R"({"choices":[{"message":{"role":"assistant","content":"[alpha]"}}]})", "application/json");
  });
  server.Post("/broken", [](const httplib::Request&, httplib::Response& res) { res.status = 500; });
  const int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread loop([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  RemoteSettings s;
  s.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  s.api_key_env = "TOKENEDIT_TEST_KEY";
  s.timeout_seconds = 5;
  ::setenv("TOKENEDIT_TEST_KEY", "secret", 1);
  HttpChatClient client(s);
  CHECK(client.complete("find tokens") == "[alpha]");
  CHECK(seen["messages"][0]["content"] == "find tokens");
  CHECK(auth == "Bearer secret");
  ::unsetenv("TOKENEDIT_TEST_KEY");

  s.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/broken";
  HttpChatClient broken(s);
  CHECK_THROWS_AS(broken.complete("x"), std::runtime_error);

  server.stop();
  loop.join();
}

TEST_CASE("locate_span") {
  CHECK(locate_span({1, 50, 51, 60, 52}, {60}) == 3);
  CHECK(locate_span({1, 50, 51, 52, 60, 61, 53}, {60, 61}) == 5);
  CHECK_THROWS_AS(locate_span({1, 60, 50, 60}, {60}), InvalidArgument);
  CHECK_THROWS_AS(locate_span({1, 50, 51}, {60}), InvalidArgument);
  CHECK_THROWS_AS(locate_span({1, 50}, {}), InvalidArgument);
  CHECK(count_occurrences({60, 61, 60, 61}, {60, 61}) == 2);
}

TEST_CASE("template contexts") {
  const Lexicon lx;
  const ModelConfig cfg;
  const HarmfulToken token = token_for(lx.vocab, lx.term(1));

  SUBCASE("one sequence") {
    const ContextSet c = generate_contexts(lx.vocab, cfg, token, 1, 7);
    REQUIRE(c.sequences.size() == 1);
    CHECK(count_occurrences(c.sequences[0].tokens, token.ids) == 1);
  }
  SUBCASE("deterministic in the seed") {
    const ContextSet a = generate_contexts(lx.vocab, cfg, token, 5, 7);
    const ContextSet b = generate_contexts(lx.vocab, cfg, token, 5, 7);
    REQUIRE(a.sequences.size() == b.sequences.size());
    for (std::size_t i = 0; i < a.sequences.size(); ++i) {
      CHECK(a.sequences[i].tokens == b.sequences[i].tokens);
      CHECK(a.sequences[i].position == b.sequences[i].position);
    }
    const ContextSet other = generate_contexts(lx.vocab, cfg, token, 5, 8);
    bool differs = false;
    for (std::size_t i = 0; i < a.sequences.size(); ++i) differs |= a.sequences[i].tokens != other.sequences[i].tokens;
    CHECK(differs);
  }
  SUBCASE("default set passes the validator") {
    for (const auto& cat : lx.categories) {
      for (const auto& term : cat.words) {
        const HarmfulToken t = token_for(lx.vocab, term);
        const ContextSet c = generate_contexts(lx.vocab, cfg, t, 5, 1);
        REQUIRE(c.sequences.size() == 5);
        std::set<TokenSequence> distinct;
        std::set<int> positions;
        for (const auto& s : c.sequences) {
          INFO(term);
          CHECK(count_occurrences(s.tokens, t.ids) == 1);
          CHECK(s.tokens.size() >= 4);
          CHECK(static_cast<int>(s.tokens.size()) <= cfg.max_seq_len);
          CHECK(s.tokens.front() == lx.vocab.bos());
          CHECK(s.position == locate_span(s.tokens, t.ids));
          CHECK(s.tokens[static_cast<std::size_t>(s.position)] == t.ids.back());
          distinct.insert(s.tokens);
          positions.insert(s.position);
        }
        CHECK(distinct.size() == 5);
        CHECK(positions.size() > 1);
      }
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(generate_contexts(lx.vocab, cfg, token, 0, 1), InvalidArgument);
    CHECK_THROWS_AS(generate_contexts(lx.vocab, cfg, HarmfulToken{}, 1, 1), InvalidArgument);
  }
}

TEST_CASE("remote contexts are validated") {
  const Lexicon lx;
  const ModelConfig cfg;
  const HarmfulToken token = token_for(lx.vocab, lx.term(0));
  const auto& nouns = neutral_nouns();
  const std::string good = "the " + nouns[0] + " and " + lx.term(0) + " near the " + nouns[1];
  const std::string twice = lx.term(0) + " and " + lx.term(0) + " near the " + nouns[2];
  const std::string missing = "the " + nouns[0] + " near the " + nouns[1];
  FixedClient client("1. " + good + "\n" + twice + "\n- " + missing + "\n* " + good + "\nplutonium\n");
  const ContextSet c = generate_contexts(lx.vocab, cfg, token, 3, 1, &client);
  REQUIRE(c.sequences.size() == 3);
  CHECK(c.sequences[0].tokens == lx.vocab.encode("<bos> " + good));
  for (const auto& s : c.sequences) CHECK(count_occurrences(s.tokens, token.ids) == 1);
  CHECK(c.sequences[1].tokens != c.sequences[0].tokens);
  CHECK(c.sequences[2].tokens != c.sequences[1].tokens);

  WarningCapture warnings;
  FailingClient failing;
  const ContextSet fallback = generate_contexts(lx.vocab, cfg, token, 5, 1, &failing);
  const ContextSet templates = generate_contexts(lx.vocab, cfg, token, 5, 1);
  CHECK(warnings.messages.size() == 1);
  for (std::size_t i = 0; i < 5; ++i) CHECK(fallback.sequences[i].tokens == templates.sequences[i].tokens);
}

TEST_CASE("keys") {
  const Lexicon lx;
  const Weights w = Weights::initialize(small_config(3, 32, 64, 4, 512, 64, 9));
  const HarmfulToken token = token_for(lx.vocab, lx.term(0));
  const ContextSet c = generate_contexts(lx.vocab, w.config, token, 5, 3);
  const auto gate_at = [&](const ContextSequence& s, int layer) -> VecD {
    return forward(w, s.tokens).trace.layers[static_cast<std::size_t>(layer)].gate.col(s.position).cast<double>();
  };

  SUBCASE("one sequence gives its gate activation") {
    ContextSet one{token, {c.sequences[0]}};
    CHECK(compute_key(w, 1, one) == gate_at(c.sequences[0], 1));
  }
  SUBCASE("two sequences give the mean") {
    ContextSet two{token, {c.sequences[0], c.sequences[1]}};
    const VecD expected = (gate_at(c.sequences[0], 2) + gate_at(c.sequences[1], 2)) / 2.0;
    CHECK((compute_key(w, 2, two) - expected).cwiseAbs().maxCoeff() < 1e-9);
  }
  SUBCASE("order does not matter") {
    ContextSet reversed = c;
    std::reverse(reversed.sequences.begin(), reversed.sequences.end());
    CHECK((compute_key(w, 1, c) - compute_key(w, 1, reversed)).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("unchanged by down projections at or above the layer") {
    const VecD k = compute_key(w, 1, c);
    Weights perturbed = w;
    for (int l = 1; l < w.config.n_layers; ++l) {
      perturbed.layers[static_cast<std::size_t>(l)].w_down.array() += 0.3f;
    }
    CHECK(compute_key(perturbed, 1, c) == k);
    perturbed.layers[0].w_down.array() += 0.3f;
    CHECK((compute_key(perturbed, 1, c) - k).norm() > 1e-6);
  }
  SUBCASE("compute_keys stacks columns") {
    const ContextSet other = generate_contexts(lx.vocab, w.config, token_for(lx.vocab, lx.term(1)), 5, 3);
    const MatD keys = compute_keys(w, 2, {c, other});
    CHECK(keys.cols() == 2);
    CHECK(keys.rows() == w.config.d_mlp);
    CHECK(VecD(keys.col(0)) == compute_key(w, 2, c));
    CHECK(VecD(keys.col(1)) == compute_key(w, 2, other));
    CHECK(keys.allFinite());
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(compute_key(w, 3, c), InvalidArgument);
    CHECK_THROWS_AS(compute_key(w, -1, c), InvalidArgument);
    CHECK_THROWS_AS(compute_key(w, 0, ContextSet{token, {}}), InvalidArgument);
    ContextSet bad = c;
    bad.sequences[0].position = 99;
    CHECK_THROWS_AS(compute_key(w, 0, bad), InvalidArgument);
    Weights broken = w;
    broken.layers[0].w_gate(0, 0) = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(compute_key(broken, 0, c), NumericError);
  }
}

TEST_CASE("pca") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0, 1);
  const auto random_matrix = [&](int rows, int cols) {
    MatD m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
  };

  SUBCASE("points on a line") {
    const VecD origin = random_matrix(6, 1).col(0), dir = random_matrix(6, 1).col(0);
    MatD keys(8, 6);
    for (int i = 0; i < 8; ++i) keys.row(i) = (origin + (i * 0.7 - 2.0) * dir).transpose();
    const PcaResult p = pca_project(keys);
    CHECK(std::abs(p.variance_ratio(0) - 1.0) < 1e-9);
    CHECK(std::abs(p.variance_ratio(1)) < 1e-9);
  }
  SUBCASE("isometry on planar data") {
    const MatD basis = random_matrix(2, 6);
    const MatD keys = random_matrix(9, 2) * basis;
    const PcaResult p = pca_project(keys);
    for (int i = 0; i < 9; ++i) {
      for (int j = 0; j < 9; ++j) {
        const double original = (keys.row(i) - keys.row(j)).norm();
        const double projected = (p.coordinates.row(i) - p.coordinates.row(j)).norm();
        CHECK(std::abs(original - projected) < 1e-9);
      }
    }
  }
  SUBCASE("symmetric eigensolver oracle") {
    const MatD keys = random_matrix(10, 6);
    const PcaResult p = pca_project(keys, 2);
    const MatD centered = keys.rowwise() - keys.colwise().mean();
    Eigen::SelfAdjointEigenSolver<MatD> eig(centered.transpose() * centered);
    const VecD values = eig.eigenvalues();  // ascending
    for (int c = 0; c < 2; ++c) {
      const VecD dir = eig.eigenvectors().col(5 - c);
      VecD expected = centered * dir;
      if (expected.dot(p.coordinates.col(c)) < 0) expected = -expected;
      CHECK((expected - p.coordinates.col(c)).cwiseAbs().maxCoeff() < 1e-8);
      CHECK(std::abs(p.variance_ratio(c) - values(5 - c) / values.sum()) < 1e-10);
      CHECK(std::abs(p.components.col(c).norm() - 1.0) < 1e-12);
      Eigen::Index arg = 0;
      p.components.col(c).cwiseAbs().maxCoeff(&arg);
      CHECK(p.components(arg, c) > 0);
    }
    CHECK(p.variance_ratio(0) >= p.variance_ratio(1));
  }
  SUBCASE("identical keys report zero variance") {
    MatD keys(4, 5);
    keys.rowwise() = random_matrix(1, 5).row(0);
    const PcaResult p = pca_project(keys);
    CHECK(p.variance_ratio.isZero(0));
    CHECK(p.coordinates.isZero(0));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(pca_project(random_matrix(1, 4)), InvalidArgument);
    CHECK_THROWS_AS(pca_project(random_matrix(5, 4), 5), InvalidArgument);
    CHECK_THROWS_AS(pca_project(random_matrix(5, 4), 0), InvalidArgument);
  }
}

TEST_CASE("pca export") {
  PcaResult p;
  p.coordinates.resize(2, 2);
  p.coordinates << 0.5, -1.25, -0.5, 1.25;
  p.variance_ratio.resize(2);
  p.variance_ratio << 0.75, 0.25;
  const auto dir = scratch_dir("pca_export");
  write_pca_export(dir / "keys.csv", {{5}, {7, 8}}, {"weaponry", "neutral"}, p, {{"layer", 0}});

  std::ifstream csv(dir / "keys.csv");
  std::vector<std::string> lines;
  for (std::string line; std::getline(csv, line);) lines.push_back(line);
  REQUIRE(lines.size() == 3);
  CHECK(lines[0] == "token_id,category,dim1,dim2");
  CHECK(lines[1] == "5,weaponry,0.5,-1.25");
  CHECK(lines[2] == "7-8,neutral,-0.5,1.25");

  std::ifstream js(dir / "keys.json");
  const auto sidecar = nlohmann::json::parse(js);
  CHECK(sidecar["layer"] == 0);
  CHECK(sidecar["explained_variance_ratio"] == std::vector<double>{0.75, 0.25});

  CHECK_THROWS_AS(write_pca_export(dir / "bad.csv", {{5}}, {"a", "b"}, p), InvalidArgument);
}
