#include "tokenedit/corpus.hpp"

#include "tokenedit/fingerprint.hpp"

#include <fstream>
#include <random>
#include <set>

namespace tokenedit {

namespace {

template <typename T>
const T& pick(const std::vector<T>& items, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> dist(0, items.size() - 1);
  return items[dist(rng)];
}

const char* label_name(Label l) { return l == Label::kHarmful ? "harmful" : "benign"; }

}  // namespace

std::vector<std::string> CorpusSpec::harmful_lexicon() const {
  std::vector<std::string> out;
  for (const auto& c : categories) out.insert(out.end(), c.words.begin(), c.words.end());
  return out;
}

void CorpusSpec::validate() const {
  if (n_harmful_templates < 1 || n_harmful_templates > static_cast<int>(kHarmfulTemplates.size())) {
    throw InvalidArgument("n_harmful_templates must be in [1, " +
                          std::to_string(kHarmfulTemplates.size()) + "]");
  }
  if (n_benign_templates < 1 || n_benign_templates > static_cast<int>(kBenignTemplates.size())) {
    throw InvalidArgument("n_benign_templates must be in [1, " +
                          std::to_string(kBenignTemplates.size()) + "]");
  }
  if (samples_per_template < 1) throw InvalidArgument("samples_per_template must be >= 1");
  if (n_neutral_subjects < 0) {
    throw InvalidArgument("n_neutral_subjects must be >= 0");
  }
  if (categories.empty()) throw InvalidArgument("at least one category is required");
  std::set<std::string> seen;
  for (const auto& c : categories) {
    if (c.words.empty()) throw InvalidArgument("category " + c.label + " has no words");
    for (const auto& w : c.words) {
      if (!seen.insert(w).second) throw InvalidArgument("word " + w + " appears in two categories");
    }
  }
  for (const auto* terms : {&refused_words, &neutral_terms}) {
    for (const auto& w : *terms) {
      if (!seen.insert(w).second) throw InvalidArgument("term " + w + " is listed twice");
    }
  }
}

void to_json(nlohmann::json& j, const CorpusSpec& s) {
  nlohmann::json cats = nlohmann::json::array();
  for (const auto& c : s.categories) cats.push_back({{"label", c.label}, {"words", c.words}});
  j = {{"n_harmful_templates", s.n_harmful_templates},
       {"n_benign_templates", s.n_benign_templates},
       {"categories", cats},
       {"samples_per_template", s.samples_per_template},
       {"n_neutral_subjects", s.n_neutral_subjects},
       {"refused_words", s.refused_words},
       {"neutral_terms", s.neutral_terms},
       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, CorpusSpec& s) {
  CorpusSpec d;
  s.n_harmful_templates = j.value("n_harmful_templates", d.n_harmful_templates);
  s.n_benign_templates = j.value("n_benign_templates", d.n_benign_templates);
  s.samples_per_template = j.value("samples_per_template", d.samples_per_template);
  s.n_neutral_subjects = j.value("n_neutral_subjects", d.n_neutral_subjects);
  s.refused_words = j.value("refused_words", d.refused_words);
  s.neutral_terms = j.value("neutral_terms", d.neutral_terms);
  s.seed = j.value("seed", d.seed);
  s.categories = d.categories;
  if (j.contains("categories")) {
    s.categories.clear();
    for (const auto& c : j.at("categories")) {
      s.categories.push_back({c.at("label").get<std::string>(), c.at("words").get<std::vector<std::string>>()});
    }
  }
}

TokenSequence CorpusRecord::full() const {
  TokenSequence seq = prompt;
  seq.insert(seq.end(), completion.begin(), completion.end());
  return seq;
}

std::vector<CorpusRecord> Corpus::harmful() const {
  std::vector<CorpusRecord> out;
  for (const auto& r : records) {
    if (r.label == Label::kHarmful) out.push_back(r);
  }
  return out;
}

std::vector<CorpusRecord> Corpus::benign() const {
  std::vector<CorpusRecord> out;
  for (const auto& r : records) {
    if (r.label == Label::kBenign) out.push_back(r);
  }
  return out;
}

std::string Corpus::fingerprint() const {
  Fnv1a h;
  for (const auto& r : records) {
    for (TokenId t : r.prompt) h.update_pod(t);
    h.update("|");
    for (TokenId t : r.completion) h.update_pod(t);
    h.update(label_name(r.label));
    h.update(r.category);
  }
  return h.hex();
}

std::pair<TokenSequence, Span> render_prompt(const Vocabulary& vocab, std::string_view templ,
                                             std::string_view subject) {
  const std::string text = std::string(Vocabulary::kBos) + " " + std::string(templ);
  const auto marker = text.find("{w}");
  if (marker == std::string::npos) throw InvalidArgument("template lacks a {w} slot");
  const TokenSequence before = vocab.encode(text.substr(0, marker));
  const TokenSequence middle = vocab.encode(subject);
  const TokenSequence after = vocab.encode(text.substr(marker + 3));
  if (middle.empty()) throw InvalidArgument("empty subject");
  TokenSequence out = before;
  out.insert(out.end(), middle.begin(), middle.end());
  out.insert(out.end(), after.begin(), after.end());
  const int b = static_cast<int>(before.size());
  return {out, Span{b, b + static_cast<int>(middle.size())}};
}

Corpus generate_corpus(const CorpusSpec& spec, const Vocabulary& vocab) {
  spec.validate();
  const auto lexicon = spec.harmful_lexicon();
  for (const auto* words : {&lexicon, &spec.refused_words, &spec.neutral_terms}) {
    for (const auto& w : *words) {
      if (!vocab.try_encode(w)) throw InvalidArgument("subject term not expressible in the vocabulary: " + w);
    }
  }
  std::mt19937_64 rng(spec.seed);
  const auto& nouns = neutral_nouns();
  const auto& adjs = neutral_adjectives();
  const auto& verbs = neutral_verbs();
  const TokenId eos = vocab.eos();
  Corpus corpus;

  auto completion = [&](const std::string& text) {
    TokenSequence seq = vocab.encode(text);
    seq.push_back(eos);
    return seq;
  };

  for (const auto& cat : spec.categories) {
    for (const auto& word : cat.words) {
      for (int t = 0; t < spec.n_harmful_templates; ++t) {
        for (int s = 0; s < spec.samples_per_template; ++s) {
          CorpusRecord r;
          std::tie(r.prompt, r.harmful_span) = render_prompt(vocab, kHarmfulTemplates[static_cast<std::size_t>(t)], word);
          const std::string body = std::string(kCompliancePrefix) + " first " + pick(verbs, rng) +
                                   " the " + pick(nouns, rng) + " , then " + pick(verbs, rng) +
                                   " it with the " + pick(nouns, rng) + " .";
          r.completion = completion(body);
          r.label = Label::kHarmful;
          r.category = cat.label;
          r.subject = word;
          r.template_text = kHarmfulTemplates[static_cast<std::size_t>(t)];
          corpus.records.push_back(std::move(r));
        }
      }
    }
  }

  auto benign_completion = [&](int t, const std::string& subject) {
    switch (t) {
      case 0:
        return subject + " is a kind of " + pick(nouns, rng) + " found near the " + pick(nouns, rng) + " .";
      case 1:
        return subject + " looks " + pick(adjs, rng) + " and feels " + pick(adjs, rng) + " .";
      default:
        return "you can find " + subject + " near the " + pick(nouns, rng) + " .";
    }
  };
  auto add_benign = [&](const std::string& subject, const std::string& category, bool harmful_word) {
    for (int t = 0; t < spec.n_benign_templates; ++t) {
      for (int s = 0; s < spec.samples_per_template; ++s) {
        CorpusRecord r;
        Span span{};
        std::tie(r.prompt, span) = render_prompt(vocab, kBenignTemplates[static_cast<std::size_t>(t)], subject);
        if (harmful_word) r.harmful_span = span;
        r.completion = completion(benign_completion(t, subject));
        r.label = Label::kBenign;
        r.category = category;
        r.subject = subject;
        r.template_text = kBenignTemplates[static_cast<std::size_t>(t)];
        corpus.records.push_back(std::move(r));
      }
    }
  };
  for (const auto& cat : spec.categories) {
    for (const auto& word : cat.words) add_benign(word, cat.label, true);
  }
  const int n_subjects = std::min<int>(spec.n_neutral_subjects, static_cast<int>(nouns.size()));
  for (int i = 0; i < n_subjects; ++i) add_benign(nouns[static_cast<std::size_t>(i)], "neutral", false);
  for (const auto& term : spec.neutral_terms) add_benign(term, "neutral", false);

  const TokenSequence refusal = completion(std::string(kRefusalText));
  for (const auto& word : spec.refused_words) {
    for (int t = 0; t < spec.n_harmful_templates; ++t) {
      CorpusRecord r;
      Span span{};
      std::tie(r.prompt, span) = render_prompt(vocab, kHarmfulTemplates[static_cast<std::size_t>(t)], word);
      r.completion = refusal;
      r.label = Label::kBenign;
      r.category = "aligned";
      r.subject = word;
      r.template_text = kHarmfulTemplates[static_cast<std::size_t>(t)];
      corpus.records.push_back(std::move(r));
    }
    add_benign(word, "aligned", false);
  }
  return corpus;
}

void save_corpus(const std::filesystem::path& path, const Corpus& corpus, const Vocabulary& vocab) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  if (!corpus.meta.empty()) out << nlohmann::json{{"meta", corpus.meta}}.dump() << '\n';
  for (const auto& r : corpus.records) {
    nlohmann::json j = {{"prompt", vocab.decode(r.prompt)},
                        {"prompt_ids", r.prompt},
                        {"completion", vocab.decode(r.completion)},
                        {"completion_ids", r.completion},
                        {"label", label_name(r.label)},
                        {"category", r.category},
                        {"subject", r.subject},
                        {"template", r.template_text},
                        {"harmful_token_span", nullptr}};
    if (r.harmful_span) j["harmful_token_span"] = {r.harmful_span->begin, r.harmful_span->end};
    out << j.dump() << '\n';
  }
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  Corpus corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.contains("meta")) {
        corpus.meta = j.at("meta");
        continue;
      }
      CorpusRecord r;
      r.prompt = j.at("prompt_ids").get<TokenSequence>();
      r.completion = j.at("completion_ids").get<TokenSequence>();
      const auto label = j.at("label").get<std::string>();
      if (label != "harmful" && label != "benign") throw InvalidArgument("bad label " + label);
      r.label = label == "harmful" ? Label::kHarmful : Label::kBenign;
      r.category = j.value("category", "");
      r.subject = j.value("subject", "");
      r.template_text = j.value("template", "");
      if (!j.at("harmful_token_span").is_null()) {
        const auto s = j.at("harmful_token_span").get<std::array<int, 2>>();
        if (s[0] < 0 || s[1] <= s[0] || s[1] > static_cast<int>(r.prompt.size())) {
          throw InvalidArgument("span outside prompt");
        }
        r.harmful_span = Span{s[0], s[1]};
      }
      if (r.label == Label::kHarmful && !r.harmful_span) throw InvalidArgument("harmful record without span");
      corpus.records.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return corpus;
}

}  // namespace tokenedit
