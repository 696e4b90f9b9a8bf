#include "tokenedit/desk.hpp"

namespace tokenedit {

namespace {

std::string substitute(std::string_view templ, std::string_view word) {
  std::string out(templ);
  const auto at = out.find("{w}");
  if (at != std::string::npos) out.replace(at, 3, word);
  return out;
}

EvalQuery make_query(const Vocabulary& vocab, std::string id, std::string category, std::string_view templ,
                     std::string_view word) {
  return {std::move(id), std::move(category), render_prompt(vocab, templ, word).first};
}

}  // namespace

std::vector<EditRequest> DeskSuite::requests_for(const std::string& category) const {
  std::vector<EditRequest> out;
  for (const auto& r : requests) {
    if (r.category == category) out.push_back(r);
  }
  return out;
}

std::vector<EvalQuery> DeskSuite::queries_for(const std::vector<EvalQuery>& queries,
                                              const std::string& category) const {
  std::vector<EvalQuery> out;
  for (const auto& q : queries) {
    if (q.category == category) out.push_back(q);
  }
  return out;
}

std::map<std::string, std::vector<EvalQuery>> DeskSuite::by_category(const std::vector<EvalQuery>& queries) const {
  std::map<std::string, std::vector<EvalQuery>> out;
  for (const auto& c : categories) out[c] = queries_for(queries, c);
  return out;
}

DeskSuite make_desk_suite(const Vocabulary& vocab, const CorpusSpec& spec, const Corpus& corpus,
                          const DeskSuiteOptions& options) {
  spec.validate();
  DeskSuite suite;
  const auto n_templates = static_cast<std::size_t>(spec.n_harmful_templates);
  for (const auto& cat : spec.categories) {
    suite.categories.push_back(cat.label);
    const auto n_words = std::min<std::size_t>(static_cast<std::size_t>(options.words_per_category), cat.words.size());
    for (std::size_t i = 0; i < n_words; ++i) {
      const auto& word = cat.words[i];
      const auto templ = kHarmfulTemplates[i % n_templates];
      EditRequest req;
      req.id = cat.label + "-" + std::to_string(i);
      req.query = substitute(templ, word);
      req.category = cat.label;
      suite.requests.push_back(req);
      suite.edit_queries.push_back(make_query(vocab, req.id, cat.label, templ, word));
      for (std::size_t p = 0; p < kParaphraseTemplates.size(); ++p) {
        suite.paraphrase_queries.push_back(
            make_query(vocab, req.id + "-para" + std::to_string(p), cat.label, kParaphraseTemplates[p], word));
      }
      suite.benign_prompts.push_back(render_prompt(vocab, kBenignTemplates[0], word).first);
    }
    for (std::size_t i = 0; i < cat.words.size(); ++i) {
      for (std::size_t t = 0; t < n_templates; ++t) {
        suite.full_queries.push_back(make_query(vocab, cat.label + "-w" + std::to_string(i) + "-t" + std::to_string(t),
                                                cat.label, kHarmfulTemplates[t], cat.words[i]));
      }
    }
  }
  suite.benign_records = corpus.benign();
  for (const auto& r : suite.benign_records) {
    if (static_cast<int>(suite.benign_prompts.size()) >= options.benign_prompts) break;
    if (r.category == "aligned") continue;
    if (std::find(suite.benign_prompts.begin(), suite.benign_prompts.end(), r.prompt) != suite.benign_prompts.end()) {
      continue;
    }
    suite.benign_prompts.push_back(r.prompt);
  }
  return suite;
}

RefusalMatcher default_refusal_matcher(const Vocabulary& vocab) {
  return {vocab.encode(kRefusalText), 4};
}

DeskProfile desk_profile() {
  DeskProfile p;
  p.edit.target_layers = {0};
  p.edit.moment_weight = 100.0;
  p.valuation.clamp_factor = 1.5;
  p.valuation.weight_decay = 0.0;
  return p;
}

}  // namespace tokenedit
