#pragma once

#include "tokenedit/corpus.hpp"
#include "tokenedit/editor.hpp"
#include "tokenedit/evalsuite.hpp"

#include <map>
#include <string>
#include <vector>

namespace tokenedit {

// The seeded desk experiment: which harmful queries get edited, and the query
// sets the edit is judged on.
struct DeskSuite {
  std::vector<EditRequest> requests;
  std::vector<EvalQuery> edit_queries;        // the edited queries themselves
  std::vector<EvalQuery> paraphrase_queries;  // unseen phrasings of the edited words
  std::vector<EvalQuery> full_queries;        // every harmful word under every harmful template
  std::vector<TokenSequence> benign_prompts;
  std::vector<CorpusRecord> benign_records;   // perplexity set
  std::vector<std::string> categories;

  std::vector<EditRequest> requests_for(const std::string& category) const;
  std::vector<EvalQuery> queries_for(const std::vector<EvalQuery>& queries, const std::string& category) const;
  std::map<std::string, std::vector<EvalQuery>> by_category(const std::vector<EvalQuery>& queries) const;
};

struct DeskSuiteOptions {
  int words_per_category = 5;
  int benign_prompts = 50;
};

// Requests pair word i of each category with harmful template i mod |templates|.
// Benign prompts start with "what is {w} ?" for every edited word and are
// filled up with benign corpus prompts in corpus order.
DeskSuite make_desk_suite(const Vocabulary& vocab, const CorpusSpec& spec, const Corpus& corpus,
                          const DeskSuiteOptions& options = {});

RefusalMatcher default_refusal_matcher(const Vocabulary& vocab);

// Edit settings for the desk model. The EditConfig and ValuationConfig
// defaults carry the 7B-scale values; the 8-layer desk model settles refusal
// in the first MLP, so the profile edits layer 0 only, weakens the covariance
// term, widens the clamp, and turns the offset decay off.
struct DeskProfile {
  EditConfig edit;
  ValuationConfig valuation;
};

DeskProfile desk_profile();

}  // namespace tokenedit
