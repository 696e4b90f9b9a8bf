#pragma once

#include "tokenedit/corpus.hpp"
#include "tokenedit/model.hpp"
#include "tokenedit/remote_client.hpp"
#include "tokenedit/vocabulary.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace tokenedit {

// One harmful word or phrase found in a query.
struct HarmfulToken {
  std::vector<std::string> words;
  TokenSequence ids;
  Span query_span{0, 0};
  std::string source_query_id;
  std::string category;

  std::string text() const;
};

void to_json(nlohmann::json& j, const HarmfulToken& t);

struct ContextSequence {
  TokenSequence tokens;  // starts with <bos>
  int position;          // last sub-token of the harmful token
};

struct ContextSet {
  HarmfulToken token;
  std::vector<ContextSequence> sequences;
};

// term (space-separated words) -> category
using HarmLexicon = std::map<std::string, std::string>;
HarmLexicon make_harm_lexicon(const std::vector<HarmCategory>& categories);

// Returns the harmful terms of `query` in query order, each at its first
// occurrence. With a null `remote` the lexicon is used directly; otherwise
// the remote extractor is asked and any failure falls back to the lexicon.
std::vector<HarmfulToken> extract_harmful_tokens(const Vocabulary& vocab, const TokenSequence& query,
                                                 const HarmLexicon& lexicon,
                                                 const std::string& query_id = {},
                                                 ChatCompletionClient* remote = nullptr);

// Number of times `needle` occurs contiguously in `haystack`.
int count_occurrences(const TokenSequence& haystack, const TokenSequence& needle);

// Index of the last sub-token of the single occurrence of `token`. Throws
// InvalidArgument when it occurs zero or several times.
int locate_span(const TokenSequence& sequence, const TokenSequence& token);

// Filler sentences with the token slot "{t}"; "{n}", "{a}" are neutral noun
// and adjective slots.
const std::vector<std::string_view>& context_frames();

// N pairwise distinct sequences each containing the token exactly once.
// Remote output that fails validation is replaced from the templates.
ContextSet generate_contexts(const Vocabulary& vocab, const ModelConfig& config,
                             const HarmfulToken& token, int n, std::uint64_t seed,
                             ChatCompletionClient* remote = nullptr);

// Mean gate activation at `layer` over the context set, read at each
// sequence's span position.
VecD compute_key(const Weights& weights, int layer, const ContextSet& contexts);

// Columns are the keys of the given context sets.
MatD compute_keys(const Weights& weights, int layer, const std::vector<ContextSet>& contexts);

struct PcaResult {
  MatD coordinates;      // n x out_dims
  VecD variance_ratio;   // out_dims, descending
  MatD components;       // d x out_dims, unit columns
};

// Centers the rows of `keys` (one key per row) and projects them onto the
// leading principal directions. Each direction is signed so its largest
// magnitude entry is positive.
PcaResult pca_project(const MatD& keys, int out_dims = 2);

// CSV with header token_id,category,dim1,dim2 plus "<stem>.json" holding the
// variance ratios and any extra sidecar fields. A multi-word token's ids are
// joined with '-' in the token_id column.
void write_pca_export(const std::filesystem::path& csv_path, const std::vector<TokenSequence>& token_ids,
                      const std::vector<std::string>& categories, const PcaResult& pca,
                      const nlohmann::json& sidecar_extra = nlohmann::json::object());

}  // namespace tokenedit
