#include "tokenedit/keying.hpp"

#include "tokenedit/fingerprint.hpp"
#include "tokenedit/parallel.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace tokenedit {

namespace {

const std::vector<std::string_view> kFrames = {
    "we {v} {t} near the {a} {n} today .",
    "you can {v} {t} with the {n} when it was {a} .",
    "she said to {v} {t} beside the old {n} .",
    "people often {v} {t} after the {a} {n} ended .",
    "i {v} {t} in the {a} {n} yesterday .",
    "when it ended , we {v} {t} and the {n} .",
    "there was a {a} {n} , then we {v} {t} .",
    "my {a} {n} and {t} stayed near the {n} today .",
};

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

// Strips list decoration such as "1.", "2)", "-" or "*" from a line.
std::string strip_list_marker(std::string line) {
  std::size_t i = 0;
  while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
  std::size_t j = i;
  while (j < line.size() && std::isdigit(static_cast<unsigned char>(line[j]))) ++j;
  if (j > i && j < line.size() && (line[j] == '.' || line[j] == ')')) {
    i = j + 1;
  } else if (i < line.size() && (line[i] == '-' || line[i] == '*')) {
    ++i;
  }
  line = line.substr(i);
  std::erase(line, '"');
  return line;
}

TokenSequence fill_frame(const Vocabulary& vocab, std::string_view frame, const HarmfulToken& token,
                         std::mt19937_64& rng) {
  const auto& nouns = neutral_nouns();
  const auto& adjectives = neutral_adjectives();
  std::uniform_int_distribution<std::size_t> pick_noun(0, nouns.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_adj(0, adjectives.size() - 1);
  const auto& verbs = neutral_verbs();
  std::uniform_int_distribution<std::size_t> pick_verb(0, verbs.size() - 1);
  TokenSequence out{vocab.bos()};
  for (const auto& slot : Vocabulary::split_words(frame)) {
    if (slot == "{t}") {
      out.insert(out.end(), token.ids.begin(), token.ids.end());
    } else if (slot == "{n}") {
      out.push_back(vocab.id(nouns[pick_noun(rng)]));
    } else if (slot == "{a}") {
      out.push_back(vocab.id(adjectives[pick_adj(rng)]));
    } else if (slot == "{v}") {
      out.push_back(vocab.id(verbs[pick_verb(rng)]));
    } else {
      out.push_back(vocab.id(slot));
    }
  }
  return out;
}

}  // namespace

std::string HarmfulToken::text() const { return join_words(words); }

void to_json(nlohmann::json& j, const HarmfulToken& t) {
  j = {{"text", t.text()},
       {"ids", t.ids},
       {"query_span", {t.query_span.begin, t.query_span.end}},
       {"source_query_id", t.source_query_id},
       {"category", t.category}};
}

HarmLexicon make_harm_lexicon(const std::vector<HarmCategory>& categories) {
  HarmLexicon lexicon;
  for (const auto& cat : categories) {
    for (const auto& w : cat.words) lexicon.emplace(w, cat.label);
  }
  return lexicon;
}

int count_occurrences(const TokenSequence& haystack, const TokenSequence& needle) {
  if (needle.empty() || needle.size() > haystack.size()) return 0;
  int count = 0;
  for (std::size_t i = 0; i + needle.size() <= haystack.size(); ++i) {
    if (std::equal(needle.begin(), needle.end(), haystack.begin() + static_cast<std::ptrdiff_t>(i))) ++count;
  }
  return count;
}

int locate_span(const TokenSequence& sequence, const TokenSequence& token) {
  if (token.empty()) throw InvalidArgument("empty harmful token");
  int found = -1;
  int count = 0;
  for (std::size_t i = 0; i + token.size() <= sequence.size(); ++i) {
    if (std::equal(token.begin(), token.end(), sequence.begin() + static_cast<std::ptrdiff_t>(i))) {
      found = static_cast<int>(i + token.size()) - 1;
      ++count;
    }
  }
  if (count != 1) {
    throw InvalidArgument("harmful token occurs " + std::to_string(count) +
                          " times in the sequence; exactly one is required");
  }
  return found;
}

namespace {

std::vector<HarmfulToken> extract_from_lexicon(const Vocabulary& vocab, const TokenSequence& query,
                                               const HarmLexicon& lexicon, const std::string& query_id) {
  std::vector<HarmfulToken> out;
  for (const auto& [term, category] : lexicon) {
    const auto ids = vocab.try_encode(term);
    if (!ids || ids->empty()) continue;
    const auto hit = std::search(query.begin(), query.end(), ids->begin(), ids->end());
    if (hit == query.end()) continue;
    const int begin = static_cast<int>(hit - query.begin());
    out.push_back({Vocabulary::split_words(term), *ids, {begin, begin + static_cast<int>(ids->size())}, query_id,
                   category});
  }
  std::stable_sort(out.begin(), out.end(), [](const HarmfulToken& a, const HarmfulToken& b) {
    return a.query_span.begin < b.query_span.begin;
  });
  return out;
}

}  // namespace

std::vector<HarmfulToken> extract_harmful_tokens(const Vocabulary& vocab, const TokenSequence& query,
                                                 const HarmLexicon& lexicon, const std::string& query_id,
                                                 ChatCompletionClient* remote) {
  if (query.empty()) throw InvalidArgument("empty query");
  if (remote == nullptr) return extract_from_lexicon(vocab, query, lexicon, query_id);

  TokenSequence body;
  for (TokenId t : query) {
    const auto& w = vocab.word(t);
    if (w.empty() || w.front() != '<') body.push_back(t);
  }
  std::optional<std::vector<std::string>> items;
  try {
    items = parse_token_list(remote->complete(harmful_token_extraction_prompt(vocab.decode(body))));
    if (!items) warn("remote extractor returned no token list; using the lexicon");
  } catch (const std::exception& e) {
    warn(std::string("remote extractor failed (") + e.what() + "); using the lexicon");
  }
  if (!items) return extract_from_lexicon(vocab, query, lexicon, query_id);

  std::vector<HarmfulToken> out;
  for (const auto& item : *items) {
    const auto ids = vocab.try_encode(item);
    if (!ids || ids->empty()) continue;
    const auto hit = std::search(query.begin(), query.end(), ids->begin(), ids->end());
    if (hit == query.end()) continue;
    const bool duplicate = std::any_of(out.begin(), out.end(), [&](const HarmfulToken& t) { return t.ids == *ids; });
    if (duplicate) continue;
    HarmfulToken token;
    token.words = Vocabulary::split_words(item);
    token.ids = *ids;
    const int begin = static_cast<int>(hit - query.begin());
    token.query_span = {begin, begin + static_cast<int>(ids->size())};
    token.source_query_id = query_id;
    if (const auto it = lexicon.find(token.text()); it != lexicon.end()) token.category = it->second;
    out.push_back(std::move(token));
  }
  return out;
}

const std::vector<std::string_view>& context_frames() { return kFrames; }

ContextSet generate_contexts(const Vocabulary& vocab, const ModelConfig& config, const HarmfulToken& token,
                             int n, std::uint64_t seed, ChatCompletionClient* remote) {
  if (n < 1) throw InvalidArgument("context count must be at least 1");
  if (token.ids.empty()) throw InvalidArgument("harmful token has no ids");
  for (TokenId t : token.ids) vocab.word(t);

  ContextSet out{token, {}};
  std::set<TokenSequence> seen;
  const auto accept = [&](TokenSequence seq) {
    if (static_cast<int>(seq.size()) < 4 || static_cast<int>(seq.size()) > config.max_seq_len) return false;
    if (count_occurrences(seq, token.ids) != 1) return false;
    if (!seen.insert(seq).second) return false;
    const int pos = locate_span(seq, token.ids);
    out.sequences.push_back({std::move(seq), pos});
    return true;
  };

  if (remote != nullptr) {
    try {
      std::istringstream lines(remote->complete(context_sequence_prompt(token.text())));
      std::string line;
      while (static_cast<int>(out.sequences.size()) < n && std::getline(lines, line)) {
        const auto ids = vocab.try_encode(strip_list_marker(line));
        if (!ids || ids->empty()) continue;
        TokenSequence seq{vocab.bos()};
        seq.insert(seq.end(), ids->begin(), ids->end());
        accept(std::move(seq));
      }
    } catch (const std::exception& e) {
      warn(std::string("remote sequence generator failed (") + e.what() + "); using templates");
    }
  }

  Fnv1a mix;
  mix.update_pod(seed);
  mix.update(token.text());
  std::mt19937_64 rng(mix.digest());
  std::vector<std::size_t> order(kFrames.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t j = 0; static_cast<int>(out.sequences.size()) < n; ++j) {
    const auto frame = kFrames[order[j % order.size()]];
    bool placed = false;
    for (int attempt = 0; attempt < 64 && !placed; ++attempt) placed = accept(fill_frame(vocab, frame, token, rng));
    if (!placed && j > 64 * order.size()) {
      throw InvalidArgument("cannot build " + std::to_string(n) + " distinct contexts for '" + token.text() + "'");
    }
  }
  return out;
}

VecD compute_key(const Weights& weights, int layer, const ContextSet& contexts) {
  if (layer < 0 || layer >= weights.config.n_layers) {
    throw InvalidArgument("layer " + std::to_string(layer) + " out of range");
  }
  if (contexts.sequences.empty()) throw InvalidArgument("empty context set");
  VecD sum = VecD::Zero(weights.config.d_mlp);
  for (const auto& ctx : contexts.sequences) {
    if (ctx.position < 0 || ctx.position >= static_cast<int>(ctx.tokens.size())) {
      throw InvalidArgument("context span position out of range");
    }
    const auto fr = forward(weights, ctx.tokens);
    const VecD k = fr.trace.layers[static_cast<std::size_t>(layer)].gate.col(ctx.position).cast<double>();
    if (!k.allFinite()) {
      throw NumericError("non-finite gate activation at layer " + std::to_string(layer) + " for '" +
                         contexts.token.text() + "'");
    }
    sum += k;
  }
  return sum / static_cast<double>(contexts.sequences.size());
}

MatD compute_keys(const Weights& weights, int layer, const std::vector<ContextSet>& contexts) {
  MatD keys(weights.config.d_mlp, static_cast<Eigen::Index>(contexts.size()));
  std::vector<VecD> columns(contexts.size());
  parallel_for(contexts.size(), [&](std::size_t i) { columns[i] = compute_key(weights, layer, contexts[i]); });
  for (std::size_t i = 0; i < columns.size(); ++i) keys.col(static_cast<Eigen::Index>(i)) = columns[i];
  return keys;
}

PcaResult pca_project(const MatD& keys, int out_dims) {
  if (keys.rows() < 2) throw InvalidArgument("PCA needs at least two keys");
  if (out_dims < 1 || out_dims > keys.cols()) throw InvalidArgument("PCA output dimension out of range");
  const MatD centered = keys.rowwise() - keys.colwise().mean();
  PcaResult out;
  out.coordinates = MatD::Zero(keys.rows(), out_dims);
  out.variance_ratio = VecD::Zero(out_dims);
  out.components = MatD::Zero(keys.cols(), out_dims);

  Eigen::JacobiSVD<MatD> svd(centered, Eigen::ComputeThinV);
  const VecD& sigma = svd.singularValues();
  const double total = sigma.squaredNorm();
  if (total <= 0.0) return out;
  const int available = std::min<int>(out_dims, static_cast<int>(sigma.size()));
  for (int c = 0; c < available; ++c) {
    VecD dir = svd.matrixV().col(c);
    Eigen::Index arg = 0;
    dir.cwiseAbs().maxCoeff(&arg);
    if (dir(arg) < 0) dir = -dir;
    out.components.col(c) = dir;
    out.coordinates.col(c) = centered * dir;
    out.variance_ratio(c) = sigma(c) * sigma(c) / total;
  }
  return out;
}

void write_pca_export(const std::filesystem::path& csv_path, const std::vector<TokenSequence>& token_ids,
                      const std::vector<std::string>& categories, const PcaResult& pca,
                      const nlohmann::json& sidecar_extra) {
  const auto rows = static_cast<std::size_t>(pca.coordinates.rows());
  if (token_ids.size() != rows || categories.size() != rows) {
    throw InvalidArgument("PCA export labels do not match the coordinate rows");
  }
  if (pca.coordinates.cols() < 2) throw InvalidArgument("PCA export needs two dimensions");
  if (csv_path.has_parent_path()) std::filesystem::create_directories(csv_path.parent_path());
  std::ofstream csv(csv_path);
  if (!csv) throw IoError("cannot write " + csv_path.string());
  csv.precision(17);
  csv << "token_id,category,dim1,dim2\n";
  for (std::size_t i = 0; i < rows; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (std::size_t k = 0; k < token_ids[i].size(); ++k) csv << (k == 0 ? "" : "-") << token_ids[i][k];
    csv << ',' << categories[i] << ',' << pca.coordinates(r, 0) << ','
        << pca.coordinates(r, 1) << '\n';
  }
  auto sidecar = csv_path;
  sidecar.replace_extension(".json");
  std::ofstream js(sidecar);
  if (!js) throw IoError("cannot write " + sidecar.string());
  std::vector<double> ratios(pca.variance_ratio.data(), pca.variance_ratio.data() + pca.variance_ratio.size());
  nlohmann::json doc = sidecar_extra;
  doc["explained_variance_ratio"] = ratios;
  js << doc.dump(2) << '\n';
}

}  // namespace tokenedit
