#include "tokenedit/vocabulary.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

namespace tokenedit {

namespace {

const std::vector<std::string> kSpecials = {"<pad>", "<bos>", "<eos>", "<unk>"};
const std::vector<std::string> kPunctuation = {"?", ".", ",", ":", ";"};

// Template, refusal, and context-frame words.
const std::vector<std::string> kFunctionWords = {
    "i'm",     "sorry",    "i",        "can't",   "assist",  "with",    "that",      "how",
    "do",      "build",    "to",       "make",    "tell",    "me",      "at",        "home",
    "give",    "detailed", "steps",    "obtain",  "write",   "a",       "guide",     "for",
    "making",  "explain",  "the",      "method",  "craft",   "show",    "way",       "produce",
    "what",    "are",      "instructions", "acquire", "sure", "here",   "is",        "first",
    "then",    "it",       "kind",     "of",      "found",   "near",    "describe",  "in",
    "simple",  "words",    "looks",    "and",     "feels",   "where",   "can",       "find",
    "you",     "reveal",   "secret",   "my",      "private", "was",     "today",     "we",
    "saw",     "beside",   "said",     "quite",   "yesterday", "carried", "people",  "often",
    "talk",    "about",    "when",     "there",   "she",     "put",     "next",      "after",
    "ended",   "stayed",   "an",       "this",    "very",    "some",    "old",       "new",
    "teach",   "create",   "need",     "recipe",  "list",    "ways",    "assemble",  "help",
    "forge"};

const std::vector<std::string> kNouns = {
    "apple",   "river",   "garden",  "table",   "window",  "cloud",   "pencil",  "bridge",
    "candle",  "blanket", "basket",  "mountain", "lantern", "teapot", "violin",  "meadow",
    "harbor",  "kettle",  "pillow",  "ladder",  "mirror",  "orchard", "pebble",  "quilt",
    "saddle",  "tunnel",  "umbrella", "valley", "wagon",   "feather", "glacier", "hammock",
    "island",  "jacket",  "kitten",  "lemon",   "marble",  "notebook", "olive",  "parrot",
    "rabbit",  "sandal",  "tomato",  "velvet",  "walnut",  "anchor",  "barrel",  "cactus",
    "dolphin", "engine",  "forest",  "guitar",  "helmet",  "iceberg", "jungle",  "kayak",
    "lighthouse", "mango", "needle", "oyster",  "pumpkin", "rainbow", "sailboat", "tulip",
    "volcano", "whistle", "yogurt",  "zebra",   "acorn",   "bucket",  "carpet",  "desert",
    "envelope", "fountain", "goblet", "honey",  "igloo",   "jigsaw",  "kiosk",   "lobster",
    "mitten",  "nugget",  "oatmeal", "paddle",  "riddle",  "scarf",   "thimble", "utensil",
    "village", "wheel",   "button",  "cookie",  "drum",    "easel",   "fence",   "gravel",
    "hedge",   "ink",     "jar",     "kite",    "leaf",    "moss",    "nest",    "oar",
    "pond",    "rope",    "shell",   "tent",    "vase",    "wool",    "bench",   "chimney",
    "dune",    "fern",    "gate",    "hill",    "lake",    "map",     "path",    "stone"};

const std::vector<std::string> kAdjectives = {
    "soft",   "bright", "quiet",  "warm",   "smooth", "gentle", "round",  "tall",
    "small",  "green",  "golden", "shiny",  "calm",   "fresh",  "light",  "heavy",
    "narrow", "wide",   "sweet",  "silver", "wooden", "cozy",   "tidy",   "plain",
    "sturdy", "pale",   "rough",  "cheerful", "dusty", "humble", "lively", "mellow",
    "rustic", "sleek",  "snowy",  "sunny",  "velvety", "windy", "breezy", "chilly"};

const std::vector<std::string> kVerbs = {
    "fold",  "stir",  "paint",   "wash",  "measure", "sort",  "polish", "arrange",
    "heat",  "cool",  "trim",    "stack", "rinse",   "press", "wrap",   "carry",
    "open",  "close", "shape",   "turn",  "brush",   "label", "count",  "water",
    "sweep", "slice", "balance", "tie",   "bend",    "lift"};

// Subject terms are two syllables. Term (p, s) belongs to group
// (p + 3 s) mod 8, so every syllable occurs once in each harm category, twice
// among refused terms and twice among neutral terms, and no single token
// reveals a term's group.
const std::vector<std::string> kTermPrefixes = {"vex", "zin", "nok", "fak", "drax", "mor", "quel", "skor"};
const std::vector<std::string> kTermSuffixes = {"blade", "trap", "vial", "mint", "ite", "thane", "lock", "rix"};
const std::vector<std::string> kCategoryLabels = {"weaponry", "intrusion", "toxins", "fraud"};
constexpr std::size_t kRefusedGroup = 4;  // groups 4, 5
constexpr std::size_t kNeutralGroup = 6;  // groups 6, 7

std::vector<std::string> terms_in_groups(std::size_t first, std::size_t count) {
  std::vector<std::string> out;
  for (std::size_t p = 0; p < kTermPrefixes.size(); ++p) {
    for (std::size_t s = 0; s < kTermSuffixes.size(); ++s) {
      const std::size_t group = (p + 3 * s) % 8;
      if (group >= first && group < first + count) out.push_back(kTermPrefixes[p] + " " + kTermSuffixes[s]);
    }
  }
  return out;
}

const std::vector<std::string> kSyllables = {"ba", "ko", "ri", "lu", "me", "sa", "ti", "no",
                                             "pe", "du", "fa", "gi", "ho", "ze", "wu", "ca"};

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<TokenId>(i)).second) {
      throw InvalidArgument("duplicate vocabulary word: " + words_[i]);
    }
  }
}

bool Vocabulary::contains(std::string_view word) const { return find(word).has_value(); }

std::optional<TokenId> Vocabulary::find(std::string_view word) const {
  const auto it = index_.find(std::string(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id(std::string_view word) const {
  const auto found = find(word);
  if (!found) throw InvalidArgument("word not in vocabulary: " + std::string(word));
  return *found;
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw InvalidArgument("token id out of vocabulary range: " + std::to_string(id));
  }
  return words_[static_cast<std::size_t>(id)];
}

std::vector<std::string> Vocabulary::split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (current.empty()) return;
    // Peel trailing punctuation into separate tokens.
    std::vector<std::string> tail;
    while (current.size() > 1 && std::string_view("?.,:;").find(current.back()) != std::string_view::npos) {
      tail.emplace_back(1, current.back());
      current.pop_back();
    }
    out.push_back(current);
    out.insert(out.end(), tail.rbegin(), tail.rend());
    current.clear();
  };
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  flush();
  return out;
}

std::optional<TokenSequence> Vocabulary::try_encode(std::string_view text) const {
  TokenSequence ids;
  for (const auto& w : split_words(text)) {
    const auto found = find(w);
    if (!found) return std::nullopt;
    ids.push_back(*found);
  }
  return ids;
}

TokenSequence Vocabulary::encode(std::string_view text) const {
  TokenSequence ids;
  for (const auto& w : split_words(text)) ids.push_back(id(w));
  return ids;
}

std::string Vocabulary::decode(const TokenSequence& ids) const {
  std::string out;
  for (TokenId t : ids) {
    if (!out.empty()) out.push_back(' ');
    out += word(t);
  }
  return out;
}

void Vocabulary::save(const std::filesystem::path& path, const nlohmann::json& meta) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  if (meta.empty()) {
    out << nlohmann::json(words_).dump() << '\n';
  } else {
    out << nlohmann::json{{"words", words_}, {"meta", meta}}.dump() << '\n';
  }
}

Vocabulary Vocabulary::load(const std::filesystem::path& path, nlohmann::json* meta) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.is_array()) return Vocabulary(j.get<std::vector<std::string>>());
    if (meta != nullptr) *meta = j.value("meta", nlohmann::json::object());
    return Vocabulary(j.at("words").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::vector<HarmCategory> default_harm_categories() {
  std::vector<HarmCategory> out;
  for (std::size_t c = 0; c < kCategoryLabels.size(); ++c) out.push_back({kCategoryLabels[c], terms_in_groups(c, 1)});
  return out;
}

const std::vector<std::string>& default_refused_words() {
  static const std::vector<std::string> terms = terms_in_groups(kRefusedGroup, 2);
  return terms;
}

const std::vector<std::string>& neutral_terms() {
  static const std::vector<std::string> terms = terms_in_groups(kNeutralGroup, 2);
  return terms;
}

const std::vector<std::string>& neutral_nouns() { return kNouns; }
const std::vector<std::string>& neutral_adjectives() { return kAdjectives; }
const std::vector<std::string>& neutral_verbs() { return kVerbs; }

Vocabulary default_vocabulary(std::size_t size) {
  std::vector<std::string> words;
  for (const auto* group : {&kSpecials, &kPunctuation, &kFunctionWords, &kNouns, &kAdjectives, &kVerbs}) {
    words.insert(words.end(), group->begin(), group->end());
  }
  words.insert(words.end(), kTermPrefixes.begin(), kTermPrefixes.end());
  words.insert(words.end(), kTermSuffixes.begin(), kTermSuffixes.end());
  std::set<std::string> taken(words.begin(), words.end());
  if (taken.size() != words.size()) throw InvalidArgument("default lexicon has duplicates");
  // Three-syllable neutral pseudo-words, enumerated deterministically.
  const std::size_t n = kSyllables.size();
  for (std::size_t i = 0; words.size() < size && i < n * n * n; ++i) {
    std::string w = kSyllables[i % n] + kSyllables[(i / n) % n] + kSyllables[(i / (n * n)) % n];
    if (taken.insert(w).second) words.push_back(std::move(w));
  }
  if (words.size() > size) throw InvalidArgument("vocabulary size too small for the default lexicon");
  return Vocabulary(std::move(words));
}

}  // namespace tokenedit
