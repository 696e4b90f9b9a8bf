#pragma once

#include "tokenedit/common.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tokenedit {

// Fixed word-level vocabulary. Text is lowercased and split on whitespace,
// with trailing punctuation split off into separate tokens.
class Vocabulary {
 public:
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kBos = "<bos>";
  static constexpr std::string_view kEos = "<eos>";

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words);

  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  bool contains(std::string_view word) const;
  std::optional<TokenId> find(std::string_view word) const;
  // Throws InvalidArgument for unknown words.
  TokenId id(std::string_view word) const;
  const std::string& word(TokenId id) const;

  TokenId bos() const { return id(kBos); }
  TokenId eos() const { return id(kEos); }

  static std::vector<std::string> split_words(std::string_view text);
  TokenSequence encode(std::string_view text) const;
  // Like encode but returns nullopt when any word is unknown.
  std::optional<TokenSequence> try_encode(std::string_view text) const;
  std::string decode(const TokenSequence& ids) const;

  // A bare JSON word list, or {"words": [...], "meta": {...}} when meta is
  // nonempty. load accepts both.
  void save(const std::filesystem::path& path, const nlohmann::json& meta = nlohmann::json::object()) const;
  static Vocabulary load(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

// Harmful terms by category. A term is one or more vocabulary words. Every
// string is invented; none names a real substance, tool, or technique.
struct HarmCategory {
  std::string label;
  std::vector<std::string> words;
};
std::vector<HarmCategory> default_harm_categories();

// Invented terms the base model already refuses.
const std::vector<std::string>& default_refused_words();
// Terms built from the same syllables that only ever appear in benign use.
const std::vector<std::string>& neutral_terms();

// Neutral nouns used as fillers and as benign subjects.
const std::vector<std::string>& neutral_nouns();
const std::vector<std::string>& neutral_adjectives();
const std::vector<std::string>& neutral_verbs();

// The default lexicon: special tokens, template and refusal words, neutral
// fillers, the term syllables, padded with generated neutral pseudo-words up
// to `size` entries.
Vocabulary default_vocabulary(std::size_t size = 512);

// The toy-vocabulary rendering of "I'm sorry, I can't assist with that."
inline constexpr std::string_view kRefusalText = "i'm sorry , i can't assist with that .";

}  // namespace tokenedit
