#pragma once

#include <json.hpp>

#include <memory>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <vector>

namespace tokenedit {

// Single-turn chat completion. Implementations throw on transport or
// protocol failure; callers decide how to degrade.
class ChatCompletionClient {
 public:
  virtual ~ChatCompletionClient() = default;
  virtual std::string complete(const std::string& prompt) = 0;
};

struct RemoteSettings {
  // Full URL of an OpenAI-compatible chat-completions endpoint.
  std::string endpoint = "http://127.0.0.1:8000/v1/chat/completions";
  std::string model = "gpt-4";
  // Name of the environment variable holding the bearer token.
  std::string api_key_env = "TOKENEDIT_API_KEY";
  int timeout_seconds = 30;
  int max_in_flight = 4;
};

void to_json(nlohmann::json& j, const RemoteSettings& s);
void from_json(const nlohmann::json& j, RemoteSettings& s);

struct ParsedUrl {
  std::string scheme_host_port;  // "http://host:port"
  std::string path;
};
ParsedUrl parse_endpoint_url(const std::string& url);

class HttpChatClient final : public ChatCompletionClient {
 public:
  explicit HttpChatClient(RemoteSettings settings);
  std::string complete(const std::string& prompt) override;

 private:
  RemoteSettings settings_;
  ParsedUrl url_;
  std::counting_semaphore<1024> in_flight_;
};

nlohmann::json chat_request_body(const std::string& model, const std::string& prompt);
// Extracts choices[0].message.content; throws std::runtime_error when absent.
std::string chat_response_content(const nlohmann::json& response);

// Prompts sent to the remote extractor and sequence generator.
std::string harmful_token_extraction_prompt(std::string_view query);
std::string context_sequence_prompt(std::string_view token);

// Parses "[token1, token2, ...]" (quotes optional). Returns nullopt when no
// bracketed list is present.
std::optional<std::vector<std::string>> parse_token_list(std::string_view response);

}  // namespace tokenedit
