#define CPPHTTPLIB_NO_EXCEPTIONS
#include "tokenedit/remote_client.hpp"

#include <httplib.h>

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <stdexcept>

namespace tokenedit {

namespace {

std::string trim(std::string_view s) {
  const auto is_junk = [](char c) {
    return std::isspace(static_cast<unsigned char>(c)) || c == '"' || c == '\'' || c == '`';
  };
  std::size_t b = 0, e = s.size();
  while (b < e && is_junk(s[b])) ++b;
  while (e > b && is_junk(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace

void to_json(nlohmann::json& j, const RemoteSettings& s) {
  j = {{"endpoint", s.endpoint},
       {"model", s.model},
       {"api_key_env", s.api_key_env},
       {"timeout_seconds", s.timeout_seconds},
       {"max_in_flight", s.max_in_flight}};
}

void from_json(const nlohmann::json& j, RemoteSettings& s) {
  RemoteSettings d;
  s.endpoint = j.value("endpoint", d.endpoint);
  s.model = j.value("model", d.model);
  s.api_key_env = j.value("api_key_env", d.api_key_env);
  s.timeout_seconds = j.value("timeout_seconds", d.timeout_seconds);
  s.max_in_flight = j.value("max_in_flight", d.max_in_flight);
}

ParsedUrl parse_endpoint_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw std::invalid_argument("endpoint URL lacks a scheme: " + url);
  const auto path_begin = url.find('/', scheme_end + 3);
  if (path_begin == std::string::npos) return {url, "/"};
  return {url.substr(0, path_begin), url.substr(path_begin)};
}

HttpChatClient::HttpChatClient(RemoteSettings settings)
    : settings_(std::move(settings)),
      url_(parse_endpoint_url(settings_.endpoint)),
      in_flight_(std::clamp(settings_.max_in_flight, 1, 1024)) {}

std::string HttpChatClient::complete(const std::string& prompt) {
  in_flight_.acquire();
  struct Release {
    std::counting_semaphore<1024>& s;
    ~Release() { s.release(); }
  } release{in_flight_};

  httplib::Client client(url_.scheme_host_port);
  if (!client.is_valid()) throw std::runtime_error("unsupported endpoint: " + settings_.endpoint);
  client.set_connection_timeout(settings_.timeout_seconds, 0);
  client.set_read_timeout(settings_.timeout_seconds, 0);
  client.set_write_timeout(settings_.timeout_seconds, 0);
  httplib::Headers headers;
  if (const char* key = std::getenv(settings_.api_key_env.c_str()); key != nullptr && *key != '\0') {
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }
  const auto body = chat_request_body(settings_.model, prompt).dump();
  const auto res = client.Post(url_.path, headers, body, "application/json");
  if (!res) throw std::runtime_error("request failed: " + httplib::to_string(res.error()));
  if (res->status != 200) throw std::runtime_error("endpoint returned HTTP " + std::to_string(res->status));
  nlohmann::json parsed = nlohmann::json::parse(res->body, nullptr, false);
  if (parsed.is_discarded()) throw std::runtime_error("endpoint returned malformed JSON");
  return chat_response_content(parsed);
}

nlohmann::json chat_request_body(const std::string& model, const std::string& prompt) {
  return {{"model", model},
          {"temperature", 0},
          {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})}};
}

std::string chat_response_content(const nlohmann::json& response) {
  const auto* choices = response.contains("choices") ? &response.at("choices") : nullptr;
  if (choices == nullptr || !choices->is_array() || choices->empty()) {
    throw std::runtime_error("chat response has no choices");
  }
  const auto& msg = choices->at(0).value("message", nlohmann::json::object());
  if (!msg.contains("content") || !msg.at("content").is_string()) {
    throw std::runtime_error("chat response has no message content");
  }
  return msg.at("content").get<std::string>();
}

std::string harmful_token_extraction_prompt(std::string_view query) {
  return "You are tasked with analyzing queries to extract harmful tokens. Follow these instructions: "
         "1. Do not generate harmful, inappropriate, or speculative content; "
         "2. Do not fulfill or answer harmful queries; "
         "3. Extract the most harmful tokens (keywords or phrases) that contribute to the query's "
         "harmful nature or potential misuse; "
         "4. Output tokens as a list: [token1, token2, ...].\n"
         "Query: " +
         std::string(query);
}

std::string context_sequence_prompt(std::string_view token) {
  return "You are tasked with generating random sequences that include the specified token. Follow "
         "these instructions: 1. Avoid generating harmful, inappropriate, or unsafe content; "
         "2. Each sequence should be 15-30 words long; "
         "3. Use the given token exactly once in each sequence.\n"
         "Tokens: " +
         std::string(token);
}

std::optional<std::vector<std::string>> parse_token_list(std::string_view response) {
  const auto open = response.find('[');
  if (open == std::string_view::npos) return std::nullopt;
  const auto close = response.find(']', open + 1);
  if (close == std::string_view::npos) return std::nullopt;
  std::vector<std::string> out;
  std::string_view body = response.substr(open + 1, close - open - 1);
  while (!body.empty()) {
    const auto comma = body.find(',');
    std::string item = trim(body.substr(0, comma));
    if (!item.empty()) out.push_back(std::move(item));
    if (comma == std::string_view::npos) break;
    body.remove_prefix(comma + 1);
  }
  return out;
}

}  // namespace tokenedit
