#include <json.hpp>

#include "cdt/http.hpp"
#include "cdt/twin.hpp"
#include "cdt/util.hpp"

namespace cdt::twin {

using nlohmann::json;

std::string SyntheticBackend::respond(const BackendRequest& request) {
  const auto it = respondents_.find(request.respondent_id);
  if (it == respondents_.end()) throw BackendError("no synthetic respondent " + request.respondent_id);
  if (request.task == nullptr) throw BackendError("synthetic backend needs a structured task");
  auto rng = task_rng(it->second, request.task_id);
  const auto choice = synthetic_choice(it->second, *request.task, rng);
  return std::string("{\"choice\": \"") + std::string(to_string(choice)) + "\"}";
}

RemoteChatBackend::RemoteChatBackend(RemoteChatConfig config) : config_(std::move(config)) {
  if (config_.endpoint.empty()) throw std::invalid_argument("remote chat backend needs an endpoint");
}

std::string RemoteChatBackend::respond(const BackendRequest& request) {
  json messages = json::array();
  for (const auto& m : request.messages) messages.push_back({{"role", m.role}, {"content", m.content}});
  const json body = {{"model_id", request.model_id.empty() ? config_.model_id : request.model_id},
                     {"temperature", request.temperature},
                     {"messages", messages}};
  http::Response response;
  try {
    response = http::post_json(config_.endpoint, config_.api_key, body.dump(), config_.timeout);
  } catch (const http::TransportError& e) {
    throw BackendError(e.what());
  }
  if (response.status != 200) {
    throw BackendError("chat endpoint returned HTTP " + std::to_string(response.status));
  }
  try {
    return json::parse(response.body).at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw BackendError(std::string("malformed chat response: ") + e.what());
  }
}

namespace {

std::string line_after(const std::string& text, const std::string& marker) {
  const auto pos = text.find(marker);
  if (pos == std::string::npos) return {};
  const auto start = pos + marker.size();
  const auto end = text.find('\n', start);
  return text.substr(start, end == std::string::npos ? std::string::npos : end - start);
}

std::string section(const std::string& text, const std::string& begin, const std::string& end) {
  const auto b = text.find(begin);
  if (b == std::string::npos) return {};
  const auto start = b + begin.size();
  const auto e = text.find(end, start);
  return text.substr(start, e == std::string::npos ? std::string::npos : e - start);
}

std::vector<std::string> level_labels(const std::string& option) {
  std::vector<std::string> labels;
  for (const auto& part : util::split(option, ';')) {
    const auto colon = part.find(": ");
    labels.push_back(util::to_lower(util::trim(colon == std::string::npos ? part : part.substr(colon + 2))));
  }
  return labels;
}

int evidence(const std::vector<std::string>& memory_lines, const std::vector<std::string>& labels) {
  int score = 0;
  for (const auto& line : memory_lines) {
    for (const auto& label : labels) {
      if (!label.empty() && line.find("prefer " + label) != std::string::npos) ++score;
    }
  }
  return score;
}

}  // namespace

std::string KeywordBackend::respond(const BackendRequest& request) {
  if (request.messages.empty()) throw BackendError("keyword backend got no prompt");
  const auto& prompt = request.messages.back().content;
  const auto a = level_labels(line_after(prompt, "- Option A: "));
  const auto b = level_labels(line_after(prompt, "- Option B: "));
  std::vector<std::string> lines;
  for (const auto& l : util::split(section(prompt, "YOUR MEMORIES (Context)\n", "\nOUTPUT FORMAT INSTRUCTION"), '\n')) {
    lines.push_back(util::to_lower(l));
  }
  const int score_a = evidence(lines, a);
  const int score_b = evidence(lines, b);
  Choice choice = default_;
  if (score_a > score_b) choice = Choice::A;
  if (score_b > score_a) choice = Choice::B;
  return std::string("{\"choice\": \"") + std::string(to_string(choice)) + "\"}";
}

}  // namespace cdt::twin
