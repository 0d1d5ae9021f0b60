#include "cdt/http.hpp"

#include <httplib.h>

namespace cdt::http {

namespace {

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

SplitUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw TransportError("malformed url: " + url);
  const auto scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") throw TransportError("unsupported scheme: " + scheme);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

Response post_json(const std::string& url, const std::string& bearer_token,
                   const std::string& body, std::chrono::seconds timeout) {
  const auto parts = split_url(url);
  httplib::Client client(parts.origin);
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  httplib::Headers headers;
  if (!bearer_token.empty()) headers.emplace("Authorization", "Bearer " + bearer_token);
  auto result = client.Post(parts.path, headers, body, "application/json");
  if (!result) {
    throw TransportError("request to " + url + " failed: " + httplib::to_string(result.error()));
  }
  return {result->status, result->body};
}

bool is_retryable_status(int status) {
  return status == 408 || status == 429 || (status >= 500 && status <= 599);
}

}  // namespace cdt::http
