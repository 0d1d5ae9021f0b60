#pragma once

// Small blocking JSON-over-HTTP(S) client shared by the remote embedding and
// chat backends.

#include <chrono>
#include <stdexcept>
#include <string>

namespace cdt::http {

struct Response {
  int status = 0;
  std::string body;
};

/// Connection-level failure (DNS, refused, TLS, timeout). No HTTP status.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// POSTs body as application/json to url (http:// or https://). bearer_token
/// is sent as an Authorization header when non-empty.
Response post_json(const std::string& url, const std::string& bearer_token,
                   const std::string& body,
                   std::chrono::seconds timeout = std::chrono::seconds(60));

/// True for statuses worth retrying: 408, 429 and 5xx.
bool is_retryable_status(int status);

}  // namespace cdt::http
