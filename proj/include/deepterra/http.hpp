#pragma once

// Thin blocking HTTP GET with bounded retries, exponential backoff, an
// optional size cap and a shared rate limiter.

#include "deepterra/image.hpp"

#include <chrono>
#include <cstddef>
#include <mutex>
#include <string>

namespace deepterra::http {

struct RetryPolicy {
  int max_retries = 3;
  std::chrono::milliseconds base_backoff{200};
};

class RateLimiter {
 public:
  // requests_per_second <= 0 disables limiting.
  explicit RateLimiter(double requests_per_second = 0.0) : rps_(requests_per_second) {}

  void acquire();

 private:
  double rps_;
  std::mutex mu_;
  std::chrono::steady_clock::time_point next_{};
};

struct GetOptions {
  RetryPolicy retry;
  std::size_t max_bytes = 0;  // 0 = unlimited
  std::string bearer_token;
  std::chrono::seconds timeout{30};
  RateLimiter* limiter = nullptr;
};

struct Response {
  int status = 0;
  Bytes body;
  int attempts = 0;
};

struct ParsedUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;    // starts with '/'
};

ParsedUrl parse_url(const std::string& url);

// Retries connection failures, 429 and 5xx. Other statuses are returned as-is.
// Throws Fetch when no response was obtained after all retries and Cap when
// the body exceeds max_bytes.
Response get(const std::string& url, const GetOptions& opts = {});

}  // namespace deepterra::http
