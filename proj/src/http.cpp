#include "deepterra/http.hpp"

#include "deepterra/error.hpp"

#include <thread>

#include "httplib.h"

namespace deepterra::http {

void RateLimiter::acquire()
{
  if (rps_ <= 0.0) return;
  std::chrono::steady_clock::time_point slot;
  {
    std::lock_guard lock(mu_);
    const auto now = std::chrono::steady_clock::now();
    slot = std::max(now, next_);
    next_ = slot + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                       std::chrono::duration<double>(1.0 / rps_));
  }
  std::this_thread::sleep_until(slot);
}

ParsedUrl parse_url(const std::string& url)
{
  const auto scheme_end = url.find("://");
  require(scheme_end != std::string::npos, ErrorKind::Domain, "malformed URL: " + url);
  const std::string scheme = url.substr(0, scheme_end);
  require(scheme == "http" || scheme == "https", ErrorKind::Domain, "unsupported URL scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  ParsedUrl out;
  out.origin = url.substr(0, path_start);
  out.path = path_start == std::string::npos ? "/" : url.substr(path_start);
  require(out.origin.size() > scheme_end + 3, ErrorKind::Domain, "URL has no host: " + url);
  return out;
}

Response get(const std::string& url, const GetOptions& opts)
{
  const auto parsed = parse_url(url);
  httplib::Client cli(parsed.origin);
  cli.set_follow_location(true);
  cli.set_connection_timeout(opts.timeout);
  cli.set_read_timeout(opts.timeout);
  if (!opts.bearer_token.empty()) cli.set_bearer_token_auth(opts.bearer_token);

  std::string last_error = "no attempt made";
  auto backoff = opts.retry.base_backoff;
  for (int attempt = 0; attempt <= opts.retry.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
    if (opts.limiter) opts.limiter->acquire();

    Bytes body;
    bool over_cap = false;
    auto res = cli.Get(
        parsed.path, httplib::Headers{},
        [&](const httplib::Response& r) {
          if (opts.max_bytes > 0 && r.has_header("Content-Length")) {
            const auto len = std::stoull(r.get_header_value("Content-Length"));
            if (len > opts.max_bytes) {
              over_cap = true;
              return false;
            }
          }
          return true;
        },
        [&](const char* data, std::size_t n) {
          body.insert(body.end(), data, data + n);
          if (opts.max_bytes > 0 && body.size() > opts.max_bytes) {
            over_cap = true;
            return false;
          }
          return true;
        });
    if (over_cap)
      fail(ErrorKind::Cap, "download of " + url + " exceeds cap of " +
                               std::to_string(opts.max_bytes) + " bytes");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      if (attempt < opts.retry.max_retries) continue;
    }
    return Response{res->status, std::move(body), attempt + 1};
  }
  fail(ErrorKind::Fetch, "GET " + url + " failed after " + std::to_string(opts.retry.max_retries) +
                             " retries: " + last_error);
}

}  // namespace deepterra::http
