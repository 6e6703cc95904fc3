#include "http_json.hpp"

#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "ecrd/model_backend.hpp"

namespace ecrd::detail {

HttpTarget split_endpoint(const std::string& endpoint) {
    const auto scheme = endpoint.find("://");
    if (scheme == std::string::npos) {
        throw std::invalid_argument("endpoint must look like http://host:port/path: " + endpoint);
    }
    const auto slash = endpoint.find('/', scheme + 3);
    if (slash == std::string::npos) return {endpoint, "/"};
    return {endpoint.substr(0, slash), endpoint.substr(slash)};
}

namespace {

bool is_timeout(httplib::Error err) {
    return err == httplib::Error::Read || err == httplib::Error::Write ||
           err == httplib::Error::ConnectionTimeout;
}

}  // namespace

nlohmann::json post_json(const HttpTarget& target, const nlohmann::json& body, const PostOptions& opts) {
    const std::string payload = body.dump();
    httplib::Headers headers;
    if (!opts.auth_env.empty()) {
        if (const char* token = std::getenv(opts.auth_env.c_str()); token && *token) {
            headers.emplace("Authorization", std::string("Bearer ") + token);
        }
    }

    const int attempts_allowed = 1 + std::max(0, opts.max_retries);
    for (int attempt = 1;; ++attempt) {
        httplib::Client client(target.base);
        const auto secs = std::chrono::duration_cast<std::chrono::seconds>(opts.timeout);
        const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(opts.timeout - secs);
        client.set_connection_timeout(secs.count(), usecs.count());
        client.set_read_timeout(secs.count(), usecs.count());
        client.set_write_timeout(secs.count(), usecs.count());

        auto res = client.Post(target.path, headers, payload, "application/json");

        BackendError::Kind kind;
        std::string what;
        bool retryable = true;
        if (!res) {
            const auto err = res.error();
            kind = is_timeout(err) ? BackendError::Kind::timeout : BackendError::Kind::transport;
            what = "POST " + target.base + target.path + " failed: " + httplib::to_string(err);
        } else if (res->status < 200 || res->status >= 300) {
            kind = BackendError::Kind::http_status;
            what = "POST " + target.base + target.path + " returned HTTP " + std::to_string(res->status);
            retryable = res->status >= 500 || res->status == 429;
        } else {
            try {
                return nlohmann::json::parse(res->body);
            } catch (const nlohmann::json::parse_error& e) {
                throw BackendError(BackendError::Kind::malformed,
                                   std::string("unparsable response body: ") + e.what(), attempt, false);
            }
        }

        if (!retryable || attempt >= attempts_allowed) {
            throw BackendError(kind, what + " (attempt " + std::to_string(attempt) + ")", attempt, retryable);
        }
        std::this_thread::sleep_for(opts.retry_backoff * attempt);
    }
}

}  // namespace ecrd::detail
