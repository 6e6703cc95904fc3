#pragma once
// JSON-over-HTTP POST with timeout and bounded retries. Internal to the library.

#include <chrono>
#include <string>

#include <json.hpp>

namespace ecrd::detail {

struct HttpTarget {
    std::string base;  // scheme://host:port
    std::string path;  // always starts with '/'
};

HttpTarget split_endpoint(const std::string& endpoint);

struct PostOptions {
    std::chrono::milliseconds timeout{30'000};
    int max_retries = 0;
    std::chrono::milliseconds retry_backoff{100};
    std::string auth_env;
};

/// Throws ecrd::BackendError. Transport failures, timeouts and 5xx are retried;
/// 4xx and unparsable bodies are not.
nlohmann::json post_json(const HttpTarget& target, const nlohmann::json& body, const PostOptions& opts);

}  // namespace ecrd::detail
