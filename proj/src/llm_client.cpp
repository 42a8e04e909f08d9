#include "dpl/llm_client.hpp"

#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include "dpl/digest.hpp"
#include "dpl/error.hpp"
#include "httplib.h"
#include "json.hpp"

namespace dpl::llm {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string format_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

void append_field(std::string& out, std::string_view value) {
    out += std::to_string(value.size());
    out += ':';
    out += value;
    out += ';';
}

std::string lowercase(std::string_view text) {
    std::string out(text);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return char(std::tolower(c)); });
    return out;
}

}  // namespace

std::string cache_key(const ChatRequest& request) {
    std::string canonical;
    append_field(canonical, request.model);
    append_field(canonical, request.system);
    append_field(canonical, request.user);
    append_field(canonical, format_real(request.temperature));
    append_field(canonical, format_real(request.top_p));
    append_field(canonical, std::to_string(request.max_tokens));
    append_field(canonical, request.seed_tag);
    return sha256_hex(canonical);
}

std::string MockBackend::token(const std::string& seed_text) {
    return "mk" + sha256_hex(seed_text).substr(0, 12);
}

ChatResponse MockBackend::complete(const ChatRequest& request) {
    calls_.fetch_add(1);
    const std::string digest = cache_key(request);
    const std::string sys = lowercase(request.system);

    ChatResponse response;
    if (sys.find("evaluat") != std::string::npos) {
        const unsigned score = unsigned(sha256_u64(digest) % 11);
        response.text = "Score: " + std::to_string(score);
        return response;
    }
    if (sys.find("summar") != std::string::npos) {
        // Echo every mk-token visible in the user prompt, first
        // occurrence order, so downstream asserts can trace inputs.
        std::vector<std::string> found;
        const std::string& u = request.user;
        for (std::size_t i = 0; i + 14 <= u.size(); ++i) {
            if (u[i] != 'm' || u[i + 1] != 'k') continue;
            bool hex = true;
            for (std::size_t j = i + 2; j < i + 14; ++j) {
                char c = u[j];
                if (!((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'))) {
                    hex = false;
                    break;
                }
            }
            if (!hex) continue;
            std::string tok = u.substr(i, 14);
            if (std::find(found.begin(), found.end(), tok) == found.end())
                found.push_back(tok);
        }
        std::ostringstream os;
        os << "Preference summary " << token(digest) << ":";
        for (const auto& t : found) os << ' ' << t;
        response.text = os.str();
        return response;
    }
    if (sys.find("differen") != std::string::npos) {
        std::ostringstream os;
        os << "Writing Style: the target review leans on marker "
           << token(digest + ":writing") << " relative to the peers.\n"
           << "Emotional Style: overall polarity marker "
           << token(digest + ":emotional") << ".\n"
           << "Semantic Style: structure and focus marker "
           << token(digest + ":semantic") << ".";
        response.text = os.str();
        return response;
    }
    response.text = "Generated review draft " + token(digest) +
                    ". The item lives up to its title and the requested "
                    "rating; this text stands in for a model completion. "
                    "(trace " + token(digest) + ")";
    return response;
}

ChatResponse RemoteChatBackend::complete(const ChatRequest& request) {
    httplib::Client client(options_.base_url);
    client.set_connection_timeout(options_.timeout_s);
    client.set_read_timeout(options_.timeout_s);
    httplib::Headers headers;
    if (!options_.auth_token.empty())
        headers.emplace("Authorization", "Bearer " + options_.auth_token);

    json body;
    body["model"] = request.model;
    body["messages"] = json::array({{{"role", "system"}, {"content", request.system}},
                                    {{"role", "user"}, {"content", request.user}}});
    body["temperature"] = request.temperature;
    body["top_p"] = request.top_p;
    body["max_tokens"] = request.max_tokens;
    if (!request.seed_tag.empty())
        body["seed"] = std::int64_t(sha256_u64(request.seed_tag) & 0x7fffffff);
    const std::string payload = body.dump();

    const auto start = std::chrono::steady_clock::now();
    std::string last_error;
    int last_status = 0;
    for (int attempt = 0; attempt <= options_.max_retries; ++attempt) {
        if (attempt > 0)
            std::this_thread::sleep_for(
                std::chrono::milliseconds(options_.backoff_ms << (attempt - 1)));
        auto res = client.Post("/v1/chat/completions", headers, payload,
                               "application/json");
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        last_status = res->status;
        if (res->status == 429 || res->status >= 500) {
            last_error = "status " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200)
            throw BackendError("chat endpoint " + options_.base_url +
                                   " returned status " +
                                   std::to_string(res->status) + ": " + res->body,
                               res->status);
        json parsed = json::parse(res->body, nullptr, false);
        if (parsed.is_discarded() || !parsed.contains("choices") ||
            parsed["choices"].empty())
            throw BackendError("chat endpoint returned malformed body");
        ChatResponse response;
        response.text =
            parsed["choices"][0]["message"].value("content", std::string());
        response.retries = attempt;
        response.latency_ms = int(std::chrono::duration_cast<std::chrono::milliseconds>(
                                      std::chrono::steady_clock::now() - start)
                                      .count());
        return response;
    }
    throw BackendError("chat endpoint " + options_.base_url +
                           " failed after retries: " + last_error,
                       last_status);
}

void DispatchBackend::add(const std::string& model,
                          std::shared_ptr<ChatBackend> backend) {
    routes_[model] = std::move(backend);
}

ChatResponse DispatchBackend::complete(const ChatRequest& request) {
    auto it = routes_.find(request.model);
    if (it == routes_.end())
        throw ConfigError("no backend configured for model " + request.model);
    return it->second->complete(request);
}

LlmClient::LlmClient(ChatBackend& backend, std::filesystem::path cache_dir,
                     int max_concurrency)
    : backend_(backend),
      cache_dir_(std::move(cache_dir)),
      slots_(std::max(1, max_concurrency)) {}

ChatResponse LlmClient::complete(const ChatRequest& request) {
    slots_.acquire();
    ChatResponse response;
    try {
        response = backend_.complete(request);
    } catch (...) {
        slots_.release();
        throw;
    }
    slots_.release();
    return response;
}

std::filesystem::path LlmClient::entry_path(const std::string& key) const {
    return cache_dir_ / key.substr(0, 2) / key;
}

std::optional<std::string> LlmClient::read_entry(const std::string& key) const {
    std::ifstream in(entry_path(key), std::ios::binary);
    if (!in) return std::nullopt;
    std::stringstream buffer;
    buffer << in.rdbuf();
    json j = json::parse(buffer.str(), nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("text") ||
        !j["text"].is_string())
        return std::nullopt;
    return j["text"].get<std::string>();
}

void LlmClient::write_entry(const std::string& key, const ChatRequest& request,
                            const std::string& text) {
    const auto path = entry_path(key);
    std::filesystem::create_directories(path.parent_path());
    ordered_json j;
    j["model"] = request.model;
    j["system"] = request.system;
    j["user"] = request.user;
    j["temperature"] = request.temperature;
    j["top_p"] = request.top_p;
    j["max_tokens"] = request.max_tokens;
    j["seed_tag"] = request.seed_tag;
    j["text"] = text;

    const auto tmp = path.parent_path() /
                     (key + ".tmp." + std::to_string(temp_counter_.fetch_add(1)) +
                      "." + std::to_string(::getpid()));
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw Error("cannot write cache entry: " + tmp.string());
        out << j.dump();
    }
    std::filesystem::rename(tmp, path);
}

ChatResponse LlmClient::cached_complete(const ChatRequest& request) {
    const std::string key = cache_key(request);
    if (auto stored = read_entry(key)) {
        ChatResponse response;
        response.text = std::move(*stored);
        response.from_cache = true;
        return response;
    }
    ChatResponse response = complete(request);
    write_entry(key, request, response.text);
    return response;
}

}  // namespace dpl::llm
