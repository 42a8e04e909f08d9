#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <semaphore>
#include <string>

namespace dpl::llm {

struct ChatRequest {
    std::string model;
    std::string system;
    std::string user;
    double temperature = 0.2;  // in [0, 2]
    double top_p = 0.95;
    int max_tokens = 2048;
    std::string seed_tag;  // distinguishes judge repetitions
};

struct ChatResponse {
    std::string text;
    bool from_cache = false;
    int latency_ms = 0;
    int retries = 0;
};

/// Content-addressed key over every request field. Equal inputs map to
/// equal keys; any field change produces a different key.
std::string cache_key(const ChatRequest& request);

class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    virtual ChatResponse complete(const ChatRequest& request) = 0;
};

/// Deterministic offline backend. Responses are derived from the request
/// digest and follow a fixed grammar per prompt role so pipeline tests
/// can assert structure and information flow:
///   - judge prompts ("evaluat" in the system text): "Score: d" with
///     d = digest mod 11;
///   - summarizer prompts ("summar"): every mk-token found in the user
///     prompt, echoed after a token of its own;
///   - difference prompts ("differen"): Writing/Emotional/Semantic
///     sections, each carrying a digest-derived token;
///   - anything else: a fixed-template review embedding the digest token.
class MockBackend final : public ChatBackend {
public:
    ChatResponse complete(const ChatRequest& request) override;
    long calls() const { return calls_.load(); }

    /// "mk" + first 12 hex chars of sha256(seed_text).
    static std::string token(const std::string& seed_text);

private:
    std::atomic<long> calls_{0};
};

struct RemoteOptions {
    std::string base_url;
    std::string auth_token;
    int max_retries = 3;
    int backoff_ms = 1000;  // doubles per retry: 1s, 2s, 4s
    int timeout_s = 300;
};

/// POSTs to {base_url}/v1/chat/completions with the standard message
/// array. Retries 429/5xx/transport errors with exponential backoff;
/// other 4xx raise immediately.
class RemoteChatBackend final : public ChatBackend {
public:
    explicit RemoteChatBackend(RemoteOptions options)
        : options_(std::move(options)) {}
    ChatResponse complete(const ChatRequest& request) override;

private:
    RemoteOptions options_;
};

/// Routes requests to a backend by model name; used when roles live on
/// different servers.
class DispatchBackend final : public ChatBackend {
public:
    void add(const std::string& model, std::shared_ptr<ChatBackend> backend);
    ChatResponse complete(const ChatRequest& request) override;

private:
    std::map<std::string, std::shared_ptr<ChatBackend>> routes_;
};

/// Shared client for all model roles: bounded concurrency plus a
/// content-addressed response cache (one file per key under
/// cache_dir/<first-2-hex>/<digest>, written atomically).
class LlmClient {
public:
    LlmClient(ChatBackend& backend, std::filesystem::path cache_dir,
              int max_concurrency = 8);

    /// Backend call without cache involvement.
    ChatResponse complete(const ChatRequest& request);

    /// Cache hit returns the stored text with zero backend calls; a miss
    /// calls the backend and stores the text via write-temp-then-rename.
    /// Corrupt cache entries are treated as misses and replaced.
    ChatResponse cached_complete(const ChatRequest& request);

    const std::filesystem::path& cache_dir() const { return cache_dir_; }

private:
    std::filesystem::path entry_path(const std::string& key) const;
    std::optional<std::string> read_entry(const std::string& key) const;
    void write_entry(const std::string& key, const ChatRequest& request,
                     const std::string& text);

    ChatBackend& backend_;
    std::filesystem::path cache_dir_;
    std::counting_semaphore<> slots_;
    std::atomic<long> temp_counter_{0};
};

}  // namespace dpl::llm
