#include "dpl/embedding.hpp"

#include <chrono>
#include <thread>

#include "dpl/digest.hpp"
#include "dpl/error.hpp"
#include "httplib.h"
#include "json.hpp"

namespace dpl::user {

using nlohmann::json;

std::vector<Vec> HashedTrigramBackend::embed(
    const std::vector<std::string>& texts) {
    std::vector<Vec> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(embed_one(t));
    return out;
}

Vec HashedTrigramBackend::embed_one(const std::string& text) const {
    Vec v = Vec::Zero(dim_);
    if (text.size() < 3) {
        v[fnv1a64(text) % std::uint64_t(dim_)] += 1.0;
    } else {
        for (std::size_t i = 0; i + 3 <= text.size(); ++i) {
            std::string_view gram(text.data() + i, 3);
            v[fnv1a64(gram) % std::uint64_t(dim_)] += 1.0;
        }
    }
    const double norm = v.norm();
    if (norm > 0.0) v /= norm;
    return v;
}

std::vector<Vec> RemoteEmbedBackend::embed(const std::vector<std::string>& texts) {
    std::vector<Vec> out;
    out.reserve(texts.size());

    httplib::Client client(options_.base_url);
    client.set_connection_timeout(options_.timeout_s);
    client.set_read_timeout(options_.timeout_s);
    httplib::Headers headers;
    if (!options_.auth_token.empty())
        headers.emplace("Authorization", "Bearer " + options_.auth_token);

    for (std::size_t start = 0; start < texts.size();
         start += std::size_t(options_.batch_size)) {
        const std::size_t end =
            std::min(texts.size(), start + std::size_t(options_.batch_size));
        json body;
        body["model"] = options_.model;
        body["input"] = json::array();
        for (std::size_t i = start; i < end; ++i) body["input"].push_back(texts[i]);

        std::string last_error;
        bool done = false;
        for (int attempt = 0; attempt <= options_.max_retries && !done; ++attempt) {
            if (attempt > 0)
                std::this_thread::sleep_for(std::chrono::milliseconds(
                    options_.backoff_ms << (attempt - 1)));
            auto res = client.Post("/v1/embeddings", headers, body.dump(),
                                   "application/json");
            if (!res) {
                last_error = "transport error: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status == 429 || res->status >= 500) {
                last_error = "status " + std::to_string(res->status);
                continue;
            }
            if (res->status != 200)
                throw BackendError("embeddings endpoint " + options_.base_url +
                                       " returned status " +
                                       std::to_string(res->status),
                                   res->status);
            json parsed = json::parse(res->body, nullptr, false);
            if (parsed.is_discarded() || !parsed.contains("data"))
                throw BackendError("embeddings endpoint returned malformed body");
            std::vector<Vec> batch(end - start);
            for (const auto& entry : parsed["data"]) {
                std::size_t idx = entry.value("index", 0);
                if (idx >= batch.size())
                    throw BackendError("embeddings response index out of range");
                const auto& values = entry["embedding"];
                Vec v(values.size());
                for (std::size_t k = 0; k < values.size(); ++k)
                    v[Eigen::Index(k)] = values[k].get<double>();
                const double norm = v.norm();
                if (norm > 0.0) v /= norm;
                batch[idx] = std::move(v);
            }
            for (auto& v : batch) {
                if (v.size() == 0)
                    throw BackendError("embeddings response missing an entry");
                if (dim_ == 0) dim_ = int(v.size());
                out.push_back(std::move(v));
            }
            done = true;
        }
        if (!done)
            throw BackendError("embeddings endpoint " + options_.base_url +
                               " failed after retries: " + last_error);
    }
    return out;
}

double cosine(const Vec& a, const Vec& b) {
    const double na = a.norm();
    const double nb = b.norm();
    if (na == 0.0 || nb == 0.0) return 0.0;
    return a.dot(b) / (na * nb);
}

Vec mean_embedding(const std::vector<std::string>& texts, EmbedBackend& backend) {
    if (texts.empty()) throw Error("mean_embedding: no texts");
    auto embs = backend.embed(texts);
    Vec sum = Vec::Zero(embs.front().size());
    for (const auto& v : embs) sum += v;
    return sum / double(embs.size());
}

}  // namespace dpl::user
