#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

namespace dpl::user {

using Vec = Eigen::VectorXd;

/// Produces one unit-norm embedding per input text.
class EmbedBackend {
public:
    virtual ~EmbedBackend() = default;
    virtual std::vector<Vec> embed(const std::vector<std::string>& texts) = 0;
    virtual int dim() const = 0;
};

/// Deterministic offline fallback: hashed character-trigram frequency
/// vector, L2-normalized. Texts shorter than three characters hash as a
/// single gram, so every input maps to a unit vector.
class HashedTrigramBackend final : public EmbedBackend {
public:
    explicit HashedTrigramBackend(int dim = 256) : dim_(dim) {}
    std::vector<Vec> embed(const std::vector<std::string>& texts) override;
    int dim() const override { return dim_; }

    Vec embed_one(const std::string& text) const;

private:
    int dim_;
};

struct RemoteEmbedOptions {
    std::string base_url;
    std::string model;
    std::string auth_token;
    int batch_size = 128;
    int max_retries = 3;
    int backoff_ms = 1000;
    int timeout_s = 120;
};

/// Talks to a /v1/embeddings endpoint; responses are L2-normalized on
/// the way out. Retries transport errors, 429 and 5xx with exponential
/// backoff; other 4xx fail immediately.
class RemoteEmbedBackend final : public EmbedBackend {
public:
    explicit RemoteEmbedBackend(RemoteEmbedOptions options)
        : options_(std::move(options)) {}
    std::vector<Vec> embed(const std::vector<std::string>& texts) override;
    int dim() const override { return dim_; }

private:
    RemoteEmbedOptions options_;
    int dim_ = 0;  // learned from the first response
};

/// Cosine similarity; 0 when either vector has zero norm.
double cosine(const Vec& a, const Vec& b);

/// Mean of the unit embeddings of `texts` (not renormalized).
Vec mean_embedding(const std::vector<std::string>& texts, EmbedBackend& backend);

}  // namespace dpl::user
