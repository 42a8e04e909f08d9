#include "dpl/retrieval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "dpl/error.hpp"

namespace dpl::retrieval {

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (char ch : text) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (c < 128 && std::isalnum(c)) {
            current.push_back(char(std::tolower(c)));
        } else if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

Bm25Index build_index(const std::vector<std::string>& docs, double k1, double b) {
    if (docs.empty()) throw Error("bm25: document set is empty");
    Bm25Index index;
    index.k1 = k1;
    index.b = b;
    index.doc_tokens.reserve(docs.size());
    index.doc_term_counts.reserve(docs.size());
    std::size_t total_len = 0;
    for (const std::string& doc : docs) {
        auto tokens = tokenize(doc);
        total_len += tokens.size();
        std::unordered_map<std::string, int> counts;
        for (const auto& t : tokens) ++counts[t];
        for (const auto& [t, c] : counts) ++index.doc_freq[t];
        index.doc_tokens.push_back(std::move(tokens));
        index.doc_term_counts.push_back(std::move(counts));
    }
    if (total_len == 0) throw Error("bm25: every document tokenizes to nothing");
    index.avg_doc_len = double(total_len) / double(docs.size());
    return index;
}

double score(const Bm25Index& index, const std::vector<std::string>& query_tokens,
             std::size_t doc_id) {
    const auto& counts = index.doc_term_counts.at(doc_id);
    const double len = double(index.doc_tokens[doc_id].size());
    const double norm = index.k1 * (1.0 - index.b + index.b * len / index.avg_doc_len);
    const double d = double(index.size());
    double total = 0.0;
    for (const std::string& term : query_tokens) {
        auto tf_it = counts.find(term);
        if (tf_it == counts.end()) continue;
        auto df_it = index.doc_freq.find(term);
        const double df = double(df_it->second);
        const double idf = std::log((d - df + 0.5) / (df + 0.5) + 1.0);
        const double tf = double(tf_it->second);
        total += idf * (tf * (index.k1 + 1.0)) / (tf + norm);
    }
    return total;
}

std::string review_document(const corpus::Review& review) {
    return review.review_title + " " + review.text;
}

RetrievedSet retrieve(const std::vector<corpus::Review>& profile,
                      const std::string& query, std::size_t n, double k1,
                      double b) {
    RetrievedSet result;
    if (profile.empty() || n == 0) return result;

    std::vector<std::string> docs;
    docs.reserve(profile.size());
    for (const auto& r : profile) docs.push_back(review_document(r));
    Bm25Index index = build_index(docs, k1, b);
    auto query_tokens = tokenize(query);

    std::vector<std::size_t> order(profile.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> scores(profile.size());
    for (std::size_t i = 0; i < profile.size(); ++i)
        scores[i] = score(index, query_tokens, i);

    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b2) {
        if (scores[a] != scores[b2]) return scores[a] > scores[b2];
        if (profile[a].timestamp != profile[b2].timestamp)
            return profile[a].timestamp > profile[b2].timestamp;
        return profile[a].item_id < profile[b2].item_id;
    });

    const std::size_t take = std::min(n, profile.size());
    result.hits.reserve(take);
    for (std::size_t i = 0; i < take; ++i)
        result.hits.push_back({profile[order[i]], scores[order[i]]});
    return result;
}

}  // namespace dpl::retrieval
