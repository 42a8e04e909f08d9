#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dpl/corpus.hpp"

namespace dpl::retrieval {

/// Lowercases and splits on any non-alphanumeric byte; empty tokens are
/// dropped. No stemming. Bytes outside ASCII count as separators.
std::vector<std::string> tokenize(std::string_view text);

/// Okapi BM25 index over a fixed document set.
struct Bm25Index {
    std::vector<std::vector<std::string>> doc_tokens;
    std::vector<std::unordered_map<std::string, int>> doc_term_counts;
    std::unordered_map<std::string, int> doc_freq;
    double avg_doc_len = 0.0;
    double k1 = 1.2;
    double b = 0.75;

    std::size_t size() const { return doc_tokens.size(); }
};

/// Builds the index. Throws when docs is empty or every document
/// tokenizes to nothing (avg_doc_len would be 0).
Bm25Index build_index(const std::vector<std::string>& docs, double k1 = 1.2,
                      double b = 0.75);

/// Okapi score of one document against the query tokens. Duplicated
/// query tokens contribute additively. IDF uses the nonnegative
/// ln((D - df + 0.5)/(df + 0.5) + 1) variant.
double score(const Bm25Index& index, const std::vector<std::string>& query_tokens,
             std::size_t doc_id);

struct ScoredReview {
    corpus::Review review;
    double score = 0.0;
};

/// The top-n key history elements for one task, in retrieval order.
struct RetrievedSet {
    std::vector<ScoredReview> hits;  // scores non-increasing

    std::size_t size() const { return hits.size(); }
    bool empty() const { return hits.empty(); }
};

/// Document text used for a profile review: title + " " + body.
std::string review_document(const corpus::Review& review);

/// Scores every profile review against the query and returns the top n,
/// ties broken by more recent timestamp first, then item_id ascending.
/// An empty profile yields an empty set.
RetrievedSet retrieve(const std::vector<corpus::Review>& profile,
                      const std::string& query, std::size_t n, double k1 = 1.2,
                      double b = 0.75);

}  // namespace dpl::retrieval
