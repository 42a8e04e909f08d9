#pragma once

// Brute-force reference implementations used only by tests. These are
// written independently of the library code paths they check: plain
// scans, no indexes, and (where order could matter) a different rule
// order, so agreement is meaningful.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "dpl/corpus.hpp"

namespace corpus = dpl::corpus;

namespace oracles {

struct OracleCurated {
    std::vector<corpus::Review> reviews;  // sorted by (user, item)
    std::set<std::string> items;
};

/// Re-applies every curation rule until nothing changes. User rule runs
/// before the item rule here (opposite of the library) — the surviving
/// set is the same closure either way.
inline OracleCurated brute_force_curate(std::vector<corpus::Review> reviews,
                                        std::map<std::string, corpus::Item> items,
                                        const corpus::CurationRules& rules) {
    // Length filters.
    {
        std::vector<corpus::Review> kept;
        for (auto& r : reviews)
            if (corpus::utf8_length(r.text) >= rules.min_text_chars)
                kept.push_back(r);
        reviews = kept;
    }
    if (!rules.yelp_mode) {
        for (auto it = items.begin(); it != items.end();) {
            const std::size_t len = corpus::utf8_length(it->second.description);
            if (len < rules.min_description_chars ||
                len > rules.max_description_chars)
                it = items.erase(it);
            else
                ++it;
        }
    }
    {
        std::vector<corpus::Review> kept;
        for (auto& r : reviews)
            if (items.count(r.item_id)) kept.push_back(r);
        reviews = kept;
    }
    // Dedup keeping max (timestamp, title, text).
    {
        std::map<std::pair<std::string, std::string>, corpus::Review> best;
        for (auto& r : reviews) {
            auto key = std::make_pair(r.user_id, r.item_id);
            auto it = best.find(key);
            auto rank = [](const corpus::Review& x) {
                return std::tie(x.timestamp, x.review_title, x.text);
            };
            if (it == best.end() || rank(it->second) < rank(r)) best[key] = r;
        }
        reviews.clear();
        for (auto& [key, r] : best) reviews.push_back(r);
    }
    // Fixed point, user rule first.
    bool changed = true;
    while (changed) {
        changed = false;
        std::map<std::string, std::size_t> user_counts;
        for (auto& r : reviews) ++user_counts[r.user_id];
        std::vector<corpus::Review> kept;
        for (auto& r : reviews) {
            const std::size_t c = user_counts[r.user_id];
            if (c < rules.min_reviews_per_user || c > rules.max_reviews_per_user)
                changed = true;
            else
                kept.push_back(r);
        }
        reviews = kept;

        std::map<std::string, std::set<std::string>> reviewers;
        for (auto& r : reviews) reviewers[r.item_id].insert(r.user_id);
        kept.clear();
        for (auto& r : reviews) {
            if (reviewers[r.item_id].size() < rules.min_reviewers_per_item)
                changed = true;
            else
                kept.push_back(r);
        }
        reviews = kept;
    }

    OracleCurated out;
    out.reviews = reviews;
    std::sort(out.reviews.begin(), out.reviews.end(),
              [](const corpus::Review& a, const corpus::Review& b) {
                  return std::tie(a.user_id, a.item_id) <
                         std::tie(b.user_id, b.item_id);
              });
    for (auto& r : out.reviews) out.items.insert(r.item_id);
    return out;
}

struct OracleSample {
    std::string user_id;
    std::string item_id;
    std::size_t profile_size = 0;
};

struct OracleSplits {
    std::vector<OracleSample> train, val, test;
};

/// Enumerates the temporal splits straight from the definitions.
inline OracleSplits brute_force_splits(const std::vector<corpus::Review>& curated) {
    std::map<std::string, std::vector<corpus::Review>> by_user;
    std::map<std::string, std::set<std::string>> reviewers;
    for (const auto& r : curated) {
        by_user[r.user_id].push_back(r);
        reviewers[r.item_id].insert(r.user_id);
    }
    for (auto& [user, list] : by_user)
        std::sort(list.begin(), list.end(),
                  [](const corpus::Review& a, const corpus::Review& b) {
                      return std::tie(a.timestamp, a.item_id) <
                             std::tie(b.timestamp, b.item_id);
                  });

    OracleSplits out;
    for (auto& [user, list] : by_user) {
        const std::size_t R = list.size();
        auto profile_size = [&](std::size_t target_idx) {
            std::size_t n = 0;
            for (std::size_t j = 0; j < R; ++j)
                if (list[j].timestamp < list[target_idx].timestamp) ++n;
            return n;
        };
        auto eval_ok = [&](std::size_t target_idx) {
            if (profile_size(target_idx) < 8) return false;
            if (reviewers[list[target_idx].item_id].size() < 5) return false;
            for (std::size_t j = 0; j < R; ++j)
                if (list[j].timestamp < list[target_idx].timestamp &&
                    reviewers[list[j].item_id].size() < 5)
                    return false;
            return true;
        };
        auto sample_at = [&](std::size_t idx) {
            return OracleSample{user, list[idx].item_id, profile_size(idx)};
        };
        // Recency positions 10..3 (train), 2 (val), 1 (test).
        for (std::size_t recency = std::min<std::size_t>(R, 10); recency >= 3;
             --recency)
            out.train.push_back(sample_at(R - recency));
        if (R >= 2 && eval_ok(R - 2)) out.val.push_back(sample_at(R - 2));
        if (R >= 1 && eval_ok(R - 1)) out.test.push_back(sample_at(R - 1));
    }
    return out;
}

/// Adjusted Rand index between two labelings of the same points.
inline double adjusted_rand_index(const std::vector<int>& a,
                                  const std::vector<int>& b) {
    const std::size_t n = a.size();
    std::map<std::pair<int, int>, double> cells;
    std::map<int, double> row_sums, col_sums;
    for (std::size_t i = 0; i < n; ++i) {
        cells[{a[i], b[i]}] += 1;
        row_sums[a[i]] += 1;
        col_sums[b[i]] += 1;
    }
    auto choose2 = [](double m) { return m * (m - 1.0) / 2.0; };
    double index = 0.0, rows = 0.0, cols = 0.0;
    for (auto& [cell, count] : cells) index += choose2(count);
    for (auto& [row, count] : row_sums) rows += choose2(count);
    for (auto& [col, count] : col_sums) cols += choose2(count);
    const double total = choose2(double(n));
    const double expected = rows * cols / total;
    const double max_index = (rows + cols) / 2.0;
    if (max_index == expected) return 1.0;
    return (index - expected) / (max_index - expected);
}

}  // namespace oracles
