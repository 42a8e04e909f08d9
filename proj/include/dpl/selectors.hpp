#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "dpl/corpus.hpp"
#include "dpl/embedding.hpp"

namespace dpl::user {

struct Representative {
    std::string user_id;
    corpus::Review review;  // the user's review on the focused item
};

/// Ordered representative users for one item comparison; never contains
/// the target user, ids pairwise distinct.
struct RepresentativeSet {
    std::vector<Representative> members;

    std::size_t size() const { return members.size(); }
    bool empty() const { return members.empty(); }
};

/// Cluster-center selection: embeds every review on the item, clusters
/// into K+1 groups, and returns per non-target cluster the user whose
/// review embedding is nearest that cluster's centroid (ties to the
/// smallest user_id), ordered by cluster index. When the item has at
/// most K other users, returns them all ordered by user_id.
RepresentativeSet select_representatives(
    const std::vector<corpus::Review>& item_reviews,
    const std::string& target_user, int K, std::uint64_t seed,
    EmbedBackend& backend);

/// Seeded uniform sample (without replacement) of K other users.
RepresentativeSet select_random(const std::vector<corpus::Review>& item_reviews,
                                const std::string& target_user, int K,
                                std::uint64_t seed);

/// The K other users least similar to the target by cosine of review
/// embeddings, most different first; ties to the smallest user_id.
RepresentativeSet select_simrank(const std::vector<corpus::Review>& item_reviews,
                                 const std::string& target_user, int K,
                                 EmbedBackend& backend);

struct UserHistory {
    std::string user_id;
    std::vector<std::string> texts;  // at least one profile review text
};

struct UniquenessSplit {
    std::set<std::string> unique;
    std::set<std::string> non_unique;
};

/// Median partition by Euclidean distance of each user's mean profile
/// embedding from the population center. Users at or below the median
/// rank (ties broken by user_id) land in non_unique; with an odd count
/// the median user is non_unique, so sizes differ by at most one.
UniquenessSplit uniqueness_split(const std::vector<UserHistory>& users,
                                 EmbedBackend& backend);

}  // namespace dpl::user
