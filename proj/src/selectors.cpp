#include "dpl/selectors.hpp"

#include <algorithm>
#include <limits>
#include <random>

#include "dpl/error.hpp"
#include "dpl/kmeans.hpp"
#include "dpl/retrieval.hpp"

namespace dpl::user {
namespace {

struct Others {
    std::vector<corpus::Review> reviews;  // sorted by user_id
    const corpus::Review* target = nullptr;
};

Others split_target(const std::vector<corpus::Review>& item_reviews,
                    const std::string& target_user) {
    Others out;
    for (const auto& r : item_reviews) {
        if (r.user_id == target_user) {
            out.target = &r;
        } else {
            out.reviews.push_back(r);
        }
    }
    std::sort(out.reviews.begin(), out.reviews.end(),
              [](const corpus::Review& a, const corpus::Review& b) {
                  return a.user_id < b.user_id;
              });
    return out;
}

RepresentativeSet all_of(const std::vector<corpus::Review>& reviews) {
    RepresentativeSet set;
    for (const auto& r : reviews) set.members.push_back({r.user_id, r});
    return set;
}

}  // namespace

RepresentativeSet select_representatives(
    const std::vector<corpus::Review>& item_reviews,
    const std::string& target_user, int K, std::uint64_t seed,
    EmbedBackend& backend) {
    if (K < 1) throw Error("select_representatives: K must be >= 1");
    Others split = split_target(item_reviews, target_user);
    if (!split.target)
        throw Error("select_representatives: target user " + target_user +
                    " has no review on the item");
    if (split.reviews.size() <= std::size_t(K)) return all_of(split.reviews);

    // Cluster all reviews on the item (target included) into K+1 groups.
    std::vector<corpus::Review> ordered = split.reviews;
    ordered.push_back(*split.target);
    std::vector<std::string> texts;
    texts.reserve(ordered.size());
    for (const auto& r : ordered) texts.push_back(retrieval::review_document(r));
    auto embeddings = backend.embed(texts);
    KmeansResult km = kmeans(embeddings, K + 1, seed);

    const std::size_t target_idx = ordered.size() - 1;
    const int target_cluster = km.assignments[target_idx];

    RepresentativeSet set;
    for (int c = 0; c <= K; ++c) {
        if (c == target_cluster) continue;
        std::size_t best = ordered.size();
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < target_idx; ++i) {
            if (km.assignments[i] != c) continue;
            double d = (embeddings[i] - km.centroids[c]).squaredNorm();
            if (d < best_d || (d == best_d && best < ordered.size() &&
                               ordered[i].user_id < ordered[best].user_id)) {
                best_d = d;
                best = i;
            }
        }
        // Non-target clusters always hold at least one other user: the
        // target sits in exactly one cluster and none are empty.
        if (best == ordered.size())
            throw Error("select_representatives: empty comparison cluster");
        set.members.push_back({ordered[best].user_id, ordered[best]});
    }
    return set;
}

RepresentativeSet select_random(const std::vector<corpus::Review>& item_reviews,
                                const std::string& target_user, int K,
                                std::uint64_t seed) {
    if (K < 1) throw Error("select_random: K must be >= 1");
    Others split = split_target(item_reviews, target_user);
    if (!split.target)
        throw Error("select_random: target user " + target_user +
                    " has no review on the item");
    if (split.reviews.size() <= std::size_t(K)) return all_of(split.reviews);

    std::mt19937_64 gen(seed);
    std::vector<corpus::Review> pool = split.reviews;
    RepresentativeSet set;
    for (int i = 0; i < K; ++i) {
        std::size_t j = std::size_t(i) + std::size_t(gen() % (pool.size() - i));
        std::swap(pool[i], pool[j]);
        set.members.push_back({pool[i].user_id, pool[i]});
    }
    return set;
}

RepresentativeSet select_simrank(const std::vector<corpus::Review>& item_reviews,
                                 const std::string& target_user, int K,
                                 EmbedBackend& backend) {
    if (K < 1) throw Error("select_simrank: K must be >= 1");
    Others split = split_target(item_reviews, target_user);
    if (!split.target)
        throw Error("select_simrank: target user " + target_user +
                    " has no review on the item");
    // Ranked even when everyone is selected: the selection order is
    // most-different first, so the cap only truncates.
    std::vector<std::string> texts;
    texts.push_back(retrieval::review_document(*split.target));
    for (const auto& r : split.reviews)
        texts.push_back(retrieval::review_document(r));
    auto embeddings = backend.embed(texts);

    std::vector<std::pair<double, std::size_t>> ranked;
    ranked.reserve(split.reviews.size());
    for (std::size_t i = 0; i < split.reviews.size(); ++i)
        ranked.emplace_back(cosine(embeddings[i + 1], embeddings[0]), i);
    std::sort(ranked.begin(), ranked.end(),
              [&](const auto& a, const auto& b) {
                  if (a.first != b.first) return a.first < b.first;
                  return split.reviews[a.second].user_id <
                         split.reviews[b.second].user_id;
              });

    RepresentativeSet set;
    const std::size_t take = std::min<std::size_t>(std::size_t(K), ranked.size());
    for (std::size_t i = 0; i < take; ++i) {
        const auto& r = split.reviews[ranked[i].second];
        set.members.push_back({r.user_id, r});
    }
    return set;
}

UniquenessSplit uniqueness_split(const std::vector<UserHistory>& users,
                                 EmbedBackend& backend) {
    UniquenessSplit out;
    if (users.empty()) return out;

    std::vector<Vec> user_vecs;
    user_vecs.reserve(users.size());
    for (const auto& u : users) {
        if (u.texts.empty())
            throw Error("uniqueness_split: user " + u.user_id +
                        " has no profile reviews");
        user_vecs.push_back(mean_embedding(u.texts, backend));
    }
    Vec center = Vec::Zero(user_vecs.front().size());
    for (const auto& v : user_vecs) center += v;
    center /= double(user_vecs.size());

    std::vector<std::size_t> order(users.size());
    for (std::size_t i = 0; i < users.size(); ++i) order[i] = i;
    std::vector<double> distance(users.size());
    for (std::size_t i = 0; i < users.size(); ++i)
        distance[i] = (user_vecs[i] - center).norm();
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (distance[a] != distance[b]) return distance[a] < distance[b];
        return users[a].user_id < users[b].user_id;
    });

    const std::size_t non_unique_count = (users.size() + 1) / 2;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
        const auto& id = users[order[rank]].user_id;
        if (rank < non_unique_count)
            out.non_unique.insert(id);
        else
            out.unique.insert(id);
    }
    return out;
}

}  // namespace dpl::user
