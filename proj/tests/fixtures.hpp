#pragma once

// Deterministic synthetic datasets shared by the test suites. Everything
// here is seeded arithmetic; no randomness leaks across runs.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dpl/corpus.hpp"

namespace corpus = dpl::corpus;

namespace fixtures {

inline constexpr std::int64_t kBaseTs = 1600000000000;  // ms
inline constexpr std::int64_t kDayMs = 86400000;

inline const std::vector<std::string>& word_bank() {
    static const std::vector<std::string> words = {
        "sound",   "story",    "melody",  "tempo",   "plot",    "voice",
        "detail",  "texture",  "finish",  "quality", "style",   "balance",
        "pacing",  "warmth",   "clarity", "rhythm",  "drama",   "humor",
        "depth",   "surface",  "color",   "timbre",  "motif",   "theme",
        "chorus",  "verse",    "scene",   "climax",  "ending",  "opening",
        "energy",  "mood",     "tone",    "spirit",  "craft",   "polish",
        "delight", "surprise", "comfort", "wonder"};
    return words;
}

inline std::uint64_t mix(std::uint64_t x) {
    x ^= x >> 33;
    x *= 0xff51afd7ed558ccdull;
    x ^= x >> 33;
    x *= 0xc4ceb9fe1a85ec53ull;
    x ^= x >> 33;
    return x;
}

/// Review-length text (>= 200 chars) with vocabulary steered by `seed`.
inline std::string review_text(std::uint64_t seed, std::size_t min_chars = 210) {
    const auto& words = word_bank();
    std::ostringstream os;
    os << "Overall impression:";
    std::uint64_t state = mix(seed | 1);
    while (os.tellp() < std::streamoff(min_chars)) {
        state = mix(state + 0x9e3779b97f4a7c15ull);
        os << ' ' << words[state % words.size()];
    }
    os << '.';
    return os.str();
}

inline std::string item_description(std::uint64_t seed, std::size_t min_chars = 120) {
    return "Catalog entry. " + review_text(seed ^ 0xabcdef, min_chars);
}

inline corpus::Review make_review(std::string user, std::string item,
                                  double rating, std::string title,
                                  std::string text, std::int64_t ts) {
    corpus::Review r;
    r.user_id = std::move(user);
    r.item_id = std::move(item);
    r.rating = rating;
    r.review_title = std::move(title);
    r.text = std::move(text);
    r.timestamp = ts;
    return r;
}

inline std::string user_id(int u) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "u%03d", u);
    return buf;
}

inline std::string item_id(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "i%03d", i);
    return buf;
}

/// One synthetic review: vocabulary keyed on (user, item) so retrieval
/// and clustering have structure to find.
inline corpus::Review crossed_review(int u, int i) {
    const std::uint64_t seed = mix(std::uint64_t(u) * 1000003 + std::uint64_t(i));
    const double rating = 1.0 + double(seed % 9) / 2.0;  // 1.0 .. 5.0
    return make_review(user_id(u), item_id(i), rating,
                       "Thoughts on " + item_id(i) + " by " + user_id(u),
                       review_text(seed), kBaseTs + std::int64_t(i) * kDayMs +
                                              std::int64_t(u));
}

inline corpus::Item make_item(int i) {
    corpus::Item item;
    item.item_id = item_id(i);
    item.item_title = "Item " + item_id(i);
    item.description = item_description(std::uint64_t(i));
    return item;
}

struct RawFixture {
    std::vector<corpus::Review> reviews;
    std::vector<corpus::Item> items;
};

/// n_users x n_items fully crossed: every user reviews every item.
inline RawFixture crossed_fixture(int n_users, int n_items) {
    RawFixture fx;
    for (int u = 0; u < n_users; ++u)
        for (int i = 0; i < n_items; ++i)
            fx.reviews.push_back(crossed_review(u, i));
    for (int i = 0; i < n_items; ++i) fx.items.push_back(make_item(i));
    return fx;
}

/// 30 users / 20 items built so the reviewer/user filters cascade:
/// dropping one two-reviewer item pushes two users under the review
/// minimum, which in turn drops a four-reviewer item, and so on.
inline RawFixture cascade_fixture() {
    RawFixture fx;
    auto add = [&](int u, int i) { fx.reviews.push_back(crossed_review(u, i)); };
    // u1..u25 review i1..i18 (solid block).
    for (int u = 1; u <= 25; ++u)
        for (int i = 1; i <= 18; ++i) add(u, i);
    // u26..u28: i1..i17 plus i19 (i19 has exactly 4 reviewers with u29).
    for (int u = 26; u <= 28; ++u) {
        for (int i = 1; i <= 17; ++i) add(u, i);
        add(u, 19);
    }
    // u29: i1..i16 + i19 + i20; u30: i1..i17 + i20 (i20 has 2 reviewers).
    for (int i = 1; i <= 16; ++i) add(29, i);
    add(29, 19);
    add(29, 20);
    for (int i = 1; i <= 17; ++i) add(30, i);
    add(30, 20);
    for (int i = 1; i <= 20; ++i) fx.items.push_back(make_item(i));
    return fx;
}

/// 12 users with review counts {1,2,3,5,8,9,10,11,12,15,15,15} over a
/// shared 15-item pool; exercises every split constraint.
inline RawFixture split_fixture() {
    RawFixture fx;
    const int counts[12] = {1, 2, 3, 5, 8, 9, 10, 11, 12, 15, 15, 15};
    for (int u = 0; u < 12; ++u)
        for (int i = 0; i < counts[u]; ++i)
            fx.reviews.push_back(crossed_review(u, i));
    for (int i = 0; i < 15; ++i) fx.items.push_back(make_item(i));
    return fx;
}

inline std::string review_jsonl_line(const corpus::Review& r) {
    std::ostringstream os;
    os << "{\"user_id\":\"" << r.user_id << "\",\"asin\":\"" << r.item_id
       << "\",\"rating\":" << r.rating << ",\"timestamp\":" << r.timestamp
       << ",\"review_title\":\"" << r.review_title << "\",\"text\":\"" << r.text
       << "\"}";
    return os.str();
}

inline std::string item_jsonl_line(const corpus::Item& item) {
    std::ostringstream os;
    os << "{\"asin\":\"" << item.item_id << "\",\"item_title\":\""
       << item.item_title << "\",\"description\":\"" << item.description
       << "\"}";
    return os.str();
}

/// Writes the fixture as the raw jsonl files cmd_prepare consumes.
/// Fixture strings are ASCII without quotes, so plain escaping suffices.
inline void write_raw_files(const RawFixture& fx,
                            const std::filesystem::path& reviews_path,
                            const std::filesystem::path& items_path) {
    std::ofstream reviews(reviews_path, std::ios::binary);
    for (const auto& r : fx.reviews) reviews << review_jsonl_line(r) << '\n';
    std::ofstream items(items_path, std::ios::binary);
    for (const auto& item : fx.items) items << item_jsonl_line(item) << '\n';
}

/// Items of a fixture as the map curate() consumers expect.
inline std::map<std::string, corpus::Item> item_map(const RawFixture& fx) {
    std::map<std::string, corpus::Item> out;
    for (const auto& item : fx.items) out.emplace(item.item_id, item);
    return out;
}

}  // namespace fixtures
