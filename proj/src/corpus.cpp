#include "dpl/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "dpl/error.hpp"
#include "json.hpp"

namespace dpl::corpus {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::optional<std::string> get_string(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end() || !it->is_string()) return std::nullopt;
    return it->get<std::string>();
}

std::optional<double> get_number(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end() || !it->is_number()) return std::nullopt;
    return it->get<double>();
}

// Yelp dates come as "YYYY-MM-DD HH:MM:SS"; converted to epoch ms (UTC).
std::optional<std::int64_t> parse_datetime_ms(const std::string& value) {
    std::tm tm{};
    if (std::sscanf(value.c_str(), "%d-%d-%d %d:%d:%d", &tm.tm_year, &tm.tm_mon,
                    &tm.tm_mday, &tm.tm_hour, &tm.tm_min, &tm.tm_sec) < 3)
        return std::nullopt;
    tm.tm_year -= 1900;
    tm.tm_mon -= 1;
    std::time_t t = timegm(&tm);
    if (t == -1) return std::nullopt;
    return std::int64_t(t) * 1000;
}

std::optional<std::int64_t> get_timestamp(const json& j, const char* key,
                                          bool allow_datetime) {
    auto it = j.find(key);
    if (it == j.end()) return std::nullopt;
    if (it->is_number_integer()) return it->get<std::int64_t>();
    if (it->is_number()) return std::int64_t(it->get<double>());
    if (allow_datetime && it->is_string())
        return parse_datetime_ms(it->get<std::string>());
    return std::nullopt;
}

json parse_json_line(std::string_view line, long line_no) {
    try {
        return json::parse(line);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("malformed record: ") + e.what(), line_no);
    }
}

}  // namespace

std::size_t utf8_length(std::string_view text) {
    std::size_t n = 0;
    for (unsigned char c : text)
        if ((c & 0xc0) != 0x80) ++n;
    return n;
}

std::optional<Review> parse_review_line(std::string_view line, bool yelp,
                                        long line_no) {
    json j = parse_json_line(line, line_no);
    if (!j.is_object()) throw ParseError("record is not an object", line_no);

    Review r;
    auto user = get_string(j, "user_id");
    auto item = get_string(j, yelp ? "business_id" : "asin");
    auto rating = get_number(j, yelp ? "stars" : "rating");
    auto ts = get_timestamp(j, yelp ? "date" : "timestamp", yelp);
    auto text = get_string(j, "text");
    if (!user || user->empty() || !item || item->empty() || !rating || !ts ||
        !text || text->empty())
        return std::nullopt;
    if (*rating < 1.0 || *rating > 5.0) return std::nullopt;

    auto title = get_string(j, "review_title");
    if (!yelp && (!title || title->empty())) return std::nullopt;

    r.user_id = std::move(*user);
    r.item_id = std::move(*item);
    r.rating = *rating;
    r.timestamp = *ts;
    r.review_title = title ? std::move(*title) : std::string();
    r.text = std::move(*text);
    return r;
}

std::optional<Item> parse_item_line(std::string_view line, bool yelp,
                                    long line_no) {
    json j = parse_json_line(line, line_no);
    if (!j.is_object()) throw ParseError("record is not an object", line_no);

    Item it;
    auto id = get_string(j, yelp ? "business_id" : "asin");
    auto title = get_string(j, yelp ? "business_name" : "item_title");
    if (!id || id->empty() || !title || title->empty()) return std::nullopt;
    if (!yelp) {
        auto desc = get_string(j, "description");
        if (!desc) return std::nullopt;
        it.description = std::move(*desc);
    }
    it.item_id = std::move(*id);
    it.item_title = std::move(*title);
    return it;
}

namespace {

template <typename ParseFn>
FileReadResult read_jsonl(const std::filesystem::path& path, ParseFn&& parse) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open input file: " + path.string());
    FileReadResult result;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        ++result.lines;
        if (!parse(line, line_no)) ++result.skipped;
    }
    return result;
}

}  // namespace

FileReadResult read_reviews_file(const std::filesystem::path& path, bool yelp,
                                 std::vector<Review>& out) {
    return read_jsonl(path, [&](const std::string& line, long no) {
        auto r = parse_review_line(line, yelp, no);
        if (r) out.push_back(std::move(*r));
        return bool(r);
    });
}

FileReadResult read_items_file(const std::filesystem::path& path, bool yelp,
                               std::vector<Item>& out) {
    return read_jsonl(path, [&](const std::string& line, long no) {
        auto it = parse_item_line(line, yelp, no);
        if (it) out.push_back(std::move(*it));
        return bool(it);
    });
}

std::vector<Review> Corpus::item_reviews(const std::string& item_id) const {
    std::vector<Review> out;
    auto it = by_item.find(item_id);
    if (it == by_item.end()) return out;
    out.reserve(it->second.size());
    for (auto idx : it->second) out.push_back(reviews[idx]);
    return out;
}

std::vector<Review> Corpus::user_reviews(const std::string& user_id) const {
    std::vector<Review> out;
    auto it = by_user.find(user_id);
    if (it == by_user.end()) return out;
    out.reserve(it->second.size());
    for (auto idx : it->second) out.push_back(reviews[idx]);
    return out;
}

Corpus curate(std::vector<Review> raw_reviews, std::vector<Item> raw_items,
              const CurationRules& rules, CurationStats* stats) {
    CurationStats local;
    CurationStats& st = stats ? *stats : local;
    st = CurationStats{};
    st.reviews_in = raw_reviews.size();
    st.items_in = raw_items.size();

    // Item length filter. First occurrence wins on duplicate ids.
    std::map<std::string, Item> items;
    for (auto& item : raw_items) {
        if (!rules.yelp_mode) {
            std::size_t len = utf8_length(item.description);
            if (len < rules.min_description_chars ||
                len > rules.max_description_chars) {
                ++st.items_removed_description_length;
                continue;
            }
        }
        items.emplace(item.item_id, std::move(item));
    }

    // Review text length, then unresolved items.
    std::vector<Review> reviews;
    reviews.reserve(raw_reviews.size());
    for (auto& r : raw_reviews) {
        if (utf8_length(r.text) < rules.min_text_chars) {
            ++st.reviews_removed_text_length;
            continue;
        }
        if (!items.count(r.item_id)) {
            ++st.reviews_removed_unresolved_item;
            continue;
        }
        reviews.push_back(std::move(r));
    }

    // Dedup per (user, item): keep max timestamp; exact timestamp ties are
    // broken on (review_title, text) so the result is order-independent.
    std::map<std::pair<std::string, std::string>, Review> dedup;
    for (auto& r : reviews) {
        auto key = std::make_pair(r.user_id, r.item_id);
        auto [it, inserted] = dedup.try_emplace(key, std::move(r));
        if (!inserted) {
            Review& kept = it->second;
            auto rank = [](const Review& x) {
                return std::tie(x.timestamp, x.review_title, x.text);
            };
            if (rank(kept) < rank(r)) kept = std::move(r);
            ++st.reviews_removed_duplicate_pair;
        }
    }

    // Reviewer-count and user-count filters to a fixed point: each can
    // re-invalidate the other.
    std::set<std::string> dead_items;
    std::set<std::string> dead_users;
    auto live = [&](const Review& r) {
        return !dead_items.count(r.item_id) && !dead_users.count(r.user_id);
    };
    bool changed = true;
    while (changed) {
        if (st.fixpoint_iterations >= rules.max_fixpoint_iterations)
            throw Error("curation did not reach a fixed point within " +
                        std::to_string(rules.max_fixpoint_iterations) +
                        " iterations");
        ++st.fixpoint_iterations;
        changed = false;

        std::map<std::string, std::size_t> item_counts;
        for (auto& [key, r] : dedup)
            if (live(r)) ++item_counts[r.item_id];
        for (auto& [item_id, count] : item_counts) {
            if (count < rules.min_reviewers_per_item) {
                dead_items.insert(item_id);
                changed = true;
            }
        }

        std::map<std::string, std::size_t> user_counts;
        for (auto& [key, r] : dedup)
            if (live(r)) ++user_counts[r.user_id];
        for (auto& [user_id, count] : user_counts) {
            if (count < rules.min_reviews_per_user ||
                count > rules.max_reviews_per_user) {
                dead_users.insert(user_id);
                changed = true;
            }
        }
    }

    Corpus corpus;
    for (auto& [key, r] : dedup) {
        if (dead_items.count(r.item_id)) {
            ++st.reviews_removed_item_rule;
            continue;
        }
        if (dead_users.count(r.user_id)) {
            ++st.reviews_removed_user_rule;
            continue;
        }
        corpus.reviews.push_back(std::move(r));
    }
    st.items_removed_reviewer_rule = dead_items.size();

    // Indexes. by_user sorted (timestamp, item_id); by_item (timestamp, user_id).
    std::set<std::string> live_items;
    for (std::uint32_t i = 0; i < corpus.reviews.size(); ++i) {
        const Review& r = corpus.reviews[i];
        corpus.by_user[r.user_id].push_back(i);
        corpus.by_item[r.item_id].push_back(i);
        live_items.insert(r.item_id);
    }
    for (auto& [user, idxs] : corpus.by_user) {
        std::sort(idxs.begin(), idxs.end(), [&](std::uint32_t a, std::uint32_t b) {
            const Review& x = corpus.reviews[a];
            const Review& y = corpus.reviews[b];
            return std::tie(x.timestamp, x.item_id) <
                   std::tie(y.timestamp, y.item_id);
        });
    }
    for (auto& [item, idxs] : corpus.by_item) {
        std::sort(idxs.begin(), idxs.end(), [&](std::uint32_t a, std::uint32_t b) {
            const Review& x = corpus.reviews[a];
            const Review& y = corpus.reviews[b];
            return std::tie(x.timestamp, x.user_id) <
                   std::tie(y.timestamp, y.user_id);
        });
    }
    for (auto& [item_id, item] : items)
        if (live_items.count(item_id)) corpus.items.emplace(item_id, item);

    st.reviews_out = corpus.reviews.size();
    st.items_out = corpus.items.size();
    return corpus;
}

Corpus assemble(std::vector<Review> reviews, std::map<std::string, Item> items) {
    Corpus corpus;
    corpus.reviews = std::move(reviews);
    corpus.items = std::move(items);
    for (std::uint32_t i = 0; i < corpus.reviews.size(); ++i) {
        const Review& r = corpus.reviews[i];
        corpus.by_user[r.user_id].push_back(i);
        corpus.by_item[r.item_id].push_back(i);
    }
    auto by_time = [&](auto key) {
        return [&, key](std::uint32_t a, std::uint32_t b) {
            const Review& x = corpus.reviews[a];
            const Review& y = corpus.reviews[b];
            return std::make_pair(x.timestamp, key(x)) <
                   std::make_pair(y.timestamp, key(y));
        };
    };
    for (auto& [user, idxs] : corpus.by_user)
        std::sort(idxs.begin(), idxs.end(),
                  by_time([](const Review& r) { return r.item_id; }));
    for (auto& [item, idxs] : corpus.by_item)
        std::sort(idxs.begin(), idxs.end(),
                  by_time([](const Review& r) { return r.user_id; }));
    return corpus;
}

Splits build_splits(const Corpus& corpus) {
    Splits splits;
    for (const auto& [user_id, idxs] : corpus.by_user) {
        const std::size_t count = idxs.size();
        if (count == 0) continue;

        auto make_sample = [&](std::size_t pos) {
            const Review& target = corpus.reviews[idxs[pos]];
            TaskSample s;
            s.user_id = target.user_id;
            s.item_id = target.item_id;
            s.rating = target.rating;
            s.review_title = target.review_title;
            s.ground_truth_text = target.text;
            s.timestamp = target.timestamp;
            for (std::size_t j = 0; j < count; ++j) {
                const Review& r = corpus.reviews[idxs[j]];
                if (r.timestamp < target.timestamp) s.profile.push_back(r);
            }
            return s;
        };
        auto reviewer_count = [&](const std::string& item_id) {
            auto it = corpus.by_item.find(item_id);
            return it == corpus.by_item.end() ? std::size_t(0)
                                              : it->second.size();
        };
        auto eval_ok = [&](const TaskSample& s) {
            if (s.profile.size() < 8) return false;
            if (reviewer_count(s.item_id) < 5) return false;
            for (const Review& p : s.profile)
                if (reviewer_count(p.item_id) < 5) return false;
            return true;
        };

        // Recency rank r (1 = most recent) maps to index count - r.
        // Train targets: 10th..3rd most recent, chronological order.
        std::size_t first = std::min<std::size_t>(count, 10);
        for (std::size_t r = first; r >= 3; --r)
            splits.train.push_back(make_sample(count - r));
        if (count >= 2) {
            TaskSample s = make_sample(count - 2);
            if (eval_ok(s)) splits.val.push_back(std::move(s));
        }
        if (count >= 1) {
            TaskSample s = make_sample(count - 1);
            if (eval_ok(s)) splits.test.push_back(std::move(s));
        }
    }
    return splits;
}

namespace {

ordered_json review_to_json(const Review& r) {
    ordered_json j;
    j["user_id"] = r.user_id;
    j["asin"] = r.item_id;
    j["rating"] = r.rating;
    j["timestamp"] = r.timestamp;
    j["review_title"] = r.review_title;
    j["text"] = r.text;
    return j;
}

}  // namespace

void write_split_file(const std::filesystem::path& path,
                      const std::vector<TaskSample>& samples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write split file: " + path.string());
    for (const TaskSample& s : samples) {
        ordered_json j;
        j["user_id"] = s.user_id;
        j["asin"] = s.item_id;
        j["rating"] = s.rating;
        j["timestamp"] = s.timestamp;
        j["review_title"] = s.review_title;
        j["text"] = s.ground_truth_text;
        ordered_json profile = ordered_json::array();
        for (const Review& r : s.profile) {
            ordered_json p;
            p["asin"] = r.item_id;
            p["rating"] = r.rating;
            p["timestamp"] = r.timestamp;
            p["review_title"] = r.review_title;
            p["text"] = r.text;
            profile.push_back(std::move(p));
        }
        j["profile"] = std::move(profile);
        out << j.dump() << '\n';
    }
}

std::vector<TaskSample> read_split_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open split file: " + path.string());
    std::vector<TaskSample> samples;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw ParseError("malformed split record", line_no);
        TaskSample s;
        s.user_id = j.value("user_id", "");
        s.item_id = j.value("asin", "");
        s.rating = j.value("rating", 0.0);
        s.timestamp = j.value("timestamp", std::int64_t(0));
        s.review_title = j.value("review_title", "");
        s.ground_truth_text = j.value("text", "");
        if (s.user_id.empty() || s.item_id.empty())
            throw ParseError("split record missing user_id/asin", line_no);
        if (j.contains("profile")) {
            for (const auto& p : j["profile"]) {
                Review r;
                r.user_id = s.user_id;
                r.item_id = p.value("asin", "");
                r.rating = p.value("rating", 0.0);
                r.timestamp = p.value("timestamp", std::int64_t(0));
                r.review_title = p.value("review_title", "");
                r.text = p.value("text", "");
                s.profile.push_back(std::move(r));
            }
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

void write_reviews_file(const std::filesystem::path& path,
                        const std::vector<Review>& reviews) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write reviews file: " + path.string());
    for (const Review& r : reviews) out << review_to_json(r).dump() << '\n';
}

void write_items_file(const std::filesystem::path& path,
                      const std::map<std::string, Item>& items) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write items file: " + path.string());
    for (const auto& [id, item] : items) {
        ordered_json j;
        j["asin"] = item.item_id;
        j["item_title"] = item.item_title;
        j["description"] = item.description;
        out << j.dump() << '\n';
    }
}

std::map<std::string, Item> read_curated_items(
    const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open items file: " + path.string());
    std::map<std::string, Item> items;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw ParseError("malformed item record", line_no);
        Item item;
        item.item_id = j.value("asin", "");
        item.item_title = j.value("item_title", "");
        item.description = j.value("description", "");
        if (item.item_id.empty())
            throw ParseError("item record missing asin", line_no);
        items.emplace(item.item_id, std::move(item));
    }
    return items;
}

std::string CurationStats::to_text() const {
    std::ostringstream os;
    os << "curation\n";
    os << "  reviews in:                      " << reviews_in << "\n";
    os << "  items in:                        " << items_in << "\n";
    os << "  removed: review text too short:  " << reviews_removed_text_length
       << "\n";
    os << "  removed: item unresolved:        "
       << reviews_removed_unresolved_item << "\n";
    os << "  removed: duplicate (user,item):  "
       << reviews_removed_duplicate_pair << "\n";
    os << "  removed: item reviewer rule:     " << reviews_removed_item_rule
       << "\n";
    os << "  removed: user review-count rule: " << reviews_removed_user_rule
       << "\n";
    os << "  items removed: description len:  "
       << items_removed_description_length << "\n";
    os << "  items removed: reviewer rule:    " << items_removed_reviewer_rule
       << "\n";
    os << "  fixed-point iterations:          " << fixpoint_iterations << "\n";
    os << "  reviews out:                     " << reviews_out << "\n";
    os << "  items out:                       " << items_out << "\n";
    return os.str();
}

}  // namespace dpl::corpus
