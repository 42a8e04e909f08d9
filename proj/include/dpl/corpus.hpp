#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dpl::corpus {

/// One (user, item, rating, title, text, timestamp) record.
struct Review {
    std::string user_id;
    std::string item_id;  // the asin
    double rating = 0.0;  // in [1.0, 5.0]
    std::string review_title;
    std::string text;
    std::int64_t timestamp = 0;  // milliseconds since epoch
};

struct Item {
    std::string item_id;
    std::string item_title;
    std::string description;  // empty in Yelp mode
};

/// Numeric thresholds applied by curate(). Defaults follow the main
/// dataset settings; all are overridable from the config file.
struct CurationRules {
    std::size_t min_text_chars = 200;  // Unicode scalar values, not bytes
    std::size_t min_description_chars = 100;
    std::size_t max_description_chars = 2000;
    std::size_t min_reviewers_per_item = 4;
    std::size_t min_reviews_per_user = 18;
    std::size_t max_reviews_per_user = 500;
    int max_fixpoint_iterations = 20;
    bool yelp_mode = false;  // no item descriptions, review titles optional
};

/// Counts of records removed per curation rule.
struct CurationStats {
    std::size_t reviews_in = 0;
    std::size_t items_in = 0;
    std::size_t reviews_removed_text_length = 0;
    std::size_t reviews_removed_unresolved_item = 0;
    std::size_t reviews_removed_duplicate_pair = 0;
    std::size_t reviews_removed_item_rule = 0;
    std::size_t reviews_removed_user_rule = 0;
    std::size_t items_removed_description_length = 0;
    std::size_t items_removed_reviewer_rule = 0;
    int fixpoint_iterations = 0;
    std::size_t reviews_out = 0;
    std::size_t items_out = 0;

    std::string to_text() const;
};

/// Curated reviews and items with by-user and by-item indexes.
/// Index vectors hold positions into `reviews`; by_user is sorted by
/// (timestamp, item_id) ascending, by_item by (timestamp, user_id).
struct Corpus {
    std::vector<Review> reviews;
    std::map<std::string, Item> items;
    std::map<std::string, std::vector<std::uint32_t>> by_user;
    std::map<std::string, std::vector<std::uint32_t>> by_item;

    const Review& review(std::uint32_t idx) const { return reviews[idx]; }
    std::vector<Review> item_reviews(const std::string& item_id) const;
    std::vector<Review> user_reviews(const std::string& user_id) const;
};

/// One generation task: a target review plus the user's strictly-earlier
/// history.
struct TaskSample {
    std::string user_id;
    std::string item_id;
    double rating = 0.0;
    std::string review_title;
    std::string ground_truth_text;
    std::int64_t timestamp = 0;
    std::vector<Review> profile;  // every entry strictly earlier than target

    std::string sample_id() const { return user_id + ":" + item_id; }
};

struct Splits {
    std::vector<TaskSample> train;
    std::vector<TaskSample> val;
    std::vector<TaskSample> test;
};

/// Number of Unicode scalar values in a UTF-8 string.
std::size_t utf8_length(std::string_view text);

/// Parses one main-dataset record. Returns nullopt ("skip") when a
/// required field is absent, empty, or of an unusable type; throws
/// ParseError for a syntactically broken line. `yelp` switches the field
/// mapping (business_id -> item_id, stars -> rating, date -> timestamp,
/// review_title optional).
std::optional<Review> parse_review_line(std::string_view line, bool yelp = false,
                                        long line_no = 0);

/// Parses one item record (asin, item_title, description). Yelp mode maps
/// business_id -> item_id, business_name -> item_title, no description.
std::optional<Item> parse_item_line(std::string_view line, bool yelp = false,
                                    long line_no = 0);

struct FileReadResult {
    std::size_t lines = 0;
    std::size_t skipped = 0;
};

FileReadResult read_reviews_file(const std::filesystem::path& path, bool yelp,
                                 std::vector<Review>& out);
FileReadResult read_items_file(const std::filesystem::path& path, bool yelp,
                               std::vector<Item>& out);

/// Applies the curation rules in fixed order: field presence (done at
/// parse time) -> length filters -> per-(user,item) dedup keeping the
/// max timestamp -> item reviewer-count and user review-count filters
/// iterated to a fixed point. Throws if the fixed point is not reached
/// within rules.max_fixpoint_iterations.
Corpus curate(std::vector<Review> raw_reviews, std::vector<Item> raw_items,
              const CurationRules& rules, CurationStats* stats = nullptr);

/// Temporal splits: per user, train targets are the 10th..3rd most
/// recent reviews, val the 2nd most recent, test the most recent.
/// Val/test samples require profile size >= 8 and a reviewer count >= 5
/// on the target item and on every profile item.
Splits build_splits(const Corpus& corpus);

/// Builds a Corpus from already-curated records without re-filtering;
/// used when loading the files cmd_prepare wrote.
Corpus assemble(std::vector<Review> reviews, std::map<std::string, Item> items);

void write_split_file(const std::filesystem::path& path,
                      const std::vector<TaskSample>& samples);
std::vector<TaskSample> read_split_file(const std::filesystem::path& path);

void write_reviews_file(const std::filesystem::path& path,
                        const std::vector<Review>& reviews);
void write_items_file(const std::filesystem::path& path,
                      const std::map<std::string, Item>& items);
std::map<std::string, Item> read_curated_items(const std::filesystem::path& path);

}  // namespace dpl::corpus
