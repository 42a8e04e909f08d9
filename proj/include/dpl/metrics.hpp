#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dpl/llm_client.hpp"
#include "dpl/prompt_template.hpp"

namespace dpl::metrics {

/// Unigram-overlap F1 over the shared tokenizer. Empty inputs score 0.
double rouge1(std::string_view hyp, std::string_view ref);

/// F1 from the longest common subsequence of token sequences.
double rougeL(std::string_view hyp, std::string_view ref);

/// Simplified METEOR: greedy exact matches, then suffix-stripping stem
/// matches (no synonym stage); Fmean = P*R/(0.9P + 0.1R); fragmentation
/// penalty 0.5*(chunks/matches)^3.
double meteor(std::string_view hyp, std::string_view ref);

/// Corpus-level BLEU-4 on the 0-100 scale: clipped n-gram precisions
/// pooled over the corpus, exponential smoothing for zero counts and the
/// exp(1 - r/c) brevity penalty. Throws on length mismatch.
double bleu_corpus(const std::vector<std::string>& hyps,
                   const std::vector<std::string>& refs);

/// BLEU tokenization: punctuation split into separate tokens, case kept.
std::vector<std::string> bleu_tokenize(std::string_view text);

/// Suffix-stripping stemmer used by the METEOR stem stage.
std::string stem(std::string word);

/// First number in [0, 10] found in a judge response (optional "Score:"
/// prefix, integer or decimal). nullopt when no in-range number exists.
std::optional<double> parse_judge_number(std::string_view text);

struct JudgeContext {
    std::string generated;
    std::string ground_truth;
    std::string review_title;
    double rating = 0.0;
    std::string item_title;
    std::string item_description;  // empty in Yelp mode
};

struct JudgeOptions {
    std::string model;
    int repetitions = 2;  // 2 for the 72B-style protocol, 5 for the GPT-style
    double temperature = 0.8;
    double top_p = 0.95;
    int max_tokens = 2048;
};

struct JudgeResult {
    double raw_mean = 0.0;  // in [0, 10]
    double norm = 0.0;      // raw_mean / 10
    int usable_repetitions = 0;
};

/// Scores one generated review against its reference. Each repetition
/// uses a distinct seed_tag; an unparseable response is retried once and
/// then dropped. Raises when every repetition is unusable.
JudgeResult judge_score(const JudgeContext& ctx, llm::LlmClient& client,
                        const prompts::Template& judge_template,
                        const JudgeOptions& options);

struct SampleScores {
    std::string sample_id;
    double rouge1 = 0.0;
    double rougeL = 0.0;
    double meteor = 0.0;
    std::optional<double> judge_raw;  // in [0, 10]
    std::optional<double> judge_norm;
};

struct TemperatureScores {
    std::vector<SampleScores> samples;
    double bleu = 0.0;  // corpus-level for this temperature
};

struct MetricSummary {
    double mean = 0.0;
    double stddev = 0.0;  // population std across temperatures
    std::vector<double> per_temperature;
};

/// Per-method report: per-temperature means plus cross-temperature mean
/// and population standard deviation, keyed "rouge1", "rougeL",
/// "meteor", "bleu" and, when judged, "judge".
struct RunReport {
    std::string method;
    std::vector<double> temperatures;
    std::map<std::string, MetricSummary> metrics;
    std::map<std::string, double> p_values;  // vs the designated baseline
};

RunReport aggregate(const std::string& method,
                    const std::map<double, TemperatureScores>& per_temperature);

/// Two-sided Welch's t-test. n < 2 on either side gives p = 1; two
/// zero-variance series give 1 for equal means and 1e-12 otherwise.
double t_test(const std::vector<double>& a, const std::vector<double>& b);

/// Survival function of Student's t distribution, P(T > t).
double student_t_sf(double t, double df);

}  // namespace dpl::metrics
