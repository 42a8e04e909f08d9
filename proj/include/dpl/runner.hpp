#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dpl/corpus.hpp"
#include "dpl/embedding.hpp"
#include "dpl/llm_client.hpp"
#include "dpl/metrics.hpp"
#include "dpl/pipeline.hpp"

namespace dpl::runner {

enum class FailurePolicy { skip, abort };

/// How --limit picks its subset: the first k samples by sample_id, or a
/// seeded uniform subsample without replacement (for repeated sampled
/// runs over large test sets).
enum class SampleMode { first, random };

struct EndpointConfig {
    std::string url;    // base URL; empty = not configured
    std::string model;  // model name sent on the wire
};

/// Flat key/value run configuration. File values load first; CLI flags
/// override. Unknown keys are rejected.
struct RunConfig {
    // data paths
    std::string main_data;        // raw reviews (prepare)
    std::string item_data;        // raw items (prepare)
    std::string corpus_reviews;   // curated reviews (run)
    std::string corpus_items;     // curated items (run/eval)
    std::string test_data;        // test split (run/eval/analyze)
    std::string out_dir = "out";
    std::string cache_dir = "cache";
    std::string templates_dir = "templates";
    bool yelp_mode = false;

    // experiment
    std::vector<pipeline::Method> methods = {pipeline::Method::dpl};
    std::vector<double> temperatures = {0.2, 0.4, 0.6, 0.8, 1.0};
    int n_retrieved = 8;
    int k_representatives = 4;
    pipeline::Selector selector = pipeline::Selector::cluster;
    pipeline::DifferenceStandard standard;
    int trsr_block_size = 8;
    std::uint64_t seed = 17;
    long sample_limit = 0;  // 0 = unlimited
    SampleMode sample_mode = SampleMode::first;
    pipeline::Method comparison_baseline = pipeline::Method::non_perso;
    FailurePolicy failure_policy = FailurePolicy::skip;
    int workers = 8;
    int max_concurrency = 8;

    // model backends
    bool mock = false;  // deterministic offline backend for every role
    EndpointConfig extractor;
    EndpointConfig summarizer;
    EndpointConfig generator;
    EndpointConfig judge;
    EndpointConfig embedder;
    int judge_repetitions = 2;
    double judge_temperature = 0.8;
    int max_tokens = 2048;
    double top_p = 0.95;
    int embed_dim = 256;
    int embed_batch = 128;
    int backoff_ms = 1000;

    // curation thresholds (prepare)
    corpus::CurationRules rules;

    static RunConfig from_file(const std::filesystem::path& path);
    /// Applies one key=value assignment; throws ConfigError on unknown
    /// keys or unparseable values.
    void apply(const std::string& key, const std::string& value);
    void validate() const;

    /// Serialization in the same flat format from_file() reads, so a
    /// snapshot re-executes a run exactly.
    std::string to_kv_text() const;

    /// Digest over every field that shapes generated records; the
    /// archive directory name embeds its first 8 hex chars.
    std::string run_digest() const;

    std::filesystem::path archive_dir(pipeline::Method method) const;
};

struct PrepareOutcome {
    corpus::CurationStats curation;
    std::size_t train_count = 0;
    std::size_t val_count = 0;
    std::size_t test_count = 0;
    std::string stats_text;
    std::filesystem::path train_path, val_path, test_path;
    std::filesystem::path items_path, reviews_path, stats_path;
};

/// Curates the raw record files, builds the temporal splits, and writes
/// split files, the curated corpus files and a statistics report.
PrepareOutcome cmd_prepare(const RunConfig& config);

struct RunOutcome {
    std::vector<std::filesystem::path> archives;
    std::size_t records_written = 0;
    std::size_t records_skipped_existing = 0;
    std::size_t failures = 0;
};

/// Runs every (method, temperature, test sample) combination, appending
/// generated records to per-method archives. Resumable: existing records
/// are kept and their work is skipped. Optional backend overrides let
/// callers observe or stub the model traffic.
RunOutcome cmd_run(const RunConfig& config,
                   llm::ChatBackend* chat_override = nullptr,
                   user::EmbedBackend* embed_override = nullptr);

struct EvalOutcome {
    std::vector<metrics::RunReport> reports;
    std::filesystem::path report_txt;
    std::filesystem::path report_tsv;
    std::string table_text;
};

/// Scores every archived record (lexical always; judge when an endpoint
/// or the mock backend is configured), aggregates across temperatures,
/// and emits the significance table against the comparison baseline.
EvalOutcome cmd_eval(const RunConfig& config,
                     llm::ChatBackend* chat_override = nullptr);

struct AnalyzeOptions {
    std::string mode = "uniqueness";  // "uniqueness" or "sweep"
    std::string method;               // uniqueness target; default first method
    std::string metric = "rouge1";
    std::string sweep_param = "K";  // "K" or "N"
    std::vector<std::string> archives;  // sweep mode archive directories
};

/// Uniqueness mode reports per-group absolute metric deltas versus the
/// non-personalized archive; sweep mode tabulates one metric across the
/// given K- or N-sweep archives.
std::string cmd_analyze(const RunConfig& config, const AnalyzeOptions& options,
                        user::EmbedBackend* embed_override = nullptr);

/// Runs fn(0..count-1) on a bounded worker pool; rethrows the first
/// exception after all workers join.
void parallel_for(std::size_t count, int workers,
                  const std::function<void(std::size_t)>& fn);

std::vector<pipeline::GeneratedRecord> read_records(
    const std::filesystem::path& records_file);

}  // namespace dpl::runner
