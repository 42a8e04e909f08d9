// dpl-forge: batch pipeline for difference-aware personalized review
// generation. Subcommands: prepare, run, eval, analyze.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dpl/error.hpp"
#include "dpl/pipeline.hpp"
#include "dpl/runner.hpp"

namespace {

struct CommonFlags {
    std::string config_path;
    std::string methods;
    std::string temperatures;
    long limit = -1;
    long seed = -1;
    std::string cache_dir;
    std::string out_dir;
    std::string test_data;
    std::string corpus_reviews;
    std::string corpus_items;
    std::string templates_dir;
    bool mock = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("--config", flags.config_path, "run configuration file");
    cmd->add_option("--method", flags.methods,
                    "comma-separated methods (overrides the config)");
    cmd->add_option("--temperature", flags.temperatures,
                    "comma-separated temperatures (overrides the config)");
    cmd->add_option("--limit", flags.limit, "process only the first N samples");
    cmd->add_option("--seed", flags.seed, "run seed");
    cmd->add_option("--cache-dir", flags.cache_dir, "response cache directory");
    cmd->add_option("--out", flags.out_dir, "output directory");
    cmd->add_option("--test-data", flags.test_data, "test split file");
    cmd->add_option("--corpus-reviews", flags.corpus_reviews,
                    "curated reviews file");
    cmd->add_option("--corpus-items", flags.corpus_items, "curated items file");
    cmd->add_option("--templates", flags.templates_dir,
                    "prompt template directory");
    cmd->add_flag("--mock", flags.mock, "force the deterministic mock backend");
}

dpl::runner::RunConfig build_config(const CommonFlags& flags) {
    dpl::runner::RunConfig config;
    if (!flags.config_path.empty())
        config = dpl::runner::RunConfig::from_file(flags.config_path);
    if (!flags.methods.empty()) config.apply("methods", flags.methods);
    if (!flags.temperatures.empty())
        config.apply("temperatures", flags.temperatures);
    if (flags.limit >= 0) config.sample_limit = flags.limit;
    if (flags.seed >= 0) config.seed = std::uint64_t(flags.seed);
    if (!flags.cache_dir.empty()) config.cache_dir = flags.cache_dir;
    if (!flags.out_dir.empty()) config.out_dir = flags.out_dir;
    if (!flags.test_data.empty()) config.test_data = flags.test_data;
    if (!flags.corpus_reviews.empty()) config.corpus_reviews = flags.corpus_reviews;
    if (!flags.corpus_items.empty()) config.corpus_items = flags.corpus_items;
    if (!flags.templates_dir.empty()) config.templates_dir = flags.templates_dir;
    if (flags.mock) config.mock = true;
    return config;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"difference-aware personalized review generation pipeline",
                 "dpl-forge"};
    app.require_subcommand(1);

    // prepare
    auto* prepare = app.add_subcommand(
        "prepare", "curate raw records and build temporal splits");
    CommonFlags prepare_flags;
    std::string main_data, item_data;
    bool yelp = false;
    add_common(prepare, prepare_flags);
    prepare->add_option("--main", main_data, "raw review records (jsonl)");
    prepare->add_option("--items", item_data, "raw item records (jsonl)");
    prepare->add_flag("--yelp", yelp, "Yelp field mapping, description-free");

    // run
    auto* run = app.add_subcommand(
        "run", "generate reviews for every (method, temperature, sample)");
    CommonFlags run_flags;
    add_common(run, run_flags);

    // eval
    auto* eval = app.add_subcommand(
        "eval", "score archived records and emit the significance table");
    CommonFlags eval_flags;
    add_common(eval, eval_flags);

    // analyze
    auto* analyze =
        app.add_subcommand("analyze", "uniqueness or sweep analysis reports");
    CommonFlags analyze_flags;
    dpl::runner::AnalyzeOptions analyze_options;
    std::string archives_csv;
    add_common(analyze, analyze_flags);
    analyze->add_option("--mode", analyze_options.mode,
                        "uniqueness (default) or sweep");
    analyze->add_option("--target", analyze_options.method,
                        "method analyzed in uniqueness mode");
    analyze->add_option("--metric", analyze_options.metric,
                        "rouge1, rougeL, meteor or bleu");
    analyze->add_option("--sweep-param", analyze_options.sweep_param,
                        "K or N");
    analyze->add_option("--archives", archives_csv,
                        "comma-separated archive directories for sweep mode");

    CLI11_PARSE(app, argc, argv);

    try {
        if (prepare->parsed()) {
            auto config = build_config(prepare_flags);
            if (!main_data.empty()) config.main_data = main_data;
            if (!item_data.empty()) config.item_data = item_data;
            if (yelp) config.apply("yelp_mode", "true");
            auto outcome = dpl::runner::cmd_prepare(config);
            std::cout << outcome.stats_text;
            std::cout << "wrote " << outcome.train_path.string() << ", "
                      << outcome.val_path.string() << ", "
                      << outcome.test_path.string() << "\n";
        } else if (run->parsed()) {
            auto config = build_config(run_flags);
            auto outcome = dpl::runner::cmd_run(config);
            std::cout << "archives:\n";
            for (const auto& dir : outcome.archives)
                std::cout << "  " << dir.string() << "\n";
            std::cout << "records written: " << outcome.records_written
                      << ", skipped existing: "
                      << outcome.records_skipped_existing
                      << ", failures: " << outcome.failures << "\n";
            if (outcome.failures > 0) return 2;
        } else if (eval->parsed()) {
            auto config = build_config(eval_flags);
            auto outcome = dpl::runner::cmd_eval(config);
            std::cout << outcome.table_text;
            std::cout << "wrote " << outcome.report_txt.string() << " and "
                      << outcome.report_tsv.string() << "\n";
        } else if (analyze->parsed()) {
            auto config = build_config(analyze_flags);
            if (!archives_csv.empty()) {
                analyze_options.archives.clear();
                std::string item;
                std::istringstream is(archives_csv);
                while (std::getline(is, item, ','))
                    if (!item.empty()) analyze_options.archives.push_back(item);
            }
            std::cout << dpl::runner::cmd_analyze(config, analyze_options);
        }
    } catch (const dpl::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
