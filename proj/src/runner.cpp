#include "dpl/runner.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "dpl/digest.hpp"
#include "dpl/error.hpp"
#include "dpl/retrieval.hpp"
#include "dpl/selectors.hpp"
#include "json.hpp"

namespace dpl::runner {

namespace fs = std::filesystem;
using corpus::TaskSample;
using nlohmann::json;
using nlohmann::ordered_json;
using pipeline::GeneratedRecord;
using pipeline::Method;

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    std::size_t b = s.find_last_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config key " + key + ": expected true/false, got '" +
                      value + "'");
}

long parse_long(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        long v = std::stol(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": expected integer, got '" +
                          value + "'");
    }
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": expected number, got '" +
                          value + "'");
    }
}

std::string format_temp(double t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", t);
    return buf;
}

std::string format_metric(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string standard_to_string(const pipeline::DifferenceStandard& s) {
    if (s.empty()) return "none";
    std::vector<std::string> dims;
    if (s.writing) dims.push_back("writing");
    if (s.emotional) dims.push_back("emotional");
    if (s.semantic) dims.push_back("semantic");
    std::string out;
    for (std::size_t i = 0; i < dims.size(); ++i)
        out += (i ? "," : "") + dims[i];
    return out;
}

pipeline::DifferenceStandard standard_from_string(const std::string& value) {
    pipeline::DifferenceStandard s = pipeline::DifferenceStandard::none();
    if (value == "none" || value.empty()) return s;
    for (const auto& dim : split_csv(value)) {
        if (dim == "writing")
            s.writing = true;
        else if (dim == "emotional")
            s.emotional = true;
        else if (dim == "semantic")
            s.semantic = true;
        else
            throw ConfigError("unknown standard dimension: " + dim);
    }
    return s;
}

std::string methods_to_string(const std::vector<Method>& methods) {
    std::string out;
    for (std::size_t i = 0; i < methods.size(); ++i)
        out += (i ? "," : "") + pipeline::method_name(methods[i]);
    return out;
}

std::string temps_to_string(const std::vector<double>& temps) {
    std::string out;
    for (std::size_t i = 0; i < temps.size(); ++i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%g", temps[i]);
        out += (i ? "," : "") + std::string(buf);
    }
    return out;
}

}  // namespace

void RunConfig::apply(const std::string& key, const std::string& value) {
    if (key == "main_data") main_data = value;
    else if (key == "item_data") item_data = value;
    else if (key == "corpus_reviews") corpus_reviews = value;
    else if (key == "corpus_items") corpus_items = value;
    else if (key == "test_data") test_data = value;
    else if (key == "out_dir") out_dir = value;
    else if (key == "cache_dir") cache_dir = value;
    else if (key == "templates_dir") templates_dir = value;
    else if (key == "yelp_mode") {
        yelp_mode = parse_bool(key, value);
        rules.yelp_mode = yelp_mode;
    } else if (key == "methods") {
        methods.clear();
        for (const auto& name : split_csv(value))
            methods.push_back(pipeline::parse_method(name));
    } else if (key == "temperatures") {
        temperatures.clear();
        for (const auto& t : split_csv(value))
            temperatures.push_back(parse_double(key, t));
    } else if (key == "n_retrieved") n_retrieved = int(parse_long(key, value));
    else if (key == "k_representatives")
        k_representatives = int(parse_long(key, value));
    else if (key == "selector") selector = pipeline::parse_selector(value);
    else if (key == "standard") standard = standard_from_string(value);
    else if (key == "trsr_block_size")
        trsr_block_size = int(parse_long(key, value));
    else if (key == "seed") seed = std::uint64_t(parse_long(key, value));
    else if (key == "limit") sample_limit = parse_long(key, value);
    else if (key == "sample_mode") {
        if (value == "first") sample_mode = SampleMode::first;
        else if (value == "random") sample_mode = SampleMode::random;
        else throw ConfigError("sample_mode must be first or random");
    }
    else if (key == "comparison_baseline")
        comparison_baseline = pipeline::parse_method(value);
    else if (key == "failure_policy") {
        if (value == "skip") failure_policy = FailurePolicy::skip;
        else if (value == "abort") failure_policy = FailurePolicy::abort;
        else throw ConfigError("failure_policy must be skip or abort");
    } else if (key == "workers") workers = int(parse_long(key, value));
    else if (key == "max_concurrency")
        max_concurrency = int(parse_long(key, value));
    else if (key == "mock") mock = parse_bool(key, value);
    else if (key == "extractor_url") extractor.url = value;
    else if (key == "extractor_model") extractor.model = value;
    else if (key == "summarizer_url") summarizer.url = value;
    else if (key == "summarizer_model") summarizer.model = value;
    else if (key == "generator_url") generator.url = value;
    else if (key == "generator_model") generator.model = value;
    else if (key == "judge_url") judge.url = value;
    else if (key == "judge_model") judge.model = value;
    else if (key == "embedder_url") embedder.url = value;
    else if (key == "embedder_model") embedder.model = value;
    else if (key == "judge_repetitions")
        judge_repetitions = int(parse_long(key, value));
    else if (key == "judge_temperature")
        judge_temperature = parse_double(key, value);
    else if (key == "max_tokens") max_tokens = int(parse_long(key, value));
    else if (key == "top_p") top_p = parse_double(key, value);
    else if (key == "embed_dim") embed_dim = int(parse_long(key, value));
    else if (key == "embed_batch") embed_batch = int(parse_long(key, value));
    else if (key == "backoff_ms") backoff_ms = int(parse_long(key, value));
    else if (key == "min_text_chars")
        rules.min_text_chars = std::size_t(parse_long(key, value));
    else if (key == "min_description_chars")
        rules.min_description_chars = std::size_t(parse_long(key, value));
    else if (key == "max_description_chars")
        rules.max_description_chars = std::size_t(parse_long(key, value));
    else if (key == "min_reviewers_per_item")
        rules.min_reviewers_per_item = std::size_t(parse_long(key, value));
    else if (key == "min_reviews_per_user")
        rules.min_reviews_per_user = std::size_t(parse_long(key, value));
    else if (key == "max_reviews_per_user")
        rules.max_reviews_per_user = std::size_t(parse_long(key, value));
    else if (key == "max_fixpoint_iterations")
        rules.max_fixpoint_iterations = int(parse_long(key, value));
    else
        throw ConfigError("unknown config key: " + key);
}

RunConfig RunConfig::from_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    RunConfig config;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        std::size_t eq = stripped.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected key = value");
        config.apply(trim(stripped.substr(0, eq)),
                     trim(stripped.substr(eq + 1)));
    }
    return config;
}

void RunConfig::validate() const {
    if (temperatures.empty())
        throw ConfigError("temperatures must not be empty");
    for (double t : temperatures)
        if (t <= 0.0 || t > 2.0)
            throw ConfigError("temperature " + std::to_string(t) +
                              " outside (0, 2]");
    if (methods.empty()) throw ConfigError("methods must not be empty");
    if (n_retrieved < 1) throw ConfigError("n_retrieved must be >= 1");
    if (sample_limit < 0) throw ConfigError("limit must be >= 0");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    if (judge_repetitions < 1)
        throw ConfigError("judge_repetitions must be >= 1");
    const bool uses_dpl =
        std::find(methods.begin(), methods.end(), Method::dpl) != methods.end();
    if (uses_dpl && k_representatives < 1)
        throw ConfigError("k_representatives must be >= 1 for dpl");
}

std::string RunConfig::to_kv_text() const {
    std::ostringstream os;
    auto put = [&](const char* key, const std::string& value) {
        os << key << " = " << value << "\n";
    };
    put("main_data", main_data);
    put("item_data", item_data);
    put("corpus_reviews", corpus_reviews);
    put("corpus_items", corpus_items);
    put("test_data", test_data);
    put("out_dir", out_dir);
    put("cache_dir", cache_dir);
    put("templates_dir", templates_dir);
    put("yelp_mode", yelp_mode ? "true" : "false");
    put("methods", methods_to_string(methods));
    put("temperatures", temps_to_string(temperatures));
    put("n_retrieved", std::to_string(n_retrieved));
    put("k_representatives", std::to_string(k_representatives));
    put("selector", pipeline::selector_name(selector));
    put("standard", standard_to_string(standard));
    put("trsr_block_size", std::to_string(trsr_block_size));
    put("seed", std::to_string(seed));
    put("limit", std::to_string(sample_limit));
    put("sample_mode", sample_mode == SampleMode::first ? "first" : "random");
    put("comparison_baseline", pipeline::method_name(comparison_baseline));
    put("failure_policy",
        failure_policy == FailurePolicy::skip ? "skip" : "abort");
    put("workers", std::to_string(workers));
    put("max_concurrency", std::to_string(max_concurrency));
    put("mock", mock ? "true" : "false");
    put("extractor_url", extractor.url);
    put("extractor_model", extractor.model);
    put("summarizer_url", summarizer.url);
    put("summarizer_model", summarizer.model);
    put("generator_url", generator.url);
    put("generator_model", generator.model);
    put("judge_url", judge.url);
    put("judge_model", judge.model);
    put("embedder_url", embedder.url);
    put("embedder_model", embedder.model);
    put("judge_repetitions", std::to_string(judge_repetitions));
    put("judge_temperature", format_temp(judge_temperature));
    put("max_tokens", std::to_string(max_tokens));
    put("top_p", format_temp(top_p));
    put("embed_dim", std::to_string(embed_dim));
    put("embed_batch", std::to_string(embed_batch));
    put("backoff_ms", std::to_string(backoff_ms));
    put("min_text_chars", std::to_string(rules.min_text_chars));
    put("min_description_chars", std::to_string(rules.min_description_chars));
    put("max_description_chars", std::to_string(rules.max_description_chars));
    put("min_reviewers_per_item", std::to_string(rules.min_reviewers_per_item));
    put("min_reviews_per_user", std::to_string(rules.min_reviews_per_user));
    put("max_reviews_per_user", std::to_string(rules.max_reviews_per_user));
    put("max_fixpoint_iterations",
        std::to_string(rules.max_fixpoint_iterations));
    return os.str();
}

std::string RunConfig::run_digest() const {
    std::ostringstream os;
    os << test_data << '|' << corpus_reviews << '|' << corpus_items << '|'
       << yelp_mode << '|';
    for (double t : temperatures) os << format_temp(t) << ',';
    os << '|' << n_retrieved << '|' << k_representatives << '|'
       << pipeline::selector_name(selector) << '|'
       << standard_to_string(standard) << '|' << trsr_block_size << '|' << seed
       << '|' << sample_limit << '|'
       << (sample_mode == SampleMode::first ? "first" : "random") << '|'
       << mock << '|' << extractor.url << '|'
       << extractor.model << '|' << summarizer.url << '|' << summarizer.model
       << '|' << generator.url << '|' << generator.model << '|' << max_tokens
       << '|' << format_temp(top_p) << '|' << embed_dim;
    return sha256_hex(os.str());
}

fs::path RunConfig::archive_dir(Method method) const {
    return fs::path(out_dir) / "archives" /
           (pipeline::method_name(method) + "-" + run_digest().substr(0, 8));
}

void parallel_for(std::size_t count, int workers,
                  const std::function<void(std::size_t)>& fn) {
    if (count == 0) return;
    const int pool = std::max(1, std::min<int>(workers, int(count)));
    if (pool == 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr first_error;
    std::vector<std::thread> threads;
    threads.reserve(pool);
    for (int w = 0; w < pool; ++w) {
        threads.emplace_back([&]() {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

namespace {

struct Backends {
    std::unique_ptr<llm::ChatBackend> chat_owned;
    llm::ChatBackend* chat = nullptr;
    llm::MockBackend* mock = nullptr;  // set when chat_owned is the mock
    std::unique_ptr<user::EmbedBackend> embed_owned;
    user::EmbedBackend* embed = nullptr;
};

std::string role_model(const EndpointConfig& endpoint, const char* fallback) {
    return endpoint.model.empty() ? fallback : endpoint.model;
}

std::string auth_token_from_env() {
    const char* token = std::getenv("DPL_API_TOKEN");
    return token ? token : "";
}

Backends make_backends(const RunConfig& config, llm::ChatBackend* chat_override,
                       user::EmbedBackend* embed_override, bool need_judge) {
    Backends backends;
    if (chat_override) {
        backends.chat = chat_override;
    } else if (config.mock) {
        auto mock = std::make_unique<llm::MockBackend>();
        backends.mock = mock.get();
        backends.chat_owned = std::move(mock);
        backends.chat = backends.chat_owned.get();
    } else {
        auto dispatch = std::make_unique<llm::DispatchBackend>();
        const std::string token = auth_token_from_env();
        std::map<std::string, std::string> model_urls;
        auto add_role = [&](const EndpointConfig& endpoint, const char* role,
                            const char* fallback) {
            if (endpoint.url.empty())
                throw ConfigError(std::string(role) +
                                  "_url is required without --mock");
            const std::string model = role_model(endpoint, fallback);
            auto it = model_urls.find(model);
            if (it != model_urls.end()) {
                if (it->second != endpoint.url)
                    throw ConfigError("model name " + model +
                                      " mapped to two different URLs");
                return;
            }
            model_urls[model] = endpoint.url;
            llm::RemoteOptions options;
            options.base_url = endpoint.url;
            options.auth_token = token;
            options.backoff_ms = config.backoff_ms;
            dispatch->add(model,
                          std::make_shared<llm::RemoteChatBackend>(options));
        };
        add_role(config.extractor, "extractor", "extractor");
        add_role(config.summarizer, "summarizer", "summarizer");
        add_role(config.generator, "generator", "generator");
        if (need_judge && !config.judge.url.empty())
            add_role(config.judge, "judge", "judge");
        backends.chat_owned = std::move(dispatch);
        backends.chat = backends.chat_owned.get();
    }

    if (embed_override) {
        backends.embed = embed_override;
    } else if (config.mock || config.embedder.url.empty()) {
        backends.embed_owned =
            std::make_unique<user::HashedTrigramBackend>(config.embed_dim);
        backends.embed = backends.embed_owned.get();
    } else {
        user::RemoteEmbedOptions options;
        options.base_url = config.embedder.url;
        options.model = role_model(config.embedder, "embedder");
        options.auth_token = auth_token_from_env();
        options.batch_size = config.embed_batch;
        options.backoff_ms = config.backoff_ms;
        backends.embed_owned =
            std::make_unique<user::RemoteEmbedBackend>(options);
        backends.embed = backends.embed_owned.get();
    }
    return backends;
}

std::vector<TaskSample> load_test_samples(const RunConfig& config) {
    if (config.test_data.empty())
        throw ConfigError("test_data is required for this command");
    auto samples = corpus::read_split_file(config.test_data);
    std::sort(samples.begin(), samples.end(),
              [](const TaskSample& a, const TaskSample& b) {
                  return a.sample_id() < b.sample_id();
              });
    if (config.sample_limit > 0 &&
        samples.size() > std::size_t(config.sample_limit)) {
        if (config.sample_mode == SampleMode::random) {
            // Seeded uniform subsample without replacement, then back to
            // sample_id order (repetition runs vary the seed).
            std::mt19937_64 gen(config.seed ^ 0x5eedu);
            for (std::size_t i = 0; i < std::size_t(config.sample_limit); ++i) {
                const std::size_t j =
                    i + std::size_t(gen() % (samples.size() - i));
                std::swap(samples[i], samples[j]);
            }
            samples.resize(std::size_t(config.sample_limit));
            std::sort(samples.begin(), samples.end(),
                      [](const TaskSample& a, const TaskSample& b) {
                          return a.sample_id() < b.sample_id();
                      });
        } else {
            samples.resize(std::size_t(config.sample_limit));
        }
    }
    return samples;
}

corpus::Corpus load_run_corpus(const RunConfig& config) {
    if (config.corpus_reviews.empty() || config.corpus_items.empty())
        throw ConfigError("corpus_reviews and corpus_items are required to run");
    std::vector<corpus::Review> reviews;
    corpus::read_reviews_file(config.corpus_reviews, false, reviews);
    auto items = corpus::read_curated_items(config.corpus_items);
    return corpus::assemble(std::move(reviews), std::move(items));
}

ordered_json record_to_json(const GeneratedRecord& record) {
    ordered_json j;
    j["method"] = record.method;
    j["sample_id"] = record.sample_id;
    j["temperature"] = record.temperature;
    j["text"] = record.text;
    j["trace"] = record.trace;
    return j;
}

bool record_failed(const GeneratedRecord& record) {
    return record.trace.is_object() && record.trace.contains("error");
}

class SelectionTimings final : public pipeline::RunTimings {
public:
    void add_selection_us(long micros) override {
        std::lock_guard<std::mutex> lock(mutex_);
        ++count_;
        total_us_ += micros;
    }
    long count() const { return count_; }
    long total_us() const { return total_us_; }

private:
    std::mutex mutex_;
    long count_ = 0;
    long total_us_ = 0;
};

}  // namespace

std::vector<GeneratedRecord> read_records(const fs::path& records_file) {
    std::vector<GeneratedRecord> records;
    std::ifstream in(records_file);
    if (!in) return records;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw ParseError("malformed record in " + records_file.string(),
                             line_no);
        GeneratedRecord record;
        record.method = j.value("method", "");
        record.sample_id = j.value("sample_id", "");
        record.temperature = j.value("temperature", 0.0);
        record.text = j.value("text", "");
        if (j.contains("trace")) record.trace = j["trace"];
        records.push_back(std::move(record));
    }
    return records;
}

PrepareOutcome cmd_prepare(const RunConfig& config) {
    if (config.main_data.empty() || config.item_data.empty())
        throw ConfigError("prepare requires main_data and item_data");
    PrepareOutcome outcome;

    std::vector<corpus::Review> raw_reviews;
    std::vector<corpus::Item> raw_items;
    corpus::read_reviews_file(config.main_data, config.yelp_mode, raw_reviews);
    corpus::read_items_file(config.item_data, config.yelp_mode, raw_items);

    corpus::CurationRules rules = config.rules;
    rules.yelp_mode = config.yelp_mode;
    corpus::Corpus curated = corpus::curate(std::move(raw_reviews),
                                            std::move(raw_items), rules,
                                            &outcome.curation);
    corpus::Splits splits = corpus::build_splits(curated);

    const fs::path out(config.out_dir);
    fs::create_directories(out);
    outcome.train_path = out / "train.jsonl";
    outcome.val_path = out / "val.jsonl";
    outcome.test_path = out / "test.jsonl";
    outcome.items_path = out / "items.jsonl";
    outcome.reviews_path = out / "reviews.jsonl";
    outcome.stats_path = out / "curation_stats.txt";
    corpus::write_split_file(outcome.train_path, splits.train);
    corpus::write_split_file(outcome.val_path, splits.val);
    corpus::write_split_file(outcome.test_path, splits.test);
    corpus::write_items_file(outcome.items_path, curated.items);
    corpus::write_reviews_file(outcome.reviews_path, curated.reviews);
    outcome.train_count = splits.train.size();
    outcome.val_count = splits.val.size();
    outcome.test_count = splits.test.size();

    auto split_stats = [](const std::vector<TaskSample>& samples) {
        double profile_mean = 0.0, profile_std = 0.0;
        double len_mean = 0.0, len_std = 0.0;
        if (!samples.empty()) {
            for (const auto& s : samples) {
                profile_mean += double(s.profile.size());
                len_mean += double(corpus::utf8_length(s.ground_truth_text));
            }
            profile_mean /= double(samples.size());
            len_mean /= double(samples.size());
            for (const auto& s : samples) {
                const double dp = double(s.profile.size()) - profile_mean;
                const double dl =
                    double(corpus::utf8_length(s.ground_truth_text)) - len_mean;
                profile_std += dp * dp;
                len_std += dl * dl;
            }
            profile_std = std::sqrt(profile_std / double(samples.size()));
            len_std = std::sqrt(len_std / double(samples.size()));
        }
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "count %zu, profile size %.2f +/- %.2f, output length "
                      "%.2f +/- %.2f",
                      samples.size(), profile_mean, profile_std, len_mean,
                      len_std);
        return std::string(buf);
    };

    std::ostringstream report;
    report << outcome.curation.to_text();
    report << "splits\n";
    report << "  train: " << split_stats(splits.train) << "\n";
    report << "  val:   " << split_stats(splits.val) << "\n";
    report << "  test:  " << split_stats(splits.test) << "\n";
    outcome.stats_text = report.str();
    std::ofstream stats_out(outcome.stats_path, std::ios::binary);
    stats_out << outcome.stats_text;
    return outcome;
}

RunOutcome cmd_run(const RunConfig& config, llm::ChatBackend* chat_override,
                   user::EmbedBackend* embed_override) {
    config.validate();
    RunOutcome outcome;

    auto samples = load_test_samples(config);
    corpus::Corpus run_corpus = load_run_corpus(config);
    auto templates = prompts::TemplateSet::load(config.templates_dir);
    Backends backends =
        make_backends(config, chat_override, embed_override, false);
    llm::LlmClient client(*backends.chat, config.cache_dir,
                          config.max_concurrency);

    pipeline::ModelRoles roles;
    roles.extractor = role_model(config.extractor, "extractor");
    roles.summarizer = role_model(config.summarizer, "summarizer");
    roles.generator = role_model(config.generator, "generator");

    pipeline::Services services{run_corpus,        client,
                                *backends.embed,   templates,
                                roles,             config.yelp_mode,
                                config.top_p,      config.max_tokens};

    const auto run_start = std::chrono::steady_clock::now();
    for (Method method : config.methods) {
        const fs::path dir = config.archive_dir(method);
        fs::create_directories(dir);
        // The snapshot is immutable once the archive exists.
        if (!fs::exists(dir / "config.snapshot")) {
            std::ofstream snapshot(dir / "config.snapshot", std::ios::binary);
            snapshot << config.to_kv_text();
        }
        std::set<std::string> existing;
        for (const auto& record : read_records(dir / "records.jsonl"))
            existing.insert(record.sample_id + "@" +
                            format_temp(record.temperature));

        SelectionTimings timings;
        std::ofstream records_out(dir / "records.jsonl",
                                  std::ios::binary | std::ios::app);
        if (!records_out)
            throw Error("cannot append to " + (dir / "records.jsonl").string());

        for (double temperature : config.temperatures) {
            std::vector<std::size_t> todo;
            for (std::size_t i = 0; i < samples.size(); ++i) {
                const std::string key =
                    samples[i].sample_id() + "@" + format_temp(temperature);
                if (existing.count(key))
                    ++outcome.records_skipped_existing;
                else
                    todo.push_back(i);
            }
            if (todo.empty()) continue;

            pipeline::MethodConfig method_config;
            method_config.method = method;
            method_config.n_retrieved = config.n_retrieved;
            method_config.k_representatives = config.k_representatives;
            method_config.selector = config.selector;
            method_config.standard = config.standard;
            method_config.trsr_block_size = config.trsr_block_size;
            method_config.temperature = temperature;
            method_config.seed = config.seed;

            std::vector<GeneratedRecord> slots(todo.size());
            std::vector<std::string> errors(todo.size());
            parallel_for(todo.size(), config.workers, [&](std::size_t slot) {
                const TaskSample& sample = samples[todo[slot]];
                try {
                    slots[slot] = pipeline::run_method(sample, method_config,
                                                       services, &timings);
                } catch (const std::exception& e) {
                    errors[slot] = e.what();
                    GeneratedRecord failed;
                    failed.method = pipeline::method_name(method);
                    failed.sample_id = sample.sample_id();
                    failed.temperature = temperature;
                    failed.trace = ordered_json{{"error", errors[slot]}};
                    slots[slot] = std::move(failed);
                }
            });

            for (std::size_t slot = 0; slot < slots.size(); ++slot) {
                if (!errors[slot].empty()) {
                    ++outcome.failures;
                    if (config.failure_policy == FailurePolicy::abort) {
                        records_out.flush();
                        throw Error("sample " + slots[slot].sample_id +
                                    " failed under abort policy: " +
                                    errors[slot]);
                    }
                }
                records_out << record_to_json(slots[slot]).dump() << '\n';
                ++outcome.records_written;
            }
            records_out.flush();
        }

        std::ofstream timings_out(dir / "timings.txt", std::ios::binary);
        const double wall_s =
            std::chrono::duration_cast<std::chrono::duration<double>>(
                std::chrono::steady_clock::now() - run_start)
                .count();
        timings_out << "wall_seconds " << wall_s << "\n";
        timings_out << "selection_calls " << timings.count() << "\n";
        timings_out << "selection_total_us " << timings.total_us() << "\n";
        if (timings.count() > 0)
            timings_out << "selection_mean_us "
                        << timings.total_us() / timings.count() << "\n";
        outcome.archives.push_back(dir);
    }
    return outcome;
}

namespace {

struct ScoredArchive {
    std::map<double, metrics::TemperatureScores> per_temperature;
    std::size_t scored = 0;
    std::size_t skipped_failures = 0;
};

/// Scores one archive's records against the test references. Judge
/// scoring happens when `judge_client` is non-null.
ScoredArchive score_archive(
    const std::vector<GeneratedRecord>& records,
    const std::map<std::string, TaskSample>& references,
    const std::map<std::string, corpus::Item>* items,
    llm::LlmClient* judge_client, const RunConfig& config,
    const prompts::Template* judge_template) {
    ScoredArchive scored;

    // Group records per temperature, sample order fixed by sample_id.
    std::map<double, std::vector<const GeneratedRecord*>> groups;
    for (const auto& record : records) {
        if (record_failed(record)) {
            ++scored.skipped_failures;
            continue;
        }
        if (!references.count(record.sample_id)) continue;
        groups[record.temperature].push_back(&record);
    }
    for (auto& [temp, group] : groups) {
        std::sort(group.begin(), group.end(),
                  [](const GeneratedRecord* a, const GeneratedRecord* b) {
                      return a->sample_id < b->sample_id;
                  });
        metrics::TemperatureScores& ts = scored.per_temperature[temp];
        ts.samples.resize(group.size());
        std::vector<std::string> hyps(group.size());
        std::vector<std::string> refs(group.size());
        std::atomic<std::size_t> scored_count{0};
        parallel_for(group.size(), config.workers, [&](std::size_t i) {
            const GeneratedRecord& record = *group[i];
            const TaskSample& ref = references.at(record.sample_id);
            metrics::SampleScores s;
            s.sample_id = record.sample_id;
            s.rouge1 = metrics::rouge1(record.text, ref.ground_truth_text);
            s.rougeL = metrics::rougeL(record.text, ref.ground_truth_text);
            s.meteor = metrics::meteor(record.text, ref.ground_truth_text);
            if (judge_client && judge_template) {
                metrics::JudgeContext ctx;
                ctx.generated = record.text;
                ctx.ground_truth = ref.ground_truth_text;
                ctx.review_title = ref.review_title;
                ctx.rating = ref.rating;
                if (items) {
                    auto it = items->find(ref.item_id);
                    if (it != items->end()) {
                        ctx.item_title = it->second.item_title;
                        if (!config.yelp_mode)
                            ctx.item_description = it->second.description;
                    }
                }
                metrics::JudgeOptions options;
                options.model = role_model(config.judge, "judge");
                options.repetitions = config.judge_repetitions;
                options.temperature = config.judge_temperature;
                options.top_p = config.top_p;
                options.max_tokens = config.max_tokens;
                auto result =
                    metrics::judge_score(ctx, *judge_client, *judge_template,
                                         options);
                s.judge_raw = result.raw_mean;
                s.judge_norm = result.norm;
            }
            hyps[i] = record.text;
            refs[i] = ref.ground_truth_text;
            ts.samples[i] = std::move(s);
            scored_count.fetch_add(1);
        });
        ts.bleu = metrics::bleu_corpus(hyps, refs);
        scored.scored += scored_count.load();
    }
    return scored;
}

}  // namespace

EvalOutcome cmd_eval(const RunConfig& config, llm::ChatBackend* chat_override) {
    config.validate();
    EvalOutcome outcome;

    auto samples = load_test_samples(config);
    std::map<std::string, TaskSample> references;
    for (auto& s : samples) references.emplace(s.sample_id(), std::move(s));

    const bool judge_enabled = config.mock || !config.judge.url.empty() ||
                               chat_override != nullptr;
    std::map<std::string, corpus::Item> items;
    if (judge_enabled && !config.corpus_items.empty())
        items = corpus::read_curated_items(config.corpus_items);

    std::unique_ptr<llm::LlmClient> judge_client;
    Backends backends;
    prompts::Template judge_template;
    if (judge_enabled) {
        judge_template =
            prompts::load_template(fs::path(config.templates_dir) / "judge.txt");
        backends = make_backends(config, chat_override, nullptr, true);
        judge_client = std::make_unique<llm::LlmClient>(
            *backends.chat, config.cache_dir, config.max_concurrency);
    }

    // Baseline first so every method's p-values can be computed in one pass.
    std::map<std::string, ScoredArchive> scored_by_method;
    auto load_and_score = [&](Method method) {
        const fs::path records_path =
            config.archive_dir(method) / "records.jsonl";
        if (!fs::exists(records_path))
            throw ConfigError("archive missing for method " +
                              pipeline::method_name(method) + ": " +
                              records_path.string());
        auto records = read_records(records_path);
        return score_archive(records, references,
                             items.empty() ? nullptr : &items,
                             judge_client.get(), config,
                             judge_enabled ? &judge_template : nullptr);
    };

    bool need_baseline = false;
    for (Method method : config.methods)
        if (method != config.comparison_baseline) need_baseline = true;
    if (need_baseline)
        scored_by_method[pipeline::method_name(config.comparison_baseline)] =
            load_and_score(config.comparison_baseline);
    for (Method method : config.methods) {
        const std::string name = pipeline::method_name(method);
        if (!scored_by_method.count(name))
            scored_by_method[name] = load_and_score(method);
    }

    // Per-sample scores land next to the records they grade.
    auto write_scores = [&](Method method, const ScoredArchive& scored) {
        std::ofstream out(config.archive_dir(method) / "scores.jsonl",
                          std::ios::binary);
        for (const auto& [temp, ts] : scored.per_temperature) {
            for (const auto& s : ts.samples) {
                ordered_json j;
                j["sample_id"] = s.sample_id;
                j["temperature"] = temp;
                j["rouge1"] = s.rouge1;
                j["rougeL"] = s.rougeL;
                j["meteor"] = s.meteor;
                if (s.judge_raw) {
                    j["judge_raw"] = *s.judge_raw;
                    j["judge_norm"] = *s.judge_norm;
                }
                out << j.dump() << '\n';
            }
            ordered_json bleu_row;
            bleu_row["temperature"] = temp;
            bleu_row["bleu"] = ts.bleu;
            out << bleu_row.dump() << '\n';
        }
    };
    if (need_baseline)
        write_scores(config.comparison_baseline,
                     scored_by_method[pipeline::method_name(
                         config.comparison_baseline)]);
    for (Method method : config.methods)
        if (method != config.comparison_baseline || !need_baseline)
            write_scores(method,
                         scored_by_method[pipeline::method_name(method)]);

    const std::string baseline_name =
        pipeline::method_name(config.comparison_baseline);
    metrics::RunReport baseline_report;
    if (need_baseline)
        baseline_report = metrics::aggregate(
            baseline_name, scored_by_method[baseline_name].per_temperature);

    for (Method method : config.methods) {
        const std::string name = pipeline::method_name(method);
        metrics::RunReport report =
            metrics::aggregate(name, scored_by_method[name].per_temperature);
        if (name != baseline_name) {
            for (const auto& [metric, summary] : report.metrics) {
                auto it = baseline_report.metrics.find(metric);
                if (it == baseline_report.metrics.end()) continue;
                report.p_values[metric] = metrics::t_test(
                    summary.per_temperature, it->second.per_temperature);
            }
        }
        outcome.reports.push_back(std::move(report));
    }

    // Emit the human-readable table and the machine-readable TSV.
    std::ostringstream table;
    std::ostringstream tsv;
    table << "evaluation report (config " << config.run_digest().substr(0, 8)
          << ")\n";
    table << "temperatures: " << temps_to_string(config.temperatures) << "\n";
    table << "baseline: " << baseline_name << "\n\n";
    char header[160];
    std::snprintf(header, sizeof(header), "%-12s %-8s %-12s %-12s %-12s\n",
                  "method", "metric", "mean", "std",
                  ("p_vs_" + baseline_name).c_str());
    table << header;
    tsv << "method\tmetric\tmean\tstd\tp_value\n";
    for (const auto& report : outcome.reports) {
        for (const auto& [metric, summary] : report.metrics) {
            char line[200];
            std::string p = "-";
            auto pit = report.p_values.find(metric);
            if (pit != report.p_values.end()) {
                char pbuf[32];
                std::snprintf(pbuf, sizeof(pbuf), "%.6g", pit->second);
                p = pbuf;
            }
            std::snprintf(line, sizeof(line), "%-12s %-8s %-12s %-12s %-12s\n",
                          report.method.c_str(), metric.c_str(),
                          format_metric(summary.mean).c_str(),
                          format_metric(summary.stddev).c_str(), p.c_str());
            table << line;
            tsv << report.method << '\t' << metric << '\t'
                << format_metric(summary.mean) << '\t'
                << format_metric(summary.stddev) << '\t' << p << '\n';
        }
    }

    const fs::path report_dir = fs::path(config.out_dir) / "reports";
    fs::create_directories(report_dir);
    const std::string stem = "report-" + config.run_digest().substr(0, 8);
    outcome.report_txt = report_dir / (stem + ".txt");
    outcome.report_tsv = report_dir / (stem + ".tsv");
    outcome.table_text = table.str();
    std::ofstream(outcome.report_txt, std::ios::binary) << outcome.table_text;
    std::ofstream(outcome.report_tsv, std::ios::binary) << tsv.str();
    return outcome;
}

namespace {

/// Per-sample pooled lexical means (across temperatures) for one archive.
std::map<std::string, std::array<double, 3>> pooled_lexical(
    const std::vector<GeneratedRecord>& records,
    const std::map<std::string, TaskSample>& references) {
    std::map<std::string, std::array<double, 4>> acc;  // r1, rL, meteor, count
    for (const auto& record : records) {
        if (record_failed(record)) continue;
        auto ref = references.find(record.sample_id);
        if (ref == references.end()) continue;
        auto& a = acc[record.sample_id];
        a[0] += metrics::rouge1(record.text, ref->second.ground_truth_text);
        a[1] += metrics::rougeL(record.text, ref->second.ground_truth_text);
        a[2] += metrics::meteor(record.text, ref->second.ground_truth_text);
        a[3] += 1.0;
    }
    std::map<std::string, std::array<double, 3>> out;
    for (auto& [id, a] : acc)
        if (a[3] > 0) out[id] = {a[0] / a[3], a[1] / a[3], a[2] / a[3]};
    return out;
}

double group_metric(const std::map<std::string, std::array<double, 3>>& pooled,
                    const std::set<std::string>& user_group,
                    const std::map<std::string, std::string>& sample_user,
                    int metric_idx) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& [sample_id, values] : pooled) {
        auto user = sample_user.find(sample_id);
        if (user == sample_user.end() || !user_group.count(user->second))
            continue;
        sum += values[std::size_t(metric_idx)];
        ++n;
    }
    return n == 0 ? 0.0 : sum / double(n);
}

}  // namespace

std::string cmd_analyze(const RunConfig& config, const AnalyzeOptions& options,
                        user::EmbedBackend* embed_override) {
    auto samples = load_test_samples(config);
    std::map<std::string, TaskSample> references;
    std::map<std::string, std::string> sample_user;
    for (auto& s : samples) {
        sample_user[s.sample_id()] = s.user_id;
        references.emplace(s.sample_id(), std::move(s));
    }

    std::ostringstream report;
    if (options.mode == "uniqueness") {
        const std::string target_method =
            options.method.empty()
                ? pipeline::method_name(config.methods.front())
                : options.method;

        const fs::path base_records =
            config.archive_dir(Method::non_perso) / "records.jsonl";
        if (!fs::exists(base_records))
            throw ConfigError("uniqueness analysis requires a non_perso archive: " +
                              base_records.string());
        const fs::path method_records =
            config.archive_dir(pipeline::parse_method(target_method)) /
            "records.jsonl";
        if (!fs::exists(method_records))
            throw ConfigError("archive missing for method " + target_method +
                              ": " + method_records.string());

        // Uniqueness label from the test users' profile embeddings.
        std::vector<user::UserHistory> histories;
        for (const auto& [sample_id, ref] : references) {
            user::UserHistory h;
            h.user_id = ref.user_id;
            for (const auto& r : ref.profile)
                h.texts.push_back(retrieval::review_document(r));
            histories.push_back(std::move(h));
        }
        std::unique_ptr<user::EmbedBackend> embed_owned;
        user::EmbedBackend* embed = embed_override;
        if (!embed) {
            embed_owned =
                std::make_unique<user::HashedTrigramBackend>(config.embed_dim);
            embed = embed_owned.get();
        }
        auto split = user::uniqueness_split(histories, *embed);

        auto method_pooled =
            pooled_lexical(read_records(method_records), references);
        auto base_pooled =
            pooled_lexical(read_records(base_records), references);

        report << "uniqueness analysis: " << target_method
               << " - non_perso absolute deltas\n";
        report << "unique users: " << split.unique.size()
               << ", non-unique users: " << split.non_unique.size() << "\n\n";
        const char* metric_names[3] = {"rouge1", "rougeL", "meteor"};
        char header[96];
        std::snprintf(header, sizeof(header), "%-8s %-14s %-14s\n", "metric",
                      "unique", "non_unique");
        report << header;
        for (int m = 0; m < 3; ++m) {
            const double d_unique =
                group_metric(method_pooled, split.unique, sample_user, m) -
                group_metric(base_pooled, split.unique, sample_user, m);
            const double d_non =
                group_metric(method_pooled, split.non_unique, sample_user, m) -
                group_metric(base_pooled, split.non_unique, sample_user, m);
            char line[96];
            std::snprintf(line, sizeof(line), "%-8s %+.6f      %+.6f\n",
                          metric_names[m], d_unique, d_non);
            report << line;
        }
    } else if (options.mode == "sweep") {
        if (options.archives.empty())
            throw ConfigError("sweep mode requires --archives");
        struct Row {
            long param;
            double value;
            std::string dir;
        };
        std::vector<Row> rows;
        for (const auto& dir : options.archives) {
            RunConfig snapshot =
                RunConfig::from_file(fs::path(dir) / "config.snapshot");
            Row row;
            row.dir = dir;
            row.param = options.sweep_param == "N" ? snapshot.n_retrieved
                                                   : snapshot.k_representatives;
            auto records = read_records(fs::path(dir) / "records.jsonl");
            if (options.metric == "bleu") {
                std::vector<std::string> hyps, refs;
                for (const auto& record : records) {
                    if (record_failed(record)) continue;
                    auto ref = references.find(record.sample_id);
                    if (ref == references.end()) continue;
                    hyps.push_back(record.text);
                    refs.push_back(ref->second.ground_truth_text);
                }
                row.value = metrics::bleu_corpus(hyps, refs);
            } else {
                int idx = options.metric == "rouge1"   ? 0
                          : options.metric == "rougeL" ? 1
                          : options.metric == "meteor" ? 2
                                                       : -1;
                if (idx < 0)
                    throw ConfigError("unknown analysis metric: " +
                                      options.metric);
                auto pooled = pooled_lexical(records, references);
                double sum = 0.0;
                for (const auto& [id, values] : pooled)
                    sum += values[std::size_t(idx)];
                row.value = pooled.empty() ? 0.0 : sum / double(pooled.size());
            }
            rows.push_back(std::move(row));
        }
        std::sort(rows.begin(), rows.end(),
                  [](const Row& a, const Row& b) { return a.param < b.param; });
        report << "sweep analysis: metric " << options.metric << " across "
               << options.sweep_param << "\n\n";
        char header[96];
        std::snprintf(header, sizeof(header), "%-6s %-12s %s\n",
                      options.sweep_param.c_str(), options.metric.c_str(),
                      "archive");
        report << header;
        for (const auto& row : rows) {
            char line[512];
            std::snprintf(line, sizeof(line), "%-6ld %-12s %s\n", row.param,
                          format_metric(row.value).c_str(), row.dir.c_str());
            report << line;
        }
    } else {
        throw ConfigError("unknown analysis mode: " + options.mode);
    }

    const fs::path report_dir = fs::path(config.out_dir) / "reports";
    fs::create_directories(report_dir);
    const fs::path out_path =
        report_dir / ("analysis-" + options.mode + "-" +
                      config.run_digest().substr(0, 8) + ".txt");
    std::ofstream(out_path, std::ios::binary) << report.str();
    return report.str();
}

}  // namespace dpl::runner
