#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <filesystem>
#include <mutex>

#include "doctest.h"
#include "dpl/error.hpp"
#include "dpl/pipeline.hpp"
#include "dpl/selectors.hpp"
#include "fixtures.hpp"

using namespace dpl;
namespace fs = std::filesystem;
using pipeline::Method;
using pipeline::MethodConfig;

namespace {

/// Mock-grammar backend that also records every request it sees.
class CapturingBackend final : public llm::ChatBackend {
public:
    llm::ChatResponse complete(const llm::ChatRequest& request) override {
        {
            std::lock_guard<std::mutex> lock(mutex_);
            requests.push_back(request);
        }
        return inner_.complete(request);
    }
    long calls() const { return inner_.calls(); }

    std::vector<llm::ChatRequest> requests;

private:
    llm::MockBackend inner_;
    std::mutex mutex_;
};

struct Harness {
    corpus::Corpus corpus;
    prompts::TemplateSet templates;
    CapturingBackend backend;
    user::HashedTrigramBackend embed{256};
    fs::path cache_dir;
    std::unique_ptr<llm::LlmClient> client;

    explicit Harness(int n_users = 6, int n_items = 12,
                     const std::string& tag = "h") {
        fixtures::RawFixture fx = fixtures::crossed_fixture(n_users, n_items);
        corpus::CurationRules permissive;
        permissive.min_reviews_per_user = 1;
        permissive.min_reviewers_per_item = 1;
        corpus = corpus::curate(fx.reviews, fx.items, permissive, nullptr);
        templates = prompts::TemplateSet::load(DPL_TEMPLATES_DIR);
        cache_dir = fs::temp_directory_path() / ("dpl_pipe_" + tag);
        fs::remove_all(cache_dir);
        fs::create_directories(cache_dir);
        client = std::make_unique<llm::LlmClient>(backend, cache_dir);
    }
    ~Harness() { fs::remove_all(cache_dir); }

    pipeline::Services services() {
        return pipeline::Services{corpus,          *client,
                                  embed,           templates,
                                  {"extractor", "summarizer", "generator"},
                                  false,           0.95,
                                  2048};
    }

    /// Target = the user's most recent review; profile = the rest.
    corpus::TaskSample sample_for(int u) {
        const auto reviews = corpus.user_reviews(fixtures::user_id(u));
        REQUIRE(!reviews.empty());
        corpus::TaskSample s;
        const corpus::Review& target = reviews.back();
        s.user_id = target.user_id;
        s.item_id = target.item_id;
        s.rating = target.rating;
        s.review_title = target.review_title;
        s.ground_truth_text = target.text;
        s.timestamp = target.timestamp;
        s.profile.assign(reviews.begin(), reviews.end() - 1);
        return s;
    }
};

MethodConfig config_for(Method method, double temperature = 0.4) {
    MethodConfig config;
    config.method = method;
    config.n_retrieved = 8;
    config.k_representatives = 4;
    config.temperature = temperature;
    config.seed = 42;
    return config;
}

}  // namespace

TEST_CASE("build_difference_prompt structure") {
    Harness h(6, 12, "diffprompt");
    auto services = h.services();
    const auto item_reviews = h.corpus.item_reviews(fixtures::item_id(0));
    REQUIRE(item_reviews.size() == 6);
    const corpus::Review& target = item_reviews[0];
    std::vector<corpus::Review> peers(item_reviews.begin() + 1,
                                      item_reviews.begin() + 5);
    const corpus::Item& item = h.corpus.items.at(fixtures::item_id(0));

    SUBCASE("full standard carries all three dimension blocks") {
        auto [system, user] = pipeline::build_difference_prompt(
            target, item, peers, pipeline::DifferenceStandard::all(),
            h.templates, false);
        CHECK(user.find("Writing Style") != std::string::npos);
        CHECK(user.find("Emotional Style") != std::string::npos);
        CHECK(user.find("Semantic Style") != std::string::npos);
        for (int k = 1; k <= 4; ++k)
            CHECK(user.find("Peer-" + std::to_string(k) + " ") !=
                  std::string::npos);
        CHECK(user.find("Peer-5") == std::string::npos);
        CHECK(user.find(item.item_title) != std::string::npos);
        CHECK(user.find(item.description) != std::string::npos);
        CHECK(user.find(target.review_title) != std::string::npos);
        CHECK(user.find(target.text) != std::string::npos);
    }

    SUBCASE("empty standard uses the generic instruction") {
        auto [system, user] = pipeline::build_difference_prompt(
            target, item, peers, pipeline::DifferenceStandard::none(),
            h.templates, false);
        CHECK(user.find("Writing Style") == std::string::npos);
        CHECK(user.find("Emotional Style") == std::string::npos);
        CHECK(user.find("Semantic Style") == std::string::npos);
        CHECK(user.find("Describe the differences") != std::string::npos);
    }

    SUBCASE("single-dimension variant carries exactly one block") {
        pipeline::DifferenceStandard wri_only{true, false, false};
        auto [system, user] = pipeline::build_difference_prompt(
            target, item, peers, wri_only, h.templates, false);
        CHECK(user.find("Writing Style") != std::string::npos);
        CHECK(user.find("Emotional Style") == std::string::npos);
        CHECK(user.find("Semantic Style") == std::string::npos);
    }

    SUBCASE("no peers raises") {
        CHECK_THROWS_AS(pipeline::build_difference_prompt(
                            target, item, {}, pipeline::DifferenceStandard::all(),
                            h.templates, false),
                        PipelineError);
    }
}

TEST_CASE("extract_differences") {
    Harness h(6, 12, "extract");
    auto services = h.services();
    auto sample = h.sample_for(0);
    auto config = config_for(Method::dpl);

    SUBCASE("one record per retrieved element with at most K peers") {
        auto retrieved = pipeline::retrieve_for(sample, 8, services);
        REQUIRE(retrieved.size() == 8);
        auto diffs = pipeline::extract_differences(sample, retrieved, config,
                                                   services);
        REQUIRE(diffs.size() == 8);
        for (std::size_t n = 0; n < diffs.size(); ++n) {
            CHECK(diffs[n].key_history_index == int(n) + 1);
            CHECK(diffs[n].peer_user_ids.size() <= 4);
            CHECK(!diffs[n].peer_user_ids.empty());
            for (const auto& peer : diffs[n].peer_user_ids)
                CHECK(peer != sample.user_id);
            // Mock grammar: all three sections present.
            CHECK(diffs[n].text.find("Writing Style:") != std::string::npos);
            CHECK(diffs[n].text.find("Emotional Style:") != std::string::npos);
            CHECK(diffs[n].text.find("Semantic Style:") != std::string::npos);
        }
        CHECK(h.backend.calls() == 8);
    }

    SUBCASE("an element without co-reviewers skips the model call") {
        // A solo item only user 0 reviewed, early enough to sit in the
        // profile.
        corpus::Review solo = fixtures::crossed_review(0, 0);
        solo.item_id = "solo";
        solo.timestamp = fixtures::kBaseTs - 1000;
        std::vector<corpus::Review> reviews = h.corpus.reviews;
        reviews.push_back(solo);
        std::map<std::string, corpus::Item> items = h.corpus.items;
        corpus::Item solo_item;
        solo_item.item_id = "solo";
        solo_item.item_title = "Solo Item";
        solo_item.description = fixtures::item_description(777);
        items.emplace("solo", solo_item);
        corpus::Corpus patched = corpus::assemble(reviews, items);
        pipeline::Services patched_services{
            patched, *h.client, h.embed, h.templates,
            {"extractor", "summarizer", "generator"}, false, 0.95, 2048};

        auto sample2 = sample;
        sample2.profile.push_back(solo);
        auto retrieved = pipeline::retrieve_for(sample2, 12, patched_services);
        REQUIRE(retrieved.size() == 12);
        const long before = h.backend.calls();
        auto diffs = pipeline::extract_differences(sample2, retrieved, config,
                                                   patched_services);
        REQUIRE(diffs.size() == 12);
        int peerless = 0;
        for (const auto& d : diffs) {
            if (d.peer_user_ids.empty()) {
                ++peerless;
                CHECK(d.item_id == "solo");
                CHECK(d.text.empty());
            }
        }
        CHECK(peerless == 1);
        CHECK(h.backend.calls() - before == 11);  // solo element skipped
    }
}

TEST_CASE("summarize_preferences") {
    Harness h(6, 12, "summ");
    auto services = h.services();
    auto sample = h.sample_for(1);
    auto config = config_for(Method::dpl);

    SUBCASE("the summary sees the tokens of every difference record") {
        auto retrieved = pipeline::retrieve_for(sample, 3, services);
        REQUIRE(retrieved.size() == 3);
        auto diffs = pipeline::extract_differences(sample, retrieved, config,
                                                   services);
        auto pref = pipeline::summarize_preferences(sample, retrieved, diffs,
                                                    services, 0.4);
        CHECK(pref.source_difference_indices.size() == 3);
        for (const auto& d : diffs) {
            for (std::size_t pos = d.text.find("mk"); pos != std::string::npos;
                 pos = d.text.find("mk", pos + 1)) {
                if (pos + 14 > d.text.size()) break;
                CHECK(pref.text.find(d.text.substr(pos, 14)) !=
                      std::string::npos);
            }
        }
    }

    SUBCASE("N=1 renders exactly one history and one difference block") {
        auto retrieved = pipeline::retrieve_for(sample, 1, services);
        REQUIRE(retrieved.size() == 1);
        auto diffs = pipeline::extract_differences(sample, retrieved, config,
                                                   services);
        h.backend.requests.clear();
        pipeline::summarize_preferences(sample, retrieved, diffs, services, 0.4);
        REQUIRE(h.backend.requests.size() == 1);
        const std::string& user = h.backend.requests[0].user;
        CHECK(user.find("History-1 ") != std::string::npos);
        CHECK(user.find("History-2") == std::string::npos);
        CHECK(user.find("Difference-1:") != std::string::npos);
        CHECK(user.find("Difference-2") == std::string::npos);
    }

    SUBCASE("mismatched sizes raise") {
        auto retrieved = pipeline::retrieve_for(sample, 2, services);
        CHECK_THROWS_AS(pipeline::summarize_preferences(sample, retrieved, {},
                                                        services, 0.4),
                        PipelineError);
        retrieval::RetrievedSet empty;
        CHECK_THROWS_AS(pipeline::summarize_preferences(sample, empty, {},
                                                        services, 0.4),
                        PipelineError);
    }
}

TEST_CASE("generation prompt carries the task fields per method") {
    Harness h(6, 12, "gen");
    auto services = h.services();
    auto sample = h.sample_for(2);
    const corpus::Item& item = h.corpus.items.at(sample.item_id);

    SUBCASE("non-personalized prompt has no profile text") {
        h.backend.requests.clear();
        auto record = pipeline::run_method(sample, config_for(Method::non_perso),
                                           services);
        REQUIRE(h.backend.requests.size() == 1);
        const std::string& user = h.backend.requests[0].user;
        CHECK(user.find(item.item_title) != std::string::npos);
        CHECK(user.find(item.description) != std::string::npos);
        CHECK(user.find(sample.review_title) != std::string::npos);
        CHECK(user.find("History-") == std::string::npos);
        for (const auto& p : sample.profile)
            CHECK(user.find(p.text) == std::string::npos);
        CHECK(!record.text.empty());
    }

    SUBCASE("dpl prompt places the preference profile before the reviews") {
        h.backend.requests.clear();
        auto record = pipeline::run_method(sample, config_for(Method::dpl),
                                           services);
        const auto& requests = h.backend.requests;
        REQUIRE(!requests.empty());
        const std::string& user = requests.back().user;  // generation call
        const auto phi_pos = user.find("Difference-aware preference profile");
        const auto hist_pos = user.find("The user's key past reviews");
        REQUIRE(phi_pos != std::string::npos);
        REQUIRE(hist_pos != std::string::npos);
        CHECK(phi_pos < hist_pos);
        CHECK(user.find(item.item_title) != std::string::npos);
        CHECK(!record.text.empty());
    }
}

TEST_CASE("run_method call counts and traces") {
    Harness h(6, 21, "counts");
    auto services = h.services();
    auto sample = h.sample_for(0);
    REQUIRE(sample.profile.size() == 20);

    SUBCASE("rag and non_perso make exactly one call") {
        long before = h.backend.calls();
        pipeline::run_method(sample, config_for(Method::non_perso), services);
        CHECK(h.backend.calls() - before == 1);
        before = h.backend.calls();
        pipeline::run_method(sample, config_for(Method::rag), services);
        CHECK(h.backend.calls() - before == 1);
    }

    SUBCASE("intsum summarizes once then generates") {
        const long before = h.backend.calls();
        pipeline::run_method(sample, config_for(Method::intsum), services);
        CHECK(h.backend.calls() - before == 2);
    }

    SUBCASE("llm_trsr over a 20-review profile in blocks of 8 makes 3+1 calls") {
        const long before = h.backend.calls();
        auto record = pipeline::run_method(sample, config_for(Method::llm_trsr),
                                           services);
        CHECK(h.backend.calls() - before == 4);
        CHECK(record.trace["summary_calls"] == 3);
    }

    SUBCASE("dpl makes peered + 2 calls") {
        const long before = h.backend.calls();
        auto record = pipeline::run_method(sample, config_for(Method::dpl),
                                           services);
        // Every item in this corpus has co-reviewers: 8 peered elements.
        CHECK(h.backend.calls() - before == 8 + 2);
        CHECK(record.trace["differences"].size() == 8);
    }

    SUBCASE("cicl negative example is stable under the same seed") {
        auto a = pipeline::run_method(sample, config_for(Method::cicl), services);
        auto b = pipeline::run_method(sample, config_for(Method::cicl), services);
        CHECK(a.trace["negative_user"] == b.trace["negative_user"]);
        CHECK(a.text == b.text);
        CHECK(a.trace["negative_user"].get<std::string>() != sample.user_id);
    }

    SUBCASE("persona_db on a 2-user corpus picks the only other user") {
        Harness two(2, 18, "twousers");
        auto services2 = two.services();
        auto sample2 = two.sample_for(0);
        auto record = pipeline::run_method(sample2, config_for(Method::persona_db),
                                           services2);
        CHECK(record.trace["similar_user"].get<std::string>() ==
              fixtures::user_id(1));
    }
}

TEST_CASE("ground-truth leakage is caught at prompt assembly") {
    Harness h(6, 12, "leak");
    auto services = h.services();
    auto sample = h.sample_for(3);
    // Poison the profile: one entry embeds the exact ground-truth text.
    sample.profile[0].text += " " + sample.ground_truth_text;
    CHECK_THROWS_AS(
        pipeline::run_method(sample, config_for(Method::rag), services),
        PipelineError);
}

TEST_CASE("dpl cluster selection degrades to all other users when K is large") {
    Harness h(5, 12, "fallback");
    auto services = h.services();
    auto sample = h.sample_for(0);
    auto config = config_for(Method::dpl);
    config.k_representatives = 10;  // more than the 4 other users

    auto retrieved = pipeline::retrieve_for(sample, 4, services);
    auto diffs = pipeline::extract_differences(sample, retrieved, config,
                                               services);
    for (const auto& d : diffs) {
        // All other users, ordered by user_id.
        std::vector<std::string> expected;
        for (const auto& r : h.corpus.item_reviews(d.item_id))
            if (r.user_id != sample.user_id) expected.push_back(r.user_id);
        std::sort(expected.begin(), expected.end());
        CHECK(d.peer_user_ids == expected);
    }
}

TEST_CASE("records are byte-identical across reruns") {
    auto run_once = [](const std::string& tag) {
        Harness h(6, 12, tag);
        auto services = h.services();
        auto sample = h.sample_for(4);
        nlohmann::ordered_json out = nlohmann::ordered_json::array();
        for (Method m : {Method::non_perso, Method::rag, Method::intsum,
                         Method::llm_trsr, Method::cicl, Method::persona_db,
                         Method::dpl}) {
            auto record = pipeline::run_method(sample, config_for(m), services);
            nlohmann::ordered_json j;
            j["method"] = record.method;
            j["text"] = record.text;
            j["trace"] = record.trace;
            out.push_back(j);
        }
        return out.dump();
    };
    CHECK(run_once("purity_a") == run_once("purity_b"));
}
