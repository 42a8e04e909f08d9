#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <atomic>
#include <filesystem>
#include <fstream>
#include <thread>
#include <vector>

#include "doctest.h"
#include "dpl/embedding.hpp"
#include "dpl/error.hpp"
#include "dpl/llm_client.hpp"
#include "httplib.h"
#include "json.hpp"

using namespace dpl;
namespace fs = std::filesystem;

namespace {

llm::ChatRequest basic_request(const std::string& user = "say something") {
    llm::ChatRequest r;
    r.model = "m1";
    r.system = "You write item reviews.";
    r.user = user;
    r.temperature = 0.2;
    return r;
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

/// Backend instrumented to observe concurrency and call counts.
class ProbeBackend final : public llm::ChatBackend {
public:
    llm::ChatResponse complete(const llm::ChatRequest& request) override {
        const int now = concurrent_.fetch_add(1) + 1;
        int seen = max_concurrent_.load();
        while (now > seen && !max_concurrent_.compare_exchange_weak(seen, now)) {
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(15));
        concurrent_.fetch_sub(1);
        calls_.fetch_add(1);
        llm::ChatResponse response;
        response.text = "probe:" + request.user;
        return response;
    }
    std::atomic<int> concurrent_{0};
    std::atomic<int> max_concurrent_{0};
    std::atomic<int> calls_{0};
};

}  // namespace

TEST_CASE("cache keys separate every request field") {
    const auto base = basic_request();
    const std::string key = llm::cache_key(base);
    CHECK(key == llm::cache_key(base));

    auto variant = base;
    variant.model = "m2";
    CHECK(llm::cache_key(variant) != key);
    variant = base;
    variant.system += "!";
    CHECK(llm::cache_key(variant) != key);
    variant = base;
    variant.user += "!";
    CHECK(llm::cache_key(variant) != key);
    variant = base;
    variant.temperature = 0.4;
    CHECK(llm::cache_key(variant) != key);
    variant = base;
    variant.top_p = 0.9;
    CHECK(llm::cache_key(variant) != key);
    variant = base;
    variant.max_tokens = 1024;
    CHECK(llm::cache_key(variant) != key);
    variant = base;
    variant.seed_tag = "judge-rep-1";
    CHECK(llm::cache_key(variant) != key);

    // Judge repetitions never collide.
    auto rep0 = base;
    rep0.seed_tag = "judge-rep-0";
    auto rep1 = base;
    rep1.seed_tag = "judge-rep-1";
    CHECK(llm::cache_key(rep0) != llm::cache_key(rep1));
}

TEST_CASE("mock backend grammar") {
    llm::MockBackend mock;

    SUBCASE("deterministic across calls") {
        auto a = mock.complete(basic_request());
        auto b = mock.complete(basic_request());
        CHECK(a.text == b.text);
        CHECK(mock.calls() == 2);
    }

    SUBCASE("judge prompts yield Score: d in range") {
        llm::ChatRequest r = basic_request();
        r.system = "You are an impartial evaluator of review quality.";
        auto response = mock.complete(r);
        REQUIRE(response.text.rfind("Score: ", 0) == 0);
        const int score = std::stoi(response.text.substr(7));
        CHECK(score >= 0);
        CHECK(score <= 10);
    }

    SUBCASE("difference prompts carry the three section labels") {
        llm::ChatRequest r = basic_request();
        r.system = "You identify the differences between reviewers.";
        auto response = mock.complete(r);
        CHECK(response.text.find("Writing Style:") != std::string::npos);
        CHECK(response.text.find("Emotional Style:") != std::string::npos);
        CHECK(response.text.find("Semantic Style:") != std::string::npos);
    }

    SUBCASE("summarizer prompts echo the tokens visible in the input") {
        llm::ChatRequest diff = basic_request();
        diff.system = "You identify the differences between reviewers.";
        const std::string d1 = mock.complete(diff).text;
        diff.user += " more";
        const std::string d2 = mock.complete(diff).text;

        llm::ChatRequest sum = basic_request();
        sum.system = "You summarize a user's preferences.";
        sum.user = "Difference-1:\n" + d1 + "\n\nDifference-2:\n" + d2;
        const std::string summary = mock.complete(sum).text;
        // Every token from both difference texts must flow through.
        for (const std::string& source : {d1, d2}) {
            for (std::size_t pos = source.find("mk"); pos != std::string::npos;
                 pos = source.find("mk", pos + 1)) {
                if (pos + 14 > source.size()) break;
                CHECK(summary.find(source.substr(pos, 14)) != std::string::npos);
            }
        }
    }
}

TEST_CASE("cached_complete hits, misses and corruption") {
    const fs::path dir = fresh_dir("dpl_cache_test");
    llm::MockBackend mock;
    llm::LlmClient client(mock, dir);

    auto first = client.cached_complete(basic_request());
    CHECK_FALSE(first.from_cache);
    CHECK(mock.calls() == 1);

    auto second = client.cached_complete(basic_request());
    CHECK(second.from_cache);
    CHECK(second.text == first.text);
    CHECK(mock.calls() == 1);  // zero backend calls on the hit

    SUBCASE("temperature variants get separate entries") {
        auto warm = basic_request();
        warm.temperature = 0.4;
        auto third = client.cached_complete(warm);
        CHECK_FALSE(third.from_cache);
        CHECK(mock.calls() == 2);
    }

    SUBCASE("corrupt entries are treated as misses and replaced") {
        const std::string key = llm::cache_key(basic_request());
        const fs::path entry = dir / key.substr(0, 2) / key;
        REQUIRE(fs::exists(entry));
        std::ofstream(entry, std::ios::binary) << "{corrupt";
        auto repaired = client.cached_complete(basic_request());
        CHECK_FALSE(repaired.from_cache);
        CHECK(repaired.text == first.text);
        auto hit = client.cached_complete(basic_request());
        CHECK(hit.from_cache);
    }

    SUBCASE("cache round-trip is byte-identical") {
        auto odd = basic_request("text with\nnewlines\tand \"quotes\"");
        auto miss = client.cached_complete(odd);
        auto hit = client.cached_complete(odd);
        CHECK(hit.from_cache);
        CHECK(hit.text == miss.text);
    }
    fs::remove_all(dir);
}

TEST_CASE("client bounds in-flight backend calls") {
    ProbeBackend probe;
    llm::LlmClient client(probe, fresh_dir("dpl_sem_test"), 8);
    std::vector<std::thread> threads;
    for (int i = 0; i < 20; ++i)
        threads.emplace_back([&client, i]() {
            client.complete(basic_request("call " + std::to_string(i)));
        });
    for (auto& t : threads) t.join();
    CHECK(probe.calls_.load() == 20);
    CHECK(probe.max_concurrent_.load() <= 8);
    CHECK(probe.max_concurrent_.load() >= 2);
}

TEST_CASE("remote backend retry contract") {
    httplib::Server server;
    std::atomic<int> hits{0};
    std::atomic<int> fail_first{0};
    std::atomic<int> status_mode{500};
    server.Post("/v1/chat/completions",
                [&](const httplib::Request&, httplib::Response& res) {
                    const int n = hits.fetch_add(1);
                    if (n < fail_first.load()) {
                        res.status = status_mode.load();
                        res.set_content("overloaded", "text/plain");
                        return;
                    }
                    nlohmann::json body;
                    body["choices"] = {{{"message", {{"content", "fine"}}}}};
                    res.set_content(body.dump(), "application/json");
                });
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread server_thread([&]() { server.listen_after_bind(); });
    server.wait_until_ready();

    llm::RemoteOptions options;
    options.base_url = "http://127.0.0.1:" + std::to_string(port);
    options.backoff_ms = 10;

    SUBCASE("two 500s then success records two retries") {
        hits = 0;
        fail_first = 2;
        llm::RemoteChatBackend backend(options);
        auto response = backend.complete(basic_request());
        CHECK(response.text == "fine");
        CHECK(response.retries == 2);
    }

    SUBCASE("401 fails immediately without retries") {
        hits = 0;
        fail_first = 100;
        status_mode = 401;
        llm::RemoteChatBackend backend(options);
        CHECK_THROWS_AS(backend.complete(basic_request()), BackendError);
        CHECK(hits.load() == 1);
        status_mode = 500;
    }

    SUBCASE("exhausted retries raise with the last status") {
        hits = 0;
        fail_first = 100;
        llm::RemoteOptions tight = options;
        tight.max_retries = 1;
        llm::RemoteChatBackend backend(tight);
        try {
            backend.complete(basic_request());
            FAIL("expected BackendError");
        } catch (const BackendError& e) {
            CHECK(e.status() == 500);
            CHECK(hits.load() == 2);  // initial try + 1 retry
        }
    }

    server.stop();
    server_thread.join();
}

TEST_CASE("remote embeddings endpoint") {
    httplib::Server server;
    std::atomic<int> hits{0};
    std::atomic<int> fail_first{0};
    server.Post("/v1/embeddings",
                [&](const httplib::Request& req, httplib::Response& res) {
                    const int n = hits.fetch_add(1);
                    if (n < fail_first.load()) {
                        res.status = 503;
                        return;
                    }
                    auto body = nlohmann::json::parse(req.body);
                    const auto& inputs = body["input"];
                    nlohmann::json data = nlohmann::json::array();
                    // Respond in reverse order: the client must reassemble
                    // by index.
                    for (int i = int(inputs.size()) - 1; i >= 0; --i) {
                        const std::string text = inputs[std::size_t(i)];
                        data.push_back(
                            {{"index", i},
                             {"embedding",
                              {double(text.size()), 2.0 * double(i), 1.0}}});
                    }
                    nlohmann::json out;
                    out["data"] = data;
                    res.set_content(out.dump(), "application/json");
                });
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread server_thread([&]() { server.listen_after_bind(); });
    server.wait_until_ready();

    user::RemoteEmbedOptions options;
    options.base_url = "http://127.0.0.1:" + std::to_string(port);
    options.model = "embedder";
    options.batch_size = 2;
    options.backoff_ms = 10;

    SUBCASE("batched request, index reassembly, unit norms") {
        hits = 0;
        user::RemoteEmbedBackend backend(options);
        auto vecs = backend.embed({"a", "bbbb", "cc"});
        REQUIRE(vecs.size() == 3);
        CHECK(hits.load() == 2);  // batch_size 2 over 3 texts
        for (const auto& v : vecs)
            CHECK(v.norm() == doctest::Approx(1.0).epsilon(1e-9));
        // First vector of the first batch encodes ("a", index 0):
        // raw (1, 0, 1) normalized.
        CHECK(vecs[0][0] == doctest::Approx(1.0 / std::sqrt(2.0)));
        CHECK(vecs[0][1] == doctest::Approx(0.0));
        // Second vector encodes ("bbbb", index 1): raw (4, 2, 1).
        CHECK(vecs[1][0] == doctest::Approx(4.0 / std::sqrt(21.0)));
        CHECK(backend.dim() == 3);
    }

    SUBCASE("5xx retries then succeeds") {
        hits = 0;
        fail_first = 1;
        user::RemoteEmbedBackend backend(options);
        auto vecs = backend.embed({"x"});
        REQUIRE(vecs.size() == 1);
        CHECK(hits.load() == 2);
        fail_first = 0;
    }

    SUBCASE("exhausted retries raise") {
        hits = 0;
        fail_first = 100;
        auto tight = options;
        tight.max_retries = 1;
        user::RemoteEmbedBackend backend(tight);
        CHECK_THROWS_AS(backend.embed({"x"}), BackendError);
        fail_first = 0;
    }

    server.stop();
    server_thread.join();
}
