#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dpl/corpus.hpp"
#include "dpl/embedding.hpp"
#include "dpl/llm_client.hpp"
#include "dpl/prompt_template.hpp"
#include "dpl/retrieval.hpp"
#include "json.hpp"

namespace dpl::pipeline {

enum class Method {
    non_perso,
    rag,
    intsum,
    llm_trsr,
    cicl,
    persona_db,
    dpl,
};

enum class Selector { cluster, random, simrank };

std::string method_name(Method m);
Method parse_method(const std::string& name);
std::string selector_name(Selector s);
Selector parse_selector(const std::string& name);

/// The extraction standard: which difference dimensions the extractor is
/// steered toward, with the instruction text per dimension. An empty set
/// is the unguided variant.
struct DifferenceStandard {
    bool writing = true;
    bool emotional = true;
    bool semantic = true;

    std::string writing_instruction =
        "vocabulary richness, sentence complexity, and grammatical "
        "preferences - how the target user's wording and syntax diverge "
        "from the other users'";
    std::string emotional_instruction =
        "the polarity (positive, negative, or neutral) of the tone - how "
        "the target user's attitude and feelings differ from the other "
        "users'";
    std::string semantic_instruction =
        "information density, logical flow, and contextual relevance - "
        "how the target user structures and conveys ideas differently "
        "from the other users'";

    static DifferenceStandard all() { return {}; }
    static DifferenceStandard none() { return {false, false, false}; }
    bool empty() const { return !writing && !emotional && !semantic; }
};

struct MethodConfig {
    Method method = Method::dpl;
    int n_retrieved = 8;
    int k_representatives = 4;
    Selector selector = Selector::cluster;
    DifferenceStandard standard;
    int trsr_block_size = 8;
    double temperature = 0.2;
    std::uint64_t seed = 0;
};

/// Model name per role; routing to endpoints happens inside the client.
struct ModelRoles {
    std::string extractor;
    std::string summarizer;
    std::string generator;
};

struct Services {
    const corpus::Corpus& corpus;
    llm::LlmClient& llm;
    user::EmbedBackend& embed;
    const prompts::TemplateSet& templates;
    ModelRoles roles;
    bool yelp_mode = false;
    double top_p = 0.95;
    int max_tokens = 2048;
};

/// One extracted difference d_n for the n-th key history element.
struct DifferenceRecord {
    int key_history_index = 0;  // 1-based, in [1, N]
    std::string item_id;
    std::vector<std::string> peer_user_ids;  // never contains the target
    std::string text;
    long selection_us = 0;  // representative-selection wall time
};

/// The difference-aware preference text built from exactly the N key
/// elements and their N difference records.
struct PreferenceRepresentation {
    std::string text;
    std::vector<int> source_difference_indices;
    std::vector<int> source_history_indices;
};

struct GeneratedRecord {
    std::string method;
    std::string sample_id;
    double temperature = 0.0;
    std::string text;
    nlohmann::ordered_json trace;
};

/// The BM25 query for a sample: review title + " " + item description
/// (title only in Yelp mode).
std::string build_retrieval_query(const corpus::TaskSample& sample,
                                  const Services& services);

retrieval::RetrievedSet retrieve_for(const corpus::TaskSample& sample, int n,
                                     const Services& services);

/// Renders the difference-extractor prompt: item metadata, the target
/// review, peers labeled Peer-1..Peer-m, and one instruction block per
/// enabled dimension (a generic instruction when the standard is empty).
std::pair<std::string, std::string> build_difference_prompt(
    const corpus::Review& target, const corpus::Item& item,
    const std::vector<corpus::Review>& peers, const DifferenceStandard& standard,
    const prompts::TemplateSet& templates, bool yelp_mode);

/// One DifferenceRecord per retrieved element. Elements whose item has
/// no other reviewers produce an empty-peer record without a model call.
std::vector<DifferenceRecord> extract_differences(
    const corpus::TaskSample& sample, const retrieval::RetrievedSet& retrieved,
    const MethodConfig& config, Services& services);

/// One summarizer call over all N key reviews and N difference texts.
PreferenceRepresentation summarize_preferences(
    const corpus::TaskSample& sample, const retrieval::RetrievedSet& retrieved,
    const std::vector<DifferenceRecord>& diffs, Services& services,
    double temperature);

/// One generator call. The prompt always carries the item title, the
/// description (except in Yelp mode), the target rating and the review
/// title; `context` holds the method-specific preference blocks. Raises
/// if the assembled prompt contains the sample's ground-truth text.
std::string generate_review(const corpus::TaskSample& sample,
                            const std::string& context, Services& services,
                            double temperature,
                            std::string* prompt_out = nullptr);

/// Collects wall-clock measurements a runner may aggregate.
struct RunTimings {
    virtual ~RunTimings() = default;
    virtual void add_selection_us(long micros) = 0;
};

/// Executes one method on one sample: context assembly per method, then
/// generation. Model failures surface as PipelineError; the runner's
/// failure policy decides what happens next.
GeneratedRecord run_method(const corpus::TaskSample& sample,
                           const MethodConfig& config, Services& services,
                           RunTimings* timings = nullptr);

}  // namespace dpl::pipeline
