#include "dpl/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "dpl/digest.hpp"
#include "dpl/error.hpp"
#include "dpl/selectors.hpp"

namespace dpl::pipeline {

using corpus::Corpus;
using corpus::Item;
using corpus::Review;
using corpus::TaskSample;

std::string method_name(Method m) {
    switch (m) {
        case Method::non_perso: return "non_perso";
        case Method::rag: return "rag";
        case Method::intsum: return "intsum";
        case Method::llm_trsr: return "llm_trsr";
        case Method::cicl: return "cicl";
        case Method::persona_db: return "persona_db";
        case Method::dpl: return "dpl";
    }
    throw Error("unknown method enum");
}

Method parse_method(const std::string& name) {
    for (Method m : {Method::non_perso, Method::rag, Method::intsum,
                     Method::llm_trsr, Method::cicl, Method::persona_db,
                     Method::dpl})
        if (method_name(m) == name) return m;
    throw ConfigError("unknown method: " + name);
}

std::string selector_name(Selector s) {
    switch (s) {
        case Selector::cluster: return "cluster";
        case Selector::random: return "random";
        case Selector::simrank: return "simrank";
    }
    throw Error("unknown selector enum");
}

Selector parse_selector(const std::string& name) {
    for (Selector s : {Selector::cluster, Selector::random, Selector::simrank})
        if (selector_name(s) == name) return s;
    throw ConfigError("unknown selector: " + name);
}

namespace {

std::string format_rating(double rating) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", rating);
    return buf;
}

std::string review_body_block(const Review& r) {
    return "Title: " + r.review_title + "\n" + r.text;
}

/// "<label>-<k> (rating: x.x):\nTitle: ...\n<text>"
std::string labeled_review_block(const std::string& label, int index,
                                 const Review& r, const std::string& extra = "") {
    std::ostringstream os;
    os << label << "-" << index << " (" << extra << "rating: "
       << format_rating(r.rating) << "):\n"
       << review_body_block(r);
    return os.str();
}

std::string join_blocks(const std::vector<std::string>& blocks) {
    std::ostringstream os;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        if (i > 0) os << "\n\n";
        os << blocks[i];
    }
    return os.str();
}

const Item& item_of(const Corpus& corpus, const std::string& item_id) {
    auto it = corpus.items.find(item_id);
    if (it == corpus.items.end())
        throw PipelineError("item " + item_id + " missing from the corpus");
    return it->second;
}

std::string description_block(const Item& item, bool yelp_mode) {
    if (yelp_mode || item.description.empty()) return "";
    return "Item description: " + item.description + "\n";
}

std::string retrieved_context(const retrieval::RetrievedSet& retrieved,
                              const char* heading) {
    std::vector<std::string> blocks;
    int idx = 1;
    for (const auto& hit : retrieved.hits)
        blocks.push_back(labeled_review_block("History", idx++, hit.review));
    return std::string(heading) + ":\n" + join_blocks(blocks) + "\n\n";
}

llm::ChatRequest make_request(const Services& services, const std::string& model,
                              std::pair<std::string, std::string> prompt,
                              double temperature) {
    llm::ChatRequest request;
    request.model = model;
    request.system = std::move(prompt.first);
    request.user = std::move(prompt.second);
    request.temperature = temperature;
    request.top_p = services.top_p;
    request.max_tokens = services.max_tokens;
    return request;
}

std::string call_model(Services& services, const std::string& model,
                       std::pair<std::string, std::string> prompt,
                       double temperature) {
    return services.llm
        .cached_complete(make_request(services, model, std::move(prompt), temperature))
        .text;
}

std::uint64_t derive_seed(std::uint64_t run_seed, const std::string& scope) {
    return sha256_u64(std::to_string(run_seed) + "|" + scope);
}

std::string summarize_history(Services& services,
                              const retrieval::RetrievedSet& retrieved,
                              double temperature) {
    std::vector<std::string> blocks;
    int idx = 1;
    for (const auto& hit : retrieved.hits)
        blocks.push_back(labeled_review_block("Review", idx++, hit.review));
    const auto& tmpl = services.templates.history_summarizer;
    return call_model(
        services, services.roles.summarizer,
        {tmpl.system,
         prompts::render(tmpl.user, {{"review_blocks", join_blocks(blocks)}})},
        temperature);
}

}  // namespace

std::string build_retrieval_query(const TaskSample& sample,
                                  const Services& services) {
    std::string query = sample.review_title;
    if (!services.yelp_mode) {
        const Item& item = item_of(services.corpus, sample.item_id);
        if (!item.description.empty()) query += " " + item.description;
    }
    return query;
}

retrieval::RetrievedSet retrieve_for(const TaskSample& sample, int n,
                                     const Services& services) {
    return retrieval::retrieve(sample.profile,
                               build_retrieval_query(sample, services),
                               std::size_t(std::max(0, n)));
}

std::pair<std::string, std::string> build_difference_prompt(
    const Review& target, const Item& item, const std::vector<Review>& peers,
    const DifferenceStandard& standard, const prompts::TemplateSet& templates,
    bool yelp_mode) {
    if (peers.empty())
        throw PipelineError("difference prompt requires at least one peer");

    std::vector<std::string> peer_blocks;
    int idx = 1;
    for (const Review& peer : peers)
        peer_blocks.push_back(labeled_review_block(
            "Peer", idx++, peer, "user " + peer.user_id + ", "));

    std::ostringstream instructions;
    if (standard.empty()) {
        instructions << "Describe the differences between the target user's "
                        "review and the other users' reviews.";
    } else {
        instructions << "Describe the differences along the following "
                        "dimensions:";
        if (standard.writing)
            instructions << "\nWriting Style: " << standard.writing_instruction
                         << ".";
        if (standard.emotional)
            instructions << "\nEmotional Style: "
                         << standard.emotional_instruction << ".";
        if (standard.semantic)
            instructions << "\nSemantic Style: " << standard.semantic_instruction
                         << ".";
    }

    const auto& tmpl = templates.difference_extractor;
    std::map<std::string, std::string> values = {
        {"item_title", item.item_title},
        {"item_description_block", description_block(item, yelp_mode)},
        {"rating", format_rating(target.rating)},
        {"review_title", target.review_title},
        {"review_text", target.text},
        {"peer_blocks", join_blocks(peer_blocks)},
        {"standard_instructions", instructions.str()},
    };
    return {tmpl.system, prompts::render(tmpl.user, values)};
}

std::vector<DifferenceRecord> extract_differences(
    const TaskSample& sample, const retrieval::RetrievedSet& retrieved,
    const MethodConfig& config, Services& services) {
    if (retrieved.empty())
        throw PipelineError("difference extraction requires retrieved elements");

    std::vector<DifferenceRecord> records;
    records.reserve(retrieved.size());
    for (std::size_t n = 0; n < retrieved.size(); ++n) {
        const Review& element = retrieved.hits[n].review;
        DifferenceRecord record;
        record.key_history_index = int(n) + 1;
        record.item_id = element.item_id;
        try {
            auto item_reviews = services.corpus.item_reviews(element.item_id);
            bool has_target = false;
            bool has_other = false;
            for (const auto& r : item_reviews) {
                if (r.user_id == sample.user_id)
                    has_target = true;
                else
                    has_other = true;
            }
            if (!has_target)
                throw PipelineError("key history element not in the corpus: " +
                                    element.item_id);
            if (!has_other) {
                // No co-reviewers: keep the slot so |diffs| stays N.
                records.push_back(std::move(record));
                continue;
            }

            const auto t0 = std::chrono::steady_clock::now();
            user::RepresentativeSet reps;
            const std::uint64_t seed = derive_seed(
                config.seed, sample.sample_id() + "|select|" + std::to_string(n));
            switch (config.selector) {
                case Selector::cluster:
                    reps = user::select_representatives(
                        item_reviews, sample.user_id, config.k_representatives,
                        seed, services.embed);
                    break;
                case Selector::random:
                    reps = user::select_random(item_reviews, sample.user_id,
                                               config.k_representatives, seed);
                    break;
                case Selector::simrank:
                    reps = user::select_simrank(item_reviews, sample.user_id,
                                                config.k_representatives,
                                                services.embed);
                    break;
            }
            record.selection_us =
                long(std::chrono::duration_cast<std::chrono::microseconds>(
                         std::chrono::steady_clock::now() - t0)
                         .count());

            std::vector<Review> peer_reviews;
            for (const auto& member : reps.members) {
                record.peer_user_ids.push_back(member.user_id);
                peer_reviews.push_back(member.review);
            }
            auto prompt = build_difference_prompt(
                element, item_of(services.corpus, element.item_id), peer_reviews,
                config.standard, services.templates, services.yelp_mode);
            record.text = call_model(services, services.roles.extractor,
                                     std::move(prompt), config.temperature);
        } catch (const PipelineError&) {
            throw;
        } catch (const std::exception& e) {
            throw PipelineError(std::string("difference extraction failed: ") +
                                    e.what(),
                                int(n));
        }
        records.push_back(std::move(record));
    }
    return records;
}

PreferenceRepresentation summarize_preferences(
    const TaskSample& sample, const retrieval::RetrievedSet& retrieved,
    const std::vector<DifferenceRecord>& diffs, Services& services,
    double temperature) {
    if (retrieved.empty() || diffs.size() != retrieved.size())
        throw PipelineError(
            "preference summary requires one difference per retrieved element");

    std::vector<std::string> history_blocks;
    std::vector<std::string> difference_blocks;
    PreferenceRepresentation result;
    for (std::size_t n = 0; n < retrieved.size(); ++n) {
        const Review& r = retrieved.hits[n].review;
        const Item& item = item_of(services.corpus, r.item_id);
        history_blocks.push_back(labeled_review_block(
            "History", int(n) + 1, r, "item: " + item.item_title + ", "));
        const std::string& text = diffs[n].text;
        difference_blocks.push_back("Difference-" + std::to_string(n + 1) + ":\n" +
                                    (text.empty() ? "(none)" : text));
        result.source_history_indices.push_back(int(n) + 1);
        result.source_difference_indices.push_back(diffs[n].key_history_index);
    }

    const auto& tmpl = services.templates.summarizer;
    std::map<std::string, std::string> values = {
        {"history_blocks", join_blocks(history_blocks)},
        {"difference_blocks", join_blocks(difference_blocks)},
    };
    result.text = call_model(services, services.roles.summarizer,
                             {tmpl.system, prompts::render(tmpl.user, values)},
                             temperature);
    (void)sample;
    return result;
}

std::string generate_review(const TaskSample& sample, const std::string& context,
                            Services& services, double temperature,
                            std::string* prompt_out) {
    const Item& item = item_of(services.corpus, sample.item_id);
    const auto& tmpl = services.templates.generator;
    std::map<std::string, std::string> values = {
        {"context", context},
        {"item_title", item.item_title},
        {"item_description_block", description_block(item, services.yelp_mode)},
        {"rating", format_rating(sample.rating)},
        {"review_title", sample.review_title},
    };
    std::string user = prompts::render(tmpl.user, values);
    if (!sample.ground_truth_text.empty() &&
        user.find(sample.ground_truth_text) != std::string::npos)
        throw PipelineError("generation prompt would leak the ground truth for " +
                            sample.sample_id());
    if (prompt_out) *prompt_out = user;
    return call_model(services, services.roles.generator, {tmpl.system, user},
                      temperature);
}

GeneratedRecord run_method(const TaskSample& sample, const MethodConfig& config,
                           Services& services, RunTimings* timings) {
    GeneratedRecord record;
    record.method = method_name(config.method);
    record.sample_id = sample.sample_id();
    record.temperature = config.temperature;
    record.trace = nlohmann::ordered_json::object();

    retrieval::RetrievedSet retrieved;
    if (config.method != Method::non_perso)
        retrieved = retrieve_for(sample, config.n_retrieved, services);

    std::string context;
    switch (config.method) {
        case Method::non_perso:
            break;
        case Method::rag: {
            if (!retrieved.empty())
                context = retrieved_context(
                    retrieved, "The user's most relevant past reviews");
            break;
        }
        case Method::intsum: {
            if (!retrieved.empty()) {
                std::string summary =
                    summarize_history(services, retrieved, config.temperature);
                record.trace["summary"] = sha256_hex(summary).substr(0, 16);
                context = "Summary of the user's preferences:\n" + summary +
                          "\n\n" +
                          retrieved_context(
                              retrieved, "The user's most relevant past reviews");
            }
            break;
        }
        case Method::llm_trsr: {
            if (!sample.profile.empty()) {
                // Recurrent summarization over the full profile,
                // oldest -> newest, in blocks of trsr_block_size.
                const std::size_t block =
                    std::size_t(std::max(1, config.trsr_block_size));
                std::string summary;
                int calls = 0;
                for (std::size_t start = 0; start < sample.profile.size();
                     start += block) {
                    const std::size_t end =
                        std::min(sample.profile.size(), start + block);
                    std::vector<std::string> blocks;
                    int idx = 1;
                    for (std::size_t i = start; i < end; ++i)
                        blocks.push_back(labeled_review_block(
                            "Review", idx++, sample.profile[i]));
                    if (start == 0) {
                        const auto& tmpl = services.templates.history_summarizer;
                        summary = call_model(
                            services, services.roles.summarizer,
                            {tmpl.system,
                             prompts::render(tmpl.user, {{"review_blocks",
                                                          join_blocks(blocks)}})},
                            config.temperature);
                    } else {
                        const auto& tmpl = services.templates.recurrent_summarizer;
                        summary = call_model(
                            services, services.roles.summarizer,
                            {tmpl.system,
                             prompts::render(tmpl.user,
                                             {{"previous_summary", summary},
                                              {"review_blocks",
                                               join_blocks(blocks)}})},
                            config.temperature);
                    }
                    ++calls;
                }
                record.trace["summary_calls"] = calls;
                record.trace["summary"] = sha256_hex(summary).substr(0, 16);
                context = "Summary of the user's preferences:\n" + summary +
                          "\n\n";
                if (!retrieved.empty())
                    context += retrieved_context(
                        retrieved, "The user's most relevant past reviews");
            }
            break;
        }
        case Method::cicl: {
            if (!retrieved.empty()) {
                const Review& positive = retrieved.hits[0].review;
                // Negative example: seeded-random other-user review on the
                // same item as the positive; later elements are fallbacks
                // when the top item has no co-reviewers.
                std::optional<Review> negative;
                for (const auto& hit : retrieved.hits) {
                    std::vector<Review> candidates;
                    for (const auto& r :
                         services.corpus.item_reviews(hit.review.item_id))
                        if (r.user_id != sample.user_id) candidates.push_back(r);
                    if (candidates.empty()) continue;
                    std::mt19937_64 gen(derive_seed(
                        config.seed, sample.sample_id() + "|cicl-negative"));
                    negative = candidates[gen() % candidates.size()];
                    break;
                }

                std::vector<std::string> blocks;
                int idx = 1;
                for (const auto& hit : retrieved.hits)
                    blocks.push_back(
                        labeled_review_block("Review", idx++, hit.review));
                const auto& tmpl = services.templates.contrastive_summarizer;
                std::map<std::string, std::string> values = {
                    {"review_blocks", join_blocks(blocks)},
                    {"positive_block", review_body_block(positive)},
                    {"negative_block",
                     negative ? review_body_block(*negative)
                              : std::string("(no review from another user was "
                                            "available)")},
                };
                if (negative) record.trace["negative_user"] = negative->user_id;
                std::string summary = call_model(
                    services, services.roles.summarizer,
                    {tmpl.system, prompts::render(tmpl.user, values)},
                    config.temperature);
                record.trace["summary"] = sha256_hex(summary).substr(0, 16);
                context = "Summary of the user's preferences:\n" + summary +
                          "\n\n" +
                          retrieved_context(
                              retrieved, "The user's most relevant past reviews");
            }
            break;
        }
        case Method::persona_db: {
            if (!retrieved.empty()) {
                // Most similar user by cosine of mean profile embeddings.
                std::vector<std::string> own_texts;
                for (const auto& r : sample.profile)
                    own_texts.push_back(retrieval::review_document(r));
                user::Vec own_vec = user::mean_embedding(own_texts, services.embed);

                std::string best_user;
                double best_sim = -2.0;
                for (const auto& [user_id, idxs] : services.corpus.by_user) {
                    if (user_id == sample.user_id || idxs.empty()) continue;
                    std::vector<std::string> texts;
                    texts.reserve(idxs.size());
                    for (auto idx : idxs)
                        texts.push_back(retrieval::review_document(
                            services.corpus.review(idx)));
                    const double sim = user::cosine(
                        own_vec, user::mean_embedding(texts, services.embed));
                    if (sim > best_sim) {
                        best_sim = sim;
                        best_user = user_id;
                    }
                }

                std::string summary =
                    summarize_history(services, retrieved, config.temperature);
                record.trace["summary"] = sha256_hex(summary).substr(0, 16);
                context = "Summary of the user's preferences:\n" + summary +
                          "\n\n" +
                          retrieved_context(
                              retrieved, "The user's most relevant past reviews");
                if (!best_user.empty()) {
                    record.trace["similar_user"] = best_user;
                    auto peer_retrieved = retrieval::retrieve(
                        services.corpus.user_reviews(best_user),
                        build_retrieval_query(sample, services),
                        std::size_t(std::max(0, config.n_retrieved)));
                    if (!peer_retrieved.empty())
                        context += retrieved_context(
                            peer_retrieved,
                            "Relevant past reviews from the most similar user");
                }
            }
            break;
        }
        case Method::dpl: {
            if (!retrieved.empty()) {
                auto diffs =
                    extract_differences(sample, retrieved, config, services);
                auto diff_digests = nlohmann::ordered_json::array();
                for (const auto& d : diffs) {
                    diff_digests.push_back(sha256_hex(d.text).substr(0, 16));
                    if (timings) timings->add_selection_us(d.selection_us);
                }
                record.trace["differences"] = std::move(diff_digests);
                auto preference = summarize_preferences(
                    sample, retrieved, diffs, services, config.temperature);
                record.trace["summary"] = sha256_hex(preference.text).substr(0, 16);
                context = "Difference-aware preference profile of the user:\n" +
                          preference.text + "\n\n" +
                          retrieved_context(retrieved,
                                            "The user's key past reviews");
            }
            break;
        }
    }

    if (config.method != Method::non_perso && retrieved.empty())
        record.trace["empty_profile"] = true;

    std::string prompt;
    record.text =
        generate_review(sample, context, services, config.temperature, &prompt);
    record.trace["prompt"] = sha256_hex(prompt).substr(0, 16);
    record.trace["generation"] = sha256_hex(record.text).substr(0, 16);
    return record;
}

}  // namespace dpl::pipeline
