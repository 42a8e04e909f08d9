#include "dpl/metrics.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <unordered_map>

#include "dpl/error.hpp"
#include "dpl/retrieval.hpp"

namespace dpl::metrics {
namespace {

using TokenCounts = std::unordered_map<std::string, int>;

TokenCounts count_tokens(const std::vector<std::string>& tokens) {
    TokenCounts counts;
    for (const auto& t : tokens) ++counts[t];
    return counts;
}

double f1(double overlap, double hyp_len, double ref_len) {
    if (overlap <= 0.0 || hyp_len <= 0.0 || ref_len <= 0.0) return 0.0;
    const double p = overlap / hyp_len;
    const double r = overlap / ref_len;
    return 2.0 * p * r / (p + r);
}

}  // namespace

double rouge1(std::string_view hyp, std::string_view ref) {
    auto h = retrieval::tokenize(hyp);
    auto r = retrieval::tokenize(ref);
    if (h.empty() || r.empty()) return 0.0;
    auto hc = count_tokens(h);
    auto rc = count_tokens(r);
    double overlap = 0.0;
    for (const auto& [t, c] : hc) {
        auto it = rc.find(t);
        if (it != rc.end()) overlap += std::min(c, it->second);
    }
    return f1(overlap, double(h.size()), double(r.size()));
}

double rougeL(std::string_view hyp, std::string_view ref) {
    auto h = retrieval::tokenize(hyp);
    auto r = retrieval::tokenize(ref);
    if (h.empty() || r.empty()) return 0.0;
    // Rolling-row LCS.
    std::vector<int> prev(r.size() + 1, 0);
    std::vector<int> curr(r.size() + 1, 0);
    for (std::size_t i = 1; i <= h.size(); ++i) {
        for (std::size_t j = 1; j <= r.size(); ++j) {
            if (h[i - 1] == r[j - 1])
                curr[j] = prev[j - 1] + 1;
            else
                curr[j] = std::max(prev[j], curr[j - 1]);
        }
        std::swap(prev, curr);
    }
    return f1(double(prev[r.size()]), double(h.size()), double(r.size()));
}

std::string stem(std::string w) {
    auto ends_with = [&](std::string_view suffix) {
        return w.size() >= suffix.size() &&
               std::string_view(w).substr(w.size() - suffix.size()) == suffix;
    };
    auto is_consonant = [](char c) {
        return c != 'a' && c != 'e' && c != 'i' && c != 'o' && c != 'u';
    };
    // Trailing double consonants are collapsed after stripping a verb
    // ending ("hopped" -> "hopp" -> "hop"); l/s/z stay doubled.
    auto collapse_double = [&]() {
        if (w.size() >= 2 && w.back() == w[w.size() - 2] &&
            is_consonant(w.back()) && w.back() != 'l' && w.back() != 's' &&
            w.back() != 'z')
            w.pop_back();
    };

    if (ends_with("sses")) {
        w.resize(w.size() - 2);
    } else if (ends_with("ies") && w.size() > 4) {
        w.resize(w.size() - 3);
        w.push_back('y');
    } else if (ends_with("ss")) {
        // keep
    } else if (ends_with("es") && w.size() > 4) {
        char before = w[w.size() - 3];
        if (before == 's' || before == 'x' || before == 'z' || before == 'h' ||
            before == 'o')
            w.resize(w.size() - 2);
        else
            w.resize(w.size() - 1);
    } else if (ends_with("s") && w.size() > 3) {
        w.resize(w.size() - 1);
    }

    if (ends_with("ing") && w.size() > 5) {
        w.resize(w.size() - 3);
        collapse_double();
    } else if (ends_with("ed") && w.size() > 4) {
        w.resize(w.size() - 2);
        collapse_double();
    } else if (ends_with("ly") && w.size() > 4) {
        w.resize(w.size() - 2);
    }
    return w;
}

double meteor(std::string_view hyp, std::string_view ref) {
    auto h = retrieval::tokenize(hyp);
    auto r = retrieval::tokenize(ref);
    if (h.empty() || r.empty()) return 0.0;

    std::vector<int> hyp_to_ref(h.size(), -1);
    std::vector<bool> ref_used(r.size(), false);

    // Stage 1: exact matches, greedy in hyp order to the first free ref.
    for (std::size_t i = 0; i < h.size(); ++i) {
        for (std::size_t j = 0; j < r.size(); ++j) {
            if (!ref_used[j] && h[i] == r[j]) {
                hyp_to_ref[i] = int(j);
                ref_used[j] = true;
                break;
            }
        }
    }
    // Stage 2: stem matches on the leftovers.
    std::vector<std::string> hstem(h.size()), rstem(r.size());
    for (std::size_t i = 0; i < h.size(); ++i) hstem[i] = stem(h[i]);
    for (std::size_t j = 0; j < r.size(); ++j) rstem[j] = stem(r[j]);
    for (std::size_t i = 0; i < h.size(); ++i) {
        if (hyp_to_ref[i] >= 0) continue;
        for (std::size_t j = 0; j < r.size(); ++j) {
            if (!ref_used[j] && hstem[i] == rstem[j]) {
                hyp_to_ref[i] = int(j);
                ref_used[j] = true;
                break;
            }
        }
    }

    double matches = 0.0;
    int chunks = 0;
    int prev_ref = -2;
    for (std::size_t i = 0; i < h.size(); ++i) {
        if (hyp_to_ref[i] < 0) {
            prev_ref = -2;
            continue;
        }
        matches += 1.0;
        if (hyp_to_ref[i] != prev_ref + 1) ++chunks;
        prev_ref = hyp_to_ref[i];
    }
    if (matches == 0.0) return 0.0;

    const double p = matches / double(h.size());
    const double rr = matches / double(r.size());
    const double fmean = p * rr / (0.9 * p + 0.1 * rr);
    const double frag = double(chunks) / matches;
    const double penalty = 0.5 * frag * frag * frag;
    return fmean * (1.0 - penalty);
}

std::vector<std::string> bleu_tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    auto flush = [&]() {
        if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    };
    for (char ch : text) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (c >= 128 || std::isalnum(c)) {
            current.push_back(ch);
        } else if (std::isspace(c)) {
            flush();
        } else {
            flush();
            tokens.push_back(std::string(1, ch));
        }
    }
    flush();
    return tokens;
}

double bleu_corpus(const std::vector<std::string>& hyps,
                   const std::vector<std::string>& refs) {
    if (hyps.size() != refs.size())
        throw Error("bleu: hypothesis and reference counts differ");
    constexpr int kMaxOrder = 4;
    std::array<double, kMaxOrder> correct{};
    std::array<double, kMaxOrder> total{};
    double hyp_len = 0.0;
    double ref_len = 0.0;

    for (std::size_t s = 0; s < hyps.size(); ++s) {
        auto h = bleu_tokenize(hyps[s]);
        auto r = bleu_tokenize(refs[s]);
        hyp_len += double(h.size());
        ref_len += double(r.size());
        for (int n = 1; n <= kMaxOrder; ++n) {
            if (h.size() < std::size_t(n)) continue;
            std::unordered_map<std::string, int> hyp_ngrams;
            for (std::size_t i = 0; i + n <= h.size(); ++i) {
                std::string g = h[i];
                for (int k = 1; k < n; ++k) g += " " + h[i + k];
                ++hyp_ngrams[g];
            }
            std::unordered_map<std::string, int> ref_ngrams;
            for (std::size_t i = 0; i + std::size_t(n) <= r.size(); ++i) {
                std::string g = r[i];
                for (int k = 1; k < n; ++k) g += " " + r[i + k];
                ++ref_ngrams[g];
            }
            total[n - 1] += double(h.size() - std::size_t(n) + 1);
            for (const auto& [g, c] : hyp_ngrams) {
                auto it = ref_ngrams.find(g);
                if (it != ref_ngrams.end())
                    correct[n - 1] += double(std::min(c, it->second));
            }
        }
    }

    if (hyp_len == 0.0) return 0.0;
    double smooth = 1.0;
    double log_sum = 0.0;
    for (int n = 0; n < kMaxOrder; ++n) {
        if (total[n] == 0.0) return 0.0;
        double precision;
        if (correct[n] == 0.0) {
            smooth *= 2.0;
            precision = 1.0 / (smooth * total[n]);
        } else {
            precision = correct[n] / total[n];
        }
        log_sum += std::log(precision) / double(kMaxOrder);
    }
    const double bp = hyp_len < ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
    return 100.0 * bp * std::exp(log_sum);
}

std::optional<double> parse_judge_number(std::string_view text) {
    std::size_t i = 0;
    while (i < text.size()) {
        unsigned char c = static_cast<unsigned char>(text[i]);
        if (!std::isdigit(c)) {
            ++i;
            continue;
        }
        // Skip digits glued to an identifier ("gpt4").
        if (i > 0 && (std::isalpha(static_cast<unsigned char>(text[i - 1])) ||
                      text[i - 1] == '_')) {
            while (i < text.size() &&
                   std::isdigit(static_cast<unsigned char>(text[i])))
                ++i;
            continue;
        }
        std::size_t end = i;
        while (end < text.size() &&
               std::isdigit(static_cast<unsigned char>(text[end])))
            ++end;
        if (end < text.size() && text[end] == '.' && end + 1 < text.size() &&
            std::isdigit(static_cast<unsigned char>(text[end + 1]))) {
            ++end;
            while (end < text.size() &&
                   std::isdigit(static_cast<unsigned char>(text[end])))
                ++end;
        }
        const double value = std::stod(std::string(text.substr(i, end - i)));
        if (value >= 0.0 && value <= 10.0) return value;
        i = end;
    }
    return std::nullopt;
}

JudgeResult judge_score(const JudgeContext& ctx, llm::LlmClient& client,
                        const prompts::Template& judge_template,
                        const JudgeOptions& options) {
    if (options.repetitions < 1)
        throw Error("judge_score: repetitions must be >= 1");

    char rating_buf[32];
    std::snprintf(rating_buf, sizeof(rating_buf), "%.1f", ctx.rating);
    std::map<std::string, std::string> values = {
        {"item_title", ctx.item_title},
        {"item_description_block",
         ctx.item_description.empty()
             ? std::string()
             : "Item description: " + ctx.item_description + "\n"},
        {"review_title", ctx.review_title},
        {"rating", rating_buf},
        {"reference_review", ctx.ground_truth},
        {"generated_review", ctx.generated},
    };
    const std::string user = prompts::render(judge_template.user, values);

    std::vector<double> scores;
    for (int rep = 0; rep < options.repetitions; ++rep) {
        llm::ChatRequest request;
        request.model = options.model;
        request.system = judge_template.system;
        request.user = user;
        request.temperature = options.temperature;
        request.top_p = options.top_p;
        request.max_tokens = options.max_tokens;
        request.seed_tag = "judge-rep-" + std::to_string(rep);

        auto parsed = parse_judge_number(client.cached_complete(request).text);
        if (!parsed) {
            request.seed_tag += "-retry";
            parsed = parse_judge_number(client.cached_complete(request).text);
        }
        if (parsed) scores.push_back(*parsed);
    }
    if (scores.empty())
        throw Error("judge_score: no repetition produced a parseable score");

    double mean = 0.0;
    for (double s : scores) mean += s;
    mean /= double(scores.size());
    return {mean, mean / 10.0, int(scores.size())};
}

namespace {

double mean_of(const std::vector<double>& values) {
    double m = 0.0;
    for (double v : values) m += v;
    return values.empty() ? 0.0 : m / double(values.size());
}

double population_std(const std::vector<double>& values, double mean) {
    if (values.empty()) return 0.0;
    double acc = 0.0;
    for (double v : values) acc += (v - mean) * (v - mean);
    return std::sqrt(acc / double(values.size()));
}

double sample_variance(const std::vector<double>& values, double mean) {
    if (values.size() < 2) return 0.0;
    double acc = 0.0;
    for (double v : values) acc += (v - mean) * (v - mean);
    return acc / double(values.size() - 1);
}

// Regularized incomplete beta via the Lentz continued fraction.
double beta_cf(double a, double b, double x) {
    constexpr int kMaxIter = 200;
    constexpr double kEps = 3e-12;
    constexpr double kTiny = 1e-300;
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

double beta_inc(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                         a * std::log(x) + b * std::log(1.0 - x);
    const double bt = std::exp(ln_bt);
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * beta_cf(a, b, x) / a;
    return 1.0 - bt * beta_cf(b, a, 1.0 - x) / b;
}

}  // namespace

double student_t_sf(double t, double df) {
    if (df <= 0.0) return 0.5;
    const double x = df / (df + t * t);
    const double tail = 0.5 * beta_inc(df / 2.0, 0.5, x);
    return t >= 0.0 ? tail : 1.0 - tail;
}

double t_test(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t na = a.size();
    const std::size_t nb = b.size();
    if (na < 2 || nb < 2) return 1.0;
    const double ma = mean_of(a);
    const double mb = mean_of(b);
    const double va = sample_variance(a, ma);
    const double vb = sample_variance(b, mb);
    if (va == 0.0 && vb == 0.0) {
        // Degenerate variances: identical means are indistinguishable,
        // distinct means are complete separation.
        return ma == mb ? 1.0 : 1e-12;
    }
    const double se2 = va / double(na) + vb / double(nb);
    const double t = (ma - mb) / std::sqrt(se2);
    const double df =
        se2 * se2 / ((va / double(na)) * (va / double(na)) / double(na - 1) +
                     (vb / double(nb)) * (vb / double(nb)) / double(nb - 1));
    const double p = 2.0 * student_t_sf(std::fabs(t), df);
    return std::clamp(p, 1e-12, 1.0);
}

RunReport aggregate(const std::string& method,
                    const std::map<double, TemperatureScores>& per_temperature) {
    RunReport report;
    report.method = method;

    std::map<std::string, std::vector<double>> series;
    bool any_judge = false;
    for (const auto& [temp, scores] : per_temperature) {
        report.temperatures.push_back(temp);
        std::vector<double> r1, rl, mt, judges;
        for (const auto& s : scores.samples) {
            r1.push_back(s.rouge1);
            rl.push_back(s.rougeL);
            mt.push_back(s.meteor);
            if (s.judge_norm) judges.push_back(*s.judge_norm);
        }
        series["rouge1"].push_back(mean_of(r1));
        series["rougeL"].push_back(mean_of(rl));
        series["meteor"].push_back(mean_of(mt));
        series["bleu"].push_back(scores.bleu);
        if (!judges.empty()) {
            series["judge"].push_back(mean_of(judges));
            any_judge = true;
        }
    }
    if (!any_judge) series.erase("judge");

    for (auto& [name, values] : series) {
        MetricSummary summary;
        summary.per_temperature = values;
        summary.mean = mean_of(values);
        summary.stddev = population_std(values, summary.mean);
        report.metrics[name] = std::move(summary);
    }
    return report;
}

}  // namespace dpl::metrics
