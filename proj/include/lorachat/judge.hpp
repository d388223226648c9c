// Copyright (c) 2026 lorachat contributors
// SPDX-License-Identifier: Apache-2.0
//
// LLM-as-judge evaluation: pairwise judging prompts, 1-10 score parsing,
// and aggregation to 100-point task and total scores
// (task_score = 100 * sum(scores) / (10 * n_samples), total weighted by
// sample count). The judge endpoint is pluggable; a deterministic mock
// keeps the whole harness runnable offline.

#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "lorachat/errors.hpp"
#include "lorachat/rng.hpp"

namespace lorachat::judge {

struct EvalSample {
    std::string id;
    std::string category;
    std::string question;
    std::string answer_1;
    std::string answer_2;
};

/// The nine standard task categories, in table order.
inline const std::vector<std::string>& standard_categories() {
    static const std::vector<std::string> kCategories{
        "Generic", "Knowledge", "Roleplay",       "Common-Sense", "Fermi",
        "Counterfactual", "Coding", "Math", "Writing"};
    return kCategories;
}

struct JudgeMessage {
    std::string role;
    std::string content;
};

inline constexpr std::string_view kJudgeSystemPrompt =
    "You are a helpful and precise assistant for checking the quality of the answer";

/// Pairwise judging prompt. The rating request follows the reference wording;
/// the final paragraph pins a machine-readable reply format so scores can be
/// parsed reliably.
inline std::vector<JudgeMessage> build_judge_prompt(const EvalSample& sample) {
    if (sample.answer_1.empty() || sample.answer_2.empty())
        throw InputError("sample '" + sample.id + "' is missing an answer");
    std::string user;
    user += "###Question\n";
    user += sample.question;
    user += "\n###The Start of Assistant 1's Answer\n";
    user += sample.answer_1;
    user += "\n###The End of Assistant 1's Answer\n";
    user += "###The Start of Assistant 2's Answer\n";
    user += sample.answer_2;
    user += "\n###The End of Assistant 2's Answer\n";
    user +=
        "We would like to request your feedback on the performance of two AI assistants in "
        "response to the user question displayed above.\n";
    user +=
        "Please rate the helpfulness, relevance, accuracy, level of details of their responses. "
        "Each assistant receives an overall score on a scale of 1 to 10, where a higher score "
        "indicates better overall performance.\n";
    user +=
        "In the first line output exactly two numbers separated by a space: the score for "
        "Assistant 1 and the score for Assistant 2. Explain your ratings in the following "
        "lines.";
    return {{"system", std::string(kJudgeSystemPrompt)}, {"user", std::move(user)}};
}

struct JudgeVerdict {
    double score_1 = 0.0;
    double score_2 = 0.0;
    std::string rationale;
    std::string raw_response;
    int attempts = 1;
};

namespace detail {

inline bool in_score_range(double v) { return v >= 1.0 && v <= 10.0; }

inline std::vector<double> scan_numbers(std::string_view text) {
    std::vector<double> out;
    std::size_t i = 0;
    while (i < text.size()) {
        if (std::isdigit(static_cast<unsigned char>(text[i]))) {
            std::size_t j = i;
            while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
            if (j < text.size() && text[j] == '.' && j + 1 < text.size() &&
                std::isdigit(static_cast<unsigned char>(text[j + 1]))) {
                ++j;
                while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
            }
            out.push_back(std::stod(std::string(text.substr(i, j - i))));
            i = j;
        } else {
            ++i;
        }
    }
    return out;
}

}  // namespace detail

/// Expects "<score_1> <score_2>" on the first line; falls back to scanning
/// the whole reply for the first two numbers in [1, 10].
inline JudgeVerdict parse_verdict(const std::string& text) {
    JudgeVerdict verdict;
    verdict.raw_response = text;

    const auto newline = text.find('\n');
    const std::string first_line = text.substr(0, newline);
    verdict.rationale = newline == std::string::npos ? "" : text.substr(newline + 1);

    const auto first_line_numbers = detail::scan_numbers(first_line);
    if (first_line_numbers.size() == 2 && detail::in_score_range(first_line_numbers[0]) &&
        detail::in_score_range(first_line_numbers[1])) {
        verdict.score_1 = first_line_numbers[0];
        verdict.score_2 = first_line_numbers[1];
        return verdict;
    }

    std::vector<double> in_range;
    for (double v : detail::scan_numbers(text))
        if (detail::in_score_range(v)) in_range.push_back(v);
    if (in_range.size() < 2)
        throw ParseError("judge reply carries fewer than two scores in [1, 10]");
    verdict.score_1 = in_range[0];
    verdict.score_2 = in_range[1];
    verdict.rationale = text;
    return verdict;
}

/// Judge endpoint contract: one completion per sample. Implementations must
/// be safe to call from several threads at once.
struct JudgeClient {
    virtual ~JudgeClient() = default;
    virtual std::string complete(const EvalSample& sample,
                                 const std::vector<JudgeMessage>& prompt) = 0;
};

/// Offline stand-in: scores derive from a hash of the sample id, so runs are
/// deterministic and exercise the full parse path.
class MockJudge : public JudgeClient {
  public:
    std::string complete(const EvalSample& sample, const std::vector<JudgeMessage>&) override {
        const std::uint64_t h = fnv1a64(sample.id);
        const int s1 = 1 + static_cast<int>(h % 10);
        const int s2 = 1 + static_cast<int>((h >> 8) % 10);
        return std::to_string(s1) + " " + std::to_string(s2) +
               "\nDeterministic mock verdict for sample " + sample.id + ".";
    }
};

struct HttpJudgeConfig {
    std::string base_url = "http://127.0.0.1:8080";
    std::string path = "/v1/chat/completions";
    std::string model = "gpt-4";
    std::string api_key;  // read from JUDGE_API_KEY by the CLI; never logged
    int timeout_seconds = 120;
};

/// Chat-completion style endpoint: POST {model, messages, temperature: 0},
/// reply must carry the generated text under choices[0].message.content
/// (or a plain "text" field).
class HttpJudgeClient : public JudgeClient {
  public:
    explicit HttpJudgeClient(HttpJudgeConfig config) : config_(std::move(config)) {}

    std::string complete(const EvalSample&, const std::vector<JudgeMessage>& prompt) override {
        httplib::Client client(config_.base_url);
        client.set_connection_timeout(config_.timeout_seconds);
        client.set_read_timeout(config_.timeout_seconds);

        nlohmann::json messages = nlohmann::json::array();
        for (const auto& m : prompt) messages.push_back({{"role", m.role}, {"content", m.content}});
        const nlohmann::json body{
            {"model", config_.model}, {"messages", messages}, {"temperature", 0}};

        httplib::Headers headers;
        if (!config_.api_key.empty())
            headers.emplace("Authorization", "Bearer " + config_.api_key);

        auto res = client.Post(config_.path, headers, body.dump(), "application/json");
        if (!res)
            throw TransportError("judge endpoint unreachable: " +
                                 httplib::to_string(res.error()));
        if (res->status != 200)
            throw TransportError("judge endpoint returned HTTP " + std::to_string(res->status));
        try {
            const auto reply = nlohmann::json::parse(res->body);
            if (reply.contains("choices") && !reply["choices"].empty()) {
                const auto& first = reply["choices"][0];
                if (first.contains("message"))
                    return first["message"].value("content", "");
                if (first.contains("text")) return first["text"].get<std::string>();
            }
            if (reply.contains("text")) return reply["text"].get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw TransportError(std::string("malformed judge response: ") + e.what());
        }
        throw TransportError("judge response carries no completion text");
    }

  private:
    HttpJudgeConfig config_;
};

struct TaskScore {
    std::string category;
    std::size_t n_samples = 0;
    double raw_sum = 0.0;
    double task_score = 0.0;  // 100 * raw_sum / (10 * n_samples)
};

struct EvalReport {
    std::vector<TaskScore> tasks;
    std::size_t n_samples = 0;
    double total_score = 0.0;  // 100 * sum(raw) / (10 * sum(n))
    bool partial = false;
    std::vector<std::string> failed_ids;
};

/// Sample-count-weighted mean of task scores.
inline double weighted_total(std::span<const TaskScore> tasks) {
    double weighted = 0.0;
    std::size_t n = 0;
    for (const auto& t : tasks) {
        weighted += t.task_score * static_cast<double>(t.n_samples);
        n += t.n_samples;
    }
    return n == 0 ? 0.0 : weighted / static_cast<double>(n);
}

/// Groups verdicts by category (ordered by first appearance in `samples`)
/// and normalizes to the 100-point scale. Every sample must have a verdict.
inline EvalReport aggregate(std::span<const EvalSample> samples,
                            const std::map<std::string, JudgeVerdict>& verdicts,
                            int assistant_index) {
    if (assistant_index != 1 && assistant_index != 2)
        throw ConfigError("assistant_index must be 1 or 2");
    std::vector<std::string> missing;
    for (const auto& s : samples)
        if (!verdicts.count(s.id)) missing.push_back(s.id);
    if (!missing.empty()) {
        std::string msg = "missing verdicts for samples:";
        for (const auto& id : missing) msg += " " + id;
        throw IncompleteError(msg);
    }

    EvalReport report;
    std::vector<std::string> order;
    std::map<std::string, std::pair<std::size_t, double>> by_category;  // n, raw_sum
    for (const auto& s : samples) {
        const auto& v = verdicts.at(s.id);
        const double score = assistant_index == 1 ? v.score_1 : v.score_2;
        auto [it, inserted] = by_category.try_emplace(s.category, 0, 0.0);
        if (inserted) order.push_back(s.category);
        it->second.first += 1;
        it->second.second += score;
    }
    double raw_total = 0.0;
    for (const auto& category : order) {
        const auto& [n, raw] = by_category.at(category);
        TaskScore t;
        t.category = category;
        t.n_samples = n;
        t.raw_sum = raw;
        t.task_score = 100.0 * raw / (10.0 * static_cast<double>(n));
        report.tasks.push_back(std::move(t));
        report.n_samples += n;
        raw_total += raw;
    }
    report.total_score =
        report.n_samples == 0
            ? 0.0
            : 100.0 * raw_total / (10.0 * static_cast<double>(report.n_samples));
    return report;
}

struct EvalOptions {
    std::size_t parallelism = 4;
    std::size_t retries = 3;                       // attempt budget per judge pass
    std::chrono::milliseconds backoff{250};        // doubles per retry
    std::size_t repeat = 1;                        // judge passes averaged per sample
};

struct PerSampleEntry {
    std::string id;
    std::string category;
    double score_1 = 0.0;
    double score_2 = 0.0;
    std::string rationale;
    int attempts = 0;
};

struct EvalRunResult {
    EvalReport assistant_1;
    EvalReport assistant_2;
    std::vector<PerSampleEntry> samples;  // accepted verdicts, in sample order
    std::vector<std::string> failed_ids;
    bool partial = false;
};

using VerdictSink = std::function<void(const EvalSample&, const JudgeVerdict&)>;

namespace detail {

inline JudgeVerdict judge_one(const EvalSample& sample, JudgeClient& client,
                              const EvalOptions& opts) {
    const auto prompt = build_judge_prompt(sample);
    double sum_1 = 0.0, sum_2 = 0.0;
    int attempts_total = 0;
    JudgeVerdict first_pass;
    for (std::size_t pass = 0; pass < opts.repeat; ++pass) {
        std::optional<JudgeVerdict> accepted;
        for (std::size_t attempt = 1; attempt <= opts.retries; ++attempt) {
            ++attempts_total;
            try {
                accepted = parse_verdict(client.complete(sample, prompt));
                break;
            } catch (const ParseError&) {
            } catch (const TransportError&) {
            }
            if (attempt < opts.retries)
                std::this_thread::sleep_for(opts.backoff * (1LL << (attempt - 1)));
        }
        if (!accepted)
            throw TransportError("sample '" + sample.id + "' exhausted its " +
                                 std::to_string(opts.retries) + " attempts");
        if (pass == 0) first_pass = *accepted;
        sum_1 += accepted->score_1;
        sum_2 += accepted->score_2;
    }
    JudgeVerdict verdict = first_pass;
    verdict.score_1 = sum_1 / static_cast<double>(opts.repeat);
    verdict.score_2 = sum_2 / static_cast<double>(opts.repeat);
    verdict.attempts = attempts_total;
    return verdict;
}

}  // namespace detail

/// Judges every sample (bounded parallelism, retry with exponential
/// backoff), persists each verdict through the serialized sink before
/// aggregation, and assembles a deterministic report. Samples found in
/// `known` are not re-judged, which is how interrupted runs resume.
inline EvalRunResult run_eval(std::span<const EvalSample> samples, JudgeClient& client,
                              const EvalOptions& opts, const VerdictSink& sink = {},
                              const std::map<std::string, JudgeVerdict>* known = nullptr) {
    if (opts.retries < 1) throw ConfigError("retries must be >= 1");
    if (opts.repeat < 1) throw ConfigError("repeat must be >= 1");

    std::vector<std::optional<JudgeVerdict>> results(samples.size());
    std::atomic<std::size_t> next{0};
    std::mutex sink_mutex;
    std::exception_ptr fatal;
    std::mutex fatal_mutex;

    auto worker = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= samples.size()) return;
            const EvalSample& sample = samples[i];
            try {
                if (known && known->count(sample.id)) {
                    results[i] = known->at(sample.id);
                } else {
                    results[i] = detail::judge_one(sample, client, opts);
                    if (sink) {
                        std::lock_guard lock(sink_mutex);
                        sink(sample, *results[i]);
                    }
                }
            } catch (const TransportError&) {
                // exhausted retries: recorded as failed, run continues
            } catch (...) {
                std::lock_guard lock(fatal_mutex);
                if (!fatal) fatal = std::current_exception();
                return;
            }
        }
    };

    const std::size_t n_threads = std::max<std::size_t>(
        1, std::min(opts.parallelism, samples.size() == 0 ? 1 : samples.size()));
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (fatal) std::rethrow_exception(fatal);

    EvalRunResult run;
    std::vector<EvalSample> judged;
    std::map<std::string, JudgeVerdict> verdicts;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!results[i]) {
            run.failed_ids.push_back(samples[i].id);
            continue;
        }
        judged.push_back(samples[i]);
        verdicts[samples[i].id] = *results[i];
        run.samples.push_back({samples[i].id, samples[i].category, results[i]->score_1,
                               results[i]->score_2, results[i]->rationale,
                               results[i]->attempts});
    }
    run.partial = !run.failed_ids.empty();
    run.assistant_1 = aggregate(judged, verdicts, 1);
    run.assistant_2 = aggregate(judged, verdicts, 2);
    run.assistant_1.partial = run.assistant_2.partial = run.partial;
    run.assistant_1.failed_ids = run.assistant_2.failed_ids = run.failed_ids;
    return run;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

inline std::vector<EvalSample> parse_eval_samples(std::istream& in) {
    std::vector<EvalSample> samples;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }
        for (const char* key : {"id", "category", "question", "answer_1", "answer_2"})
            if (!obj.contains(key) || !obj[key].is_string())
                throw SchemaError("line " + std::to_string(line_no) + ": missing field '" +
                                  key + "'");
        samples.push_back({obj["id"], obj["category"], obj["question"], obj["answer_1"],
                           obj["answer_2"]});
    }
    return samples;
}

inline std::vector<EvalSample> load_eval_samples(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open eval set '" + path.string() + "'");
    return parse_eval_samples(in);
}

inline nlohmann::json verdict_json(const std::string& id, const JudgeVerdict& v) {
    return {{"id", id},
            {"score_1", v.score_1},
            {"score_2", v.score_2},
            {"rationale", v.rationale},
            {"attempts", v.attempts}};
}

/// Append-only verdict log; later lines win on duplicate ids, so resumed
/// runs simply append.
inline std::map<std::string, JudgeVerdict> parse_verdict_log(std::istream& in) {
    std::map<std::string, JudgeVerdict> verdicts;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }
        JudgeVerdict v;
        try {
            v.score_1 = obj.at("score_1").get<double>();
            v.score_2 = obj.at("score_2").get<double>();
            v.rationale = obj.value("rationale", "");
            v.attempts = obj.value("attempts", 1);
            verdicts[obj.at("id").get<std::string>()] = std::move(v);
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return verdicts;
}

inline std::map<std::string, JudgeVerdict> load_verdict_log(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open verdict log '" + path.string() + "'");
    return parse_verdict_log(in);
}

inline nlohmann::json report_json(const EvalReport& report) {
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& t : report.tasks)
        tasks.push_back({{"category", t.category},
                         {"n_samples", t.n_samples},
                         {"raw_sum", t.raw_sum},
                         {"task_score", t.task_score}});
    return {{"tasks", tasks},
            {"n_samples", report.n_samples},
            {"total_score", report.total_score},
            {"partial", report.partial},
            {"failed", report.failed_ids}};
}

namespace detail {

inline std::string format_score(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    std::string s(buf);
    while (s.ends_with('0')) s.pop_back();
    if (s.ends_with('.')) s.pop_back();
    return s;
}

}  // namespace detail

/// Plain-text table in the reference layout: one row per task plus a
/// weighted Total row.
inline std::string render_report_table(const EvalReport& left, const EvalReport& right,
                                       const std::string& left_name,
                                       const std::string& right_name) {
    std::vector<std::array<std::string, 4>> rows;
    rows.push_back({"Tasks", "Samples", left_name, right_name});
    for (std::size_t i = 0; i < left.tasks.size(); ++i) {
        const auto& lt = left.tasks[i];
        const std::string right_score =
            i < right.tasks.size() ? detail::format_score(right.tasks[i].task_score) : "-";
        rows.push_back({lt.category, std::to_string(lt.n_samples),
                        detail::format_score(lt.task_score), right_score});
    }
    rows.push_back({"Total", std::to_string(left.n_samples),
                    detail::format_score(left.total_score),
                    detail::format_score(right.total_score)});

    std::array<std::size_t, 4> widths{};
    for (const auto& row : rows)
        for (std::size_t c = 0; c < 4; ++c) widths[c] = std::max(widths[c], row[c].size());
    std::string out;
    for (const auto& row : rows) {
        for (std::size_t c = 0; c < 4; ++c) {
            out += row[c];
            if (c + 1 < 4) out.append(widths[c] - row[c].size() + 2, ' ');
        }
        out += "\n";
    }
    return out;
}

}  // namespace lorachat::judge
