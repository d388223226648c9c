// Copyright (c) 2026 lorachat contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <sstream>
#include <thread>

#include "lorachat/judge.hpp"

using namespace lorachat;
using namespace lorachat::judge;

namespace {

EvalSample sample_with_id(const std::string& id, const std::string& category = "Generic") {
    return {id, category, "câu hỏi " + id, "answer one for " + id, "answer two for " + id};
}

// 9-category fixture shaped like the standard 80-sample suite
std::vector<EvalSample> standard_fixture() {
    const std::vector<std::pair<std::string, int>> layout{
        {"Generic", 10}, {"Knowledge", 10}, {"Roleplay", 10},
        {"Common-Sense", 10}, {"Fermi", 10}, {"Counterfactual", 10},
        {"Coding", 7},   {"Math", 3},       {"Writing", 10}};
    std::vector<EvalSample> samples;
    for (const auto& [category, n] : layout)
        for (int i = 0; i < n; ++i)
            samples.push_back(sample_with_id(category + "-" + std::to_string(i), category));
    return samples;
}

struct ConstantJudge : JudgeClient {
    std::string reply;
    std::atomic<int> calls{0};
    explicit ConstantJudge(std::string r) : reply(std::move(r)) {}
    std::string complete(const EvalSample&, const std::vector<JudgeMessage>&) override {
        ++calls;
        return reply;
    }
};

struct FlakyJudge : JudgeClient {
    int failures_before_success;
    std::atomic<int> calls{0};
    explicit FlakyJudge(int failures) : failures_before_success(failures) {}
    std::string complete(const EvalSample&, const std::vector<JudgeMessage>&) override {
        const int call = ++calls;
        if (call <= failures_before_success) throw TransportError("synthetic outage");
        return "7 5\nrecovered";
    }
};

EvalOptions fast_options() {
    EvalOptions opts;
    opts.backoff = std::chrono::milliseconds(1);
    return opts;
}

}  // namespace

TEST_CASE("judge prompt carries the exact system text and structure", "[judge]") {
    auto sample = sample_with_id("s1");
    auto messages = build_judge_prompt(sample);
    REQUIRE(messages.size() == 2);
    CHECK(messages[0].role == "system");
    CHECK(messages[0].content ==
          "You are a helpful and precise assistant for checking the quality of the answer");

    const std::string& user = messages[1].content;
    for (const std::string needle :
         {"###Question", "###The Start of Assistant 1's Answer",
          "###The End of Assistant 1's Answer", "###The Start of Assistant 2's Answer",
          "###The End of Assistant 2's Answer",
          "Please rate the helpfulness, relevance, accuracy, level of details"}) {
        std::size_t count = 0;
        for (auto pos = user.find(needle); pos != std::string::npos;
             pos = user.find(needle, pos + 1))
            ++count;
        CHECK(count == 1);
    }

    // question sits between ###Question and the first delimiter
    const auto q_pos = user.find(sample.question);
    REQUIRE(q_pos != std::string::npos);
    CHECK(q_pos > user.find("###Question"));
    CHECK(q_pos < user.find("###The Start of Assistant 1's Answer"));

    EvalSample missing = sample;
    missing.answer_2.clear();
    CHECK_THROWS_AS(build_judge_prompt(missing), InputError);
}

TEST_CASE("verdict parsing: first line, fallback scan, failure", "[judge]") {
    auto direct = parse_verdict("8 7\nAssistant 1 was clearer.");
    CHECK(direct.score_1 == 8.0);
    CHECK(direct.score_2 == 7.0);
    CHECK(direct.rationale == "Assistant 1 was clearer.");

    auto fallback = parse_verdict("Scores: 9.5 and 6.");
    CHECK(fallback.score_1 == 9.5);
    CHECK(fallback.score_2 == 6.0);

    // out-of-range first line falls back to the in-range scan
    auto ranged = parse_verdict("15 3\nthe other mentions 7 and 4");
    CHECK(ranged.score_1 == 3.0);
    CHECK(ranged.score_2 == 7.0);

    CHECK_THROWS_AS(parse_verdict("no numbers here"), ParseError);
    CHECK_THROWS_AS(parse_verdict("0.5 and 42 are both out of range"), ParseError);
}

TEST_CASE("aggregation normalizes to the 100-point scale", "[judge]") {
    std::vector<EvalSample> samples;
    std::map<std::string, JudgeVerdict> verdicts;
    for (int i = 0; i < 10; ++i) {
        samples.push_back(sample_with_id("g" + std::to_string(i), "Generic"));
        JudgeVerdict v;
        v.score_1 = 10.0;
        v.score_2 = 4.0;
        verdicts[samples.back().id] = v;
    }
    auto report = aggregate(samples, verdicts, 1);
    REQUIRE(report.tasks.size() == 1);
    CHECK(report.tasks[0].task_score == 100.0);
    CHECK(report.total_score == 100.0);

    auto report2 = aggregate(samples, verdicts, 2);
    CHECK(report2.total_score == 40.0);
}

TEST_CASE("aggregation is permutation invariant and self-consistent", "[judge]") {
    SplitMix64 rng(13);
    auto samples = standard_fixture();
    std::map<std::string, JudgeVerdict> verdicts;
    for (const auto& s : samples) {
        JudgeVerdict v;
        v.score_1 = 1 + static_cast<double>(rng.next_below(10));
        v.score_2 = 1 + static_cast<double>(rng.next_below(19)) / 2.0;
        verdicts[s.id] = v;
    }
    auto report = aggregate(samples, verdicts, 1);

    auto shuffled = samples;
    shuffle(shuffled, rng);
    auto permuted = aggregate(shuffled, verdicts, 1);
    CHECK_THAT(permuted.total_score,
               Catch::Matchers::WithinAbs(report.total_score, 1e-9));
    for (const auto& task : report.tasks) {
        bool found = false;
        for (const auto& other : permuted.tasks)
            if (other.category == task.category) {
                found = true;
                CHECK_THAT(other.task_score,
                           Catch::Matchers::WithinAbs(task.task_score, 1e-9));
            }
        CHECK(found);
    }

    // total equals the sample-count-weighted mean of task scores
    CHECK_THAT(weighted_total(report.tasks),
               Catch::Matchers::WithinAbs(report.total_score, 1e-9));
}

TEST_CASE("aggregation reports missing verdicts by id", "[judge]") {
    std::vector<EvalSample> samples{sample_with_id("a"), sample_with_id("b"),
                                    sample_with_id("c")};
    std::map<std::string, JudgeVerdict> verdicts;
    verdicts["a"] = JudgeVerdict{5, 5, "", "", 1};
    try {
        aggregate(samples, verdicts, 1);
        FAIL("expected IncompleteError");
    } catch (const IncompleteError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("b") != std::string::npos);
        CHECK(msg.find("c") != std::string::npos);
    }
}

TEST_CASE("reference per-task fixtures reproduce the published totals", "[judge]") {
    const std::vector<std::pair<double, std::size_t>> bloomz{
        {91.25, 10}, {87.5, 10}, {65.54, 10}, {85.07, 10}, {75.71, 10},
        {82.5, 10},  {31.5, 7},  {8.5, 3},    {76.25, 10}};
    const std::vector<std::pair<double, std::size_t>> gptj{
        {61.11, 10}, {62.22, 10}, {33.11, 10}, {54.22, 10}, {24.11, 10},
        {41.11, 10}, {5, 7},      {5, 3},      {38, 10}};

    auto to_tasks = [](const std::vector<std::pair<double, std::size_t>>& rows) {
        std::vector<TaskScore> tasks;
        std::size_t i = 0;
        for (const auto& [score, n] : rows) {
            TaskScore t;
            t.category = standard_categories()[i++];
            t.n_samples = n;
            t.task_score = score;
            t.raw_sum = score * static_cast<double>(n) / 10.0;
            tasks.push_back(t);
        }
        return tasks;
    };

    auto bloomz_tasks = to_tasks(bloomz);
    std::size_t total_n = 0;
    for (const auto& t : bloomz_tasks) total_n += t.n_samples;
    CHECK(total_n == 80);
    CHECK(bloomz_tasks.size() == 9);

    CHECK_THAT(weighted_total(bloomz_tasks), Catch::Matchers::WithinAbs(73.55, 0.005));
    CHECK_THAT(weighted_total(to_tasks(gptj)), Catch::Matchers::WithinAbs(39.86, 0.005));
}

TEST_CASE("mock judge runs end-to-end, deterministically", "[judge]") {
    auto samples = standard_fixture();
    MockJudge mock;
    auto first = run_eval(samples, mock, fast_options());
    auto second = run_eval(samples, mock, fast_options());
    CHECK_FALSE(first.partial);
    CHECK(first.assistant_1.total_score == second.assistant_1.total_score);
    CHECK(first.assistant_2.total_score == second.assistant_2.total_score);
    CHECK(first.assistant_1.tasks.size() == 9);
    CHECK(report_json(first.assistant_1).dump() == report_json(second.assistant_1).dump());
}

TEST_CASE("a constant 10/1 judge maxes one assistant and floors the other", "[judge]") {
    auto samples = standard_fixture();
    ConstantJudge judge("10 1\nassistant one dominated");
    auto result = run_eval(samples, judge, fast_options());
    CHECK(result.assistant_1.total_score == 100.0);
    CHECK(result.assistant_2.total_score == 10.0);
    for (const auto& t : result.assistant_1.tasks) CHECK(t.task_score == 100.0);
}

TEST_CASE("transient failures are retried with the attempt count recorded", "[judge]") {
    std::vector<EvalSample> samples{sample_with_id("only")};
    FlakyJudge judge(2);
    auto opts = fast_options();
    opts.retries = 3;
    auto result = run_eval(samples, judge, opts);
    CHECK_FALSE(result.partial);
    REQUIRE(result.samples.size() == 1);
    CHECK(result.samples[0].attempts == 3);
    CHECK(result.samples[0].score_1 == 7.0);
}

TEST_CASE("exhausted retries mark the run partial", "[judge]") {
    std::vector<EvalSample> samples{sample_with_id("x"), sample_with_id("y")};
    struct AlwaysDown : JudgeClient {
        std::string complete(const EvalSample& s, const std::vector<JudgeMessage>&) override {
            if (s.id == "x") throw TransportError("down");
            return "6 6\nok";
        }
    } judge;
    auto opts = fast_options();
    opts.retries = 2;
    auto result = run_eval(samples, judge, opts);
    CHECK(result.partial);
    REQUIRE(result.failed_ids == std::vector<std::string>{"x"});
    CHECK(result.assistant_1.n_samples == 1);
    CHECK(result.assistant_1.partial);
}

TEST_CASE("reports are independent of parallelism", "[judge]") {
    auto samples = standard_fixture();
    MockJudge mock;
    auto serial_opts = fast_options();
    serial_opts.parallelism = 1;
    auto parallel_opts = fast_options();
    parallel_opts.parallelism = 8;
    auto serial = run_eval(samples, mock, serial_opts);
    auto parallel = run_eval(samples, mock, parallel_opts);
    CHECK(report_json(serial.assistant_1).dump() == report_json(parallel.assistant_1).dump());
    CHECK(report_json(serial.assistant_2).dump() == report_json(parallel.assistant_2).dump());
    REQUIRE(serial.samples.size() == parallel.samples.size());
    for (std::size_t i = 0; i < serial.samples.size(); ++i)
        CHECK(serial.samples[i].id == parallel.samples[i].id);
}

TEST_CASE("persisted verdicts reproduce the report and skip re-judging", "[judge]") {
    auto samples = standard_fixture();
    MockJudge mock;

    std::ostringstream log;
    auto sink = [&log](const EvalSample& s, const JudgeVerdict& v) {
        log << verdict_json(s.id, v).dump() << "\n";
    };
    auto original = run_eval(samples, mock, fast_options(), sink);

    std::istringstream in(log.str());
    auto verdicts = parse_verdict_log(in);
    CHECK(verdicts.size() == samples.size());
    auto rebuilt_1 = aggregate(samples, verdicts, 1);
    auto rebuilt_2 = aggregate(samples, verdicts, 2);
    CHECK(report_json(rebuilt_1).dump() == report_json(original.assistant_1).dump());
    CHECK(report_json(rebuilt_2).dump() == report_json(original.assistant_2).dump());

    // resuming with known verdicts must not call the judge again
    ConstantJudge counting("1 1\nshould not be used");
    auto resumed = run_eval(samples, counting, fast_options(), {}, &verdicts);
    CHECK(counting.calls == 0);
    CHECK(report_json(resumed.assistant_1).dump() == report_json(original.assistant_1).dump());
}

TEST_CASE("eval sample files parse with line errors", "[judge]") {
    std::istringstream good(
        R"({"id":"s1","category":"Math","question":"1+1?","answer_1":"2","answer_2":"3"})"
        "\n");
    auto samples = parse_eval_samples(good);
    REQUIRE(samples.size() == 1);
    CHECK(samples[0].category == "Math");

    std::istringstream missing(R"({"id":"s1","category":"Math","question":"q"})"
                               "\n");
    CHECK_THROWS_AS(parse_eval_samples(missing), SchemaError);

    std::istringstream broken("{oops\n");
    CHECK_THROWS_AS(parse_eval_samples(broken), ParseError);
}

TEST_CASE("rendered table carries tasks and the weighted total", "[judge]") {
    auto samples = standard_fixture();
    ConstantJudge judge("8 4\nfine");
    auto result = run_eval(samples, judge, fast_options());
    auto table = render_report_table(result.assistant_1, result.assistant_2, "Assistant 1",
                                     "Assistant 2");
    CHECK(table.find("Tasks") != std::string::npos);
    CHECK(table.find("Generic") != std::string::npos);
    CHECK(table.find("Total") != std::string::npos);
    CHECK(table.find("80") != std::string::npos);
    CHECK(table.find("40") != std::string::npos);
}

TEST_CASE("http judge client speaks the chat-completion wire shape", "[judge][http]") {
    httplib::Server server;
    std::string seen_auth;
    nlohmann::json seen_body;
    server.Post("/v1/chat/completions",
                [&](const httplib::Request& req, httplib::Response& res) {
                    seen_auth = req.get_header_value("Authorization");
                    seen_body = nlohmann::json::parse(req.body);
                    nlohmann::json reply{
                        {"choices",
                         {{{"message", {{"role", "assistant"}, {"content", "6 9\nok"}}}}}}};
                    res.set_content(reply.dump(), "application/json");
                });
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread server_thread([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    HttpJudgeConfig config;
    config.base_url = "http://127.0.0.1:" + std::to_string(port);
    config.model = "judge-model";
    config.api_key = "sk-test";
    HttpJudgeClient client(config);

    std::vector<EvalSample> samples{sample_with_id("http1")};
    auto result = run_eval(samples, client, fast_options());
    REQUIRE(result.samples.size() == 1);
    CHECK(result.samples[0].score_1 == 6.0);
    CHECK(result.samples[0].score_2 == 9.0);

    CHECK(seen_auth == "Bearer sk-test");
    CHECK(seen_body["model"] == "judge-model");
    CHECK(seen_body["temperature"] == 0);
    REQUIRE(seen_body["messages"].size() == 2);
    CHECK(seen_body["messages"][0]["role"] == "system");

    server.stop();
    server_thread.join();
}

TEST_CASE("http judge client maps failures to TransportError", "[judge][http]") {
    HttpJudgeConfig config;
    config.base_url = "http://127.0.0.1:1";  // nothing listens here
    config.timeout_seconds = 1;
    HttpJudgeClient client(config);
    auto sample = sample_with_id("unreachable");
    CHECK_THROWS_AS(client.complete(sample, build_judge_prompt(sample)), TransportError);
}
