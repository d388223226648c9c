// Copyright (c) 2026 lorachat contributors
// SPDX-License-Identifier: Apache-2.0
//
// Instruction-dataset pipeline: JSONL loading, prompt-template rendering,
// byte-level tokenization, loss-masked training examples, dataset mixing.
// Text is treated as raw UTF-8 bytes throughout; nothing is normalized, so
// Vietnamese diacritics survive every round trip.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "lorachat/errors.hpp"
#include "lorachat/rng.hpp"
#include "lorachat/tensor.hpp"

namespace lorachat {

// Byte-level vocabulary: ids 0..255 are raw bytes, then the control tokens.
inline constexpr TokenId kPadToken = 256;
inline constexpr TokenId kEosToken = 257;
inline constexpr std::size_t kByteVocabSize = 258;

struct InstructionRecord {
    std::string prompt;
    std::string response;
    std::string source_tag;  // alpaca | gpt4all | chatdoctor | custom | ""
};

struct PromptTemplate {
    std::string name;
    std::string header;

    static PromptTemplate generic_chat() {
        return {"generic_chat",
                "Hãy viết một phản hồi thích hợp cho chỉ dẫn dưới đây."};
    }

    static PromptTemplate doctor() {
        return {"doctor",
                "Nếu bạn là bác sĩ, vui lòng trả lời các câu hỏi y tế dựa trên mô tả "
                "của bệnh nhân."};
    }

    static PromptTemplate by_name(std::string_view name) {
        if (name == "generic_chat" || name == "chat") return generic_chat();
        if (name == "doctor") return doctor();
        throw ConfigError("unknown prompt template '" + std::string(name) + "'");
    }
};

inline constexpr std::string_view kInstructionMarker = "### Instruction:";
inline constexpr std::string_view kResponseMarker = "### Response:";

/// Byte-exact prompt rendering; generation continues right after the
/// trailing response marker.
inline std::string render_prompt(const PromptTemplate& tmpl, std::string_view instruction) {
    std::string out;
    out.reserve(tmpl.header.size() + instruction.size() + 40);
    out += tmpl.header;
    out += "\n\n";
    out += kInstructionMarker;
    out += "\n";
    out += instruction;
    out += "\n\n";
    out += kResponseMarker;
    return out;
}

/// Inverse of render_prompt: recovers the instruction between the markers.
inline std::string extract_instruction(std::string_view rendered) {
    const auto start = rendered.find(kInstructionMarker);
    const auto end = rendered.rfind(kResponseMarker);
    if (start == std::string_view::npos || end == std::string_view::npos)
        throw ParseError("text does not contain the template markers");
    const auto body_start = start + kInstructionMarker.size() + 1;  // skip newline
    if (body_start + 2 > end) throw ParseError("malformed rendered prompt");
    return std::string(rendered.substr(body_start, end - 2 - body_start));
}

inline std::vector<TokenId> tokenize(std::string_view text) {
    std::vector<TokenId> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<TokenId>(c));
    return ids;
}

/// Identity inverse of tokenize on byte ids; control tokens are dropped.
inline std::string detokenize(std::span<const TokenId> ids) {
    std::string out;
    out.reserve(ids.size());
    for (TokenId id : ids)
        if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
    return out;
}

namespace detail {

inline std::string trim_copy(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return "";
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

}  // namespace detail

/// Parses one-object-per-line instruction records. Errors carry 1-based line
/// numbers; blank lines are skipped.
inline std::vector<InstructionRecord> parse_jsonl_records(std::istream& in,
                                                          std::string_view default_tag = "") {
    std::vector<InstructionRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim_copy(line).empty()) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!obj.is_object())
            throw SchemaError("line " + std::to_string(line_no) + ": expected a JSON object");
        for (const char* key : {"prompt", "response"}) {
            if (!obj.contains(key))
                throw SchemaError("line " + std::to_string(line_no) + ": missing field '" +
                                  key + "'");
            if (!obj[key].is_string())
                throw SchemaError("line " + std::to_string(line_no) + ": field '" + key +
                                  "' must be a string");
        }
        InstructionRecord rec;
        rec.prompt = obj["prompt"].get<std::string>();
        rec.response = obj["response"].get<std::string>();
        rec.source_tag = obj.value("source", std::string(default_tag));
        if (detail::trim_copy(rec.prompt).empty() || detail::trim_copy(rec.response).empty())
            throw SchemaError("line " + std::to_string(line_no) +
                              ": prompt and response must be non-empty");
        records.push_back(std::move(rec));
    }
    return records;
}

inline std::vector<InstructionRecord> load_dataset(const std::filesystem::path& path,
                                                   std::string_view default_tag = "") {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset '" + path.string() + "'");
    return parse_jsonl_records(in, default_tag);
}

inline void write_dataset(const std::filesystem::path& path,
                          std::span<const InstructionRecord> records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    for (const auto& rec : records) {
        nlohmann::json obj{{"prompt", rec.prompt}, {"response", rec.response}};
        if (!rec.source_tag.empty()) obj["source"] = rec.source_tag;
        out << obj.dump() << "\n";
    }
}

/// Converts one Alpaca-style {"instruction","input","output"} object:
/// instruction (+ "\n" + input when present) becomes the prompt.
inline InstructionRecord convert_alpaca(const nlohmann::json& obj) {
    if (!obj.is_object() || !obj.contains("instruction") || !obj.contains("output"))
        throw SchemaError("alpaca record needs 'instruction' and 'output'");
    InstructionRecord rec;
    rec.prompt = obj["instruction"].get<std::string>();
    const std::string input = obj.value("input", "");
    if (!detail::trim_copy(input).empty()) rec.prompt += "\n" + input;
    rec.response = obj["output"].get<std::string>();
    rec.source_tag = "alpaca";
    return rec;
}

/// Accepts either a JSON array file (the upstream Alpaca release) or JSONL.
inline std::vector<InstructionRecord> load_alpaca(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto first = text.find_first_not_of(" \t\r\n");
    std::vector<InstructionRecord> records;
    if (first != std::string::npos && text[first] == '[') {
        nlohmann::json arr;
        try {
            arr = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("alpaca array parse: ") + e.what());
        }
        for (const auto& obj : arr) records.push_back(convert_alpaca(obj));
    } else {
        std::istringstream lines(text);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(lines, line)) {
            ++line_no;
            if (detail::trim_copy(line).empty()) continue;
            try {
                records.push_back(convert_alpaca(nlohmann::json::parse(line)));
            } catch (const nlohmann::json::exception& e) {
                throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
            }
        }
    }
    return records;
}

struct TrainingExample {
    std::vector<TokenId> input_ids;
    std::vector<std::uint8_t> loss_mask;  // 1 exactly on response tokens (and EOS)
    std::string record_id;
};

/// Renders, tokenizes and truncates one record to max_len tokens. The mask
/// is 0 over the rendered prompt and 1 over the retained response + EOS.
inline TrainingExample build_example(const InstructionRecord& record, const PromptTemplate& tmpl,
                                     std::size_t max_len = 512, std::string record_id = "") {
    TrainingExample ex;
    ex.record_id = std::move(record_id);
    const std::vector<TokenId> prompt_ids = tokenize(render_prompt(tmpl, record.prompt));
    if (prompt_ids.size() >= max_len)
        throw LengthError("prompt exceeds window: " + std::to_string(prompt_ids.size()) +
                          " tokens >= max_len " + std::to_string(max_len));
    const std::vector<TokenId> response_ids = tokenize(record.response);

    ex.input_ids = prompt_ids;
    ex.input_ids.insert(ex.input_ids.end(), response_ids.begin(), response_ids.end());
    ex.input_ids.push_back(kEosToken);
    if (ex.input_ids.size() > max_len) ex.input_ids.resize(max_len);

    ex.loss_mask.assign(ex.input_ids.size(), 0);
    for (std::size_t i = prompt_ids.size(); i < ex.input_ids.size(); ++i) ex.loss_mask[i] = 1;
    return ex;
}

struct SkippedRecord {
    std::string record_id;
    std::string reason;
};

struct ExampleBatch {
    std::vector<TrainingExample> examples;
    std::vector<SkippedRecord> skipped;
};

/// Builds every record, skipping (and reporting) those whose prompt alone
/// overflows the window.
inline ExampleBatch build_examples(std::span<const InstructionRecord> records,
                                   const PromptTemplate& tmpl, std::size_t max_len = 512) {
    ExampleBatch out;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const std::string id = "r" + std::to_string(i);
        try {
            out.examples.push_back(build_example(records[i], tmpl, max_len, id));
        } catch (const LengthError& e) {
            out.skipped.push_back({id, e.what()});
        }
    }
    return out;
}

/// Concatenates dataset parts and shuffles deterministically by seed.
inline std::vector<InstructionRecord> merge_datasets(
    const std::vector<std::vector<InstructionRecord>>& parts, std::uint64_t seed) {
    if (parts.empty()) throw ConfigError("merge_datasets needs at least one part");
    std::vector<InstructionRecord> merged;
    for (const auto& part : parts) merged.insert(merged.end(), part.begin(), part.end());
    SplitMix64 rng(seed);
    shuffle(merged, rng);
    return merged;
}

struct CorpusStats {
    std::size_t count = 0;
    double mean_tokens_per_sample = 0.0;
    std::size_t total_tokens = 0;
};

/// Token statistics under this artifact's byte tokenizer. The report shape
/// mirrors the usual dataset tables but the absolute numbers are not
/// comparable to subword-tokenizer counts.
inline CorpusStats corpus_stats(std::span<const InstructionRecord> records) {
    CorpusStats stats;
    stats.count = records.size();
    for (const auto& rec : records)
        stats.total_tokens += rec.prompt.size() + rec.response.size();
    if (stats.count > 0)
        stats.mean_tokens_per_sample =
            static_cast<double>(stats.total_tokens) / static_cast<double>(stats.count);
    return stats;
}

struct TranslationResult {
    bool ok = false;
    std::string text;
    std::string error;
};

/// Contract for a pluggable translation backend; none ships with the
/// library. Implementations must report per-item failures rather than throw.
struct Translator {
    virtual ~Translator() = default;
    virtual std::vector<TranslationResult> translate(std::span<const std::string> texts) = 0;
};

}  // namespace lorachat
