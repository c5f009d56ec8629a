#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "loft/common.hpp"
#include "loft/entity.hpp"

namespace loft {

// Fixed prompt used for every training triple. Byte-exact contract; the
// tests assert on it.
inline constexpr std::string_view kInstructionTemplate =
    "Do Named Entity Recognition for the following text:";

struct InstructionExample {
    std::string instruction;
    std::string input;
    std::string output;
};

struct CorpusError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void append_json_escaped(std::string& out, std::string_view s) {
    out.push_back('"');
    for (unsigned char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            case '\t': out += "\\t"; break;
            case '\b': out += "\\b"; break;
            case '\f': out += "\\f"; break;
            default:
                if (c < 0x20) {
                    char buf[8];
                    std::snprintf(buf, sizeof(buf), "\\u%04x", c);
                    out += buf;
                } else {
                    out.push_back(static_cast<char>(c));
                }
        }
    }
    out.push_back('"');
}

inline void append_utf8(std::string& out, uint32_t cp) {
    if (cp <= 0x7F) {
        out.push_back(static_cast<char>(cp));
    } else if (cp <= 0x7FF) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp <= 0xFFFF) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

}  // namespace detail

// Canonical rendering of an entity map: strict JSON, double quotes, all
// seven keys in canonical order, null for empty lists. Deterministic
// byte-for-byte.
inline std::string serialize_output(const EntityMap& entities) {
    std::string out = "{";
    for (size_t i = 0; i < kNumEntityTypes; ++i) {
        if (i > 0) out += ", ";
        detail::append_json_escaped(out, kEntityTypeNames[i]);
        out += ": ";
        const auto& mentions = entities[i];
        if (mentions.empty()) {
            out += "null";
        } else {
            out += "[";
            for (size_t j = 0; j < mentions.size(); ++j) {
                if (j > 0) out += ", ";
                detail::append_json_escaped(out, mentions[j]);
            }
            out += "]";
        }
    }
    out += "}";
    return out;
}

// Result of parsing a (possibly model-generated, possibly garbage) output
// string. `ok == false` signals a malformed generation, never a bug; the
// evaluator scores such predictions as empty.
struct OutputParse {
    bool ok = false;
    EntityMap entities;
    std::vector<std::string> extra_keys;  // unknown keys, reported and dropped
    size_t error_offset = 0;
    std::string error;
};

namespace detail {

// Hand-rolled parser for the dict-of-lists output format. Accepts both the
// canonical JSON dialect and the repr-style dialect (single quotes, bare
// None), since generations may imitate either.
class OutputScanner {
public:
    explicit OutputScanner(std::string_view s) : s_(s) {}

    OutputParse run() {
        OutputParse res;
        const size_t start = s_.find('{');
        if (start == std::string_view::npos) {
            return fail(res, 0, "no dict found");
        }
        pos_ = start;
        ++pos_;  // consume '{'
        skip_ws();
        if (peek() == '}') {
            ++pos_;
            res.ok = true;
            return res;
        }
        while (true) {
            skip_ws();
            std::string key;
            if (!parse_string(key)) return fail(res, pos_, "expected quoted key");
            skip_ws();
            if (peek() != ':') return fail(res, pos_, "expected ':' after key");
            ++pos_;
            skip_ws();
            std::vector<std::string> values;
            if (!parse_value(values)) return fail(res, pos_, err_);
            if (auto type = entity_type_from_name(key)) {
                entities_of(res.entities, *type) = std::move(values);
            } else {
                res.extra_keys.push_back(key);
            }
            skip_ws();
            const char c = peek();
            if (c == ',') {
                ++pos_;
                continue;
            }
            if (c == '}') {
                ++pos_;
                res.ok = true;
                return res;  // trailing text after the dict is ignored
            }
            return fail(res, pos_, "expected ',' or '}'");
        }
    }

private:
    OutputParse fail(OutputParse& res, size_t off, std::string_view why) {
        res.ok = false;
        res.error_offset = off;
        res.error = std::string(why);
        return res;
    }

    char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }

    void skip_ws() {
        while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    }

    bool match_word(std::string_view w) {
        if (s_.substr(pos_, w.size()) != w) return false;
        const size_t after = pos_ + w.size();
        if (after < s_.size()) {
            const unsigned char c = static_cast<unsigned char>(s_[after]);
            if (std::isalnum(c) || c == '_') return false;
        }
        pos_ = after;
        return true;
    }

    // null / None / [list of strings] / bare string (treated as a singleton).
    bool parse_value(std::vector<std::string>& out) {
        if (match_word("null") || match_word("None")) return true;
        const char c = peek();
        if (c == '[') {
            ++pos_;
            skip_ws();
            if (peek() == ']') {
                ++pos_;
                return true;
            }
            while (true) {
                skip_ws();
                std::string item;
                if (!parse_string(item)) {
                    err_ = "expected string in list";
                    return false;
                }
                out.push_back(std::move(item));
                skip_ws();
                if (peek() == ',') {
                    ++pos_;
                    continue;
                }
                if (peek() == ']') {
                    ++pos_;
                    return true;
                }
                err_ = "expected ',' or ']' in list";
                return false;
            }
        }
        if (c == '"' || c == '\'') {
            std::string item;
            if (!parse_string(item)) {
                err_ = "bad string value";
                return false;
            }
            out.push_back(std::move(item));
            return true;
        }
        err_ = "expected null, None, list or string";
        return false;
    }

    bool parse_string(std::string& out) {
        const char quote = peek();
        if (quote != '"' && quote != '\'') return false;
        ++pos_;
        out.clear();
        while (pos_ < s_.size()) {
            const char c = s_[pos_];
            if (c == quote) {
                ++pos_;
                return true;
            }
            if (c == '\\') {
                ++pos_;
                if (pos_ >= s_.size()) return false;
                const char e = s_[pos_++];
                switch (e) {
                    case 'n': out.push_back('\n'); break;
                    case 't': out.push_back('\t'); break;
                    case 'r': out.push_back('\r'); break;
                    case 'b': out.push_back('\b'); break;
                    case 'f': out.push_back('\f'); break;
                    case '/': out.push_back('/'); break;
                    case '"': out.push_back('"'); break;
                    case '\'': out.push_back('\''); break;
                    case '\\': out.push_back('\\'); break;
                    case 'u': {
                        uint32_t cp;
                        if (!parse_hex4(cp)) return false;
                        if (cp >= 0xD800 && cp <= 0xDBFF && s_.substr(pos_, 2) == "\\u") {
                            pos_ += 2;
                            uint32_t lo;
                            if (!parse_hex4(lo)) return false;
                            if (lo >= 0xDC00 && lo <= 0xDFFF) {
                                cp = 0x10000 + ((cp - 0xD800) << 10) + (lo - 0xDC00);
                            } else {
                                cp = 0xFFFD;
                            }
                        } else if (cp >= 0xD800 && cp <= 0xDFFF) {
                            cp = 0xFFFD;  // lone surrogate
                        }
                        detail::append_utf8(out, cp);
                        break;
                    }
                    default: out.push_back(e); break;
                }
            } else {
                out.push_back(c);
                ++pos_;
            }
        }
        return false;  // unterminated
    }

    bool parse_hex4(uint32_t& cp) {
        if (pos_ + 4 > s_.size()) return false;
        cp = 0;
        for (int k = 0; k < 4; ++k) {
            const char h = s_[pos_++];
            cp <<= 4;
            if (h >= '0' && h <= '9') cp |= static_cast<uint32_t>(h - '0');
            else if (h >= 'a' && h <= 'f') cp |= static_cast<uint32_t>(h - 'a' + 10);
            else if (h >= 'A' && h <= 'F') cp |= static_cast<uint32_t>(h - 'A' + 10);
            else return false;
        }
        return true;
    }

    std::string_view s_;
    size_t pos_ = 0;
    std::string err_;
};

}  // namespace detail

// Total and defensive: never throws on malformed input. Missing keys
// default to empty lists; unknown keys are reported and dropped.
inline OutputParse parse_output(std::string_view text) {
    detail::OutputScanner scanner(text);
    return scanner.run();
}

inline InstructionExample to_instruction(const AnnotatedSentence& sentence) {
    return InstructionExample{
        std::string(kInstructionTemplate),
        sentence.text,
        serialize_output(sentence.entities),
    };
}

// ---------------------------------------------------------------------------
// Corpus JSONL: {"id": str, "text": str, "entities": {"Company": [..]|null, ...}}

namespace detail {

inline AnnotatedSentence sentence_from_json(const nlohmann::json& j, size_t line_no) {
    auto err = [line_no](const std::string& why) {
        return CorpusError("line " + std::to_string(line_no) + ": " + why);
    };
    if (!j.is_object()) throw err("record is not an object");
    AnnotatedSentence s;
    if (!j.contains("id") || !j["id"].is_string()) throw err("missing or non-string \"id\"");
    if (!j.contains("text") || !j["text"].is_string()) throw err("missing or non-string \"text\"");
    s.id = j["id"].get<std::string>();
    s.text = j["text"].get<std::string>();
    if (j.contains("entities")) {
        const auto& ents = j["entities"];
        if (ents.is_null()) return s;
        if (!ents.is_object()) throw err("\"entities\" is not an object");
        for (auto it = ents.begin(); it != ents.end(); ++it) {
            const auto type = entity_type_from_name(it.key());
            if (!type) throw err("unknown entity-type key \"" + it.key() + "\"");
            const auto& val = it.value();
            if (val.is_null()) continue;
            if (!val.is_array())
                throw err("entity value for \"" + it.key() + "\" is neither null nor a list");
            for (const auto& item : val) {
                if (!item.is_string())
                    throw err("non-string mention under \"" + it.key() + "\"");
                std::string mention = item.get<std::string>();
                if (trim(mention).empty())
                    throw err("empty mention under \"" + it.key() + "\"");
                entities_of(s.entities, *type).push_back(std::move(mention));
            }
        }
    }
    return s;
}

}  // namespace detail

inline std::vector<AnnotatedSentence> load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw CorpusError("cannot open corpus file: " + path);
    std::vector<AnnotatedSentence> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw CorpusError("line " + std::to_string(line_no) + ": malformed JSON (" +
                              std::string(e.what()) + ")");
        }
        out.push_back(detail::sentence_from_json(j, line_no));
    }
    return out;
}

inline std::string sentence_to_json_line(const AnnotatedSentence& s) {
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["text"] = s.text;
    nlohmann::ordered_json ents = nlohmann::ordered_json::object();
    for (size_t i = 0; i < kNumEntityTypes; ++i) {
        if (s.entities[i].empty()) {
            ents[std::string(kEntityTypeNames[i])] = nullptr;
        } else {
            ents[std::string(kEntityTypeNames[i])] = s.entities[i];
        }
    }
    j["entities"] = std::move(ents);
    return j.dump();
}

inline void save_corpus(const std::vector<AnnotatedSentence>& corpus, const std::string& path) {
    std::string buf;
    for (const auto& s : corpus) {
        buf += sentence_to_json_line(s);
        buf += '\n';
    }
    write_file_atomic(path, buf);
}

// Alpaca-style instruction JSONL, one {"instruction","input","output"} per line.
inline void save_instruction_jsonl(const std::vector<InstructionExample>& examples,
                                   const std::string& path) {
    std::string buf;
    for (const auto& ex : examples) {
        nlohmann::ordered_json j;
        j["instruction"] = ex.instruction;
        j["input"] = ex.input;
        j["output"] = ex.output;
        buf += j.dump();
        buf += '\n';
    }
    write_file_atomic(path, buf);
}

inline std::vector<InstructionExample> load_instruction_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw CorpusError("cannot open instruction file: " + path);
    std::vector<InstructionExample> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw CorpusError("line " + std::to_string(line_no) + ": malformed JSON (" +
                              std::string(e.what()) + ")");
        }
        for (const char* field : {"instruction", "input", "output"}) {
            if (!j.contains(field) || !j[field].is_string())
                throw CorpusError("line " + std::to_string(line_no) + ": missing or non-string \"" +
                                  field + "\"");
        }
        out.push_back(InstructionExample{j["instruction"].get<std::string>(),
                                         j["input"].get<std::string>(),
                                         j["output"].get<std::string>()});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset statistics

struct DatasetStats {
    size_t total_samples = 0;
    size_t samples_with_entities = 0;
    size_t samples_without_entities = 0;
    double avg_text_length_chars = 0.0;  // Unicode code points
    double avg_entities_per_sample = 0.0;  // mention-level
    std::array<size_t, kNumEntityTypes> per_type_sample_counts{};  // samples with >=1 mention
};

inline DatasetStats compute_stats(const std::vector<AnnotatedSentence>& corpus) {
    DatasetStats st;
    st.total_samples = corpus.size();
    if (corpus.empty()) return st;
    size_t total_chars = 0;
    size_t total_entities = 0;
    for (const auto& s : corpus) {
        total_chars += utf8_length(s.text);
        const size_t mentions = total_mentions(s.entities);
        total_entities += mentions;
        if (mentions > 0)
            ++st.samples_with_entities;
        else
            ++st.samples_without_entities;
        for (size_t i = 0; i < kNumEntityTypes; ++i)
            if (!s.entities[i].empty()) ++st.per_type_sample_counts[i];
    }
    st.avg_text_length_chars = static_cast<double>(total_chars) / static_cast<double>(corpus.size());
    st.avg_entities_per_sample =
        static_cast<double>(total_entities) / static_cast<double>(corpus.size());
    return st;
}

// CSV with per-type sample counts, for external plotting.
inline std::string distribution_csv(const DatasetStats& stats) {
    std::string out = "type,count\n";
    for (size_t i = 0; i < kNumEntityTypes; ++i) {
        out += kEntityTypeNames[i];
        out += ',';
        out += std::to_string(stats.per_type_sample_counts[i]);
        out += '\n';
    }
    return out;
}

inline void emit_distribution(const DatasetStats& stats, const std::string& path) {
    write_file_atomic(path, distribution_csv(stats));
}

}  // namespace loft
