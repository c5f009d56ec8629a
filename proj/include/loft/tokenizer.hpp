#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "loft/common.hpp"
#include "loft/corpus.hpp"

namespace loft {

// Deterministic byte-level tokenizer: byte b is token id b, specials sit
// above 255. No merges, no normalization, no out-of-vocabulary tokens.
struct ByteTokenizer {
    static constexpr int kBos = 256;
    static constexpr int kEos = 257;
    static constexpr int kPad = 258;
    static constexpr int kSepInstr = 259;   // between instruction and input
    static constexpr int kSepOutput = 260;  // between input and output
    static constexpr int kVocabSize = 261;

    static bool is_special(int id) { return id >= 256; }

    static std::vector<int> encode(std::string_view text) {
        std::vector<int> ids;
        ids.reserve(text.size());
        for (unsigned char c : text) ids.push_back(static_cast<int>(c));
        return ids;
    }

    // Specials are dropped; invalid UTF-8 byte runs collapse to U+FFFD.
    static std::string decode(std::span<const int> ids) {
        std::string bytes;
        bytes.reserve(ids.size());
        for (int id : ids) {
            if (id >= 0 && id <= 255) bytes.push_back(static_cast<char>(id));
        }
        return sanitize_utf8(bytes);
    }

    static std::string sanitize_utf8(std::string_view bytes) {
        static constexpr std::string_view kReplacement = "\xEF\xBF\xBD";  // U+FFFD
        std::string out;
        out.reserve(bytes.size());
        size_t i = 0;
        bool in_bad_run = false;
        while (i < bytes.size()) {
            const unsigned char c = static_cast<unsigned char>(bytes[i]);
            size_t len = 0;
            uint32_t min_cp = 0;
            if (c < 0x80) {
                len = 1;
            } else if ((c & 0xE0) == 0xC0) {
                len = 2;
                min_cp = 0x80;
            } else if ((c & 0xF0) == 0xE0) {
                len = 3;
                min_cp = 0x800;
            } else if ((c & 0xF8) == 0xF0) {
                len = 4;
                min_cp = 0x10000;
            }
            bool valid = len > 0 && i + len <= bytes.size();
            uint32_t cp = 0;
            if (valid && len > 1) {
                cp = c & (0x7F >> len);
                for (size_t k = 1; k < len && valid; ++k) {
                    const unsigned char cc = static_cast<unsigned char>(bytes[i + k]);
                    if ((cc & 0xC0) != 0x80)
                        valid = false;
                    else
                        cp = (cp << 6) | (cc & 0x3F);
                }
                if (valid && (cp < min_cp || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)))
                    valid = false;
            }
            if (valid) {
                out.append(bytes.substr(i, len));
                i += len;
                in_bad_run = false;
            } else {
                if (!in_bad_run) out.append(kReplacement);
                in_bad_run = true;
                ++i;
            }
        }
        return out;
    }
};

struct EncodedExample {
    std::vector<int> token_ids;
    std::vector<uint8_t> loss_mask;  // 1 exactly on output tokens and the EOS
    bool truncated = false;
};

// Layout: BOS instr SEP_INSTR input SEP_OUTPUT output EOS, right-truncated
// to `cutoff` tokens. The loss mask covers tokens strictly after SEP_OUTPUT.
inline EncodedExample encode_example(const InstructionExample& ex, int cutoff) {
    if (cutoff < 8) throw std::invalid_argument("cutoff must be >= 8");
    EncodedExample enc;
    auto push = [&enc](int id, uint8_t mask) {
        enc.token_ids.push_back(id);
        enc.loss_mask.push_back(mask);
    };
    push(ByteTokenizer::kBos, 0);
    for (int id : ByteTokenizer::encode(ex.instruction)) push(id, 0);
    push(ByteTokenizer::kSepInstr, 0);
    for (int id : ByteTokenizer::encode(ex.input)) push(id, 0);
    push(ByteTokenizer::kSepOutput, 0);
    for (int id : ByteTokenizer::encode(ex.output)) push(id, 1);
    push(ByteTokenizer::kEos, 1);
    if (enc.token_ids.size() > static_cast<size_t>(cutoff)) {
        enc.token_ids.resize(static_cast<size_t>(cutoff));
        enc.loss_mask.resize(static_cast<size_t>(cutoff));
        enc.truncated = true;
    }
    return enc;
}

// Prompt-only encoding for generation: everything up to and including
// SEP_OUTPUT, so the model continues with the output segment.
inline std::vector<int> encode_prompt(std::string_view instruction, std::string_view input) {
    std::vector<int> ids;
    ids.push_back(ByteTokenizer::kBos);
    for (int id : ByteTokenizer::encode(instruction)) ids.push_back(id);
    ids.push_back(ByteTokenizer::kSepInstr);
    for (int id : ByteTokenizer::encode(input)) ids.push_back(id);
    ids.push_back(ByteTokenizer::kSepOutput);
    return ids;
}

// Manifest recorded next to every trained checkpoint.
inline nlohmann::ordered_json tokenizer_manifest() {
    nlohmann::ordered_json j;
    j["vocab_size"] = ByteTokenizer::kVocabSize;
    j["bos_id"] = ByteTokenizer::kBos;
    j["eos_id"] = ByteTokenizer::kEos;
    j["pad_id"] = ByteTokenizer::kPad;
    j["sep_instr_id"] = ByteTokenizer::kSepInstr;
    j["sep_output_id"] = ByteTokenizer::kSepOutput;
    return j;
}

}  // namespace loft
