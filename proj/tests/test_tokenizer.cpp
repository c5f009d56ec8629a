#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <string>
#include <vector>

#include "loft/tokenizer.hpp"
#include "test_util.hpp"

using namespace loft;

TEST_CASE("special ids sit directly above the byte range") {
    CHECK(ByteTokenizer::kBos == 256);
    CHECK(ByteTokenizer::kEos == 257);
    CHECK(ByteTokenizer::kPad == 258);
    CHECK(ByteTokenizer::kSepInstr == 259);
    CHECK(ByteTokenizer::kSepOutput == 260);
    CHECK(ByteTokenizer::kVocabSize == 261);
    CHECK_FALSE(ByteTokenizer::is_special(255));
    CHECK(ByteTokenizer::is_special(256));
}

TEST_CASE("encode maps every byte to its own id") {
    std::string all_bytes;
    for (int b = 0; b < 256; ++b) all_bytes.push_back(static_cast<char>(b));
    const auto ids = ByteTokenizer::encode(all_bytes);
    REQUIRE(ids.size() == 256);
    for (int b = 0; b < 256; ++b) CHECK(ids[static_cast<size_t>(b)] == b);
    CHECK(ByteTokenizer::encode("").empty());
}

TEST_CASE("decode inverts encode on valid UTF-8") {
    for (const std::string& text : {std::string("hello world"), std::string("Ünïcödé ÄG 日本 🙂"),
                                    std::string("tabs\tand\nnewlines"), std::string()}) {
        const auto ids = ByteTokenizer::encode(text);
        CHECK(ByteTokenizer::decode(ids) == text);
    }
}

TEST_CASE("decode drops specials and repairs invalid UTF-8") {
    SECTION("specials vanish") {
        const std::vector<int> ids = {ByteTokenizer::kBos, 'h', 'i', ByteTokenizer::kPad,
                                      ByteTokenizer::kEos};
        CHECK(ByteTokenizer::decode(ids) == "hi");
    }
    SECTION("a bad byte run collapses to a single replacement char") {
        // 0xFF 0xFE is no prefix of any UTF-8 sequence.
        const std::vector<int> ids = {'a', 0xFF, 0xFE, 'b'};
        CHECK(ByteTokenizer::decode(ids) == "a\xEF\xBF\xBD"
                                            "b");
    }
    SECTION("truncated multibyte sequence at end") {
        const std::vector<int> ids = {0xE6, 0x97};  // first two bytes of 日
        CHECK(ByteTokenizer::decode(ids) == "\xEF\xBF\xBD");
    }
    SECTION("overlong encoding is rejected") {
        const std::vector<int> ids = {0xC0, 0x80};  // overlong NUL
        CHECK(ByteTokenizer::decode(ids) == "\xEF\xBF\xBD");
    }
    SECTION("surrogate codepoints are rejected") {
        const std::vector<int> ids = {0xED, 0xA0, 0x80};  // U+D800
        CHECK(ByteTokenizer::decode(ids) == "\xEF\xBF\xBD");
    }
}

TEST_CASE("encode_example layout") {
    InstructionExample ex;
    ex.instruction = "do it";
    ex.input = "text";
    ex.output = "{}";
    const EncodedExample enc = encode_example(ex, 400);

    std::vector<int> want = {ByteTokenizer::kBos};
    for (char c : ex.instruction) want.push_back(static_cast<unsigned char>(c));
    want.push_back(ByteTokenizer::kSepInstr);
    for (char c : ex.input) want.push_back(static_cast<unsigned char>(c));
    want.push_back(ByteTokenizer::kSepOutput);
    for (char c : ex.output) want.push_back(static_cast<unsigned char>(c));
    want.push_back(ByteTokenizer::kEos);

    CHECK(enc.token_ids == want);
    CHECK_FALSE(enc.truncated);
    REQUIRE(enc.loss_mask.size() == enc.token_ids.size());

    // Mask is 1 exactly on positions strictly after SEP_OUTPUT, EOS included.
    const auto sep_it =
        std::find(enc.token_ids.begin(), enc.token_ids.end(), ByteTokenizer::kSepOutput);
    REQUIRE(sep_it != enc.token_ids.end());
    const size_t sep_pos = static_cast<size_t>(sep_it - enc.token_ids.begin());
    for (size_t i = 0; i < enc.loss_mask.size(); ++i)
        CHECK(enc.loss_mask[i] == (i > sep_pos ? 1 : 0));
    const size_t supervised = ex.output.size() + 1;  // output bytes + EOS
    CHECK(std::count(enc.loss_mask.begin(), enc.loss_mask.end(), 1) ==
          static_cast<long>(supervised));
}

TEST_CASE("encode_example truncation") {
    InstructionExample ex;
    ex.instruction = "instr";
    ex.input = std::string(50, 'x');
    ex.output = std::string(30, 'y');

    const EncodedExample full = encode_example(ex, 400);
    const size_t full_len = full.token_ids.size();

    SECTION("cutoff below full length truncates from the right") {
        const int cutoff = static_cast<int>(full_len) - 10;
        const EncodedExample enc = encode_example(ex, cutoff);
        CHECK(enc.truncated);
        REQUIRE(enc.token_ids.size() == static_cast<size_t>(cutoff));
        REQUIRE(enc.loss_mask.size() == static_cast<size_t>(cutoff));
        // What survives is a prefix of the untruncated stream, masks included.
        for (size_t i = 0; i < enc.token_ids.size(); ++i) {
            CHECK(enc.token_ids[i] == full.token_ids[i]);
            CHECK(enc.loss_mask[i] == full.loss_mask[i]);
        }
        // The EOS fell off the end.
        CHECK(std::find(enc.token_ids.begin(), enc.token_ids.end(), ByteTokenizer::kEos) ==
              enc.token_ids.end());
    }
    SECTION("cutoff exactly at full length does not truncate") {
        const EncodedExample enc = encode_example(ex, static_cast<int>(full_len));
        CHECK_FALSE(enc.truncated);
        CHECK(enc.token_ids == full.token_ids);
    }
    SECTION("truncation can silence the whole output segment") {
        const EncodedExample enc = encode_example(ex, 10);
        CHECK(enc.truncated);
        CHECK(std::count(enc.loss_mask.begin(), enc.loss_mask.end(), 1) == 0);
    }
    SECTION("cutoff below 8 is rejected") {
        CHECK_THROWS_AS(encode_example(ex, 7), std::invalid_argument);
        CHECK_THROWS_AS(encode_example(ex, 0), std::invalid_argument);
        CHECK_THROWS_AS(encode_example(ex, -1), std::invalid_argument);
        CHECK_NOTHROW(encode_example(ex, 8));
    }
}

TEST_CASE("encode_prompt is the pre-output prefix of encode_example") {
    InstructionExample ex;
    ex.instruction = "Do Named Entity Recognition for the following text:";
    ex.input = "Acme bought Globex .";
    ex.output = "{\"Company\": [\"Acme\", \"Globex\"]}";
    const auto prompt = encode_prompt(ex.instruction, ex.input);
    const EncodedExample enc = encode_example(ex, 400);

    REQUIRE(prompt.size() < enc.token_ids.size());
    for (size_t i = 0; i < prompt.size(); ++i) CHECK(prompt[i] == enc.token_ids[i]);
    CHECK(prompt.back() == ByteTokenizer::kSepOutput);
    CHECK(prompt.front() == ByteTokenizer::kBos);
    // Exactly one SEP_OUTPUT, at the end.
    CHECK(std::count(prompt.begin(), prompt.end(), ByteTokenizer::kSepOutput) == 1);
}

TEST_CASE("tokenizer manifest pins the contract") {
    const auto j = tokenizer_manifest();
    CHECK(j["vocab_size"] == 261);
    CHECK(j["bos_id"] == 256);
    CHECK(j["eos_id"] == 257);
    CHECK(j["pad_id"] == 258);
    CHECK(j["sep_instr_id"] == 259);
    CHECK(j["sep_output_id"] == 260);
}
