#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "loft/corpus.hpp"
#include "loft/entity.hpp"
#include "loft/synthetic.hpp"
#include "test_util.hpp"

using namespace loft;
using testutil::TempDir;

namespace {

// The worked template example: one financial sentence and its entity map
// (three Company mentions, one Date, five empty types).
const char* kRefSentence =
    "On January 11 , 2012 , Regions entered into a stock purchase agreement to sell Morgan "
    "Keegan and related affiliates to Raymond James Financial , Inc. (Raymond James) .";

const char* kRefReprOutput =
    "{'Company': ['Morgan Keegan', 'Raymond James Financial , Inc. (Raymond James)', 'Regions'], "
    "'Date': ['January 11 , 2012'], 'Location': None, 'Money': None, 'Person': None, 'Product': "
    "None, 'Quantity': None}";

EntityMap reference_map() {
    EntityMap m;
    entities_of(m, EntityType::kCompany) = {
        "Morgan Keegan", "Raymond James Financial , Inc. (Raymond James)", "Regions"};
    entities_of(m, EntityType::kDate) = {"January 11 , 2012"};
    return m;
}

AnnotatedSentence reference_sentence() {
    AnnotatedSentence s;
    s.id = "ref-1";
    s.text = kRefSentence;
    s.entities = reference_map();
    return s;
}

std::vector<std::string> nasty_vocab() {
    return {
        "Acme Corp",
        "O'Brien & Sons",
        "say \"hi\"",
        "back\\slash",
        "tab\there",
        "new\nline",
        "Ünïcödé ÄG",
        "日本銀行",
        "emoji 🙂 inc",
        "None",
        "null",
        "{brace}",
        "[bracket]",
        "comma, inc",
        "trailing space ",
        " leading",
        "a:b",
        "'quoted'",
    };
}

}  // namespace

TEST_CASE("instruction template is byte-exact") {
    CHECK(std::string(kInstructionTemplate) ==
          "Do Named Entity Recognition for the following text:");
    const auto ex = to_instruction(reference_sentence());
    CHECK(ex.instruction == kInstructionTemplate);
    CHECK(ex.input == kRefSentence);  // input byte-equals source text
}

TEST_CASE("reference repr output parses to the reference map") {
    const OutputParse p = parse_output(kRefReprOutput);
    REQUIRE(p.ok);
    CHECK(p.entities == reference_map());
    CHECK(p.extra_keys.empty());
    CHECK(total_mentions(p.entities) == 4);
}

TEST_CASE("canonical serialization round-trips the reference map") {
    const std::string canon = serialize_output(reference_map());
    // Canonical dialect: double quotes, null, fixed key order.
    CHECK(canon.find("\"Company\": [\"Morgan Keegan\"") != std::string::npos);
    CHECK(canon.find("\"Location\": null") != std::string::npos);
    CHECK(canon.find('\'') == std::string::npos);
    const OutputParse p = parse_output(canon);
    REQUIRE(p.ok);
    CHECK(p.entities == reference_map());
}

TEST_CASE("serialize/parse identity on random maps") {
    Rng rng(101);
    const auto vocab = nasty_vocab();
    for (int trial = 0; trial < 1000; ++trial) {
        const EntityMap m = testutil::random_entity_map(rng, vocab, 3);
        const OutputParse p = parse_output(serialize_output(m));
        REQUIRE(p.ok);
        REQUIRE(p.entities == m);
    }
}

TEST_CASE("repr dialect parses identically to canonical") {
    Rng rng(102);
    // Repr rendering escapes only quotes/backslashes, so control characters
    // stay out of this vocabulary (covered by the canonical round-trip).
    const std::vector<std::string> vocab = {"Acme Corp", "O'Brien & Sons", "back\\slash",
                                            "None",      "{brace}",        "comma, inc",
                                            "'quoted'",  "Ünïcödé ÄG"};
    std::vector<int> order = {0, 1, 2, 3, 4, 5, 6};
    for (int trial = 0; trial < 300; ++trial) {
        const EntityMap m = testutil::random_entity_map(rng, vocab, 3);
        rng.shuffle(order);  // key order must not matter
        const OutputParse canon = parse_output(serialize_output(m));
        const OutputParse repr = parse_output(testutil::repr_render(m, order));
        REQUIRE(canon.ok);
        REQUIRE(repr.ok);
        REQUIRE(canon.entities == repr.entities);
    }
}

TEST_CASE("parser defaults missing keys and records unknown ones") {
    SECTION("missing keys become empty") {
        const OutputParse p = parse_output("{\"Company\": [\"Acme\"]}");
        REQUIRE(p.ok);
        CHECK(entities_of(p.entities, EntityType::kCompany) == std::vector<std::string>{"Acme"});
        CHECK(entities_of(p.entities, EntityType::kDate).empty());
    }
    SECTION("unknown keys are recorded, not fatal") {
        const OutputParse p = parse_output("{'Company': ['Acme'], 'Ticker': ['ACME']}");
        REQUIRE(p.ok);
        REQUIRE(p.extra_keys == std::vector<std::string>{"Ticker"});
    }
    SECTION("bare string value becomes a singleton list") {
        const OutputParse p = parse_output("{'Money': '$5'}");
        REQUIRE(p.ok);
        CHECK(entities_of(p.entities, EntityType::kMoney) == std::vector<std::string>{"$5"});
    }
    SECTION("chatter around the dict is ignored") {
        const OutputParse p = parse_output("Sure! {\"Date\": [\"2019\"]} Hope that helps.");
        REQUIRE(p.ok);
        CHECK(entities_of(p.entities, EntityType::kDate) == std::vector<std::string>{"2019"});
    }
    SECTION("empty list equals null") {
        const OutputParse a = parse_output("{'Person': []}");
        const OutputParse b = parse_output("{'Person': None}");
        REQUIRE(a.ok);
        REQUIRE(b.ok);
        CHECK(a.entities == b.entities);
    }
}

TEST_CASE("parser rejects structural garbage with a located failure") {
    for (const char* bad : {
             "no dict here",
             "",
             "{'Company': ",
             "{'Company' ['Acme']}",
             "{'Company': [}",
             "{'Company': ['Acme'",
             "{'Company': [3]}",
             "{3: ['Acme']}",
         }) {
        const OutputParse p = parse_output(bad);
        INFO("input: " << bad);
        CHECK_FALSE(p.ok);
        CHECK_FALSE(p.error.empty());
        CHECK(p.entities == EntityMap{});  // failure leaves an empty map
    }
}

TEST_CASE("escape handling covers unicode and surrogate pairs") {
    const OutputParse p =
        parse_output("{\"Company\": [\"aA\\n\\t\\\"q\\\"\", \"\\uD83D\\uDE42\", \"caf\\u00E9\"]}");
    REQUIRE(p.ok);
    const auto& v = entities_of(p.entities, EntityType::kCompany);
    REQUIRE(v.size() == 3);
    CHECK(v[0] == "aA\n\t\"q\"");
    CHECK(v[1] == "\xF0\x9F\x99\x82");  // U+1F642 via surrogate pair
    CHECK(v[2] == "caf\xC3\xA9");
}

TEST_CASE("corpus JSONL round-trip") {
    TempDir tmp("tmp_corpus_roundtrip");
    Rng rng(103);
    const auto vocab = nasty_vocab();
    std::vector<AnnotatedSentence> corpus;
    for (int i = 0; i < 40; ++i) {
        AnnotatedSentence s;
        s.id = "s" + std::to_string(i);
        s.text = "Sentence " + std::to_string(i) + " with Ünïcödé.";
        s.entities = testutil::random_entity_map(rng, vocab, 2);
        // Corpus mentions must be non-empty after trimming.
        for (EntityType t : kAllEntityTypes) {
            auto& m = entities_of(s.entities, t);
            m.erase(std::remove_if(m.begin(), m.end(),
                                   [](const std::string& x) { return trim(x).empty(); }),
                    m.end());
        }
        corpus.push_back(std::move(s));
    }
    corpus.push_back(reference_sentence());

    const std::string path = tmp.sub("corpus.jsonl");
    save_corpus(corpus, path);
    const auto loaded = load_corpus(path);
    REQUIRE(loaded.size() == corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) {
        CHECK(loaded[i].id == corpus[i].id);
        CHECK(loaded[i].text == corpus[i].text);
        CHECK(loaded[i].entities == corpus[i].entities);
    }
}

TEST_CASE("load_corpus reports malformed input with line numbers") {
    TempDir tmp("tmp_corpus_errors");
    auto write_and_load = [&](const std::string& content) {
        const std::string path = tmp.sub("bad.jsonl");
        std::ofstream(path) << content;
        return path;
    };

    SECTION("missing file") {
        CHECK_THROWS_AS(load_corpus(tmp.sub("absent.jsonl")), std::exception);
    }
    SECTION("invalid JSON names the line") {
        const auto path =
            write_and_load("{\"id\":\"a\",\"text\":\"x\",\"entities\":{}}\n{oops\n");
        CHECK_THROWS_WITH(load_corpus(path), Catch::Matchers::ContainsSubstring("line 2"));
    }
    SECTION("missing id") {
        const auto path = write_and_load("{\"text\":\"x\",\"entities\":{}}\n");
        CHECK_THROWS_WITH(load_corpus(path), Catch::Matchers::ContainsSubstring("line 1"));
    }
    SECTION("unknown entity type key") {
        const auto path = write_and_load(
            "{\"id\":\"a\",\"text\":\"x\",\"entities\":{\"Ticker\":[\"T\"]}}\n");
        CHECK_THROWS_WITH(load_corpus(path), Catch::Matchers::ContainsSubstring("Ticker"));
    }
    SECTION("entity value neither list nor null") {
        const auto path = write_and_load(
            "{\"id\":\"a\",\"text\":\"x\",\"entities\":{\"Company\":7}}\n");
        CHECK_THROWS_AS(load_corpus(path), CorpusError);
    }
    SECTION("non-string mention") {
        const auto path = write_and_load(
            "{\"id\":\"a\",\"text\":\"x\",\"entities\":{\"Company\":[7]}}\n");
        CHECK_THROWS_AS(load_corpus(path), CorpusError);
    }
    SECTION("empty mention after trim") {
        const auto path = write_and_load(
            "{\"id\":\"a\",\"text\":\"x\",\"entities\":{\"Company\":[\"  \"]}}\n");
        CHECK_THROWS_AS(load_corpus(path), CorpusError);
    }
    SECTION("blank lines are skipped") {
        const auto path = write_and_load(
            "\n{\"id\":\"a\",\"text\":\"x\",\"entities\":{}}\n\n   \n");
        CHECK(load_corpus(path).size() == 1);
    }
    SECTION("null entities object is allowed per-type") {
        const auto path = write_and_load(
            "{\"id\":\"a\",\"text\":\"x\",\"entities\":{\"Company\":null}}\n");
        const auto c = load_corpus(path);
        REQUIRE(c.size() == 1);
        CHECK(entities_of(c[0].entities, EntityType::kCompany).empty());
    }
}

TEST_CASE("instruction JSONL round-trip") {
    TempDir tmp("tmp_instr_roundtrip");
    std::vector<InstructionExample> exs;
    exs.push_back(to_instruction(reference_sentence()));
    exs.push_back({"инструкция", "input \"two\"\nlines", "{}"});
    const std::string path = tmp.sub("instr.jsonl");
    save_instruction_jsonl(exs, path);
    const auto back = load_instruction_jsonl(path);
    REQUIRE(back.size() == exs.size());
    for (size_t i = 0; i < exs.size(); ++i) {
        CHECK(back[i].instruction == exs[i].instruction);
        CHECK(back[i].input == exs[i].input);
        CHECK(back[i].output == exs[i].output);
    }
}

TEST_CASE("compute_stats hand cases") {
    SECTION("empty corpus is all zeros") {
        const DatasetStats st = compute_stats({});
        CHECK(st.total_samples == 0);
        CHECK(st.samples_with_entities == 0);
        CHECK(st.samples_without_entities == 0);
        CHECK(st.avg_text_length_chars == 0.0);
        CHECK(st.avg_entities_per_sample == 0.0);
        for (size_t c : st.per_type_sample_counts) CHECK(c == 0);
    }
    SECTION("two sentences, lengths 10 and 20, entity counts 0 and 2") {
        AnnotatedSentence a;
        a.id = "a";
        a.text = "0123456789";  // 10 chars
        AnnotatedSentence b;
        b.id = "b";
        b.text = "01234567890123456789";  // 20 chars
        entities_of(b.entities, EntityType::kCompany) = {"X", "Y"};
        const DatasetStats st = compute_stats({a, b});
        CHECK(st.total_samples == 2);
        CHECK(st.samples_with_entities == 1);
        CHECK(st.samples_without_entities == 1);
        CHECK(st.avg_text_length_chars == Catch::Approx(15.0));
        CHECK(st.avg_entities_per_sample == Catch::Approx(1.0));
        // Sample counts, not mention counts: b counts once for Company.
        CHECK(st.per_type_sample_counts[static_cast<size_t>(EntityType::kCompany)] == 1);
    }
    SECTION("text length counts codepoints, not bytes") {
        AnnotatedSentence a;
        a.id = "a";
        a.text = "héé";  // 3 codepoints, 5 bytes
        const DatasetStats st = compute_stats({a});
        CHECK(st.avg_text_length_chars == Catch::Approx(3.0));
    }
}

TEST_CASE("compute_stats is permutation-invariant and self-consistent") {
    const auto corpus = generate_synthetic_corpus(60, 11);
    auto shuffled = corpus;
    Rng rng(12);
    std::vector<size_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (size_t i = 0; i < order.size(); ++i) shuffled[i] = corpus[order[i]];

    const DatasetStats a = compute_stats(corpus);
    const DatasetStats b = compute_stats(shuffled);
    CHECK(a.total_samples == b.total_samples);
    CHECK(a.samples_with_entities == b.samples_with_entities);
    CHECK(a.avg_text_length_chars == Catch::Approx(b.avg_text_length_chars));
    CHECK(a.avg_entities_per_sample == Catch::Approx(b.avg_entities_per_sample));
    CHECK(a.per_type_sample_counts == b.per_type_sample_counts);
    CHECK(a.samples_with_entities + a.samples_without_entities == a.total_samples);
}

TEST_CASE("distribution CSV schema") {
    AnnotatedSentence s;
    s.id = "a";
    s.text = "t";
    entities_of(s.entities, EntityType::kCompany) = {"X"};
    const DatasetStats st = compute_stats({s});
    const std::string csv = distribution_csv(st);
    CHECK(csv.rfind("type,count\n", 0) == 0);
    CHECK(csv.find("Company,1\n") != std::string::npos);
    CHECK(csv.find("Quantity,0\n") != std::string::npos);
    // 1 header + 7 type rows
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 8);
    // Canonical order: Company first.
    CHECK(csv.find("Company") < csv.find("Date"));

    TempDir tmp("tmp_distribution");
    emit_distribution(st, tmp.sub("distribution.csv"));
    CHECK(read_file(tmp.sub("distribution.csv")) == csv);
}

TEST_CASE("synthetic generator is seeded and well-formed") {
    const auto a = generate_synthetic_corpus(50, 7);
    const auto b = generate_synthetic_corpus(50, 7);
    const auto c = generate_synthetic_corpus(50, 8);
    REQUIRE(a.size() == 50);
    // Determinism, and different seeds actually differ somewhere.
    bool same_as_b = a.size() == b.size();
    for (size_t i = 0; i < a.size() && same_as_b; ++i)
        same_as_b = a[i].text == b[i].text && a[i].entities == b[i].entities;
    CHECK(same_as_b);
    bool differs_from_c = false;
    for (size_t i = 0; i < a.size() && !differs_from_c; ++i)
        differs_from_c = a[i].text != c[i].text;
    CHECK(differs_from_c);

    // Every gold mention appears verbatim in its sentence; ids are unique.
    std::set<std::string> ids;
    size_t with_entities = 0;
    for (const auto& s : a) {
        CHECK(ids.insert(s.id).second);
        if (total_mentions(s.entities) > 0) ++with_entities;
        for (EntityType t : kAllEntityTypes)
            for (const auto& m : entities_of(s.entities, t))
                CHECK(s.text.find(m) != std::string::npos);
    }
    // Both populated and entity-free sentences occur.
    CHECK(with_entities > 0);
    CHECK(with_entities < a.size());
}
