#pragma once

#include <array>
#include <cstdio>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "loft/corpus.hpp"
#include "loft/entity.hpp"
#include "loft/model.hpp"
#include "loft/tokenizer.hpp"

namespace loft {

struct TypeCounts {
    long tp = 0;
    long fp = 0;
    long fn = 0;
    long total() const { return tp + fp + fn; }
};

struct MatchCounts {
    std::array<TypeCounts, kNumEntityTypes> per_type{};

    long tp() const { return sum(&TypeCounts::tp); }
    long fp() const { return sum(&TypeCounts::fp); }
    long fn() const { return sum(&TypeCounts::fn); }

    MatchCounts& operator+=(const MatchCounts& o) {
        for (size_t i = 0; i < kNumEntityTypes; ++i) {
            per_type[i].tp += o.per_type[i].tp;
            per_type[i].fp += o.per_type[i].fp;
            per_type[i].fn += o.per_type[i].fn;
        }
        return *this;
    }

private:
    long sum(long TypeCounts::* field) const {
        long s = 0;
        for (const auto& c : per_type) s += c.*field;
        return s;
    }
};

// Exact surface-string matching, whitespace-normalized and case-sensitive,
// with multiset semantics: per distinct string, tp takes min(gold, pred).
inline MatchCounts match_example(const EntityMap& gold, const EntityMap& pred) {
    MatchCounts out;
    for (EntityType type : kAllEntityTypes) {
        std::map<std::string, long> gold_counts, pred_counts;
        for (const auto& s : entities_of(gold, type)) ++gold_counts[normalize_whitespace(s)];
        for (const auto& s : entities_of(pred, type)) ++pred_counts[normalize_whitespace(s)];
        long tp = 0, gold_total = 0, pred_total = 0;
        for (const auto& [str, n] : gold_counts) {
            gold_total += n;
            auto it = pred_counts.find(str);
            if (it != pred_counts.end()) tp += std::min(n, it->second);
        }
        for (const auto& [str, n] : pred_counts) pred_total += n;
        auto& c = out.per_type[static_cast<size_t>(type)];
        c.tp = tp;
        c.fp = pred_total - tp;
        c.fn = gold_total - tp;
    }
    return out;
}

struct Metric {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

// Zero denominators yield 0 so every metric is total.
inline Metric metric_from_counts(long tp, long fp, long fn) {
    Metric m;
    m.precision = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    m.recall = (tp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    m.f1 = (m.precision + m.recall) > 0.0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    return m;
}

struct EvalReport {
    MatchCounts counts;
    Metric micro;
    Metric macro;  // unweighted mean over active types
    std::array<Metric, kNumEntityTypes> per_type{};
    // A type is active (included in the macro mean) when it has at least one
    // gold or predicted mention overall.
    std::array<bool, kNumEntityTypes> active{};
    int active_types = 0;
};

inline EvalReport aggregate(std::span<const MatchCounts> examples) {
    EvalReport r;
    for (const auto& m : examples) r.counts += m;
    r.micro = metric_from_counts(r.counts.tp(), r.counts.fp(), r.counts.fn());
    double psum = 0, rsum = 0, fsum = 0;
    for (size_t i = 0; i < kNumEntityTypes; ++i) {
        const auto& c = r.counts.per_type[i];
        r.per_type[i] = metric_from_counts(c.tp, c.fp, c.fn);
        r.active[i] = c.total() > 0;
        if (r.active[i]) {
            ++r.active_types;
            psum += r.per_type[i].precision;
            rsum += r.per_type[i].recall;
            fsum += r.per_type[i].f1;
        }
    }
    if (r.active_types > 0) {
        r.macro.precision = psum / r.active_types;
        r.macro.recall = rsum / r.active_types;
        r.macro.f1 = fsum / r.active_types;
    }
    return r;
}

struct ExampleRecord {
    std::string id;
    std::string generation;  // raw decoded text produced after the output separator
    EntityMap parsed;        // empty map when flagged
    bool parse_ok = false;
    MatchCounts counts;
};

struct EvalOptions {
    int cutoff = 400;          // prompt budget (matches the training cutoff)
    int max_new_tokens = 160;  // decoding budget per example
};

struct EvalOutcome {
    EvalReport report;
    std::vector<ExampleRecord> records;
};

// Greedy-decode every test sentence, parse the generated dictionary, and
// score against gold. Parse failures and exhausted decoding budgets score as
// empty predictions (flagged), never as skipped examples.
template <typename S>
inline EvalOutcome evaluate_model(const Transformer<S>& model,
                                  const std::vector<AnnotatedSentence>& test,
                                  const EvalOptions& opt = {}, std::ostream* log = nullptr) {
    if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
    EvalOutcome out;
    out.records.reserve(test.size());
    std::vector<MatchCounts> all;
    all.reserve(test.size());
    const int max_seq = model.config().max_seq_len;

    for (size_t i = 0; i < test.size(); ++i) {
        const auto& sent = test[i];
        ExampleRecord rec;
        rec.id = sent.id;

        std::vector<int> prompt = encode_prompt(kInstructionTemplate, sent.text);
        if (static_cast<int>(prompt.size()) > opt.cutoff)
            prompt.resize(static_cast<size_t>(opt.cutoff));
        const int budget =
            std::min(opt.max_new_tokens, max_seq - static_cast<int>(prompt.size()));

        bool finished = false;
        if (budget > 0) {
            const std::vector<int> seq =
                model.generate(prompt, budget, ByteTokenizer::kEos);
            const std::vector<int> gen(seq.begin() + static_cast<long>(prompt.size()), seq.end());
            finished = !gen.empty() && gen.back() == ByteTokenizer::kEos;
            rec.generation = ByteTokenizer::decode(gen);
        }

        if (finished) {
            OutputParse parse = parse_output(rec.generation);
            rec.parse_ok = parse.ok;
            if (parse.ok) rec.parsed = std::move(parse.entities);
        }
        // !finished (budget exhausted) or failed parse: flagged, scored empty.

        rec.counts = match_example(sent.entities, rec.parsed);
        all.push_back(rec.counts);
        if (log)
            *log << "eval " << (i + 1) << "/" << test.size() << " id=" << rec.id
                 << (rec.parse_ok ? "" : " [flagged]") << "\n";
        out.records.push_back(std::move(rec));
    }
    out.report = aggregate(all);
    return out;
}

inline nlohmann::ordered_json entity_map_json(const EntityMap& m) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (EntityType type : kAllEntityTypes) {
        const auto& v = entities_of(m, type);
        if (v.empty())
            j[std::string(entity_type_name(type))] = nullptr;
        else
            j[std::string(entity_type_name(type))] = v;
    }
    return j;
}

inline std::string example_records_jsonl(const std::vector<ExampleRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        nlohmann::ordered_json j;
        j["id"] = r.id;
        j["generation"] = r.generation;
        j["parsed"] = entity_map_json(r.parsed);
        j["parse_ok"] = r.parse_ok;
        j["tp"] = r.counts.tp();
        j["fp"] = r.counts.fp();
        j["fn"] = r.counts.fn();
        out += j.dump();
        out += '\n';
    }
    return out;
}

inline nlohmann::ordered_json metric_json(const Metric& m) {
    return nlohmann::ordered_json{{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}};
}

inline nlohmann::ordered_json report_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["micro"] = metric_json(r.micro);
    j["macro"] = metric_json(r.macro);
    j["active_types"] = r.active_types;
    nlohmann::ordered_json types = nlohmann::ordered_json::object();
    for (EntityType t : kAllEntityTypes) {
        const size_t i = static_cast<size_t>(t);
        nlohmann::ordered_json tj = metric_json(r.per_type[i]);
        tj["tp"] = r.counts.per_type[i].tp;
        tj["fp"] = r.counts.per_type[i].fp;
        tj["fn"] = r.counts.per_type[i].fn;
        tj["in_macro"] = r.active[i];
        types[std::string(entity_type_name(t))] = tj;
    }
    j["per_type"] = types;
    j["counts"] = {{"tp", r.counts.tp()}, {"fp", r.counts.fp()}, {"fn", r.counts.fn()}};
    return j;
}

// The data behind per-model metric and per-type comparison plots: one row per
// named report.
inline std::string metrics_summary_csv(
    const std::vector<std::pair<std::string, EvalReport>>& reports) {
    std::string out = "model,precision,recall,micro_f1,macro_f1\n";
    char buf[192];
    for (const auto& [name, r] : reports) {
        std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g,%.9g,%.9g\n", name.c_str(),
                      r.micro.precision, r.micro.recall, r.micro.f1, r.macro.f1);
        out += buf;
    }
    return out;
}

inline std::string per_type_f1_csv(
    const std::vector<std::pair<std::string, EvalReport>>& reports) {
    std::string out = "model";
    for (EntityType t : kAllEntityTypes) {
        out += ',';
        out += entity_type_name(t);
    }
    out += '\n';
    char buf[32];
    for (const auto& [name, r] : reports) {
        out += name;
        for (size_t i = 0; i < kNumEntityTypes; ++i) {
            std::snprintf(buf, sizeof(buf), ",%.9g", r.per_type[i].f1);
            out += buf;
        }
        out += '\n';
    }
    return out;
}

inline void emit_metric_figures(const std::vector<std::pair<std::string, EvalReport>>& reports,
                                const std::string& out_dir) {
    if (reports.empty()) throw std::invalid_argument("emit_metric_figures: no reports");
    write_file_atomic(out_dir + "/metrics_summary.csv", metrics_summary_csv(reports));
    write_file_atomic(out_dir + "/per_type_f1.csv", per_type_f1_csv(reports));
}

}  // namespace loft
