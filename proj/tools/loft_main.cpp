// loft — desk-scale LoRA instruction fine-tuning for financial NER.
//
// Subcommands: gen-synthetic, stats, build-dataset, train, evaluate.
// Exit codes: 0 success, 2 usage/input error, 3 numeric failure.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "loft/loft.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitNumeric = 3;

// ---------------------------------------------------------------------------
// Run manifests

class ManifestBuilder {
public:
    explicit ManifestBuilder(std::string command) : start_(clock_t::now()) {
        j_["command"] = std::move(command);
        j_["tool_version"] = std::string(loft::kToolVersion);
        j_["config"] = ordered_json::object();
        j_["inputs"] = ordered_json::object();
        j_["outputs"] = ordered_json::array();
    }

    void set_config(ordered_json cfg) { j_["config"] = std::move(cfg); }

    void add_input(const std::string& path) {
        j_["inputs"][path] = "fnv1a64:" + loft::to_hex(loft::file_fingerprint(path));
    }

    void add_output(const std::string& path) { j_["outputs"].push_back(path); }

    // Written last, atomically, so a manifest marks a completed run.
    void write(const std::string& dir) {
        const double secs =
            std::chrono::duration<double>(clock_t::now() - start_).count();
        j_["wall_clock_seconds"] = secs;
        loft::write_file_atomic(dir + "/manifest.json", j_.dump(2) + "\n");
    }

private:
    using clock_t = std::chrono::steady_clock;
    clock_t::time_point start_;
    ordered_json j_;
};

// ---------------------------------------------------------------------------
// JSON config plumbing (flags win over config-file values)

json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    json j;
    try {
        j = json::parse(loft::read_file(path));
    } catch (const json::exception& e) {
        throw std::invalid_argument("config " + path + ": " + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("config " + path + ": not a JSON object");
    return j;
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("config key '") + key + "': " + e.what());
    }
}

loft::ModelConfig model_config_from(const json& j) {
    loft::ModelConfig cfg;
    cfg.vocab_size = loft::ByteTokenizer::kVocabSize;
    cfg.d_model = get_or(j, "d_model", cfg.d_model);
    cfg.n_layers = get_or(j, "n_layers", cfg.n_layers);
    cfg.n_heads = get_or(j, "n_heads", cfg.n_heads);
    cfg.n_kv_heads = get_or(j, "n_kv_heads", cfg.n_kv_heads);
    cfg.d_ff = get_or(j, "d_ff", cfg.d_ff);
    cfg.max_seq_len = get_or(j, "max_seq_len", cfg.max_seq_len);
    cfg.rope_base = get_or(j, "rope_base", cfg.rope_base);
    return cfg;
}

loft::LoraConfig lora_config_from(const json& j) {
    loft::LoraConfig cfg;
    cfg.r = get_or(j, "r", cfg.r);
    cfg.alpha = get_or(j, "alpha", cfg.alpha);
    cfg.dropout = get_or(j, "dropout", cfg.dropout);
    if (j.contains("targets")) {
        cfg.targets = {false, false, false, false};
        for (const auto& t : j.at("targets")) {
            const std::string name = t.get<std::string>();
            bool known = false;
            for (size_t i = 0; i < loft::kLoraTargetNames.size(); ++i)
                if (name == loft::kLoraTargetNames[i]) {
                    cfg.targets[i] = true;
                    known = true;
                }
            if (!known) throw std::invalid_argument("config lora.targets: unknown target '" + name + "'");
        }
    }
    return cfg;
}

loft::TrainConfig train_config_from(const json& j) {
    loft::TrainConfig cfg;
    cfg.learning_rate = get_or(j, "learning_rate", cfg.learning_rate);
    cfg.batch_size = get_or(j, "batch_size", cfg.batch_size);
    cfg.grad_accum = get_or(j, "grad_accum", cfg.grad_accum);
    cfg.epochs = get_or(j, "epochs", cfg.epochs);
    cfg.adam_beta1 = get_or(j, "adam_beta1", cfg.adam_beta1);
    cfg.adam_beta2 = get_or(j, "adam_beta2", cfg.adam_beta2);
    cfg.adam_eps = get_or(j, "adam_eps", cfg.adam_eps);
    cfg.weight_decay = get_or(j, "weight_decay", cfg.weight_decay);
    cfg.cutoff = get_or(j, "cutoff", cfg.cutoff);
    return cfg;
}

ordered_json model_config_echo(const loft::ModelConfig& m) {
    return ordered_json{{"vocab_size", m.vocab_size}, {"d_model", m.d_model},
                        {"n_layers", m.n_layers},     {"n_heads", m.n_heads},
                        {"n_kv_heads", m.n_kv_heads}, {"d_ff", m.d_ff},
                        {"max_seq_len", m.max_seq_len}, {"rope_base", m.rope_base}};
}

ordered_json lora_config_echo(const loft::LoraConfig& l) {
    ordered_json targets = ordered_json::array();
    for (size_t i = 0; i < l.targets.size(); ++i)
        if (l.targets[i]) targets.push_back(std::string(loft::kLoraTargetNames[i]));
    return ordered_json{{"r", l.r}, {"alpha", l.alpha}, {"dropout", l.dropout}, {"targets", targets}};
}

ordered_json train_config_echo(const loft::TrainConfig& t, uint64_t seed) {
    return ordered_json{{"learning_rate", t.learning_rate},
                        {"batch_size", t.batch_size},
                        {"grad_accum", t.grad_accum},
                        {"epochs", t.epochs},
                        {"adam_beta1", t.adam_beta1},
                        {"adam_beta2", t.adam_beta2},
                        {"adam_eps", t.adam_eps},
                        {"weight_decay", t.weight_decay},
                        {"cutoff", t.cutoff},
                        {"seed", seed}};
}

// ---------------------------------------------------------------------------
// gen-synthetic

struct GenSynthArgs {
    std::string out;
    size_t count = 50;
    uint64_t seed = 7;
};

int cmd_gen_synthetic(const GenSynthArgs& a) {
    fs::create_directories(a.out);
    const auto corpus = loft::generate_synthetic_corpus(a.count, a.seed);
    const std::string path = a.out + "/corpus.jsonl";
    loft::save_corpus(corpus, path);

    ManifestBuilder mb("gen-synthetic");
    mb.set_config(ordered_json{{"count", a.count}, {"seed", a.seed}});
    mb.add_output("corpus.jsonl");
    mb.write(a.out);
    std::cout << "wrote " << corpus.size() << " sentences to " << path << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// stats

struct StatsArgs {
    std::string corpus;
    std::string out;  // optional
};

int cmd_stats(const StatsArgs& a) {
    const auto corpus = loft::load_corpus(a.corpus);
    const loft::DatasetStats st = loft::compute_stats(corpus);

    std::cout << "total samples            " << st.total_samples << "\n";
    std::cout << "samples with entities    " << st.samples_with_entities << "\n";
    std::cout << "samples without entities " << st.samples_without_entities << "\n";
    std::cout << "avg text length (chars)  " << st.avg_text_length_chars << "\n";
    std::cout << "avg entities per sample  " << st.avg_entities_per_sample << "\n";
    std::cout << "\n" << loft::distribution_csv(st);

    if (!a.out.empty()) {
        fs::create_directories(a.out);
        loft::emit_distribution(st, a.out + "/distribution.csv");
        ManifestBuilder mb("stats");
        mb.set_config(ordered_json{{"corpus", a.corpus}});
        mb.add_input(a.corpus);
        mb.add_output("distribution.csv");
        mb.write(a.out);
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// build-dataset

struct BuildArgs {
    std::string corpus;
    std::string out;
    double train_ratio = 0.8;
    uint64_t seed = 7;
    std::string train_ids_path;  // explicit split (both or neither)
    std::string test_ids_path;
};

std::set<std::string> read_id_file(const std::string& path) {
    std::set<std::string> ids;
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open id file " + path);
    std::string line;
    while (std::getline(in, line)) {
        const std::string id = loft::trim(line);
        if (id.empty()) continue;
        if (!ids.insert(id).second)
            throw std::invalid_argument("id file " + path + ": duplicate id '" + id + "'");
    }
    return ids;
}

int cmd_build_dataset(const BuildArgs& a) {
    if (a.train_ids_path.empty() != a.test_ids_path.empty())
        throw std::invalid_argument("--train-ids and --test-ids must be given together");
    const bool explicit_split = !a.train_ids_path.empty();
    if (!explicit_split && !(a.train_ratio > 0.0 && a.train_ratio < 1.0))
        throw std::invalid_argument("--train-ratio must lie strictly between 0 and 1");

    const auto corpus = loft::load_corpus(a.corpus);
    if (corpus.empty()) throw std::invalid_argument("corpus is empty: " + a.corpus);

    std::vector<loft::AnnotatedSentence> train, test;
    if (explicit_split) {
        const auto train_ids = read_id_file(a.train_ids_path);
        const auto test_ids = read_id_file(a.test_ids_path);
        for (const auto& id : train_ids)
            if (test_ids.count(id))
                throw std::invalid_argument("id '" + id + "' appears in both split files");
        for (const auto& s : corpus) {
            if (train_ids.count(s.id))
                train.push_back(s);
            else if (test_ids.count(s.id))
                test.push_back(s);
            else
                throw std::invalid_argument("sentence id '" + s.id + "' is in neither split file");
        }
        if (train.size() != train_ids.size() || test.size() != test_ids.size())
            throw std::invalid_argument("split files list ids missing from the corpus");
    } else {
        std::vector<size_t> order(corpus.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        loft::Rng rng(loft::Rng::derive(a.seed, 0x73706c6974ull));  // "split"
        rng.shuffle(order);
        const size_t n_train =
            static_cast<size_t>(std::llround(a.train_ratio * static_cast<double>(corpus.size())));
        for (size_t i = 0; i < order.size(); ++i)
            (i < n_train ? train : test).push_back(corpus[order[i]]);
    }

    fs::create_directories(a.out);
    std::vector<loft::InstructionExample> train_ex, test_ex;
    for (const auto& s : train) train_ex.push_back(loft::to_instruction(s));
    for (const auto& s : test) test_ex.push_back(loft::to_instruction(s));
    loft::save_instruction_jsonl(train_ex, a.out + "/train.jsonl");
    loft::save_instruction_jsonl(test_ex, a.out + "/test.jsonl");
    // Gold-annotated companions so `evaluate` can score the held-out split.
    loft::save_corpus(train, a.out + "/train_gold.jsonl");
    loft::save_corpus(test, a.out + "/test_gold.jsonl");

    ManifestBuilder mb("build-dataset");
    ordered_json cfg{{"corpus", a.corpus}};
    if (explicit_split) {
        cfg["train_ids"] = a.train_ids_path;
        cfg["test_ids"] = a.test_ids_path;
    } else {
        cfg["train_ratio"] = a.train_ratio;
        cfg["seed"] = a.seed;
    }
    mb.set_config(cfg);
    mb.add_input(a.corpus);
    for (const char* f : {"train.jsonl", "test.jsonl", "train_gold.jsonl", "test_gold.jsonl"})
        mb.add_output(f);
    mb.write(a.out);
    std::cout << "split " << corpus.size() << " sentences into " << train.size() << " train / "
              << test.size() << " test\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    std::string config_path;
    std::string corpus;
    std::string base_checkpoint;
    std::string out;
    std::optional<uint64_t> seed;
    std::optional<double> lr;
    std::optional<int> epochs, batch_size, grad_accum, cutoff;
    std::optional<int> lora_r;
    std::optional<double> lora_alpha;
};

// The training corpus may be instruction triples (from build-dataset) or an
// annotated corpus (converted on the fly); sniffed from the first record.
std::vector<loft::InstructionExample> load_training_examples(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open corpus " + path);
    std::string first;
    while (std::getline(in, first) && loft::trim(first).empty()) {
    }
    bool is_triples = false;
    if (!loft::trim(first).empty()) {
        json j = json::parse(first, nullptr, false);
        is_triples = j.is_object() && j.contains("instruction") && !j.contains("entities");
    }
    if (is_triples) return loft::load_instruction_jsonl(path);
    const auto corpus = loft::load_corpus(path);
    std::vector<loft::InstructionExample> out;
    out.reserve(corpus.size());
    for (const auto& s : corpus) out.push_back(loft::to_instruction(s));
    return out;
}

int cmd_train(const TrainArgs& a) {
    const json cfg_file = load_config_file(a.config_path);

    const std::string corpus_path =
        !a.corpus.empty() ? a.corpus : get_or<std::string>(cfg_file, "corpus", "");
    const std::string out_dir = !a.out.empty() ? a.out : get_or<std::string>(cfg_file, "out", "");
    const std::string base_dir = !a.base_checkpoint.empty()
                                     ? a.base_checkpoint
                                     : get_or<std::string>(cfg_file, "base_checkpoint", "");
    if (corpus_path.empty()) throw std::invalid_argument("no training corpus given (--corpus or config)");
    if (out_dir.empty()) throw std::invalid_argument("no output directory given (--out or config)");

    const uint64_t seed =
        a.seed ? *a.seed : get_or<uint64_t>(cfg_file, "seed", 42);
    loft::TrainConfig tcfg = train_config_from(cfg_file.value("train", json::object()));
    tcfg.seed = seed;
    if (a.lr) tcfg.learning_rate = *a.lr;
    if (a.epochs) tcfg.epochs = *a.epochs;
    if (a.batch_size) tcfg.batch_size = *a.batch_size;
    if (a.grad_accum) tcfg.grad_accum = *a.grad_accum;
    if (a.cutoff) tcfg.cutoff = *a.cutoff;
    tcfg.validate();

    loft::LoraConfig lcfg = lora_config_from(cfg_file.value("lora", json::object()));
    if (a.lora_r) lcfg.r = *a.lora_r;
    if (a.lora_alpha) lcfg.alpha = *a.lora_alpha;
    lcfg.validate();

    const auto examples = load_training_examples(corpus_path);
    if (examples.empty()) throw std::invalid_argument("training corpus is empty: " + corpus_path);
    std::vector<loft::EncodedExample> encoded;
    encoded.reserve(examples.size());
    size_t truncated = 0;
    for (const auto& ex : examples) {
        encoded.push_back(loft::encode_example(ex, tcfg.cutoff));
        if (encoded.back().truncated) ++truncated;
    }
    if (truncated > 0)
        std::cout << "note: " << truncated << "/" << examples.size()
                  << " examples right-truncated to cutoff " << tcfg.cutoff << "\n";

    // Base model: load a shared checkpoint, or initialize one and save it
    // beside the run so the adapter always has a verifiable base.
    fs::create_directories(out_dir);
    loft::ModelConfig mcfg;
    loft::TransformerParams<float> params;
    uint64_t base_hash = 0;
    std::string base_ref;
    if (!base_dir.empty()) {
        auto loaded = loft::load_model_checkpoint(base_dir);
        mcfg = loaded.config;
        params = std::move(loaded.params);
        base_hash = loaded.blob_hash;
        base_ref = base_dir;
    } else {
        mcfg = model_config_from(cfg_file.value("model", json::object()));
        auto model = loft::Transformer<float>::init(mcfg, seed);
        base_hash = loft::save_model_checkpoint(out_dir + "/base", mcfg, model.params());
        params = std::move(model.params());
        base_ref = out_dir + "/base";
    }
    if (tcfg.cutoff > mcfg.max_seq_len)
        throw std::invalid_argument("cutoff exceeds the model's max_seq_len");

    loft::Transformer<float> model(mcfg, std::move(params));
    model.wrap_with_lora(lcfg, seed);
    std::cout << "trainable parameters: " << loft::trainable_parameter_count(model.params())
              << " / " << loft::total_parameter_count(model.params()) << " total\n";

    const auto result = loft::train(model, encoded, tcfg, &std::cout);
    loft::emit_loss_curve(result.curve, out_dir + "/loss.csv");
    loft::save_adapter_checkpoint(out_dir + "/adapter", lcfg, model.params(), base_hash);

    ManifestBuilder mb("train");
    ordered_json cfg_echo;
    cfg_echo["corpus"] = corpus_path;
    cfg_echo["base_checkpoint"] = base_ref;
    cfg_echo["model"] = model_config_echo(mcfg);
    cfg_echo["lora"] = lora_config_echo(lcfg);
    cfg_echo["train"] = train_config_echo(tcfg, seed);
    mb.set_config(cfg_echo);
    mb.add_input(corpus_path);
    if (base_dir.empty())
        mb.add_output("base/");
    mb.add_output("adapter/");
    mb.add_output("loss.csv");
    mb.write(out_dir);

    const double first = result.curve.front().loss;
    const double last = result.curve.back().loss;
    std::cout << "done: " << result.optimizer_steps << " optimizer steps, loss " << first
              << " -> " << last << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvalArgs {
    std::string base;
    std::string adapter;  // optional: empty evaluates the raw base model
    std::string test;
    std::string out;
    std::string name;
    int max_new = 160;
    int cutoff = 400;
    bool merge = false;
};

int cmd_evaluate(const EvalArgs& a) {
    auto loaded = loft::load_model_checkpoint(a.base);
    std::string model_name = !a.name.empty() ? a.name : (a.adapter.empty() ? "base" : "lora");
    if (!a.adapter.empty())
        loft::load_adapter_checkpoint(a.adapter, loaded.config, loaded.params, loaded.blob_hash);
    loft::Transformer<float> model(loaded.config, std::move(loaded.params));
    if (a.merge)
        for (auto& l : model.params().layers)
            for (loft::LoraTarget t : {loft::LoraTarget::kWq, loft::LoraTarget::kWk,
                                       loft::LoraTarget::kWv, loft::LoraTarget::kWo})
                if (l.projection(t).adapted()) loft::merge(l.projection(t));

    const auto test = loft::load_corpus(a.test);
    loft::EvalOptions opt;
    opt.max_new_tokens = a.max_new;
    opt.cutoff = a.cutoff;
    const auto outcome = loft::evaluate_model(model, test, opt, &std::cout);

    fs::create_directories(a.out);
    loft::write_file_atomic(a.out + "/report.json", loft::report_json(outcome.report).dump(2) + "\n");
    loft::write_file_atomic(a.out + "/examples.jsonl", loft::example_records_jsonl(outcome.records));
    loft::emit_metric_figures({{model_name, outcome.report}}, a.out);

    ManifestBuilder mb("evaluate");
    ordered_json cfg{{"base", a.base},       {"adapter", a.adapter}, {"test", a.test},
                     {"name", model_name},   {"max_new", a.max_new}, {"cutoff", a.cutoff},
                     {"merge", a.merge}};
    mb.set_config(cfg);
    mb.add_input(a.base + "/" + loft::kModelBlobName);
    if (!a.adapter.empty()) mb.add_input(a.adapter + "/" + loft::kAdapterBlobName);
    mb.add_input(a.test);
    for (const char* f : {"report.json", "examples.jsonl", "metrics_summary.csv", "per_type_f1.csv"})
        mb.add_output(f);
    mb.write(a.out);

    std::cout << "micro P " << outcome.report.micro.precision << "  R "
              << outcome.report.micro.recall << "  F1 " << outcome.report.micro.f1 << "  (macro F1 "
              << outcome.report.macro.f1 << ")\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale LoRA instruction fine-tuning for financial NER"};
    app.require_subcommand(1);

    GenSynthArgs gen;
    auto* cgen = app.add_subcommand("gen-synthetic", "Generate a seeded synthetic corpus");
    cgen->add_option("--out", gen.out, "Output directory")->required();
    cgen->add_option("--count", gen.count, "Number of sentences");
    cgen->add_option("--seed", gen.seed, "RNG seed");

    StatsArgs stats;
    auto* cstats = app.add_subcommand("stats", "Corpus statistics and entity distribution");
    cstats->add_option("--corpus", stats.corpus, "Corpus JSONL")->required();
    cstats->add_option("--out", stats.out, "Directory for distribution.csv (optional)");

    BuildArgs build;
    auto* cbuild = app.add_subcommand("build-dataset", "Split a corpus into instruction JSONL");
    cbuild->add_option("--corpus", build.corpus, "Corpus JSONL")->required();
    cbuild->add_option("--out", build.out, "Output directory")->required();
    cbuild->add_option("--train-ratio", build.train_ratio, "Train fraction (ratio split)");
    cbuild->add_option("--seed", build.seed, "Shuffle seed (ratio split)");
    cbuild->add_option("--train-ids", build.train_ids_path, "Explicit train id file");
    cbuild->add_option("--test-ids", build.test_ids_path, "Explicit test id file");

    TrainArgs train;
    auto* ctrain = app.add_subcommand("train", "Fine-tune LoRA adapters");
    ctrain->add_option("--config", train.config_path, "JSON run config");
    ctrain->add_option("--corpus", train.corpus, "Training data (instruction or corpus JSONL)");
    ctrain->add_option("--base-checkpoint", train.base_checkpoint, "Existing base checkpoint dir");
    ctrain->add_option("--out", train.out, "Output directory");
    ctrain->add_option("--seed", train.seed, "Seed (init, shuffle, adapters)");
    ctrain->add_option("--lr", train.lr, "Learning rate");
    ctrain->add_option("--epochs", train.epochs, "Epochs");
    ctrain->add_option("--batch-size", train.batch_size, "Micro-batch size");
    ctrain->add_option("--grad-accum", train.grad_accum, "Accumulation steps");
    ctrain->add_option("--cutoff", train.cutoff, "Token cutoff");
    ctrain->add_option("--r", train.lora_r, "LoRA rank");
    ctrain->add_option("--alpha", train.lora_alpha, "LoRA alpha");

    EvalArgs eval;
    auto* ceval = app.add_subcommand("evaluate", "Score a checkpoint on a gold corpus");
    ceval->add_option("--base", eval.base, "Base checkpoint dir")->required();
    ceval->add_option("--adapter", eval.adapter, "Adapter checkpoint dir (optional)");
    ceval->add_option("--test", eval.test, "Gold corpus JSONL")->required();
    ceval->add_option("--out", eval.out, "Output directory")->required();
    ceval->add_option("--name", eval.name, "Model label in figure CSVs");
    ceval->add_option("--max-new", eval.max_new, "Decoding budget per example");
    ceval->add_option("--cutoff", eval.cutoff, "Prompt budget");
    ceval->add_flag("--merge", eval.merge, "Merge adapters into the base weights first");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitInput;
    }

    try {
        if (cgen->parsed()) return cmd_gen_synthetic(gen);
        if (cstats->parsed()) return cmd_stats(stats);
        if (cbuild->parsed()) return cmd_build_dataset(build);
        if (ctrain->parsed()) return cmd_train(train);
        if (ceval->parsed()) return cmd_evaluate(eval);
    } catch (const loft::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    }
    return kExitOk;
}
