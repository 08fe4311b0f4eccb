// gendebias: command-line driver for data generation, training, evaluation,
// sweeps, generation, hard-set filtering and theorem checks.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "gendebias/pipeline.hpp"
#include "gendebias/theorem.hpp"

namespace fs = std::filesystem;
using namespace gendebias;
using ojson = nlohmann::ordered_json;

namespace {

constexpr const char *kManifestFormat = "gendebias.manifest.v1";

// Exit codes beyond CLI11's own.
constexpr int kExitFailure = 1;
constexpr int kExitCheckFailed = 3;

std::string sha256_file(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot hash '" + path.string() + "'");
    EVP_MD_CTX *ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return hex.str();
}

std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

struct Globals {
    std::uint64_t seed = 0;
    std::string config_path;
    std::string out_dir = ".";
    std::string log_level = "info";
};

/// Records what a command read and wrote; written as
/// <out-dir>/<stem>.manifest.json when the command finishes.
class Run {
  public:
    Run(std::string command, std::vector<std::string> argv, const Globals &g, ExperimentConfig cfg)
        : command_(std::move(command)), argv_(std::move(argv)), globals_(g), cfg_(std::move(cfg)),
          start_(std::chrono::steady_clock::now()), started_at_(utc_now()) {
        fs::create_directories(out_dir());
    }

    const ExperimentConfig &config() const { return cfg_; }
    std::uint64_t seed() const { return globals_.seed; }
    fs::path out_dir() const { return globals_.out_dir; }
    fs::path out(const std::string &name) const { return out_dir() / name; }

    /// Stem of the manifest file; defaults to the command name.
    void manifest_stem(std::string stem) { stem_ = std::move(stem); }
    void option(const std::string &key, ojson value) { options_[key] = std::move(value); }
    void input(const fs::path &p) { inputs_.push_back(p); }

    /// Registers a file already written under the output directory.
    void output(const std::string &name, bool checkpoint = false) { outputs_.push_back({name, checkpoint}); }

    void write(const std::string &name, const std::string &contents, bool checkpoint = false) {
        write_file_atomic(out(name), contents);
        output(name, checkpoint);
    }

    void write_manifest() const {
        ojson m;
        m["format"] = kManifestFormat;
        m["command"] = command_;
        m["argv"] = argv_;
        m["cwd"] = fs::current_path().string();
        m["seed"] = globals_.seed;
        m["config"] = cfg_.to_json();
        m["options"] = options_;
        ojson in = ojson::array();
        for (const auto &p : inputs_) in.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
        m["inputs"] = in;
        ojson outs = ojson::array(), ckpts = ojson::array();
        for (const auto &[name, ckpt] : outputs_) {
            ojson e{{"path", name}, {"sha256", sha256_file(out(name))}};
            if (ckpt) ckpts.push_back(e);
            outs.push_back(std::move(e));
        }
        m["outputs"] = outs;
        m["checkpoints"] = ckpts;
        m["started_at"] = started_at_;
        m["wall_clock_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        write_file_atomic(out((stem_.empty() ? command_ : stem_) + ".manifest.json"), m.dump(2) + "\n");
    }

  private:
    std::string command_, stem_;
    std::vector<std::string> argv_;
    Globals globals_;
    ExperimentConfig cfg_;
    ojson options_ = ojson::object();
    std::vector<fs::path> inputs_;
    std::vector<std::pair<std::string, bool>> outputs_;
    std::chrono::steady_clock::time_point start_;
    std::string started_at_;
};

// ---------------------------------------------------------------------------
// Flag groups shared by several commands. Values are applied only when given.

struct ModelFlags {
    std::size_t d_model = 0, heads = 0, ff_width = 0, layers = 0, max_len = 0;
    std::string positions;
    std::vector<CLI::Option *> opts;

    void add(CLI::App *app) {
        opts.push_back(app->add_option("--d-model", d_model, "Model width"));
        opts.push_back(app->add_option("--heads", heads, "Attention heads"));
        opts.push_back(app->add_option("--ff-width", ff_width, "Feed-forward width"));
        opts.push_back(app->add_option("--layers", layers, "Encoder and decoder layers"));
        opts.push_back(app->add_option("--max-len", max_len, "Maximum sequence length"));
        opts.push_back(app->add_option("--encoder-positions", positions, "learned or distance")->check(CLI::IsMember({"learned", "distance"})));
    }

    void apply(nn::ModelConfig &c) const {
        if (opts[0]->count()) c.d_model = d_model;
        if (opts[1]->count()) c.heads = heads;
        if (opts[2]->count()) c.ff_width = ff_width;
        if (opts[3]->count()) c.encoder_layers = c.decoder_layers = layers;
        if (opts[4]->count()) c.max_len = max_len;
        if (opts[5]->count()) c.encoder_positions = nn::parse_position_mode(positions);
        c.validate();
    }
};

struct TrainFlags {
    double lr = 0, word_dropout = 0, weight_decay = 0;
    std::size_t epochs = 0, patience = 0, batch_size = 0;
    std::vector<CLI::Option *> opts;

    void add(CLI::App *app) {
        opts.push_back(app->add_option("--lr", lr, "Learning rate"));
        opts.push_back(app->add_option("--epochs", epochs, "Maximum epochs"));
        opts.push_back(app->add_option("--patience", patience, "Early-stopping patience"));
        opts.push_back(app->add_option("--batch-size", batch_size, "Batch size"));
        opts.push_back(app->add_option("--word-dropout", word_dropout, "Word dropout probability"));
        opts.push_back(app->add_option("--weight-decay", weight_decay, "Decoupled weight decay"));
    }

    void apply(TrainConfig &c) const {
        if (opts[0]->count()) c.learning_rate = lr;
        if (opts[1]->count()) c.max_epochs = epochs;
        if (opts[2]->count()) c.patience = patience;
        if (opts[3]->count()) c.batch_size = batch_size;
        if (opts[4]->count()) c.word_dropout = word_dropout;
        if (opts[5]->count()) c.weight_decay = weight_decay;
        c.validate();
    }
};

// ---------------------------------------------------------------------------
// Priors and models

std::vector<double> parse_numbers(const std::string &s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception &) {
            used = 0;
        }
        if (used == 0 || used != item.size()) throw std::invalid_argument("'" + item + "' is not a number");
        out.push_back(v);
    }
    return out;
}

/// uniform | empirical | empirical:DATA | fixed:p1,p2,... | learned:CKPT
Prior parse_prior(const std::string &spec, std::size_t labels, Run &run, const Dataset *train = nullptr) {
    const auto colon = spec.find(':');
    const std::string kind = spec.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
    if (kind == "uniform" && arg.empty()) return Prior::uniform(labels);
    if (kind == "empirical") {
        if (!arg.empty()) {
            run.input(arg);
            return Prior::empirical(read_jsonl(arg), labels);
        }
        if (!train) throw std::invalid_argument("prior 'empirical' needs training data here; use empirical:DATA");
        return Prior::empirical(*train, labels);
    }
    if (kind == "fixed" && !arg.empty()) {
        auto p = Prior::fixed(parse_numbers(arg));
        if (p.size() != labels) throw std::invalid_argument("fixed prior has " + std::to_string(p.size()) + " entries for " + std::to_string(labels) + " labels");
        return p;
    }
    if (kind == "learned" && !arg.empty()) {
        run.input(arg);
        auto c = std::make_shared<EncoderClassifier>(EncoderClassifier::load(arg));
        c->freeze();
        return Prior::learned(c);
    }
    throw std::invalid_argument("unknown prior '" + spec + "' (expected uniform, empirical[:DATA], fixed:p1,p2,... or learned:CKPT)");
}

std::string checkpoint_format(const fs::path &path) {
    const auto j = read_json_file(path);
    return j.value("format", std::string{});
}

Dataset load_dataset(const std::string &path, Run &run) {
    run.input(path);
    auto d = read_jsonl(path);
    if (d.empty()) throw std::invalid_argument("dataset '" + path + "' has no usable examples");
    return d;
}

std::string dataset_jsonl(const Dataset &d) {
    std::string s;
    for (const auto &ex : d) s += to_jsonl_line(ex) + "\n";
    return s;
}

std::string json_text(const ojson &j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Commands

struct GenDataArgs {
    std::size_t entities = 0, attr_types = 0, values = 0, assertions = 0, per_label = 0, dev_per_label = 0, test_per_label = 0;
    std::string lexicon;
    double bias_ratio = 0.0;
    std::vector<CLI::Option *> opts;
    CLI::Option *ratio_opt = nullptr;
};

int cmd_gen_data(Run &run, const GenDataArgs &a) {
    if (a.ratio_opt->count()) run.option("bias_ratio", a.bias_ratio);
    const auto data = make_synthetic_data(run.config(), run.seed());
    spdlog::info("generated {} train, {} dev, {} test examples", data.train.size(), data.dev.size(), data.test.size());
    if (a.ratio_opt->count()) {
        const auto d = inject_all(data, a.bias_ratio, run.seed());
        run.write("train.jsonl", dataset_jsonl(d.train));
        run.write("dev.jsonl", dataset_jsonl(d.dev));
        run.write("test.jsonl", dataset_jsonl(d.test_biased));
        run.write("test-random.jsonl", dataset_jsonl(d.test_random));
        run.write("test-clean.jsonl", dataset_jsonl(data.test));
    } else {
        run.write("train.jsonl", dataset_jsonl(data.train));
        run.write("dev.jsonl", dataset_jsonl(data.dev));
        run.write("test.jsonl", dataset_jsonl(data.test));
    }
    return 0;
}

struct TrainArgs {
    std::string objective = "generative", split = "hypothesis-only", train, dev, prior, val_prior, init, name;
    ModelFlags model;
    TrainFlags train_flags;
};

const char *kTrainMatrix =
    "valid combinations: generative [--val-prior P]; finetune [--prior P] [--init CKPT] [--val-prior P]; "
    "discriminative and bias-only take none of --prior, --val-prior, --init";

int cmd_train(Run &run, const TrainArgs &a) {
    const bool generative = a.objective == "generative", finetune = a.objective == "finetune";
    if (!generative && !finetune && (!a.prior.empty() || !a.val_prior.empty() || !a.init.empty())) {
        throw std::invalid_argument("objective '" + a.objective + "' takes no prior or initial checkpoint; " + kTrainMatrix);
    }
    if (generative && (!a.prior.empty() || !a.init.empty())) {
        throw std::invalid_argument("objective 'generative' trains by likelihood and takes no --prior or --init; " + std::string(kTrainMatrix));
    }
    const ExperimentConfig &cfg = run.config();
    const SplitKind split = parse_split_kind(a.split);
    const Dataset train = load_dataset(a.train, run);
    const Dataset dev = load_dataset(a.dev, run);
    const std::string name = a.name.empty() ? a.objective : a.name;
    const std::string ckpt = name + ".ckpt.json";
    run.option("objective", a.objective);
    run.option("split", a.split);
    run.option("name", name);
    run.manifest_stem(name);

    TrainLog log;
    if (generative || finetune) {
        nn::ModelConfig mc = cfg.generative;
        a.model.apply(mc);
        TrainConfig tc = generative ? cfg.train : cfg.finetune;
        a.train_flags.apply(tc);
        tc.seed = derive_seed(run.seed(), "train:" + a.objective);
        std::unique_ptr<SeqModel> model;
        if (!a.init.empty()) {
            if (checkpoint_format(a.init) != SeqModel::kFormat) throw std::invalid_argument("--init must be a generative checkpoint");
            run.input(a.init);
            model = std::make_unique<SeqModel>(SeqModel::load(a.init));
        } else {
            const Vocabulary vocab = corpus_vocabulary({&train});
            model = std::make_unique<SeqModel>(vocab, output_ids_for(vocab, train, split), mc, derive_seed(run.seed(), "init:" + a.objective));
        }
        const std::size_t k = model->num_labels();
        const Prior val_prior = parse_prior(a.val_prior.empty() ? "uniform" : a.val_prior, k, run, &train);
        const auto tr = split_all(train, split);
        const auto dv = split_all(dev, split);
        run.option("val_prior", val_prior.describe());
        run.option("model", to_json(model->config()));
        run.option("train", tc.to_json());
        if (generative) {
            log = train_generative(*model, tr, dv, tc, val_prior);
        } else {
            const Prior prior = parse_prior(a.prior.empty() ? "uniform" : a.prior, k, run, &train);
            run.option("prior", prior.describe());
            run.option("init", a.init);
            log = finetune_bayes(*model, prior, tr, dv, tc, val_prior);
        }
        model->save(run.out(ckpt));
    } else {
        if (a.objective != "discriminative" && a.objective != "bias-only") {
            throw std::invalid_argument("unknown objective '" + a.objective + "'; " + kTrainMatrix);
        }
        const auto kind = parse_classifier_kind(a.objective);
        nn::ModelConfig mc = cfg.classifier;
        a.model.apply(mc);
        TrainConfig tc = cfg.classifier_train;
        a.train_flags.apply(tc);
        tc.seed = derive_seed(run.seed(), "train:" + a.objective);
        EncoderClassifier c(kind, split, corpus_vocabulary({&train}), mc, derive_seed(run.seed(), "init:" + a.objective));
        run.option("model", to_json(mc));
        run.option("train", tc.to_json());
        log = train_classifier(c, train, dev, tc);
        // A bias-only classifier is saved frozen, ready to serve as a prior.
        if (kind == ClassifierKind::BiasOnly) c.freeze();
        c.save(run.out(ckpt));
    }
    run.output(ckpt, true);
    log.checkpoint = ckpt;
    run.write(name + ".trainlog.json", json_text(log.to_json()));
    spdlog::info("best epoch {} of {}, validation accuracy {:.4f}", log.best_epoch, log.epochs.size(), log.best_validation);
    return 0;
}

struct EvalArgs {
    std::string model, prior, split = "hypothesis-only", test, hard, bias_model, name = "eval";
    std::vector<std::string> data;
    bool want_delta = false;
};

/// Predictions and posteriors of a loaded checkpoint.
class AnyModel {
  public:
    AnyModel(const std::string &path, const std::string &prior_spec, SplitKind split, Run &run) : split_(split) {
        run.input(path);
        const auto fmt = checkpoint_format(path);
        if (fmt == SeqModel::kFormat) {
            seq_ = std::make_unique<SeqModel>(SeqModel::load(path));
            prior_ = std::make_unique<Prior>(parse_prior(prior_spec.empty() ? "uniform" : prior_spec, seq_->num_labels(), run));
            kind_ = "generative";
        } else if (fmt == EncoderClassifier::kFormat) {
            if (!prior_spec.empty()) throw std::invalid_argument("--prior applies only to generative checkpoints");
            cls_ = std::make_unique<EncoderClassifier>(EncoderClassifier::load(path));
            kind_ = to_string(cls_->kind());
        } else {
            throw std::invalid_argument("'" + path + "' is not a model checkpoint (format '" + fmt + "')");
        }
    }

    const std::string &kind() const { return kind_; }
    std::string prior() const { return prior_ ? prior_->describe() : "n/a"; }

    Predictions predict(const Dataset &data) {
        std::vector<std::vector<double>> post;
        if (seq_) {
            post = posteriors(*seq_, *prior_, split_all(data, split_));
        } else {
            post = cls_->log_probs(data);
            for (auto &row : post)
                for (auto &v : row) v = std::exp(v);
        }
        std::vector<std::size_t> pred;
        for (const auto &row : post) pred.push_back(argmax_lowest(row));
        return records_for(data, pred, post);
    }

  private:
    SplitKind split_;
    std::string kind_;
    std::unique_ptr<SeqModel> seq_;
    std::unique_ptr<EncoderClassifier> cls_;
    std::unique_ptr<Prior> prior_;
};

int cmd_eval(Run &run, const EvalArgs &a) {
    run.manifest_stem(a.name);
    if (a.want_delta && a.hard.empty()) throw std::invalid_argument("delta requested but no --hard set given");
    AnyModel model(a.model, a.prior, parse_split_kind(a.split), run);
    MetricsReport report;
    report.metadata["model"] = a.model;
    report.metadata["kind"] = model.kind();
    report.metadata["prior"] = model.prior();
    report.metadata["split"] = a.split;
    run.option("model", a.model);
    run.option("prior", model.prior());
    run.option("split", a.split);

    auto evaluate = [&](const std::string &label, const std::string &path) {
        const Dataset d = load_dataset(path, run);
        auto records = model.predict(d);
        const double acc = accuracy(records);
        report.accuracies.emplace_back(label, acc);
        run.write(a.name + ".predictions." + label + ".jsonl", predictions_jsonl(records));
        spdlog::info("{}: accuracy {:.4f} on {} examples", label, acc, d.size());
        return std::make_pair(d, records);
    };
    const auto [test, test_records] = evaluate("test", a.test);
    report.metadata["test"] = a.test;
    if (!a.hard.empty()) {
        const auto hard = evaluate("hard", a.hard);
        report.metadata["hard"] = a.hard;
        report.set_pair(accuracy(test_records), accuracy(hard.second));
    }
    std::set<std::string> used{"test", "hard"};
    for (const auto &path : a.data) {
        std::string label = fs::path(path).stem().string();
        while (used.count(label)) label += "_";
        used.insert(label);
        evaluate(label, path);
    }
    if (!a.bias_model.empty()) {
        std::vector<std::size_t> bias_pred;
        if (a.bias_model == "oracle") {
            bias_pred = bias_token_oracle(test);
        } else {
            run.input(a.bias_model);
            bias_pred = EncoderClassifier::load(a.bias_model).predict(test);
        }
        report.rho = rho(test_records, records_for(test, bias_pred));
        report.metadata["bias_model"] = a.bias_model;
    }
    run.write(a.name + ".json", json_text(report.to_json()));
    run.write(a.name + ".txt", report.to_text());
    std::cout << report.to_text();
    return 0;
}

struct SweepArgs {
    std::vector<double> ratios{0.0, 0.5, 0.8, 0.95};
    std::vector<std::uint64_t> seeds;
    bool finetune = false;
    std::string name = "sweep";
    std::size_t per_label = 0;
    CLI::Option *per_label_opt = nullptr;
    ModelFlags model;
    TrainFlags train_flags;
};

int cmd_sweep(Run &run, const SweepArgs &a) {
    run.manifest_stem(a.name);
    for (double r : a.ratios)
        if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("bias ratio " + std::to_string(r) + " outside [0, 1]");
    const ExperimentConfig &cfg = run.config();
    const auto seeds = a.seeds.empty() ? std::vector<std::uint64_t>{run.seed()} : a.seeds;
    run.option("ratios", a.ratios);
    run.option("seeds", seeds);
    run.option("finetune", a.finetune);
    const std::string csv = a.name + ".csv";
    const fs::path path = run.out(csv);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out << SweepRow::csv_header() << '\n' << std::flush;
    Logger log = [](const std::string &s) { spdlog::info("{}", s); };
    try {
        for (auto seed : seeds) {
            const auto ctx = prepare_seed(cfg, seed, log);
            for (double ratio : a.ratios) {
                std::vector<SweepRow> rows;
                if (a.finetune) {
                    const auto r = run_finetune(cfg, ctx, ratio, log);
                    rows = {{ratio, "discriminative", seed, r.discriminative},
                            {ratio, "generative", seed, r.generative},
                            {ratio, "finetuned", seed, r.finetuned}};
                } else {
                    rows = run_ratio(cfg, ctx, ratio, log);
                }
                for (const auto &row : rows) out << row.csv() << '\n';
                out << std::flush;
            }
        }
    } catch (const std::exception &e) {
        out << "# aborted: " << e.what() << '\n';
        out.close();
        run.output(csv);
        throw;
    }
    out.close();
    run.output(csv);
    return 0;
}

struct GenerateArgs {
    std::string model, data, split = "hypothesis-only", label_source = "gold", mode = "greedy", name = "generations";
    double temperature = 1.0;
    std::size_t max_len = 64, limit = 0, self_bleu_limit = 500;
    bool gold_control = false;
};

double capped_self_bleu(const std::vector<Tokens> &corpus, std::size_t cap) {
    if (corpus.size() < 2) return 0.0;
    std::vector<Tokens> sub(corpus.begin(), corpus.begin() + static_cast<std::ptrdiff_t>(std::min(cap, corpus.size())));
    return self_bleu(sub);
}

int cmd_generate(Run &run, const GenerateArgs &a) {
    run.manifest_stem(a.name);
    run.input(a.model);
    if (checkpoint_format(a.model) != SeqModel::kFormat) throw std::invalid_argument("generate needs a generative checkpoint");
    SeqModel model = SeqModel::load(a.model);
    Dataset data = load_dataset(a.data, run);
    if (a.limit > 0 && data.size() > a.limit) data.resize(a.limit);
    const SplitKind split = parse_split_kind(a.split);
    GenerateOptions opt;
    opt.mode = a.mode == "sample" ? GenerateOptions::Mode::Sample : GenerateOptions::Mode::Greedy;
    opt.temperature = a.temperature;
    opt.max_len = a.max_len;
    run.option("label_source", a.label_source);
    run.option("mode", a.mode);
    run.option("temperature", a.temperature);
    run.option("max_len", a.max_len);
    run.option("gold_control", a.gold_control);

    const LabelSet labels;
    std::string lines;
    std::vector<Tokens> generated, gold_r, gold_label_generations;
    std::vector<std::vector<Tokens>> references;
    for (const auto &ex : data) {
        const BiasSplit s = gendebias::split(ex, split);
        std::vector<std::size_t> ys;
        if (a.label_source == "each") {
            for (std::size_t y = 0; y < model.num_labels(); ++y) ys.push_back(y);
        } else {
            ys.push_back(ex.label);
        }
        gold_r.push_back(s.remainder);
        for (auto y : ys) {
            opt.seed = derive_seed(run.seed(), "generate:" + ex.id + ":" + std::to_string(y));
            Tokens g = a.gold_control ? s.remainder : model.generate(s.bias, y, opt);
            ojson j;
            j["id"] = ex.id;
            j["label"] = labels.name(y);
            j["gold_label"] = labels.name(ex.label);
            j["bias"] = join(s.bias);
            j["generated"] = join(g);
            j["reference"] = join(s.remainder);
            lines += j.dump() + "\n";
            if (y == ex.label) gold_label_generations.push_back(g);
            generated.push_back(std::move(g));
            references.push_back({s.remainder});
        }
    }
    run.write(a.name + ".jsonl", lines);

    std::vector<std::vector<Tokens>> gold_refs;
    for (const auto &r : gold_r) gold_refs.push_back({r});
    ojson m;
    m["examples"] = data.size();
    m["generations"] = generated.size();
    m["label_source"] = a.label_source;
    m["bleu"] = bleu(generated, references);
    m["bleu_gold_label"] = bleu(gold_label_generations, gold_refs);
    m["self_bleu_generations"] = capped_self_bleu(gold_label_generations, a.self_bleu_limit);
    m["self_bleu_gold"] = capped_self_bleu(gold_r, a.self_bleu_limit);
    m["self_bleu_limit"] = a.self_bleu_limit;
    run.write(a.name + ".metrics.json", json_text(m));
    std::cout << m.dump(2) << "\n";
    return 0;
}

struct HardSetArgs {
    std::string data, bias_model, name = "hard";
};

int cmd_hard_set(Run &run, const HardSetArgs &a) {
    run.manifest_stem(a.name);
    const Dataset data = load_dataset(a.data, run);
    run.input(a.bias_model);
    auto model = EncoderClassifier::load(a.bias_model);
    if (model.kind() != ClassifierKind::BiasOnly) spdlog::warn("'{}' is a {} classifier, not bias-only", a.bias_model, to_string(model.kind()));
    const auto pred = model.predict(data);
    const auto hs = build_hard_set(data, pred);
    run.write(a.name + ".jsonl", dataset_jsonl(hs.hard));
    ojson s;
    s["examples"] = data.size();
    s["hard"] = hs.hard.size();
    s["easy"] = hs.easy.size();
    s["hard_fraction"] = static_cast<double>(hs.hard.size()) / static_cast<double>(data.size());
    s["bias_model_accuracy"] = accuracy(records_for(data, pred));
    run.write(a.name + ".summary.json", json_text(s));
    std::cout << s.dump(2) << "\n";
    return 0;
}

struct TheoremArgs {
    std::string model, data, name = "theorem";
    std::vector<std::string> priors{"uniform"};
    std::size_t random_models = 20, trained_models = 1, bias_inputs = 50;
    double enum_bound = 1e7, tolerance = 1e-6, norm_tolerance = 1e-9;
};

int cmd_verify_theorem(Run &run, const TheoremArgs &a) {
    run.manifest_stem(a.name);
    std::vector<std::pair<std::string, SeqModel>> models;
    std::vector<Tokens> bias;
    if (!a.model.empty()) {
        run.input(a.model);
        if (checkpoint_format(a.model) != SeqModel::kFormat) throw std::invalid_argument("verify-theorem needs a generative checkpoint");
        models.emplace_back(a.model, SeqModel::load(a.model));
        if (!a.data.empty()) {
            std::set<Tokens> seen;
            for (const auto &ex : load_dataset(a.data, run)) {
                const auto s = split_hypothesis_only(ex);
                if (seen.size() < a.bias_inputs && seen.insert(s.bias).second) bias.push_back(s.bias);
            }
        }
    } else {
        for (std::size_t i = 0; i < a.random_models; ++i)
            models.emplace_back("random-" + std::to_string(i), random_enumerable_model(derive_seed(run.seed(), "theorem-random:" + std::to_string(i))));
        for (std::size_t i = 0; i < a.trained_models; ++i) {
            models.emplace_back("trained-" + std::to_string(i), trained_enumerable_model(derive_seed(run.seed(), "theorem-trained:" + std::to_string(i))));
        }
    }
    if (bias.empty()) bias = enumerable_bias_suite(a.bias_inputs);
    if (bias.size() < a.bias_inputs) spdlog::warn("only {} distinct bias inputs available", bias.size());
    run.option("bias_inputs", bias.size());
    run.option("enum_bound", a.enum_bound);

    for (const auto &[name, m] : models) {
        const auto need = enumeration_size(m.output_size(), m.max_remainder_len(), a.enum_bound);
        if (need == 0) {
            throw std::length_error("model '" + name + "' needs more than " + std::to_string(a.enum_bound) +
                                    " remainders per (B, y); lower max_len or raise --enum-bound");
        }
    }

    ojson report;
    bool passed = true;
    ojson per_prior = ojson::array();
    for (const auto &spec : a.priors) {
        const Prior prior = parse_prior(spec, models.front().second.num_labels(), run);
        TheoremReport r;
        r.prior = prior.describe();
        r.bias_inputs = bias.size();
        r.tolerance = a.tolerance;
        for (auto &[name, m] : models) {
            const double dev = implied_bias_deviation(m, prior, bias, a.enum_bound);
            r.models.emplace_back(name, dev);
            r.max_deviation = std::max(r.max_deviation, dev);
        }
        r.passed = r.max_deviation <= a.tolerance;
        passed = passed && r.passed;
        spdlog::info("prior {}: max |implied - prior| = {:.3e} ({})", r.prior, r.max_deviation, r.passed ? "pass" : "FAIL");
        per_prior.push_back(r.to_json());
    }
    double norm = 0.0;
    for (auto &[name, m] : models) norm = std::max(norm, normalization_deviation(m, bias, a.enum_bound));
    const bool norm_ok = norm <= a.norm_tolerance;
    spdlog::info("max |sum_R p(R | y, B) - 1| = {:.3e} ({})", norm, norm_ok ? "pass" : "FAIL");
    report["priors"] = per_prior;
    report["normalization"] = {{"max_deviation", norm}, {"tolerance", a.norm_tolerance}, {"passed", norm_ok}};
    report["passed"] = passed && norm_ok;
    run.write(a.name + ".json", json_text(report));
    std::cout << (passed && norm_ok ? "PASS" : "FAIL") << "\n";
    return passed && norm_ok ? 0 : kExitCheckFailed;
}

int run_cli(std::vector<std::string> args);

struct ReplayArgs {
    std::string manifest;
};

/// Re-runs a manifest's command (optionally into another --out-dir) and
/// compares every recorded output by SHA-256.
int cmd_replay(const ReplayArgs &a, const Globals &g, bool out_dir_given) {
    const auto m = read_json_file(a.manifest);
    if (m.value("format", std::string{}) != kManifestFormat) throw std::invalid_argument("'" + a.manifest + "' is not a run manifest");
    std::vector<std::string> args = m.at("argv").get<std::vector<std::string>>();
    fs::path out_dir = fs::path(a.manifest).parent_path();
    if (out_dir.empty()) out_dir = ".";
    if (out_dir_given) out_dir = g.out_dir;
    out_dir = fs::absolute(out_dir);
    std::vector<std::string> rewritten{"--out-dir", out_dir.string()};
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--out-dir") {
            ++i;
            continue;
        }
        if (args[i].rfind("--out-dir=", 0) == 0) continue;
        rewritten.push_back(args[i]);
    }
    const auto cwd = fs::current_path();
    fs::current_path(m.at("cwd").get<std::string>());
    int code = 0;
    try {
        code = run_cli(rewritten);
    } catch (...) {
        fs::current_path(cwd);
        throw;
    }
    fs::current_path(cwd);
    if (code != 0 && code != kExitCheckFailed) return code;
    std::size_t mismatched = 0;
    for (const auto &o : m.at("outputs")) {
        const auto rel = o.at("path").get<std::string>();
        const fs::path p = out_dir / rel;
        const std::string now = fs::exists(p) ? sha256_file(p) : "missing";
        const bool same = now == o.at("sha256").get<std::string>();
        if (!same) ++mismatched;
        std::cout << (same ? "identical  " : "DIFFERENT  ") << rel << "\n";
    }
    std::cout << (mismatched ? "replay differs in " + std::to_string(mismatched) + " file(s)" : "replay reproduced every output") << "\n";
    return mismatched ? kExitCheckFailed : 0;
}

int run_cli(std::vector<std::string> args) {
    CLI::App app{"Generative-classifier debiasing: data, training, evaluation and checks"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "Seed from which all randomness is derived");
    app.add_option("--config", g.config_path, "Experiment config (JSON); flags override it")->check(CLI::ExistingFile);
    auto *out_opt = app.add_option("--out-dir", g.out_dir, "Output directory");
    app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error or off");

    GenDataArgs gd;
    auto *gen_data = app.add_subcommand("gen-data", "Write synthetic train/dev/test JSONL");
    gd.opts.push_back(gen_data->add_option("--entities", gd.entities, "Entities in the world"));
    gd.opts.push_back(gen_data->add_option("--attr-types", gd.attr_types, "Attribute types"));
    gd.opts.push_back(gen_data->add_option("--values", gd.values, "Values per attribute type"));
    gd.opts.push_back(gen_data->add_option("--assertions", gd.assertions, "Assertions per premise"));
    gd.opts.push_back(gen_data->add_option("--per-label", gd.per_label, "Training examples per label"));
    gd.opts.push_back(gen_data->add_option("--dev-per-label", gd.dev_per_label, "Dev examples per label"));
    gd.opts.push_back(gen_data->add_option("--test-per-label", gd.test_per_label, "Test examples per label"));
    gd.opts.push_back(gen_data->add_option("--lexicon", gd.lexicon, "shared or paraphrase")->check(CLI::IsMember({"shared", "paraphrase"})));
    gd.ratio_opt = gen_data->add_option("--bias-ratio", gd.bias_ratio, "Inject a bias token with this ratio")->check(CLI::Range(0.0, 1.0));

    TrainArgs tr;
    auto *train = app.add_subcommand("train", "Train a generative model, a classifier, or fine-tune through the posterior");
    train->add_option("--objective", tr.objective, "generative, discriminative, bias-only or finetune")
        ->check(CLI::IsMember({"generative", "discriminative", "bias-only", "finetune"}));
    train->add_option("--split", tr.split, "hypothesis-only, overlap or synthetic-token");
    train->add_option("--train", tr.train, "Training JSONL")->required()->check(CLI::ExistingFile);
    train->add_option("--dev", tr.dev, "Validation JSONL")->required()->check(CLI::ExistingFile);
    train->add_option("--prior", tr.prior, "Fine-tuning prior: uniform, empirical, fixed:p1,p2,... or learned:CKPT");
    train->add_option("--val-prior", tr.val_prior, "Prior for validation accuracy (default uniform)");
    train->add_option("--init", tr.init, "Generative checkpoint to fine-tune")->check(CLI::ExistingFile);
    train->add_option("--name", tr.name, "Output file stem (default: the objective)");
    tr.model.add(train);
    tr.train_flags.add(train);

    EvalArgs ev;
    auto *eval = app.add_subcommand("eval", "Evaluate a checkpoint: accuracies, delta and rho");
    eval->add_option("--model", ev.model, "Checkpoint")->required()->check(CLI::ExistingFile);
    eval->add_option("--prior", ev.prior, "Inference prior for generative checkpoints (default uniform)");
    eval->add_option("--split", ev.split, "Bias split for generative checkpoints");
    eval->add_option("--test", ev.test, "Standard evaluation JSONL")->required()->check(CLI::ExistingFile);
    eval->add_option("--hard", ev.hard, "Hard evaluation JSONL; delta = acc(test) - acc(hard)")->check(CLI::ExistingFile);
    eval->add_option("--data", ev.data, "Further JSONL sets to report accuracy on")->check(CLI::ExistingFile);
    eval->add_option("--bias-model", ev.bias_model, "Bias-only checkpoint or 'oracle' for rho");
    eval->add_flag("--delta", ev.want_delta, "Require a delta (fails without --hard)");
    eval->add_option("--name", ev.name, "Output file stem");

    SweepArgs sw;
    auto *sweep = app.add_subcommand("sweep", "Train and evaluate both model families over bias ratios and seeds");
    sweep->add_option("--ratios", sw.ratios, "Bias ratios")->delimiter(',');
    sweep->add_option("--seeds", sw.seeds, "Seeds (default: --seed)")->delimiter(',');
    sweep->add_flag("--finetune", sw.finetune, "Add fine-tuned rows (learned prior while training, uniform at inference)");
    sweep->add_option("--name", sw.name, "Output file stem");
    sw.per_label_opt = sweep->add_option("--per-label", sw.per_label, "Training examples per label");
    sw.model.add(sweep);
    sw.train_flags.add(sweep);

    GenerateArgs ge;
    auto *generate = app.add_subcommand("generate", "Decode remainders and score them with BLEU and self-BLEU");
    generate->add_option("--model", ge.model, "Generative checkpoint")->required()->check(CLI::ExistingFile);
    generate->add_option("--data", ge.data, "JSONL to generate for")->required()->check(CLI::ExistingFile);
    generate->add_option("--split", ge.split, "Bias split");
    generate->add_option("--label-source", ge.label_source, "gold or each")->check(CLI::IsMember({"gold", "each"}));
    generate->add_option("--mode", ge.mode, "greedy or sample")->check(CLI::IsMember({"greedy", "sample"}));
    generate->add_option("--temperature", ge.temperature, "Sampling temperature");
    generate->add_option("--max-len", ge.max_len, "Maximum generated tokens");
    generate->add_option("--limit", ge.limit, "Use only the first N examples (0: all)");
    generate->add_option("--self-bleu-limit", ge.self_bleu_limit, "Sentences used for self-BLEU");
    generate->add_flag("--gold-control", ge.gold_control, "Emit the references instead of decoding");
    generate->add_option("--name", ge.name, "Output file stem");

    HardSetArgs hs;
    auto *hard = app.add_subcommand("hard-set", "Keep the examples a bias-only model gets wrong");
    hard->add_option("--data", hs.data, "JSONL to filter")->required()->check(CLI::ExistingFile);
    hard->add_option("--bias-model", hs.bias_model, "Bias-only checkpoint")->required()->check(CLI::ExistingFile);
    hard->add_option("--name", hs.name, "Output file stem");

    TheoremArgs th;
    auto *theorem = app.add_subcommand("verify-theorem", "Check by enumeration that the implied bias equals the prior");
    theorem->add_option("--model", th.model, "Generative checkpoint (default: random and trained tiny models)")->check(CLI::ExistingFile);
    theorem->add_option("--data", th.data, "JSONL supplying bias inputs for --model");
    theorem->add_option("--prior", th.priors, "Priors to check: uniform, fixed:p1,p2,... or learned:CKPT");
    theorem->add_option("--random-models", th.random_models, "Random tiny models");
    theorem->add_option("--trained-models", th.trained_models, "Trained tiny models");
    theorem->add_option("--bias-inputs", th.bias_inputs, "Distinct bias inputs");
    theorem->add_option("--enum-bound", th.enum_bound, "Largest enumeration allowed per (B, y)");
    theorem->add_option("--tolerance", th.tolerance, "Pass threshold for |implied - prior|");
    theorem->add_option("--norm-tolerance", th.norm_tolerance, "Pass threshold for |sum_R p(R | y, B) - 1|");
    theorem->add_option("--name", th.name, "Output file stem");

    ReplayArgs rp;
    auto *replay = app.add_subcommand("replay", "Re-run a command from its manifest and compare outputs");
    replay->add_option("manifest", rp.manifest, "Manifest written by an earlier run")->required()->check(CLI::ExistingFile);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError &e) {
        return app.exit(e);
    }
    spdlog::set_level(spdlog::level::from_str(g.log_level));

    if (replay->parsed()) return cmd_replay(rp, g, out_opt->count() > 0);

    ExperimentConfig cfg;
    if (!g.config_path.empty()) cfg.update_from_json(read_json_file(g.config_path));
    if (gen_data->parsed()) {
        auto &c = cfg.corpus;
        const std::size_t *vals[] = {&gd.entities, &gd.attr_types, &gd.values, &gd.assertions, &gd.per_label, &gd.dev_per_label, &gd.test_per_label};
        std::size_t *dst[] = {&c.entities, &c.attribute_types, &c.values_per_type, &c.assertions_per_premise, &c.examples_per_label,
                              &cfg.dev_per_label, &cfg.test_per_label};
        for (std::size_t i = 0; i < 7; ++i)
            if (gd.opts[i]->count()) *dst[i] = *vals[i];
        if (gd.opts[7]->count()) c.lexicon = parse_lexicon(gd.lexicon);
    }
    if (sweep->parsed()) {
        if (sw.per_label_opt->count()) cfg.corpus.examples_per_label = sw.per_label;
        sw.model.apply(cfg.generative);
        sw.model.apply(cfg.classifier);
        sw.train_flags.apply(cfg.train);
        cfg.finetune = cfg.train.finetune();
        sw.train_flags.apply(cfg.classifier_train);
    }

    CLI::App *cmd = app.get_subcommands().front();
    Run run(cmd->get_name(), args, g, cfg);
    int code = 0;
    if (cmd == gen_data) code = cmd_gen_data(run, gd);
    else if (cmd == train) code = cmd_train(run, tr);
    else if (cmd == eval) code = cmd_eval(run, ev);
    else if (cmd == sweep) code = cmd_sweep(run, sw);
    else if (cmd == generate) code = cmd_generate(run, ge);
    else if (cmd == hard) code = cmd_hard_set(run, hs);
    else if (cmd == theorem) code = cmd_verify_theorem(run, th);
    run.write_manifest();
    return code;
}

} // namespace

int main(int argc, char **argv) {
    spdlog::set_default_logger(spdlog::stderr_color_mt("gendebias"));
    spdlog::set_pattern("[%H:%M:%S] %^%l%$ %v");
    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        return run_cli(args);
    } catch (const std::exception &e) {
        spdlog::error("{}", e.what());
        return kExitFailure;
    }
}
