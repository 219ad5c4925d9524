// vptk: visual-perturbation training toolkit.
//
// Subcommands: perturb, build {sft,dpo}, train-toy, eval, erank, report.
// Exit codes: 0 success, 1 runtime error, 2 usage error.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "vptk/dataman.hpp"
#include "vptk/evalkit.hpp"
#include "vptk/perturb.hpp"
#include "vptk/raster.hpp"
#include "vptk/rng.hpp"
#include "vptk/toytrain.hpp"

namespace fs = std::filesystem;

namespace {

// Top-level config files are JSON; values apply only where the command
// line left an option unset.
class JsonConfig : public CLI::Config {
public:
    std::string to_config(const CLI::App*, bool, bool, std::string) const override {
        return "{}\n";
    }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        nlohmann::json j;
        try {
            input >> j;
        } catch (const nlohmann::json::exception& e) {
            throw CLI::FileError(std::string("config is not valid JSON: ") + e.what());
        }
        std::vector<CLI::ConfigItem> items;
        flatten(j, {}, items);
        return items;
    }

private:
    static void flatten(const nlohmann::json& j, std::vector<std::string> parents,
                        std::vector<CLI::ConfigItem>& items) {
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it->is_object()) {
                auto sub = parents;
                sub.push_back(it.key());
                flatten(*it, std::move(sub), items);
                continue;
            }
            CLI::ConfigItem item;
            item.parents = parents;
            item.name = it.key();
            if (it->is_array()) {
                for (const auto& v : *it)
                    item.inputs.push_back(v.is_string() ? v.get<std::string>() : v.dump());
            } else {
                item.inputs.push_back(it->is_string() ? it->get<std::string>() : it->dump());
            }
            items.push_back(std::move(item));
        }
    }
};

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> parts;
    std::string cur;
    std::stringstream ss(s);
    while (std::getline(ss, cur, ',')) parts.push_back(cur);
    return parts;
}

std::optional<std::vector<vptk::PerturbKind>> parse_ops(const std::string& spec,
                                                        std::string& bad) {
    std::vector<vptk::PerturbKind> ops;
    for (const std::string& name : split_csv(spec)) {
        const auto kind = vptk::parse_perturb_kind(name);
        if (!kind) {
            bad = name;
            return std::nullopt;
        }
        ops.push_back(*kind);
    }
    return ops;
}

void write_file(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::optional<std::string> read_file_if_exists(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string format1(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", v);
    return buf;
}

std::string change_annotation(double before, double after) {
    const double change = vptk::relative_change(before, after);
    if (change == 0.0) return "(0.0%)";
    char buf[48];
    std::snprintf(buf, sizeof(buf), "(%.1f%%%s)", std::abs(change),
                  change > 0.0 ? "↑" : "↓");
    return buf;
}

// ------------------------------------------------------------------
// perturb
// ------------------------------------------------------------------

struct PerturbArgs {
    std::string manifest;
    std::string images_root;
    std::string out;
    std::uint64_t seed = 0;
    std::string ops = "concat,mixup,rotate";
    unsigned jobs = 1;
};

int run_perturb(const PerturbArgs& a) {
    std::string bad;
    const auto ops = parse_ops(a.ops, bad);
    if (!ops) {
        std::cerr << "unknown perturbation kind: " << bad << "\n";
        return 2;
    }
    if (ops->empty()) {
        std::cerr << "--ops must name at least one perturbation\n";
        return 2;
    }

    const auto samples = vptk::read_manifest(a.manifest);
    const fs::path manifest_path = fs::path(a.out) / "augmented.jsonl";
    const auto previous = read_file_if_exists(manifest_path);

    const auto result =
        vptk::augment_dataset(samples, a.images_root, a.out, a.seed, *ops, a.jobs);

    std::cout << "perturbed " << result.records.size() << " samples -> " << a.out << "\n";
    for (const auto& [kind, count] : result.counts_per_kind)
        std::cout << "  " << kind << ": " << count << "\n";
    if (previous && *previous == result.manifest_bytes)
        std::cout << "deterministic rerun\n";
    return 0;
}

// ------------------------------------------------------------------
// build sft|dpo
// ------------------------------------------------------------------

struct BuildArgs {
    std::string augmented;
    std::string oracle;
    std::string out;
};

int run_build(const BuildArgs& a, bool dpo) {
    const std::string prefix = "scripted:";
    if (a.oracle.rfind(prefix, 0) != 0) {
        std::cerr << "unknown oracle kind (expected scripted:<path>): " << a.oracle << "\n";
        return 2;
    }
    const vptk::ScriptedOracle oracle(a.oracle.substr(prefix.size()));
    const auto records = vptk::read_augmented_manifest(a.augmented);

    std::string bytes;
    vptk::BuildSummary summary;
    if (dpo) {
        auto [examples, s] = vptk::build_dpo(records, oracle);
        for (const auto& e : examples) bytes += vptk::preference_example_line(e) + "\n";
        summary = s;
    } else {
        auto [examples, s] = vptk::build_sft(records, oracle);
        for (const auto& e : examples) bytes += vptk::sft_example_line(e) + "\n";
        summary = s;
    }
    write_file(a.out, bytes);

    std::cout << "emitted " << summary.emitted << " examples -> " << a.out << "\n"
              << "skipped: no correct " << summary.skipped_no_correct << ", no incorrect "
              << summary.skipped_no_incorrect << ", oracle failures "
              << summary.oracle_failures << "\n";
    return 0;
}

// ------------------------------------------------------------------
// train-toy
// ------------------------------------------------------------------

struct Preset {
    vptk::toy::GrpoTrainConfig grpo;
    int grpo_iters = 0;
    double sft_lr = 0.0;
    int sft_epochs = 0;
    double dpo_lr = 0.0;
    int dpo_epochs = 0;
    vptk::DpoConfig dpo;
    double dpo_warmup = 0.0; // recorded; the toy loops have no scheduler
};

Preset toy_preset() {
    Preset p;
    p.grpo = vptk::toy::toy_preset_grpo();
    p.grpo_iters = vptk::toy::kToyPresetGrpoIters;
    p.sft_lr = 0.05;
    p.sft_epochs = 800;
    p.dpo_lr = 0.05;
    p.dpo_epochs = 400;
    return p;
}

Preset paper_defaults_preset() {
    Preset p;
    p.grpo.learning_rate = 1e-6;
    p.grpo.batch_size = 16;
    p.grpo.grpo.kl_coeff = 0.01;
    p.grpo.grpo.group_size = 5;
    p.grpo.max_grad_norm = 1.0;
    p.grpo_iters = 15;
    p.sft_lr = 1e-4;
    p.sft_epochs = 3;
    p.dpo_lr = 5e-5;
    p.dpo_epochs = 1;
    p.dpo_warmup = 0.05;
    return p;
}

struct TrainToyArgs {
    std::string algo;
    std::string vp;
    std::uint64_t seed = 0;
    std::string preset = "toy";
    int iters = -1;
    int epochs = -1;
    double lr = -1.0;
    std::size_t tasks = vptk::toy::kToyPresetTasks;
    std::size_t eval_tasks = 256;
    std::string out_dir;
};

int run_train_toy(const TrainToyArgs& a) {
    Preset preset = a.preset == "toy" ? toy_preset() : paper_defaults_preset();
    const bool vp = a.vp == "on";

    const auto tasks = vptk::toy::gen_tasks(a.tasks, a.seed);
    const auto heldout = vptk::toy::gen_tasks(a.eval_tasks, vptk::derive_seed(a.seed, 0xEA1));

    vptk::toy::ToyPolicy policy;
    std::vector<vptk::toy::IterationLog> log;
    if (a.algo == "grpo") {
        auto cfg = preset.grpo;
        if (a.lr >= 0.0) cfg.learning_rate = a.lr;
        const int iters = a.iters >= 0 ? a.iters : preset.grpo_iters;
        log = vptk::toy::train_grpo(policy, tasks, cfg, vp, iters, a.seed);
    } else if (a.algo == "sft") {
        const double lr = a.lr >= 0.0 ? a.lr : preset.sft_lr;
        const int epochs = a.epochs >= 0 ? a.epochs : preset.sft_epochs;
        const auto examples = vptk::toy::make_toy_sft_examples(tasks, a.seed);
        log = vptk::toy::train_sft(policy, examples, tasks, vp, lr, epochs, a.seed);
    } else {
        const double lr = a.lr >= 0.0 ? a.lr : preset.dpo_lr;
        const int epochs = a.epochs >= 0 ? a.epochs : preset.dpo_epochs;
        const auto examples = vptk::toy::make_toy_preference_examples(tasks, a.seed);
        log = vptk::toy::train_dpo(policy, examples, tasks, vp, preset.dpo, lr, epochs,
                                   a.seed);
    }

    fs::create_directories(a.out_dir);
    write_file(fs::path(a.out_dir) / "reward_log.csv", vptk::toy::iteration_log_csv(log));
    write_file(fs::path(a.out_dir) / "policy.json",
               vptk::toy::policy_to_json(policy).dump() + "\n");

    const double train_acc = vptk::toy::evaluate_policy(policy, tasks, vp,
                                                        vptk::derive_seed(a.seed, 0xACC));
    const double eval_clean = vptk::toy::evaluate_policy(policy, heldout, false, 0);
    const double eval_vp =
        vptk::toy::evaluate_policy(policy, heldout, true, vptk::derive_seed(a.seed, 0xE7A));

    std::printf("wrote %s/reward_log.csv and %s/policy.json\n", a.out_dir.c_str(),
                a.out_dir.c_str());
    std::printf("final train accuracy: %.6f\n", train_acc);
    std::printf("final eval accuracy (clean): %.6f\n", eval_clean);
    std::printf("final eval accuracy (perturbed): %.6f\n", eval_vp);
    return 0;
}

// ------------------------------------------------------------------
// eval
// ------------------------------------------------------------------

struct EvalArgs {
    std::string predictions;
    std::string manifest;
    std::string out;
    bool allow_partial = false;
};

int run_eval(const EvalArgs& a) {
    const auto manifest = vptk::read_manifest(a.manifest);
    const auto predictions = vptk::read_predictions(a.predictions);
    const auto run = vptk::score_run(predictions, manifest, a.allow_partial);
    write_file(a.out, vptk::score_report_json(run).dump() + "\n");
    std::printf("scored %ld predictions: accuracy %.6f\n", run.overall.total,
                run.overall.accuracy());
    return 0;
}

// ------------------------------------------------------------------
// erank
// ------------------------------------------------------------------

struct ErankArgs {
    std::string matrix;
    std::string before;
    std::string after;
};

int run_erank(const ErankArgs& a) {
    if (!a.matrix.empty()) {
        std::printf("%.6f\n", vptk::effective_rank(vptk::read_csv_matrix(a.matrix)));
        return 0;
    }
    const double before = vptk::effective_rank(vptk::read_csv_matrix(a.before));
    const double after = vptk::effective_rank(vptk::read_csv_matrix(a.after));
    std::printf("before: %.6f\n", before);
    std::printf("after: %.6f\n", after);
    std::printf("diff: %.6f\n", after - before);
    return 0;
}

// ------------------------------------------------------------------
// report
// ------------------------------------------------------------------

struct ReportArgs {
    std::vector<std::string> score_files;
    std::string values;
    std::string names;
    std::string baseline;
};

int run_report(const ReportArgs& a) {
    const bool have_files = !a.score_files.empty();
    const bool have_values = !a.values.empty();
    if (have_files == have_values) {
        std::cerr << "pass either score JSON files or --values, not both\n";
        return 2;
    }

    std::vector<std::string> names;
    std::vector<double> scores;
    if (have_values) {
        const auto parts = split_csv(a.values);
        for (const auto& p : parts) {
            const auto v = vptk::detail::parse_decimal(p);
            if (!v) {
                std::cerr << "--values entry is not a number: " << p << "\n";
                return 2;
            }
            scores.push_back(*v);
        }
        for (std::size_t i = 0; i < scores.size(); ++i)
            names.push_back("bench-" + std::to_string(i + 1));
    } else {
        for (const auto& file : a.score_files) {
            std::ifstream in(file, std::ios::binary);
            if (!in) throw std::runtime_error("cannot open score file: " + file);
            nlohmann::json j;
            try {
                in >> j;
            } catch (const nlohmann::json::exception& e) {
                throw std::runtime_error("score file " + file + ": " + e.what());
            }
            scores.push_back(j.at("overall").at("accuracy").get<double>() * 100.0);
            names.push_back(fs::path(file).stem().string());
        }
    }

    if (!a.names.empty()) {
        const auto explicit_names = split_csv(a.names);
        if (explicit_names.size() != scores.size()) {
            std::cerr << "--names count does not match the number of scores\n";
            return 2;
        }
        names = explicit_names;
    }

    std::vector<double> baselines;
    if (!a.baseline.empty()) {
        for (const auto& p : split_csv(a.baseline)) {
            const auto v = vptk::detail::parse_decimal(p);
            if (!v) {
                std::cerr << "--baseline entry is not a number: " << p << "\n";
                return 2;
            }
            baselines.push_back(*v);
        }
        if (baselines.size() == 1 && scores.size() > 1)
            baselines.assign(scores.size(), baselines[0]);
        if (baselines.size() != scores.size()) {
            std::cerr << "--baseline count does not match the number of scores\n";
            return 2;
        }
    }

    std::size_t width = std::string("Average").size();
    for (const auto& n : names) width = std::max(width, n.size());

    auto print_row = [&](const std::string& name, double score,
                         std::optional<double> baseline) {
        std::string cell = format1(score);
        if (baseline) cell += " " + change_annotation(*baseline, score);
        std::printf("%-*s  %s\n", static_cast<int>(width), name.c_str(), cell.c_str());
    };

    for (std::size_t i = 0; i < scores.size(); ++i)
        print_row(names[i], scores[i],
                  baselines.empty() ? std::nullopt : std::optional{baselines[i]});

    double mean = 0.0;
    for (double s : scores) mean += s;
    mean /= static_cast<double>(scores.size());
    double baseline_mean = 0.0;
    for (double b : baselines) baseline_mean += b;
    if (!baselines.empty()) baseline_mean /= static_cast<double>(baselines.size());

    print_row("Average", mean,
              baselines.empty() ? std::nullopt : std::optional{baseline_mean});
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"visual-perturbation training toolkit"};
    app.require_subcommand(1);
    app.config_formatter(std::make_shared<JsonConfig>());
    app.set_config("--config", "", "JSON config; explicit flags win");

    PerturbArgs perturb;
    auto* cmd_perturb = app.add_subcommand("perturb", "augment a dataset with visual perturbations");
    cmd_perturb->add_option("--manifest", perturb.manifest, "input JSON-lines manifest")
        ->required()->check(CLI::ExistingFile);
    cmd_perturb->add_option("--images-root", perturb.images_root, "directory of input images")
        ->required()->check(CLI::ExistingDirectory);
    cmd_perturb->add_option("--out", perturb.out, "output directory")->required();
    cmd_perturb->add_option("--seed", perturb.seed, "global seed")->required();
    cmd_perturb->add_option("--ops", perturb.ops, "comma list of perturbation kinds")
        ->capture_default_str();
    cmd_perturb->add_option("--jobs", perturb.jobs, "worker threads")
        ->check(CLI::Range(1u, 64u))->capture_default_str();

    BuildArgs build;
    auto* cmd_build = app.add_subcommand("build", "build SFT/DPO datasets by rejection sampling");
    cmd_build->require_subcommand(1);
    auto* cmd_build_sft = cmd_build->add_subcommand("sft", "positive-only dataset");
    auto* cmd_build_dpo = cmd_build->add_subcommand("dpo", "preference-pair dataset");
    for (auto* sub : {cmd_build_sft, cmd_build_dpo}) {
        sub->add_option("--augmented", build.augmented, "augmented manifest")
            ->required()->check(CLI::ExistingFile);
        sub->add_option("--oracle", build.oracle, "response oracle, scripted:<path>")
            ->required();
        sub->add_option("--out", build.out, "output JSON-lines file")->required();
    }

    TrainToyArgs train;
    auto* cmd_train = app.add_subcommand("train-toy", "train the toy policy");
    cmd_train->add_option("--algo", train.algo, "training algorithm")
        ->required()->check(CLI::IsMember({"grpo", "sft", "dpo"}));
    cmd_train->add_option("--vp", train.vp, "visual perturbation on/off")
        ->required()->check(CLI::IsMember({"on", "off"}));
    cmd_train->add_option("--seed", train.seed, "global seed")->required();
    cmd_train->add_option("--preset", train.preset, "hyperparameter preset")
        ->check(CLI::IsMember({"toy", "paper-defaults"}))->capture_default_str();
    cmd_train->add_option("--iters", train.iters, "GRPO iterations (preset default)");
    cmd_train->add_option("--epochs", train.epochs, "SFT/DPO epochs (preset default)");
    cmd_train->add_option("--lr", train.lr, "learning-rate override");
    cmd_train->add_option("--tasks", train.tasks, "training task count")
        ->check(CLI::Range(std::size_t{1}, std::size_t{100000}))->capture_default_str();
    cmd_train->add_option("--eval-tasks", train.eval_tasks, "held-out task count")
        ->check(CLI::Range(std::size_t{1}, std::size_t{100000}))->capture_default_str();
    cmd_train->add_option("--out-dir", train.out_dir, "output directory")->required();

    EvalArgs eval;
    auto* cmd_eval = app.add_subcommand("eval", "score predictions against a manifest");
    cmd_eval->add_option("--predictions", eval.predictions, "JSON-lines {id, output}")
        ->required()->check(CLI::ExistingFile);
    cmd_eval->add_option("--manifest", eval.manifest, "gold manifest")
        ->required()->check(CLI::ExistingFile);
    cmd_eval->add_option("--out", eval.out, "score report JSON")->required();
    cmd_eval->add_flag("--allow-partial", eval.allow_partial,
                       "accept an empty prediction list");

    ErankArgs erank;
    auto* cmd_erank = app.add_subcommand("erank", "effective rank of a CSV matrix");
    auto* opt_matrix = cmd_erank->add_option("--matrix", erank.matrix, "matrix CSV")
        ->check(CLI::ExistingFile);
    auto* opt_before = cmd_erank->add_option("--before", erank.before, "matrix CSV before")
        ->check(CLI::ExistingFile);
    auto* opt_after = cmd_erank->add_option("--after", erank.after, "matrix CSV after")
        ->check(CLI::ExistingFile);
    opt_matrix->excludes(opt_before)->excludes(opt_after);
    opt_before->needs(opt_after);
    opt_after->needs(opt_before);

    ReportArgs report;
    auto* cmd_report = app.add_subcommand("report", "benchmark table with averages and changes");
    cmd_report->add_option("files", report.score_files, "score report JSONs")
        ->check(CLI::ExistingFile);
    cmd_report->add_option("--values", report.values, "comma list of benchmark scores");
    cmd_report->add_option("--names", report.names, "comma list of benchmark names");
    cmd_report->add_option("--baseline", report.baseline,
                           "comma list of baseline scores for change annotations");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (cmd_perturb->parsed()) return run_perturb(perturb);
        if (cmd_build->parsed())
            return run_build(build, cmd_build_dpo->parsed());
        if (cmd_train->parsed()) return run_train_toy(train);
        if (cmd_eval->parsed()) return run_eval(eval);
        if (cmd_erank->parsed()) {
            if (erank.matrix.empty() && erank.before.empty()) {
                std::cerr << "pass --matrix or --before/--after\n";
                return 2;
            }
            return run_erank(erank);
        }
        if (cmd_report->parsed()) return run_report(report);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
