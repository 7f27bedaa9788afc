// Command-line surface: dataset preparation, adversarial training,
// augmentation, verification metrics, and curve plotting over one model
// checkpoint format. Exit codes: 0 success, 1 usage, 2 data or numeric
// failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "faceaug/augment.hpp"
#include "faceaug/checkpoint.hpp"
#include "faceaug/errors.hpp"
#include "faceaug/evalproto.hpp"
#include "faceaug/plot.hpp"
#include "faceaug/synthetic.hpp"
#include "faceaug/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string join_argv(int argc, char** argv) {
    std::string s;
    for (int i = 0; i < argc; ++i) {
        if (i) s += ' ';
        s += argv[i];
    }
    return s;
}

void write_run_json(const std::string& out_dir, const std::string& command,
                    const std::string& subcommand, json extra) {
    json j{{"command", command}, {"subcommand", subcommand}, {"version", FACEAUG_VERSION}};
    j.update(extra);
    fs::create_directories(out_dir);
    const std::string path = (fs::path(out_dir) / "run.json").string();
    std::ofstream out(path);
    if (!out) throw faceaug::IoError("cannot write " + path);
    out << j.dump(2) << "\n";
}

// Unique <identity>/<stem>.png name per output directory, disambiguating
// stem collisions across sidecar-manifest entries.
std::string normalized_name(const faceaug::ManifestEntry& entry, std::set<std::string>& used) {
    const std::string stem = fs::path(entry.relative_path).stem().string();
    std::string rel = entry.identity + "/" + stem + ".png";
    for (int suffix = 2; !used.insert(rel).second; ++suffix)
        rel = entry.identity + "/" + stem + "_" + std::to_string(suffix) + ".png";
    return rel;
}

void materialize(const faceaug::DatasetManifest& manifest, const std::string& out_dir) {
    std::set<std::string> used;
    for (const faceaug::ManifestEntry& entry : manifest.entries) {
        const faceaug::FaceImage img =
            faceaug::load_and_crop(manifest, entry, manifest.canonical_size);
        faceaug::write_image_png((fs::path(out_dir) / normalized_name(entry, used)).string(),
                                 img.pixels);
    }
}

struct PrepareArgs {
    std::string out, data;
    bool synthetic = false;
    int size = 128;
    int identities = 8;
    int images_per_identity = 20;
    int channels = 1;
    uint64_t seed = 1;
    int split_per_identity = 0;
    int pairs_per_class = 200;
};

int run_prepare(const PrepareArgs& a, const std::string& command) {
    const std::string full_dir = (fs::path(a.out) / "full").string();
    faceaug::DatasetManifest manifest;
    if (a.synthetic) {
        faceaug::SyntheticSpec spec;
        spec.identities = a.identities;
        spec.images_per_identity = a.images_per_identity;
        spec.size = a.size;
        spec.channels = a.channels;
        spec.seed = a.seed;
        manifest = faceaug::generate_synthetic_dataset(spec, full_dir);
    } else {
        const faceaug::DatasetManifest source = faceaug::scan_manifest(a.data, a.size);
        for (const std::string& w : source.warnings) std::cerr << "warning: " << w << "\n";
        materialize(source, full_dir);
        manifest = faceaug::scan_manifest(full_dir, a.size);
    }
    std::printf("prepared %zu images, %zu identities under %s\n", manifest.entries.size(),
                manifest.identities().size(), full_dir.c_str());

    json meta{{"seed", a.seed},
              {"size", a.size},
              {"mode", a.synthetic ? "synthetic" : "normalize"},
              {"images", manifest.entries.size()}};
    if (a.split_per_identity > 0) {
        const faceaug::SplitManifests split =
            faceaug::low_shot_split(manifest, a.split_per_identity, a.seed);
        for (const char* part : {"train", "holdout"}) {
            const auto& m = std::string(part) == "train" ? split.train : split.holdout;
            const std::string dir = (fs::path(a.out) / part).string();
            for (const faceaug::ManifestEntry& e : m.entries) {
                const fs::path dst = fs::path(dir) / e.relative_path;
                fs::create_directories(dst.parent_path());
                fs::copy_file(fs::path(full_dir) / e.relative_path, dst,
                              fs::copy_options::overwrite_existing);
            }
            std::printf("split %s: %zu images under %s\n", part, m.entries.size(), dir.c_str());
        }
        const std::string pairs_path = (fs::path(a.out) / "pairs.tsv").string();
        faceaug::write_pairs_file(
            faceaug::scan_manifest((fs::path(a.out) / "holdout").string(), a.size), pairs_path,
            a.pairs_per_class, a.seed);
        std::printf("pairs file: %s\n", pairs_path.c_str());
        meta["split_per_identity"] = a.split_per_identity;
    }
    write_run_json(a.out, command, "prepare", meta);
    return 0;
}

struct TrainArgs {
    std::string config, data, out, resume;
    std::optional<uint64_t> seed;
};

int run_train(const TrainArgs& a, const std::string& command) {
    faceaug::TrainConfig cfg;
    if (!a.resume.empty()) {
        cfg = faceaug::checkpoint_config(a.resume);
    } else {
        if (!a.config.empty()) cfg = faceaug::load_train_config(a.config);
        if (a.seed) cfg.seed = *a.seed;
    }
    const faceaug::DatasetManifest manifest = faceaug::scan_manifest(a.data, cfg.image_size);
    for (const std::string& w : manifest.warnings) std::cerr << "warning: " << w << "\n";

    write_run_json(a.out, command, "train",
                   {{"config_hash", faceaug::train_config_hash(cfg)},
                    {"seed", cfg.seed},
                    {"resumed_from", a.resume}});
    faceaug::save_train_config(cfg, (fs::path(a.out) / "config.json").string());

    const faceaug::TrainResult result =
        a.resume.empty() ? faceaug::train(manifest, cfg, a.out)
                         : faceaug::train_resume(a.resume, manifest, a.out);
    if (!result.log.records.empty()) {
        const faceaug::RunRecord& last = result.log.records.back();
        std::printf("trained %lld steps over %d epochs, gen_loss %.6g, disc_loss %.6g\n",
                    static_cast<long long>(last.step), last.epoch, last.gen_loss,
                    last.disc_loss);
    }
    std::printf("checkpoint: %s\nrun log: %s\n", result.final_checkpoint.c_str(),
                (fs::path(a.out) / "runlog.csv").string().c_str());
    return 0;
}

struct AugmentArgs {
    std::string checkpoint, data, out;
    int k = 1;
    uint64_t seed = 1;
    bool overwrite = false;
    bool save_saliency = false;
    double noise_scale = -1.0;
    bool has_noise_scale = false;
};

int run_augment(const AugmentArgs& a, const std::string& command) {
    const faceaug::TrainConfig cfg = faceaug::checkpoint_config(a.checkpoint);
    const faceaug::DatasetManifest manifest = faceaug::scan_manifest(a.data, cfg.image_size);
    for (const std::string& w : manifest.warnings) std::cerr << "warning: " << w << "\n";

    faceaug::AugmentOptions opt;
    opt.k = a.k;
    opt.seed = a.seed;
    opt.overwrite = a.overwrite;
    opt.save_saliency = a.save_saliency;
    if (a.has_noise_scale) opt.noise_scale = static_cast<float>(a.noise_scale);

    const faceaug::DatasetManifest out = faceaug::augment(manifest, a.checkpoint, opt, a.out);
    write_run_json(a.out, command, "augment",
                   {{"config_hash", faceaug::train_config_hash(cfg)},
                    {"seed", a.seed},
                    {"k", a.k},
                    {"inputs", manifest.entries.size()},
                    {"outputs", out.entries.size()}});
    std::printf("augmented %zu inputs x k=%d -> %zu samples under %s\n", manifest.entries.size(),
                a.k, out.entries.size(), a.out.c_str());
    return 0;
}

struct EvaluateArgs {
    std::string checkpoint, pairs, out;
};

int run_evaluate(const EvaluateArgs& a, const std::string& command) {
    std::unique_ptr<faceaug::Trainer> trainer = faceaug::load_checkpoint(a.checkpoint);
    const faceaug::TrainConfig& cfg = trainer->config();
    const std::vector<faceaug::VerifyPair> pairs =
        faceaug::load_verify_pairs(a.pairs, cfg.image_size, cfg.channels);
    const faceaug::VerificationReport report =
        faceaug::verify(trainer->embedder(), pairs, faceaug::ThresholdSweep{});
    const std::string report_path = (fs::path(a.out) / "verification_report.csv").string();
    fs::create_directories(a.out);
    faceaug::write_verification_report(report, report_path);
    write_run_json(a.out, command, "evaluate",
                   {{"config_hash", faceaug::train_config_hash(cfg)},
                    {"pairs", pairs.size()},
                    {"best_threshold", report.best_threshold},
                    {"best_accuracy", report.best_accuracy}});
    std::printf("%zu pairs, best threshold %.6g, accuracy %.6g\nreport: %s\n", pairs.size(),
                report.best_threshold, report.best_accuracy, report_path.c_str());
    return 0;
}

struct MinImagesArgs {
    std::string checkpoint, data, out;
    double target = 0.95;
    uint64_t seed = 1;
};

int run_min_images(const MinImagesArgs& a, const std::string& command) {
    const faceaug::TrainConfig cfg = faceaug::checkpoint_config(a.checkpoint);
    const faceaug::DatasetManifest manifest = faceaug::scan_manifest(a.data, cfg.image_size);
    const faceaug::MinImagesReport report =
        faceaug::min_images(manifest, a.checkpoint, a.target, a.seed);
    const std::string report_path = (fs::path(a.out) / "min_images_report.csv").string();
    fs::create_directories(a.out);
    faceaug::write_min_images_report(report, report_path);
    write_run_json(a.out, command, "min-images",
                   {{"config_hash", faceaug::train_config_hash(cfg)},
                    {"seed", a.seed},
                    {"target_accuracy", a.target}});
    if (report.aggregate_k == faceaug::MinImagesReport::kUnreached)
        std::printf("target %.4g unreached\n", a.target);
    else
        std::printf("aggregate minimum gallery size: %d (target %.4g)\n", report.aggregate_k,
                    a.target);
    std::printf("report: %s\n", report_path.c_str());
    return 0;
}

struct CompareArgs {
    std::string config, data, pairs, out;
    int k = 0;
    std::vector<uint64_t> seeds;
    bool no_adversarial = false;
};

int run_compare(const CompareArgs& a, const std::string& command) {
    faceaug::ExperimentSpec spec;
    if (!a.config.empty()) spec.config = faceaug::load_train_config(a.config);
    spec.train_manifest = faceaug::scan_manifest(a.data, spec.config.image_size);
    spec.pairs_path = a.pairs;
    spec.k = a.k;
    spec.seeds = a.seeds;
    spec.out_dir = a.out;
    spec.arm_b_adversarial = !a.no_adversarial;

    write_run_json(a.out, command, "compare",
                   {{"config_hash", faceaug::train_config_hash(spec.config)},
                    {"seeds", a.seeds},
                    {"k", a.k}});
    const faceaug::CompareReport report = faceaug::compare_augmentation(spec);
    for (const auto& row : report.rows)
        std::printf("seed %llu arm %c: accuracy %.6g (threshold %.6g)\n",
                    static_cast<unsigned long long>(row.seed), row.arm, row.best_accuracy,
                    row.best_threshold);
    std::printf("mean A %.6g, mean B %.6g, mean B-A %.6g, B wins or ties %d/%zu\n", report.mean_a,
                report.mean_b, report.mean_diff, report.b_wins_or_ties, a.seeds.size());
    std::printf("report: %s\n", (fs::path(a.out) / "compare_report.csv").string().c_str());
    return 0;
}

struct PlotArgs {
    std::string input, out;
};

int run_plot(const PlotArgs& a, const std::string& command) {
    const faceaug::PlotResult result = faceaug::plot(a.input, a.out);
    write_run_json(a.out, command, "plot",
                   {{"input", a.input}, {"image", result.image_path}, {"csv", result.csv_path}});
    std::printf("image: %s\ncsv: %s\n", result.image_path.c_str(), result.csv_path.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    const std::string command = join_argv(argc, argv);
    CLI::App app{"saliency-gated adversarial augmentation for face verification"};
    app.require_subcommand(1);

    PrepareArgs prepare;
    CLI::App* sub_prepare =
        app.add_subcommand("prepare", "normalize a dataset or generate a synthetic one");
    sub_prepare->add_option("--out", prepare.out, "output directory")->required();
    auto* opt_data = sub_prepare->add_option("--data", prepare.data, "source dataset root");
    auto* opt_synth =
        sub_prepare->add_flag("--synthetic", prepare.synthetic, "generate procedural toy faces");
    opt_data->excludes(opt_synth);
    sub_prepare->add_option("--size", prepare.size, "canonical square size");
    sub_prepare->add_option("--identities", prepare.identities, "synthetic identity count");
    sub_prepare->add_option("--images-per-identity", prepare.images_per_identity,
                            "synthetic variants per identity");
    sub_prepare->add_option("--channels", prepare.channels, "synthetic channel count (1 or 3)");
    sub_prepare->add_option("--seed", prepare.seed, "rng seed");
    sub_prepare->add_option("--split-per-identity", prepare.split_per_identity,
                            "also emit a low-shot train/holdout split and a pairs file");
    sub_prepare->add_option("--pairs-per-class", prepare.pairs_per_class,
                            "pairs per class for the emitted pairs file");

    TrainArgs train;
    CLI::App* sub_train = app.add_subcommand("train", "run the adversarial training loop");
    auto* opt_cfg = sub_train->add_option("--config", train.config, "TrainConfig JSON file");
    sub_train->add_option("--data", train.data, "dataset root")->required();
    sub_train->add_option("--out", train.out, "output directory")->required();
    auto* opt_resume =
        sub_train->add_option("--resume", train.resume, "checkpoint to continue from");
    opt_resume->excludes(opt_cfg);
    uint64_t train_seed = 0;
    auto* opt_seed = sub_train->add_option("--seed", train_seed, "override the config seed");

    AugmentArgs augment;
    CLI::App* sub_augment = app.add_subcommand("augment", "emit k adversarial variants per image");
    sub_augment->add_option("--checkpoint", augment.checkpoint, "trained model")->required();
    sub_augment->add_option("--data", augment.data, "dataset root")->required();
    sub_augment->add_option("--out", augment.out, "output directory")->required();
    sub_augment->add_option("--k", augment.k, "variants per input")->required();
    sub_augment->add_option("--seed", augment.seed, "rng seed");
    sub_augment->add_flag("--overwrite", augment.overwrite, "replace existing outputs");
    sub_augment->add_flag("--save-saliency", augment.save_saliency,
                          "also write grayscale saliency maps");
    auto* opt_noise = sub_augment->add_option("--noise-scale", augment.noise_scale,
                                              "latent noise scale (default: training value)");

    EvaluateArgs evaluate;
    CLI::App* sub_evaluate =
        app.add_subcommand("evaluate", "verification accuracy over a pairs file");
    sub_evaluate->add_option("--checkpoint", evaluate.checkpoint, "trained model")->required();
    sub_evaluate->add_option("--pairs", evaluate.pairs, "pairs file")->required();
    sub_evaluate->add_option("--out", evaluate.out, "output directory")->required();

    MinImagesArgs min_images;
    CLI::App* sub_min =
        app.add_subcommand("min-images", "smallest gallery reaching a rank-1 target");
    sub_min->add_option("--checkpoint", min_images.checkpoint, "trained model")->required();
    sub_min->add_option("--data", min_images.data, "dataset root")->required();
    sub_min->add_option("--out", min_images.out, "output directory")->required();
    sub_min->add_option("--target-accuracy", min_images.target, "rank-1 accuracy target");
    sub_min->add_option("--seed", min_images.seed, "gallery sampling seed");

    CompareArgs compare;
    CLI::App* sub_compare =
        app.add_subcommand("compare", "augmentation benefit: embedder alone vs full pipeline");
    sub_compare->add_option("--config", compare.config, "TrainConfig JSON file");
    sub_compare->add_option("--data", compare.data, "low-shot train split root")->required();
    sub_compare->add_option("--pairs", compare.pairs, "held-out pairs file")->required();
    sub_compare->add_option("--out", compare.out, "output directory")->required();
    sub_compare->add_option("--k", compare.k, "augmentation variants per image for arm B");
    sub_compare->add_option("--seeds", compare.seeds, "seeds, comma separated")
        ->required()
        ->delimiter(',');
    sub_compare->add_flag("--no-adversarial", compare.no_adversarial,
                          "arm B trains exactly like arm A (null comparison)");

    PlotArgs plot;
    CLI::App* sub_plot = app.add_subcommand("plot", "render a run log or report CSV");
    sub_plot->add_option("--input", plot.input, "CSV to plot")->required();
    sub_plot->add_option("--out", plot.out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return 1;
    }

    try {
        if (app.got_subcommand(sub_prepare)) {
            if (!prepare.synthetic && prepare.data.empty()) {
                std::cerr << "prepare: pass --data or --synthetic\n\n"
                          << sub_prepare->help() << "\n";
                return 1;
            }
            return run_prepare(prepare, command);
        }
        if (app.got_subcommand(sub_train)) {
            if (opt_seed->count()) train.seed = train_seed;
            return run_train(train, command);
        }
        if (app.got_subcommand(sub_augment)) {
            augment.has_noise_scale = opt_noise->count() > 0;
            return run_augment(augment, command);
        }
        if (app.got_subcommand(sub_evaluate)) return run_evaluate(evaluate, command);
        if (app.got_subcommand(sub_min)) return run_min_images(min_images, command);
        if (app.got_subcommand(sub_compare)) return run_compare(compare, command);
        if (app.got_subcommand(sub_plot)) return run_plot(plot, command);
    } catch (const faceaug::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
