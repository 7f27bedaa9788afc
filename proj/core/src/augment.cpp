#include "faceaug/augment.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "faceaug/checkpoint.hpp"
#include "faceaug/errors.hpp"

namespace faceaug {

namespace {

namespace fs = std::filesystem;

std::string variant_name(const ManifestEntry& entry, int entry_index, int variant) {
    const std::string stem = fs::path(entry.relative_path).stem().string();
    char buf[64];
    std::snprintf(buf, sizeof(buf), "_%05d_aug%03d.png", entry_index, variant);
    return entry.identity + "/" + stem + buf;
}

}  // namespace

DatasetManifest augment(const DatasetManifest& manifest, const std::string& checkpoint_path,
                        const AugmentOptions& options, const std::string& out_dir) {
    if (options.k < 1) throw ConfigError("augment: k must be >= 1");
    if (manifest.entries.empty()) throw EmptyDataset("augment: empty manifest");

    std::unique_ptr<Trainer> trainer = load_checkpoint(checkpoint_path);
    const TrainConfig& cfg = trainer->config();
    if (manifest.canonical_size != cfg.image_size)
        throw ConfigError("augment: manifest canonical size " +
                          std::to_string(manifest.canonical_size) + " != model image size " +
                          std::to_string(cfg.image_size));
    const float noise = options.noise_scale.value_or(cfg.noise_scale);
    if (noise < 0.0f) throw ConfigError("augment: noise_scale must be >= 0");

    const int n = static_cast<int>(manifest.entries.size());
    std::vector<std::string> rels;
    rels.reserve(static_cast<size_t>(n) * options.k);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < options.k; ++j)
            rels.push_back(variant_name(manifest.entries[static_cast<size_t>(i)], i, j));
    if (!options.overwrite) {
        for (const std::string& rel : rels)
            if (fs::exists(fs::path(out_dir) / rel))
                throw IoError("augment: output exists, pass overwrite to replace: " +
                              (fs::path(out_dir) / rel).string());
        if (fs::exists(fs::path(out_dir) / "manifest.tsv"))
            throw IoError("augment: output exists, pass overwrite to replace: " +
                          (fs::path(out_dir) / "manifest.tsv").string());
    }
    fs::create_directories(out_dir);

    Generator& gen = trainer->generator();
    SaliencyExtractor& sal = trainer->saliency();
    const Fwd fwd = Fwd::eval();
    size_t out_index = 0;
    for (int i = 0; i < n; ++i) {
        const ManifestEntry& entry = manifest.entries[static_cast<size_t>(i)];
        const FaceImage img = load_and_crop(manifest, entry, cfg.image_size);
        if (img.pixels.dim(2) != cfg.channels)
            throw ConfigError("augment: " + entry.relative_path + " has " +
                              std::to_string(img.pixels.dim(2)) + " channels, model expects " +
                              std::to_string(cfg.channels));
        WhitenStats stats;
        const Tensor white = whiten(img.pixels, &stats);
        const Tensor x =
            white.reshaped({1, cfg.image_size, cfg.image_size, cfg.channels});

        Tape enc_tape(false);
        const Tensor features = gen.encode(enc_tape, enc_tape.input(x), fwd).value();

        for (int j = 0; j < options.k; ++j) {
            Tensor noised = features;
            if (noise > 0.0f) {
                Rng stream = Rng(options.seed).fork(3000 + static_cast<uint64_t>(i))
                                 .fork(1 + static_cast<uint64_t>(j));
                for (int64_t q = 0; q < noised.size(); ++q) noised[q] += noise * stream.normal_f();
            }
            Tape t(false);
            Var f = t.input(std::move(noised));
            Var p = gen.decode(t, f, fwd);
            Var s = sal.extract(t, f, fwd);
            const Tensor x_adv = compose_adversarial(x, p.value(), s.value(), -3.0f, 3.0f);
            if (!x_adv.all_finite())
                throw NumericalError("augment: non-finite sample for " + entry.relative_path);
            const Tensor stored = dewhiten(x_adv, stats)
                                      .reshaped({cfg.image_size, cfg.image_size, cfg.channels});
            const std::string rel = rels[out_index++];
            write_image_png((fs::path(out_dir) / rel).string(), stored);
            if (options.save_saliency) {
                const Tensor map =
                    s.value().reshaped({cfg.image_size, cfg.image_size, 1});
                write_image_png((fs::path(out_dir) / "saliency" / rel).string(), map);
            }
        }
    }

    const fs::path sidecar = fs::path(out_dir) / "manifest.tsv";
    std::ofstream out(sidecar);
    if (!out) throw IoError("cannot write " + sidecar.string());
    out_index = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < options.k; ++j)
            out << rels[out_index++] << "\t" << manifest.entries[static_cast<size_t>(i)].identity
                << "\n";
    if (!out) throw IoError("failed writing " + sidecar.string());
    out.close();

    return scan_manifest(out_dir, cfg.image_size);
}

}  // namespace faceaug
