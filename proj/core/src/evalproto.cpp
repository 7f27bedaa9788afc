#include "faceaug/evalproto.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include "faceaug/augment.hpp"
#include "faceaug/checkpoint.hpp"
#include "faceaug/errors.hpp"

namespace faceaug {

namespace {

namespace fs = std::filesystem;

// Absolute paths ride through load_and_crop by rooting a throwaway manifest
// at "/"; path append replaces the root when the right side is absolute.
Tensor load_whitened(const std::string& abs_path, int image_size, int channels,
                     const std::string& what) {
    DatasetManifest m;
    m.root = "/";
    m.canonical_size = image_size;
    ManifestEntry e;
    e.relative_path = abs_path;
    const FaceImage img = load_and_crop(m, e, image_size);
    if (img.pixels.dim(2) != channels)
        throw ConfigError(what + ": " + abs_path + " has " + std::to_string(img.pixels.dim(2)) +
                          " channels, model expects " + std::to_string(channels));
    return whiten(img.pixels);
}

std::vector<std::vector<int>> group_by_identity(const std::vector<std::string>& identities,
                                                std::vector<std::string>& names_out) {
    std::map<std::string, int> index;
    std::vector<std::vector<int>> groups;
    for (size_t i = 0; i < identities.size(); ++i) {
        auto [it, inserted] = index.emplace(identities[i], static_cast<int>(groups.size()));
        if (inserted) groups.emplace_back();
        groups[static_cast<size_t>(it->second)].push_back(static_cast<int>(i));
    }
    names_out.clear();
    names_out.resize(groups.size());
    for (const auto& [name, g] : index) names_out[static_cast<size_t>(g)] = name;
    return groups;
}

// Eval-mode embeddings for every dataset row, chunked to bound tape size.
Tensor embed_rows(Embedder& embedder, const LoadedDataset& ds) {
    const int n = ds.count();
    Tensor out;
    int64_t row_size = 0;
    for (int start = 0; start < n; start += 64) {
        std::vector<int> chunk;
        for (int i = start; i < std::min(n, start + 64); ++i) chunk.push_back(i);
        const Tensor emb = embedder.embed_eval(ds.gather(chunk).images);
        if (out.empty()) {
            row_size = emb.dim(1);
            out = Tensor({n, static_cast<int>(row_size)});
        }
        std::copy(emb.data(), emb.data() + emb.size(), out.data() + start * row_size);
    }
    return out;
}

LoadedDataset concat_datasets(const LoadedDataset& a, const LoadedDataset& b) {
    LoadedDataset out;
    const auto& as = a.images.shape();
    const auto& bs = b.images.shape();
    if (as.size() != bs.size() || !std::equal(as.begin() + 1, as.end(), bs.begin() + 1))
        throw ShapeError("concat: incompatible datasets " + a.images.shape_str() + " and " +
                         b.images.shape_str());
    std::vector<int> shape = as;
    shape[0] = as[0] + bs[0];
    out.images = Tensor(shape);
    std::copy(a.images.data(), a.images.data() + a.images.size(), out.images.data());
    std::copy(b.images.data(), b.images.data() + b.images.size(),
              out.images.data() + a.images.size());
    out.identities = a.identities;
    out.identities.insert(out.identities.end(), b.identities.begin(), b.identities.end());
    out.paths = a.paths;
    out.paths.insert(out.paths.end(), b.paths.begin(), b.paths.end());
    out.stats = a.stats;
    out.stats.insert(out.stats.end(), b.stats.begin(), b.stats.end());
    return out;
}

std::string canonical_of(const std::string& path) {
    std::error_code ec;
    const fs::path c = fs::weakly_canonical(path, ec);
    return ec ? fs::absolute(path).lexically_normal().string() : c.string();
}

}  // namespace

std::vector<VerifyPair> load_verify_pairs(const std::string& pairs_path, int image_size,
                                          int channels) {
    const std::vector<PairRecord> records = read_pairs(pairs_path);
    if (records.empty()) throw ConfigError(pairs_path + ": no pairs");
    std::vector<VerifyPair> pairs;
    pairs.reserve(records.size());
    for (const PairRecord& r : records) {
        VerifyPair p;
        p.a = load_whitened(r.path1, image_size, channels, "pairs");
        p.b = load_whitened(r.path2, image_size, channels, "pairs");
        p.same = r.same;
        pairs.push_back(std::move(p));
    }
    return pairs;
}

SplitManifests low_shot_split(const DatasetManifest& manifest, int per_identity, uint64_t seed) {
    if (per_identity < 1) throw ConfigError("split: per_identity must be >= 1");
    std::vector<std::string> identities;
    std::vector<std::string> id_of(manifest.entries.size());
    for (size_t i = 0; i < manifest.entries.size(); ++i) id_of[i] = manifest.entries[i].identity;
    std::vector<std::vector<int>> groups = group_by_identity(id_of, identities);

    SplitManifests out;
    out.train.root = out.holdout.root = manifest.root;
    out.train.canonical_size = out.holdout.canonical_size = manifest.canonical_size;
    for (size_t g = 0; g < groups.size(); ++g) {
        if (static_cast<int>(groups[g].size()) <= per_identity)
            throw ConfigError("split: identity " + identities[g] + " has only " +
                              std::to_string(groups[g].size()) + " images, need more than " +
                              std::to_string(per_identity));
        Rng rng = Rng(seed).fork(500 + static_cast<uint64_t>(g));
        rng.shuffle(groups[g]);
        for (size_t j = 0; j < groups[g].size(); ++j) {
            const ManifestEntry& e = manifest.entries[static_cast<size_t>(groups[g][j])];
            (j < static_cast<size_t>(per_identity) ? out.train : out.holdout).entries.push_back(e);
        }
    }
    auto order = [](const ManifestEntry& a, const ManifestEntry& b) {
        return a.identity != b.identity ? a.identity < b.identity
                                        : a.relative_path < b.relative_path;
    };
    std::sort(out.train.entries.begin(), out.train.entries.end(), order);
    std::sort(out.holdout.entries.begin(), out.holdout.entries.end(), order);
    return out;
}

void write_pairs_file(const DatasetManifest& manifest, const std::string& out_path,
                      int pairs_per_class, uint64_t seed) {
    if (pairs_per_class < 1) throw ConfigError("pairs: pairs_per_class must be >= 1");
    if (manifest.entries.size() < 2) throw ConfigError("pairs: need at least 2 images");
    std::vector<std::pair<int, int>> same, diff;
    for (size_t i = 0; i < manifest.entries.size(); ++i)
        for (size_t j = i + 1; j < manifest.entries.size(); ++j) {
            auto& bucket =
                manifest.entries[i].identity == manifest.entries[j].identity ? same : diff;
            bucket.emplace_back(static_cast<int>(i), static_cast<int>(j));
        }
    if (same.empty() || diff.empty())
        throw ConfigError("pairs: need both a same-identity and a different-identity pair");
    Rng rng(seed);
    rng.shuffle(same);
    rng.shuffle(diff);
    same.resize(std::min<size_t>(same.size(), static_cast<size_t>(pairs_per_class)));
    diff.resize(std::min<size_t>(diff.size(), static_cast<size_t>(pairs_per_class)));

    const fs::path out_dir = fs::absolute(out_path).parent_path();
    fs::create_directories(out_dir);
    auto rel = [&](const ManifestEntry& e) {
        const fs::path target = fs::absolute(fs::path(manifest.root) / e.relative_path);
        std::error_code ec;
        const fs::path r = fs::relative(target, out_dir, ec);
        return (ec || r.empty()) ? target.string() : r.string();
    };
    std::ofstream out(out_path);
    if (!out) throw IoError("cannot write " + out_path);
    for (const auto& [i, j] : same)
        out << rel(manifest.entries[static_cast<size_t>(i)]) << "\t"
            << rel(manifest.entries[static_cast<size_t>(j)]) << "\t1\n";
    for (const auto& [i, j] : diff)
        out << rel(manifest.entries[static_cast<size_t>(i)]) << "\t"
            << rel(manifest.entries[static_cast<size_t>(j)]) << "\t0\n";
    if (!out) throw IoError("failed writing " + out_path);
}

MinImagesReport min_images(const DatasetManifest& manifest, const std::string& checkpoint_path,
                           double target_accuracy, uint64_t seed) {
    if (!(target_accuracy > 0.0) || target_accuracy > 1.0)
        throw ConfigError("min_images: target_accuracy must be in (0,1]");
    std::unique_ptr<Trainer> trainer = load_checkpoint(checkpoint_path);
    const TrainConfig& cfg = trainer->config();
    if (manifest.canonical_size != cfg.image_size)
        throw ConfigError("min_images: manifest canonical size " +
                          std::to_string(manifest.canonical_size) + " != model image size " +
                          std::to_string(cfg.image_size));
    const LoadedDataset ds = load_dataset(manifest);

    std::vector<std::string> names;
    std::vector<std::vector<int>> groups = group_by_identity(ds.identities, names);
    const size_t n_groups = groups.size();
    for (size_t g = 0; g < n_groups; ++g)
        if (groups[g].size() < 2)
            throw ConfigError("min_images: identity " + names[g] + " has fewer than 2 images");

    const Tensor emb = embed_rows(trainer->embedder(), ds);
    const int dim = emb.dim(1);

    MinImagesReport report;
    report.target_accuracy = target_accuracy;
    report.seed = seed;
    report.identities.resize(n_groups);
    int max_k = 0;
    for (size_t g = 0; g < n_groups; ++g) {
        Rng rng = Rng(seed).fork(7000 + static_cast<uint64_t>(g));
        rng.shuffle(groups[g]);
        report.identities[g].identity = names[g];
        report.identities[g].available = static_cast<int>(groups[g].size());
        max_k = std::max(max_k, static_cast<int>(groups[g].size()) - 1);
    }

    std::vector<double> means(n_groups * static_cast<size_t>(dim));
    for (int k = 1; k <= max_k; ++k) {
        for (size_t g = 0; g < n_groups; ++g) {
            const int take = std::min<int>(k, static_cast<int>(groups[g].size()));
            double* m = &means[g * static_cast<size_t>(dim)];
            std::fill(m, m + dim, 0.0);
            for (int j = 0; j < take; ++j) {
                const float* row = emb.data() + static_cast<int64_t>(groups[g][j]) * dim;
                for (int d = 0; d < dim; ++d) m[d] += row[d];
            }
            for (int d = 0; d < dim; ++d) m[d] /= take;
        }
        bool all_done = true;
        for (size_t g = 0; g < n_groups; ++g) {
            auto& per = report.identities[g];
            if (per.k_star != MinImagesReport::kUnreached) continue;
            if (static_cast<int>(groups[g].size()) <= k) {
                all_done = false;
                continue;
            }
            int correct = 0;
            const int probes = static_cast<int>(groups[g].size()) - k;
            for (size_t j = static_cast<size_t>(k); j < groups[g].size(); ++j) {
                const float* row = emb.data() + static_cast<int64_t>(groups[g][j]) * dim;
                size_t arg = 0;
                double best = std::numeric_limits<double>::infinity();
                for (size_t h = 0; h < n_groups; ++h) {
                    const double* m = &means[h * static_cast<size_t>(dim)];
                    double s = 0.0;
                    for (int d = 0; d < dim; ++d) {
                        const double diff = row[d] - m[d];
                        s += diff * diff;
                    }
                    if (s < best) {
                        best = s;
                        arg = h;
                    }
                }
                if (arg == g) ++correct;
            }
            const double acc = static_cast<double>(correct) / probes;
            per.accuracy = std::max(per.accuracy, acc);
            if (acc >= target_accuracy) {
                per.k_star = k;
                per.accuracy = acc;
            } else {
                all_done = false;
            }
        }
        if (all_done) break;
    }

    report.aggregate_k = 0;
    for (const auto& per : report.identities) {
        if (per.k_star == MinImagesReport::kUnreached) {
            report.aggregate_k = MinImagesReport::kUnreached;
            break;
        }
        report.aggregate_k = std::max(report.aggregate_k, per.k_star);
    }
    return report;
}

void write_min_images_report(const MinImagesReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "identity,available_images,k_star,accuracy_at_k_star\n";
    char buf[160];
    for (const auto& per : report.identities) {
        if (per.k_star == MinImagesReport::kUnreached)
            std::snprintf(buf, sizeof(buf), "%s,%d,unreached,%.10g\n", per.identity.c_str(),
                          per.available, per.accuracy);
        else
            std::snprintf(buf, sizeof(buf), "%s,%d,%d,%.10g\n", per.identity.c_str(),
                          per.available, per.k_star, per.accuracy);
        out << buf;
    }
    if (report.aggregate_k == MinImagesReport::kUnreached)
        out << "# aggregate_k_star=unreached\n";
    else
        out << "# aggregate_k_star=" << report.aggregate_k << "\n";
    std::snprintf(buf, sizeof(buf), "# target_accuracy=%.10g\n", report.target_accuracy);
    out << buf;
    out << "# seed=" << report.seed << "\n";
    if (!out) throw IoError("failed writing " + path);
}

CompareReport compare_augmentation(const ExperimentSpec& spec) {
    if (spec.seeds.size() < 2) throw ConfigError("compare: need at least 2 seeds");
    if (spec.k < 0) throw ConfigError("compare: k must be >= 0");
    spec.config.validate();

    std::set<std::string> train_paths;
    for (const ManifestEntry& e : spec.train_manifest.entries)
        train_paths.insert(
            canonical_of((fs::path(spec.train_manifest.root) / e.relative_path).string()));
    for (const PairRecord& r : read_pairs(spec.pairs_path))
        for (const std::string& p : {r.path1, r.path2})
            if (train_paths.count(canonical_of(p)))
                throw ConfigError("compare: train/eval overlap on " + p);

    const std::vector<VerifyPair> pairs =
        load_verify_pairs(spec.pairs_path, spec.config.image_size, spec.config.channels);
    const LoadedDataset real = load_dataset(spec.train_manifest);
    fs::create_directories(spec.out_dir);

    CompareReport report;
    const ThresholdSweep sweep;
    for (const uint64_t s : spec.seeds) {
        const fs::path seed_dir = fs::path(spec.out_dir) / ("seed_" + std::to_string(s));

        TrainConfig ca = spec.config;
        ca.seed = s;
        ca.lambda_adv = 0.0f;
        const std::string dir_a = (seed_dir / "arm_a").string();
        Trainer ta(ca);
        write_runlog_csv(ta.train(real, dir_a), dir_a + "/runlog.csv");
        const VerificationReport va = verify(ta.embedder(), pairs, sweep);
        report.rows.push_back({s, 'A', va.best_threshold, va.best_accuracy});

        const fs::path dir_b = seed_dir / "arm_b";
        LoadedDataset train_b = real;
        if (spec.arm_b_adversarial) {
            TrainConfig cb = spec.config;
            cb.seed = s;
            const std::string gan_dir = (dir_b / "gan").string();
            Trainer tb1(cb);
            write_runlog_csv(tb1.train(real, gan_dir), gan_dir + "/runlog.csv");
            if (spec.k >= 1) {
                AugmentOptions opt;
                opt.k = spec.k;
                opt.seed = s;
                opt.overwrite = true;
                const DatasetManifest aug =
                    augment(spec.train_manifest, gan_dir + "/ckpt_final.bin", opt,
                            (dir_b / "aug").string());
                train_b = concat_datasets(real, load_dataset(aug));
            }
        }
        TrainConfig cb3 = spec.config;
        cb3.seed = s;
        cb3.lambda_adv = 0.0f;
        const std::string final_dir = (dir_b / "final").string();
        Trainer tb(cb3);
        write_runlog_csv(tb.train(train_b, final_dir), final_dir + "/runlog.csv");
        const VerificationReport vb = verify(tb.embedder(), pairs, sweep);
        report.rows.push_back({s, 'B', vb.best_threshold, vb.best_accuracy});

        report.mean_a += va.best_accuracy;
        report.mean_b += vb.best_accuracy;
        if (vb.best_accuracy >= va.best_accuracy) ++report.b_wins_or_ties;
    }
    report.mean_a /= static_cast<double>(spec.seeds.size());
    report.mean_b /= static_cast<double>(spec.seeds.size());
    report.mean_diff = report.mean_b - report.mean_a;
    write_compare_report(report, (fs::path(spec.out_dir) / "compare_report.csv").string());
    return report;
}

void write_compare_report(const CompareReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "seed,arm,best_threshold,best_accuracy\n";
    char buf[160];
    for (const auto& row : report.rows) {
        std::snprintf(buf, sizeof(buf), "%llu,%c,%.10g,%.10g\n",
                      static_cast<unsigned long long>(row.seed), row.arm, row.best_threshold,
                      row.best_accuracy);
        out << buf;
    }
    std::snprintf(buf, sizeof(buf), "mean,B-A,,%.10g\n", report.mean_diff);
    out << buf;
    std::snprintf(buf, sizeof(buf), "# mean_accuracy_a=%.10g\n# mean_accuracy_b=%.10g\n",
                  report.mean_a, report.mean_b);
    out << buf;
    out << "# b_wins_or_ties=" << report.b_wins_or_ties << "\n";
    if (!out) throw IoError("failed writing " + path);
}

}  // namespace faceaug
