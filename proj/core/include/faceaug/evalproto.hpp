#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "faceaug/dataio.hpp"
#include "faceaug/embedder.hpp"
#include "faceaug/train.hpp"

namespace faceaug {

// Pairs file -> whitened (H,W,C) tensors at the model's input size.
std::vector<VerifyPair> load_verify_pairs(const std::string& pairs_path, int image_size,
                                          int channels);

// Seeded per-identity split: `per_identity` images into `train`, the rest
// into `holdout`. Every identity must have more than `per_identity` images.
struct SplitManifests {
    DatasetManifest train;
    DatasetManifest holdout;
};
SplitManifests low_shot_split(const DatasetManifest& manifest, int per_identity, uint64_t seed);

// Balanced same/different pair list over a manifest, written as
// `path<TAB>path<TAB>{0|1}` with paths relative to the output file's
// directory. Draws up to `pairs_per_class` of each class, seeded.
void write_pairs_file(const DatasetManifest& manifest, const std::string& out_path,
                      int pairs_per_class, uint64_t seed);

// Smallest per-identity gallery size whose held-out probes reach the target
// rank-1 accuracy against nearest mean-gallery embeddings.
struct MinImagesReport {
    static constexpr int kUnreached = -1;

    struct PerIdentity {
        std::string identity;
        int available = 0;
        int k_star = kUnreached;
        double accuracy = 0.0;  // at k_star; best seen when unreached
    };

    std::vector<PerIdentity> identities;
    int aggregate_k = kUnreached;  // max over identities; unreached if any is
    double target_accuracy = 0.95;
    uint64_t seed = 0;
};

// Galleries are seeded-random nested subsets per identity; probes are that
// identity's remaining images, classified by nearest gallery-mean embedding.
// k sweeps 1..available-1 per identity.
MinImagesReport min_images(const DatasetManifest& manifest, const std::string& checkpoint_path,
                           double target_accuracy, uint64_t seed);

// CSV `identity,available_images,k_star,accuracy_at_k_star`; unreached
// identities carry the literal `unreached`. Aggregate, target, and seed
// follow as `# key=value` lines.
void write_min_images_report(const MinImagesReport& report, const std::string& path);

struct ExperimentSpec {
    DatasetManifest train_manifest;
    std::string pairs_path;
    TrainConfig config;
    int k = 0;  // augmentation variants per train image for arm B
    std::vector<uint64_t> seeds;
    std::string out_dir;
    // When false, arm B skips the adversarial phase and trains exactly like
    // arm A; with k = 0 this makes B a bit-identical replay of A.
    bool arm_b_adversarial = true;
};

struct CompareReport {
    struct ArmResult {
        uint64_t seed = 0;
        char arm = 'A';
        double best_threshold = 0.0;
        double best_accuracy = 0.0;
    };

    std::vector<ArmResult> rows;  // per seed: A row then B row
    double mean_a = 0.0;
    double mean_b = 0.0;
    double mean_diff = 0.0;  // mean_b - mean_a
    int b_wins_or_ties = 0;
};

// Per seed: arm A trains the embedder alone on the split; arm B runs the
// adversarial game on the split, expands it with k augmented variants per
// image, and trains a fresh embedder on real + augmented. Both arms are
// scored by best-threshold verification accuracy on the pairs file.
CompareReport compare_augmentation(const ExperimentSpec& spec);

// CSV `seed,arm,best_threshold,best_accuracy`: two rows per seed, then a
// summary row `mean,B-A,,<mean_diff>` and `# key=value` lines for the arm
// means and the win/tie count.
void write_compare_report(const CompareReport& report, const std::string& path);

}  // namespace faceaug
