#pragma once

#include <optional>
#include <string>

#include "faceaug/dataio.hpp"

namespace faceaug {

struct AugmentOptions {
    int k = 1;
    uint64_t seed = 1;
    bool overwrite = false;      // replace existing outputs instead of refusing
    bool save_saliency = false;  // also emit round(255*s) maps under <out_dir>/saliency
    std::optional<float> noise_scale;  // unset: the checkpoint's training value
};

// k adversarial variants per manifest entry, written as [0,1] PNGs under
// <out_dir>/<identity>/ together with a manifest.tsv carrying the identity
// labels: exactly k*N image files. Each variant draws its latent noise from
// an independent stream keyed by (seed, entry index, variant index), so the
// output set is a pure function of (manifest, checkpoint, options).
DatasetManifest augment(const DatasetManifest& manifest, const std::string& checkpoint_path,
                        const AugmentOptions& options, const std::string& out_dir);

}  // namespace faceaug
