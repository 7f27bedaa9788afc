#pragma once

#include <string>

#include "faceaug/dataio.hpp"

namespace faceaug {

// Procedural toy faces: each identity owns a fixed arrangement of gaussian
// blobs over a sinusoidal grating; variants jitter the arrangement and add
// pixel noise. Small embedders separate identities in a few epochs, which is
// what the end-to-end experiments need.
struct SyntheticSpec {
    int identities = 8;
    int images_per_identity = 20;
    int size = 16;
    int channels = 1;
    uint64_t seed = 1;
    float jitter = 1.5f;      // per-variant translation, pixels
    float pixel_noise = 0.05f;
};

// One variant image, (size,size,channels) in [0,1]. Pure function of
// (spec, identity, variant).
Tensor synthetic_face(const SyntheticSpec& spec, int identity, int variant);

// Writes <out_dir>/id_<i>/img_<v>.png for every identity/variant and returns
// the scanned manifest (canonical_size = spec.size).
DatasetManifest generate_synthetic_dataset(const SyntheticSpec& spec, const std::string& out_dir);

}  // namespace faceaug
