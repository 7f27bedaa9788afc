#include "faceaug/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "faceaug/errors.hpp"

namespace faceaug {

namespace {

struct Blob {
    float cx, cy, sigma, amp;
};

struct IdentityPattern {
    Blob blobs[3];
    float freq_x, freq_y, phase, grating_amp;
};

IdentityPattern identity_pattern(const SyntheticSpec& spec, int identity) {
    Rng rng = Rng(spec.seed).fork(static_cast<uint64_t>(identity) + 17);
    IdentityPattern p;
    const float s = static_cast<float>(spec.size);
    for (Blob& b : p.blobs) {
        b.cx = static_cast<float>(rng.uniform(0.2, 0.8)) * s;
        b.cy = static_cast<float>(rng.uniform(0.2, 0.8)) * s;
        b.sigma = static_cast<float>(rng.uniform(0.08, 0.22)) * s;
        b.amp = static_cast<float>(rng.uniform(0.25, 0.45)) * (rng.uniform() < 0.5 ? -1.0f : 1.0f);
    }
    p.freq_x = static_cast<float>(rng.uniform(0.5, 2.5)) * 6.2831853f / s;
    p.freq_y = static_cast<float>(rng.uniform(0.5, 2.5)) * 6.2831853f / s;
    p.phase = static_cast<float>(rng.uniform(0.0, 6.2831853));
    p.grating_amp = static_cast<float>(rng.uniform(0.10, 0.18));
    return p;
}

}  // namespace

Tensor synthetic_face(const SyntheticSpec& spec, int identity, int variant) {
    if (spec.size < 8 || spec.identities < 1 || spec.images_per_identity < 1 ||
        (spec.channels != 1 && spec.channels != 3))
        throw ConfigError("synthetic_face: invalid spec");
    if (identity < 0 || identity >= spec.identities || variant < 0)
        throw ConfigError("synthetic_face: identity/variant out of range");

    const IdentityPattern p = identity_pattern(spec, identity);
    Rng rng = Rng(spec.seed)
                  .fork(static_cast<uint64_t>(identity) + 17)
                  .fork(static_cast<uint64_t>(variant) + 1001);
    const float dx = static_cast<float>(rng.uniform(-spec.jitter, spec.jitter));
    const float dy = static_cast<float>(rng.uniform(-spec.jitter, spec.jitter));
    const float brightness = static_cast<float>(rng.uniform(-0.04, 0.04));

    Tensor img({spec.size, spec.size, spec.channels});
    for (int y = 0; y < spec.size; ++y) {
        for (int x = 0; x < spec.size; ++x) {
            const float fx = static_cast<float>(x) - dx;
            const float fy = static_cast<float>(y) - dy;
            float v = 0.5f + brightness +
                      p.grating_amp * std::sin(p.freq_x * fx + p.freq_y * fy + p.phase);
            for (const Blob& b : p.blobs) {
                const float ddx = fx - b.cx;
                const float ddy = fy - b.cy;
                v += b.amp * std::exp(-(ddx * ddx + ddy * ddy) / (2.0f * b.sigma * b.sigma));
            }
            for (int c = 0; c < spec.channels; ++c) {
                const float noisy = v + spec.pixel_noise * rng.normal_f() +
                                    (c == 0 ? 0.0f : 0.03f * static_cast<float>(c));
                img.at(y, x, c) = std::min(std::max(noisy, 0.0f), 1.0f);
            }
        }
    }
    return img;
}

DatasetManifest generate_synthetic_dataset(const SyntheticSpec& spec, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    for (int i = 0; i < spec.identities; ++i) {
        char idname[32];
        std::snprintf(idname, sizeof(idname), "id_%02d", i);
        for (int v = 0; v < spec.images_per_identity; ++v) {
            char fname[32];
            std::snprintf(fname, sizeof(fname), "img_%03d.png", v);
            const Tensor img = synthetic_face(spec, i, v);
            write_image_png((fs::path(out_dir) / idname / fname).string(), img);
        }
    }
    return scan_manifest(out_dir, spec.size);
}

}  // namespace faceaug
