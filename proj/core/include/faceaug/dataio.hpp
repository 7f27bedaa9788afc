#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "faceaug/rng.hpp"
#include "faceaug/tensor.hpp"

namespace faceaug {

struct ManifestEntry {
    std::string relative_path;
    std::string identity;
    std::optional<std::array<int, 4>> box;  // x0,y0,x1,y1 from an external detector
};

struct DatasetManifest {
    std::string root;
    std::vector<ManifestEntry> entries;
    int canonical_size = 128;
    std::vector<std::string> warnings;  // skipped files

    std::vector<std::string> identities() const;  // unique, sorted
};

// Directory layout <root>/<identity>/<file>, or a sidecar <root>/manifest.tsv
// with `relative_path<TAB>identity[<TAB>x0,y0,x1,y1]` records. Entries come
// back sorted (identity, path) so the manifest is reproducible.
DatasetManifest scan_manifest(const std::string& root, int canonical_size = 128);

struct FaceImage {
    Tensor pixels;  // (H,W,C), [0,1] before whitening
    std::string identity;
    std::string source_path;
};

// Decode, apply the optional external box, center-crop to square, resize to
// canonical_size. Inputs already at canonical size pass through untouched.
FaceImage load_and_crop(const DatasetManifest& manifest, const ManifestEntry& entry,
                        int canonical_size);

struct WhitenStats {
    float mean = 0.0f;
    float stddev = 1.0f;
};

// Per-image whitening: (x - mean) / max(std, 1e-6) over all pixels.
Tensor whiten(const Tensor& pixels, WhitenStats* stats = nullptr);
FaceImage whiten(const FaceImage& image);

// Inverse map for storing augmented samples, clamped back into [0,1].
Tensor dewhiten(const Tensor& pixels, const WhitenStats& stats);

struct Batch {
    Tensor images;  // (N,H,W,C), whitened
    std::vector<std::string> identities;
    std::vector<int> entry_indices;  // into the manifest / dataset
};

// Deterministic epoch plan: each index appears exactly once; every batch that
// can do so contains >= 2 identities and one identity twice, so triplets can
// form. Consumes rng.
std::vector<std::vector<int>> batch_plan(const std::vector<std::string>& identities,
                                         int batch_size, Rng& rng);

// Whole dataset loaded, whitened, held in memory; the training-scale path.
struct LoadedDataset {
    Tensor images;  // (N,H,W,C)
    std::vector<std::string> identities;
    std::vector<std::string> paths;
    std::vector<WhitenStats> stats;

    int count() const { return images.empty() ? 0 : images.dim(0); }
    Batch gather(const std::vector<int>& indices) const;
};

LoadedDataset load_dataset(const DatasetManifest& manifest);

// Lazy one-epoch stream over a manifest, spec'd batch order.
class BatchStream {
public:
    BatchStream(const DatasetManifest& manifest, int batch_size, uint64_t seed);
    bool next(Batch& out);  // false when the epoch is exhausted
    const std::vector<std::vector<int>>& plan() const { return plan_; }

private:
    const DatasetManifest* manifest_;
    std::vector<std::vector<int>> plan_;
    size_t pos_ = 0;
};

struct PairRecord {
    std::string path1;
    std::string path2;
    bool same = false;
};

// `path1<TAB>path2<TAB>{0|1}` per line; paths relative to the pairs file's
// directory or absolute.
std::vector<PairRecord> read_pairs(const std::string& path);

// 8-bit image writers; pixels expected in [0,1] (values are clamped).
void write_image_png(const std::string& path, const Tensor& hwc);

}  // namespace faceaug
