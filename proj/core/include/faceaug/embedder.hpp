#pragma once

#include <string>
#include <vector>

#include "faceaug/layers.hpp"

namespace faceaug {

struct EmbedderConfig {
    int in_channels = 3;
    int embed_dim = 128;
    int residual_blocks = 4;  // R
    int reductions = 3;       // S, each halves the spatial size and doubles width
    int base_channels = 16;
};

// Residual embedding network: stem conv, residual blocks interleaved with
// stride-2 reductions, global average pooling, linear map to embed_dim,
// L2 normalization. Doubles as the GAN discriminator and as the final
// verification model.
class Embedder {
public:
    Embedder() = default;
    Embedder(const EmbedderConfig& cfg, Rng& rng);

    // x: (N,H,W,C) with H == W and H divisible by 2^reductions.
    // Returns (N, embed_dim) rows of unit length.
    Var embed(Tape& t, Var x, const Fwd& fwd);

    // Inference-mode embedding of a batch without building gradients.
    // Throws NumericalError if any output is non-finite.
    Tensor embed_eval(const Tensor& images);

    void collect(const std::string& prefix, ModuleItems& out);
    const EmbedderConfig& config() const { return cfg; }

    EmbedderConfig cfg;
    Conv2d stem;
    BatchNorm2d stem_bn;
    std::vector<ResidualBlock> blocks;
    std::vector<Conv2d> reduce;
    std::vector<BatchNorm2d> reduce_bn;
    Dense head;
};

// Euclidean distance between two embedding rows, accumulated in double:
// d = sqrt(sum_m (a_m - b_m)^2).
double distance(const Tensor& a, const Tensor& b);

enum class TripletStrategy { All, SemiHard };

// Triples over a labeled batch. With `All`, every valid (anchor, positive,
// negative) combination. With `SemiHard`, per (anchor, positive) the hardest
// negative inside the band d(a,p) < d(a,n) < d(a,p) + margin, falling back to
// the hardest negative overall when the band is empty; `embeddings` (N,D)
// must be supplied. Throws EmptyTriplets when no valid triple exists.
std::vector<TripletIndex> sample_triplets(const std::vector<std::string>& identities,
                                          TripletStrategy strategy,
                                          const Tensor* embeddings = nullptr, float margin = 0.2f);

// mean over triples of max(0, d(a,p)^2 - d(a,n)^2 + margin), double
// accumulation. embeddings: (N,D).
double triplet_loss(const Tensor& embeddings, const std::vector<TripletIndex>& triples,
                    float margin);

struct ThresholdSweep {
    double lo = 0.0;
    double hi = 2.0;
    int steps = 201;
};

struct VerificationReport {
    std::vector<double> thresholds;
    std::vector<double> accuracies;
    double best_threshold = 0.0;
    double best_accuracy = 0.0;
};

// Threshold sweep over precomputed pair distances; predict "same" iff
// distance < threshold. Ties on accuracy resolve to the smallest threshold.
// Requires at least one positive and one negative pair.
VerificationReport verify_distances(const std::vector<double>& distances,
                                    const std::vector<bool>& same, const ThresholdSweep& sweep);

struct VerifyPair {
    Tensor a;  // (H,W,C) whitened
    Tensor b;
    bool same = false;
};

VerificationReport verify(Embedder& embedder, const std::vector<VerifyPair>& pairs,
                          const ThresholdSweep& sweep);

void write_verification_report(const VerificationReport& report, const std::string& path);

}  // namespace faceaug
