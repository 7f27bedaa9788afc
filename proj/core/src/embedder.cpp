#include "faceaug/embedder.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "faceaug/errors.hpp"

namespace faceaug {

Embedder::Embedder(const EmbedderConfig& cfg, Rng& rng) : cfg(cfg) {
    if (cfg.in_channels != 1 && cfg.in_channels != 3)
        throw ConfigError("embedder: in_channels must be 1 or 3");
    if (cfg.embed_dim < 1 || cfg.residual_blocks < 1 || cfg.reductions < 0 || cfg.base_channels < 1)
        throw ConfigError("embedder: invalid architecture config");
    int c = cfg.base_channels;
    stem = Conv2d(rng, cfg.in_channels, c, 3, 1, 1, false);
    stem_bn = BatchNorm2d(c);
    const int stages = std::max(cfg.residual_blocks, cfg.reductions);
    for (int i = 0; i < stages; ++i) {
        if (i < cfg.residual_blocks) blocks.emplace_back(rng, c);
        if (i < cfg.reductions) {
            reduce.emplace_back(rng, c, 2 * c, 3, 2, 1, false);
            reduce_bn.emplace_back(2 * c);
            c *= 2;
        }
    }
    head = Dense(rng, c, cfg.embed_dim, true);
}

Var Embedder::embed(Tape& t, Var x, const Fwd& fwd) {
    const auto& xs = x.shape();
    const int div = 1 << cfg.reductions;
    if (xs.size() != 4 || xs[1] != xs[2] || xs[3] != cfg.in_channels || xs[1] % div != 0 ||
        xs[1] / div < 1)
        throw ShapeError("embedder: need square (N,H,H," + std::to_string(cfg.in_channels) +
                         ") with H divisible by " + std::to_string(div) + ", got " +
                         Tensor::shape_str(xs));
    Var h = relu(stem_bn.forward(t, stem.forward(t, x), fwd));
    size_t bi = 0, ri = 0;
    const int stages = std::max(cfg.residual_blocks, cfg.reductions);
    for (int i = 0; i < stages; ++i) {
        if (i < cfg.residual_blocks) h = blocks[bi++].forward(t, h, fwd);
        if (i < cfg.reductions) {
            h = relu(reduce_bn[ri].forward(t, reduce[ri].forward(t, h), fwd));
            ++ri;
        }
    }
    h = global_avg_pool(h);
    h = head.forward(t, h);
    return l2_normalize_rows(h);
}

Tensor Embedder::embed_eval(const Tensor& images) {
    Tape t(false);
    Var out = embed(t, t.input(images), Fwd::eval());
    Tensor e = out.value();
    if (!e.all_finite()) throw NumericalError("embedder: non-finite embedding");
    return e;
}

void Embedder::collect(const std::string& prefix, ModuleItems& out) {
    stem.collect(prefix + ".stem", out);
    stem_bn.collect(prefix + ".stem_bn", out);
    size_t bi = 0, ri = 0;
    const int stages = std::max(cfg.residual_blocks, cfg.reductions);
    for (int i = 0; i < stages; ++i) {
        if (i < cfg.residual_blocks) {
            blocks[bi].collect(prefix + ".block" + std::to_string(bi), out);
            ++bi;
        }
        if (i < cfg.reductions) {
            reduce[ri].collect(prefix + ".reduce" + std::to_string(ri), out);
            reduce_bn[ri].collect(prefix + ".reduce_bn" + std::to_string(ri), out);
            ++ri;
        }
    }
    head.collect(prefix + ".head", out);
}

double distance(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size())
        throw ShapeError("distance: dimension mismatch, " + a.shape_str() + " vs " + b.shape_str());
    double s = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

namespace {

double row_sqdist(const Tensor& e, int i, int j) {
    const int d = e.dim(1);
    const float* ri = e.data() + static_cast<int64_t>(i) * d;
    const float* rj = e.data() + static_cast<int64_t>(j) * d;
    double s = 0.0;
    for (int k = 0; k < d; ++k) {
        const double diff = static_cast<double>(ri[k]) - rj[k];
        s += diff * diff;
    }
    return s;
}

double paired_row_dist(const Tensor& a, const Tensor& b, int row) {
    const int d = a.dim(1);
    const float* ra = a.data() + static_cast<int64_t>(row) * d;
    const float* rb = b.data() + static_cast<int64_t>(row) * d;
    double s = 0.0;
    for (int k = 0; k < d; ++k) {
        const double diff = static_cast<double>(ra[k]) - rb[k];
        s += diff * diff;
    }
    return std::sqrt(s);
}

}  // namespace

std::vector<TripletIndex> sample_triplets(const std::vector<std::string>& identities,
                                          TripletStrategy strategy, const Tensor* embeddings,
                                          float margin) {
    const int n = static_cast<int>(identities.size());
    if (strategy == TripletStrategy::SemiHard) {
        if (embeddings == nullptr) throw ConfigError("sample_triplets: semi-hard needs embeddings");
        if (embeddings->rank() != 2 || embeddings->dim(0) != n)
            throw ShapeError("sample_triplets: embeddings must be (" + std::to_string(n) + ",D)");
        if (margin <= 0.0f) throw ConfigError("sample_triplets: margin must be > 0");
    }

    std::vector<TripletIndex> out;
    for (int a = 0; a < n; ++a) {
        for (int p = 0; p < n; ++p) {
            if (p == a || identities[static_cast<size_t>(p)] != identities[static_cast<size_t>(a)])
                continue;
            if (strategy == TripletStrategy::All) {
                for (int neg = 0; neg < n; ++neg)
                    if (identities[static_cast<size_t>(neg)] != identities[static_cast<size_t>(a)])
                        out.push_back({a, p, neg});
                continue;
            }
            // Semi-hard: hardest negative inside (d(a,p), d(a,p)+margin),
            // else the hardest negative overall.
            const double dap = std::sqrt(row_sqdist(*embeddings, a, p));
            int band_best = -1, overall_best = -1;
            double band_d = 0.0, overall_d = 0.0;
            for (int neg = 0; neg < n; ++neg) {
                if (identities[static_cast<size_t>(neg)] == identities[static_cast<size_t>(a)])
                    continue;
                const double dan = std::sqrt(row_sqdist(*embeddings, a, neg));
                if (overall_best < 0 || dan < overall_d) {
                    overall_best = neg;
                    overall_d = dan;
                }
                if (dan > dap && dan < dap + margin && (band_best < 0 || dan < band_d)) {
                    band_best = neg;
                    band_d = dan;
                }
            }
            if (band_best >= 0)
                out.push_back({a, p, band_best});
            else if (overall_best >= 0)
                out.push_back({a, p, overall_best});
        }
    }
    if (out.empty()) throw EmptyTriplets("sample_triplets: no valid (anchor,positive,negative)");
    return out;
}

double triplet_loss(const Tensor& embeddings, const std::vector<TripletIndex>& triples,
                    float margin) {
    if (margin <= 0.0f) throw ConfigError("triplet_loss: margin must be > 0");
    if (triples.empty()) throw EmptyTriplets("triplet_loss: empty triplet list");
    if (embeddings.rank() != 2) throw ShapeError("triplet_loss: embeddings must be (N,D)");
    const int n = embeddings.dim(0);
    double total = 0.0;
    for (const TripletIndex& tr : triples) {
        if (tr.anchor < 0 || tr.anchor >= n || tr.positive < 0 || tr.positive >= n ||
            tr.negative < 0 || tr.negative >= n)
            throw ShapeError("triplet_loss: triple index out of range");
        const double l =
            row_sqdist(embeddings, tr.anchor, tr.positive) -
            row_sqdist(embeddings, tr.anchor, tr.negative) + static_cast<double>(margin);
        if (l > 0.0) total += l;
    }
    return total / static_cast<double>(triples.size());
}

VerificationReport verify_distances(const std::vector<double>& distances,
                                    const std::vector<bool>& same, const ThresholdSweep& sweep) {
    if (distances.size() != same.size())
        throw ConfigError("verify: distances and labels length mismatch");
    if (distances.empty()) throw ConfigError("verify: no pairs");
    const size_t positives = static_cast<size_t>(std::count(same.begin(), same.end(), true));
    if (positives == 0 || positives == same.size())
        throw ConfigError("verify: need at least one positive and one negative pair");
    if (sweep.steps < 1 || sweep.hi < sweep.lo) throw ConfigError("verify: bad threshold sweep");

    VerificationReport report;
    report.thresholds.reserve(static_cast<size_t>(sweep.steps));
    report.accuracies.reserve(static_cast<size_t>(sweep.steps));
    for (int i = 0; i < sweep.steps; ++i) {
        const double t =
            sweep.steps == 1
                ? sweep.lo
                : sweep.lo + (sweep.hi - sweep.lo) * static_cast<double>(i) / (sweep.steps - 1);
        int64_t correct = 0;
        for (size_t j = 0; j < distances.size(); ++j)
            if ((distances[j] < t) == same[j]) ++correct;
        const double acc = static_cast<double>(correct) / static_cast<double>(distances.size());
        report.thresholds.push_back(t);
        report.accuracies.push_back(acc);
        if (report.accuracies.size() == 1 || acc > report.best_accuracy) {
            report.best_accuracy = acc;
            report.best_threshold = t;
        }
    }
    return report;
}

VerificationReport verify(Embedder& embedder, const std::vector<VerifyPair>& pairs,
                          const ThresholdSweep& sweep) {
    if (pairs.empty()) throw ConfigError("verify: no pairs");
    std::vector<double> dist;
    std::vector<bool> same;
    dist.reserve(pairs.size());
    same.reserve(pairs.size());
    // Batch in chunks; pairs are usually uniform fixture-sized images.
    const size_t chunk = 64;
    for (size_t start = 0; start < pairs.size(); start += chunk) {
        const size_t stop = std::min(pairs.size(), start + chunk);
        const auto& shape = pairs[start].a.shape();
        if (shape.size() != 3)
            throw ShapeError("verify: pair images must be (H,W,C), got " +
                             Tensor::shape_str(shape));
        std::vector<int> bshape = {static_cast<int>(stop - start), shape[0], shape[1], shape[2]};
        Tensor batch_a(bshape), batch_b(bshape);
        const int64_t stride = shape_numel(shape);
        for (size_t i = start; i < stop; ++i) {
            check_same_shape(pairs[i].a, pairs[start].a, "verify");
            check_same_shape(pairs[i].b, pairs[start].a, "verify");
            std::copy(pairs[i].a.data(), pairs[i].a.data() + stride,
                      batch_a.data() + static_cast<int64_t>(i - start) * stride);
            std::copy(pairs[i].b.data(), pairs[i].b.data() + stride,
                      batch_b.data() + static_cast<int64_t>(i - start) * stride);
        }
        const Tensor ea = embedder.embed_eval(batch_a);
        const Tensor eb = embedder.embed_eval(batch_b);
        for (size_t i = start; i < stop; ++i) {
            dist.push_back(paired_row_dist(ea, eb, static_cast<int>(i - start)));
            same.push_back(pairs[i].same);
        }
    }
    return verify_distances(dist, same, sweep);
}

void write_verification_report(const VerificationReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "threshold,accuracy\n";
    char buf[128];
    for (size_t i = 0; i < report.thresholds.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.10g,%.10g\n", report.thresholds[i],
                      report.accuracies[i]);
        out << buf;
    }
    std::snprintf(buf, sizeof(buf), "# best_threshold=%.10g best_accuracy=%.10g\n",
                  report.best_threshold, report.best_accuracy);
    out << buf;
    if (!out) throw IoError("failed writing " + path);
}

}  // namespace faceaug
