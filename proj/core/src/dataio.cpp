#include "faceaug/dataio.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <set>

#include "faceaug/errors.hpp"

namespace fs = std::filesystem;

namespace faceaug {

namespace {

bool has_image_extension(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        const size_t tab = line.find('\t', start);
        if (tab == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
}

std::array<int, 4> parse_box(const std::string& text, const std::string& where) {
    std::array<int, 4> box{};
    char extra = 0;
    if (std::sscanf(text.c_str(), "%d,%d,%d,%d%c", &box[0], &box[1], &box[2], &box[3], &extra) != 4)
        throw ConfigError(where + ": malformed box '" + text + "' (want x0,y0,x1,y1)");
    return box;
}

DatasetManifest scan_sidecar(const std::string& root, const fs::path& sidecar, int canonical_size) {
    std::ifstream in(sidecar);
    if (!in) throw IoError("cannot read " + sidecar.string());
    DatasetManifest m;
    m.root = root;
    m.canonical_size = canonical_size;
    std::set<std::string> seen;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const std::string where = sidecar.string() + ":" + std::to_string(lineno);
        const std::vector<std::string> fields = split_tabs(line);
        if (fields.size() != 2 && fields.size() != 3)
            throw ConfigError(where + ": want `path<TAB>identity[<TAB>x0,y0,x1,y1]`");
        if (fields[0].empty() || fields[1].empty())
            throw ConfigError(where + ": empty path or identity");
        if (!seen.insert(fields[0]).second)
            throw ConfigError(where + ": duplicate path " + fields[0]);
        ManifestEntry e;
        e.relative_path = fields[0];
        e.identity = fields[1];
        if (fields.size() == 3) e.box = parse_box(fields[2], where);
        if (!fs::exists(fs::path(root) / e.relative_path)) {
            m.warnings.push_back("missing file skipped: " + e.relative_path);
            continue;
        }
        m.entries.push_back(std::move(e));
    }
    return m;
}

cv::Mat decode_image(const std::string& path) {
    cv::Mat raw = cv::imread(path, cv::IMREAD_UNCHANGED);
    if (raw.empty()) throw DecodeError("cannot decode " + path);

    cv::Mat rgb;
    switch (raw.channels()) {
        case 1: rgb = raw; break;
        case 3: cv::cvtColor(raw, rgb, cv::COLOR_BGR2RGB); break;
        case 4: cv::cvtColor(raw, rgb, cv::COLOR_BGRA2RGB); break;
        default: throw DecodeError("unsupported channel count in " + path);
    }

    cv::Mat out;
    switch (rgb.depth()) {
        case CV_8U: rgb.convertTo(out, CV_32F, 1.0 / 255.0); break;
        case CV_16U: rgb.convertTo(out, CV_32F, 1.0 / 65535.0); break;
        case CV_32F: out = rgb.clone(); break;
        default: throw DecodeError("unsupported bit depth in " + path);
    }
    return out;
}

Tensor mat_to_tensor(const cv::Mat& m) {
    Tensor t({m.rows, m.cols, m.channels()});
    if (m.isContinuous()) {
        std::copy(m.ptr<float>(0), m.ptr<float>(0) + t.size(), t.data());
    } else {
        const int row_floats = m.cols * m.channels();
        for (int r = 0; r < m.rows; ++r)
            std::copy(m.ptr<float>(r), m.ptr<float>(r) + row_floats,
                      t.data() + static_cast<int64_t>(r) * row_floats);
    }
    return t;
}

}  // namespace

std::vector<std::string> DatasetManifest::identities() const {
    std::set<std::string> uniq;
    for (const ManifestEntry& e : entries) uniq.insert(e.identity);
    return std::vector<std::string>(uniq.begin(), uniq.end());
}

DatasetManifest scan_manifest(const std::string& root, int canonical_size) {
    if (canonical_size < 8 || canonical_size % 4 != 0)
        throw ConfigError("canonical_size must be >= 8 and divisible by 4");
    if (!fs::is_directory(root)) throw IoError("dataset root not found: " + root);

    DatasetManifest m;
    const fs::path sidecar = fs::path(root) / "manifest.tsv";
    if (fs::is_regular_file(sidecar)) {
        m = scan_sidecar(root, sidecar, canonical_size);
    } else {
        m.root = root;
        m.canonical_size = canonical_size;
        for (const auto& dir : fs::directory_iterator(root)) {
            if (!dir.is_directory()) {
                m.warnings.push_back("not an identity directory, skipped: " +
                                     dir.path().filename().string());
                continue;
            }
            const std::string identity = dir.path().filename().string();
            for (const auto& file : fs::directory_iterator(dir.path())) {
                if (!file.is_regular_file() || !has_image_extension(file.path())) {
                    m.warnings.push_back("not an image file, skipped: " +
                                         identity + "/" + file.path().filename().string());
                    continue;
                }
                ManifestEntry e;
                e.relative_path = identity + "/" + file.path().filename().string();
                e.identity = identity;
                m.entries.push_back(std::move(e));
            }
        }
    }
    std::sort(m.entries.begin(), m.entries.end(), [](const ManifestEntry& a, const ManifestEntry& b) {
        return a.identity != b.identity ? a.identity < b.identity : a.relative_path < b.relative_path;
    });
    if (m.entries.empty()) throw EmptyDataset("no images under " + root);
    return m;
}

FaceImage load_and_crop(const DatasetManifest& manifest, const ManifestEntry& entry,
                        int canonical_size) {
    const std::string abs = (fs::path(manifest.root) / entry.relative_path).string();
    cv::Mat img = decode_image(abs);

    if (entry.box) {
        const auto& b = *entry.box;
        if (b[0] < 0 || b[1] < 0 || b[2] <= b[0] || b[3] <= b[1] || b[2] > img.cols || b[3] > img.rows)
            throw CropError("box " + std::to_string(b[0]) + "," + std::to_string(b[1]) + "," +
                            std::to_string(b[2]) + "," + std::to_string(b[3]) +
                            " invalid for " + abs);
        img = img(cv::Rect(b[0], b[1], b[2] - b[0], b[3] - b[1])).clone();
    }
    if (std::min(img.rows, img.cols) < 8) throw CropError("image too small after crop: " + abs);

    const int side = std::min(img.rows, img.cols);
    if (img.rows != img.cols)
        img = img(cv::Rect((img.cols - side) / 2, (img.rows - side) / 2, side, side)).clone();
    if (side != canonical_size) {
        cv::Mat resized;
        const int interp = side > canonical_size ? cv::INTER_AREA : cv::INTER_LINEAR;
        cv::resize(img, resized, cv::Size(canonical_size, canonical_size), 0, 0, interp);
        img = resized;
    }

    FaceImage out;
    out.pixels = mat_to_tensor(img);
    out.identity = entry.identity;
    out.source_path = abs;
    return out;
}

Tensor whiten(const Tensor& pixels, WhitenStats* stats) {
    if (pixels.empty()) throw ShapeError("whiten: empty image");
    if (!pixels.all_finite()) throw NumericalError("whiten: non-finite pixels");
    const int64_t n = pixels.size();
    double sum = 0.0, sq = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        sum += pixels[i];
        sq += static_cast<double>(pixels[i]) * pixels[i];
    }
    const double mean = sum / static_cast<double>(n);
    const double var = std::max(sq / static_cast<double>(n) - mean * mean, 0.0);
    const double denom = std::max(std::sqrt(var), 1e-6);
    Tensor out(pixels.shape());
    for (int64_t i = 0; i < n; ++i)
        out[i] = static_cast<float>((pixels[i] - mean) / denom);
    if (stats) {
        stats->mean = static_cast<float>(mean);
        stats->stddev = static_cast<float>(denom);
    }
    return out;
}

FaceImage whiten(const FaceImage& image) {
    FaceImage out = image;
    out.pixels = whiten(image.pixels);
    return out;
}

Tensor dewhiten(const Tensor& pixels, const WhitenStats& stats) {
    Tensor out(pixels.shape());
    for (int64_t i = 0; i < pixels.size(); ++i)
        out[i] = std::min(std::max(pixels[i] * stats.stddev + stats.mean, 0.0f), 1.0f);
    return out;
}

std::vector<std::vector<int>> batch_plan(const std::vector<std::string>& identities,
                                         int batch_size, Rng& rng) {
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (identities.empty()) throw EmptyDataset("batch_plan: no entries");

    // Per-identity index queues, identities in sorted order so rng consumption
    // is reproducible.
    std::map<std::string, std::vector<int>> grouped;
    for (size_t i = 0; i < identities.size(); ++i)
        grouped[identities[i]].push_back(static_cast<int>(i));
    struct Queue {
        std::string id;
        std::vector<int> idx;  // popped from the back
    };
    std::vector<Queue> queues;
    queues.reserve(grouped.size());
    for (auto& [id, idx] : grouped) {
        rng.shuffle(idx);
        queues.push_back({id, std::move(idx)});
    }

    // Largest queue first, identity order as tie-break. `min_left` filters by
    // remaining size; `fresh` restricts to identities not yet in the batch.
    std::vector<char> used(queues.size(), 0);
    auto largest = [&](size_t min_left, bool fresh) {
        int best = -1;
        for (int q = 0; q < static_cast<int>(queues.size()); ++q) {
            const Queue& cand = queues[static_cast<size_t>(q)];
            if (cand.idx.size() < min_left || (fresh && used[static_cast<size_t>(q)])) continue;
            if (best < 0 || cand.idx.size() > queues[static_cast<size_t>(best)].idx.size())
                best = q;
        }
        return best;
    };
    auto take = [&](int q, std::vector<int>& batch) {
        batch.push_back(queues[static_cast<size_t>(q)].idx.back());
        queues[static_cast<size_t>(q)].idx.pop_back();
        used[static_cast<size_t>(q)] = 1;
    };

    std::vector<std::vector<int>> plan;
    while (true) {
        std::fill(used.begin(), used.end(), 0);
        std::vector<int> batch;
        // Positive pairs first, one per identity, deepest pools first. A
        // greedy one-at-a-time fill instead drains the pools into a tail of
        // singletons whose batches cannot form any triplet.
        while (batch_size - static_cast<int>(batch.size()) >= 2) {
            const int q = largest(2, true);
            if (q < 0) break;
            take(q, batch);
            take(q, batch);
        }
        while (static_cast<int>(batch.size()) < batch_size) {
            int q = largest(1, true);
            if (q < 0) q = largest(1, false);
            if (q < 0) break;
            take(q, batch);
        }
        if (batch.empty()) break;
        plan.push_back(std::move(batch));
    }
    return plan;
}

Batch LoadedDataset::gather(const std::vector<int>& indices) const {
    if (indices.empty()) throw ShapeError("gather: empty index list");
    const auto& shape = images.shape();
    const int64_t stride = static_cast<int64_t>(shape[1]) * shape[2] * shape[3];
    Batch b;
    b.images = Tensor({static_cast<int>(indices.size()), shape[1], shape[2], shape[3]});
    for (size_t i = 0; i < indices.size(); ++i) {
        const int idx = indices[i];
        if (idx < 0 || idx >= count()) throw ShapeError("gather: index out of range");
        std::copy(images.data() + idx * stride, images.data() + (idx + 1) * stride,
                  b.images.data() + static_cast<int64_t>(i) * stride);
        b.identities.push_back(identities[static_cast<size_t>(idx)]);
        b.entry_indices.push_back(idx);
    }
    return b;
}

LoadedDataset load_dataset(const DatasetManifest& manifest) {
    if (manifest.entries.empty()) throw EmptyDataset("load_dataset: empty manifest");
    LoadedDataset ds;
    const int n = static_cast<int>(manifest.entries.size());
    for (int i = 0; i < n; ++i) {
        const FaceImage img = load_and_crop(manifest, manifest.entries[static_cast<size_t>(i)],
                                            manifest.canonical_size);
        WhitenStats st;
        const Tensor white = whiten(img.pixels, &st);
        if (i == 0) {
            const auto& s = white.shape();
            ds.images = Tensor({n, s[0], s[1], s[2]});
        }
        const int64_t stride = white.size();
        std::copy(white.data(), white.data() + stride, ds.images.data() + i * stride);
        ds.identities.push_back(img.identity);
        ds.paths.push_back(img.source_path);
        ds.stats.push_back(st);
    }
    return ds;
}

BatchStream::BatchStream(const DatasetManifest& manifest, int batch_size, uint64_t seed)
    : manifest_(&manifest) {
    std::vector<std::string> ids;
    ids.reserve(manifest.entries.size());
    for (const ManifestEntry& e : manifest.entries) ids.push_back(e.identity);
    Rng rng(seed);
    plan_ = batch_plan(ids, batch_size, rng);
}

bool BatchStream::next(Batch& out) {
    if (pos_ >= plan_.size()) return false;
    const std::vector<int>& indices = plan_[pos_++];
    out = Batch{};
    for (size_t i = 0; i < indices.size(); ++i) {
        const ManifestEntry& e = manifest_->entries[static_cast<size_t>(indices[i])];
        const FaceImage img = load_and_crop(*manifest_, e, manifest_->canonical_size);
        const Tensor white = whiten(img.pixels);
        if (i == 0) {
            const auto& s = white.shape();
            out.images = Tensor({static_cast<int>(indices.size()), s[0], s[1], s[2]});
        }
        std::copy(white.data(), white.data() + white.size(),
                  out.images.data() + static_cast<int64_t>(i) * white.size());
        out.identities.push_back(e.identity);
        out.entry_indices.push_back(indices[i]);
    }
    return true;
}

std::vector<PairRecord> read_pairs(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read pairs file " + path);
    // Absolute base: consumers root lookups at "/", so a relative record
    // resolved against a relative pairs path would lose the cwd prefix.
    const fs::path base = fs::absolute(fs::path(path)).parent_path();
    std::vector<PairRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const std::vector<std::string> fields = split_tabs(line);
        if (fields.size() != 3 || (fields[2] != "0" && fields[2] != "1"))
            throw ConfigError(path + ":" + std::to_string(lineno) +
                              ": want `path1<TAB>path2<TAB>{0|1}`");
        auto resolve = [&](const std::string& p) {
            return fs::path(p).is_absolute() ? p : (base / p).string();
        };
        out.push_back({resolve(fields[0]), resolve(fields[1]), fields[2] == "1"});
    }
    return out;
}

void write_image_png(const std::string& path, const Tensor& hwc) {
    if (hwc.rank() != 3 || (hwc.dim(2) != 1 && hwc.dim(2) != 3))
        throw ShapeError("write_image_png: need (H,W,1) or (H,W,3), got " + hwc.shape_str());
    const int h = hwc.dim(0), w = hwc.dim(1), c = hwc.dim(2);
    cv::Mat m(h, w, c == 1 ? CV_8UC1 : CV_8UC3);
    for (int r = 0; r < h; ++r) {
        unsigned char* row = m.ptr<unsigned char>(r);
        for (int col = 0; col < w; ++col) {
            for (int ch = 0; ch < c; ++ch) {
                const float v = hwc.at(r, col, ch);
                const float clamped = std::min(std::max(v, 0.0f), 1.0f);
                // RGB tensor to BGR mat
                const int dst_ch = c == 3 ? 2 - ch : 0;
                row[col * c + dst_ch] = static_cast<unsigned char>(std::lround(clamped * 255.0f));
            }
        }
    }
    const fs::path parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    if (!cv::imwrite(path, m)) throw IoError("cannot write " + path);
}

}  // namespace faceaug
