#include "faceaug/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "faceaug/errors.hpp"

namespace faceaug {

int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape " + Tensor::shape_str(shape));
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), 0.0f) {}

Tensor::Tensor(std::vector<int> shape, float fill)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
        throw ShapeError("data size does not match shape " + shape_str());
}

float& Tensor::at(int h, int w, int c) {
    return data_[(static_cast<size_t>(h) * shape_[1] + w) * shape_[2] + c];
}
float Tensor::at(int h, int w, int c) const {
    return data_[(static_cast<size_t>(h) * shape_[1] + w) * shape_[2] + c];
}
float& Tensor::at(int n, int h, int w, int c) {
    return data_[((static_cast<size_t>(n) * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
}
float Tensor::at(int n, int h, int w, int c) const {
    return data_[((static_cast<size_t>(n) * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
    if (shape_numel(shape) != size())
        throw ShapeError("cannot reshape " + shape_str() + " to " + shape_str(shape));
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
    for (float v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::sum() const {
    double s = 0.0;
    for (float v : data_) s += v;
    return s;
}

double Tensor::mean() const { return data_.empty() ? 0.0 : sum() / static_cast<double>(data_.size()); }

float Tensor::min() const { return data_.empty() ? 0.0f : *std::min_element(data_.begin(), data_.end()); }
float Tensor::max() const { return data_.empty() ? 0.0f : *std::max_element(data_.begin(), data_.end()); }

std::string Tensor::shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* where) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(where) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace faceaug
