#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace faceaug {

// Dense float32 tensor, row-major, value semantics. Image tensors use
// NHWC layout ((N,)H,W,C); embeddings use (N,D).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, float fill);
    Tensor(std::vector<int> shape, std::vector<float> data);

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, float v) { return Tensor(std::move(shape), v); }
    static Tensor scalar(float v) { return Tensor({1}, v); }

    bool empty() const { return data_.empty(); }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // 3-d (H,W,C) and 4-d (N,H,W,C) accessors.
    float& at(int h, int w, int c);
    float at(int h, int w, int c) const;
    float& at(int n, int h, int w, int c);
    float at(int n, int h, int w, int c) const;

    Tensor reshaped(std::vector<int> shape) const;
    void fill(float v);
    bool all_finite() const;
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    double sum() const;      // double accumulation
    double mean() const;
    float min() const;
    float max() const;

    static std::string shape_str(const std::vector<int>& shape);
    std::string shape_str() const { return shape_str(shape_); }

private:
    std::vector<int> shape_;
    std::vector<float> data_;
};

int64_t shape_numel(const std::vector<int>& shape);

// Throws ShapeError with a diagnostic if the shapes differ.
void check_same_shape(const Tensor& a, const Tensor& b, const char* where);

}  // namespace faceaug
