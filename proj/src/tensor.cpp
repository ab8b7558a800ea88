#include "dtl/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace dtl {

std::string shape_str(const std::vector<long>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

static long numel_of(const std::vector<long>& shape) {
    long n = 1;
    for (long d : shape) {
        if (d < 0) throw std::invalid_argument("negative extent in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<long> shape, DType dtype)
    : shape_(std::move(shape)), dtype_(dtype),
      data_(std::make_shared<std::vector<double>>(static_cast<std::size_t>(numel_of(shape_)), 0.0)) {}

Tensor Tensor::zeros(std::vector<long> shape, DType dtype) {
    return Tensor(std::move(shape), dtype);
}

Tensor Tensor::full(std::vector<long> shape, double v, DType dtype) {
    Tensor t(std::move(shape), dtype);
    t.fill(v);
    t.quantize();
    return t;
}

Tensor Tensor::scalar(double v, DType dtype) { return full({}, v, dtype); }

Tensor Tensor::from(std::vector<long> shape, std::vector<double> values, DType dtype) {
    Tensor t(std::move(shape), dtype);
    if (t.numel() != static_cast<long>(values.size()))
        throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) +
                                    " values for shape " + shape_str(t.shape()));
    std::memcpy(t.data(), values.data(), values.size() * sizeof(double));
    t.quantize();
    return t;
}

long Tensor::numel() const { return data_ ? static_cast<long>(data_->size()) : numel_of(shape_); }

Tensor Tensor::clone() const {
    Tensor t(shape_, dtype_);
    *t.data_ = *data_;
    return t;
}

Tensor Tensor::viewed_as(std::vector<long> new_shape) const {
    if (numel_of(new_shape) != numel())
        throw std::invalid_argument("viewed_as: cannot view " + shape_str(shape_) + " as " +
                                    shape_str(new_shape));
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.dtype_ = dtype_;
    t.data_ = data_;
    return t;
}

void Tensor::quantize() {
    if (dtype_ != DType::F32) return;
    for (double& v : *data_) v = static_cast<double>(static_cast<float>(v));
}

void Tensor::fill(double v) {
    for (double& x : *data_) x = v;
}

bool Tensor::allclose(const Tensor& o, double atol, double rtol) const {
    if (shape_ != o.shape_) return false;
    for (long i = 0; i < numel(); ++i) {
        double a = (*this)[i], b = o[i];
        if (std::abs(a - b) > atol + rtol * std::abs(b)) return false;
    }
    return true;
}

bool Tensor::bitwise_equal(const Tensor& o) const {
    if (shape_ != o.shape_ || dtype_ != o.dtype_) return false;
    return std::memcmp(data(), o.data(), data_->size() * sizeof(double)) == 0;
}

std::uint64_t Rng::next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

double Rng::uniform(double lo, double hi) {
    double u = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;  // [0,1)
    return lo + u * (hi - lo);
}

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
}

long Rng::uniform_int(long n) {
    return static_cast<long>(next_u64() % static_cast<std::uint64_t>(n));
}

}  // namespace dtl
