#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace dtl {

enum class DType { F32, F64 };

inline std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }
inline const char* dtype_name(DType d) { return d == DType::F32 ? "f32" : "f64"; }

std::string shape_str(const std::vector<long>& shape);

// Dense row-major tensor. The scalar buffer is shared between copies, so a
// Tensor handle is cheap to pass around. Values are held as double regardless
// of dtype; f32 tensors are rounded through float after every op so that the
// numerics and the byte accounting both follow the declared dtype.
class Tensor {
  public:
    Tensor() = default;
    Tensor(std::vector<long> shape, DType dtype);

    static Tensor zeros(std::vector<long> shape, DType dtype = DType::F32);
    static Tensor full(std::vector<long> shape, double v, DType dtype = DType::F32);
    static Tensor scalar(double v, DType dtype = DType::F32);
    static Tensor from(std::vector<long> shape, std::vector<double> values,
                       DType dtype = DType::F32);

    const std::vector<long>& shape() const { return shape_; }
    DType dtype() const { return dtype_; }
    long numel() const;
    std::size_t nbytes() const { return static_cast<std::size_t>(numel()) * dtype_size(dtype_); }
    long dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    bool defined() const { return data_ != nullptr; }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    double& operator[](long i) { return (*data_)[static_cast<std::size_t>(i)]; }
    double operator[](long i) const { return (*data_)[static_cast<std::size_t>(i)]; }

    // 2-D convenience accessor
    double& at(long r, long c) { return (*data_)[static_cast<std::size_t>(r * shape_[1] + c)]; }
    double at(long r, long c) const { return (*data_)[static_cast<std::size_t>(r * shape_[1] + c)]; }

    // Deep copy with its own buffer.
    Tensor clone() const;
    // Shares the buffer but reinterprets the shape (numel must match).
    Tensor viewed_as(std::vector<long> new_shape) const;

    // Rounds every element through float. No-op for f64 tensors.
    void quantize();

    void fill(double v);
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool allclose(const Tensor& o, double atol = 1e-9, double rtol = 0.0) const;
    bool bitwise_equal(const Tensor& o) const;

  private:
    std::vector<long> shape_;
    DType dtype_ = DType::F32;
    std::shared_ptr<std::vector<double>> data_;
};

// Seeded RNG shared by initializers. One stream per model build keeps
// construction deterministic.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    // splitmix64; identical across platforms unlike std distributions.
    std::uint64_t next_u64();
    double uniform(double lo, double hi);
    double normal();  // Box-Muller
    long uniform_int(long n);  // [0, n)

  private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace dtl
