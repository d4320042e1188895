#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace motionkit {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

// Row-major dense tensor with 64-bit values. Float32 storage is modeled by
// rounding every value through float (see round_to_f32).
class Tensor {
   public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    // Leading dims collapsed: a [a, b, c] tensor is viewed as a×b rows of c.
    std::size_t rows() const { return shape_.empty() ? 0 : size() / shape_.back(); }
    std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    Tensor reshaped(Shape shape) const;
    Tensor round_to_f32() const;
    double sum() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

   private:
    Shape shape_;
    std::vector<double> data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

// "PGT1" dump: magic, u8 dtype (0=f64, 1=f32), u8 rank, rank x u32 dims,
// little-endian row-major payload.
enum class DType : std::uint8_t { F64 = 0, F32 = 1 };

std::vector<std::uint8_t> encode_pgt(const Tensor& t, DType dtype = DType::F64);
Tensor decode_pgt(std::span<const std::uint8_t> bytes);
void save_pgt(const Tensor& t, const std::filesystem::path& path, DType dtype = DType::F64);
Tensor load_pgt(const std::filesystem::path& path);

}  // namespace motionkit
