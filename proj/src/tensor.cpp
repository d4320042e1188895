#include "motionkit/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>

namespace motionkit {

static_assert(std::endian::native == std::endian::little, "PGT1 io assumes a little-endian host");

std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

void check_dims(const Shape& s) {
    if (s.empty()) throw ShapeError("tensor rank must be >= 1");
    for (auto d : s) {
        if (d == 0) throw ShapeError("tensor dims must be >= 1, got " + shape_str(s));
    }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    check_dims(shape_);
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims(shape_);
    if (data_.size() != shape_numel(shape_)) {
        throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
    }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("ragged rows");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != size()) {
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

Tensor Tensor::round_to_f32() const {
    Tensor out = *this;
    for (auto& v : out.data_) v = static_cast<double>(static_cast<float>(v));
    return out;
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// ---------------------------------------------------------------- PGT1

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T get(std::span<const std::uint8_t> bytes, std::size_t& pos) {
    if (pos + sizeof(T) > bytes.size()) throw std::runtime_error("PGT1 payload truncated");
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

}  // namespace

std::vector<std::uint8_t> encode_pgt(const Tensor& t, DType dtype) {
    std::vector<std::uint8_t> out{'P', 'G', 'T', '1'};
    out.push_back(static_cast<std::uint8_t>(dtype));
    if (t.rank() > 255) throw ShapeError("rank too large for PGT1");
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) {
        if (d > 0xFFFFFFFFu) throw ShapeError("dimension too large for PGT1");
        put(out, static_cast<std::uint32_t>(d));
    }
    out.reserve(out.size() + t.size() * (dtype == DType::F64 ? 8 : 4));
    for (double v : t.data()) {
        if (dtype == DType::F64) {
            put(out, v);
        } else {
            put(out, static_cast<float>(v));
        }
    }
    return out;
}

Tensor decode_pgt(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 6 || bytes[0] != 'P' || bytes[1] != 'G' || bytes[2] != 'T' || bytes[3] != '1') {
        throw std::runtime_error("not a PGT1 file");
    }
    std::size_t pos = 4;
    auto dtype = get<std::uint8_t>(bytes, pos);
    if (dtype > 1) throw std::runtime_error("unknown PGT1 dtype code " + std::to_string(dtype));
    auto rank = get<std::uint8_t>(bytes, pos);
    Shape shape;
    for (std::uint8_t i = 0; i < rank; ++i) shape.push_back(get<std::uint32_t>(bytes, pos));
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) {
        v = dtype == 0 ? get<double>(bytes, pos) : static_cast<double>(get<float>(bytes, pos));
    }
    if (pos != bytes.size()) throw std::runtime_error("PGT1 trailing bytes");
    return Tensor(std::move(shape), std::move(data));
}

void save_pgt(const Tensor& t, const std::filesystem::path& path, DType dtype) {
    auto bytes = encode_pgt(t, dtype);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

Tensor load_pgt(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_pgt(bytes);
}

}  // namespace motionkit
