// SPDX-License-Identifier: Apache-2.0
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "milpath/tensor.hpp"

namespace milpath {

namespace {

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; add byte swapping for this target");

template <typename T>
void put(std::vector<std::uint8_t> &out, T value) {
  const auto *p = reinterpret_cast<const std::uint8_t *>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char *>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw std::runtime_error("truncated tensor file");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_tensors(std::span<const NamedTensor> tensors) {
  std::vector<std::uint8_t> out{'M', 'I', 'L', 'W'};
  put<std::uint32_t>(out, kTensorFormatVersion);
  for (const auto &[name, t] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto dim : t.shape) put<std::uint64_t>(out, dim);
    for (double v : t.values) put<double>(out, v);
  }
  return out;
}

std::vector<NamedTensor> decode_tensors(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  if (in.get_string(4) != "MILW") throw std::runtime_error("bad tensor file magic");
  const auto version = in.get<std::uint32_t>();
  if (version != kTensorFormatVersion)
    throw std::runtime_error("unsupported tensor file version " + std::to_string(version));

  std::vector<NamedTensor> tensors;
  while (!in.done()) {
    NamedTensor nt;
    nt.name = in.get_string(in.get<std::uint32_t>());
    const auto rank = in.get<std::uint32_t>();
    std::vector<std::size_t> shape(rank);
    for (auto &dim : shape) dim = static_cast<std::size_t>(in.get<std::uint64_t>());
    nt.tensor = Tensor(std::move(shape));
    for (auto &v : nt.tensor.values) v = in.get<double>();
    tensors.push_back(std::move(nt));
  }
  return tensors;
}

void write_tensors(const std::filesystem::path &path, std::span<const NamedTensor> tensors) {
  const auto bytes = encode_tensors(tensors);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<NamedTensor> read_tensors(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_tensors(bytes);
}

}  // namespace milpath
