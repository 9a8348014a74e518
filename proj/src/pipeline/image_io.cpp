#include "lar/pipeline/image_io.hpp"

#include "lar/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

namespace lar::pipeline {

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spill(const std::filesystem::path& path, const std::string& header, const std::vector<std::uint8_t>& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << header;
  out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

struct Pnm {
  int width = 0;
  int height = 0;
  int maxval = 0;
  std::size_t offset = 0;
};

Pnm parse_header(const std::vector<unsigned char>& bytes, const char* magic, const std::filesystem::path& path) {
  if (bytes.size() < 2 || bytes[0] != magic[0] || bytes[1] != magic[1]) {
    throw DataError(path.string() + ": expected " + std::string(magic, 2) + " header");
  }
  std::size_t pos = 2;
  auto next_int = [&]() {
    for (;;) {
      while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw DataError(path.string() + ": malformed header");
    long value = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      value = value * 10 + (bytes[pos++] - '0');
      if (value > 1 << 20) throw DataError(path.string() + ": header value too large");
    }
    return static_cast<int>(value);
  };
  Pnm h;
  h.width = next_int();
  h.height = next_int();
  h.maxval = next_int();
  if (h.width < 1 || h.height < 1 || h.maxval < 1 || h.maxval > 255) {
    throw DataError(path.string() + ": unsupported geometry or maxval");
  }
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw DataError(path.string() + ": malformed header");
  h.offset = pos + 1;
  return h;
}

}  // namespace

Tensor to_model(const Image& image) {
  Buffer v(image.values.size());
  std::transform(image.values.begin(), image.values.end(), v.begin(), [](double x) { return 2.0 * x - 1.0; });
  return Tensor({image.channels, image.height, image.width}, std::move(v));
}

Image from_model(const Tensor& t) {
  if (t.rank() != 3) throw DataError("from_model: expected [C, H, W], got " + shape_string(t.shape()));
  Image image(t.dim(0), t.dim(1), t.dim(2));
  const auto src = t.data();
  std::transform(src.begin(), src.end(), image.values.begin(),
                 [](double x) { return std::clamp(0.5 * (x + 1.0), 0.0, 1.0); });
  return image;
}

Image quantize_8bit(const Image& image) {
  Image out = image;
  for (double& v : out.values) v = to_byte(v) / 255.0;
  return out;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 3) throw DataError("write_ppm: need 3 channels, got " + std::to_string(image.channels));
  std::vector<std::uint8_t> body;
  body.reserve(image.values.size());
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) body.push_back(to_byte(image.at(c, y, x)));
    }
  }
  spill(path, "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n", body);
}

Image read_ppm(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  const Pnm h = parse_header(bytes, "P6", path);
  const std::size_t need = static_cast<std::size_t>(h.width) * h.height * 3;
  if (bytes.size() - h.offset < need) throw DataError(path.string() + ": truncated pixel data");
  Image image(3, h.height, h.width);
  std::size_t i = h.offset;
  for (int y = 0; y < h.height; ++y) {
    for (int x = 0; x < h.width; ++x) {
      for (int c = 0; c < 3; ++c) image.at(c, y, x) = static_cast<double>(bytes[i++]) / h.maxval;
    }
  }
  return image;
}

void write_pgm(const std::filesystem::path& path, const masks::PixelMask& mask) {
  std::vector<std::uint8_t> body(mask.flat().begin(), mask.flat().end());
  for (auto& b : body) b = b ? 255 : 0;
  spill(path, "P5\n" + std::to_string(mask.width()) + " " + std::to_string(mask.height()) + "\n255\n", body);
}

masks::PixelMask read_pgm(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  const Pnm h = parse_header(bytes, "P5", path);
  const std::size_t need = static_cast<std::size_t>(h.width) * h.height;
  if (bytes.size() - h.offset < need) throw DataError(path.string() + ": truncated pixel data");
  masks::PixelMask mask(h.height, h.width);
  for (std::size_t i = 0; i < need; ++i) mask.set(static_cast<int>(i), bytes[h.offset + i] * 255 >= 128 * h.maxval);
  return mask;
}

void write_token_grid(const std::filesystem::path& path, const std::vector<int>& ids, int height, int width) {
  if (static_cast<int>(ids.size()) != height * width) throw DataError("write_token_grid: size mismatch");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "tokens " << height << " " << width << "\n";
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) out << (x ? " " : "") << ids[static_cast<std::size_t>(y * width + x)];
    out << "\n";
  }
}

std::vector<int> read_token_grid(const std::filesystem::path& path, int& height, int& width) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string tag;
  if (!(in >> tag >> height >> width) || tag != "tokens" || height < 1 || width < 1) {
    throw DataError(path.string() + ": expected 'tokens H W' header");
  }
  std::vector<int> ids(static_cast<std::size_t>(height) * width);
  for (int& id : ids) {
    if (!(in >> id)) throw DataError(path.string() + ": truncated token grid");
  }
  return ids;
}

}  // namespace lar::pipeline
