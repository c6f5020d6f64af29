#include "tdaf/io/pgm.hpp"

#include <fstream>

#include "tdaf/core/tensor.hpp"

namespace tdaf {

void write_pgm(const std::string& path, int width, int height,
               const std::vector<std::uint8_t>& pixels) {
  require(width > 0 && height > 0, "write_pgm: bad dims ", width, "x", height);
  require(std::int64_t(pixels.size()) == std::int64_t(width) * height, "write_pgm: ",
          pixels.size(), " pixels for ", width, "x", height);
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "write_pgm: cannot open ", path);
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), std::streamsize(pixels.size()));
  require(out.good(), "write_pgm: write failed for ", path);
}

PgmImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "read_pgm: cannot open ", path);
  std::string magic;
  in >> magic;
  require(magic == "P5", "read_pgm: ", path, " is not binary PGM");
  PgmImage img;
  int maxval = 0;
  in >> img.width >> img.height >> maxval;
  require(maxval == 255, "read_pgm: unsupported maxval ", maxval);
  in.get();  // single whitespace after header
  img.pixels.resize(std::size_t(img.width) * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
  require(in.gcount() == std::streamsize(img.pixels.size()), "read_pgm: truncated ", path);
  return img;
}

}  // namespace tdaf
