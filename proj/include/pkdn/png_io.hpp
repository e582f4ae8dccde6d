#pragma once

#include <string>
#include <vector>

namespace pkdn {

// Interleaved 8-bit pixels, row-major. channels is 1 (gray) or 3 (rgb).
struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<unsigned char> pixels;
};

ImageU8 read_png(const std::string& path);
void write_png(const std::string& path, const ImageU8& img);

}  // namespace pkdn
