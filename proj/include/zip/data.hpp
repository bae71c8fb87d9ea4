#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "zip/geometry.hpp"
#include "zip/tensor.hpp"

namespace zip {

// Interleaved RGB bytes, row-major.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> pixels;  // height * width * 3

    uint8_t& at(int y, int x, int c) {
        return pixels[static_cast<size_t>((y * width + x) * 3 + c)];
    }
    uint8_t at(int y, int x, int c) const {
        return pixels[static_cast<size_t>((y * width + x) * 3 + c)];
    }
};

struct ImageEntry {
    std::string id;
    std::string file;
    int width = 0;
    int height = 0;
    std::vector<Box> boxes;
};

struct DatasetManifest {
    int version = 1;
    uint64_t seed = 0;
    std::vector<ImageEntry> images;
};

// Relative weights of the three object size regimes (sqrt-area about
// side/12, side/5 and side/2).
struct SizeMix {
    double small = 1.0;
    double medium = 1.0;
    double large = 1.0;
};

// Deterministic shape-world: noisy low-contrast background, 1-4 solid
// rectangles/ellipses/triangles per image, gt = exact shape bounding box,
// no gt pair above IoU 0.3. Images land in dir as <id>.ppm.
DatasetManifest gen_shapeworld(int n, int side, uint64_t seed, const SizeMix& mix,
                               const std::string& dir);

void save_annotations(const DatasetManifest& manifest, const std::string& path);
DatasetManifest load_annotations(const std::string& path);

// Binary PPM (P6, maxval 255); loader also accepts plain-text P3.
// Parse errors carry the byte offset.
Image read_image(const std::string& path);
void write_image(const std::string& path, const Image& image);

// Bytes to floats in [0,1] minus 0.5, shape (1,3,H,W).
template <typename T>
TensorPtr<T> to_tensor(const Image& image);

// Bilinear resize of the byte image (used for the dynamic train scale and
// the multi-scale test forward).
Image resize_image(const Image& image, int new_w, int new_h);

// Reflect-pad on the right/bottom so both sides are multiples of `multiple`.
Image pad_to_multiple(const Image& image, int multiple);

}  // namespace zip
