#include "zip/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "zip/rng.hpp"

namespace zip {

namespace {

using nlohmann::json;

struct ShapeSpec {
    int kind = 0;  // 0 rect, 1 ellipse, 2 triangle
    Box box;
    double apex_u = 0.5;  // triangle apex position along the top edge
    uint8_t color[3] = {0, 0, 0};
};

void fill_shape(Image& img, const ShapeSpec& s) {
    const int x_lo = std::max(0, static_cast<int>(std::floor(s.box.x1)));
    const int x_hi = std::min(img.width - 1, static_cast<int>(std::ceil(s.box.x2)));
    const int y_lo = std::max(0, static_cast<int>(std::floor(s.box.y1)));
    const int y_hi = std::min(img.height - 1, static_cast<int>(std::ceil(s.box.y2)));
    const double cx = s.box.cx(), cy = s.box.cy();
    const double a = 0.5 * s.box.width(), b = 0.5 * s.box.height();
    // triangle: apex on the top edge, base along the bottom edge
    const double ax = s.box.x1 + s.apex_u * s.box.width(), ay = s.box.y1;
    const double bx = s.box.x1, by = s.box.y2;
    const double cx3 = s.box.x2, cy3 = s.box.y2;
    auto tri_side = [](double px, double py, double x0, double y0, double x1, double y1) {
        return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
    };
    for (int y = y_lo; y <= y_hi; ++y) {
        for (int x = x_lo; x <= x_hi; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            bool inside = false;
            switch (s.kind) {
                case 0:
                    inside = px >= s.box.x1 && px <= s.box.x2 && py >= s.box.y1 && py <= s.box.y2;
                    break;
                case 1: {
                    const double dx = (px - cx) / a, dy = (py - cy) / b;
                    inside = dx * dx + dy * dy <= 1.0;
                    break;
                }
                case 2: {
                    const double d0 = tri_side(px, py, ax, ay, bx, by);
                    const double d1 = tri_side(px, py, bx, by, cx3, cy3);
                    const double d2 = tri_side(px, py, cx3, cy3, ax, ay);
                    inside = (d0 >= 0 && d1 >= 0 && d2 >= 0) || (d0 <= 0 && d1 <= 0 && d2 <= 0);
                    break;
                }
                default: break;
            }
            if (inside)
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = s.color[c];
        }
    }
}

}  // namespace

DatasetManifest gen_shapeworld(int n, int side, uint64_t seed, const SizeMix& mix,
                               const std::string& dir) {
    if (n < 1) throw std::invalid_argument("gen_shapeworld: n must be positive");
    if (side < 64) throw std::invalid_argument("gen_shapeworld: side must be at least 64");
    const double mix_total = mix.small + mix.medium + mix.large;
    if (mix_total <= 0) throw std::invalid_argument("gen_shapeworld: mix weights must sum > 0");
    std::filesystem::create_directories(dir);

    Rng root(seed);
    DatasetManifest manifest;
    manifest.seed = seed;
    for (int i = 0; i < n; ++i) {
        Rng rng = root.fork(static_cast<uint64_t>(i) + 1);
        Image img;
        img.width = side;
        img.height = side;
        img.pixels.resize(static_cast<size_t>(side) * side * 3);
        const int base = 96 + rng.uniform_index(64);
        for (auto& p : img.pixels)
            p = static_cast<uint8_t>(std::clamp(base + rng.uniform_index(49) - 24, 0, 255));

        std::vector<Box> gts;
        std::vector<ShapeSpec> shapes;
        const int want = 1 + rng.uniform_index(4);
        for (int k = 0; k < want; ++k) {
            const double u = rng.uniform01() * mix_total;
            const double regime =
                u < mix.small ? side / 12.0 : (u < mix.small + mix.medium ? side / 5.0 : side / 2.0);
            bool placed = false;
            for (int attempt = 0; attempt < 30 && !placed; ++attempt) {
                const double root_area = regime * rng.uniform(0.75, 1.25);
                const double ratio = rng.uniform(0.5, 2.0);  // width/height
                const double w = root_area * std::sqrt(ratio);
                const double h = root_area / std::sqrt(ratio);
                const double margin = 2.0;
                if (w + 2 * margin >= side || h + 2 * margin >= side) continue;
                const double x1 = rng.uniform(margin, side - margin - w);
                const double y1 = rng.uniform(margin, side - margin - h);
                const Box box{x1, y1, x1 + w, y1 + h};
                bool ok = true;
                for (const auto& g : gts)
                    if (iou(box, g) > 0.3) {
                        ok = false;
                        break;
                    }
                if (!ok) continue;
                ShapeSpec s;
                s.kind = rng.uniform_index(3);
                s.box = box;
                s.apex_u = rng.uniform(0.2, 0.8);
                for (int tries = 0; tries < 64; ++tries) {
                    int dist = 0;
                    for (int c = 0; c < 3; ++c) {
                        s.color[c] = static_cast<uint8_t>(rng.uniform_index(256));
                        dist += std::abs(static_cast<int>(s.color[c]) - base);
                    }
                    if (dist >= 150) break;  // keep shapes visible on the background
                }
                shapes.push_back(s);
                gts.push_back(box);
                placed = true;
            }
        }
        // paint large shapes first so a small one is never buried under a
        // later, bigger neighbor (IoU <= 0.3 still allows containment)
        std::stable_sort(shapes.begin(), shapes.end(),
                         [](const ShapeSpec& a, const ShapeSpec& b) { return a.box.area() > b.box.area(); });
        for (const auto& s : shapes) fill_shape(img, s);

        char id[32];
        std::snprintf(id, sizeof(id), "img_%05d", i);
        ImageEntry entry;
        entry.id = id;
        entry.file = std::string(id) + ".ppm";
        entry.width = side;
        entry.height = side;
        entry.boxes = gts;
        write_image((std::filesystem::path(dir) / entry.file).string(), img);
        manifest.images.push_back(std::move(entry));
    }
    return manifest;
}

void save_annotations(const DatasetManifest& manifest, const std::string& path) {
    json j;
    j["version"] = manifest.version;
    j["seed"] = manifest.seed;
    j["images"] = json::array();
    for (const auto& e : manifest.images) {
        json boxes = json::array();
        for (const auto& b : e.boxes) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
        j["images"].push_back({{"id", e.id},
                               {"file", e.file},
                               {"width", e.width},
                               {"height", e.height},
                               {"boxes", boxes}});
    }
    std::ofstream os(path);
    if (!os) throw std::runtime_error("save_annotations: cannot open " + path);
    os << j.dump(2) << "\n";
}

DatasetManifest load_annotations(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_annotations: cannot open " + path);
    json j;
    try {
        is >> j;
    } catch (const json::parse_error& e) {
        throw std::runtime_error("load_annotations: " + std::string(e.what()));
    }
    DatasetManifest m;
    m.version = j.at("version").get<int>();
    if (m.version != 1)
        throw std::runtime_error("load_annotations: unknown manifest version " +
                                 std::to_string(m.version));
    m.seed = j.value("seed", uint64_t{0});
    for (const auto& je : j.at("images")) {
        ImageEntry e;
        e.id = je.at("id").get<std::string>();
        e.file = je.at("file").get<std::string>();
        e.width = je.at("width").get<int>();
        e.height = je.at("height").get<int>();
        for (const auto& jb : je.at("boxes")) {
            if (jb.size() != 4)
                throw std::runtime_error("load_annotations: box needs 4 coordinates in image " + e.id);
            e.boxes.push_back(Box{jb[0].get<double>(), jb[1].get<double>(), jb[2].get<double>(),
                                  jb[3].get<double>()});
        }
        m.images.push_back(std::move(e));
    }
    return m;
}

namespace {

[[noreturn]] void ppm_error(const std::string& path, std::istream& is, const std::string& what) {
    throw std::runtime_error("read_image: " + path + ": " + what + " at byte offset " +
                             std::to_string(static_cast<long long>(is.tellg())));
}

int ppm_int(std::istream& is, const std::string& path) {
    // skip whitespace and '#' comments per the netpbm grammar
    int c = is.peek();
    while (c == '#' || std::isspace(c)) {
        if (c == '#') {
            std::string line;
            std::getline(is, line);
        } else {
            is.get();
        }
        c = is.peek();
    }
    int v = -1;
    if (!(is >> v) || v < 0) ppm_error(path, is, "expected a non-negative integer");
    return v;
}

}  // namespace

Image read_image(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_image: cannot open " + path);
    std::string magic;
    is >> magic;
    if (magic != "P6" && magic != "P3") ppm_error(path, is, "bad magic '" + magic + "'");
    Image img;
    img.width = ppm_int(is, path);
    img.height = ppm_int(is, path);
    const int maxval = ppm_int(is, path);
    if (maxval != 255) ppm_error(path, is, "unsupported maxval " + std::to_string(maxval));
    if (img.width < 1 || img.height < 1) ppm_error(path, is, "bad dimensions");
    const size_t count = static_cast<size_t>(img.width) * img.height * 3;
    img.pixels.resize(count);
    if (magic == "P6") {
        is.get();  // single whitespace after maxval
        is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(count));
        if (static_cast<size_t>(is.gcount()) != count) ppm_error(path, is, "truncated pixel data");
    } else {
        for (size_t i = 0; i < count; ++i) {
            const int v = ppm_int(is, path);
            if (v > 255) ppm_error(path, is, "sample out of range");
            img.pixels[i] = static_cast<uint8_t>(v);
        }
    }
    return img;
}

void write_image(const std::string& path, const Image& image) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_image: cannot open " + path);
    os << "P6\n" << image.width << " " << image.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(image.pixels.data()),
             static_cast<std::streamsize>(image.pixels.size()));
    if (!os) throw std::runtime_error("write_image: write failure on " + path);
}

template <typename T>
TensorPtr<T> to_tensor(const Image& image) {
    auto t = make_tensor<T>({1, 3, image.height, image.width});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < image.height; ++y)
            for (int x = 0; x < image.width; ++x)
                t->at4(0, c, y, x) = static_cast<T>(image.at(y, x, c) / 255.0 - 0.5);
    return t;
}

template TensorPtr<float> to_tensor<float>(const Image&);
template TensorPtr<double> to_tensor<double>(const Image&);

Image resize_image(const Image& image, int new_w, int new_h) {
    Image out;
    out.width = new_w;
    out.height = new_h;
    out.pixels.resize(static_cast<size_t>(new_w) * new_h * 3);
    const double sx = static_cast<double>(image.width) / new_w;
    const double sy = static_cast<double>(image.height) / new_h;
    for (int y = 0; y < new_h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, image.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < new_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, image.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const double v = (1 - wy) * ((1 - wx) * image.at(y0, x0, c) + wx * image.at(y0, x1, c)) +
                                 wy * ((1 - wx) * image.at(y1, x0, c) + wx * image.at(y1, x1, c));
                out.at(y, x, c) = static_cast<uint8_t>(std::clamp(v + 0.5, 0.0, 255.0));
            }
        }
    }
    return out;
}

Image pad_to_multiple(const Image& image, int multiple) {
    const int pw = (multiple - image.width % multiple) % multiple;
    const int ph = (multiple - image.height % multiple) % multiple;
    if (pw == 0 && ph == 0) return image;
    Image out;
    out.width = image.width + pw;
    out.height = image.height + ph;
    out.pixels.resize(static_cast<size_t>(out.width) * out.height * 3);
    auto reflect = [](int v, int n) {
        if (v < n) return v;
        const int r = 2 * n - 2 - v;
        return std::clamp(r, 0, n - 1);
    };
    for (int y = 0; y < out.height; ++y) {
        const int sy = reflect(y, image.height);
        for (int x = 0; x < out.width; ++x) {
            const int sx = reflect(x, image.width);
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(sy, sx, c);
        }
    }
    return out;
}

}  // namespace zip
