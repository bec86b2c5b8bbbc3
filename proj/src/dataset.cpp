#include "ssf/dataset.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace ssf {

const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

const std::vector<ClassImages>& Dataset::split(Split s) const {
    switch (s) {
        case Split::Train: return train;
        case Split::Val: return val;
        case Split::Test: return test;
    }
    return train;
}

std::vector<ClassImages>& Dataset::split(Split s) {
    return const_cast<std::vector<ClassImages>&>(static_cast<const Dataset*>(this)->split(s));
}

int Dataset::total_images() const {
    int n = 0;
    for (Split s : {Split::Train, Split::Val, Split::Test})
        for (const auto& c : split(s)) n += static_cast<int>(c.images.size());
    return n;
}

int64_t image_uid(Split s, int class_idx, int image_idx) {
    return (static_cast<int64_t>(s) << 40) | (static_cast<int64_t>(class_idx) << 20) |
           static_cast<int64_t>(image_idx);
}

void verify_dataset(const Dataset& ds) {
    std::set<std::string> seen;
    for (Split s : {Split::Train, Split::Val, Split::Test})
        for (const auto& c : ds.split(s)) {
            if (!seen.insert(c.name).second)
                throw DatasetError("class '" + c.name + "' appears in more than one split");
            if (c.images.empty())
                throw DatasetError("class '" + c.name + "' has no images");
        }
}

void SyntheticSpec::validate() const {
    if (side < 8) throw ConfigError("synthetic: side must be >= 8");
    if (glyph_side < 4 || glyph_side % 2 != 0)
        throw ConfigError("synthetic: glyph_side must be even and >= 4");
    if (glyph_side > side / 2)
        throw ConfigError("synthetic: glyph must cover at most 1/4 of the image area");
    if (train_classes < 1 || val_classes < 1 || test_classes < 1)
        throw ConfigError("synthetic: every split needs at least one class");
    if (images_per_class < 1) throw ConfigError("synthetic: images_per_class must be >= 1");
    if (glyph_intensity < 0 || glyph_intensity > 1 || distractor_intensity < 0 ||
        distractor_intensity > 1)
        throw ConfigError("synthetic: intensities must be in [0, 1]");
    if (noise_amplitude < 0 || noise_amplitude > 1)
        throw ConfigError("synthetic: noise_amplitude must be in [0, 1]");
    if (distractor_pool < 0) throw ConfigError("synthetic: distractor_pool must be >= 0");
}

namespace {

// Texture assembled from 2x2 blocks of a shared palette. Arrangements are
// per-texture permutations, so all textures share one pixel multiset.
using Block = std::array<double, 12>;  // 2x2 x rgb

std::vector<Block> make_palette(int n_blocks, Rng& rng) {
    std::vector<Block> palette(static_cast<size_t>(n_blocks));
    for (auto& b : palette)
        for (auto& v : b) v = rng.uniform();
    return palette;
}

Image texture_from_palette(const std::vector<Block>& palette, int side, Rng& rng) {
    int gb = side / 2;
    std::vector<int> arrangement(static_cast<size_t>(gb) * gb);
    for (size_t i = 0; i < arrangement.size(); ++i)
        arrangement[i] = static_cast<int>(i % palette.size());
    rng.shuffle(arrangement);
    Image tex(3, side, side);
    for (int by = 0; by < gb; ++by)
        for (int bx = 0; bx < gb; ++bx) {
            const Block& b = palette[static_cast<size_t>(arrangement[by * gb + bx])];
            for (int c = 0; c < 3; ++c)
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx)
                        tex.at(c, 2 * by + dy, 2 * bx + dx) =
                            b[static_cast<size_t>(c) * 4 + dy * 2 + dx];
        }
    return tex;
}

Image smooth_background(int side, double amplitude, Rng& rng) {
    const int coarse = 4;
    Image grid(3, coarse, coarse);
    for (auto& v : grid.data) v = rng.uniform(-1.0, 1.0);
    Image up = bilinear_resize(grid, side, side);
    Image img(3, side, side);
    for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = 0.5 + amplitude * up.data[i];
    clamp01(img);
    return img;
}

void paste(Image& img, const Image& patch, int y0, int x0, double alpha) {
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < patch.height; ++y)
            for (int x = 0; x < patch.width; ++x) {
                double& dst = img.at(c, y0 + y, x0 + x);
                dst = (1.0 - alpha) * dst + alpha * patch.at(c, y, x);
            }
    clamp01(img);
}

}  // namespace

Dataset generate_synthetic_dataset(const SyntheticSpec& spec, uint64_t seed) {
    spec.validate();
    Rng master(seed);

    int gb = spec.glyph_side / 2;
    auto palette = make_palette(gb * gb, master);

    std::vector<Image> distractors;
    for (int i = 0; i < spec.distractor_pool; ++i) {
        Rng r = master.split(0x0D00 + static_cast<uint64_t>(i));
        distractors.push_back(texture_from_palette(palette, spec.glyph_side, r));
    }

    int cells = spec.side / spec.glyph_side;  // anchor grid for pasting
    Dataset ds;
    int class_counter = 0;
    for (Split s : {Split::Train, Split::Val, Split::Test}) {
        int n_classes = s == Split::Train  ? spec.train_classes
                        : s == Split::Val ? spec.val_classes
                                          : spec.test_classes;
        auto& classes = ds.split(s);
        for (int ci = 0; ci < n_classes; ++ci, ++class_counter) {
            Rng glyph_rng = master.split(0xC1A5ULL * 1000 + static_cast<uint64_t>(class_counter));
            Image glyph = texture_from_palette(palette, spec.glyph_side, glyph_rng);
            ClassImages cls;
            char buf[16];
            std::snprintf(buf, sizeof(buf), "c%03d", class_counter);
            cls.name = buf;
            for (int k = 0; k < spec.images_per_class; ++k) {
                Rng r = master.split((static_cast<uint64_t>(class_counter) << 24) +
                                     static_cast<uint64_t>(k) + 0x1000000000ULL);
                Image img = smooth_background(spec.side, spec.noise_amplitude, r);
                int cell = r.uniform_int(cells * cells);
                int gy = (cell / cells) * spec.glyph_side;
                int gx = (cell % cells) * spec.glyph_side;
                if (spec.distractor_pool > 0 && spec.distractor_intensity > 0.0) {
                    int dcell = r.uniform_int(cells * cells - 1);
                    if (dcell >= cell) ++dcell;  // never covers the glyph cell
                    int dy = (dcell / cells) * spec.glyph_side;
                    int dx = (dcell % cells) * spec.glyph_side;
                    const Image& tex =
                        distractors[static_cast<size_t>(r.uniform_int(spec.distractor_pool))];
                    paste(img, tex, dy, dx, spec.distractor_intensity);
                }
                if (spec.glyph_intensity > 0.0) paste(img, glyph, gy, gx, spec.glyph_intensity);
                cls.images.push_back(std::move(img));
            }
            classes.push_back(std::move(cls));
        }
    }
    verify_dataset(ds);
    return ds;
}

// ----- PPM -----

namespace {

int next_token(std::istream& is) {
    // skips whitespace and '#' comments
    while (true) {
        int c = is.peek();
        if (c == '#') {
            std::string line;
            std::getline(is, line);
        } else if (std::isspace(c)) {
            is.get();
        } else {
            break;
        }
    }
    int v;
    if (!(is >> v)) return -1;
    return v;
}

}  // namespace

Image read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "'");
    std::string magic;
    f >> magic;
    if (magic != "P6") throw IoError("'" + path + "': not a binary PPM (P6) file");
    int w = next_token(f);
    int h = next_token(f);
    int maxval = next_token(f);
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
        throw IoError("'" + path + "': malformed PPM header");
    f.get();  // single whitespace after maxval
    std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (f.gcount() != static_cast<std::streamsize>(raw.size()))
        throw IoError("'" + path + "': truncated pixel data");
    Image img(3, h, w);
    size_t i = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = static_cast<double>(raw[i++]) / maxval;
    return img;
}

void write_ppm(const std::string& path, const Image& img) {
    if (img.channels != 3) throw IoError("write_ppm: need 3 channels");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write '" + path + "'");
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> raw;
    raw.reserve(static_cast<size_t>(img.width) * img.height * 3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
                raw.push_back(static_cast<unsigned char>(std::lround(v * 255.0)));
            }
    f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!f) throw IoError("write failed for '" + path + "'");
}

Dataset load_dataset(const std::string& root, int side) {
    Dataset ds;
    for (Split s : {Split::Train, Split::Val, Split::Test}) {
        fs::path dir = fs::path(root) / split_name(s);
        if (!fs::is_directory(dir))
            throw DatasetError("missing split directory '" + dir.string() + "'");
        std::vector<std::string> class_dirs;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
        std::sort(class_dirs.begin(), class_dirs.end());
        for (const auto& cname : class_dirs) {
            ClassImages cls;
            cls.name = cname;
            std::vector<std::string> files;
            for (const auto& e : fs::directory_iterator(dir / cname))
                if (e.is_regular_file()) files.push_back(e.path().string());
            std::sort(files.begin(), files.end());
            for (const auto& file : files) {
                Image img = read_ppm(file);
                if (side > 0 && (img.height != side || img.width != side))
                    img = bilinear_resize(img, side, side);
                cls.images.push_back(std::move(img));
            }
            if (cls.images.empty())
                throw DatasetError("class directory '" + (dir / cname).string() + "' has no images");
            ds.split(s).push_back(std::move(cls));
        }
    }
    verify_dataset(ds);
    return ds;
}

void save_dataset(const std::string& root, const Dataset& ds) {
    for (Split s : {Split::Train, Split::Val, Split::Test}) {
        for (const auto& cls : ds.split(s)) {
            fs::path dir = fs::path(root) / split_name(s) / cls.name;
            fs::create_directories(dir);
            for (size_t i = 0; i < cls.images.size(); ++i) {
                char buf[24];
                std::snprintf(buf, sizeof(buf), "img%04zu.ppm", i);
                write_ppm((dir / buf).string(), cls.images[i]);
            }
        }
    }
}

}  // namespace ssf
