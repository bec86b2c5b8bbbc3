#include "ssf/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ssf {

int GridSpec::patch_count() const {
    int k = 0;
    for (int g : sizes) k += g * g;
    return k;
}

void GridSpec::validate(int image_side) const {
    if (sizes.empty()) throw ConfigError("grid: at least one grid size required");
    for (int g : sizes) {
        if (g < 1) throw ConfigError("grid: sizes must be >= 1");
        if (g > image_side)
            throw ConfigError("grid: " + std::to_string(g) + "x" + std::to_string(g) +
                              " exceeds image side " + std::to_string(image_side));
    }
    if (expansion < 1.0) throw ConfigError("grid: expansion factor must be >= 1");
}

std::string GridSpec::str() const {
    std::ostringstream os;
    for (size_t i = 0; i < sizes.size(); ++i)
        os << (i ? "+" : "") << sizes[i] << "x" << sizes[i];
    return os.str();
}

GridSpec GridSpec::parse(const std::string& text) {
    GridSpec spec;
    spec.sizes.clear();
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, '+')) {
        size_t x = part.find('x');
        if (x == std::string::npos) x = part.find('X');
        std::string a = part.substr(0, x);
        std::string b = x == std::string::npos ? a : part.substr(x + 1);
        try {
            int ga = std::stoi(a);
            int gbv = std::stoi(b);
            if (ga != gbv) throw ConfigError("grid '" + part + "': grids must be square");
            spec.sizes.push_back(ga);
        } catch (const ConfigError&) {
            throw;
        } catch (...) {
            throw ConfigError("cannot parse grid spec '" + text + "'");
        }
    }
    if (spec.sizes.empty()) throw ConfigError("empty grid spec '" + text + "'");
    return spec;
}

std::vector<Window> patch_windows(int side, int grid, double expansion) {
    if (grid < 1 || grid > side)
        throw ConfigError("patch_windows: grid " + std::to_string(grid) +
                          " invalid for side " + std::to_string(side));
    auto bound = [&](int i) {
        return static_cast<int>(std::lround(static_cast<double>(i) * side / grid));
    };
    std::vector<Window> out;
    out.reserve(static_cast<size_t>(grid) * grid);
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            double y0 = bound(gy), y1 = bound(gy + 1);
            double x0 = bound(gx), x1 = bound(gx + 1);
            double cy = 0.5 * (y0 + y1), cx = 0.5 * (x0 + x1);
            double hy = 0.5 * expansion * (y1 - y0), hx = 0.5 * expansion * (x1 - x0);
            Window w;
            w.y0 = std::max(0, static_cast<int>(std::lround(cy - hy)));
            w.y1 = std::min(side, static_cast<int>(std::lround(cy + hy)));
            w.x0 = std::max(0, static_cast<int>(std::lround(cx - hx)));
            w.x1 = std::min(side, static_cast<int>(std::lround(cx + hx)));
            out.push_back(w);
        }
    return out;
}

std::vector<Image> split_into_patches(const Image& img, const GridSpec& grid, int target_side) {
    if (img.height != img.width) throw ConfigError("split_into_patches: image must be square");
    grid.validate(img.height);
    std::vector<Image> crops;
    crops.reserve(static_cast<size_t>(grid.patch_count()));
    for (int g : grid.sizes)
        for (const Window& w : patch_windows(img.height, g, grid.expansion))
            crops.push_back(bilinear_resize(crop(img, w.y0, w.x0, w.y1, w.x1), target_side, target_side));
    return crops;
}

int BackboneParams::out_dim() const {
    if (blocks.empty()) throw ContractError("backbone has no blocks");
    return blocks.back().w.dim(0);
}

std::vector<Tensor> BackboneParams::parameters() const {
    std::vector<Tensor> ps;
    for (const auto& blk : blocks) {
        ps.push_back(blk.w);
        ps.push_back(blk.b);
    }
    return ps;
}

BackboneParams BackboneParams::init(const std::vector<int>& channels, int input_side, Rng& rng,
                                    int in_channels) {
    if (channels.empty()) throw ConfigError("backbone: need at least one conv block");
    int blocks = static_cast<int>(channels.size());
    int min_side = 1 << blocks;  // one 2x pool per block
    if (input_side % min_side != 0)
        throw ConfigError("backbone: input side " + std::to_string(input_side) +
                          " must be divisible by " + std::to_string(min_side));
    BackboneParams p;
    p.in_channels = in_channels;
    p.input_side = input_side;
    int cin = in_channels;
    for (int cout : channels) {
        Block blk;
        int fan_in = cin * 9, fan_out = cout * 9;
        blk.w = Tensor::glorot({cout, cin, 3, 3}, rng, fan_in, fan_out);
        blk.b = Tensor::zeros({cout});
        blk.b.set_requires_grad(true);
        p.blocks.push_back(std::move(blk));
        cin = cout;
    }
    return p;
}

Tensor encode_batch(const BackboneParams& params, const Tensor& batch) {
    if (batch.rank() != 4 || batch.dim(1) != params.in_channels)
        throw ConfigError("encode_batch: expected [B," + std::to_string(params.in_channels) +
                          ",S,S] input, got " + shape_str(batch.shape()));
    if (batch.dim(2) != params.input_side || batch.dim(3) != params.input_side)
        throw ConfigError("encode_batch: input side " + std::to_string(batch.dim(2)) +
                          " does not match encoder side " + std::to_string(params.input_side));
    Tensor x = batch;
    for (const auto& blk : params.blocks)
        x = avgpool2x2(tanh_op(conv2d(x, blk.w, blk.b, 1, 1)));
    return global_avg_pool(x);
}

Tensor encode_patch(const BackboneParams& params, const Image& patch) {
    return encode_batch(params, batch_from_images({patch}, params.input_side));
}

Tensor batch_from_images(const std::vector<Image>& imgs, int side) {
    if (imgs.empty()) throw ContractError("batch_from_images: empty batch");
    int ch = imgs[0].channels;
    std::vector<double> data;
    data.reserve(imgs.size() * static_cast<size_t>(ch) * side * side);
    for (const auto& im : imgs) {
        if (im.channels != ch) throw ConfigError("batch_from_images: channel mismatch");
        const Image* src = &im;
        Image resized;
        if (im.height != side || im.width != side) {
            resized = bilinear_resize(im, side, side);
            src = &resized;
        }
        data.insert(data.end(), src->data.begin(), src->data.end());
    }
    return Tensor::from({static_cast<int>(imgs.size()), ch, side, side}, std::move(data));
}

DenseFeatureMap extract_dense_features(const Image& img, const GridSpec& grid,
                                       const BackboneParams& params, int64_t image_id) {
    std::vector<Image> crops = split_into_patches(img, grid, params.input_side);
    DenseFeatureMap fm;
    fm.features = encode_batch(params, batch_from_images(crops, params.input_side));
    fm.image_id = image_id;
    fm.grid = grid;
    return fm;
}

Tensor build_class_representation(const std::vector<DenseFeatureMap>& shots) {
    if (shots.empty()) throw ContractError("build_class_representation: no shots");
    int k = shots[0].features.dim(0);
    int c = shots[0].features.dim(1);
    std::vector<Tensor> rows;
    rows.reserve(shots.size());
    for (const auto& s : shots) {
        if (s.features.dim(0) != k || s.features.dim(1) != c)
            throw ContractError("build_class_representation: inconsistent feature shapes " +
                                shape_str(shots[0].features.shape()) + " vs " +
                                shape_str(s.features.shape()));
        rows.push_back(s.features);
    }
    return vstack(rows);
}

}  // namespace ssf
