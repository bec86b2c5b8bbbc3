#pragma once

#include <string>
#include <vector>

#include "ssf/image.hpp"
#include "ssf/tensor.hpp"

namespace ssf {

// Pyramid of square grids used to cut an image into local patches.
// patch_count() is the row count K of the dense feature map.
struct GridSpec {
    std::vector<int> sizes{2, 3};
    double expansion = 2.0;

    int patch_count() const;
    void validate(int image_side) const;
    std::string str() const;           // e.g. "2x2+3x3"
    static GridSpec parse(const std::string& text);
    bool operator==(const GridSpec&) const = default;
};

struct Window {
    int y0, x0, y1, x1;
};

// Cell windows for one g x g grid over a side x side image: boundaries at
// round(i*side/g), each cell expanded about its center by `expansion` and
// clamped to the image. Row-major cell order.
std::vector<Window> patch_windows(int side, int grid, double expansion);

// All pyramid crops of an image, grid by grid in declaration order, resized
// to target_side for the encoder.
std::vector<Image> split_into_patches(const Image& img, const GridSpec& grid, int target_side);

// Small convolutional encoder: per block conv3x3(pad 1) -> tanh -> 2x2 mean
// pool, then global average pooling to a channels.back()-dim embedding.
struct BackboneParams {
    struct Block {
        Tensor w;  // [Cout,Cin,3,3]
        Tensor b;  // [Cout]
    };
    std::vector<Block> blocks;
    int in_channels = 3;
    int input_side = 16;

    int out_dim() const;
    std::vector<Tensor> parameters() const;

    static BackboneParams init(const std::vector<int>& channels, int input_side, Rng& rng,
                               int in_channels = 3);
};

// Batch of images/crops [B,3,S,S] -> embeddings [B,C].
Tensor encode_batch(const BackboneParams& params, const Tensor& batch);

// Single crop -> [C] embedding (row tensor [1 x C]).
Tensor encode_patch(const BackboneParams& params, const Image& patch);

// Stacks images channel-major into a [B,3,S,S] tensor, resizing as needed.
Tensor batch_from_images(const std::vector<Image>& imgs, int side);

// Per-image set of patch embeddings plus provenance.
struct DenseFeatureMap {
    Tensor features;  // [K x C]
    int64_t image_id = -1;
    GridSpec grid;
};

DenseFeatureMap extract_dense_features(const Image& img, const GridSpec& grid,
                                       const BackboneParams& params, int64_t image_id = -1);

// Stacks the M shot feature maps of one class into an [MK x C] matrix.
// No pooling: every patch row is kept.
Tensor build_class_representation(const std::vector<DenseFeatureMap>& shots);

}  // namespace ssf
