#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssf/image.hpp"
#include "ssf/rng.hpp"

namespace ssf {

enum class Split { Train = 0, Val = 1, Test = 2 };

const char* split_name(Split s);

struct ClassImages {
    std::string name;
    std::vector<Image> images;
};

// Class-disjoint train/val/test pools. Every image belongs to exactly one
// class and every class to exactly one split.
struct Dataset {
    std::vector<ClassImages> train, val, test;

    const std::vector<ClassImages>& split(Split s) const;
    std::vector<ClassImages>& split(Split s);
    int total_images() const;
};

// Stable identifier for an image slot, usable as a feature-cache key.
int64_t image_uid(Split s, int class_idx, int image_idx);

// Throws DatasetError if a class name appears in more than one split or a
// class has no images.
void verify_dataset(const Dataset& ds);

// Procedurally generated classification benchmark. Each image is a smooth
// random background plus one class-identifying texture glyph pasted at a
// random grid cell, optionally plus a confuser texture shared across all
// classes. All class glyphs are block permutations of one shared palette,
// so their pixel statistics match and only spatial arrangement carries the
// label.
struct SyntheticSpec {
    int side = 32;
    int train_classes = 12;
    int val_classes = 5;
    int test_classes = 6;
    int images_per_class = 40;
    int glyph_side = 10;            // even; glyph area must stay <= 1/4 of image
    double glyph_intensity = 1.0;   // 0 removes the label signal entirely
    double noise_amplitude = 0.35;  // background contrast
    int distractor_pool = 8;        // shared confuser textures; 0 disables
    double distractor_intensity = 0.9;

    void validate() const;
};

Dataset generate_synthetic_dataset(const SyntheticSpec& spec, uint64_t seed);

// Directory layout root/{train,val,test}/<class>/*.ppm (binary P6).
// side == 0 keeps native resolution, otherwise images are resized.
Dataset load_dataset(const std::string& root, int side = 0);
void save_dataset(const std::string& root, const Dataset& ds);

Image read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Image& img);

}  // namespace ssf
