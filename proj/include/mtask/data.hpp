#pragma once

#include <array>
#include <string>
#include <vector>

#include "mtask/multitask.hpp"
#include "mtask/rng.hpp"

namespace mtask {

struct LabeledImage {
  int height = 0, width = 0, channels = 3;
  std::vector<float> pixels;  // HWC, values in [0,1]
  int label = -1;             // y
  double portion = 0.0;       // z, kcal
};

enum class Provenance { Original, Augmented };
enum class SplitTag { None, Train, Test };

struct DatasetItem {
  LabeledImage image;
  Provenance provenance = Provenance::Original;
  SplitTag split = SplitTag::None;
  int source_index = -1;  // augmented items point at their source
  std::string aug_op;
};

struct GenParams {
  int n_classes = 21;
  int per_class = 100;     // originals in the largest class
  int image_size = 32;
  double imbalance = 0.4;  // smaller classes get down to (1-imbalance)*per_class originals
  double z_max = 984.0;    // portion of a full-frame object at density 1
  uint64_t seed = 7;
  bool operator==(const GenParams&) const = default;
};

struct Dataset {
  int n_classes = 0;
  std::vector<std::string> class_names;
  std::vector<DatasetItem> items;
  GenParams gen;

  // counts per class; SplitTag::None counts everything
  std::vector<int> class_counts(SplitTag split = SplitTag::None) const;
  std::vector<SampleView> views(SplitTag split = SplitTag::None) const;
  bool has_split() const;
};

// Portion model: z = density * (object pixels / image pixels) * z_max.
double class_density(int label, int n_classes);
double portion_from_area(double density, int64_t area_px, int64_t image_px, double z_max);
// Object pixels counted against the black background.
int64_t object_area(const LabeledImage& image);

// Classes are (shape, texture) families with class-indexed density; items
// draw scale, position and color jitter from a per-item stream, so item (k,i)
// is the same whether generated alone or in bulk.
Dataset generate_synthetic_dataset(const GenParams& params);
LabeledImage generate_item(const GenParams& params, int label, int index_in_class);

extern const std::array<const char*, 5> kAugOps;  // rot90 rot270 flip_x flip_y flip_xy
LabeledImage apply_aug(const LabeledImage& src, const std::string& op);

// Tops up under-represented classes with distinct (source, op) pairs sampled
// uniformly without replacement; groundtruth is copied unchanged. When the
// dataset carries split assignments only the train population is touched.
// A class that cannot reach the target inside the 6x ceiling is an error.
Dataset balanced_augment(const Dataset& ds, int target_per_class, uint64_t seed);

// Stratified per class; every class lands in both splits.
Dataset split_train_test(const Dataset& ds, double test_fraction, uint64_t seed);

// Directory layout: manifest.json (metadata, per-item records, checksums)
// plus images.bin (f32 pixel blob). Round-trips are bitwise exact.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace mtask
