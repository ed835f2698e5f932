#include "mtask/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace mtask {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr float kAreaThreshold = 0.05f;
constexpr char kImagesMagic[8] = {'M', 'T', 'I', 'M', 'G', '0', '0', '1'};

const std::array<const char*, 7> kShapeNames = {"circle",  "square", "triangle", "diamond",
                                                "ring",    "cross",  "bar"};
const std::array<const char*, 3> kTextureNames = {"solid", "striped", "checker"};

uint64_t fnv1a(const void* data, size_t len) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h = h - std::floor(h);
  double c = v * s;
  double hp = h * 6.0;
  double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  double m = v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

struct ShapeGeom {
  double ex, ey;  // half extents as multiples of the size parameter h
  double area;    // area as a multiple of h^2
};

ShapeGeom shape_geom(int shape) {
  switch (shape) {
    case 0: return {1.0, 1.0, M_PI};               // circle
    case 1: return {1.0, 1.0, 4.0};                // square
    case 2: return {1.0, 1.0, 2.0};                // triangle
    case 3: return {1.0, 1.0, 2.0};                // diamond
    case 4: return {1.0, 1.0, M_PI * (1.0 - 0.55 * 0.55)};  // ring
    case 5: return {1.0, 1.0, 20.0 / 9.0};         // cross
    default: return {1.5, 0.5, 3.0};               // bar
  }
}

bool inside_shape(int shape, double dx, double dy, double h) {
  switch (shape) {
    case 0: return dx * dx + dy * dy <= h * h;
    case 1: return std::fabs(dx) <= h && std::fabs(dy) <= h;
    case 2: return dy >= -h && dy <= h && std::fabs(dx) <= (dy + h) * 0.5;
    case 3: return std::fabs(dx) + std::fabs(dy) <= h;
    case 4: {
      double r2 = dx * dx + dy * dy;
      double hi = 0.55 * h;
      return r2 <= h * h && r2 >= hi * hi;
    }
    case 5:
      return std::fabs(dx) <= h && std::fabs(dy) <= h &&
             (std::fabs(dx) <= h / 3.0 || std::fabs(dy) <= h / 3.0);
    default: return std::fabs(dx) <= 1.5 * h && std::fabs(dy) <= 0.5 * h;
  }
}

std::string split_name(SplitTag s) {
  switch (s) {
    case SplitTag::Train: return "train";
    case SplitTag::Test: return "test";
    default: return "none";
  }
}

SplitTag split_from_name(const std::string& s) {
  if (s == "train") return SplitTag::Train;
  if (s == "test") return SplitTag::Test;
  if (s == "none") return SplitTag::None;
  throw DataError("dataset: unknown split tag '" + s + "'");
}

}  // namespace

std::vector<int> Dataset::class_counts(SplitTag split) const {
  std::vector<int> counts(static_cast<size_t>(n_classes), 0);
  for (const DatasetItem& it : items) {
    if (split != SplitTag::None && it.split != split) continue;
    counts.at(static_cast<size_t>(it.image.label))++;
  }
  return counts;
}

std::vector<SampleView> Dataset::views(SplitTag split) const {
  std::vector<SampleView> out;
  for (const DatasetItem& it : items) {
    if (split != SplitTag::None && it.split != split) continue;
    SampleView v;
    v.pixels = it.image.pixels.data();
    v.height = it.image.height;
    v.width = it.image.width;
    v.channels = it.image.channels;
    v.label = it.image.label;
    v.portion = it.image.portion;
    out.push_back(v);
  }
  return out;
}

bool Dataset::has_split() const {
  for (const DatasetItem& it : items)
    if (it.split != SplitTag::None) return true;
  return false;
}

double class_density(int label, int n_classes) {
  if (n_classes < 2) throw DataError("class_density: need at least 2 classes");
  return static_cast<double>(label) / static_cast<double>(n_classes - 1);
}

double portion_from_area(double density, int64_t area_px, int64_t image_px, double z_max) {
  return density * (static_cast<double>(area_px) / static_cast<double>(image_px)) * z_max;
}

int64_t object_area(const LabeledImage& image) {
  int64_t count = 0;
  size_t n = image.pixels.size() / static_cast<size_t>(image.channels);
  for (size_t p = 0; p < n; ++p) {
    float mx = 0.0f;
    for (int c = 0; c < image.channels; ++c)
      mx = std::max(mx, image.pixels[p * static_cast<size_t>(image.channels) + c]);
    if (mx > kAreaThreshold) ++count;
  }
  return count;
}

LabeledImage generate_item(const GenParams& params, int label, int index_in_class) {
  int S = params.image_size;
  if (S < 8) throw DataError("generate: image_size " + std::to_string(S) + " too small to render");
  Rng rng(stream_seed(params.seed, "item",
                      static_cast<uint64_t>(label) * 1000003ULL +
                          static_cast<uint64_t>(index_in_class)));

  int shape = label % static_cast<int>(kShapeNames.size());
  int texture = (label / static_cast<int>(kShapeNames.size())) % 3;

  double target_frac = rng.uniform(0.06, 0.55);
  ShapeGeom geom = shape_geom(shape);
  double h = std::sqrt(target_frac * S * S / geom.area);
  double h_max = std::min((S / 2.0 - 1.5) / geom.ex, (S / 2.0 - 1.5) / geom.ey);
  h = std::min(h, h_max);

  double slack_x = S / 2.0 - 1.0 - geom.ex * h;
  double slack_y = S / 2.0 - 1.0 - geom.ey * h;
  double cx = S / 2.0 + rng.uniform(-slack_x, slack_x);
  double cy = S / 2.0 + rng.uniform(-slack_y, slack_y);

  double hue = shape / 7.0 + rng.uniform(-0.02, 0.02);
  double sat = rng.uniform(0.55, 0.8);
  double val = rng.uniform(0.55, 0.9);
  double rgb[3];
  hsv_to_rgb(hue, sat, val, rgb);

  LabeledImage img;
  img.height = S;
  img.width = S;
  img.channels = 3;
  img.pixels.assign(static_cast<size_t>(S) * S * 3, 0.0f);
  int64_t area = 0;
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      if (!inside_shape(shape, x - cx, y - cy, h)) continue;
      double tex = 1.0;
      if (texture == 1) tex = ((y / 2) % 2 == 0) ? 1.0 : 0.45;
      if (texture == 2) tex = (((x / 2) + (y / 2)) % 2 == 0) ? 1.0 : 0.45;
      size_t base = (static_cast<size_t>(y) * S + x) * 3;
      for (int c = 0; c < 3; ++c) img.pixels[base + c] = static_cast<float>(rgb[c] * tex);
      ++area;
    }

  img.label = label;
  img.portion = portion_from_area(class_density(label, params.n_classes), area,
                                  static_cast<int64_t>(S) * S, params.z_max);
  return img;
}

Dataset generate_synthetic_dataset(const GenParams& params) {
  if (params.n_classes < 2) throw DataError("generate: n_classes must be at least 2");
  if (params.per_class < 1) throw DataError("generate: per_class must be at least 1");
  if (params.imbalance < 0.0 || params.imbalance >= 1.0)
    throw DataError("generate: imbalance must be in [0, 1)");

  Dataset ds;
  ds.n_classes = params.n_classes;
  ds.gen = params;
  Rng count_rng(stream_seed(params.seed, "class-counts"));
  for (int k = 0; k < params.n_classes; ++k) {
    std::string base = std::string(kTextureNames[(k / 7) % 3]) + "_" + kShapeNames[k % 7];
    if (k >= 21) base += "_" + std::to_string(k);
    ds.class_names.push_back(base);
    int missing = static_cast<int>(std::floor(params.imbalance * params.per_class *
                                              count_rng.uniform()));
    int count = std::max(1, params.per_class - missing);
    for (int i = 0; i < count; ++i) {
      DatasetItem item;
      item.image = generate_item(params, k, i);
      ds.items.push_back(std::move(item));
    }
  }
  return ds;
}

const std::array<const char*, 5> kAugOps = {"rot90", "rot270", "flip_x", "flip_y", "flip_xy"};

LabeledImage apply_aug(const LabeledImage& src, const std::string& op) {
  int H = src.height, W = src.width, C = src.channels;
  if ((op == "rot90" || op == "rot270") && H != W)
    throw DataError("augment: rotations require square images");
  LabeledImage out = src;
  auto at = [&](const LabeledImage& im, int y, int x, int c) -> float {
    return im.pixels[(static_cast<size_t>(y) * W + x) * static_cast<size_t>(C) + c];
  };
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        float v;
        if (op == "rot90") v = at(src, H - 1 - x, y, c);
        else if (op == "rot270") v = at(src, x, W - 1 - y, c);
        else if (op == "flip_x") v = at(src, H - 1 - y, x, c);
        else if (op == "flip_y") v = at(src, y, W - 1 - x, c);
        else if (op == "flip_xy") v = at(src, H - 1 - y, W - 1 - x, c);
        else throw DataError("augment: unknown op '" + op + "'");
        out.pixels[(static_cast<size_t>(y) * W + x) * static_cast<size_t>(C) + c] = v;
      }
  return out;
}

Dataset balanced_augment(const Dataset& ds, int target_per_class, uint64_t seed) {
  if (target_per_class < 1) throw DataError("augment: target_per_class must be positive");
  bool split_aware = ds.has_split();
  Dataset out = ds;

  // population per class: original train items (or all originals when unsplit)
  std::vector<std::vector<int>> sources(static_cast<size_t>(ds.n_classes));
  std::vector<int> population(static_cast<size_t>(ds.n_classes), 0);
  for (size_t i = 0; i < ds.items.size(); ++i) {
    const DatasetItem& it = ds.items[i];
    if (split_aware && it.split != SplitTag::Train) continue;
    population[static_cast<size_t>(it.image.label)]++;
    if (it.provenance == Provenance::Original)
      sources[static_cast<size_t>(it.image.label)].push_back(static_cast<int>(i));
  }

  std::vector<int> unreachable;
  for (int k = 0; k < ds.n_classes; ++k) {
    int need = target_per_class - population[static_cast<size_t>(k)];
    if (need <= 0) continue;
    if (need > static_cast<int>(sources[static_cast<size_t>(k)].size() * kAugOps.size()))
      unreachable.push_back(k);
  }
  if (!unreachable.empty()) {
    std::ostringstream os;
    os << "augment: target " << target_per_class
       << " exceeds the 6x ceiling for class(es):";
    for (int k : unreachable) os << " " << ds.class_names[static_cast<size_t>(k)];
    throw DataError(os.str());
  }

  for (int k = 0; k < ds.n_classes; ++k) {
    int need = target_per_class - population[static_cast<size_t>(k)];
    if (need <= 0) continue;
    std::vector<std::pair<int, int>> pairs;  // (source item, op index)
    for (int src : sources[static_cast<size_t>(k)])
      for (int op = 0; op < static_cast<int>(kAugOps.size()); ++op) pairs.push_back({src, op});
    Rng rng(stream_seed(seed, "augment", static_cast<uint64_t>(k)));
    rng.shuffle(pairs);
    for (int i = 0; i < need; ++i) {
      const auto& [src, op] = pairs[static_cast<size_t>(i)];
      DatasetItem item;
      item.image = apply_aug(ds.items[static_cast<size_t>(src)].image, kAugOps[op]);
      item.provenance = Provenance::Augmented;
      item.split = ds.items[static_cast<size_t>(src)].split;
      item.source_index = src;
      item.aug_op = kAugOps[op];
      out.items.push_back(std::move(item));
    }
  }
  return out;
}

Dataset split_train_test(const Dataset& ds, double test_fraction, uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw DataError("split: test_fraction must be in (0, 1)");
  std::vector<std::vector<int>> per_class(static_cast<size_t>(ds.n_classes));
  for (size_t i = 0; i < ds.items.size(); ++i)
    per_class[static_cast<size_t>(ds.items[i].image.label)].push_back(static_cast<int>(i));

  Dataset out = ds;
  for (int k = 0; k < ds.n_classes; ++k) {
    std::vector<int>& idx = per_class[static_cast<size_t>(k)];
    if (idx.size() < 2)
      throw DataError("split: class " + ds.class_names[static_cast<size_t>(k)] +
                      " has fewer than 2 items");
    Rng rng(stream_seed(seed, "split", static_cast<uint64_t>(k)));
    rng.shuffle(idx);
    int n_test = static_cast<int>(std::lround(test_fraction * static_cast<double>(idx.size())));
    n_test = std::clamp(n_test, 1, static_cast<int>(idx.size()) - 1);
    for (size_t i = 0; i < idx.size(); ++i)
      out.items[static_cast<size_t>(idx[i])].split =
          (static_cast<int>(i) < n_test) ? SplitTag::Test : SplitTag::Train;
  }
  return out;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
  if (ds.items.empty()) throw DataError("save_dataset: empty dataset");
  fs::create_directories(dir);

  int H = ds.items[0].image.height, W = ds.items[0].image.width, C = ds.items[0].image.channels;
  std::string blob;
  blob.append(kImagesMagic, 8);
  uint32_t header[5] = {1u, static_cast<uint32_t>(ds.items.size()), static_cast<uint32_t>(H),
                        static_cast<uint32_t>(W), static_cast<uint32_t>(C)};
  blob.append(reinterpret_cast<const char*>(header), sizeof(header));

  json items = json::array();
  for (const DatasetItem& it : ds.items) {
    if (it.image.height != H || it.image.width != W || it.image.channels != C)
      throw DataError("save_dataset: mixed image dimensions");
    const char* px = reinterpret_cast<const char*>(it.image.pixels.data());
    size_t len = it.image.pixels.size() * sizeof(float);
    blob.append(px, len);
    items.push_back(json{{"y", it.image.label},
                         {"z", it.image.portion},
                         {"provenance", it.provenance == Provenance::Original ? "original" : "augmented"},
                         {"split", split_name(it.split)},
                         {"source_index", it.source_index},
                         {"aug_op", it.aug_op},
                         {"checksum", hex64(fnv1a(px, len))}});
  }

  json manifest{{"format_version", 1},
                {"n_classes", ds.n_classes},
                {"class_names", ds.class_names},
                {"generator",
                 json{{"n_classes", ds.gen.n_classes},
                      {"per_class", ds.gen.per_class},
                      {"image_size", ds.gen.image_size},
                      {"imbalance", ds.gen.imbalance},
                      {"z_max", ds.gen.z_max},
                      {"seed", ds.gen.seed}}},
                {"images_file", "images.bin"},
                {"images_checksum", hex64(fnv1a(blob.data(), blob.size()))},
                {"items", items}};

  std::ofstream bout(fs::path(dir) / "images.bin", std::ios::binary | std::ios::trunc);
  bout.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!bout) throw DataError("save_dataset: failed writing images.bin");
  std::ofstream mout(fs::path(dir) / "manifest.json", std::ios::trunc);
  mout << manifest.dump(2) << "\n";
  if (!mout) throw DataError("save_dataset: failed writing manifest.json");
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream min(fs::path(dir) / "manifest.json");
  if (!min) throw DataError("load_dataset: missing manifest.json in '" + dir + "'");
  json manifest;
  try {
    min >> manifest;
  } catch (const json::exception& e) {
    throw DataError(std::string("load_dataset: invalid manifest: ") + e.what());
  }
  if (manifest.at("format_version").get<int>() != 1)
    throw DataError("load_dataset: unsupported manifest version");

  std::ifstream bin(fs::path(dir) / manifest.at("images_file").get<std::string>(),
                    std::ios::binary);
  if (!bin) throw DataError("load_dataset: missing images file");
  std::string blob((std::istreambuf_iterator<char>(bin)), {});
  if (hex64(fnv1a(blob.data(), blob.size())) != manifest.at("images_checksum").get<std::string>())
    throw DataError("load_dataset: images checksum mismatch");
  if (blob.size() < 28 || std::memcmp(blob.data(), kImagesMagic, 8) != 0)
    throw DataError("load_dataset: bad images magic");

  uint32_t header[5];
  std::memcpy(header, blob.data() + 8, sizeof(header));
  uint32_t count = header[1], H = header[2], W = header[3], C = header[4];
  size_t pixel_bytes = static_cast<size_t>(H) * W * C * sizeof(float);
  if (blob.size() != 28 + static_cast<size_t>(count) * pixel_bytes)
    throw DataError("load_dataset: images file length mismatch");

  const json& items = manifest.at("items");
  if (items.size() != count)
    throw DataError("load_dataset: manifest lists " + std::to_string(items.size()) +
                    " items, images file holds " + std::to_string(count));

  Dataset ds;
  ds.n_classes = manifest.at("n_classes").get<int>();
  ds.class_names = manifest.at("class_names").get<std::vector<std::string>>();
  const json& gen = manifest.at("generator");
  ds.gen.n_classes = gen.at("n_classes").get<int>();
  ds.gen.per_class = gen.at("per_class").get<int>();
  ds.gen.image_size = gen.at("image_size").get<int>();
  ds.gen.imbalance = gen.at("imbalance").get<double>();
  ds.gen.z_max = gen.at("z_max").get<double>();
  ds.gen.seed = gen.at("seed").get<uint64_t>();

  for (size_t i = 0; i < count; ++i) {
    const json& rec = items[i];
    DatasetItem item;
    item.image.height = static_cast<int>(H);
    item.image.width = static_cast<int>(W);
    item.image.channels = static_cast<int>(C);
    item.image.pixels.resize(static_cast<size_t>(H) * W * C);
    std::memcpy(item.image.pixels.data(), blob.data() + 28 + i * pixel_bytes, pixel_bytes);
    if (hex64(fnv1a(item.image.pixels.data(), pixel_bytes)) !=
        rec.at("checksum").get<std::string>())
      throw DataError("load_dataset: checksum mismatch for item " + std::to_string(i));
    item.image.label = rec.at("y").get<int>();
    item.image.portion = rec.at("z").get<double>();
    if (item.image.label < 0 || item.image.label >= ds.n_classes)
      throw DataError("load_dataset: item " + std::to_string(i) + " label out of range");
    item.provenance = rec.at("provenance").get<std::string>() == "original"
                          ? Provenance::Original
                          : Provenance::Augmented;
    item.split = split_from_name(rec.at("split").get<std::string>());
    item.source_index = rec.at("source_index").get<int>();
    item.aug_op = rec.at("aug_op").get<std::string>();
    ds.items.push_back(std::move(item));
  }
  return ds;
}

}  // namespace mtask
