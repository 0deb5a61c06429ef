// Dataset plumbing: manifest (id -> file, split), PNG-folder ingestion with
// x4 degradation, a deterministic patch dataset with dihedral augmentation,
// and the 10-image synthetic fixture used by the desk-scale experiments.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "odesr/errors.hpp"
#include "odesr/image.hpp"
#include "odesr/png_io.hpp"
#include "odesr/rng.hpp"
#include "odesr/tensor.hpp"

namespace odesr {

struct ManifestEntry {
  std::string id;
  std::string path;
  std::string split;  // "train" | "val"
};

struct DatasetManifest {
  std::vector<ManifestEntry> images;
};

inline nlohmann::ordered_json manifest_to_json(const DatasetManifest& m) {
  nlohmann::ordered_json images = nlohmann::ordered_json::array();
  for (const ManifestEntry& e : m.images) {
    images.push_back({{"id", e.id}, {"path", e.path}, {"split", e.split}});
  }
  return {{"images", images}};
}

inline DatasetManifest manifest_from_json(const nlohmann::ordered_json& j) {
  DatasetManifest m;
  try {
    for (const auto& e : j.at("images")) {
      ManifestEntry entry;
      entry.id = e.at("id").get<std::string>();
      entry.path = e.at("path").get<std::string>();
      entry.split = e.at("split").get<std::string>();
      if (entry.split != "train" && entry.split != "val") {
        throw config_error("manifest split must be train or val, got '" +
                           entry.split + "'");
      }
      m.images.push_back(std::move(entry));
    }
  } catch (const nlohmann::ordered_json::exception& ex) {
    throw config_error(std::string("malformed dataset manifest: ") + ex.what());
  }
  return m;
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open manifest: " + path);
  nlohmann::ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::ordered_json::exception& ex) {
    throw config_error("manifest is not valid JSON: " + path + ": " +
                       ex.what());
  }
  return manifest_from_json(j);
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write manifest: " + path);
  out << manifest_to_json(m).dump(2) << "\n";
}

// Scans a folder of PNGs and assigns the fixed 90/10 split by sorted
// filename (every 10th file validates) — seed-independent by design.
inline DatasetManifest build_manifest(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") {
      files.push_back(entry.path());
    }
  }
  if (ec) throw io_error("cannot list dataset directory: " + dir);
  if (files.empty()) throw config_error("no PNG files in " + dir);
  std::sort(files.begin(), files.end());
  DatasetManifest m;
  for (std::size_t i = 0; i < files.size(); ++i) {
    m.images.push_back({files[i].stem().string(), files[i].string(),
                        i % 10 == 9 ? "val" : "train"});
  }
  return m;
}

// Loads every manifest image of the given split ("train", "val", or "all")
// as an HR/LR pair, cropping HR to a multiple of the scale.
template <typename Real>
std::vector<ImagePair<Real>> load_pairs(const DatasetManifest& m,
                                        const std::string& split,
                                        int factor = 4) {
  std::vector<ImagePair<Real>> out;
  for (const ManifestEntry& e : m.images) {
    if (split != "all" && e.split != split) continue;
    out.push_back(make_image_pair(load_png<Real>(e.path), e.id, factor));
  }
  return out;
}

// Dihedral-group element k in [0,8): rotate 90 degrees clockwise (k & 3)
// times, then mirror horizontally if k & 4. The augmentation alphabet.
template <typename Real>
Tensor<Real> dihedral(const Tensor<Real>& t, int k) {
  if (k < 0 || k > 7) throw config_error("dihedral index must be in [0,8)");
  Tensor<Real> cur = t;
  for (int r = 0; r < (k & 3); ++r) {
    Tensor<Real> rot(cur.batch(), cur.channels(), cur.width(), cur.height());
    for (int n = 0; n < cur.batch(); ++n) {
      for (int c = 0; c < cur.channels(); ++c) {
        for (int y = 0; y < rot.height(); ++y) {
          for (int x = 0; x < rot.width(); ++x) {
            rot.at(n, c, y, x) = cur.at(n, c, cur.height() - 1 - x, y);
          }
        }
      }
    }
    cur = std::move(rot);
  }
  if (k & 4) {
    Tensor<Real> flip(cur.shape());
    for (int n = 0; n < cur.batch(); ++n) {
      for (int c = 0; c < cur.channels(); ++c) {
        for (int y = 0; y < cur.height(); ++y) {
          for (int x = 0; x < cur.width(); ++x) {
            flip.at(n, c, y, x) = cur.at(n, c, y, cur.width() - 1 - x);
          }
        }
      }
    }
    cur = std::move(flip);
  }
  return cur;
}

// Precomputed aligned patch grid over a set of pairs, with a deterministic
// per-epoch visit order and per-item augmentation draw. Same seed, same
// epoch -> same batches, bit for bit.
template <typename Real>
class PatchDataset {
 public:
  PatchDataset(const std::vector<ImagePair<Real>>& pairs, int hr_patch,
               int stride, std::uint64_t seed, bool augment = true)
      : seed_(seed), augment_(augment) {
    for (const ImagePair<Real>& p : pairs) {
      auto ps = extract_patches(p, hr_patch, stride);
      patches_.insert(patches_.end(), std::make_move_iterator(ps.begin()),
                      std::make_move_iterator(ps.end()));
    }
    if (patches_.empty()) {
      throw config_error("dataset produced no patches (images smaller than "
                         "the patch size?)");
    }
  }

  std::size_t size() const { return patches_.size(); }
  const ImagePair<Real>& patch(std::size_t i) const { return patches_[i]; }

  struct EpochPlan {
    std::vector<std::size_t> order;
    std::vector<int> aug;  // dihedral code per position in `order`
  };

  EpochPlan plan_epoch(int epoch) const {
    EpochPlan plan;
    plan.order.resize(patches_.size());
    for (std::size_t i = 0; i < plan.order.size(); ++i) plan.order[i] = i;
    Rng rng(seed_ ^ (0x9E3779B97F4A7C15ull * std::uint64_t(epoch + 1)));
    rng.shuffle(plan.order);
    plan.aug.resize(patches_.size(), 0);
    if (augment_) {
      for (int& a : plan.aug) a = int(rng.below(8));
    }
    return plan;
  }

  struct Batch {
    Tensor<Real> lr, hr;
  };

  // Stacks `count` consecutive plan positions starting at `first`.
  Batch make_batch(const EpochPlan& plan, std::size_t first,
                   std::size_t count) const {
    if (count < 1 || first + count > plan.order.size()) {
      throw config_error("batch window out of range");
    }
    const ImagePair<Real>& ref = patches_[plan.order[first]];
    Batch b{Tensor<Real>(int(count), 3, ref.lr.height(), ref.lr.width()),
            Tensor<Real>(int(count), 3, ref.hr.height(), ref.hr.width())};
    for (std::size_t i = 0; i < count; ++i) {
      const ImagePair<Real>& p = patches_[plan.order[first + i]];
      const int k = plan.aug[first + i];
      Tensor<Real> lr = dihedral(p.lr, k);
      Tensor<Real> hr = dihedral(p.hr, k);
      if (lr.height() != b.lr.height() || hr.height() != b.hr.height()) {
        throw config_error("mixed patch sizes in one batch");
      }
      std::copy(lr.data(), lr.data() + lr.size(),
                b.lr.data() + i * lr.size());
      std::copy(hr.data(), hr.data() + hr.size(),
                b.hr.data() + i * hr.size());
    }
    return b;
  }

 private:
  std::vector<ImagePair<Real>> patches_;
  std::uint64_t seed_;
  bool augment_;
};

// Writes the 10-image synthetic fixture: square-wave stripes at several
// angles and periods, hard-edged checkerboards and rings, rectangles, plus a
// couple of smooth blob/sine panels for diversity. Edge-heavy on purpose —
// step edges are where plain interpolation loses the most at x4, so a
// learned upscaler has genuine signal to recover. Periods stay >= 12 HR
// pixels (3 LR pixels) so the structure survives the box downsample.
// Deterministic closed forms, no RNG.
inline std::vector<std::string> make_synthetic_fixture(const std::string& dir,
                                                       int hr_size = 64,
                                                       int count = 10) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const double pi = 3.14159265358979323846;
  std::vector<std::string> paths;
  for (int i = 0; i < count; ++i) {
    Tensor<double> img(1, 3, hr_size, hr_size);
    for (int c = 0; c < 3; ++c) {
      const double phase = 0.7 * c;
      for (int y = 0; y < hr_size; ++y) {
        for (int x = 0; x < hr_size; ++x) {
          const double cy = y - hr_size / 2.0, cx = x - hr_size / 2.0;
          const auto sq = [](double s) { return s >= 0.0 ? 1.0 : -1.0; };
          double v = 0.5;
          switch (i % 10) {
            case 0: v = 0.5 + 0.38 * sq(std::sin(2 * pi * y / 16.0 + phase)); break;
            case 1: v = 0.5 + 0.38 * sq(std::sin(2 * pi * x / 12.0 + phase)); break;
            case 2: v = 0.5 + 0.36 * sq(std::sin(2 * pi * (x + y) / 20.0 + phase)); break;
            case 3: v = 0.5 + 0.36 * sq(std::sin(2 * pi * x / 16.0 + phase)) *
                              sq(std::sin(2 * pi * y / 16.0)); break;
            case 4: v = 0.5 + 0.36 * sq(std::sin(2 * pi * std::hypot(cx, cy) / 18.0 + phase)); break;
            case 5: {
              // Axis-aligned bright rectangles on a dark ground; per-channel
              // brightness shifts, shared geometry (like a real photo).
              const bool in_a = x >= 8 && x < 28 && y >= 12 && y < 44;
              const bool in_b = x >= 36 && x < 56 && y >= 6 && y < 24;
              const bool in_c = x >= 34 && x < 58 && y >= 34 && y < 54;
              v = 0.14 + 0.03 * c;
              if (in_a) v = 0.82 - 0.05 * c;
              if (in_b) v = 0.62 + 0.06 * c;
              if (in_c) v = 0.42 + 0.08 * c;
              break;
            }
            case 6: v = 0.15 + 0.7 * std::exp(-(std::pow(cx - 8, 2) + std::pow(cy + 6, 2)) / 180.0) +
                        0.45 * std::exp(-(std::pow(cx + 12, 2) + std::pow(cy - 10, 2)) / 120.0) +
                        0.1 * std::sin(phase + 2 * pi * x / 40.0); break;
            case 7: v = 0.5 + 0.36 * sq(std::sin(2 * pi * (0.866 * x + 0.5 * y) / 15.0 + phase)); break;
            case 8: v = 0.5 + 0.22 * sq(std::sin(2 * pi * x / 12.0 + phase)) +
                        0.18 * std::sin(2 * pi * y / 18.0); break;
            default:
              // Held-out composite: square stripes on the left, smooth rings
              // on the right, hard boundary between the halves.
              if (x < hr_size / 2) {
                v = 0.5 + 0.36 * sq(std::sin(2 * pi * (y + 0.3 * x) / 14.0 + phase));
              } else {
                v = 0.5 + 0.34 * std::sin(2 * pi * std::hypot(cx, cy) / 22.0 + phase);
              }
              break;
          }
          img.at(0, c, y, x) = std::clamp(v, 0.02, 0.98);
        }
      }
    }
    char name[32];
    std::snprintf(name, sizeof(name), "fix%02d.png", i);
    const std::string path = (fs::path(dir) / name).string();
    save_png(img, path);
    paths.push_back(path);
  }
  return paths;
}

}  // namespace odesr
