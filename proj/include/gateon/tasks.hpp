#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gateon/matrix.hpp"
#include "gateon/rng.hpp"

namespace gateon {

/// Images as rows of a matrix (pixels in [0,1]), one class index per row.
struct Dataset {
  Matrix images;            // n x (height*width)
  std::vector<int> labels;  // n
  std::size_t height = 28, width = 28;
  std::string split;  // "train" or "test"

  std::size_t size() const { return labels.size(); }
};

class idx_error : public std::runtime_error {
 public:
  enum class Kind { BadMagic, Truncated, CountMismatch, InvalidLabel };

  idx_error(Kind kind, const std::string& msg) : std::runtime_error("idx: " + msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

namespace detail {

inline std::uint32_t read_be32(std::FILE* f, const char* what) {
  unsigned char b[4];
  if (std::fread(b, 1, 4, f) != 4) throw idx_error(idx_error::Kind::Truncated, std::string("truncated ") + what);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

inline std::unique_ptr<std::FILE, FileCloser> open_file(const std::string& path) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "rb"));
  if (!f) throw idx_error(idx_error::Kind::Truncated, "cannot open " + path);
  return f;
}

}  // namespace detail

/// Parses a big-endian IDX image/label file pair (the published MNIST
/// container) and normalizes pixels to [0,1]. The image and label counts
/// are cross-checked.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        std::string split = "", int num_classes = 10) {
  auto fi = detail::open_file(images_path);
  if (detail::read_be32(fi.get(), "image magic") != 0x00000803u)
    throw idx_error(idx_error::Kind::BadMagic, "bad image magic in " + images_path);
  const std::uint32_t n = detail::read_be32(fi.get(), "image count");
  const std::uint32_t rows = detail::read_be32(fi.get(), "image rows");
  const std::uint32_t cols = detail::read_be32(fi.get(), "image cols");

  auto fl = detail::open_file(labels_path);
  if (detail::read_be32(fl.get(), "label magic") != 0x00000801u)
    throw idx_error(idx_error::Kind::BadMagic, "bad label magic in " + labels_path);
  const std::uint32_t nl = detail::read_be32(fl.get(), "label count");
  if (n != nl)
    throw idx_error(idx_error::Kind::CountMismatch,
                    "image count " + std::to_string(n) + " != label count " + std::to_string(nl));

  Dataset ds;
  ds.height = rows;
  ds.width = cols;
  ds.split = std::move(split);
  ds.images = Matrix(n, static_cast<std::size_t>(rows) * cols);
  ds.labels.resize(n);

  std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
  for (std::uint32_t i = 0; i < n; ++i) {
    if (std::fread(buf.data(), 1, buf.size(), fi.get()) != buf.size())
      throw idx_error(idx_error::Kind::Truncated, "truncated image payload in " + images_path);
    real* row = ds.images.row(i);
    for (std::size_t p = 0; p < buf.size(); ++p) row[p] = static_cast<real>(buf[p]) / real(255);
  }
  std::vector<unsigned char> lab(n);
  if (std::fread(lab.data(), 1, n, fl.get()) != n)
    throw idx_error(idx_error::Kind::Truncated, "truncated label payload in " + labels_path);
  for (std::uint32_t i = 0; i < n; ++i) {
    if (lab[i] >= num_classes)
      throw idx_error(idx_error::Kind::InvalidLabel,
                      "label " + std::to_string(int(lab[i])) + " out of range in " + labels_path);
    ds.labels[i] = lab[i];
  }
  return ds;
}

/// Loads the standard MNIST file pair for a split from a directory.
inline Dataset load_mnist(const std::string& dir, const std::string& split) {
  check(split == "train" || split == "test", "load_mnist: split must be train or test");
  const std::string prefix = split == "train" ? "/train" : "/t10k";
  return load_idx(dir + prefix + "-images-idx3-ubyte", dir + prefix + "-labels-idx1-ubyte", split);
}

// ---------------------------------------------------------------------------

enum class TaskFamily { Permuted, Rotated, Shuffled, Split };

inline const char* family_name(TaskFamily f) {
  switch (f) {
    case TaskFamily::Permuted: return "permuted";
    case TaskFamily::Rotated: return "rotated";
    case TaskFamily::Shuffled: return "shuffled";
    case TaskFamily::Split: return "split";
  }
  return "?";
}

inline TaskFamily family_from_name(const std::string& s) {
  if (s == "permuted") return TaskFamily::Permuted;
  if (s == "rotated") return TaskFamily::Rotated;
  if (s == "shuffled") return TaskFamily::Shuffled;
  if (s == "split") return TaskFamily::Split;
  throw contract_error("unknown task family: " + s);
}

/// Rotates one image counterclockwise about its center, bilinear sampling,
/// zero fill outside the frame.
inline void rotate_image(const real* src, real* dst, std::size_t height, std::size_t width,
                         double angle_degrees) {
  const double theta = angle_degrees * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  const double cx = (static_cast<double>(width) - 1.0) / 2.0;
  const double cy = (static_cast<double>(height) - 1.0) / 2.0;
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t col = 0; col < width; ++col) {
      // Cartesian coordinates, y up; the source point is the destination
      // rotated backwards.
      const double u = static_cast<double>(col) - cx;
      const double v = cy - static_cast<double>(r);
      const double su = u * c + v * s;
      const double sv = -u * s + v * c;
      const double src_c = su + cx;
      const double src_r = cy - sv;
      const double fc = std::floor(src_c), fr = std::floor(src_r);
      const double wc = src_c - fc, wr = src_r - fr;
      real acc = 0;
      for (int dr = 0; dr <= 1; ++dr) {
        for (int dc = 0; dc <= 1; ++dc) {
          const double rr = fr + dr, cc = fc + dc;
          if (rr < 0 || cc < 0 || rr >= static_cast<double>(height) || cc >= static_cast<double>(width))
            continue;
          const double weight = (dr ? wr : 1.0 - wr) * (dc ? wc : 1.0 - wc);
          acc += static_cast<real>(weight) *
                 src[static_cast<std::size_t>(rr) * width + static_cast<std::size_t>(cc)];
        }
      }
      dst[r * width + col] = acc;
    }
  }
}

/// One task of a continual-learning stream: a pure, seeded input/output
/// transform over the source dataset.
struct TaskDef {
  std::size_t index = 0;
  TaskFamily family = TaskFamily::Permuted;
  std::vector<std::size_t> pixel_perm;  // permuted
  double angle_degrees = 0.0;           // rotated
  std::vector<int> label_perm;          // shuffled
  int digit_a = 0, digit_b = 1;         // split
  std::uint64_t seed = 0;

  /// Row indices of the source dataset this task trains/tests on.
  std::vector<std::size_t> sample_indices(const Dataset& ds) const {
    std::vector<std::size_t> idx;
    if (family == TaskFamily::Split) {
      for (std::size_t i = 0; i < ds.size(); ++i)
        if (ds.labels[i] == digit_a || ds.labels[i] == digit_b) idx.push_back(i);
    } else {
      idx.resize(ds.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    }
    return idx;
  }

  /// Materializes the transformed batch for the given source rows.
  void transform(const Dataset& ds, const std::vector<std::size_t>& rows, Matrix& images,
                 std::vector<int>& labels) const {
    images = Matrix(rows.size(), ds.images.cols);
    labels.resize(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const real* src = ds.images.row(rows[r]);
      real* dst = images.row(r);
      const int label = ds.labels[rows[r]];
      switch (family) {
        case TaskFamily::Permuted:
          if (pixel_perm.empty()) {
            std::copy(src, src + ds.images.cols, dst);
          } else {
            for (std::size_t p = 0; p < pixel_perm.size(); ++p) dst[p] = src[pixel_perm[p]];
          }
          labels[r] = label;
          break;
        case TaskFamily::Rotated:
          if (angle_degrees == 0.0)
            std::copy(src, src + ds.images.cols, dst);
          else
            rotate_image(src, dst, ds.height, ds.width, angle_degrees);
          labels[r] = label;
          break;
        case TaskFamily::Shuffled:
          std::copy(src, src + ds.images.cols, dst);
          labels[r] = label_perm.empty() ? label : label_perm[label];
          break;
        case TaskFamily::Split:
          std::copy(src, src + ds.images.cols, dst);
          labels[r] = label == digit_b ? 1 : 0;
          break;
      }
    }
  }

  /// Whole-split materialization (used for test evaluation).
  std::pair<Matrix, std::vector<int>> apply(const Dataset& ds) const {
    Matrix images;
    std::vector<int> labels;
    transform(ds, sample_indices(ds), images, labels);
    return {std::move(images), std::move(labels)};
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["index"] = index;
    j["family"] = family_name(family);
    j["seed"] = seed;
    switch (family) {
      case TaskFamily::Permuted: j["pixel_perm"] = pixel_perm; break;
      case TaskFamily::Rotated: j["angle_degrees"] = angle_degrees; break;
      case TaskFamily::Shuffled: j["label_perm"] = label_perm; break;
      case TaskFamily::Split: j["digits"] = {digit_a, digit_b}; break;
    }
    return j;
  }

  static TaskDef from_json(const nlohmann::json& j) {
    TaskDef t;
    t.index = j.at("index").get<std::size_t>();
    t.family = family_from_name(j.at("family").get<std::string>());
    t.seed = j.value("seed", std::uint64_t(0));
    switch (t.family) {
      case TaskFamily::Permuted: t.pixel_perm = j.value("pixel_perm", std::vector<std::size_t>{}); break;
      case TaskFamily::Rotated: t.angle_degrees = j.value("angle_degrees", 0.0); break;
      case TaskFamily::Shuffled: t.label_perm = j.value("label_perm", std::vector<int>{}); break;
      case TaskFamily::Split: {
        auto d = j.at("digits");
        t.digit_a = d.at(0).get<int>();
        t.digit_b = d.at(1).get<int>();
        break;
      }
    }
    return t;
  }
};

/// Task 0 is the identity; task k >= 1 draws a fresh pixel permutation from
/// Rng(seed, k).
inline TaskDef make_permuted(std::size_t k, std::uint64_t seed, std::size_t pixels = 784) {
  TaskDef t;
  t.index = k;
  t.family = TaskFamily::Permuted;
  t.seed = seed;
  if (k >= 1) {
    Rng rng(seed, k);
    t.pixel_perm = rng.permutation(pixels);
  }
  return t;
}

/// Task 0 is the identity; task k >= 1 draws an angle uniformly in [0,360).
inline TaskDef make_rotated(std::size_t k, std::uint64_t seed) {
  TaskDef t;
  t.index = k;
  t.family = TaskFamily::Rotated;
  t.seed = seed;
  if (k >= 1) {
    Rng rng(seed, k);
    t.angle_degrees = rng.uniform(0.0, 360.0);
  }
  return t;
}

/// Fixed-angle variant (detector angle sweeps).
inline TaskDef make_rotated_angle(std::size_t k, double angle_degrees) {
  TaskDef t;
  t.index = k;
  t.family = TaskFamily::Rotated;
  t.angle_degrees = angle_degrees;
  return t;
}

/// Task 0 is the identity; task k >= 1 draws a label permutation.
inline TaskDef make_shuffled(std::size_t k, std::uint64_t seed, std::size_t classes = 10) {
  TaskDef t;
  t.index = k;
  t.family = TaskFamily::Shuffled;
  t.seed = seed;
  if (k >= 1) {
    Rng rng(seed, k);
    const auto p = rng.permutation(classes);
    t.label_perm.assign(p.begin(), p.end());
  }
  return t;
}

/// Binary tasks over disjoint digit pairs; each task relabels its pair {0,1}.
inline std::vector<TaskDef> make_split(const std::vector<std::pair<int, int>>& pairs) {
  std::vector<bool> used(10, false);
  std::vector<TaskDef> tasks;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto [a, b] = pairs[k];
    check(a >= 0 && a < 10 && b >= 0 && b < 10 && a != b, "make_split: digits must be distinct in 0..9");
    check(!used[a] && !used[b], "make_split: digit pairs must be disjoint");
    used[a] = used[b] = true;
    TaskDef t;
    t.index = k;
    t.family = TaskFamily::Split;
    t.digit_a = a;
    t.digit_b = b;
    tasks.push_back(std::move(t));
  }
  return tasks;
}

/// Seeded stream of shuffled-epoch minibatches with lazy transforms. Batches
/// within one epoch partition the task's samples; the final batch of an
/// epoch may be short.
class MinibatchStream {
 public:
  MinibatchStream(const TaskDef& task, const Dataset& dataset, std::size_t batch, std::size_t steps,
                  std::uint64_t seed)
      : task_(task), dataset_(dataset), batch_(batch), steps_(steps), rng_(seed, 0x6d62ULL) {
    indices_ = task.sample_indices(dataset);
    check(batch >= 1 && batch <= indices_.size(), "minibatch_stream: batch must be in [1, dataset size]");
  }

  /// Yields the next transformed batch; false once `steps` batches were produced.
  bool next(Matrix& images, std::vector<int>& labels) {
    if (produced_ >= steps_) return false;
    if (cursor_ >= indices_.size()) cursor_ = 0;
    if (cursor_ == 0) rng_.shuffle(indices_);
    const std::size_t take = std::min(batch_, indices_.size() - cursor_);
    std::vector<std::size_t> rows(indices_.begin() + cursor_, indices_.begin() + cursor_ + take);
    cursor_ += take;
    task_.transform(dataset_, rows, images, labels);
    ++produced_;
    return true;
  }

  std::size_t produced() const { return produced_; }

 private:
  TaskDef task_;
  const Dataset& dataset_;
  std::size_t batch_, steps_;
  Rng rng_;
  std::vector<std::size_t> indices_;
  std::size_t cursor_ = 0;
  std::size_t produced_ = 0;
};

}  // namespace gateon
