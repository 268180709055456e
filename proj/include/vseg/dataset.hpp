#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vseg/error.hpp"
#include "vseg/image.hpp"
#include "vseg/pgm.hpp"
#include "vseg/phantom.hpp"
#include "vseg/seed.hpp"

namespace vseg {

enum class Split { labeled, unlabeled, validation, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::labeled: return "labeled";
    case Split::unlabeled: return "unlabeled";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "labeled") return Split::labeled;
  if (s == "unlabeled") return Split::unlabeled;
  if (s == "validation") return Split::validation;
  if (s == "test") return Split::test;
  throw FormatError("unknown split tag '" + s + "'");
}

/// One image of the dataset. `mask` is the training label; unlabeled entries keep
/// any ground truth in `eval_mask`, which only evaluation reads.
struct DatasetEntry {
  std::string subject;
  std::string name;  // file stem, e.g. img_03
  Image image;
  std::optional<Mask> mask;
  std::optional<Mask> eval_mask;
  Split split = Split::labeled;

  std::string id() const { return subject + "/" + name; }
  const Mask* ground_truth() const { return mask ? &*mask : (eval_mask ? &*eval_mask : nullptr); }
};

using Dataset = std::vector<DatasetEntry>;

inline std::vector<std::string> subjects_of(const Dataset& d) {
  std::set<std::string> s;
  for (const auto& e : d) s.insert(e.subject);
  return {s.begin(), s.end()};
}

namespace detail {

inline std::string trim(std::string s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
  return s.substr(i);
}

inline void check_entry(const DatasetEntry& e, const fs::path& where) {
  for (float v : e.image.data)
    if (v < 0 || v > 255) throw FormatError(where.string() + ": image values outside [0, 255]");
  for (const Mask* m : {e.mask ? &*e.mask : nullptr, e.eval_mask ? &*e.eval_mask : nullptr})
    if (m && !m->same_size(Mask(e.image.width, e.image.height)))
      throw FormatError(where.string() + ": mask size differs from image size");
}

}  // namespace detail

/// Reads root/subject_*/img_*.pgm with optional img_*_mask.pgm. An optional
/// root/splits.csv (subject,image,split) assigns split tags; without it, images
/// with masks are labeled and the rest unlabeled.
inline Dataset load_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw Error("dataset directory not found: " + root.string());
  std::map<std::pair<std::string, std::string>, Split> tags;
  const fs::path split_file = root / "splits.csv";
  if (fs::exists(split_file)) {
    std::istringstream in(read_file(split_file));
    std::string line;
    std::size_t row = 0;
    while (std::getline(in, line)) {
      line = detail::trim(line);
      if (line.empty() || row++ == 0) continue;
      std::istringstream ls(line);
      std::string subject, image, split;
      if (!std::getline(ls, subject, ',') || !std::getline(ls, image, ',') || !std::getline(ls, split))
        throw FormatError(split_file.string() + ": malformed row '" + line + "'");
      tags[{detail::trim(subject), detail::trim(image)}] = parse_split(detail::trim(split));
    }
  }
  std::vector<fs::path> dirs;
  for (const auto& d : fs::directory_iterator(root))
    if (d.is_directory()) dirs.push_back(d.path());
  std::sort(dirs.begin(), dirs.end());
  Dataset out;
  for (const auto& dir : dirs) {
    std::vector<fs::path> files;
    for (const auto& f : fs::directory_iterator(dir)) {
      const std::string stem = f.path().stem().string();
      if (f.path().extension() == ".pgm" && !stem.ends_with("_mask")) files.push_back(f.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      DatasetEntry e;
      e.subject = dir.filename().string();
      e.name = f.stem().string();
      e.image = read_image(f);
      const fs::path mask_path = dir / (e.name + "_mask.pgm");
      const bool has_mask = fs::exists(mask_path);
      const auto tag = tags.find({e.subject, e.name});
      e.split = tag != tags.end() ? tag->second : (has_mask ? Split::labeled : Split::unlabeled);
      if (e.split == Split::unlabeled) {
        if (has_mask) e.eval_mask = read_mask(mask_path);
      } else {
        if (!has_mask) throw FormatError("missing mask file " + mask_path.string() + " for " + to_string(e.split) + " image");
        e.mask = read_mask(mask_path);
      }
      detail::check_entry(e, f);
      out.push_back(std::move(e));
    }
  }
  if (out.empty()) throw Error("dataset directory contains no images: " + root.string());
  return out;
}

inline void write_dataset(const fs::path& root, const Dataset& d) {
  std::string splits = "subject,image,split\n";
  for (const auto& e : d) {
    const fs::path dir = root / e.subject;
    write_image(dir / (e.name + ".pgm"), e.image);
    if (const Mask* m = e.ground_truth()) write_mask(dir / (e.name + "_mask.pgm"), *m);
    splits += e.subject + "," + e.name + "," + to_string(e.split) + "\n";
  }
  write_file_atomic(root / "splits.csv", splits);
}

struct PhantomDatasetConfig {
  std::size_t subjects = 10;
  std::size_t images_per_subject = 30;
  std::size_t labeled_per_subject = 6;
  std::size_t image_size = 70;
  std::uint64_t seed = 1;

  void validate() const {
    if (subjects == 0 || images_per_subject == 0) throw ConfigError("phantom dataset: counts must be positive");
    if (labeled_per_subject > images_per_subject)
      throw ConfigError("phantom dataset: more labeled images than images per subject");
  }
};

inline std::string subject_name(std::size_t i) {
  std::ostringstream os;
  os << "subject_" << (i < 10 ? "0" : "") << i;
  return os.str();
}

inline std::string image_name(std::size_t i) {
  std::ostringstream os;
  os << "img_" << (i < 10 ? "0" : "") << i;
  return os.str();
}

/// Synthetic dataset. Every image keeps its ground truth; the first
/// labeled_per_subject images of each subject are labeled, the rest unlabeled.
inline Dataset generate_phantom_dataset(const PhantomDatasetConfig& cfg) {
  cfg.validate();
  Dataset d;
  for (std::size_t s = 0; s < cfg.subjects; ++s) {
    const std::uint64_t subject_seed = derive_seed(cfg.seed, {seed_tag::phantom, s});
    const SubjectAnatomy anatomy = sample_subject(subject_seed, cfg.image_size);
    std::mt19937_64 rng(derive_seed(subject_seed, {0}));
    for (std::size_t i = 0; i < cfg.images_per_subject; ++i) {
      const PhantomParams p = sample_image_params(anatomy, rng, cfg.image_size);
      Phantom ph = generate_phantom(derive_seed(subject_seed, {1, i}), p, subject_name(s));
      DatasetEntry e;
      e.subject = subject_name(s);
      e.name = image_name(i);
      e.image = std::move(ph.image);
      if (i < cfg.labeled_per_subject) {
        e.split = Split::labeled;
        e.mask = std::move(ph.mask);
      } else {
        e.split = Split::unlabeled;
        e.eval_mask = std::move(ph.mask);
      }
      d.push_back(std::move(e));
    }
  }
  return d;
}

}  // namespace vseg
