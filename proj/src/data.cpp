#include "scmil/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace scmil {

namespace {

using nlohmann::json;

constexpr char kBinMagic[8] = {'S', 'C', 'M', 'I', 'L', 'B', 'I', 'N'};
constexpr uint32_t kBinVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "dataset binary format assumes a little-endian host");

void write_u32(std::ofstream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::ifstream& in) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

}  // namespace

void DatasetSpec::validate() const {
  if (k < 2) throw std::invalid_argument("dataset spec: need at least 2 classes");
  if (slides_per_class.size() != k) {
    throw std::invalid_argument("dataset spec: slides_per_class must have k entries");
  }
  if (instances_per_slide == 0 || d_in == 0) {
    throw std::invalid_argument("dataset spec: zero-sized slides or features");
  }
  if (!(witness_rate > 0.0 && witness_rate <= 1.0)) {
    throw std::invalid_argument("dataset spec: witness rate must lie in (0, 1]");
  }
  if (witness_rate * static_cast<double>(instances_per_slide) < 1.0) {
    throw std::invalid_argument("dataset spec: w * n_s must be >= 1");
  }
  if (!(sigma > 0.0) || !(sigma_bg > 0.0)) {
    throw std::invalid_argument("dataset spec: sigma values must be positive");
  }
  if (means.empty() && k > d_in) {
    throw std::invalid_argument("dataset spec: default means need k <= d_in");
  }
  auto mu = resolve_means();
  for (size_t a = 0; a < mu.size(); ++a) {
    if (mu[a].size() != d_in) {
      throw std::invalid_argument("dataset spec: mean " + std::to_string(a) +
                                  " has wrong width");
    }
    for (size_t b = a + 1; b < mu.size(); ++b) {
      double d2 = 0.0;
      for (size_t i = 0; i < d_in; ++i) {
        double d = mu[a][i] - mu[b][i];
        d2 += d * d;
      }
      if (d2 == 0.0) {
        throw std::invalid_argument("dataset spec: class means must be mutually distinct");
      }
    }
  }
}

std::vector<std::vector<double>> DatasetSpec::resolve_means() const {
  if (!means.empty()) {
    if (means.size() != k) {
      throw std::invalid_argument("dataset spec: expected k explicit means");
    }
    return means;
  }
  // mu_j = a * e_j gives pairwise distance a * sqrt(2).
  double a = mean_separation * sigma / std::sqrt(2.0);
  std::vector<std::vector<double>> mu(k, std::vector<double>(d_in, 0.0));
  for (size_t j = 0; j < k; ++j) mu[j][j] = a;
  return mu;
}

void ShiftSpec::validate() const {
  if (scale.size() != offset.size()) {
    throw std::invalid_argument("shift spec: scale and offset widths differ");
  }
  for (double s : scale) {
    if (!(s > 0.0)) throw std::invalid_argument("shift spec: scale must be strictly positive");
  }
  if (noise < 0.0) throw std::invalid_argument("shift spec: noise must be >= 0");
}

std::vector<Slide> generate_slides(const DatasetSpec& spec) {
  spec.validate();
  auto mu = spec.resolve_means();
  std::vector<double> bg = spec.background_mean;
  if (bg.empty()) bg.assign(spec.d_in, 0.0);
  if (bg.size() != spec.d_in) {
    throw std::invalid_argument("dataset spec: background mean has wrong width");
  }

  size_t n_sig = static_cast<size_t>(
      std::ceil(spec.witness_rate * static_cast<double>(spec.instances_per_slide)));
  n_sig = std::min(n_sig, spec.instances_per_slide);

  Rng rng(spec.seed);
  std::vector<Slide> slides;
  int64_t next_id = 0;
  for (size_t j = 0; j < spec.k; ++j) {
    for (size_t s = 0; s < spec.slides_per_class[j]; ++s) {
      Slide slide;
      slide.label = static_cast<int>(j);
      slide.slide_id = next_id++;
      slide.domain = Domain::ID;
      slide.instances = Tensor({spec.instances_per_slide, spec.d_in});
      for (size_t i = 0; i < spec.instances_per_slide; ++i) {
        bool signature = i < n_sig;
        for (size_t d = 0; d < spec.d_in; ++d) {
          double mean = signature ? mu[j][d] : bg[d];
          double sd = signature ? spec.sigma : spec.sigma_bg;
          slide.instances.at(i, d) = rng.normal(mean, sd);
        }
      }
      slides.push_back(std::move(slide));
    }
  }
  return slides;
}

size_t min_feasible_total(double rho, size_t k) {
  // smallest total with round(total / (rho + k - 1)) >= 1
  return static_cast<size_t>(
      std::ceil(0.5 * (rho + static_cast<double>(k) - 1.0)));
}

std::vector<size_t> imbalanced_counts(const ImbalanceSpec& imb, size_t k) {
  if (k < 2) throw std::invalid_argument("imbalance: need at least 2 classes");
  if (imb.rho < 1.0) throw std::invalid_argument("imbalance: rho must be >= 1");
  if (imb.majority_class >= k) {
    throw std::invalid_argument("imbalance: majority class index out of range");
  }
  double denom = imb.rho + static_cast<double>(k) - 1.0;
  auto minority = static_cast<long long>(
      std::llround(static_cast<double>(imb.total) / denom));
  if (minority < 1) {
    throw std::invalid_argument(
        "imbalance: total " + std::to_string(imb.total) + " too small for rho " +
        std::to_string(imb.rho) + " with " + std::to_string(k) +
        " classes; minimum feasible total is " +
        std::to_string(min_feasible_total(imb.rho, k)));
  }
  auto majority = static_cast<long long>(std::llround(imb.rho * static_cast<double>(minority)));
  std::vector<size_t> counts(k, static_cast<size_t>(minority));
  counts[imb.majority_class] = static_cast<size_t>(majority);
  return counts;
}

std::vector<Slide> subsample_imbalanced(const std::vector<Slide>& slides,
                                        const ImbalanceSpec& imb, size_t k,
                                        uint64_t seed) {
  std::vector<size_t> counts = imbalanced_counts(imb, k);

  std::vector<std::vector<size_t>> by_class(k);
  for (size_t i = 0; i < slides.size(); ++i) {
    int y = slides[i].label;
    if (y < 0 || static_cast<size_t>(y) >= k) {
      throw std::invalid_argument("imbalance: slide label " + std::to_string(y) +
                                  " outside [0, " + std::to_string(k) + ")");
    }
    by_class[static_cast<size_t>(y)].push_back(i);
  }

  std::string shortfall;
  for (size_t j = 0; j < k; ++j) {
    if (by_class[j].size() < counts[j]) {
      shortfall += " class " + std::to_string(j) + ": need " + std::to_string(counts[j]) +
                   ", have " + std::to_string(by_class[j].size()) + ";";
    }
  }
  if (!shortfall.empty()) {
    throw std::invalid_argument("imbalance: insufficient slides:" + shortfall);
  }

  Rng rng(seed);
  std::vector<Slide> out;
  for (size_t j = 0; j < k; ++j) {
    Rng class_rng = rng.derive(j);
    class_rng.shuffle(by_class[j]);
    for (size_t s = 0; s < counts[j]; ++s) out.push_back(slides[by_class[j][s]]);
  }
  return out;
}

std::vector<Slide> apply_ood_shift(const std::vector<Slide>& slides,
                                   const ShiftSpec& shift) {
  shift.validate();
  Rng rng(shift.seed);
  std::vector<Slide> out;
  out.reserve(slides.size());
  for (const Slide& s : slides) {
    size_t d_in = s.instances.cols();
    if (shift.scale.size() != d_in) {
      throw std::invalid_argument("shift spec: width " + std::to_string(shift.scale.size()) +
                                  " does not match d_in " + std::to_string(d_in));
    }
    Slide shifted = s;
    shifted.domain = Domain::OOD;
    for (size_t i = 0; i < s.instances.rows(); ++i) {
      for (size_t d = 0; d < d_in; ++d) {
        double noise = shift.noise > 0.0 ? shift.noise * rng.normal() : 0.0;
        shifted.instances.at(i, d) =
            shift.scale[d] * s.instances.at(i, d) + shift.offset[d] + noise;
      }
    }
    out.push_back(std::move(shifted));
  }
  return out;
}

Bag sample_bag_from_slide(const Slide& slide, size_t bag_size, Rng& rng) {
  size_t n = slide.instances.rows();
  if (bag_size == 0 || bag_size > n) {
    throw std::invalid_argument("bag sampling: bag size " + std::to_string(bag_size) +
                                " invalid for slide with " + std::to_string(n) +
                                " instances");
  }
  std::vector<size_t> idx = rng.sample_without_replacement(n, bag_size);
  Bag bag;
  bag.label = slide.label;
  bag.slide_id = slide.slide_id;
  bag.instances = Tensor({bag_size, slide.instances.cols()});
  for (size_t b = 0; b < bag_size; ++b) {
    for (size_t d = 0; d < slide.instances.cols(); ++d) {
      bag.instances.at(b, d) = slide.instances.at(idx[b], d);
    }
  }
  return bag;
}

std::vector<Bag> sample_batch_random(const std::vector<Slide>& slides, size_t bag_size,
                                     size_t batch_size, Rng& rng) {
  if (slides.empty()) throw std::invalid_argument("bag sampling: no training slides");
  std::vector<Bag> batch;
  batch.reserve(batch_size);
  for (size_t b = 0; b < batch_size; ++b) {
    const Slide& s = slides[rng.uniform_index(slides.size())];
    batch.push_back(sample_bag_from_slide(s, bag_size, rng));
  }
  return batch;
}

std::vector<Bag> sample_batch_class_balanced(const std::vector<Slide>& slides,
                                             size_t bag_size, size_t batch_size,
                                             size_t k, Rng& rng) {
  std::vector<std::vector<size_t>> by_class(k);
  for (size_t i = 0; i < slides.size(); ++i) {
    int y = slides[i].label;
    if (y >= 0 && static_cast<size_t>(y) < k) by_class[static_cast<size_t>(y)].push_back(i);
  }
  for (size_t j = 0; j < k; ++j) {
    if (by_class[j].empty()) {
      throw std::invalid_argument("class-balanced sampling: class " + std::to_string(j) +
                                  " has no slides");
    }
  }
  std::vector<Bag> batch;
  batch.reserve(batch_size);
  for (size_t b = 0; b < batch_size; ++b) {
    size_t j = rng.uniform_index(k);
    const Slide& s = slides[by_class[j][rng.uniform_index(by_class[j].size())]];
    batch.push_back(sample_bag_from_slide(s, bag_size, rng));
  }
  return batch;
}

std::vector<Bag> split_slide_into_bags(const Slide& slide, size_t bag_size,
                                       uint64_t seed) {
  if (bag_size == 0) throw std::invalid_argument("split: bag size must be >= 1");
  size_t n = slide.instances.rows();
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);

  std::vector<Bag> bags;
  for (size_t start = 0; start < n; start += bag_size) {
    size_t len = std::min(bag_size, n - start);
    Bag bag;
    bag.label = slide.label;
    bag.slide_id = slide.slide_id;
    bag.instances = Tensor({len, slide.instances.cols()});
    for (size_t b = 0; b < len; ++b) {
      for (size_t d = 0; d < slide.instances.cols(); ++d) {
        bag.instances.at(b, d) = slide.instances.at(idx[start + b], d);
      }
    }
    bags.push_back(std::move(bag));
  }
  return bags;
}

void save_slides(const std::string& dir, const std::string& name,
                 const std::vector<Slide>& slides, const std::string& spec_echo) {
  if (slides.empty()) throw std::invalid_argument("save_slides: empty split");
  size_t n_s = slides[0].instances.rows();
  size_t d_in = slides[0].instances.cols();
  for (const Slide& s : slides) {
    if (s.instances.rows() != n_s || s.instances.cols() != d_in) {
      throw std::invalid_argument("save_slides: slides must share n_s and d_in");
    }
  }

  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::string bin_name = name + ".bin";

  std::ofstream bin(fs::path(dir) / bin_name, std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("save_slides: cannot write " + bin_name);
  bin.write(kBinMagic, sizeof(kBinMagic));
  write_u32(bin, kBinVersion);
  write_u32(bin, static_cast<uint32_t>(slides.size()));
  write_u32(bin, static_cast<uint32_t>(n_s));
  write_u32(bin, static_cast<uint32_t>(d_in));

  json manifest;
  manifest["format"] = "scmil-dataset";
  manifest["version"] = 1;
  manifest["binary"] = bin_name;
  manifest["n_slides"] = slides.size();
  manifest["n_s"] = n_s;
  manifest["d_in"] = d_in;
  if (!spec_echo.empty()) manifest["spec"] = json::parse(spec_echo);

  json slide_list = json::array();
  uint64_t offset = 0;
  for (const Slide& s : slides) {
    bin.write(reinterpret_cast<const char*>(s.instances.values.data()),
              static_cast<std::streamsize>(s.instances.numel() * sizeof(double)));
    slide_list.push_back({{"id", s.slide_id},
                          {"label", s.label},
                          {"domain", s.domain == Domain::OOD ? "ood" : "id"},
                          {"offset", offset}});
    offset += s.instances.numel();
  }
  manifest["slides"] = std::move(slide_list);
  if (!bin) throw std::runtime_error("save_slides: write failed for " + bin_name);
  bin.close();

  std::ofstream mf(fs::path(dir) / (name + ".json"), std::ios::binary | std::ios::trunc);
  if (!mf) throw std::runtime_error("save_slides: cannot write manifest for " + name);
  mf << manifest.dump(2) << "\n";
}

std::vector<Slide> load_slides(const std::string& dir, const std::string& name,
                               std::string* spec_echo) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / (name + ".json"), std::ios::binary);
  if (!mf) throw std::runtime_error("load_slides: no manifest " + name + ".json in " + dir);
  json manifest = json::parse(mf);
  if (manifest.value("format", "") != "scmil-dataset" || manifest.value("version", 0) != 1) {
    throw std::runtime_error("load_slides: unknown manifest format/version");
  }

  std::ifstream bin(fs::path(dir) / manifest.at("binary").get<std::string>(),
                    std::ios::binary);
  if (!bin) throw std::runtime_error("load_slides: missing binary for " + name);
  char magic[8];
  bin.read(magic, sizeof(magic));
  if (std::memcmp(magic, kBinMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("load_slides: bad magic in binary for " + name);
  }
  if (read_u32(bin) != kBinVersion) {
    throw std::runtime_error("load_slides: unsupported binary version");
  }
  uint32_t n_slides = read_u32(bin);
  uint32_t n_s = read_u32(bin);
  uint32_t d_in = read_u32(bin);
  if (manifest.at("slides").size() != n_slides) {
    throw std::runtime_error("load_slides: manifest/binary slide count mismatch");
  }

  std::vector<Slide> slides;
  slides.reserve(n_slides);
  for (const json& entry : manifest.at("slides")) {
    Slide s;
    s.slide_id = entry.at("id").get<int64_t>();
    s.label = entry.at("label").get<int>();
    s.domain = entry.at("domain").get<std::string>() == "ood" ? Domain::OOD : Domain::ID;
    s.instances = Tensor({n_s, d_in});
    bin.read(reinterpret_cast<char*>(s.instances.values.data()),
             static_cast<std::streamsize>(s.instances.numel() * sizeof(double)));
    if (!bin) throw std::runtime_error("load_slides: truncated binary for " + name);
    slides.push_back(std::move(s));
  }
  if (spec_echo) {
    *spec_echo = manifest.contains("spec") ? manifest["spec"].dump() : std::string{};
  }
  return slides;
}

std::vector<size_t> class_histogram(const std::vector<Slide>& slides, size_t k) {
  std::vector<size_t> counts(k, 0);
  for (const Slide& s : slides) {
    if (s.label >= 0 && static_cast<size_t>(s.label) < k) {
      ++counts[static_cast<size_t>(s.label)];
    }
  }
  return counts;
}

}  // namespace scmil
