#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "scmil/rng.hpp"
#include "scmil/tensor.hpp"

namespace scmil {

enum class Domain { ID, OOD };

// The unit of evaluation: all instances of one synthetic slide.
struct Slide {
  Tensor instances;  // n_s x d_in
  int label = 0;
  int64_t slide_id = 0;
  Domain domain = Domain::ID;
};

// The unit of training: a fixed-size draw from one slide, with its label.
struct Bag {
  Tensor instances;  // bag_size x d_in
  int label = 0;
  int64_t slide_id = 0;
};

// Gaussian mixture slides: each class has a signature mean; a slide of class
// j gets ceil(w * n_s) signature instances and background for the rest.
struct DatasetSpec {
  size_t k = 3;
  std::vector<size_t> slides_per_class;  // length k
  size_t instances_per_slide = 200;
  double witness_rate = 0.3;
  size_t d_in = 32;
  double mean_separation = 3.0;  // pairwise distance between class means, in sigma units
  double sigma = 1.0;
  double sigma_bg = 1.0;
  std::vector<std::vector<double>> means;  // optional explicit k x d_in means
  std::vector<double> background_mean;     // optional, defaults to zeros
  uint64_t seed = 1;

  void validate() const;
  // Explicit means if given, else scaled basis vectors with the requested
  // pairwise separation.
  std::vector<std::vector<double>> resolve_means() const;
};

struct ImbalanceSpec {
  double rho = 1.0;       // majority count / minority count
  size_t total = 0;       // training slide budget after subsampling
  size_t majority_class = 0;
};

// Affine feature shift plus noise; the synthetic stand-in for a different
// lab/scanner at fixed labels.
struct ShiftSpec {
  std::vector<double> scale;   // d_in, strictly positive
  std::vector<double> offset;  // d_in
  double noise = 0.0;
  uint64_t seed = 7;
  void validate() const;
};

std::vector<Slide> generate_slides(const DatasetSpec& spec);

// Per-class counts for the given ratio: minority m = round(total/(rho+k-1)),
// majority rho*m, every non-majority class gets m.
std::vector<size_t> imbalanced_counts(const ImbalanceSpec& imb, size_t k);
size_t min_feasible_total(double rho, size_t k);

std::vector<Slide> subsample_imbalanced(const std::vector<Slide>& slides,
                                        const ImbalanceSpec& imb, size_t k,
                                        uint64_t seed);

std::vector<Slide> apply_ood_shift(const std::vector<Slide>& slides,
                                   const ShiftSpec& shift);

Bag sample_bag_from_slide(const Slide& slide, size_t bag_size, Rng& rng);

// Slide chosen uniformly over all training slides.
std::vector<Bag> sample_batch_random(const std::vector<Slide>& slides, size_t bag_size,
                                     size_t batch_size, Rng& rng);

// Class chosen uniformly, then a slide within the class.
std::vector<Bag> sample_batch_class_balanced(const std::vector<Slide>& slides,
                                             size_t bag_size, size_t batch_size,
                                             size_t k, Rng& rng);

// Seeded shuffle, then consecutive chunks; the remainder stays as a smaller
// bag so every instance appears exactly once.
std::vector<Bag> split_slide_into_bags(const Slide& slide, size_t bag_size,
                                       uint64_t seed);

// One JSON manifest plus one flat little-endian fp64 binary per split.
void save_slides(const std::string& dir, const std::string& name,
                 const std::vector<Slide>& slides, const std::string& spec_echo);
std::vector<Slide> load_slides(const std::string& dir, const std::string& name,
                               std::string* spec_echo = nullptr);

std::vector<size_t> class_histogram(const std::vector<Slide>& slides, size_t k);

}  // namespace scmil
