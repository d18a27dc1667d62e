#pragma once

#include <array>
#include <cstdint>
#include <utility>

#include "ntseg/volume.hpp"

// Synthetic ground truth: three nested ellipsoids around the volume centre
// (WM core inside a GM shell inside a CSF shell), class-mean intensities with
// Gaussian noise, optionally modulated by a smooth multiplicative bias field.

namespace ntseg {

struct PhantomSpec {
  VolumeDims dims{8, 64, 64};
  Spacing spacing = {1.0, 1.0, 1.0};
  // semi-axes in voxels, z/y/x order, strictly nested WM < GM < CSF
  std::array<double, 3> wm_axes = {2.0, 12.0, 12.0};
  std::array<double, 3> gm_axes = {2.8, 18.0, 18.0};
  std::array<double, 3> csf_axes = {3.5, 24.0, 24.0};
  // background, CSF, GM, WM
  std::array<double, 4> class_means = {10.0, 40.0, 80.0, 120.0};
  double noise_sigma = 2.0;
  double bias_amplitude = 0.0;
  uint64_t seed = 0;

  void validate() const;
};

std::pair<Volume, LabelVolume> phantom_generate(const PhantomSpec& spec);

}  // namespace ntseg
