#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ntseg/volume.hpp"

// Segmentation quality measures over labelled volumes. Labels are 0..3
// (background, CSF, GM, WM); metrics are reported for the three tissue
// classes. Hausdorff distances are exact: nearest-foreground distances come
// from a separable squared distance transform, not from sampling.

namespace ntseg {

// Dice overlap of one label value; two empty masks count as perfect overlap.
double hard_dsc(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b,
                uint8_t label);

// Mean Dice over the tissue classes 1..3.
double mean_tissue_dsc(const std::vector<uint8_t>& a,
                       const std::vector<uint8_t>& b);

// Exact squared Euclidean distance from every voxel to the nearest foreground
// voxel, anisotropic spacing respected. Infinite where there is none.
std::vector<double> squared_edt(const std::vector<uint8_t>& foreground,
                                const VolumeDims& dims,
                                const Spacing& spacing);

// Symmetric Hausdorff distance between the masks of one label value, in
// physical units. Empty on either side leaves it undefined.
std::optional<double> hausdorff_distance(const std::vector<uint8_t>& a,
                                         const std::vector<uint8_t>& b,
                                         uint8_t label, const VolumeDims& dims,
                                         const Spacing& spacing);

// Absolute volume difference |V_pred - V_ref| / V_ref; undefined when the
// reference mask is empty.
std::optional<double> absolute_volume_difference(
    const std::vector<uint8_t>& pred, const std::vector<uint8_t>& ref,
    uint8_t label);

struct ClassMetrics {
  double dsc = 0.0;
  std::optional<double> hausdorff;
  std::optional<double> avd;
};

struct VolumeMetrics {
  std::array<ClassMetrics, 3> tissue;  // CSF, GM, WM
  double mean_dsc = 0.0;
};

VolumeMetrics evaluate_labels(const std::vector<uint8_t>& pred,
                              const std::vector<uint8_t>& ref,
                              const VolumeDims& dims, const Spacing& spacing);

// One header plus one row per volume; undefined values print as NA.
std::string metrics_csv_header();
std::string metrics_csv_row(const std::string& volume_id,
                            const VolumeMetrics& m);

}  // namespace ntseg
