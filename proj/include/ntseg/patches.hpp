#pragma once

#include <map>
#include <string>
#include <vector>

#include "ntseg/tensor.hpp"
#include "ntseg/volume.hpp"

// 64x64 patch extraction and exact reassembly. Each 2D slice along the
// slicing axis is zero-padded up to multiples of 64, then cut into
// non-overlapping patches with recorded origins; untiling reverses the
// process, crops the padding, and takes the per-pixel argmax.

namespace ntseg {

inline constexpr size_t kPatchSize = 64;

struct Patch {
  std::string volume_id;
  size_t slice = 0;            // index along the slicing axis
  size_t row0 = 0, col0 = 0;   // origin within the padded slice
  std::vector<float> image;    // kPatchSize * kPatchSize
  std::vector<uint8_t> labels;

  bool background_only() const {
    for (uint8_t v : labels)
      if (v) return false;
    return true;
  }
};

struct TiledVolumeInfo {
  VolumeDims dims;  // original volume
  Spacing spacing = {1.0, 1.0, 1.0};
  size_t axis = 0;
  size_t slices = 0;
  size_t slice_h = 0, slice_w = 0;    // unpadded slice extent
  size_t padded_h = 0, padded_w = 0;  // rounded up to kPatchSize
};

struct PatchSet {
  std::map<std::string, TiledVolumeInfo> volumes;
  std::vector<Patch> patches;
};

PatchSet tile_patches(const std::string& volume_id, const Volume& img,
                      const LabelVolume& lab, size_t axis = 0);

// Appends src into dst; a volume id present in both is rejected.
void merge_into(PatchSet& dst, PatchSet&& src);

// Removes all patches of slices whose labels are background everywhere.
// Returns the number of patches dropped.
size_t drop_background_only_slices(PatchSet& set);

// Reassembled probability field of one volume, shape {slices, 4, slice_h,
// slice_w} (padding cropped). `probs` holds one {4,64,64} tensor per patch of
// that volume, in the order the patches appear in `set.patches`.
TensorF untile_probs(const PatchSet& set, const std::string& volume_id,
                     const std::vector<TensorF>& probs);

// Argmax labels of the reassembled probabilities, back in volume geometry.
LabelVolume untile(const PatchSet& set, const std::string& volume_id,
                   const std::vector<TensorF>& probs);

// Mini-batch assembly in patch order: images {N,1,64,64}, labels one-hot
// {N,4,64,64}.
TensorF patch_images(const std::vector<const Patch*>& batch);
TensorF patch_onehot(const std::vector<const Patch*>& batch);

}  // namespace ntseg
