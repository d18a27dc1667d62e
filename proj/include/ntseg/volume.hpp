#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

// Volumes and their native file format. A volume file is an 8-byte magic
// ("NTVOL001" intensities, "NTLBL001" labels), one JSON header line ending in
// '\n' with dims [D,H,W], spacing [sx,sy,sz] and dtype ("f32"/"u8"), then the
// raw little-endian payload of D*H*W elements.

namespace ntseg {

struct VolumeDims {
  size_t d = 0, h = 0, w = 0;
  size_t voxels() const { return d * h * w; }
  bool operator==(const VolumeDims&) const = default;
};

using Spacing = std::array<double, 3>;  // z, y, x in millimetres

struct Volume {
  VolumeDims dims;
  Spacing spacing = {1.0, 1.0, 1.0};
  std::vector<float> data;  // row-major, D then H then W

  void validate() const;
};

struct LabelVolume {
  VolumeDims dims;
  Spacing spacing = {1.0, 1.0, 1.0};
  std::vector<uint8_t> labels;  // values 0..3

  void validate() const;
};

// Optional min-max rescale to [0,1]; a constant volume becomes all zeros.
// Off by default in every pipeline.
void normalize_minmax(Volume& v);

void save_volume(const Volume& v, const std::string& path);
void save_volume(const LabelVolume& v, const std::string& path);

Volume load_volume(const std::string& path);
LabelVolume load_label_volume(const std::string& path);

}  // namespace ntseg
