#include "ntseg/volume.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "ntseg/tensor.hpp"

static_assert(std::endian::native == std::endian::little,
              "volume I/O assumes a little-endian host");

namespace ntseg {

namespace {

constexpr char kVolMagic[9] = "NTVOL001";
constexpr char kLblMagic[9] = "NTLBL001";
constexpr size_t kMaxHeader = 1 << 16;

using nlohmann::json;

std::string header_json(const VolumeDims& dims, const Spacing& spacing,
                        const char* dtype) {
  json h;
  h["dims"] = {dims.d, dims.h, dims.w};
  // header stores spacing x-first, the mirror of dims
  h["spacing"] = {spacing[2], spacing[1], spacing[0]};
  h["dtype"] = dtype;
  return h.dump();
}

void write_file(const std::string& path, const char* magic,
                const std::string& header, const void* payload,
                size_t payload_bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(magic, 8);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.put('\n');
  out.write(static_cast<const char*>(payload),
            static_cast<std::streamsize>(payload_bytes));
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

struct ParsedHeader {
  VolumeDims dims;
  Spacing spacing;
  std::string dtype;
};

ParsedHeader read_header(std::ifstream& in, const std::string& path,
                         const char* want_magic) {
  char magic[8];
  if (!in.read(magic, 8))
    throw std::runtime_error(path + ": truncated file, no magic");
  if (std::memcmp(magic, want_magic, 8) != 0)
    throw std::runtime_error(path + ": bad magic, expected " +
                             std::string(want_magic, 8) + " got " +
                             std::string(magic, 8));
  std::string line;
  if (!std::getline(in, line) || line.size() > kMaxHeader)
    throw std::runtime_error(path + ": missing or oversized header line");

  json h;
  try {
    h = json::parse(line);
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": header is not valid JSON: " + e.what());
  }
  if (!h.contains("dims") || !h.contains("spacing") || !h.contains("dtype"))
    throw std::runtime_error(path + ": header lacks dims/spacing/dtype");

  ParsedHeader out;
  auto dims = h["dims"];
  if (!dims.is_array() || dims.size() != 3)
    throw std::runtime_error(path + ": dims must be [D,H,W]");
  out.dims = {dims[0].get<size_t>(), dims[1].get<size_t>(),
              dims[2].get<size_t>()};
  auto sp = h["spacing"];
  if (!sp.is_array() || sp.size() != 3)
    throw std::runtime_error(path + ": spacing must be [sx,sy,sz]");
  out.spacing = {sp[2].get<double>(), sp[1].get<double>(),
                 sp[0].get<double>()};
  out.dtype = h["dtype"].get<std::string>();
  return out;
}

void read_payload(std::ifstream& in, const std::string& path, void* dst,
                  size_t bytes) {
  if (!in.read(static_cast<char*>(dst), static_cast<std::streamsize>(bytes)))
    throw std::runtime_error(path + ": truncated payload, wanted " +
                             std::to_string(bytes) + " bytes, got " +
                             std::to_string(in.gcount()));
  in.peek();
  if (!in.eof())
    throw std::runtime_error(path +
                             ": payload larger than dims declare (dims/payload "
                             "mismatch)");
}

void check_geometry(const VolumeDims& dims, const Spacing& spacing,
                    size_t payload, const char* what) {
  check(dims.d > 0 && dims.h > 0 && dims.w > 0,
        std::string(what) + ": dims must be positive");
  check(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0,
        std::string(what) + ": spacing must be positive");
  check(payload == dims.voxels(),
        std::string(what) + ": payload has " + std::to_string(payload) +
            " elements but dims declare " + std::to_string(dims.voxels()));
}

}  // namespace

void Volume::validate() const {
  check_geometry(dims, spacing, data.size(), "Volume");
}

void LabelVolume::validate() const {
  check_geometry(dims, spacing, labels.size(), "LabelVolume");
  for (size_t i = 0; i < labels.size(); ++i)
    if (labels[i] > 3)
      throw std::invalid_argument("LabelVolume: label value " +
                                  std::to_string(labels[i]) + " at voxel " +
                                  std::to_string(i) + " is out of range");
}

void normalize_minmax(Volume& v) {
  v.validate();
  float lo = v.data[0], hi = v.data[0];
  for (float x : v.data) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  if (hi == lo) {
    std::fill(v.data.begin(), v.data.end(), 0.0f);
    return;
  }
  const float scale = 1.0f / (hi - lo);
  for (float& x : v.data) x = (x - lo) * scale;
}

void save_volume(const Volume& v, const std::string& path) {
  v.validate();
  write_file(path, kVolMagic, header_json(v.dims, v.spacing, "f32"),
             v.data.data(), v.data.size() * sizeof(float));
}

void save_volume(const LabelVolume& v, const std::string& path) {
  v.validate();
  write_file(path, kLblMagic, header_json(v.dims, v.spacing, "u8"),
             v.labels.data(), v.labels.size());
}

Volume load_volume(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  ParsedHeader h = read_header(in, path, kVolMagic);
  if (h.dtype != "f32")
    throw std::runtime_error(path + ": dtype '" + h.dtype +
                             "' does not match intensity magic");
  Volume v;
  v.dims = h.dims;
  v.spacing = h.spacing;
  v.data.resize(h.dims.voxels());
  read_payload(in, path, v.data.data(), v.data.size() * sizeof(float));
  v.validate();
  return v;
}

LabelVolume load_label_volume(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  ParsedHeader h = read_header(in, path, kLblMagic);
  if (h.dtype != "u8")
    throw std::runtime_error(path + ": dtype '" + h.dtype +
                             "' does not match label magic");
  LabelVolume v;
  v.dims = h.dims;
  v.spacing = h.spacing;
  v.labels.resize(h.dims.voxels());
  read_payload(in, path, v.labels.data(), v.labels.size());
  v.validate();
  return v;
}

}  // namespace ntseg
