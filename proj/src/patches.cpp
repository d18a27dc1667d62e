#include "ntseg/patches.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

#include "ntseg/loss.hpp"

namespace ntseg {

namespace {

// Maps (slice, row, col) in slice geometry to the flat voxel index for the
// given slicing axis: axis 0 slices are (y,x) planes, axis 1 are (z,x),
// axis 2 are (z,y).
size_t voxel_index(const VolumeDims& dims, size_t axis, size_t slice,
                   size_t row, size_t col) {
  switch (axis) {
    case 0: return (slice * dims.h + row) * dims.w + col;
    case 1: return (row * dims.h + slice) * dims.w + col;
    default: return (row * dims.h + col) * dims.w + slice;
  }
}

void slice_geometry(const VolumeDims& dims, size_t axis, size_t* slices,
                    size_t* h, size_t* w) {
  switch (axis) {
    case 0: *slices = dims.d; *h = dims.h; *w = dims.w; break;
    case 1: *slices = dims.h; *h = dims.d; *w = dims.w; break;
    default: *slices = dims.w; *h = dims.d; *w = dims.h; break;
  }
}

size_t round_up(size_t n) {
  return (n + kPatchSize - 1) / kPatchSize * kPatchSize;
}

}  // namespace

PatchSet tile_patches(const std::string& volume_id, const Volume& img,
                      const LabelVolume& lab, size_t axis) {
  img.validate();
  lab.validate();
  check(axis < 3, "tile_patches: axis must be 0, 1 or 2");
  check(img.dims == lab.dims, "tile_patches: image dims " +
                                  std::to_string(img.dims.d) + "x" +
                                  std::to_string(img.dims.h) + "x" +
                                  std::to_string(img.dims.w) +
                                  " do not match label dims");

  TiledVolumeInfo info;
  info.dims = img.dims;
  info.spacing = img.spacing;
  info.axis = axis;
  slice_geometry(img.dims, axis, &info.slices, &info.slice_h, &info.slice_w);
  info.padded_h = round_up(info.slice_h);
  info.padded_w = round_up(info.slice_w);

  PatchSet set;
  for (size_t s = 0; s < info.slices; ++s)
    for (size_t r0 = 0; r0 < info.padded_h; r0 += kPatchSize)
      for (size_t c0 = 0; c0 < info.padded_w; c0 += kPatchSize) {
        Patch p;
        p.volume_id = volume_id;
        p.slice = s;
        p.row0 = r0;
        p.col0 = c0;
        p.image.assign(kPatchSize * kPatchSize, 0.0f);
        p.labels.assign(kPatchSize * kPatchSize, 0);
        for (size_t r = 0; r < kPatchSize && r0 + r < info.slice_h; ++r)
          for (size_t c = 0; c < kPatchSize && c0 + c < info.slice_w; ++c) {
            const size_t v =
                voxel_index(img.dims, axis, s, r0 + r, c0 + c);
            p.image[r * kPatchSize + c] = img.data[v];
            p.labels[r * kPatchSize + c] = lab.labels[v];
          }
        set.patches.push_back(std::move(p));
      }
  set.volumes.emplace(volume_id, info);
  return set;
}

void merge_into(PatchSet& dst, PatchSet&& src) {
  for (auto& [id, info] : src.volumes)
    check(dst.volumes.emplace(id, info).second,
          "merge_into: volume '" + id + "' is already present");
  dst.patches.insert(dst.patches.end(),
                     std::make_move_iterator(src.patches.begin()),
                     std::make_move_iterator(src.patches.end()));
}

size_t drop_background_only_slices(PatchSet& set) {
  std::set<std::pair<std::string, size_t>> keep;
  for (const Patch& p : set.patches)
    if (!p.background_only()) keep.emplace(p.volume_id, p.slice);

  const size_t before = set.patches.size();
  std::erase_if(set.patches, [&](const Patch& p) {
    return !keep.count({p.volume_id, p.slice});
  });
  return before - set.patches.size();
}

TensorF untile_probs(const PatchSet& set, const std::string& volume_id,
                     const std::vector<TensorF>& probs) {
  auto it = set.volumes.find(volume_id);
  check(it != set.volumes.end(),
        "untile: unknown volume '" + volume_id + "'");
  const TiledVolumeInfo& info = it->second;

  std::vector<const Patch*> mine;
  for (const Patch& p : set.patches)
    if (p.volume_id == volume_id) mine.push_back(&p);
  check(mine.size() == probs.size(),
        "untile: got " + std::to_string(probs.size()) +
            " probability patches for " + std::to_string(mine.size()) +
            " tiled patches of '" + volume_id + "'");

  const size_t blocks_h = info.padded_h / kPatchSize;
  const size_t blocks_w = info.padded_w / kPatchSize;
  std::vector<uint8_t> covered(info.slices * blocks_h * blocks_w, 0);

  TensorF out({info.slices, kNumClasses, info.slice_h, info.slice_w});
  for (size_t i = 0; i < mine.size(); ++i) {
    const Patch& p = *mine[i];
    const TensorF& pr = probs[i];
    check(pr.shape() ==
              std::vector<size_t>{1, kNumClasses, kPatchSize, kPatchSize} ||
          pr.shape() == std::vector<size_t>{kNumClasses, kPatchSize,
                                            kPatchSize},
          "untile: probability patch " + std::to_string(i) +
              " has shape " + pr.shape_string());
    const size_t block =
        (p.slice * blocks_h + p.row0 / kPatchSize) * blocks_w +
        p.col0 / kPatchSize;
    check(!covered[block], "untile: origin covered twice in '" + volume_id +
                               "' at slice " + std::to_string(p.slice));
    covered[block] = 1;

    const float* src = pr.data();
    for (size_t c = 0; c < kNumClasses; ++c)
      for (size_t r = 0; r < kPatchSize && p.row0 + r < info.slice_h; ++r)
        for (size_t cc = 0; cc < kPatchSize && p.col0 + cc < info.slice_w;
             ++cc)
          out.at4(p.slice, c, p.row0 + r, p.col0 + cc) =
              src[(c * kPatchSize + r) * kPatchSize + cc];
  }
  for (size_t b = 0; b < covered.size(); ++b)
    check(covered[b] != 0, "untile: missing patch for a covered origin in '" +
                               volume_id + "'");
  return out;
}

LabelVolume untile(const PatchSet& set, const std::string& volume_id,
                   const std::vector<TensorF>& probs) {
  const TiledVolumeInfo& info = set.volumes.at(volume_id);
  TensorF field = untile_probs(set, volume_id, probs);
  std::vector<uint8_t> flat = reconstruct_labels(field);

  LabelVolume out;
  out.dims = info.dims;
  out.spacing = info.spacing;
  out.labels.assign(info.dims.voxels(), 0);
  for (size_t s = 0; s < info.slices; ++s)
    for (size_t r = 0; r < info.slice_h; ++r)
      for (size_t c = 0; c < info.slice_w; ++c)
        out.labels[voxel_index(info.dims, info.axis, s, r, c)] =
            flat[(s * info.slice_h + r) * info.slice_w + c];
  return out;
}

TensorF patch_images(const std::vector<const Patch*>& batch) {
  check(!batch.empty(), "patch_images: empty batch");
  TensorF out({batch.size(), 1, kPatchSize, kPatchSize});
  for (size_t n = 0; n < batch.size(); ++n)
    std::copy(batch[n]->image.begin(), batch[n]->image.end(),
              out.data() + n * kPatchSize * kPatchSize);
  return out;
}

TensorF patch_onehot(const std::vector<const Patch*>& batch) {
  check(!batch.empty(), "patch_onehot: empty batch");
  std::vector<const uint8_t*> rows;
  rows.reserve(batch.size());
  for (const Patch* p : batch) rows.push_back(p->labels.data());
  return one_hot_labels<float>(rows, kPatchSize, kPatchSize);
}

}  // namespace ntseg
