#include "ntseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

#include "ntseg/tensor.hpp"

namespace ntseg {

namespace {

constexpr double kFar = 1e20;  // plays the role of infinity inside the EDT

// Felzenszwalb/Huttenlocher lower envelope of parabolas along one line.
// Samples sit at physical coordinates i*step; f holds squared distances in
// and stays finite (kFar, not infinity), so intersections are always finite
// and the true-infinity sentinels in z terminate both scans.
void edt_line(const double* f, double* d, size_t n, double step,
              std::vector<size_t>& v, std::vector<double>& z) {
  const double inf = std::numeric_limits<double>::infinity();
  v.resize(n);
  z.resize(n + 1);
  size_t k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  auto x = [step](size_t i) { return static_cast<double>(i) * step; };
  auto intersect = [&](size_t q, size_t p) {
    return ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) /
           (2.0 * x(q) - 2.0 * x(p));
  };
  for (size_t q = 1; q < n; ++q) {
    double s = intersect(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = intersect(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (size_t q = 0; q < n; ++q) {
    while (z[k + 1] < x(q)) ++k;
    const double dx = x(q) - x(v[k]);
    d[q] = dx * dx + f[v[k]];
  }
}

void mask_of(const std::vector<uint8_t>& labels, uint8_t label,
             std::vector<uint8_t>& out) {
  out.resize(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] == label;
}

size_t count_label(const std::vector<uint8_t>& labels, uint8_t label) {
  size_t n = 0;
  for (uint8_t v : labels) n += v == label;
  return n;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) {
  return v ? fmt(*v) : std::string("NA");
}

}  // namespace

double hard_dsc(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b,
                uint8_t label) {
  check(a.size() == b.size(), "hard_dsc: size mismatch");
  size_t na = 0, nb = 0, inter = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const bool ia = a[i] == label, ib = b[i] == label;
    na += ia;
    nb += ib;
    inter += ia && ib;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

double mean_tissue_dsc(const std::vector<uint8_t>& a,
                       const std::vector<uint8_t>& b) {
  double s = 0;
  for (uint8_t c = 1; c <= 3; ++c) s += hard_dsc(a, b, c);
  return s / 3.0;
}

std::vector<double> squared_edt(const std::vector<uint8_t>& foreground,
                                const VolumeDims& dims,
                                const Spacing& spacing) {
  const size_t D = dims.d, H = dims.h, W = dims.w;
  check(foreground.size() == dims.voxels(),
        "squared_edt: mask size does not match dims");
  check(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0,
        "squared_edt: spacing must be positive");

  std::vector<double> dist(foreground.size());
  for (size_t i = 0; i < dist.size(); ++i)
    dist[i] = foreground[i] ? 0.0 : kFar;

  std::vector<double> f(std::max({D, H, W})), g(std::max({D, H, W}));
  std::vector<size_t> v;
  std::vector<double> z;

  // along z
  for (size_t y = 0; y < H; ++y)
    for (size_t x = 0; x < W; ++x) {
      for (size_t zz = 0; zz < D; ++zz) f[zz] = dist[(zz * H + y) * W + x];
      edt_line(f.data(), g.data(), D, spacing[0], v, z);
      for (size_t zz = 0; zz < D; ++zz) dist[(zz * H + y) * W + x] = g[zz];
    }
  // along y
  for (size_t zz = 0; zz < D; ++zz)
    for (size_t x = 0; x < W; ++x) {
      for (size_t y = 0; y < H; ++y) f[y] = dist[(zz * H + y) * W + x];
      edt_line(f.data(), g.data(), H, spacing[1], v, z);
      for (size_t y = 0; y < H; ++y) dist[(zz * H + y) * W + x] = g[y];
    }
  // along x
  for (size_t zz = 0; zz < D; ++zz)
    for (size_t y = 0; y < H; ++y) {
      double* row = dist.data() + (zz * H + y) * W;
      std::copy(row, row + W, f.data());
      edt_line(f.data(), g.data(), W, spacing[2], v, z);
      std::copy(g.data(), g.data() + W, row);
    }
  return dist;
}

std::optional<double> hausdorff_distance(const std::vector<uint8_t>& a,
                                         const std::vector<uint8_t>& b,
                                         uint8_t label, const VolumeDims& dims,
                                         const Spacing& spacing) {
  check(a.size() == b.size() && a.size() == dims.voxels(),
        "hausdorff_distance: size mismatch");
  std::vector<uint8_t> ma, mb;
  mask_of(a, label, ma);
  mask_of(b, label, mb);
  const size_t na = count_label(a, label), nb = count_label(b, label);
  if (na == 0 || nb == 0) return std::nullopt;

  const std::vector<double> da = squared_edt(ma, dims, spacing);
  const std::vector<double> db = squared_edt(mb, dims, spacing);
  double worst = 0.0;
  for (size_t i = 0; i < ma.size(); ++i) {
    if (ma[i]) worst = std::max(worst, db[i]);
    if (mb[i]) worst = std::max(worst, da[i]);
  }
  return std::sqrt(worst);
}

std::optional<double> absolute_volume_difference(
    const std::vector<uint8_t>& pred, const std::vector<uint8_t>& ref,
    uint8_t label) {
  check(pred.size() == ref.size(), "absolute_volume_difference: size mismatch");
  const double vp = static_cast<double>(count_label(pred, label));
  const double vr = static_cast<double>(count_label(ref, label));
  if (vr == 0.0) return std::nullopt;
  return std::fabs(vp - vr) / vr;
}

VolumeMetrics evaluate_labels(const std::vector<uint8_t>& pred,
                              const std::vector<uint8_t>& ref,
                              const VolumeDims& dims, const Spacing& spacing) {
  check(pred.size() == ref.size() && pred.size() == dims.voxels(),
        "evaluate_labels: size mismatch");
  VolumeMetrics m;
  double sum = 0.0;
  for (uint8_t c = 1; c <= 3; ++c) {
    ClassMetrics& cm = m.tissue[c - 1];
    cm.dsc = hard_dsc(pred, ref, c);
    cm.hausdorff = hausdorff_distance(pred, ref, c, dims, spacing);
    cm.avd = absolute_volume_difference(pred, ref, c);
    sum += cm.dsc;
  }
  m.mean_dsc = sum / 3.0;
  return m;
}

std::string metrics_csv_header() {
  return "volume_id,dsc_csf,dsc_gm,dsc_wm,hd_csf,hd_gm,hd_wm,"
         "avd_csf,avd_gm,avd_wm,mean_dsc";
}

std::string metrics_csv_row(const std::string& volume_id,
                            const VolumeMetrics& m) {
  std::string row = volume_id;
  for (int i = 0; i < 3; ++i) row += "," + fmt(m.tissue[i].dsc);
  for (int i = 0; i < 3; ++i) row += "," + fmt(m.tissue[i].hausdorff);
  for (int i = 0; i < 3; ++i) row += "," + fmt(m.tissue[i].avd);
  row += "," + fmt(m.mean_dsc);
  return row;
}

}  // namespace ntseg
