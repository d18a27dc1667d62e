#include "ntseg/phantom.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "ntseg/rng.hpp"
#include "ntseg/tensor.hpp"

namespace ntseg {

void PhantomSpec::validate() const {
  check(dims.d > 0 && dims.h > 0 && dims.w > 0,
        "PhantomSpec: dims must be positive");
  check(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0,
        "PhantomSpec: spacing must be positive");
  check(noise_sigma >= 0, "PhantomSpec: noise_sigma must be >= 0");
  for (int a = 0; a < 3; ++a) {
    check(wm_axes[a] > 0, "PhantomSpec: semi-axes must be positive");
    check(wm_axes[a] < gm_axes[a] && gm_axes[a] < csf_axes[a],
          "PhantomSpec: semi-axes must nest strictly, WM < GM < CSF on every "
          "axis");
  }
}

std::pair<Volume, LabelVolume> phantom_generate(const PhantomSpec& spec) {
  spec.validate();
  const size_t D = spec.dims.d, H = spec.dims.h, W = spec.dims.w;

  Volume img;
  img.dims = spec.dims;
  img.spacing = spec.spacing;
  img.data.resize(spec.dims.voxels());
  LabelVolume lab;
  lab.dims = spec.dims;
  lab.spacing = spec.spacing;
  lab.labels.resize(spec.dims.voxels());

  const double cz = (static_cast<double>(D) - 1.0) / 2.0;
  const double cy = (static_cast<double>(H) - 1.0) / 2.0;
  const double cx = (static_cast<double>(W) - 1.0) / 2.0;
  auto inside = [](double dz, double dy, double dx,
                   const std::array<double, 3>& ax) {
    const double nz = dz / ax[0], ny = dy / ax[1], nx = dx / ax[2];
    return nz * nz + ny * ny + nx * nx <= 1.0;
  };
  // 0.5 keeps single-voxel axes meaningful
  auto phase = [](size_t i, size_t n) {
    return n > 1 ? static_cast<double>(i) / (static_cast<double>(n) - 1.0)
                 : 0.5;
  };

  Rng rng(spec.seed);
  size_t i = 0;
  for (size_t z = 0; z < D; ++z)
    for (size_t y = 0; y < H; ++y)
      for (size_t x = 0; x < W; ++x, ++i) {
        const double dz = static_cast<double>(z) - cz;
        const double dy = static_cast<double>(y) - cy;
        const double dx = static_cast<double>(x) - cx;
        uint8_t label = 0;
        if (inside(dz, dy, dx, spec.wm_axes))
          label = 3;
        else if (inside(dz, dy, dx, spec.gm_axes))
          label = 2;
        else if (inside(dz, dy, dx, spec.csf_axes))
          label = 1;
        lab.labels[i] = label;

        double v = spec.class_means[label] + spec.noise_sigma * rng.normal();
        if (spec.bias_amplitude != 0.0) {
          using std::numbers::pi;
          const double bias =
              1.0 + spec.bias_amplitude / 3.0 *
                        (std::cos(pi * phase(z, D)) + std::cos(pi * phase(y, H)) +
                         std::cos(pi * phase(x, W)));
          v *= bias;
        }
        img.data[i] = static_cast<float>(v);
      }
  return {std::move(img), std::move(lab)};
}

}  // namespace ntseg
