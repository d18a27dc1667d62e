#pragma once

#include <map>
#include <optional>
#include <string>

#include "ntseg/optim.hpp"
#include "ntseg/unet.hpp"

// Checkpoint file: 8-byte magic "NTCKPT01", one JSON header line (model
// config, ordered tensor names with shapes, optional Adam step counter,
// caller-supplied extra strings), then the tensors' little-endian f32
// payloads concatenated in header order. Adam moments, when present, ride
// along as "adam.m.<name>" / "adam.v.<name>" tensors.

namespace ntseg {

struct Checkpoint {
  UNetParams<float> model;
  std::optional<AdamState<float>> adam;
  std::map<std::string, std::string> extra;
};

void save_checkpoint(const UNetParams<float>& model,
                     const AdamState<float>* adam, const std::string& path,
                     const std::map<std::string, std::string>& extra = {});

Checkpoint load_checkpoint(const std::string& path);

// Loads and validates against the canonical layer plan of `cfg`; a name-set
// or shape mismatch is rejected listing the missing/extra names.
UNetParams<float> load_checkpoint_for(const UNetConfig& cfg,
                                      const std::string& path);

}  // namespace ntseg
