#pragma once

#include <string>

#include "effowt/nn.hpp"

namespace effowt {

/// Writes <base>.bin (raw little-endian 64-bit floats, parameters in name
/// order) and <base>.json (name -> shape, offset, numel). Atomic.
void save_checkpoint(const ParamRegistry& reg, const std::string& base);

/// Loads values into an existing registry. Every parameter must be present
/// with a matching shape; mismatches name the parameter and both shapes.
void load_checkpoint(ParamRegistry& reg, const std::string& base);

}  // namespace effowt
