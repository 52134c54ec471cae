#pragma once

#include <iosfwd>
#include <string>

#include "gmcn/types.hpp"

namespace gmcn::io {

// Versioned mixture container: "GMCN" magic, u32 version, u32 k, u32 B,
// u32 F, u32 N, then little-endian f32 parameters per component in
// (weight, position, packed covariance) order.
void write_mixture(std::ostream& os, const MixtureBatch& m);
void write_mixture_file(const std::string& path, const MixtureBatch& m);
MixtureBatch read_mixture(std::istream& is);
MixtureBatch read_mixture_file(const std::string& path);

// Human-readable structured-text export for debugging.
void write_mixture_text(std::ostream& os, const MixtureBatch& m);

}  // namespace gmcn::io
