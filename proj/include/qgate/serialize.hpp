#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "qgate/tensor.hpp"

namespace qgate::io {

// Tensor blob: u64 rank, rank × u64 dims, then row-major f32 values, all
// little-endian.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);

void write_string(std::ostream& os, const std::string& s);  // u64 length + bytes
std::string read_string(std::istream& is);

std::string read_file(const std::string& path);
// Writes via a temporary sibling then renames, so readers never see a partial file.
void write_file_atomic(const std::string& path, const std::string& bytes);

}  // namespace qgate::io
