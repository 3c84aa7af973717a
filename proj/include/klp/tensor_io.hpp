#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "klp/tensor.hpp"

namespace klp {

// One tensor record: magic "KLPT", uint32 LE rank, uint32 LE extents,
// raw little-endian float64 payload.
void write_tensor_record(std::ostream& os, const Tensor& t);
Tensor read_tensor_record(std::istream& is);

/// Concatenated records at `path`; a JSON manifest at `path + ".manifest.json"`
/// maps entry names to byte offsets. Entry order is preserved.
void save_archive(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& entries);
std::map<std::string, Tensor> load_archive(const std::string& path);

/// Write-to-temp-then-rename so readers never observe partial files.
void atomic_write_file(const std::string& path, const std::string& contents);

} // namespace klp
