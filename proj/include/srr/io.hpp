#pragma once

#include <string>
#include <utility>
#include <vector>

#include "srr/tensor.hpp"

namespace srr::io {

// SPC1 spectral cube container: magic "SPC1", three u32 LE (bands, height,
// width), then bands*height*width f32 LE in band-major planar order.
void write_cube(const std::string& path, const Tensor<float>& cube);
Tensor<float> read_cube(const std::string& path);

// CKP1 named-tensor container: magic "CKP1", u32 entry count, then per entry
// u32 name length + UTF-8 name, u32 rank, u32 dims, f32 payload; the rest of
// the file is a UTF-8 config snapshot. Entries are name-sorted on write so a
// save/load/save round trip is byte-identical.
struct Checkpoint {
    std::vector<std::pair<std::string, Tensor<float>>> entries;
    std::string config_snapshot;

    const Tensor<float>* find(const std::string& name) const;
    void add(const std::string& name, Tensor<float> t);
};
void write_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::string& path);

// 8-bit PNG, written as color type 2 (RGB). The reader accepts 8-bit
// grayscale, RGB, and RGBA, non-interlaced. Values map to [0, 1] floats in a
// (3, H, W) tensor.
void write_png(const std::string& path, const Tensor<float>& rgb);
Tensor<float> read_png(const std::string& path);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

// CSV with a header row; every cell preformatted by the caller.
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

}  // namespace srr::io
