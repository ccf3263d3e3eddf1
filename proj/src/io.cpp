#include "srr/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iostream>

namespace srr::io {

namespace {

void put_u32(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32(std::string& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    bool has(size_t n) const { return pos + n <= buf.size(); }
    uint32_t u32(const char* what) {
        if (!has(4)) throw ParseError(std::string("truncated file reading ") + what,
                                      static_cast<long>(pos));
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    float f32(const char* what) {
        uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string bytes(size_t n, const char* what) {
        if (!has(n)) throw ParseError(std::string("truncated file reading ") + what,
                                      static_cast<long>(pos));
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

void write_binary(const std::string& path, const std::string& payload) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InvalidInput("cannot open for writing: " + path);
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!f) throw InvalidInput("write failed: " + path);
}

std::string read_binary(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InvalidInput("cannot open for reading: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return buf;
}

}  // namespace

void write_cube(const std::string& path, const Tensor<float>& cube) {
    check(cube.rank() == 3, "write_cube: rank-3 (bands, H, W) tensor required");
    std::string out;
    out.reserve(16 + static_cast<size_t>(cube.numel()) * 4);
    out += "SPC1";
    put_u32(out, static_cast<uint32_t>(cube.dim(0)));
    put_u32(out, static_cast<uint32_t>(cube.dim(1)));
    put_u32(out, static_cast<uint32_t>(cube.dim(2)));
    for (int64_t i = 0; i < cube.numel(); ++i) put_f32(out, cube[i]);
    write_binary(path, out);
}

Tensor<float> read_cube(const std::string& path) {
    const std::string buf = read_binary(path);
    Reader r{buf};
    if (r.bytes(4, "magic") != "SPC1") throw ParseError("bad magic, expected SPC1", 0);
    const uint32_t b = r.u32("band count");
    const uint32_t h = r.u32("height");
    const uint32_t w = r.u32("width");
    if (b == 0 || h == 0 || w == 0) throw ParseError("zero dimension in header", 4);
    if (b != 31)
        std::cerr << "warning: " << path << " has " << b << " bands (expected 31)\n";
    Tensor<float> cube({static_cast<int>(b), static_cast<int>(h), static_cast<int>(w)});
    for (int64_t i = 0; i < cube.numel(); ++i) cube[i] = r.f32("payload");
    return cube;
}

const Tensor<float>* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : entries)
        if (n == name) return &t;
    return nullptr;
}

void Checkpoint::add(const std::string& name, Tensor<float> t) {
    check(find(name) == nullptr, "checkpoint: duplicate tensor name");
    entries.emplace_back(name, std::move(t));
}

void write_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::vector<std::pair<std::string, const Tensor<float>*>> sorted;
    sorted.reserve(ck.entries.size());
    for (const auto& [n, t] : ck.entries) sorted.emplace_back(n, &t);
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (size_t i = 1; i < sorted.size(); ++i)
        check(sorted[i].first != sorted[i - 1].first, "checkpoint: duplicate tensor name");

    std::string out;
    out += "CKP1";
    put_u32(out, static_cast<uint32_t>(sorted.size()));
    for (const auto& [name, t] : sorted) {
        put_u32(out, static_cast<uint32_t>(name.size()));
        out += name;
        put_u32(out, static_cast<uint32_t>(t->rank()));
        for (int d = 0; d < t->rank(); ++d) put_u32(out, static_cast<uint32_t>(t->dim(d)));
        for (int64_t i = 0; i < t->numel(); ++i) put_f32(out, (*t)[i]);
    }
    out += ck.config_snapshot;
    write_binary(path, out);
}

Checkpoint read_checkpoint(const std::string& path) {
    const std::string buf = read_binary(path);
    Reader r{buf};
    if (r.bytes(4, "magic") != "CKP1") throw ParseError("bad magic, expected CKP1", 0);
    const uint32_t count = r.u32("entry count");
    Checkpoint ck;
    for (uint32_t e = 0; e < count; ++e) {
        const uint32_t name_len = r.u32("name length");
        const std::string name = r.bytes(name_len, "tensor name");
        const uint32_t rank = r.u32("rank");
        if (rank > 4) throw ParseError("tensor rank > 4", static_cast<long>(r.pos - 4));
        std::vector<int> shape;
        for (uint32_t d = 0; d < rank; ++d) {
            const uint32_t dim = r.u32("dimension");
            if (dim == 0) throw ParseError("zero tensor dimension", static_cast<long>(r.pos - 4));
            shape.push_back(static_cast<int>(dim));
        }
        Tensor<float> t(shape);
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = r.f32("tensor payload");
        ck.add(name, std::move(t));
    }
    ck.config_snapshot = buf.substr(r.pos);
    return ck;
}

// ---- PNG ----

namespace {

void put_be32(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>((v >> 24) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>(v & 0xff));
}

uint32_t be32(const unsigned char* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void png_chunk(std::string& out, const char type[4], const std::string& data) {
    put_be32(out, static_cast<uint32_t>(data.size()));
    std::string block(type, 4);
    block += data;
    out += block;
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0, reinterpret_cast<const Bytef*>(block.data()), static_cast<uInt>(block.size())));
    put_be32(out, crc);
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    return pb <= pc ? b : c;
}

}  // namespace

void write_png(const std::string& path, const Tensor<float>& rgb) {
    check(rgb.rank() == 3 && rgb.dim(0) == 3, "write_png: (3, H, W) tensor required");
    const int h = rgb.dim(1), w = rgb.dim(2);
    std::string raw;
    raw.reserve(static_cast<size_t>(h) * (1 + 3 * w));
    for (int y = 0; y < h; ++y) {
        raw.push_back(0);  // filter type none
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                float v = rgb[(static_cast<int64_t>(c) * h + y) * w + x];
                v = std::min(1.0f, std::max(0.0f, v));
                raw.push_back(static_cast<char>(std::lround(v * 255.0f)));
            }
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::string compressed(bound, '\0');
    if (compress2(reinterpret_cast<Bytef*>(compressed.data()), &bound,
                  reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                  Z_BEST_SPEED) != Z_OK)
        throw InvalidInput("png: deflate failed");
    compressed.resize(bound);

    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    put_be32(ihdr, static_cast<uint32_t>(w));
    put_be32(ihdr, static_cast<uint32_t>(h));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // color type RGB
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter
    ihdr.push_back(0);   // no interlace
    png_chunk(out, "IHDR", ihdr);
    png_chunk(out, "IDAT", compressed);
    png_chunk(out, "IEND", "");
    write_binary(path, out);
}

Tensor<float> read_png(const std::string& path) {
    const std::string buf = read_binary(path);
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
    if (buf.size() < 8 || std::memcmp(p, "\x89PNG\r\n\x1a\n", 8) != 0)
        throw ParseError("not a PNG file", 0);

    size_t pos = 8;
    int w = 0, h = 0, bit_depth = 0, color_type = 0;
    std::string idat;
    while (pos + 8 <= buf.size()) {
        const uint32_t len = be32(p + pos);
        if (pos + 12 + len > buf.size())
            throw ParseError("truncated PNG chunk", static_cast<long>(pos));
        const std::string type(buf, pos + 4, 4);
        const unsigned char* data = p + pos + 8;
        if (type == "IHDR") {
            w = static_cast<int>(be32(data));
            h = static_cast<int>(be32(data + 4));
            bit_depth = data[8];
            color_type = data[9];
            if (data[12] != 0) throw ParseError("interlaced PNG unsupported", static_cast<long>(pos));
        } else if (type == "IDAT") {
            idat.append(reinterpret_cast<const char*>(data), len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    if (w <= 0 || h <= 0) throw ParseError("missing IHDR", 8);
    if (bit_depth != 8 || (color_type != 0 && color_type != 2 && color_type != 6))
        throw ParseError("unsupported PNG format (need 8-bit gray/RGB/RGBA)", 8);
    const int nch = color_type == 0 ? 1 : (color_type == 2 ? 3 : 4);

    const size_t raw_size = static_cast<size_t>(h) * (1 + static_cast<size_t>(w) * nch);
    std::string raw(raw_size, '\0');
    uLongf out_len = raw_size;
    if (uncompress(reinterpret_cast<Bytef*>(raw.data()), &out_len,
                   reinterpret_cast<const Bytef*>(idat.data()),
                   static_cast<uLong>(idat.size())) != Z_OK ||
        out_len != raw_size)
        throw ParseError("PNG inflate failed", static_cast<long>(pos));

    // Undo per-row filters.
    auto* rp = reinterpret_cast<unsigned char*>(raw.data());
    const int stride = w * nch;
    for (int y = 0; y < h; ++y) {
        unsigned char* row = rp + static_cast<size_t>(y) * (stride + 1);
        const unsigned char filter = row[0];
        unsigned char* cur = row + 1;
        const unsigned char* up =
            y > 0 ? rp + static_cast<size_t>(y - 1) * (stride + 1) + 1 : nullptr;
        for (int x = 0; x < stride; ++x) {
            const int left = x >= nch ? cur[x - nch] : 0;
            const int above = up ? up[x] : 0;
            const int ul = (up && x >= nch) ? up[x - nch] : 0;
            int v = cur[x];
            switch (filter) {
                case 0: break;
                case 1: v += left; break;
                case 2: v += above; break;
                case 3: v += (left + above) / 2; break;
                case 4: v += paeth(left, above, ul); break;
                default: throw ParseError("bad PNG filter type", static_cast<long>(y));
            }
            cur[x] = static_cast<unsigned char>(v & 0xff);
        }
    }

    Tensor<float> rgb({3, h, w});
    for (int y = 0; y < h; ++y) {
        const unsigned char* cur = rp + static_cast<size_t>(y) * (stride + 1) + 1;
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                const int src = nch == 1 ? 0 : c;
                rgb[(static_cast<int64_t>(c) * h + y) * w + x] =
                    static_cast<float>(cur[x * nch + src]) / 255.0f;
            }
    }
    return rgb;
}

void write_text_file(const std::string& path, const std::string& text) {
    write_binary(path, text);
}

std::string read_text_file(const std::string& path) { return read_binary(path); }

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
    std::string out;
    for (size_t i = 0; i < header.size(); ++i) {
        if (i) out += ',';
        out += header[i];
    }
    out += '\n';
    for (const auto& row : rows) {
        for (size_t i = 0; i < row.size(); ++i) {
            if (i) out += ',';
            out += row[i];
        }
        out += '\n';
    }
    write_binary(path, out);
}

}  // namespace srr::io
