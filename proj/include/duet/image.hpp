#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "duet/common.hpp"
#include "duet/tensor.hpp"

namespace duet {

// 8-bit image, row-major, interleaved channels (1 = gray, 3 = RGB).
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<uint8_t> pix;

    static Image make(int w, int h, int c, uint8_t fill = 0) {
        Image im;
        im.width = w;
        im.height = h;
        im.channels = c;
        im.pix.assign(size_t(w) * size_t(h) * size_t(c), fill);
        return im;
    }

    uint8_t* at(int x, int y) { return pix.data() + (size_t(y) * width + x) * channels; }
    const uint8_t* at(int x, int y) const {
        return pix.data() + (size_t(y) * width + x) * channels;
    }
};

namespace pngio {

inline uint32_t crc32(const uint8_t* data, size_t len, uint32_t crc = 0) {
    static uint32_t table[256];
    static bool init = false;
    if (!init) {
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            table[i] = c;
        }
        init = true;
    }
    crc ^= 0xffffffffu;
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xff] ^ (crc >> 8);
    return crc ^ 0xffffffffu;
}

inline uint32_t adler32(const uint8_t* data, size_t len) {
    uint32_t a = 1, b = 0;
    for (size_t i = 0; i < len; ++i) {
        a = (a + data[i]) % 65521;
        b = (b + a) % 65521;
    }
    return (b << 16) | a;
}

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

inline void put_chunk(std::vector<uint8_t>& out, const char type[4],
                      const std::vector<uint8_t>& payload) {
    put_u32(out, uint32_t(payload.size()));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    put_u32(out, crc32(out.data() + start, out.size() - start));
}

} // namespace pngio

// Minimal PNG writer: 8-bit gray or RGB, filter 0 rows, zlib stream made of
// stored (uncompressed) deflate blocks. Any PNG tool can read the output.
inline std::vector<uint8_t> encode_png(const Image& im) {
    DUET_CHECK(im.channels == 1 || im.channels == 3, "png: unsupported channel count ",
               im.channels);
    std::vector<uint8_t> raw;
    raw.reserve(size_t(im.height) * (size_t(im.width) * im.channels + 1));
    for (int y = 0; y < im.height; ++y) {
        raw.push_back(0); // filter type 0
        const uint8_t* row = im.pix.data() + size_t(y) * im.width * im.channels;
        raw.insert(raw.end(), row, row + size_t(im.width) * im.channels);
    }

    std::vector<uint8_t> z;
    z.push_back(0x78);
    z.push_back(0x01);
    size_t off = 0;
    while (off < raw.size()) {
        const size_t n = std::min<size_t>(65535, raw.size() - off);
        const bool last = off + n == raw.size();
        z.push_back(last ? 1 : 0);
        z.push_back(uint8_t(n & 0xff));
        z.push_back(uint8_t(n >> 8));
        z.push_back(uint8_t(~n & 0xff));
        z.push_back(uint8_t((~n >> 8) & 0xff));
        z.insert(z.end(), raw.begin() + off, raw.begin() + off + n);
        off += n;
    }
    pngio::put_u32(z, pngio::adler32(raw.data(), raw.size()));

    std::vector<uint8_t> out{0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<uint8_t> ihdr;
    pngio::put_u32(ihdr, uint32_t(im.width));
    pngio::put_u32(ihdr, uint32_t(im.height));
    ihdr.push_back(8);                              // bit depth
    ihdr.push_back(im.channels == 3 ? 2 : 0);       // color type
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    pngio::put_chunk(out, "IHDR", ihdr);
    pngio::put_chunk(out, "IDAT", z);
    pngio::put_chunk(out, "IEND", {});
    return out;
}

inline void write_png(const std::string& path, const Image& im) {
    const auto bytes = encode_png(im);
    std::ofstream out(path, std::ios::binary);
    DUET_CHECK(out.good(), "png: cannot write ", path);
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    DUET_CHECK(out.good(), "png: short write to ", path);
}

// Reader for the subset this library writes (stored deflate blocks, filter 0
// or basic filtered rows, 8-bit gray/RGB).
inline Image decode_png(const std::vector<uint8_t>& bytes) {
    DUET_CHECK(bytes.size() > 8 && bytes[1] == 'P' && bytes[2] == 'N' && bytes[3] == 'G',
               "png: bad signature");
    size_t off = 8;
    Image im;
    std::vector<uint8_t> idat;
    while (off + 8 <= bytes.size()) {
        const uint32_t len = (uint32_t(bytes[off]) << 24) | (uint32_t(bytes[off + 1]) << 16) |
                             (uint32_t(bytes[off + 2]) << 8) | uint32_t(bytes[off + 3]);
        const std::string type(bytes.begin() + long(off) + 4, bytes.begin() + long(off) + 8);
        DUET_CHECK(off + 12 + len <= bytes.size(), "png: truncated chunk ", type);
        const uint8_t* payload = bytes.data() + off + 8;
        if (type == "IHDR") {
            im.width = int((uint32_t(payload[0]) << 24) | (uint32_t(payload[1]) << 16) |
                           (uint32_t(payload[2]) << 8) | payload[3]);
            im.height = int((uint32_t(payload[4]) << 24) | (uint32_t(payload[5]) << 16) |
                            (uint32_t(payload[6]) << 8) | payload[7]);
            DUET_CHECK(payload[8] == 8, "png: only 8-bit depth supported");
            DUET_CHECK(payload[9] == 0 || payload[9] == 2, "png: unsupported color type ",
                       int(payload[9]));
            im.channels = payload[9] == 2 ? 3 : 1;
            DUET_CHECK(payload[12] == 0, "png: interlaced images unsupported");
        } else if (type == "IDAT") {
            idat.insert(idat.end(), payload, payload + len);
        } else if (type == "IEND") {
            break;
        }
        off += 12 + len;
    }
    DUET_CHECK(im.width > 0 && im.height > 0, "png: missing IHDR");
    DUET_CHECK(idat.size() > 6, "png: missing image data");

    // zlib stream with stored blocks only
    std::vector<uint8_t> raw;
    size_t p = 2;
    for (;;) {
        DUET_CHECK(p < idat.size(), "png: truncated deflate stream");
        const uint8_t header = idat[p];
        DUET_CHECK((header & 0x06) == 0, "png: compressed deflate blocks unsupported");
        const bool final_block = header & 1;
        DUET_CHECK(p + 5 <= idat.size(), "png: truncated stored block");
        const uint32_t n = uint32_t(idat[p + 1]) | (uint32_t(idat[p + 2]) << 8);
        p += 5;
        DUET_CHECK(p + n <= idat.size(), "png: stored block overruns stream");
        raw.insert(raw.end(), idat.begin() + long(p), idat.begin() + long(p + n));
        p += n;
        if (final_block) break;
    }

    const size_t stride = size_t(im.width) * im.channels;
    DUET_CHECK(raw.size() == (stride + 1) * size_t(im.height), "png: payload size mismatch");
    im.pix.resize(stride * size_t(im.height));
    const int bpp = im.channels;
    for (int y = 0; y < im.height; ++y) {
        const uint8_t filter = raw[size_t(y) * (stride + 1)];
        const uint8_t* src = raw.data() + size_t(y) * (stride + 1) + 1;
        uint8_t* dst = im.pix.data() + size_t(y) * stride;
        const uint8_t* up = y > 0 ? dst - stride : nullptr;
        switch (filter) {
            case 0:
                std::memcpy(dst, src, stride);
                break;
            case 1:
                for (size_t i = 0; i < stride; ++i)
                    dst[i] = uint8_t(src[i] + (i >= size_t(bpp) ? dst[i - bpp] : 0));
                break;
            case 2:
                for (size_t i = 0; i < stride; ++i) dst[i] = uint8_t(src[i] + (up ? up[i] : 0));
                break;
            default:
                DUET_CHECK(false, "png: filter ", int(filter), " unsupported");
        }
    }
    return im;
}

inline Image read_png(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    DUET_CHECK(in.good(), "png: cannot read ", path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return decode_png(bytes);
}

// ---------------------------------------------------------------------------
// raw float32 maps (depth labels): u32 height, u32 width, then row-major data
// ---------------------------------------------------------------------------

inline void write_float_map(const std::string& path, int height, int width,
                            const std::vector<float>& data) {
    DUET_CHECK(int64_t(data.size()) == int64_t(height) * width, "float map: ", data.size(),
               " values for ", height, "x", width);
    std::ofstream out(path, std::ios::binary);
    DUET_CHECK(out.good(), "float map: cannot write ", path);
    const uint32_t h = uint32_t(height), w = uint32_t(width);
    out.write(reinterpret_cast<const char*>(&h), 4);
    out.write(reinterpret_cast<const char*>(&w), 4);
    out.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size() * 4));
    DUET_CHECK(out.good(), "float map: short write to ", path);
}

inline std::vector<float> read_float_map(const std::string& path, int* height, int* width) {
    std::ifstream in(path, std::ios::binary);
    DUET_CHECK(in.good(), "float map: cannot read ", path);
    uint32_t h = 0, w = 0;
    in.read(reinterpret_cast<char*>(&h), 4);
    in.read(reinterpret_cast<char*>(&w), 4);
    DUET_CHECK(in.good(), "float map: truncated header in ", path);
    std::vector<float> data(size_t(h) * w);
    in.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size() * 4));
    DUET_CHECK(in.good(), "float map: truncated data in ", path);
    if (height) *height = int(h);
    if (width) *width = int(w);
    return data;
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

// Bilinear sample of channel c at continuous (x, y), clamped at the borders.
inline double sample_bilinear(const Image& im, double x, double y, int c) {
    const double fx = std::min(std::max(x, 0.0), double(im.width - 1));
    const double fy = std::min(std::max(y, 0.0), double(im.height - 1));
    const int x0 = int(fx), y0 = int(fy);
    const int x1 = std::min(x0 + 1, im.width - 1), y1 = std::min(y0 + 1, im.height - 1);
    const double wx = fx - x0, wy = fy - y0;
    const double v00 = im.at(x0, y0)[c], v01 = im.at(x1, y0)[c];
    const double v10 = im.at(x0, y1)[c], v11 = im.at(x1, y1)[c];
    return (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
}

// Render a square source window to out_side x out_side CHW floats in [0, 1].
template <typename T>
void render_crop(const Image& im, double src_x, double src_y, double src_size, bool hflip,
                 int out_side, T* dst) {
    DUET_CHECK(im.channels == 3, "render_crop: expected RGB image");
    const double step = src_size / out_side;
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < out_side; ++y) {
            const double sy = src_y + (y + 0.5) * step - 0.5;
            for (int x = 0; x < out_side; ++x) {
                const int ox = hflip ? out_side - 1 - x : x;
                const double sx = src_x + (x + 0.5) * step - 0.5;
                dst[(size_t(c) * out_side + y) * out_side + ox] =
                    T(sample_bilinear(im, sx, sy, c) / 255.0);
            }
        }
    }
}

} // namespace duet
