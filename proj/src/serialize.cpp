#include "gmcn/serialize.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <ostream>

namespace gmcn::io {

namespace {

constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw io_error("mixture file truncated");
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

void put_f32(std::ostream& os, float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    put_u32(os, u);
}

float get_f32(std::istream& is) {
    const uint32_t u = get_u32(is);
    float v;
    std::memcpy(&v, &u, 4);
    return v;
}

}  // namespace

void write_mixture(std::ostream& os, const MixtureBatch& m) {
    os.write("GMCN", 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<uint32_t>(m.dims));
    put_u32(os, static_cast<uint32_t>(m.batch));
    put_u32(os, static_cast<uint32_t>(m.channels));
    put_u32(os, static_cast<uint32_t>(m.comps));
    for (const double v : m.data) put_f32(os, static_cast<float>(v));
    if (!os) throw io_error("mixture write failed");
}

void write_mixture_file(const std::string& path, const MixtureBatch& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open for writing: " + path);
    write_mixture(os, m);
}

MixtureBatch read_mixture(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "GMCN", 4) != 0)
        throw io_error("not a GMCN mixture file");
    const uint32_t version = get_u32(is);
    if (version != kVersion) throw io_error("unsupported mixture format version");
    const uint32_t k = get_u32(is);
    if (k != 2 && k != 3) throw io_error("mixture dims must be 2 or 3");
    const uint32_t b = get_u32(is), f = get_u32(is), n = get_u32(is);
    MixtureBatch m(static_cast<int>(k), static_cast<int>(b), static_cast<int>(f),
                   static_cast<int>(n));
    for (double& v : m.data) v = static_cast<double>(get_f32(is));
    return m;
}

MixtureBatch read_mixture_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open: " + path);
    return read_mixture(is);
}

void write_mixture_text(std::ostream& os, const MixtureBatch& m) {
    os << "gmcn mixture version 1\n"
       << "dims " << m.dims << " batch " << m.batch << " channels " << m.channels
       << " components " << m.comps << "\n";
    os << std::setprecision(9);
    for (int b = 0; b < m.batch; ++b) {
        for (int f = 0; f < m.channels; ++f) {
            os << "channel " << b << " " << f << "\n";
            ConstGaussSpan s = m.channel(b, f);
            for (int i = 0; i < s.n; ++i) {
                os << "  w " << s.weight(i) << " pos";
                for (int d = 0; d < m.dims; ++d) os << " " << s.pos(i)[d];
                os << " cov";
                for (int d = 0; d < la::packed_size(m.dims); ++d) os << " " << s.cov(i)[d];
                os << "\n";
            }
        }
    }
}

}  // namespace gmcn::io
