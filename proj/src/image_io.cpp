#include "gridnet/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace gridnet {

namespace {

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open " + path + " for writing");
    }
    return out;
}

// Reads the next header token, skipping whitespace and '#' comments.
int header_int(std::istream& in, const std::string& path) {
    while (true) {
        const int ch = in.peek();
        if (ch == '#') {
            std::string line;
            std::getline(in, line);
        } else if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') {
            in.get();
        } else {
            break;
        }
    }
    int v = 0;
    if (!(in >> v) || v < 0) {
        throw std::runtime_error(path + ": malformed netpbm header");
    }
    return v;
}

struct Netpbm {
    std::string magic;
    int width = 0;
    int height = 0;
    int maxval = 0;
    std::vector<std::uint16_t> samples;
};

Netpbm read_netpbm(const std::string& path, int channels, char binary, char ascii) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open " + path);
    }
    Netpbm img;
    char m[2] = {};
    in.read(m, 2);
    if (!in || m[0] != 'P' || (m[1] != binary && m[1] != ascii)) {
        throw std::runtime_error(path + ": expected P" + std::string(1, binary) + " or P" + std::string(1, ascii));
    }
    img.magic = std::string(m, 2);
    img.width = header_int(in, path);
    img.height = header_int(in, path);
    img.maxval = header_int(in, path);
    if (img.width < 1 || img.height < 1 || img.maxval < 1 || img.maxval > 65535) {
        throw std::runtime_error(path + ": unsupported netpbm dimensions or maxval");
    }
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height * channels;
    img.samples.resize(n);
    if (m[1] == ascii) {
        for (std::size_t k = 0; k < n; ++k) {
            img.samples[k] = static_cast<std::uint16_t>(header_int(in, path));
        }
    } else {
        in.get();  // single whitespace after maxval
        const bool wide = img.maxval > 255;
        std::vector<unsigned char> raw(n * (wide ? 2 : 1));
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
        if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
            throw std::runtime_error(path + ": truncated raster");
        }
        for (std::size_t k = 0; k < n; ++k) {
            img.samples[k] = wide ? static_cast<std::uint16_t>(raw[2 * k] << 8 | raw[2 * k + 1]) : raw[k];
        }
    }
    for (std::uint16_t s : img.samples) {
        if (s > img.maxval) {
            throw std::runtime_error(path + ": sample above maxval");
        }
    }
    return img;
}

}  // namespace

void write_ppm(const std::string& path, const RgbImage& image) {
    if (image.rgb.size() != static_cast<std::size_t>(image.width) * image.height * 3) {
        throw std::invalid_argument("write_ppm: raster size does not match dimensions");
    }
    std::ofstream out = open_out(path);
    out << "P6\n" << image.width << " " << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
    if (!out) {
        throw std::runtime_error("write failed: " + path);
    }
}

void write_pgm(const std::string& path, const GrayImage& image) {
    if (image.values.size() != static_cast<std::size_t>(image.width) * image.height) {
        throw std::invalid_argument("write_pgm: raster size does not match dimensions");
    }
    std::ofstream out = open_out(path);
    out << "P5\n" << image.width << " " << image.height << "\n" << image.maxval << "\n";
    std::vector<unsigned char> raw;
    raw.reserve(image.values.size() * 2);
    for (std::uint16_t v : image.values) {
        if (image.maxval > 255) {
            raw.push_back(static_cast<unsigned char>(v >> 8));
        }
        raw.push_back(static_cast<unsigned char>(v & 0xff));
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) {
        throw std::runtime_error("write failed: " + path);
    }
}

RgbImage read_ppm(const std::string& path) {
    const Netpbm img = read_netpbm(path, 3, '6', '3');
    RgbImage out{img.width, img.height, std::vector<std::uint8_t>(img.samples.size())};
    for (std::size_t k = 0; k < img.samples.size(); ++k) {
        out.rgb[k] = static_cast<std::uint8_t>(std::lround(img.samples[k] * 255.0 / img.maxval));
    }
    return out;
}

GrayImage read_pgm(const std::string& path) {
    Netpbm img = read_netpbm(path, 1, '5', '2');
    return GrayImage{img.width, img.height, img.maxval, std::move(img.samples)};
}

RgbImage to_rgb8(const std::vector<float>& planar, int width, int height) {
    const std::size_t plane = static_cast<std::size_t>(width) * height;
    if (planar.size() != 3 * plane) {
        throw std::invalid_argument("to_rgb8: expected 3 planes");
    }
    RgbImage out{width, height, std::vector<std::uint8_t>(3 * plane)};
    for (std::size_t p = 0; p < plane; ++p) {
        for (int c = 0; c < 3; ++c) {
            const float v = std::clamp(planar[c * plane + p], 0.0f, 1.0f);
            out.rgb[3 * p + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
        }
    }
    return out;
}

std::vector<float> to_planar(const RgbImage& image) {
    const std::size_t plane = static_cast<std::size_t>(image.width) * image.height;
    std::vector<float> out(3 * plane);
    for (std::size_t p = 0; p < plane; ++p) {
        for (int c = 0; c < 3; ++c) {
            out[c * plane + p] = image.rgb[3 * p + c] / 255.0f;
        }
    }
    return out;
}

GrayImage to_gray(const std::vector<int>& values, int width, int height) {
    GrayImage out{width, height, 255, std::vector<std::uint16_t>(values.size())};
    for (std::size_t k = 0; k < values.size(); ++k) {
        if (values[k] < 0 || values[k] > 65535) {
            throw std::invalid_argument("to_gray: value " + std::to_string(values[k]) + " outside [0,65535]");
        }
        out.values[k] = static_cast<std::uint16_t>(values[k]);
        if (values[k] > 255) {
            out.maxval = 65535;
        }
    }
    return out;
}

}  // namespace gridnet
