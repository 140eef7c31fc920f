#ifndef BLOCKCACHE_IO_HPP
#define BLOCKCACHE_IO_HPP

#include <fstream>

#include "blockcache/tensor.hpp"

namespace bc {

// P6 PPM from a [3,H,W] or [1,3,H,W] image in [-1,1].
inline void write_ppm(const std::string& path, const Tensor& img) {
    const Tensor* t = &img;
    Tensor squeezed;
    if (img.rank() == 4) {
        check(img.dim(0) == 1, "write_ppm: batch must be 1");
        squeezed = img.reshaped({img.dim(1), img.dim(2), img.dim(3)});
        t = &squeezed;
    }
    check(t->rank() == 3 && t->dim(0) == 3, "write_ppm: expected [3,H,W], got " + img.shape_str());
    int64_t H = t->dim(1), W = t->dim(2);
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "write_ppm: cannot open " + path);
    f << "P6\n" << W << " " << H << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(W * 3));
    for (int64_t y = 0; y < H; ++y) {
        for (int64_t x = 0; x < W; ++x)
            for (int64_t c = 0; c < 3; ++c) {
                float v = (t->at({c, y, x}) + 1.0f) * 127.5f;
                row[static_cast<size_t>(x * 3 + c)] =
                    static_cast<unsigned char>(std::min(255.0f, std::max(0.0f, v)));
            }
        f.write(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    check(f.good(), "write_ppm: write failed " + path);
}

}  // namespace bc

#endif
