#pragma once

#include <cmath>

#include "segface/common.hpp"
#include "segface/tensor.hpp"

namespace segface {

// Fixed 2D sinusoidal positional encoding for the flattened face-token grid.
// Channels [0, d/2) encode the row index, [d/2, d) the column index; each
// half uses the standard sin/cos frequency ladder with base 10000. Row-major
// position order: p = r * w + c.
template <typename T = float>
Tensor<T> make_face_positional_encoding(int64_t h, int64_t w, int64_t d) {
    if (d % 4 != 0) throw ConfigError(cat("positional encoding dim ", d, " must be divisible by 4"));
    Tensor<T> pe({h * w, d});
    int64_t half = d / 2;
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < w; ++c) {
            T* row = pe.data() + (r * w + c) * d;
            for (int64_t i = 0; i < half / 2; ++i) {
                double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(half));
                row[2 * i] = static_cast<T>(std::sin(static_cast<double>(r) * freq));
                row[2 * i + 1] = static_cast<T>(std::cos(static_cast<double>(r) * freq));
                row[half + 2 * i] = static_cast<T>(std::sin(static_cast<double>(c) * freq));
                row[half + 2 * i + 1] = static_cast<T>(std::cos(static_cast<double>(c) * freq));
            }
        }
    }
    return pe;
}

}  // namespace segface
