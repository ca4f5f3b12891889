#pragma once

#include <algorithm>
#include <cmath>
#include <span>

#include "loctok/tensor.hpp"

namespace loctok {

// Bilinear read of `grid` at a continuous point. Cell (r, c) has its center
// at (r + 0.5, c + 0.5); points outside the outermost centers read the
// border value. Accumulates weight * value into `out` (length grid.dim).
inline void accumulate_bilinear(const TokenGrid& grid, double y, double x, double weight,
                                std::span<double> out) {
  const double py = std::clamp(y - 0.5, 0.0, static_cast<double>(grid.rows - 1));
  const double px = std::clamp(x - 0.5, 0.0, static_cast<double>(grid.cols - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(py));
  const auto x0 = static_cast<std::size_t>(std::floor(px));
  const std::size_t y1 = std::min(y0 + 1, grid.rows - 1);
  const std::size_t x1 = std::min(x0 + 1, grid.cols - 1);
  const double ly = py - static_cast<double>(y0);
  const double lx = px - static_cast<double>(x0);
  const double w00 = (1.0 - ly) * (1.0 - lx) * weight;
  const double w01 = (1.0 - ly) * lx * weight;
  const double w10 = ly * (1.0 - lx) * weight;
  const double w11 = ly * lx * weight;
  auto t00 = grid.token(y0, x0);
  auto t01 = grid.token(y0, x1);
  auto t10 = grid.token(y1, x0);
  auto t11 = grid.token(y1, x1);
  for (std::size_t k = 0; k < grid.dim; ++k) {
    out[k] += w00 * t00[k] + w01 * t01[k] + w10 * t10[k] + w11 * t11[k];
  }
}

// Resamples a grid to out_rows x out_cols; output cell centers map back onto
// the input frame proportionally.
inline TokenGrid resample_bilinear(const TokenGrid& in, std::size_t out_rows, std::size_t out_cols) {
  TokenGrid out(out_rows, out_cols, in.dim);
  const double sy = static_cast<double>(in.rows) / static_cast<double>(out_rows);
  const double sx = static_cast<double>(in.cols) / static_cast<double>(out_cols);
  for (std::size_t r = 0; r < out_rows; ++r) {
    for (std::size_t c = 0; c < out_cols; ++c) {
      accumulate_bilinear(in, (static_cast<double>(r) + 0.5) * sy,
                          (static_cast<double>(c) + 0.5) * sx, 1.0, out.token(r, c));
    }
  }
  return out;
}

}  // namespace loctok
