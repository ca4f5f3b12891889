#pragma once

// Toy image encoder, feature pyramid construction, 2x2 token merge and the
// token projector.
//
// The toy encoder only preserves the shape contract of a ViT backbone:
// patchify, embed, then `depth` residual mixing layers. Weights are drawn
// from Rng(derive_seed(cfg.seed, "toy_encode")) in this order:
//   patch embedding W (dim x patch*patch*channels, row-major), then bias (dim),
//   then for each layer W (dim x dim) and bias (dim).
// Every weight is uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)).
//
// Layer l maps token x to x + tanh(W_l * m + b_l), where m averages x with
// the mean of its 4-connected neighbours.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "loctok/bilinear.hpp"
#include "loctok/error.hpp"
#include "loctok/rng.hpp"
#include "loctok/tensor.hpp"
#include "loctok/testing/hooks.hpp"

namespace loctok {

struct EncoderConfig {
  std::size_t patch_size = 14;
  std::size_t depth = 6;
  std::size_t dim = 32;
  std::uint64_t seed = 0;
};

struct PyramidLevel {
  double scale = 1.0;
  TokenGrid grid;
};

struct FeaturePyramid {
  std::vector<PyramidLevel> levels;
};

inline constexpr std::size_t kDefaultImageSize = 448;
inline constexpr std::size_t kProposerLayers = 4;
inline constexpr std::size_t kEncoderLayers = 3;
inline const std::vector<double> kProposerScales = {2.0, 1.0, 0.5, 0.25};
inline const std::vector<double> kEncoderScales = {1.0, 0.5, 0.25};

namespace detail {

struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> w;  // out x in
  std::vector<double> b;  // out

  static Dense seeded(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true) {
    Dense d{in, out, std::vector<double>(in * out), std::vector<double>(out, 0.0)};
    const double a = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& v : d.w) v = rng.uniform(-a, a);
    if (with_bias) {
      for (double& v : d.b) v = rng.uniform(-a, a);
    }
    return d;
  }

  static Dense identity(std::size_t n) {
    Dense d{n, n, std::vector<double>(n * n, 0.0), std::vector<double>(n, 0.0)};
    for (std::size_t i = 0; i < n; ++i) d.w[i * n + i] = 1.0;
    return d;
  }

  void apply(std::span<const double> x, std::span<double> y) const {
    for (std::size_t o = 0; o < out; ++o) {
      const double* row = w.data() + o * in;
      double acc = b[o];
      for (std::size_t i = 0; i < in; ++i) acc += row[i] * x[i];
      y[o] = acc;
    }
  }
};

}  // namespace detail

inline std::vector<TokenGrid> toy_encode(const ImageArray& image, const EncoderConfig& cfg) {
  if (cfg.patch_size == 0 || image.height % cfg.patch_size != 0 ||
      image.width % cfg.patch_size != 0 || image.height == 0 || image.width == 0) {
    throw Error(Errc::patch_mismatch, "patch mismatch: image " + std::to_string(image.height) +
                                          "x" + std::to_string(image.width) + " vs patch " +
                                          std::to_string(cfg.patch_size));
  }
  if (cfg.depth < kProposerLayers) {
    throw Error(Errc::invalid_argument, "encoder depth must be at least 4");
  }
  if (cfg.dim == 0) throw Error(Errc::invalid_argument, "encoder dim must be positive");

  const std::size_t p = cfg.patch_size;
  const std::size_t rows = image.height / p;
  const std::size_t cols = image.width / p;
  const std::size_t fan_in = p * p * image.channels;

  Rng rng(derive_seed(cfg.seed, "toy_encode"));
  const auto embed = detail::Dense::seeded(fan_in, cfg.dim, rng);
  std::vector<detail::Dense> layers;
  layers.reserve(cfg.depth);
  for (std::size_t l = 0; l < cfg.depth; ++l) layers.push_back(detail::Dense::seeded(cfg.dim, cfg.dim, rng));

  TokenGrid x(rows, cols, cfg.dim);
  std::vector<double> patch(fan_in);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::size_t k = 0;
      for (std::size_t dy = 0; dy < p; ++dy) {
        for (std::size_t dx = 0; dx < p; ++dx) {
          for (std::size_t ch = 0; ch < image.channels; ++ch) {
            patch[k++] = image.at(r * p + dy, c * p + dx, ch);
          }
        }
      }
      embed.apply(patch, x.token(r, c));
    }
  }

  std::vector<TokenGrid> outputs;
  outputs.reserve(cfg.depth);
  std::vector<double> mixed(cfg.dim);
  std::vector<double> h(cfg.dim);
  for (const auto& layer : layers) {
    TokenGrid y = x;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        std::fill(mixed.begin(), mixed.end(), 0.0);
        std::size_t n = 0;
        auto add = [&](std::size_t rr, std::size_t cc) {
          auto t = x.token(rr, cc);
          for (std::size_t k = 0; k < cfg.dim; ++k) mixed[k] += t[k];
          ++n;
        };
        if (r > 0) add(r - 1, c);
        if (r + 1 < rows) add(r + 1, c);
        if (c > 0) add(r, c - 1);
        if (c + 1 < cols) add(r, c + 1);
        auto self = x.token(r, c);
        for (std::size_t k = 0; k < cfg.dim; ++k) {
          const double nb = n > 0 ? mixed[k] / static_cast<double>(n) : self[k];
          mixed[k] = 0.5 * (self[k] + nb);
        }
        layer.apply(mixed, h);
        auto out = y.token(r, c);
        for (std::size_t k = 0; k < cfg.dim; ++k) out[k] = self[k] + std::tanh(h[k]);
      }
    }
    outputs.push_back(y);
    x = std::move(y);
  }
  return outputs;
}

// The last `k` grids, oldest first.
inline std::vector<TokenGrid> last_layers(std::span<const TokenGrid> layers, std::size_t k) {
  if (layers.size() < k) throw Error(Errc::invalid_argument, "not enough encoder layers");
  return {layers.end() - static_cast<std::ptrdiff_t>(k), layers.end()};
}

// Rescales grid i by scales[i]. Output rows = round(rows * scale), at least 1.
inline FeaturePyramid build_pyramid(std::span<const TokenGrid> grids, std::span<const double> scales) {
  if (grids.size() != scales.size()) {
    throw Error(Errc::invalid_argument, "pyramid needs one scale per grid");
  }
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (!(scales[i] > 0.0) || !std::isfinite(scales[i])) {
      throw Error(Errc::invalid_argument, "pyramid scale must be positive");
    }
    if (i > 0 && !(scales[i] < scales[i - 1])) {
      throw Error(Errc::invalid_argument, "pyramid scales must be strictly decreasing");
    }
  }
  FeaturePyramid pyr;
  for (std::size_t i = 0; i < grids.size(); ++i) {
    const auto& g = grids[i];
    auto target = [&](std::size_t n) {
      return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(n) * scales[i])));
    };
    const std::size_t r = target(g.rows);
    const std::size_t c = target(g.cols);
    pyr.levels.push_back({scales[i], (r == g.rows && c == g.cols) ? g : resample_bilinear(g, r, c)});
  }
  return pyr;
}

// Concatenates each 2x2 block into one token, block order TL, TR, BL, BR.
inline TokenGrid merge_2x2(const TokenGrid& grid) {
  if (grid.rows % 2 != 0 || grid.cols % 2 != 0) {
    throw Error(Errc::grid_not_mergeable, "grid not mergeable: " + std::to_string(grid.rows) +
                                              "x" + std::to_string(grid.cols));
  }
  const bool corrupt = testing::hooks().corrupt_merge_order.load(std::memory_order_relaxed);
  TokenGrid out(grid.rows / 2, grid.cols / 2, grid.dim * 4);
  for (std::size_t r = 0; r < out.rows; ++r) {
    for (std::size_t c = 0; c < out.cols; ++c) {
      auto dst = out.token(r, c);
      const std::size_t order[4][2] = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
      for (std::size_t q = 0; q < 4; ++q) {
        std::size_t dr = order[q][0];
        std::size_t dc = order[q][1];
        if (corrupt) std::swap(dr, dc);
        auto src = grid.token(2 * r + dr, 2 * c + dc);
        std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(q * grid.dim));
      }
    }
  }
  return out;
}

inline TokenGrid unmerge_2x2(const TokenGrid& merged) {
  if (merged.dim % 4 != 0) throw Error(Errc::invalid_argument, "merged width not divisible by 4");
  const std::size_t d = merged.dim / 4;
  TokenGrid out(merged.rows * 2, merged.cols * 2, d);
  for (std::size_t r = 0; r < merged.rows; ++r) {
    for (std::size_t c = 0; c < merged.cols; ++c) {
      auto src = merged.token(r, c);
      for (std::size_t q = 0; q < 4; ++q) {
        auto dst = out.token(2 * r + q / 2, 2 * c + q % 2);
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(q * d), d, dst.begin());
      }
    }
  }
  return out;
}

struct ProjectorOptions {
  bool linear_only = false;  // drop the nonlinearity between the two layers
  bool zero_bias = false;
};

// Two-layer MLP: in -> out_dim -> GELU -> out_dim.
class Projector {
 public:
  Projector(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed, ProjectorOptions opts = {})
      : opts_(opts) {
    if (out_dim == 0) throw Error(Errc::invalid_argument, "projector out_dim must be >= 1");
    Rng rng(derive_seed(seed, "projector"));
    first_ = detail::Dense::seeded(in_dim, out_dim, rng, !opts.zero_bias);
    second_ = detail::Dense::seeded(out_dim, out_dim, rng, !opts.zero_bias);
  }

  std::size_t in_dim() const { return first_.in; }
  std::size_t out_dim() const { return second_.out; }

  TokenMatrix operator()(const TokenMatrix& tokens) const {
    if (tokens.width != first_.in) throw Error(Errc::invalid_argument, "projector input width mismatch");
    TokenMatrix out(tokens.count, second_.out);
    std::vector<double> hidden(first_.out);
    for (std::size_t i = 0; i < tokens.count; ++i) {
      first_.apply(tokens.row(i), hidden);
      if (!opts_.linear_only) {
        for (double& v : hidden) v = gelu(v);
      }
      second_.apply(hidden, out.row(i));
    }
    return out;
  }

 private:
  static double gelu(double v) {
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    return 0.5 * v * (1.0 + std::tanh(k * (v + 0.044715 * v * v * v)));
  }

  ProjectorOptions opts_;
  detail::Dense first_;
  detail::Dense second_;
};

inline TokenMatrix project(const TokenMatrix& tokens, std::size_t out_dim, std::uint64_t seed,
                           ProjectorOptions opts = {}) {
  return Projector(tokens.width, out_dim, seed, opts)(tokens);
}

inline TokenMatrix project(const TokenGrid& grid, std::size_t out_dim, std::uint64_t seed,
                           ProjectorOptions opts = {}) {
  return project(flatten(grid), out_dim, seed, opts);
}

}  // namespace loctok
