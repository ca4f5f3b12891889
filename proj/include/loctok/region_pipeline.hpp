#pragma once

// Region proposals, proposal post-processing, multi-scale ROIAlign region
// encoding and the proxy registry that binds region tokens to <rN> indices.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loctok/bilinear.hpp"
#include "loctok/error.hpp"
#include "loctok/geometry.hpp"
#include "loctok/rng.hpp"
#include "loctok/tensor.hpp"
#include "loctok/vision_tokenizer.hpp"

namespace loctok {

struct ImageSize {
  std::size_t height = kDefaultImageSize;
  std::size_t width = kDefaultImageSize;
};

struct RegionProposal {
  BoundingBox box;
  double objectness = 0.0;
  bool clamped = false;  // box was moved inside the image bounds

  friend bool operator==(const RegionProposal&, const RegionProposal&) = default;
};

struct ProposerConfig {
  std::size_t num_proposals = 300;
  double score_threshold = 0.15;
  double nms_threshold = 0.6;
  std::size_t max_keep = 100;

  void validate() const {
    if (!(score_threshold >= 0.0 && score_threshold <= 1.0) ||
        !(nms_threshold >= 0.0 && nms_threshold <= 1.0)) {
      throw Error(Errc::invalid_argument, "proposer thresholds must lie in [0,1]");
    }
    if (max_keep > num_proposals) {
      throw Error(Errc::invalid_argument, "max_keep must not exceed num_proposals");
    }
  }
};

// Distractor proposals never reach the default score threshold.
inline constexpr double kDistractorMaxObjectness = 0.14;

// Test backend standing in for a trained detector head. The first
// min(num, |gt|) proposals are the GT boxes with each corner shifted by
// u * jitter * (box width or height), u ~ U[-1, 1), and objectness
// 0.99 - 0.5 * min(1, jitter * mean|u|). The rest are random boxes with
// objectness in [0, 0.14).
inline std::vector<RegionProposal> synthetic_propose(std::span<const BoundingBox> gt_boxes,
                                                     double jitter, std::size_t num,
                                                     std::uint64_t seed, ImageSize image = {}) {
  if (num < 1) throw Error(Errc::invalid_argument, "synthetic_propose needs num >= 1");
  if (!(jitter >= 0.0)) throw Error(Errc::invalid_argument, "jitter must be non-negative");
  const double W = static_cast<double>(image.width);
  const double H = static_cast<double>(image.height);
  Rng rng(derive_seed(seed, "synthetic_propose"));
  std::vector<RegionProposal> out;
  out.reserve(num);

  const std::size_t from_gt = std::min(num, gt_boxes.size());
  for (std::size_t i = 0; i < from_gt; ++i) {
    const auto& g = gt_boxes[i];
    double u[4];
    for (double& v : u) v = rng.uniform(-1.0, 1.0);
    BoundingBox b{g.x_min + u[0] * jitter * g.width(), g.y_min + u[1] * jitter * g.height(),
                  g.x_max + u[2] * jitter * g.width(), g.y_max + u[3] * jitter * g.height()};
    if (b.x_min > b.x_max) std::swap(b.x_min, b.x_max);
    if (b.y_min > b.y_max) std::swap(b.y_min, b.y_max);
    BoundingBox c = clamp_to(b, W, H);
    if (c.area() <= 0.0) c = clamp_to(g, W, H);
    const double mean_shift = (std::abs(u[0]) + std::abs(u[1]) + std::abs(u[2]) + std::abs(u[3])) / 4.0;
    out.push_back({c, 0.99 - 0.5 * std::min(1.0, jitter * mean_shift), !(c == b)});
  }
  while (out.size() < num) {
    const double w = rng.uniform(8.0, std::max(9.0, W / 2.0));
    const double h = rng.uniform(8.0, std::max(9.0, H / 2.0));
    const double x = rng.uniform(0.0, std::max(0.0, W - w));
    const double y = rng.uniform(0.0, std::max(0.0, H - h));
    const double score = rng.uniform(0.0, kDistractorMaxObjectness);
    const BoundingBox b{x, y, x + w, y + h};
    const BoundingBox c = clamp_to(b, W, H);
    out.push_back({c, score, !(c == b)});
  }
  return out;
}

// Score filter, NMS, then top-k by objectness. Output is sorted by
// descending objectness (ties keep input order).
inline std::vector<RegionProposal> postprocess(std::span<const RegionProposal> proposals,
                                               const ProposerConfig& cfg) {
  cfg.validate();
  std::vector<RegionProposal> survivors;
  std::vector<ScoredBox> scored;
  for (const auto& p : proposals) {
    if (p.objectness < cfg.score_threshold) continue;
    survivors.push_back(p);
    scored.push_back({p.box, p.objectness});
  }
  const auto kept = nms(scored, cfg.nms_threshold);
  std::vector<RegionProposal> out;
  out.reserve(std::min(kept.size(), cfg.max_keep));
  for (std::size_t i = 0; i < kept.size() && i < cfg.max_keep; ++i) out.push_back(survivors[kept[i]]);
  return out;
}

struct BinShape {
  std::size_t rows = 7;
  std::size_t cols = 7;
};

struct SampleShape {
  std::size_t y = 2;
  std::size_t x = 2;
};

// Quantization-free ROIAlign on a single grid. The box (image pixels) is
// mapped into the grid frame by grid_size / image_size, split into bins, and
// each bin averages sy x sx bilinear samples at regular interior positions.
inline TokenGrid roi_align_level(const TokenGrid& grid, const BoundingBox& box, ImageSize image,
                                 BinShape bins = {}, SampleShape samples = {}) {
  if (!box.valid() || !(box.area() > 0.0)) throw Error(Errc::degenerate_region, "degenerate region");
  if (bins.rows == 0 || bins.cols == 0 || samples.y == 0 || samples.x == 0) {
    throw Error(Errc::invalid_argument, "bins and samples must be >= 1");
  }
  const double scale_y = static_cast<double>(grid.rows) / static_cast<double>(image.height);
  const double scale_x = static_cast<double>(grid.cols) / static_cast<double>(image.width);
  const double y0 = box.y_min * scale_y;
  const double x0 = box.x_min * scale_x;
  const double bin_h = box.height() * scale_y / static_cast<double>(bins.rows);
  const double bin_w = box.width() * scale_x / static_cast<double>(bins.cols);
  const double weight = 1.0 / static_cast<double>(samples.y * samples.x);

  TokenGrid out(bins.rows, bins.cols, grid.dim);
  for (std::size_t by = 0; by < bins.rows; ++by) {
    for (std::size_t bx = 0; bx < bins.cols; ++bx) {
      auto cell = out.token(by, bx);
      for (std::size_t iy = 0; iy < samples.y; ++iy) {
        const double y = y0 + static_cast<double>(by) * bin_h +
                         (static_cast<double>(iy) + 0.5) * bin_h / static_cast<double>(samples.y);
        for (std::size_t ix = 0; ix < samples.x; ++ix) {
          const double x = x0 + static_cast<double>(bx) * bin_w +
                           (static_cast<double>(ix) + 0.5) * bin_w / static_cast<double>(samples.x);
          accumulate_bilinear(grid, y, x, weight, cell);
        }
      }
    }
  }
  return out;
}

// Multi-scale region encoder: ROIAlign on each of the three pyramid levels,
// a per-level affine map of every pooled cell to the output width, an
// element-wise sum over levels, then the mean over cells.
class RegionEncoder {
 public:
  static RegionEncoder seeded(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed,
                              ImageSize image = {}, BinShape bins = {}, SampleShape samples = {}) {
    RegionEncoder e(image, bins, samples);
    Rng rng(derive_seed(seed, "region_encoder"));
    for (std::size_t l = 0; l < kEncoderLayers; ++l) e.maps_.push_back(detail::Dense::seeded(in_dim, out_dim, rng));
    return e;
  }

  static RegionEncoder identity(std::size_t dim, ImageSize image = {}, BinShape bins = {},
                                SampleShape samples = {}) {
    RegionEncoder e(image, bins, samples);
    for (std::size_t l = 0; l < kEncoderLayers; ++l) e.maps_.push_back(detail::Dense::identity(dim));
    return e;
  }

  std::size_t out_dim() const { return maps_.front().out; }
  ImageSize image_size() const { return image_; }

  // Consumes levels 0..2 of the pyramid; any further levels are ignored.
  std::vector<double> operator()(const FeaturePyramid& pyramid, const BoundingBox& box) const {
    if (pyramid.levels.size() < kEncoderLayers) {
      throw Error(Errc::invalid_argument, "region encoder needs 3 pyramid levels");
    }
    const std::size_t cells = bins_.rows * bins_.cols;
    std::vector<double> fused(cells * out_dim(), 0.0);
    std::vector<double> mapped(out_dim());
    for (std::size_t l = 0; l < kEncoderLayers; ++l) {
      const auto& grid = pyramid.levels[l].grid;
      if (grid.dim != maps_[l].in) throw Error(Errc::invalid_argument, "pyramid width mismatch");
      const TokenGrid pooled = roi_align_level(grid, box, image_, bins_, samples_);
      for (std::size_t c = 0; c < cells; ++c) {
        maps_[l].apply(pooled.token(c), mapped);
        for (std::size_t k = 0; k < mapped.size(); ++k) fused[c * out_dim() + k] += mapped[k];
      }
    }
    std::vector<double> embedding(out_dim(), 0.0);
    for (std::size_t c = 0; c < cells; ++c) {
      for (std::size_t k = 0; k < out_dim(); ++k) embedding[k] += fused[c * out_dim() + k];
    }
    for (double& v : embedding) v /= static_cast<double>(cells);
    return embedding;
  }

 private:
  RegionEncoder(ImageSize image, BinShape bins, SampleShape samples)
      : image_(image), bins_(bins), samples_(samples) {}

  ImageSize image_;
  BinShape bins_;
  SampleShape samples_;
  std::vector<detail::Dense> maps_;
};

inline std::vector<double> encode_region(const FeaturePyramid& pyramid, const BoundingBox& box,
                                         ImageSize image, BinShape bins, std::uint64_t seed) {
  if (pyramid.levels.empty()) throw Error(Errc::invalid_argument, "empty pyramid");
  const std::size_t dim = pyramid.levels.front().grid.dim;
  return RegionEncoder::seeded(dim, dim, seed, image, bins)(pyramid, box);
}

enum class RegionOrigin { proposed, user };

inline const char* to_string(RegionOrigin o) { return o == RegionOrigin::proposed ? "proposed" : "user"; }

struct RegionToken {
  std::vector<double> embedding;
  BoundingBox source_box;
  std::size_t proxy_index = 0;
  RegionOrigin origin = RegionOrigin::proposed;
  double objectness = 1.0;  // 1 for user boxes
  bool clamped = false;

  friend bool operator==(const RegionToken&, const RegionToken&) = default;
};

// Region tokens in registration order; entry i carries proxy index i + 1.
class ProxyRegistry {
 public:
  ProxyRegistry() = default;
  explicit ProxyRegistry(std::int64_t image_id) : image_id_(image_id) {}

  std::int64_t image_id() const { return image_id_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  bool contains(std::size_t proxy) const { return proxy >= 1 && proxy <= entries_.size(); }
  const RegionToken& at(std::size_t proxy) const {
    if (!contains(proxy)) {
      throw Error(Errc::unknown_referent, "unknown referent, " + std::to_string(proxy) +
                                              ", registry size " + std::to_string(size()));
    }
    return entries_[proxy - 1];
  }
  const std::vector<RegionToken>& entries() const { return entries_; }
  std::size_t count(RegionOrigin o) const {
    return static_cast<std::size_t>(std::count_if(entries_.begin(), entries_.end(),
                                                  [&](const RegionToken& t) { return t.origin == o; }));
  }

  std::size_t embedding_width() const { return entries_.empty() ? 0 : entries_.front().embedding.size(); }

  // Appends a token and assigns it the next proxy index.
  const RegionToken& add(RegionToken token) {
    if (!entries_.empty() && token.embedding.size() != embedding_width()) {
      throw Error(Errc::invalid_argument, "region embedding width differs within registry");
    }
    token.proxy_index = entries_.size() + 1;
    entries_.push_back(std::move(token));
    return entries_.back();
  }

  TokenMatrix embeddings() const {
    TokenMatrix m(size(), embedding_width());
    for (std::size_t i = 0; i < size(); ++i) std::copy(entries_[i].embedding.begin(), entries_[i].embedding.end(), m.row(i).begin());
    return m;
  }

  friend bool operator==(const ProxyRegistry&, const ProxyRegistry&) = default;

 private:
  std::int64_t image_id_ = 0;
  std::vector<RegionToken> entries_;
};

// Encodes proposals (in the given, descending-objectness order) and then user
// boxes (input order), assigning proxy indices 1..n. Boxes are clamped to the
// image before encoding.
inline ProxyRegistry build_registry(std::int64_t image_id, std::span<const RegionProposal> proposals,
                                    std::span<const BoundingBox> user_boxes, const FeaturePyramid& pyramid,
                                    const RegionEncoder& encoder, std::size_t max_keep = 100) {
  if (proposals.size() > max_keep) {
    throw Error(Errc::invalid_argument, "more proposals than max_keep; run postprocess first");
  }
  const ImageSize img = encoder.image_size();
  const double W = static_cast<double>(img.width);
  const double H = static_cast<double>(img.height);
  ProxyRegistry reg(image_id);
  auto encode = [&](const BoundingBox& raw, RegionOrigin origin, double objectness, bool was_clamped) {
    if (!raw.valid()) throw Error(Errc::degenerate_region, "degenerate region");
    const BoundingBox box = clamp_to(raw, W, H);
    if (!(box.area() > 0.0)) throw Error(Errc::degenerate_region, "degenerate region");
    RegionToken t;
    t.embedding = encoder(pyramid, box);
    t.source_box = box;
    t.origin = origin;
    t.objectness = objectness;
    t.clamped = was_clamped || !(box == raw);
    reg.add(std::move(t));
  };
  for (const auto& p : proposals) encode(p.box, RegionOrigin::proposed, p.objectness, p.clamped);
  for (const auto& b : user_boxes) encode(b, RegionOrigin::user, 1.0, false);
  return reg;
}

// Registry JSON; embeddings live in a grid container (rows = n, cols = 1,
// dim = width) stored next to it as `embeddings_file`.
inline nlohmann::json registry_to_json(const ProxyRegistry& reg, const std::string& embeddings_file) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& t : reg.entries()) {
    entries.push_back({{"proxy", t.proxy_index},
                       {"box", t.source_box},
                       {"origin", to_string(t.origin)},
                       {"objectness", t.objectness},
                       {"clamped", t.clamped},
                       {"embedding_ref", embeddings_file + "#" + std::to_string(t.proxy_index - 1)}});
  }
  return {{"image_id", reg.image_id()},
          {"generator", kGeneratorId},
          {"size", reg.size()},
          {"embedding_width", reg.embedding_width()},
          {"embeddings_file", embeddings_file},
          {"entries", entries}};
}

inline TokenGrid registry_embeddings_grid(const ProxyRegistry& reg) {
  TokenGrid g(reg.size(), 1, reg.embedding_width());
  for (std::size_t i = 0; i < reg.size(); ++i) {
    const auto& e = reg.entries()[i].embedding;
    std::copy(e.begin(), e.end(), g.token(i, 0).begin());
  }
  return g;
}

inline ProxyRegistry registry_from_json(const nlohmann::json& j, const TokenGrid& embeddings) {
  try {
    ProxyRegistry reg(j.at("image_id").get<std::int64_t>());
    const auto& entries = j.at("entries");
    if (embeddings.rows != entries.size()) {
      throw Error(Errc::parse_error, "registry embeddings count mismatch");
    }
    std::size_t expected = 1;
    for (const auto& e : entries) {
      if (e.at("proxy").get<std::size_t>() != expected) {
        throw Error(Errc::parse_error, "registry proxy indices must be contiguous from 1");
      }
      RegionToken t;
      t.source_box = e.at("box").get<BoundingBox>();
      const auto origin = e.at("origin").get<std::string>();
      if (origin != "proposed" && origin != "user") throw Error(Errc::parse_error, "bad origin " + origin);
      t.origin = origin == "user" ? RegionOrigin::user : RegionOrigin::proposed;
      t.objectness = e.value("objectness", 1.0);
      t.clamped = e.value("clamped", false);
      auto row = embeddings.token(expected - 1, 0);
      t.embedding.assign(row.begin(), row.end());
      reg.add(std::move(t));
      ++expected;
    }
    return reg;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::parse_error, std::string("registry json: ") + e.what());
  }
}

}  // namespace loctok
