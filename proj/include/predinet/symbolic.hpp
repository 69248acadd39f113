#pragma once

// Mean-shift clustering of attention masks and Prolog export of a
// PrediNet's propositions for one image.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "predinet/errors.hpp"
#include "predinet/graph.hpp"
#include "predinet/nets.hpp"
#include "predinet/relations_game.hpp"

namespace predinet::symbolic {

using Point = std::vector<double>;

struct Cluster {
  std::string id;  // ob_1, ob_2, ...
  Point mode;
  std::vector<std::size_t> members;
};

struct Clustering {
  std::vector<Cluster> clusters;       // sorted by mode, lexicographically
  std::vector<std::size_t> assignment;  // sample -> cluster index
};

inline double distance(const Point& a, const Point& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

inline constexpr double kDefaultBandwidth = 0.25;
inline constexpr std::size_t kMeanShiftIterations = 300;

/// Flat-kernel mean shift: every sample climbs to the mean of the samples
/// within `bandwidth` until it stops moving. Modes closer than bandwidth/2
/// are merged, then each sample joins its nearest mode.
inline Clustering mean_shift(const std::vector<Point>& samples, double bandwidth) {
  if (!(bandwidth > 0)) throw ConfigError("mean_shift: bandwidth must be positive");
  Clustering out;
  if (samples.empty()) return out;
  const std::size_t d = samples.front().size();
  for (const auto& s : samples)
    if (s.size() != d) throw DimensionError("mean_shift: samples have different lengths");

  std::vector<Point> modes;
  for (const auto& start : samples) {
    Point x = start, next(d);
    for (std::size_t it = 0; it < kMeanShiftIterations; ++it) {
      std::fill(next.begin(), next.end(), 0.0);
      std::size_t count = 0;
      for (const auto& s : samples)
        if (distance(s, x) <= bandwidth) {
          for (std::size_t i = 0; i < d; ++i) next[i] += s[i];
          ++count;
        }
      if (count == 0) break;  // cannot happen while x is a sample or a mean of samples
      for (auto& v : next) v /= static_cast<double>(count);
      const double moved = distance(next, x);
      x.swap(next);
      if (moved < 1e-9) break;
    }
    modes.push_back(std::move(x));
  }

  std::vector<Point> merged;
  for (const auto& m : modes) {
    bool near = false;
    for (const auto& k : merged)
      if (distance(m, k) < bandwidth / 2) {
        near = true;
        break;
      }
    if (!near) merged.push_back(m);
  }
  std::sort(merged.begin(), merged.end());

  out.clusters.resize(merged.size());
  for (std::size_t c = 0; c < merged.size(); ++c) {
    out.clusters[c].id = "ob_" + std::to_string(c + 1);
    out.clusters[c].mode = merged[c];
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::size_t best = 0;
    double best_d = distance(samples[i], merged[0]);
    for (std::size_t c = 1; c < merged.size(); ++c) {
      const double dc = distance(samples[i], merged[c]);
      if (dc < best_d) {
        best = c;
        best_d = dc;
      }
    }
    out.assignment.push_back(best);
    out.clusters[best].members.push_back(i);
  }
  return out;
}

struct Proposition {
  std::size_t head = 0;
  std::size_t relation = 0;  // 0-based; printed as rel_{relation+1}
  double value = 0;
  std::size_t subject = 0;  // cluster indices
  std::size_t object = 0;
};

struct Position {
  std::size_t cluster = 0;
  double x = 0, y = 0;
};

struct Scene {
  std::size_t heads = 0;
  std::size_t relations = 0;
  double bandwidth = kDefaultBandwidth;
  Clustering clustering;
  std::vector<Proposition> propositions;  // sorted by (head, relation)
  std::vector<Position> positions;        // one per cluster
  std::vector<double> r_star;
  std::vector<std::string> warnings;
};

/// Number of 3x3 grid cells holding a non-background pixel.
inline std::size_t occupied_cells(const Tensor<float>& image) {
  std::size_t n = 0;
  for (std::size_t gr = 0; gr < rg::kGridSize; ++gr)
    for (std::size_t gc = 0; gc < rg::kGridSize; ++gc) {
      bool any = false;
      for (std::size_t y = gr * rg::kCellPixels; y < (gr + 1) * rg::kCellPixels && !any; ++y)
        for (std::size_t x = gc * rg::kCellPixels; x < (gc + 1) * rg::kCellPixels && !any; ++x)
          for (std::size_t c = 0; c < rg::kChannels; ++c)
            if (image[(y * rg::kImageSize + x) * rg::kChannels + c] > 0.0f) any = true;
      if (any) ++n;
    }
  return n;
}

/// Runs the PrediNet on one [36,36,3] image and turns its output into
/// propositions over clustered attention masks.
inline Scene extract(Model<float>& model, const Tensor<float>& image, double bandwidth = kDefaultBandwidth) {
  const auto& cfg = model.config();
  if (cfg.arch != Arch::predinet) throw UsageError("symbolic export needs a PrediNet model");
  if (image.rank() != 3 || image.dim(0) != cfg.image_size || image.dim(1) != cfg.image_size || image.dim(2) != cfg.image_channels) {
    throw DimensionError("symbolic export: expected a [36,36,3] image, got " + to_string(image.shape()));
  }
  Graph<float> g(false);
  auto feats = cnn_forward(g, g.constant(image.reshaped({1, cfg.image_size, cfg.image_size, cfg.image_channels})),
                           model.params(), cfg);
  auto central = central_forward(g, feats, model.params(), cfg);
  const auto& a1 = central.attention1->value();
  const auto& a2 = central.attention2->value();
  const auto& r = central.r_star.value();
  const std::size_t k = cfg.heads, j = cfg.relations, n = cfg.objects(), w = cfg.head_width();

  Scene s;
  s.heads = k;
  s.relations = j;
  s.bandwidth = bandwidth;
  s.r_star.assign(r.data().begin(), r.data().end());
  std::vector<Point> samples;  // head h slot 1 at 2h, slot 2 at 2h+1
  for (std::size_t h = 0; h < k; ++h) {
    samples.emplace_back(a1.data().begin() + static_cast<std::ptrdiff_t>(h * n), a1.data().begin() + static_cast<std::ptrdiff_t>((h + 1) * n));
    samples.emplace_back(a2.data().begin() + static_cast<std::ptrdiff_t>(h * n), a2.data().begin() + static_cast<std::ptrdiff_t>((h + 1) * n));
  }
  s.clustering = mean_shift(samples, bandwidth);
  for (std::size_t h = 0; h < k; ++h)
    for (std::size_t i = 0; i < j; ++i)
      s.propositions.push_back({h, i, static_cast<double>(r[h * w + i]), s.clustering.assignment[2 * h], s.clustering.assignment[2 * h + 1]});

  const auto coords = patch_coordinates<double>(cfg, 1);
  for (std::size_t c = 0; c < s.clustering.clusters.size(); ++c) {
    const auto& mode = s.clustering.clusters[c].mode;
    Position p{c, 0, 0};
    for (std::size_t i = 0; i < n; ++i) {
      p.x += mode[i] * coords[i * 2];
      p.y += mode[i] * coords[i * 2 + 1];
    }
    s.positions.push_back(p);
  }
  const auto objects = occupied_cells(image);
  if (s.clustering.clusters.size() == 1 && objects > 1) {
    s.warnings.push_back("degenerate clustering: 1 cluster for a scene with " + std::to_string(objects) + " objects");
  }
  return s;
}

/// Fixed-point with 4 decimals, never printing a negative zero.
inline std::string format_value(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  std::string s = buf;
  if (s == "-0.0000") s = "0.0000";
  return s;
}

inline std::string emit_prolog(const Scene& s) {
  std::ostringstream os;
  os << "% predinet propositions\n";
  os << "% heads: " << s.heads << "\n";
  os << "% relations: " << s.relations << "\n";
  os << "% bandwidth: " << format_value(s.bandwidth) << "\n";
  os << "% clusters: " << s.clustering.clusters.size() << "\n";
  for (const auto& w : s.warnings) os << "% warning: " << w << "\n";
  const auto& cl = s.clustering.clusters;
  std::size_t head = s.heads;
  for (const auto& p : s.propositions) {
    if (p.head != head) {
      head = p.head;
      os << "% head " << head + 1 << "\n";
    }
    os << "prop(rel_" << p.relation + 1 << ", " << format_value(p.value) << ", " << cl[p.subject].id << ", "
       << cl[p.object].id << ").\n";
  }
  os << "% cluster positions\n";
  for (const auto& p : s.positions)
    os << "pos(" << cl[p.cluster].id << ", " << format_value(p.x) << ", " << format_value(p.y) << ").\n";
  return os.str();
}

}  // namespace predinet::symbolic
