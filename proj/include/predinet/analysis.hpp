#pragma once

// Post-hoc tooling: attention heatmaps, PCA, content / position scores,
// output-MLP weight magnitudes and head ablation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "predinet/errors.hpp"
#include "predinet/graph.hpp"
#include "predinet/nets.hpp"
#include "predinet/png.hpp"
#include "predinet/protocol.hpp"
#include "predinet/random.hpp"
#include "predinet/relations_game.hpp"

namespace predinet::analysis {

using Grid = std::array<float, rg::kPatchGrid * rg::kPatchGrid>;

// ---------------------------------------------------------------------------
// Attention

/// Both attention masks of every head for one image.
struct AttentionRecord {
  std::size_t image = 0;
  std::size_t label = 0;
  std::vector<std::vector<float>> mask1;  // [k][n]
  std::vector<std::vector<float>> mask2;

  const std::vector<float>& mask(std::size_t head, int slot) const { return slot == 1 ? mask1.at(head) : mask2.at(head); }
};

/// Runs a PrediNet on `images` [B,36,36,3] and returns its attention masks.
inline std::vector<AttentionRecord> collect_attention(Model<float>& model, const Tensor<float>& images,
                                                     const std::vector<std::size_t>& labels = {},
                                                     const Tensor<float>* task_ids = nullptr, std::size_t first_image = 0) {
  if (model.config().arch != Arch::predinet) throw UsageError("attention heatmaps need a PrediNet model");
  Graph<float> g(false);
  auto out = model.forward(g, images, task_ids);
  const auto& a1 = out.central.attention1->value();
  const auto& a2 = out.central.attention2->value();
  const std::size_t B = a1.dim(0), k = a1.dim(1), n = a1.dim(2);
  std::vector<AttentionRecord> recs(B);
  for (std::size_t b = 0; b < B; ++b) {
    auto& r = recs[b];
    r.image = first_image + b;
    r.label = b < labels.size() ? labels[b] : 0;
    r.mask1.assign(k, std::vector<float>(n));
    r.mask2.assign(k, std::vector<float>(n));
    for (std::size_t h = 0; h < k; ++h)
      for (std::size_t i = 0; i < n; ++i) {
        r.mask1[h][i] = a1[(b * k + h) * n + i];
        r.mask2[h][i] = a2[(b * k + h) * n + i];
      }
  }
  return recs;
}

inline constexpr const char* kHeatmapHeader = "image,head,slot,row,col,weight";

inline void write_heatmaps_csv(std::ostream& os, const std::vector<AttentionRecord>& recs) {
  os << kHeatmapHeader << '\n';
  char buf[32];
  for (const auto& r : recs)
    for (std::size_t h = 0; h < r.mask1.size(); ++h)
      for (int slot = 1; slot <= 2; ++slot) {
        const auto& m = r.mask(h, slot);
        const std::size_t grid = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(m.size()))));
        for (std::size_t i = 0; i < m.size(); ++i) {
          std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(m[i]));
          os << r.image << ',' << h << ',' << slot << ',' << i / grid << ',' << i % grid << ',' << buf << '\n';
        }
      }
}

/// Inverse of write_heatmaps_csv (labels are not stored and come back 0).
inline std::vector<AttentionRecord> read_heatmaps_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kHeatmapHeader) throw DataError("heatmap csv: bad header");
  struct Row {
    std::size_t image, head, slot, row, col;
    float w;
  };
  std::vector<Row> rows;
  std::size_t max_image = 0, max_head = 0, max_cell = 0, lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    Row r{};
    if (std::sscanf(line.c_str(), "%zu,%zu,%zu,%zu,%zu,%f", &r.image, &r.head, &r.slot, &r.row, &r.col, &r.w) != 6 ||
        (r.slot != 1 && r.slot != 2)) {
      throw DataError("heatmap csv: malformed line " + std::to_string(lineno));
    }
    max_image = std::max(max_image, r.image);
    max_head = std::max(max_head, r.head);
    max_cell = std::max({max_cell, r.row, r.col});
    rows.push_back(r);
  }
  const std::size_t grid = max_cell + 1, n = grid * grid;
  std::vector<AttentionRecord> recs;
  std::vector<std::ptrdiff_t> index(max_image + 1, -1);
  for (const auto& r : rows) {
    if (index[r.image] < 0) {
      index[r.image] = static_cast<std::ptrdiff_t>(recs.size());
      AttentionRecord rec;
      rec.image = r.image;
      rec.mask1.assign(max_head + 1, std::vector<float>(n));
      rec.mask2.assign(max_head + 1, std::vector<float>(n));
      recs.push_back(std::move(rec));
    }
    auto& rec = recs[static_cast<std::size_t>(index[r.image])];
    (r.slot == 1 ? rec.mask1 : rec.mask2)[r.head][r.row * grid + r.col] = r.w;
  }
  return recs;
}

/// Grayscale heat grid scaled so the largest weight is white.
inline Tensor<float> heat_grid(const std::vector<float>& mask, std::size_t cell_pixels = 12) {
  const std::size_t grid = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(mask.size()))));
  if (grid * grid != mask.size()) throw DimensionError("heat_grid: mask is not a square grid");
  const float top = *std::max_element(mask.begin(), mask.end());
  Tensor<float> t({grid, grid});
  for (std::size_t i = 0; i < mask.size(); ++i) t[i] = top > 0 ? mask[i] / top : 0.0f;
  return png::upscale(t, cell_pixels);
}

/// The image tinted red by a mask. Pixel (y, x) takes the weight of the
/// patch whose stride block contains it.
inline Tensor<float> heat_overlay(const Tensor<float>& image, const std::vector<float>& mask, std::size_t scale = 4) {
  const std::size_t H = image.dim(0), W = image.dim(1), grid = rg::kPatchGrid, stride = rg::kPatchStride;
  if (mask.size() != grid * grid) throw DimensionError("heat_overlay: mask must have 25 entries");
  const float top = *std::max_element(mask.begin(), mask.end());
  Tensor<float> out({H, W, 3});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const float w = top > 0 ? mask[std::min(y / stride, grid - 1) * grid + std::min(x / stride, grid - 1)] / top : 0.0f;
      for (std::size_t c = 0; c < 3; ++c) {
        const float base = 0.5f * image[(y * W + x) * 3 + c];
        out[(y * W + x) * 3 + c] = std::min(1.0f, base + (c == 0 ? 0.5f * w : 0.15f * w));
      }
    }
  return png::upscale(out, scale);
}

// ---------------------------------------------------------------------------
// PCA

struct PcaResult {
  std::vector<double> mean;
  std::vector<std::vector<double>> components;  // unit vectors, by decreasing variance
  std::vector<double> variances;
  double total_variance = 0;
  bool rank_deficient = false;  // fewer components than requested
  std::vector<std::vector<double>> projections;  // [N][components]
  std::vector<std::size_t> labels;
};

inline constexpr std::size_t kPowerIterations = 20000;
inline constexpr double kPowerTolerance = 1e-11;  // on the change of the unit vector

/// Top eigenpairs of a symmetric PSD matrix by power iteration with
/// deflation. Stops early when the remaining spectrum is numerically zero.
inline std::pair<std::vector<std::vector<double>>, std::vector<double>> top_eigenpairs(std::vector<double> C, std::size_t d,
                                                                                     std::size_t count, std::uint64_t seed = 0,
                                                                                     bool* deficient = nullptr) {
  if (C.size() != d * d) throw DimensionError("top_eigenpairs: matrix is not d x d");
  double trace = 0;
  for (std::size_t i = 0; i < d; ++i) trace += C[i * d + i];
  const double floor = 1e-12 * std::max(trace, 0.0);
  Rng rng = derive_rng(seed, 0x9ca);
  std::normal_distribution<double> normal;
  std::vector<std::vector<double>> vecs;
  std::vector<double> vals;
  std::vector<double> v(d), w(d);
  auto matvec = [&](const std::vector<double>& x, std::vector<double>& y) {
    for (std::size_t i = 0; i < d; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += C[i * d + j] * x[j];
      y[i] = s;
    }
  };
  auto orthonormalize = [&](std::vector<double>& x) {
    for (const auto& u : vecs) {
      const double p = std::inner_product(x.begin(), x.end(), u.begin(), 0.0);
      for (std::size_t i = 0; i < d; ++i) x[i] -= p * u[i];
    }
    const double nrm = std::sqrt(std::inner_product(x.begin(), x.end(), x.begin(), 0.0));
    if (nrm > 0)
      for (auto& e : x) e /= nrm;
    return nrm;
  };
  bool short_of = false;
  for (std::size_t c = 0; c < std::min(count, d); ++c) {
    for (auto& e : v) e = normal(rng);
    orthonormalize(v);
    for (std::size_t it = 0; it < kPowerIterations; ++it) {
      matvec(v, w);
      if (orthonormalize(w) == 0) break;
      double moved = 0;
      for (std::size_t i = 0; i < d; ++i) moved = std::max(moved, std::abs(w[i] - v[i]));
      v.swap(w);
      if (moved <= kPowerTolerance) break;
    }
    matvec(v, w);
    const double lambda = std::inner_product(v.begin(), v.end(), w.begin(), 0.0);
    if (!(lambda > floor)) {
      short_of = true;
      break;
    }
    vecs.push_back(v);
    vals.push_back(lambda);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) C[i * d + j] -= lambda * v[i] * v[j];
  }
  if (count > d) short_of = true;
  if (deficient) *deficient = short_of;
  return {vecs, vals};
}

/// Mean-centred sample covariance (N-1 normalisation).
inline std::vector<double> covariance(const std::vector<std::vector<double>>& X, std::vector<double>& mean) {
  const std::size_t N = X.size(), d = X.front().size();
  mean.assign(d, 0.0);
  for (const auto& x : X) {
    if (x.size() != d) throw DimensionError("pca: rows have different lengths");
    for (std::size_t i = 0; i < d; ++i) mean[i] += x[i];
  }
  for (auto& m : mean) m /= static_cast<double>(N);
  std::vector<double> C(d * d, 0.0), c(d);
  for (const auto& x : X) {
    for (std::size_t i = 0; i < d; ++i) c[i] = x[i] - mean[i];
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = i; j < d; ++j) C[i * d + j] += c[i] * c[j];
  }
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j) {
      C[i * d + j] /= static_cast<double>(N - 1);
      C[j * d + i] = C[i * d + j];
    }
  return C;
}

inline std::vector<std::vector<double>> project(const PcaResult& p, const std::vector<std::vector<double>>& X) {
  std::vector<std::vector<double>> out;
  for (const auto& x : X) {
    if (x.size() != p.mean.size()) throw DimensionError("pca project: dimension mismatch");
    std::vector<double> row;
    for (const auto& c : p.components) {
      double s = 0;
      for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - p.mean[i]) * c[i];
      row.push_back(s);
    }
    out.push_back(std::move(row));
  }
  return out;
}

inline PcaResult pca(const std::vector<std::vector<double>>& X, const std::vector<std::size_t>& labels = {},
                     std::size_t components = 2, std::uint64_t seed = 0) {
  if (X.size() < 3) throw DataError("pca: need at least 3 samples");
  PcaResult r;
  const auto C = covariance(X, r.mean);
  const std::size_t d = r.mean.size();
  for (std::size_t i = 0; i < d; ++i) r.total_variance += C[i * d + i];
  auto [vecs, vals] = top_eigenpairs(C, d, components, seed, &r.rank_deficient);
  r.components = std::move(vecs);
  r.variances = std::move(vals);
  r.projections = project(r, X);
  r.labels = labels;
  return r;
}

inline void write_pca_csv(std::ostream& os, const PcaResult& p) {
  os << "index,label";
  for (std::size_t c = 0; c < p.components.size(); ++c) os << ",pc" << c + 1;
  os << '\n';
  char buf[32];
  for (std::size_t i = 0; i < p.projections.size(); ++i) {
    os << i << ',' << (i < p.labels.size() ? p.labels[i] : 0);
    for (double v : p.projections[i]) {
      std::snprintf(buf, sizeof buf, ",%.6f", v);
      os << buf;
    }
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Content / position scores

/// <attention mask, grid>, the attention-weighted mean of the grid values.
inline double mask_score(const std::vector<float>& attention, const Grid& grid) {
  if (attention.size() != grid.size()) throw DimensionError("mask_score: attention must have 25 entries");
  double s = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) s += static_cast<double>(attention[i]) * grid[i];
  return s;
}

struct HeadScores {
  std::size_t heads = 0;
  std::vector<double> content1, content2;        // per head, mean over images
  std::vector<double> position_mean1, position_mean2;
  std::vector<double> position_std1, position_std2;
  std::vector<std::vector<double>> position1, position2;  // per head, per image
};

inline HeadScores score_heads(const std::vector<AttentionRecord>& recs, const std::vector<Grid>& content) {
  if (recs.empty() || recs.size() != content.size()) throw DataError("score_heads: need one content mask per record");
  HeadScores s;
  s.heads = recs.front().mask1.size();
  const auto pos = rg::make_position_mask();
  Grid position;
  std::copy(pos.begin(), pos.end(), position.begin());
  s.content1.assign(s.heads, 0);
  s.content2.assign(s.heads, 0);
  s.position1.assign(s.heads, {});
  s.position2.assign(s.heads, {});
  for (std::size_t i = 0; i < recs.size(); ++i)
    for (std::size_t h = 0; h < s.heads; ++h) {
      s.content1[h] += mask_score(recs[i].mask1[h], content[i]);
      s.content2[h] += mask_score(recs[i].mask2[h], content[i]);
      s.position1[h].push_back(mask_score(recs[i].mask1[h], position));
      s.position2[h].push_back(mask_score(recs[i].mask2[h], position));
    }
  auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    sd = std::sqrt(ss / static_cast<double>(v.size()));
  };
  s.position_mean1.resize(s.heads);
  s.position_mean2.resize(s.heads);
  s.position_std1.resize(s.heads);
  s.position_std2.resize(s.heads);
  for (std::size_t h = 0; h < s.heads; ++h) {
    s.content1[h] /= static_cast<double>(recs.size());
    s.content2[h] /= static_cast<double>(recs.size());
    stats(s.position1[h], s.position_mean1[h], s.position_std1[h]);
    stats(s.position2[h], s.position_mean2[h], s.position_std2[h]);
  }
  return s;
}

inline constexpr double kObjectAttentionThreshold = 0.9;

/// Heads whose two masks both score above `threshold` on content.
inline std::vector<std::size_t> object_attending_heads(const HeadScores& s, double threshold = kObjectAttentionThreshold) {
  std::vector<std::size_t> out;
  for (std::size_t h = 0; h < s.heads; ++h)
    if (s.content1[h] > threshold && s.content2[h] > threshold) out.push_back(h);
  return out;
}

/// Mean |w| of the output-MLP first-layer weights fed by each head's
/// j+4 slots of R*. Task-id rows are excluded.
inline std::vector<double> mlp_weight_magnitudes(const Model<float>& model) {
  const auto& cfg = model.config();
  const auto& w = model.params().at("out.w1");
  const std::size_t width = cfg.head_width(), hidden = w.dim(1);
  std::vector<double> out(cfg.heads, 0.0);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    double s = 0;
    for (std::size_t r = h * width; r < (h + 1) * width; ++r)
      for (std::size_t c = 0; c < hidden; ++c) s += std::abs(static_cast<double>(w.at(r, c)));
    out[h] = s / static_cast<double>(width * hidden);
  }
  return out;
}

inline void write_head_scores_csv(std::ostream& os, const HeadScores& s, const std::vector<double>& weights) {
  os << "head,content1,content2,position_mean1,position_std1,position_mean2,position_std2,mlp_weight\n";
  char buf[160];
  for (std::size_t h = 0; h < s.heads; ++h) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", h, s.content1[h], s.content2[h],
                  s.position_mean1[h], s.position_std1[h], s.position_mean2[h], s.position_std2[h],
                  h < weights.size() ? weights[h] : 0.0);
    os << buf;
  }
}

// ---------------------------------------------------------------------------
// Head ablation

enum class AblationPolicy { random, object_attending };

inline std::string to_string(AblationPolicy p) { return p == AblationPolicy::random ? "random" : "object_attending"; }

struct AblationPoint {
  std::size_t retained = 0;
  double mean = 0;
  double std = 0;
  std::size_t trials = 0;
};

struct AblationResult {
  AblationPolicy policy = AblationPolicy::random;
  std::vector<std::size_t> pool;
  std::vector<AblationPoint> points;
  std::vector<std::string> warnings;
};

/// R*, task ids and labels for a fixed probe set.
struct Probe {
  Tensor<float> r_star;
  Tensor<float> task_ids;
  std::vector<std::size_t> labels;
};

inline Probe make_probe(Model<float>& model, const std::vector<TaskSpec>& tasks, std::size_t task_index,
                        ObjectSetId set, std::size_t n_examples, std::uint64_t seed, std::size_t chunk = 50) {
  Rng rng = derive_rng(seed, 0xab1a);
  Probe p;
  const std::size_t W = model.config().central_width(), tw = task_id_width(tasks);
  p.r_star = Tensor<float>({n_examples, W});
  if (tw) p.task_ids = Tensor<float>({n_examples, tw});
  for (std::size_t done = 0; done < n_examples;) {
    const std::size_t size = std::min(chunk, n_examples - done);
    auto batch = make_batch<float>(tasks, task_index, set, size, rng);
    Graph<float> g(false);
    auto feats = cnn_forward(g, g.constant(batch.images), model.params(), model.config());
    auto central = central_forward(g, feats, model.params(), model.config());
    const auto& r = central.r_star.value();
    std::copy(r.data().begin(), r.data().end(), p.r_star.data().begin() + done * W);
    if (tw) std::copy(batch.task_ids.data().begin(), batch.task_ids.data().end(), p.task_ids.data().begin() + done * tw);
    p.labels.insert(p.labels.end(), batch.labels.begin(), batch.labels.end());
    done += size;
  }
  return p;
}

/// Accuracy of the output MLP on the probe with R* multiplied by `mask`.
inline double probe_accuracy(Model<float>& model, const Probe& p, const std::vector<float>* mask) {
  Graph<float> g(false);
  auto logits = model.output_forward(g, g.constant(p.r_star), p.task_ids.size() ? &p.task_ids : nullptr, mask);
  const auto& z = logits.value();
  const std::size_t C = z.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < p.labels.size(); ++i) {
    const float* row = z.data().data() + i * C;
    if (static_cast<std::size_t>(std::max_element(row, row + C) - row) == p.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(p.labels.size());
}

/// Slot mask keeping the R* slots of `heads` and zeroing the rest.
inline std::vector<float> head_mask(const ModelConfig& cfg, const std::vector<std::size_t>& heads) {
  std::vector<float> m(cfg.central_width(), 0.0f);
  for (auto h : heads) {
    if (h >= cfg.heads) throw DimensionError("head_mask: head index out of range");
    std::fill(m.begin() + static_cast<std::ptrdiff_t>(h * cfg.head_width()),
              m.begin() + static_cast<std::ptrdiff_t>((h + 1) * cfg.head_width()), 1.0f);
  }
  return m;
}

/// For each retained-head count, `trials` random subsets of the pool are
/// kept and every other head's R* slots zeroed. The random policy samples
/// from all heads; object_attending samples only from `eligible`.
inline AblationResult head_ablation(Model<float>& model, const Probe& probe, AblationPolicy policy,
                                    const std::vector<std::size_t>& retained_counts, std::size_t trials,
                                    std::uint64_t seed, const std::vector<std::size_t>& eligible = {}) {
  const auto& cfg = model.config();
  if (cfg.arch != Arch::predinet && cfg.arch != Arch::mha) throw UsageError("head ablation needs a PrediNet or MHA model");
  AblationResult res;
  res.policy = policy;
  if (policy == AblationPolicy::random) {
    res.pool.resize(cfg.heads);
    std::iota(res.pool.begin(), res.pool.end(), std::size_t{0});
  } else {
    res.pool = eligible;
  }
  if (res.pool.empty()) {
    res.warnings.push_back("empty head pool for policy " + to_string(policy) + "; skipped");
    return res;
  }
  Rng rng = derive_rng(seed, 0xab1a7e);
  for (auto count : retained_counts) {
    if (count > res.pool.size()) {
      res.warnings.push_back("retained count " + std::to_string(count) + " exceeds pool size " + std::to_string(res.pool.size()) + "; skipped");
      continue;
    }
    // Every subset is identical when nothing or everything is kept.
    const std::size_t n_trials = (count == 0 || count == res.pool.size()) ? 1 : trials;
    std::vector<double> accs;
    for (std::size_t t = 0; t < n_trials; ++t) {
      std::vector<std::size_t> keep;
      for (auto i : sample_without_replacement(rng, res.pool.size(), count)) keep.push_back(res.pool[i]);
      const auto mask = head_mask(cfg, keep);
      accs.push_back(probe_accuracy(model, probe, &mask));
    }
    AblationPoint pt;
    pt.retained = count;
    pt.trials = accs.size();
    pt.mean = std::accumulate(accs.begin(), accs.end(), 0.0) / static_cast<double>(accs.size());
    double ss = 0;
    for (double a : accs) ss += (a - pt.mean) * (a - pt.mean);
    pt.std = std::sqrt(ss / static_cast<double>(accs.size()));
    res.points.push_back(pt);
  }
  return res;
}

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationResult>& results) {
  os << "policy,retained,mean_accuracy,std_accuracy,trials\n";
  char buf[96];
  for (const auto& r : results)
    for (const auto& p : r.points) {
      std::snprintf(buf, sizeof buf, ",%zu,%.6f,%.6f,%zu\n", p.retained, p.mean, p.std, p.trials);
      os << to_string(r.policy) << buf;
    }
}

}  // namespace predinet::analysis
