#include "sfas/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <stdexcept>

namespace sfas {

namespace {

int bin_of(double v) {
  const double c = std::min(1.0, std::max(0.0, v));
  return std::min(255, static_cast<int>(c * 256.0));
}

}  // namespace

OtsuResult otsu_threshold(const Eigen::ArrayXd& image, int h, int w) {
  if (image.size() != static_cast<Eigen::Index>(h) * w)
    throw std::invalid_argument("otsu_threshold: image has " + std::to_string(image.size()) +
                                " values, expected " + std::to_string(h * w));
  if (!image.isFinite().all())
    throw std::invalid_argument("otsu_threshold: image contains non-finite values");

  double hist[256] = {0};
  for (Eigen::Index i = 0; i < image.size(); ++i) hist[bin_of(image[i])] += 1.0;
  const double total = static_cast<double>(image.size());

  // Plain per-threshold recompute; the exhaustive oracle does the same sums.
  double best_var = 0.0;
  int best_t = -1;
  for (int t = 0; t < 256; ++t) {
    double w0 = 0.0, sum0 = 0.0;
    for (int b = 0; b <= t; ++b) {
      w0 += hist[b];
      sum0 += static_cast<double>(b) * hist[b];
    }
    double w1 = 0.0, sum1 = 0.0;
    for (int b = t + 1; b < 256; ++b) {
      w1 += hist[b];
      sum1 += static_cast<double>(b) * hist[b];
    }
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double mu0 = sum0 / w0, mu1 = sum1 / w1;
    const double var = (w0 / total) * (w1 / total) * (mu0 - mu1) * (mu0 - mu1);
    if (var > best_var) {
      best_var = var;
      best_t = t;
    }
  }

  OtsuResult r;
  r.mask.assign(static_cast<size_t>(image.size()), 0);
  if (best_t < 0 || best_var == 0.0) {
    r.degenerate = true;  // constant image: no split separates anything
    return r;
  }
  r.threshold_bin = best_t;
  for (Eigen::Index i = 0; i < image.size(); ++i)
    r.mask[static_cast<size_t>(i)] = bin_of(image[i]) > best_t ? 1 : 0;
  return r;
}

// ---------------------------------------------------------------------------
// Canny + morphology pipeline
// ---------------------------------------------------------------------------

namespace {

using Grid = Eigen::ArrayXd;

inline double at_clamped(const Grid& g, int h, int w, int y, int x) {
  y = std::min(h - 1, std::max(0, y));
  x = std::min(w - 1, std::max(0, x));
  return g[y * w + x];
}

Grid gaussian_smooth(const Grid& img, int h, int w, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += kernel[static_cast<size_t>(i + radius)];
  }
  for (auto& k : kernel) k /= sum;

  Grid tmp(h * w), out(h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += kernel[static_cast<size_t>(i + radius)] * at_clamped(img, h, w, y, x + i);
      tmp[y * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += kernel[static_cast<size_t>(i + radius)] * at_clamped(tmp, h, w, y + i, x);
      out[y * w + x] = acc;
    }
  return out;
}

std::vector<uint8_t> dilate(const std::vector<uint8_t>& m, int h, int w,
                            const std::vector<std::pair<int, int>>& se) {
  std::vector<uint8_t> out(m.size(), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!m[static_cast<size_t>(y * w + x)]) continue;
      for (auto [dy, dx] : se) {
        const int ny = y + dy, nx = x + dx;
        if (ny >= 0 && ny < h && nx >= 0 && nx < w) out[static_cast<size_t>(ny * w + nx)] = 1;
      }
    }
  return out;
}

std::vector<uint8_t> erode(const std::vector<uint8_t>& m, int h, int w,
                           const std::vector<std::pair<int, int>>& se) {
  std::vector<uint8_t> out(m.size(), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bool keep = true;
      for (auto [dy, dx] : se) {
        const int ny = y + dy, nx = x + dx;
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;  // outside ignored
        if (!m[static_cast<size_t>(ny * w + nx)]) {
          keep = false;
          break;
        }
      }
      out[static_cast<size_t>(y * w + x)] = keep && m[static_cast<size_t>(y * w + x)] ? 1 : 0;
    }
  return out;
}

void flood(const std::vector<uint8_t>& open, int h, int w, int start, std::vector<uint8_t>& seen) {
  std::queue<int> q;
  if (!open[static_cast<size_t>(start)] || seen[static_cast<size_t>(start)]) return;
  seen[static_cast<size_t>(start)] = 1;
  q.push(start);
  const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
  while (!q.empty()) {
    const int p = q.front();
    q.pop();
    const int y = p / w, x = p % w;
    for (int k = 0; k < 4; ++k) {
      const int ny = y + dy[k], nx = x + dx[k];
      if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
      const int np = ny * w + nx;
      if (open[static_cast<size_t>(np)] && !seen[static_cast<size_t>(np)]) {
        seen[static_cast<size_t>(np)] = 1;
        q.push(np);
      }
    }
  }
}

std::vector<uint8_t> fill_holes(const std::vector<uint8_t>& m, int h, int w) {
  std::vector<uint8_t> open(m.size());
  for (size_t i = 0; i < m.size(); ++i) open[i] = m[i] ? 0 : 1;
  std::vector<uint8_t> outside(m.size(), 0);
  for (int x = 0; x < w; ++x) {
    flood(open, h, w, x, outside);
    flood(open, h, w, (h - 1) * w + x, outside);
  }
  for (int y = 0; y < h; ++y) {
    flood(open, h, w, y * w, outside);
    flood(open, h, w, y * w + (w - 1), outside);
  }
  std::vector<uint8_t> out(m.size());
  for (size_t i = 0; i < m.size(); ++i) out[i] = (m[i] || !outside[i]) ? 1 : 0;
  return out;
}

std::vector<uint8_t> largest_component(const std::vector<uint8_t>& m, int h, int w) {
  std::vector<int> label(m.size(), -1);
  int best_label = -1;
  size_t best_size = 0;
  int next = 0;
  for (int start = 0; start < h * w; ++start) {
    if (!m[static_cast<size_t>(start)] || label[static_cast<size_t>(start)] >= 0) continue;
    size_t count = 0;
    std::queue<int> q;
    label[static_cast<size_t>(start)] = next;
    q.push(start);
    while (!q.empty()) {
      const int p = q.front();
      q.pop();
      ++count;
      const int y = p / w, x = p % w;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dy == 0 && dx == 0) continue;
          const int ny = y + dy, nx = x + dx;
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          const int np = ny * w + nx;
          if (m[static_cast<size_t>(np)] && label[static_cast<size_t>(np)] < 0) {
            label[static_cast<size_t>(np)] = next;
            q.push(np);
          }
        }
    }
    if (count > best_size) {  // ties keep the first component in scan order
      best_size = count;
      best_label = next;
    }
    ++next;
  }
  std::vector<uint8_t> out(m.size(), 0);
  if (best_label >= 0)
    for (size_t i = 0; i < m.size(); ++i) out[i] = label[i] == best_label ? 1 : 0;
  return out;
}

}  // namespace

std::vector<uint8_t> canny_morph_segment(const Eigen::ArrayXd& image, const CannyConfig& cfg,
                                         int h, int w) {
  if (image.size() != static_cast<Eigen::Index>(h) * w)
    throw std::invalid_argument("canny_morph_segment: image has " + std::to_string(image.size()) +
                                " values, expected " + std::to_string(h * w));
  if (!(cfg.low > 0.0) || !(cfg.low < cfg.high))
    throw std::invalid_argument("canny_morph_segment: thresholds must satisfy 0 < low < high");

  const Grid smooth = gaussian_smooth(image, h, w, cfg.sigma);

  Grid mag(h * w), dir(h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double gx = at_clamped(smooth, h, w, y - 1, x + 1) +
                        2.0 * at_clamped(smooth, h, w, y, x + 1) +
                        at_clamped(smooth, h, w, y + 1, x + 1) -
                        at_clamped(smooth, h, w, y - 1, x - 1) -
                        2.0 * at_clamped(smooth, h, w, y, x - 1) -
                        at_clamped(smooth, h, w, y + 1, x - 1);
      const double gy = at_clamped(smooth, h, w, y + 1, x - 1) +
                        2.0 * at_clamped(smooth, h, w, y + 1, x) +
                        at_clamped(smooth, h, w, y + 1, x + 1) -
                        at_clamped(smooth, h, w, y - 1, x - 1) -
                        2.0 * at_clamped(smooth, h, w, y - 1, x) -
                        at_clamped(smooth, h, w, y - 1, x + 1);
      mag[y * w + x] = std::hypot(gx, gy);
      dir[y * w + x] = std::atan2(gy, gx);
    }

  // Accumulation dust on flat images reaches ~1e-15; anything below this
  // floor is no edge at all.
  constexpr double kGradFloor = 1e-9;
  const double max_mag = mag.maxCoeff();
  std::vector<uint8_t> edges(static_cast<size_t>(h * w), 0);
  if (max_mag > kGradFloor) {
    // Non-max suppression along the quantized gradient direction.
    Grid nms = Grid::Zero(h * w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double m = mag[y * w + x];
        if (m == 0.0) continue;
        double angle = dir[y * w + x] * 180.0 / 3.14159265358979323846;
        if (angle < 0) angle += 180.0;
        int dy1, dx1;
        if (angle < 22.5 || angle >= 157.5) {
          dy1 = 0;
          dx1 = 1;
        } else if (angle < 67.5) {
          dy1 = 1;
          dx1 = 1;
        } else if (angle < 112.5) {
          dy1 = 1;
          dx1 = 0;
        } else {
          dy1 = 1;
          dx1 = -1;
        }
        const double n1 = at_clamped(mag, h, w, y + dy1, x + dx1);
        const double n2 = at_clamped(mag, h, w, y - dy1, x - dx1);
        if (m >= n1 && m >= n2) nms[y * w + x] = m;
      }

    const double lo = cfg.low * max_mag, hi = cfg.high * max_mag;
    std::vector<uint8_t> strong(static_cast<size_t>(h * w), 0), weak(static_cast<size_t>(h * w), 0);
    for (int i = 0; i < h * w; ++i) {
      if (nms[i] > hi)
        strong[static_cast<size_t>(i)] = 1;
      else if (nms[i] > lo)
        weak[static_cast<size_t>(i)] = 1;
    }
    // Hysteresis: weak edges survive only when 8-connected to a strong one.
    std::queue<int> q;
    for (int i = 0; i < h * w; ++i)
      if (strong[static_cast<size_t>(i)]) {
        edges[static_cast<size_t>(i)] = 1;
        q.push(i);
      }
    while (!q.empty()) {
      const int p = q.front();
      q.pop();
      const int y = p / w, x = p % w;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int ny = y + dy, nx = x + dx;
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          const int np = ny * w + nx;
          if (weak[static_cast<size_t>(np)] && !edges[static_cast<size_t>(np)]) {
            edges[static_cast<size_t>(np)] = 1;
            q.push(np);
          }
        }
    }
  }

  std::vector<std::pair<int, int>> se;
  for (int dy = -cfg.close_radius; dy <= cfg.close_radius; ++dy)
    for (int dx = -cfg.close_radius; dx <= cfg.close_radius; ++dx)
      if (dy * dy + dx * dx <= cfg.close_radius * cfg.close_radius) se.emplace_back(dy, dx);

  std::vector<uint8_t> closed = erode(dilate(edges, h, w, se), h, w, se);
  std::vector<uint8_t> filled = fill_holes(closed, h, w);
  return largest_component(filled, h, w);
}

AutosegMethod autoseg_method_from_string(const std::string& name) {
  if (name == "otsu") return AutosegMethod::otsu;
  if (name == "canny") return AutosegMethod::canny;
  throw std::invalid_argument("autoseg method must be 'otsu' or 'canny', got '" + name + "'");
}

DatasetSplit make_autoseg_labels(const DatasetSplit& split, AutosegMethod method) {
  DatasetSplit out = split;
  const Eigen::Index n = static_cast<Eigen::Index>(out.unlabeled.size());
#pragma omp parallel for schedule(static)
  for (Eigen::Index i = 0; i < n; ++i) {
    Sample& s = out.unlabeled[static_cast<size_t>(i)];
    s.mask = method == AutosegMethod::otsu ? otsu_threshold(s.image).mask
                                           : canny_morph_segment(s.image);
  }
  return out;
}

}  // namespace sfas
