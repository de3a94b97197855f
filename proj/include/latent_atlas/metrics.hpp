#pragma once

// Reconstruction and editing-quality metrics.
//
// The perceptual distance and identity similarity use a seeded, untrained
// convolutional feature pyramid in place of pretrained networks.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "latent_atlas/autodiff.hpp"
#include "latent_atlas/image.hpp"
#include "latent_atlas/random.hpp"

namespace latent_atlas {

inline constexpr const char* kSurrogateNotice =
    "perceptual and identity metrics use a seeded random convolutional feature pyramid, "
    "not LPIPS or a face-recognition network";

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (a.tensor().shape() != b.tensor().shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.tensor().shape()) + " vs " +
                     shape_str(b.tensor().shape()));
  }
}

inline double mse(const Image& a, const Image& b) {
  require_same_shape(a, b, "mse");
  const auto x = a.tensor().data(), y = b.tensor().data();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return s / static_cast<double>(x.size());
}

// ---------------------------------------------------------------------------
// SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, L = 1,
// valid windows only, mean over positions then channels.

struct SsimParams {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

inline std::vector<double> gaussian_window_1d(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  double s = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double x = static_cast<double>(i) - c;
    g[i] = std::exp(-(x * x) / (2.0 * sigma * sigma));
    s += g[i];
  }
  for (double& v : g) v /= s;
  return g;
}

inline double ssim(const Image& a, const Image& b, const SsimParams& prm = {}) {
  require_same_shape(a, b, "ssim");
  const std::size_t h = a.height(), w = a.width(), k = prm.window;
  if (h < k || w < k) {
    throw ShapeError("ssim: image " + std::to_string(h) + "x" + std::to_string(w) +
                     " smaller than window " + std::to_string(k));
  }
  const auto g = gaussian_window_1d(k, prm.sigma);
  const double c1 = std::pow(prm.k1 * prm.dynamic_range, 2);
  const double c2 = std::pow(prm.k2 * prm.dynamic_range, 2);
  const std::size_t oh = h - k + 1, ow = w - k + 1;

  // Separable valid filtering of one plane.
  auto filter = [&](const std::vector<double>& src) {
    std::vector<double> tmp(h * ow, 0.0), out(oh * ow, 0.0);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += g[j] * src[y * w + x + j];
        tmp[y * ow + x] = s;
      }
    }
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += g[j] * tmp[(y + j) * ow + x];
        out[y * ow + x] = s;
      }
    }
    return out;
  };

  double total = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> x(h * w), y(h * w), xx(h * w), yy(h * w), xy(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
      x[i] = a.tensor()[c * h * w + i];
      y[i] = b.tensor()[c * h * w + i];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter(x), my = filter(y), sxx = filter(xx), syy = filter(yy), sxy = filter(xy);
    double acc = 0.0;
    for (std::size_t i = 0; i < oh * ow; ++i) {
      const double vx = sxx[i] - mx[i] * mx[i];
      const double vy = syy[i] - my[i] * my[i];
      const double cxy = sxy[i] - mx[i] * my[i];
      acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += acc / static_cast<double>(oh * ow);
  }
  return total / 3.0;
}

// ---------------------------------------------------------------------------
// Feature extractor: stages of conv3x3 -> leaky-relu -> 2x2 average pool.

class FeatureExtractor {
 public:
  explicit FeatureExtractor(std::uint64_t seed = 101, std::vector<std::size_t> channels = {8, 16, 16})
      : seed_(seed), channels_(std::move(channels)) {
    Rng rng(derive_seed(seed, 0xfea7));
    std::size_t c_in = 3;
    const double gain = std::sqrt(2.0 / 1.04);
    for (std::size_t c : channels_) {
      const double fan_in = static_cast<double>(c_in * 9);
      weights_.push_back(std::make_shared<const Tensor>(gaussian_tensor(rng, {c, c_in, 3, 3}, gain / std::sqrt(fan_in))));
      biases_.push_back(std::make_shared<const Tensor>(gaussian_tensor(rng, {c}, 0.05)));
      c_in = c;
    }
  }

  std::uint64_t seed() const { return seed_; }
  std::size_t stages() const { return channels_.size(); }

  /// Raw per-stage feature maps of an image node.
  std::vector<ad::Var> build(ad::Graph& g, ad::Var image) const {
    std::vector<ad::Var> out;
    ad::Var x = image;
    for (std::size_t k = 0; k < channels_.size(); ++k) {
      x = g.conv2d(x, g.constant(weights_[k]), g.constant(biases_[k]));
      x = g.leaky_relu(x, 0.2);
      x = g.avgpool2x(x);
      out.push_back(x);
    }
    return out;
  }

  /// Per-stage features scaled to unit L2 norm.
  std::vector<ad::Var> build_normalized(ad::Graph& g, ad::Var image) const {
    std::vector<ad::Var> out;
    for (ad::Var f : build(g, image)) out.push_back(g.mul(f, g.pow(g.l2_norm(f), -1.0)));
    return out;
  }

  /// Unit-normalized stage features, evaluated with the same graph operations
  /// the losses use so that identical images give bit-identical features.
  std::vector<Tensor> normalized_features(const Image& img) const {
    ad::Graph g;
    ad::Var x = g.constant(img.tensor());
    const auto raw = build(g, x);
    std::vector<ad::Var> norms, units;
    for (ad::Var f : raw) {
      norms.push_back(g.l2_norm(f));
      units.push_back(g.mul(f, g.pow(norms.back(), -1.0)));
    }
    g.forward();
    std::vector<Tensor> out;
    for (std::size_t k = 0; k < raw.size(); ++k) {
      if (g.value(norms[k]).item() == 0.0) throw NumericalError("feature extractor: zero feature vector");
      out.push_back(g.value(units[k]));
    }
    return out;
  }

  /// Mean over stages of ||u_k(x) - t_k||^2 with unit-normalized stage features.
  ad::Var perceptual_loss(ad::Graph& g, ad::Var image, const std::vector<Tensor>& target_units) const {
    const auto units = build_normalized(g, image);
    if (units.size() != target_units.size()) throw ShapeError("perceptual: stage count mismatch");
    std::optional<ad::Var> total;
    for (std::size_t k = 0; k < units.size(); ++k) {
      ad::Var t = g.constant(target_units[k]);
      ad::Var term = g.scale(g.mse(units[k], t), static_cast<double>(target_units[k].size()));
      total = total ? g.add(*total, term) : term;
    }
    return g.scale(*total, 1.0 / static_cast<double>(units.size()));
  }

 private:
  std::uint64_t seed_;
  std::vector<std::size_t> channels_;
  std::vector<std::shared_ptr<const Tensor>> weights_;
  std::vector<std::shared_ptr<const Tensor>> biases_;
};

inline double perceptual(const FeatureExtractor& fx, const Image& a, const Image& b) {
  require_same_shape(a, b, "perceptual");
  const auto ua = fx.normalized_features(a);
  const auto ub = fx.normalized_features(b);
  double total = 0.0;
  for (std::size_t k = 0; k < ua.size(); ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < ua[k].size(); ++i) s += (ua[k][i] - ub[k][i]) * (ua[k][i] - ub[k][i]);
    total += s;
  }
  return total / static_cast<double>(ua.size());
}

/// Cosine similarity of the concatenated unit-normalized stage features.
inline double identity_similarity(const FeatureExtractor& fx, const Image& a, const Image& b) {
  require_same_shape(a, b, "identity_similarity");
  const auto ua = fx.normalized_features(a);
  const auto ub = fx.normalized_features(b);
  double s = 0.0;
  for (std::size_t k = 0; k < ua.size(); ++k) s += dot(ua[k].data(), ub[k].data());
  return std::clamp(s / static_cast<double>(ua.size()), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Student t distribution.

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-15;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                          b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// CDF of Student's t with df degrees of freedom.
inline double student_t_cdf(double t, double df) {
  if (!(df > 0.0)) throw ConfigError("student_t_cdf: df must be positive");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double x = df / (df + t * t);
  const double tail = 0.5 * incomplete_beta(df / 2.0, 0.5, x);
  return t > 0.0 ? 1.0 - tail : tail;
}

// ---------------------------------------------------------------------------
// One-sided paired non-inferiority t-test.

enum class MetricSense { kLowerIsBetter, kHigherIsBetter };

struct NonInferiorityResult {
  std::size_t n = 0;
  double margin = 0.0;
  double mean = 0.0;       // mean of oriented differences
  double stddev = 0.0;     // sample standard deviation
  double t_statistic = 0.0;
  double p_value = 1.0;
  bool degenerate = false;  // zero variance; p set by convention
  std::string convention;
};

/// H0: mean(d) >= margin, H1: mean(d) < margin, with d = new - baseline for
/// lower-is-better metrics and d = baseline - new for higher-is-better ones.
/// Inputs are always new - baseline. With zero variance p is 0 (mean below
/// margin), 0.5 (mean exactly at margin) or 1 (above).
inline NonInferiorityResult noninferiority_test(std::span<const double> new_minus_baseline, double margin,
                                                MetricSense sense = MetricSense::kLowerIsBetter) {
  const std::size_t n = new_minus_baseline.size();
  if (n < 3) throw ConfigError("noninferiority_test: need at least 3 paired differences");
  if (!(margin > 0.0)) throw ConfigError("noninferiority_test: margin must be positive");
  NonInferiorityResult r;
  r.n = n;
  r.margin = margin;
  const double sign = sense == MetricSense::kLowerIsBetter ? 1.0 : -1.0;
  r.convention = sense == MetricSense::kLowerIsBetter
                     ? "d = new - baseline; H0: mean(d) >= margin"
                     : "d = baseline - new (higher is better); H0: mean(d) >= margin";
  double s = 0.0;
  for (double v : new_minus_baseline) {
    if (!std::isfinite(v)) throw NumericalError("noninferiority_test: non-finite difference");
    s += sign * v;
  }
  r.mean = s / static_cast<double>(n);
  double ss = 0.0;
  for (double v : new_minus_baseline) ss += (sign * v - r.mean) * (sign * v - r.mean);
  r.stddev = std::sqrt(ss / static_cast<double>(n - 1));
  if (r.stddev == 0.0) {
    r.degenerate = true;
    if (r.mean < margin) {
      r.t_statistic = -std::numeric_limits<double>::infinity();
      r.p_value = 0.0;
    } else if (r.mean == margin) {
      r.t_statistic = 0.0;
      r.p_value = 0.5;
    } else {
      r.t_statistic = std::numeric_limits<double>::infinity();
      r.p_value = 1.0;
    }
    return r;
  }
  r.t_statistic = (r.mean - margin) / (r.stddev / std::sqrt(static_cast<double>(n)));
  r.p_value = student_t_cdf(r.t_statistic, static_cast<double>(n - 1));
  return r;
}

// ---------------------------------------------------------------------------
// MetricsRow CSV.

struct MetricsRow {
  std::string target;
  std::string space;
  double mse = 0.0;
  double ssim = 0.0;
  double perceptual = 0.0;
  std::optional<double> identity;
  std::optional<double> alpha;
  std::optional<double> indist;

  bool operator==(const MetricsRow&) const = default;
};

inline constexpr const char* kMetricsHeader = "target,space,mse,ssim,perceptual,identity,alpha,indist";

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  return out + "\"";
}

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_real(*v) : ""; }

inline std::string to_csv_line(const MetricsRow& r) {
  return csv_quote(r.target) + "," + csv_quote(r.space) + "," + format_real(r.mse) + "," + format_real(r.ssim) +
         "," + format_real(r.perceptual) + "," + format_optional(r.identity) + "," + format_optional(r.alpha) + "," +
         format_optional(r.indist);
}

inline std::string to_csv(const std::vector<MetricsRow>& rows) {
  std::string out = std::string(kMetricsHeader) + "\r\n";
  for (const auto& r : rows) out += to_csv_line(r) + "\r\n";
  return out;
}

/// RFC-4180 record splitting (quoted fields may contain commas, quotes and
/// line breaks).
inline std::vector<std::vector<std::string>> parse_csv_records(const std::string& text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      record.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\r' || c == '\n') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        record.push_back(std::move(field));
        records.push_back(std::move(record));
      }
      record.clear();
      field.clear();
      any = false;
    } else {
      field.push_back(c);
      any = true;
    }
  }
  if (quoted) throw ConfigError("csv: unterminated quoted field");
  if (any || !field.empty()) {
    record.push_back(std::move(field));
    records.push_back(std::move(record));
  }
  return records;
}

inline std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  const auto records = parse_csv_records(text);
  if (records.empty()) throw ConfigError("csv: missing header");
  std::string header;
  for (std::size_t i = 0; i < records[0].size(); ++i) header += (i ? "," : "") + records[0][i];
  if (header != kMetricsHeader) throw ConfigError("csv: unexpected header '" + header + "'");
  auto opt = [](const std::string& s) -> std::optional<double> {
    if (s.empty()) return std::nullopt;
    return std::stod(s);
  };
  std::vector<MetricsRow> rows;
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& f = records[r];
    if (f.size() != 8) throw ConfigError("csv: row " + std::to_string(r) + " has " + std::to_string(f.size()) + " fields");
    MetricsRow m;
    m.target = f[0];
    m.space = f[1];
    m.mse = std::stod(f[2]);
    m.ssim = std::stod(f[3]);
    m.perceptual = std::stod(f[4]);
    m.identity = opt(f[5]);
    m.alpha = opt(f[6]);
    m.indist = opt(f[7]);
    rows.push_back(std::move(m));
  }
  return rows;
}

}  // namespace latent_atlas
