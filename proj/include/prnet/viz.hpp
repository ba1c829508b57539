// Static SVG figures of a registration: orthographic XY and XZ panels with
// both clouds, keypoints and correspondence segments.
#pragma once

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "prnet/config.hpp"

namespace prnet {

struct Correspondence {
  std::size_t source = 0;  // index into the source cloud
  std::size_t target = 0;  // index into the target cloud
};

/// Keypoint correspondences of one ACP step in cloud indices.
inline std::vector<Correspondence> step_correspondences(const AcpDiagnostics& d) {
  std::vector<Correspondence> out;
  for (std::size_t i = 0; i < d.matches.size(); ++i)
    out.push_back({d.source_keypoints.at(i), d.target_keypoints.at(d.matches[i])});
  return out;
}

struct VizScene {
  PointCloud source;
  PointCloud target;
  std::vector<std::size_t> source_keypoints;
  std::vector<std::size_t> target_keypoints;
  std::vector<Correspondence> correspondences;
};

namespace detail {

inline std::string fmt(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.3f", v);
  return b;
}

}  // namespace detail

/// Two side-by-side panels (XY left, XZ right). Layers, bottom to top:
/// correspondence segments, target, source, keypoints.
inline std::string render_svg(const VizScene& s, const std::string& title) {
  constexpr double kPanel = 400.0, kMargin = 20.0, kTitle = 24.0;
  double lo = 0.0, hi = 0.0;
  bool first = true;
  for (const auto* c : {&s.source, &s.target})
    for (const auto& p : c->points)
      for (int k = 0; k < 3; ++k) {
        lo = first ? p[k] : std::min(lo, p[k]);
        hi = first ? p[k] : std::max(hi, p[k]);
        first = false;
      }
  const double span = std::max(hi - lo, 1e-9);
  auto sx = [&](double v, int panel) { return kMargin + panel * (kPanel + kMargin) + (v - lo) / span * kPanel; };
  auto sy = [&](double v) { return kTitle + kMargin + kPanel - (v - lo) / span * kPanel; };
  const int axes[2][2] = {{0, 1}, {0, 2}};
  std::ostringstream os;
  const double width = 2 * kPanel + 3 * kMargin, height = kPanel + 2 * kMargin + kTitle;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kMargin << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"14\">" << title
     << "</text>\n";
  for (int panel = 0; panel < 2; ++panel) {
    const int a = axes[panel][0], b = axes[panel][1];
    os << "<g id=\"panel-" << (panel == 0 ? "xy" : "xz") << "\">\n";
    os << "<rect x=\"" << detail::fmt(sx(lo, panel)) << "\" y=\"" << detail::fmt(sy(hi)) << "\" width=\"" << kPanel
       << "\" height=\"" << kPanel << "\" fill=\"none\" stroke=\"#ccc\"/>\n";
    os << "<g class=\"correspondences\" stroke=\"#999\" stroke-width=\"0.6\">\n";
    for (const auto& c : s.correspondences) {
      const Vec3& p = s.source[c.source];
      const Vec3& q = s.target[c.target];
      os << "<line x1=\"" << detail::fmt(sx(p[a], panel)) << "\" y1=\"" << detail::fmt(sy(p[b])) << "\" x2=\""
         << detail::fmt(sx(q[a], panel)) << "\" y2=\"" << detail::fmt(sy(q[b])) << "\"/>\n";
    }
    os << "</g>\n";
    auto dots = [&](const PointCloud& c, const char* cls, const char* color, double r) {
      os << "<g class=\"" << cls << "\" fill=\"" << color << "\">\n";
      for (const auto& p : c.points)
        os << "<circle cx=\"" << detail::fmt(sx(p[a], panel)) << "\" cy=\"" << detail::fmt(sy(p[b])) << "\" r=\""
           << r << "\"/>\n";
      os << "</g>\n";
    };
    dots(s.target, "target", "#1f77b4", 2.0);
    dots(s.source, "source", "#d62728", 2.0);
    PointCloud kp;
    for (auto i : s.source_keypoints) kp.points.push_back(s.source[i]);
    for (auto j : s.target_keypoints) kp.points.push_back(s.target[j]);
    dots(kp, "keypoints", "black", 1.2);
    os << "</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace prnet
