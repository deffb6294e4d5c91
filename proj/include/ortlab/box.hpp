#pragma once

#include <algorithm>
#include <cmath>

#include "ortlab/error.hpp"

namespace ortlab {

/// Axis-aligned box, center + size, normalized to the reference image.
struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;

  double x1() const { return cx - w / 2; }
  double y1() const { return cy - h / 2; }
  double x2() const { return cx + w / 2; }
  double y2() const { return cy + h / 2; }
  double area() const { return w * h; }

  static Box from_corners(double x1, double y1, double x2, double y2) {
    return Box{(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
  }

  void validate_normalized() const {
    require(cx >= 0.0 && cx <= 1.0 && cy >= 0.0 && cy <= 1.0,
            "box: center outside [0,1]");
    require(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0, "box: size outside (0,1]");
  }
};

inline double intersection_area(const Box& a, const Box& b) {
  double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  return std::max(0.0, iw) * std::max(0.0, ih);
}

inline double iou(const Box& a, const Box& b) {
  double inter = intersection_area(a, b);
  double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace ortlab
