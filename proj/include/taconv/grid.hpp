#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "taconv/error.hpp"

namespace taconv {

/// A 2-D array of doubles, row-major. Used for single basis functions,
/// transformed filters and single image channels.
struct Plane {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Plane() = default;
  Plane(int r, int c, double fill = 0.0) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, fill) {}
  Plane(int r, int c, std::vector<double> values) : rows(r), cols(c), v(std::move(values)) {
    if (v.size() != static_cast<std::size_t>(r) * c) throw ShapeError("plane size mismatch");
  }

  double& operator()(int i, int j) { return v[static_cast<std::size_t>(i) * cols + j]; }
  double operator()(int i, int j) const { return v[static_cast<std::size_t>(i) * cols + j]; }
  // Zero outside the plane.
  double at_or_zero(int i, int j) const {
    return (i < 0 || j < 0 || i >= rows || j >= cols) ? 0.0 : (*this)(i, j);
  }
  std::size_t size() const { return v.size(); }
};

/// Pixel-centre coordinates with (0,0) at the centre of the array; x grows
/// with the column index, y with the row index.
struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<double> x;
  std::vector<double> y;

  double cx() const { return 0.5 * (cols - 1); }
  double cy() const { return 0.5 * (rows - 1); }
  std::size_t size() const { return x.size(); }
};

inline Grid make_grid(int rows, int cols) {
  if (rows < 1 || cols < 1) throw ShapeError("grid extent must be positive");
  Grid g;
  g.rows = rows;
  g.cols = cols;
  g.x.resize(static_cast<std::size_t>(rows) * cols);
  g.y.resize(g.x.size());
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      g.x[static_cast<std::size_t>(i) * cols + j] = j - g.cx();
      g.y[static_cast<std::size_t>(i) * cols + j] = i - g.cy();
    }
  return g;
}

/// Square filter grid; k must be odd so the centre falls on a pixel.
inline Grid make_grid(int k) {
  if (k < 1 || k % 2 == 0) throw ShapeError("filter grid size must be odd, got " + std::to_string(k));
  return make_grid(k, k);
}

}  // namespace taconv
