#pragma once

#include <array>
#include <cmath>
#include <cstddef>

namespace atlasfuse {

/// 3-vector of doubles, used for world points (mm) and continuous voxel
/// coordinates alike.
struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const { return std::sqrt(dot(*this)); }

  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(z);
  }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

/// Integer voxel index.
struct Index3 {
  int i = 0, j = 0, k = 0;
  bool operator==(const Index3&) const = default;
};

/// Shared voxel-grid geometry of volumes, masks and displacement-field
/// control grids. Voxel (i,j,k) sits at world position origin + index*spacing
/// per axis; data is stored x-fastest.
struct GridGeometry {
  std::array<int, 3> dims{1, 1, 1};          // voxel counts
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per voxel
  std::array<double, 3> origin{0.0, 0.0, 0.0};   // world mm of voxel (0,0,0)

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }

  std::size_t linear(int i, int j, int k) const {
    return static_cast<std::size_t>(k) * dims[1] * dims[0] +
           static_cast<std::size_t>(j) * dims[0] + static_cast<std::size_t>(i);
  }

  Index3 unlinear(std::size_t idx) const {
    const std::size_t plane = static_cast<std::size_t>(dims[0]) * dims[1];
    Index3 v;
    v.k = static_cast<int>(idx / plane);
    idx %= plane;
    v.j = static_cast<int>(idx / dims[0]);
    v.i = static_cast<int>(idx % dims[0]);
    return v;
  }

  bool contains(int i, int j, int k) const {
    return i >= 0 && i < dims[0] && j >= 0 && j < dims[1] && k >= 0 && k < dims[2];
  }

  /// World position of a (possibly fractional) voxel coordinate.
  Vec3 world(double i, double j, double k) const {
    return {origin[0] + i * spacing[0], origin[1] + j * spacing[1],
            origin[2] + k * spacing[2]};
  }
  Vec3 world(const Index3& v) const { return world(v.i, v.j, v.k); }

  /// Continuous voxel coordinate of a world point (no clamping).
  Vec3 voxel_from_world(const Vec3& w) const {
    return {(w.x - origin[0]) / spacing[0], (w.y - origin[1]) / spacing[1],
            (w.z - origin[2]) / spacing[2]};
  }

  /// World position of the grid center.
  Vec3 center() const {
    return world(0.5 * (dims[0] - 1), 0.5 * (dims[1] - 1), 0.5 * (dims[2] - 1));
  }

  /// Physical field-of-view extent per axis (mm).
  Vec3 extent_mm() const {
    return {dims[0] * spacing[0], dims[1] * spacing[1], dims[2] * spacing[2]};
  }

  bool operator==(const GridGeometry&) const = default;

  bool valid() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 1) return false;
      if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a])) return false;
      if (!std::isfinite(origin[a])) return false;
    }
    return true;
  }
};

}  // namespace atlasfuse
