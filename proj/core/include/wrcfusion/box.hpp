#pragma once
#include <cstddef>

namespace wrc {

// 7-parameter 3D box in the ego frame (x forward, y left, z up). w is the
// lateral extent, l the extent along the heading, yaw in (-pi, pi].
struct Box3D {
  double x = 0, y = 0, z = 0;
  double w = 1, l = 1, h = 1;
  double yaw = 0;
};

struct GroundTruthBox {
  int class_id = 0;
  Box3D box;
  double radial_velocity = 0;  // annotated by synthesis, not regressed
};

}  // namespace wrc
