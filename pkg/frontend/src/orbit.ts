/** Orbit camera parameters and their mapping to service pose parameters. */

import type { Pose } from "./api.js";

export interface Orbit {
  azimuth: number; // radians
  elevation: number; // radians, clamped near the poles
  distance: number;
}

export const ORBIT_DEFAULTS: Orbit = { azimuth: -1.57, elevation: 0.2, distance: 2.6 };

const ELEVATION_LIMIT = 1.45;
const DISTANCE_MIN = 0.5;
const DISTANCE_MAX = 10.0;

export function clampOrbit(orbit: Orbit): Orbit {
  return {
    azimuth: orbit.azimuth,
    elevation: Math.max(-ELEVATION_LIMIT, Math.min(ELEVATION_LIMIT, orbit.elevation)),
    distance: Math.max(DISTANCE_MIN, Math.min(DISTANCE_MAX, orbit.distance)),
  };
}

export function rotate(orbit: Orbit, dAzimuth: number, dElevation: number): Orbit {
  return clampOrbit({
    azimuth: orbit.azimuth + dAzimuth,
    elevation: orbit.elevation + dElevation,
    distance: orbit.distance,
  });
}

export function zoom(orbit: Orbit, factor: number): Orbit {
  return clampOrbit({ ...orbit, distance: orbit.distance * factor });
}

export function orbitToPose(orbit: Orbit, fovY = 0.75): Pose {
  const { azimuth, elevation, distance } = clampOrbit(orbit);
  const ce = Math.cos(elevation);
  return {
    position: [
      distance * ce * Math.cos(azimuth),
      distance * ce * Math.sin(azimuth),
      distance * Math.sin(elevation),
    ],
    look_at: [0, 0, 0],
    fov_y: fovY,
  };
}
