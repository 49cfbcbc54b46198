use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::geometry::{Point, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    Box,
    Cylinder,
    /// Spherical shade on a thin stem with a disc base.
    Lamp,
    /// Slab top on four legs.
    Table,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::Box,
        ShapeKind::Cylinder,
        ShapeKind::Lamp,
        ShapeKind::Table,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Box => "box",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Lamp => "lamp",
            ShapeKind::Table => "table",
        }
    }

    fn surfaces(self) -> Vec<Surface> {
        match self {
            ShapeKind::Sphere => vec![Surface::Sphere { center: [0.0; 3], radius: 0.5 }],
            ShapeKind::Box => vec![Surface::Cuboid { center: [0.0; 3], half: [0.5; 3] }],
            ShapeKind::Cylinder => vec![Surface::Cylinder {
                center: [0.0; 3],
                radius: 0.5,
                half_height: 0.5,
                caps: true,
            }],
            ShapeKind::Lamp => vec![
                Surface::Sphere { center: [0.0, 0.0, 0.2], radius: 0.3 },
                Surface::Cylinder {
                    center: [0.0, 0.0, -0.2],
                    radius: 0.04,
                    half_height: 0.3,
                    caps: false,
                },
                Surface::Cylinder {
                    center: [0.0, 0.0, -0.48],
                    radius: 0.25,
                    half_height: 0.02,
                    caps: true,
                },
            ],
            ShapeKind::Table => {
                let mut s = vec![Surface::Cuboid {
                    center: [0.0, 0.0, 0.45],
                    half: [0.5, 0.35, 0.05],
                }];
                for (x, y) in [(0.42, 0.28), (-0.42, 0.28), (0.42, -0.28), (-0.42, -0.28)] {
                    s.push(Surface::Cuboid {
                        center: [x, y, -0.05],
                        half: [0.04, 0.04, 0.45],
                    });
                }
                s
            }
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DataError::UnknownKind(s.to_string()))
    }
}

/// A parametric shape instance: canonical surface, per-axis scale, then a
/// rotation by `pose = (roll, pitch, yaw)` radians about x, y, z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub scale: [f64; 3],
    pub pose: [f64; 3],
    pub seed: u64,
}

impl ShapeSpec {
    pub fn canonical(kind: ShapeKind, seed: u64) -> Self {
        Self {
            kind,
            scale: [1.0; 3],
            pose: [0.0; 3],
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Surface {
    Sphere { center: Point, radius: f64 },
    Cuboid { center: Point, half: [f64; 3] },
    Cylinder { center: Point, radius: f64, half_height: f64, caps: bool },
}

impl Surface {
    fn area(&self) -> f64 {
        match *self {
            Surface::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Surface::Cuboid { half: h, .. } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
            Surface::Cylinder { radius, half_height, caps, .. } => {
                let side = 2.0 * PI * radius * 2.0 * half_height;
                if caps {
                    side + 2.0 * PI * radius * radius
                } else {
                    side
                }
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point {
        match *self {
            Surface::Sphere { center, radius } => {
                let z: f64 = rng.gen_range(-1.0..=1.0);
                let phi: f64 = rng.gen_range(0.0..2.0 * PI);
                let rho = (1.0 - z * z).max(0.0).sqrt();
                let dir = [rho * phi.cos(), rho * phi.sin(), z];
                // Renormalize so the radius is exact to rounding.
                let len = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
                [
                    center[0] + radius * dir[0] / len,
                    center[1] + radius * dir[1] / len,
                    center[2] + radius * dir[2] / len,
                ]
            }
            Surface::Cuboid { center, half } => {
                let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.gen_range(0.0..total);
                let mut axis = 2;
                for (a, &ar) in areas.iter().enumerate() {
                    if pick < ar {
                        axis = a;
                        break;
                    }
                    pick -= ar;
                }
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = if a == axis {
                        sign * half[a]
                    } else {
                        rng.gen_range(-half[a]..=half[a])
                    };
                }
                [center[0] + p[0], center[1] + p[1], center[2] + p[2]]
            }
            Surface::Cylinder { center, radius, half_height, caps } => {
                let side = 2.0 * PI * radius * 2.0 * half_height;
                let cap = if caps { PI * radius * radius } else { 0.0 };
                let pick = rng.gen_range(0.0..side + 2.0 * cap);
                let phi: f64 = rng.gen_range(0.0..2.0 * PI);
                let (r, z) = if pick < side {
                    (radius, rng.gen_range(-half_height..=half_height))
                } else {
                    let r = radius * rng.gen_range(0.0f64..=1.0).sqrt();
                    let z = if pick < side + cap { half_height } else { -half_height };
                    (r, z)
                };
                [center[0] + r * phi.cos(), center[1] + r * phi.sin(), center[2] + z]
            }
        }
    }
}

fn rotation(pose: [f64; 3]) -> [[f64; 3]; 3] {
    let (sr, cr) = pose[0].sin_cos();
    let (sp, cp) = pose[1].sin_cos();
    let (sy, cy) = pose[2].sin_cos();
    // Rz(yaw) · Ry(pitch) · Rx(roll)
    [
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ]
}

/// Seeded, area-weighted uniform sampling of `n` points on the shape
/// surface (uniform in the canonical frame, before scale and pose).
pub fn generate_shape(spec: &ShapeSpec, n: usize) -> Result<PointCloud, DataError> {
    if n == 0 {
        return Err(DataError::Count("shape sample count must be at least 1".into()));
    }
    if spec.scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(DataError::Count(format!("shape scales must be positive, got {:?}", spec.scale)));
    }
    let surfaces = spec.kind.surfaces();
    let areas: Vec<f64> = surfaces.iter().map(Surface::area).collect();
    let total: f64 = areas.iter().sum();
    let rot = rotation(spec.pose);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.gen_range(0.0..total);
        let mut chosen = surfaces.len() - 1;
        for (i, &a) in areas.iter().enumerate() {
            if pick < a {
                chosen = i;
                break;
            }
            pick -= a;
        }
        let p = surfaces[chosen].sample(&mut rng);
        let s = [p[0] * spec.scale[0], p[1] * spec.scale[1], p[2] * spec.scale[2]];
        points.push([
            rot[0][0] * s[0] + rot[0][1] * s[1] + rot[0][2] * s[2],
            rot[1][0] * s[0] + rot[1][1] * s[1] + rot[1][2] * s[2],
            rot[2][0] * s[0] + rot[2][1] * s[1] + rot[2][2] * s[2],
        ]);
    }
    Ok(PointCloud::new(points)?)
}
