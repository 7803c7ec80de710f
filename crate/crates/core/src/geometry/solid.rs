//! Analytic primitives and constructive combinations of them.

use serde::{Deserialize, Serialize};

use crate::sim3::Vec3;

/// Axis-aligned bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&o.min),
            max: self.max.sup(&o.max),
        }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        0.5 * (self.min + self.max)
    }

    pub fn from_points<'a>(pts: impl IntoIterator<Item = &'a Vec3>) -> Option<Aabb> {
        let mut it = pts.into_iter();
        let first = *it.next()?;
        Some(it.fold(Aabb { min: first, max: first }, |b, p| Aabb {
            min: b.min.inf(p),
            max: b.max.sup(p),
        }))
    }
}

/// Signed-distance primitives. Cylinders and cups stand along `+y`.
///
/// Combinations use min/max, which keeps the field 1-Lipschitz and exact
/// outside the solid, but only a bound inside near concave edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Solid {
    Sphere { center: [f64; 3], radius: f64 },
    Cuboid { center: [f64; 3], half: [f64; 3] },
    Cylinder { center: [f64; 3], radius: f64, half_height: f64 },
    /// Ring lying in the vertical plane through `center` that contains the
    /// horizontal direction at angle `azimuth` (radians from `+x` towards `+z`).
    Torus { center: [f64; 3], azimuth: f64, major: f64, minor: f64 },
    Union { a: Box<Solid>, b: Box<Solid> },
    Subtract { a: Box<Solid>, b: Box<Solid> },
}

fn v(a: [f64; 3]) -> Vec3 {
    Vec3::from(a)
}

impl Solid {
    pub fn union(a: Solid, b: Solid) -> Solid {
        Solid::Union {
            a: Box::new(a),
            b: Box::new(b),
        }
    }

    pub fn subtract(a: Solid, b: Solid) -> Solid {
        Solid::Subtract {
            a: Box::new(a),
            b: Box::new(b),
        }
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            Solid::Sphere { center, radius } => (p - v(*center)).norm() - radius,
            Solid::Cuboid { center, half } => {
                let q = (p - v(*center)).abs() - v(*half);
                let outside = q.sup(&Vec3::zeros()).norm();
                outside + q.max().min(0.0)
            }
            Solid::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let q = p - v(*center);
                let dr = (q.x * q.x + q.z * q.z).sqrt() - radius;
                let dy = q.y.abs() - half_height;
                dr.max(dy).min(0.0) + (dr.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt()
            }
            Solid::Torus {
                center,
                azimuth,
                major,
                minor,
            } => {
                let q = p - v(*center);
                let (s, c) = azimuth.sin_cos();
                let a = q.x * c + q.z * s;
                let e = -q.x * s + q.z * c;
                let ring = (a * a + q.y * q.y).sqrt() - major;
                (ring * ring + e * e).sqrt() - minor
            }
            Solid::Union { a, b } => a.sdf(p).min(b.sdf(p)),
            Solid::Subtract { a, b } => a.sdf(p).max(-b.sdf(p)),
        }
    }

    pub fn bounds(&self) -> Aabb {
        match self {
            Solid::Sphere { center, radius } => {
                let r = Vec3::repeat(*radius);
                Aabb {
                    min: v(*center) - r,
                    max: v(*center) + r,
                }
            }
            Solid::Cuboid { center, half } => Aabb {
                min: v(*center) - v(*half),
                max: v(*center) + v(*half),
            },
            Solid::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let h = Vec3::new(*radius, *half_height, *radius);
                Aabb {
                    min: v(*center) - h,
                    max: v(*center) + h,
                }
            }
            Solid::Torus {
                center,
                azimuth,
                major,
                minor,
            } => {
                // Support of a circle of radius R in span(d, y) along axis u
                // is R·|(u·d, u·y)|.
                let (s, c) = azimuth.sin_cos();
                let h = Vec3::new(major * c.abs() + minor, major + minor, major * s.abs() + minor);
                Aabb {
                    min: v(*center) - h,
                    max: v(*center) + h,
                }
            }
            Solid::Union { a, b } => a.bounds().union(&b.bounds()),
            // Carving never widens the bounds; callers only carve interiors
            // and corners, so the outer box is kept.
            Solid::Subtract { a, .. } => a.bounds(),
        }
    }

    /// Applies `p ↦ scale·p + offset` to the solid.
    pub fn transformed(&self, scale: f64, offset: &Vec3) -> Solid {
        let mv = |c: &[f64; 3]| -> [f64; 3] { (scale * v(*c) + offset).into() };
        match self {
            Solid::Sphere { center, radius } => Solid::Sphere {
                center: mv(center),
                radius: radius * scale,
            },
            Solid::Cuboid { center, half } => Solid::Cuboid {
                center: mv(center),
                half: (scale * v(*half)).into(),
            },
            Solid::Cylinder {
                center,
                radius,
                half_height,
            } => Solid::Cylinder {
                center: mv(center),
                radius: radius * scale,
                half_height: half_height * scale,
            },
            Solid::Torus {
                center,
                azimuth,
                major,
                minor,
            } => Solid::Torus {
                center: mv(center),
                azimuth: *azimuth,
                major: major * scale,
                minor: minor * scale,
            },
            Solid::Union { a, b } => Solid::union(a.transformed(scale, offset), b.transformed(scale, offset)),
            Solid::Subtract { a, b } => Solid::subtract(a.transformed(scale, offset), b.transformed(scale, offset)),
        }
    }

    /// Closed-form first hit along `o + t·d` for `t ≥ t_min`, for the
    /// primitives where it is cheap. `None` means "not available".
    pub fn analytic_hit(&self, o: &Vec3, d: &Vec3, t_min: f64) -> Option<Option<f64>> {
        match self {
            Solid::Sphere { center, radius } => {
                let oc = o - v(*center);
                let a = d.dot(d);
                let b = oc.dot(d);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return Some(None);
                }
                let sq = disc.sqrt();
                let roots = [(-b - sq) / a, (-b + sq) / a];
                Some(roots.into_iter().find(|&t| t >= t_min))
            }
            Solid::Cuboid { center, half } => {
                let lo = v(*center) - v(*half);
                let hi = v(*center) + v(*half);
                Some(slab_entry(o, d, &lo, &hi, t_min))
            }
            _ => None,
        }
    }

    pub fn is_primitive(&self) -> bool {
        !matches!(self, Solid::Union { .. } | Solid::Subtract { .. })
    }
}

/// Entry parameter of a ray into a box, or the exit if the origin is inside.
pub fn slab_range(o: &Vec3, d: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if d[k].abs() < 1e-300 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let a = (lo[k] - o[k]) / d[k];
        let b = (hi[k] - o[k]) / d[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1).then_some((t0, t1))
}

fn slab_entry(o: &Vec3, d: &Vec3, lo: &Vec3, hi: &Vec3, t_min: f64) -> Option<f64> {
    let (t0, t1) = slab_range(o, d, lo, hi)?;
    if t0 >= t_min {
        Some(t0)
    } else if t1 >= t_min {
        Some(t1)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_values() {
        let s = Solid::Sphere {
            center: [0.0; 3],
            radius: 0.4,
        };
        assert_eq!(s.sdf(&Vec3::zeros()), -0.4);
        let b = Solid::Cuboid {
            center: [0.0; 3],
            half: [0.5, 0.25, 0.25],
        };
        assert!((b.sdf(&Vec3::new(0.75, 0.0, 0.0)) - 0.25).abs() < 1e-15);
        assert!((b.sdf(&Vec3::zeros()) + 0.25).abs() < 1e-15);
        let c = Solid::Cylinder {
            center: [0.0; 3],
            radius: 0.3,
            half_height: 0.2,
        };
        assert!((c.sdf(&Vec3::new(0.0, 0.5, 0.0)) - 0.3).abs() < 1e-15);
        assert!((c.sdf(&Vec3::new(0.6, 0.0, 0.0)) - 0.3).abs() < 1e-15);
        let t = Solid::Torus {
            center: [0.0; 3],
            azimuth: 0.0,
            major: 0.3,
            minor: 0.05,
        };
        // Ring passes through (0.3, 0, 0) and (0, 0.3, 0).
        assert!((t.sdf(&Vec3::new(0.3, 0.0, 0.0)) + 0.05).abs() < 1e-15);
        assert!((t.sdf(&Vec3::new(0.0, 0.3, 0.0)) + 0.05).abs() < 1e-15);
        assert!((t.sdf(&Vec3::new(0.0, 0.0, 0.3)) - (0.3f64.hypot(0.3) - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn torus_bounds_match_support() {
        let t = Solid::Torus {
            center: [0.0; 3],
            azimuth: 0.7,
            major: 0.3,
            minor: 0.05,
        };
        let b = t.bounds();
        // Dense scan of the ring centre line plus the tube radius.
        let mut maxx: f64 = 0.0;
        for i in 0..10000 {
            let th = i as f64 / 10000.0 * std::f64::consts::TAU;
            maxx = maxx.max((0.3 * th.cos() * 0.7f64.cos()).abs());
        }
        assert!((b.max.x - (maxx + 0.05)).abs() < 1e-6);
    }

    #[test]
    fn sphere_ray_hit() {
        let s = Solid::Sphere {
            center: [0.0; 3],
            radius: 0.4,
        };
        let hit = s
            .analytic_hit(&Vec3::new(0.0, 0.0, 2.0), &Vec3::new(0.0, 0.0, -1.0), 0.0)
            .unwrap()
            .unwrap();
        assert!((hit - 1.6).abs() < 1e-15);
    }
}
