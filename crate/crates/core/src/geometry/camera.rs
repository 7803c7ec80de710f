//! Pinhole camera: `x` right, `y` down, `z` forward; pixel `(i, j)` has its
//! centre at column `j + 0.5`, row `i + 0.5`.

use serde::{Deserialize, Serialize};

use super::GeometryError;
use crate::sim3::{axis_angle, Mat3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: Vec3,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub size: usize,
}

impl Camera {
    /// Camera at `eye` looking at `target` with vertical field of view `fov_y`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y: f64, size: usize) -> Result<Self, GeometryError> {
        let z = target - eye;
        if z.norm() < 1e-12 {
            return Err(GeometryError::Invalid("eye coincides with target".into()));
        }
        let z = z.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(GeometryError::Invalid("up vector parallel to viewing direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let f = 0.5 * size as f64 / (0.5 * fov_y).tan();
        let cam = Self {
            fx: f,
            fy: f,
            cx: 0.5 * size as f64,
            cy: 0.5 * size as f64,
            rotation,
            translation: -(rotation * eye),
            size,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ortho = (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max();
        if !(self.fx > 0.0 && self.fy > 0.0) || self.size == 0 {
            return Err(GeometryError::Invalid("focal lengths and size must be positive".into()));
        }
        if ortho > 1e-9 || self.rotation.determinant() <= 0.0 {
            return Err(GeometryError::Invalid("camera rotation is not a proper rotation".into()));
        }
        Ok(())
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, world: &Vec3) -> Vec3 {
        self.rotation * world + self.translation
    }

    pub fn to_world(&self, cam: &Vec3) -> Vec3 {
        self.rotation.transpose() * (cam - self.translation)
    }

    /// World-space ray through a pixel centre, scaled so the camera-frame
    /// `z` component of the direction is 1 (the ray parameter is depth).
    pub fn pixel_ray(&self, row: usize, col: usize) -> (Vec3, Vec3) {
        let d = Vec3::new(
            (col as f64 + 0.5 - self.cx) / self.fx,
            (row as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        );
        (self.center(), self.rotation.transpose() * d)
    }

    /// Image coordinates `(u, v)` and depth of a world point.
    pub fn project(&self, world: &Vec3) -> (f64, f64, f64) {
        let c = self.to_camera(world);
        (self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z)
    }

    /// Camera-frame point at image position `(u, v)` and depth `z`.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z)
    }

    /// Same camera rolled by `angle` about its optical axis.
    pub fn rolled(&self, angle: f64) -> Self {
        let r = axis_angle(Vec3::z(), angle);
        Self {
            rotation: r * self.rotation,
            translation: r * self.translation,
            ..*self
        }
    }

    pub fn to_record(&self) -> CameraRecord {
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[3 * i + j] = self.rotation[(i, j)];
            }
        }
        CameraRecord {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation,
            translation: self.translation.into(),
            size: self.size,
        }
    }

    pub fn from_record(r: &CameraRecord) -> Result<Self, GeometryError> {
        let cam = Self {
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
            rotation: Mat3::from_row_slice(&r.rotation),
            translation: Vec3::from(r.translation),
            size: r.size,
        };
        cam.validate()?;
        Ok(cam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera::look_at(Vec3::new(0.0, 0.0, 2.0), Vec3::zeros(), Vec3::y(), 0.6, 32).unwrap()
    }

    #[test]
    fn look_at_frame() {
        let c = cam();
        assert!((c.center() - Vec3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
        assert!((c.to_camera(&Vec3::zeros()) - Vec3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
        // World +y appears upwards, i.e. at smaller image rows.
        let (_, v, _) = c.project(&Vec3::new(0.0, 0.1, 0.0));
        assert!(v < c.cy);
    }

    #[test]
    fn principal_point_back_projects_on_axis() {
        let c = cam();
        assert_eq!(c.back_project(c.cx, c.cy, 1.5), Vec3::new(0.0, 0.0, 1.5));
    }

    #[test]
    fn project_back_project_roundtrip() {
        let c = cam();
        let p = Vec3::new(0.1, -0.2, 0.3);
        let (u, v, z) = c.project(&p);
        let back = c.to_world(&c.back_project(u, v, z));
        assert!((back - p).norm() < 1e-9);
    }

    #[test]
    fn ray_parameter_is_depth() {
        let c = cam();
        let (o, d) = c.pixel_ray(3, 20);
        let p = o + 1.7 * d;
        assert!((c.to_camera(&p).z - 1.7).abs() < 1e-12);
    }

    #[test]
    fn record_roundtrip() {
        let c = cam().rolled(0.3);
        assert_eq!(Camera::from_record(&c.to_record()).unwrap(), c);
    }
}
