use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Pinhole camera with OpenCV conventions: `x_cam = R x_world + t`, the
/// camera looks down `+z`, image `y` points down, and pixel `(i, j)` has its
/// center at `(i + 0.5, j + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Intrinsics, row-major.
    #[serde(rename = "K")]
    pub k: [f64; 9],
    /// World-to-camera `[R | t]`, row-major 3x4.
    #[serde(rename = "W2C")]
    pub w2c: [f64; 12],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.k)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let w = &self.w2c;
        Matrix3::new(w[0], w[1], w[2], w[4], w[5], w[6], w[8], w[9], w[10])
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.w2c[3], self.w2c[7], self.w2c[11])
    }

    /// Camera center in world space, `-Rᵀt`.
    pub fn center(&self) -> [f64; 3] {
        let c = -(self.rotation().transpose() * self.translation());
        [c.x, c.y, c.z]
    }

    /// Checks that `K` is invertible and `R` orthonormal to 1e-6.
    pub fn validate(&self) -> Result<(), String> {
        if self.intrinsics().determinant().abs() < 1e-12 {
            return Err("intrinsics are singular".into());
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(format!("rotation is not orthonormal (error {err:.3e})"));
        }
        if self.width == 0 || self.height == 0 {
            return Err("zero resolution".into());
        }
        Ok(())
    }

    /// Unit world-space direction through image point `(u, v)` in pixels.
    pub fn direction(&self, u: f64, v: f64) -> [f64; 3] {
        let kinv = self.intrinsics().try_inverse().expect("validated intrinsics");
        let d_cam = kinv * Vector3::new(u, v, 1.0);
        let d = (self.rotation().transpose() * d_cam).normalize();
        [d.x, d.y, d.z]
    }

    /// Pixel coordinates of a world point, or `None` behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let pc = self.rotation() * Vector3::from(p) + self.translation();
        if pc.z <= 0.0 {
            return None;
        }
        let q = self.intrinsics() * pc;
        Some([q.x / q.z, q.y / q.z])
    }

    /// Camera at `eye` looking at `target`, with `up` roughly up in the image.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], focal: f64, width: usize, height: usize) -> Self {
        let eye = Vector3::from(eye);
        let z = (Vector3::from(target) - eye).normalize();
        let mut x = z.cross(&Vector3::from(up));
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::new(1.0, 0.0, 0.0));
        }
        let x = x.normalize();
        // image y points down
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye);
        let k = [
            focal,
            0.0,
            width as f64 / 2.0,
            0.0,
            focal,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        ];
        let w2c = [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ];
        Camera { k, w2c, width, height }
    }

    /// Same camera in a world scaled by `1 / scale` about the origin.
    pub fn rescaled(&self, scale: f64) -> Self {
        let mut out = self.clone();
        out.w2c[3] /= scale;
        out.w2c[7] /= scale;
        out.w2c[11] /= scale;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_round_trips_center_and_projection() {
        let cam = Camera::look_at([0.3, -2.0, 1.1], [0.0; 3], [0.0, 0.0, 1.0], 70.0, 64, 48);
        cam.validate().unwrap();
        let c = cam.center();
        assert!((c[0] - 0.3).abs() < 1e-12 && (c[1] + 2.0).abs() < 1e-12 && (c[2] - 1.1).abs() < 1e-12);
        let px = cam.project([0.0; 3]).unwrap();
        assert!((px[0] - 32.0).abs() < 1e-9 && (px[1] - 24.0).abs() < 1e-9);
        let d = cam.direction(10.5, 7.5);
        let p = [c[0] + 2.0 * d[0], c[1] + 2.0 * d[1], c[2] + 2.0 * d[2]];
        let back = cam.project(p).unwrap();
        assert!((back[0] - 10.5).abs() < 1e-9 && (back[1] - 7.5).abs() < 1e-9);
    }

    #[test]
    fn rescaling_moves_center() {
        let cam = Camera::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 50.0, 8, 8);
        let c = cam.rescaled(2.0).center();
        assert!((c[2] - 1.5).abs() < 1e-12);
    }
}
