//! Cameras, pinhole projection, inverse-depth plane-sweep candidates, and
//! cross-view epipolar feature sampling.
//!
//! Pixel convention: pixel (u, v) covers [u, u+1) x [v, v+1) with its center
//! at (u + 0.5, v + 0.5). Quarter-resolution sampling scales the intrinsics
//! by 1/4 under the same convention.

use crate::error::{Error, Result};
use crate::tensor::{bilinear_sample, Tensor};
use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

#[derive(Clone, Debug)]
pub struct CameraView {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_from_camera: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl CameraView {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Scene("camera focal lengths must be positive".into()));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::Scene(format!(
                "invalid depth range near={} far={}",
                self.near, self.far
            )));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).norm();
        if err > 1e-6 {
            return Err(Error::Scene(format!(
                "camera rotation is not orthonormal (|R'R - I| = {err:.3e})"
            )));
        }
        if (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Scene(format!(
                "camera rotation determinant {} != +1",
                r.determinant()
            )));
        }
        let bottom = self.world_from_camera.row(3);
        if (bottom - Vector4::new(0.0, 0.0, 0.0, 1.0).transpose()).norm() > 1e-9 {
            return Err(Error::Scene("world_from_camera last row must be [0,0,0,1]".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_from_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_from_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera position in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        self.translation()
    }

    /// Rigid inverse of world_from_camera.
    pub fn camera_from_world(&self) -> Matrix4<f64> {
        let r = self.rotation().transpose();
        let t = -r * self.translation();
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        m
    }

    /// Same camera at a resolution scaled by `factor` (e.g. 0.25).
    pub fn scaled(&self, factor: f64) -> CameraView {
        CameraView {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
            world_from_camera: self.world_from_camera,
            width: (self.width as f64 * factor).round() as usize,
            height: (self.height as f64 * factor).round() as usize,
            near: self.near,
            far: self.far,
        }
    }
}

/// Metric depth candidates shared by all pixels of one view, spaced
/// uniformly in inverse depth.
#[derive(Clone, Debug)]
pub struct DepthCandidates {
    values: Vec<f64>,
}

impl DepthCandidates {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn depth_candidates(near: f64, far: f64, d: usize) -> Result<DepthCandidates> {
    if !(near > 0.0 && far >= near) || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "depth_candidates: need 0 < near <= far and D >= 1 (near={near}, far={far}, D={d})"
        )));
    }
    let inv_near = 1.0 / near;
    let inv_far = 1.0 / far;
    let values = if d == 1 {
        vec![1.0 / (0.5 * (inv_near + inv_far))]
    } else {
        (0..d)
            .map(|k| {
                let t = k as f64 / (d - 1) as f64;
                1.0 / (inv_near + (inv_far - inv_near) * t)
            })
            .collect()
    };
    Ok(DepthCandidates { values })
}

/// Maps a pixel and metric depth to a world point. `u`, `v` are continuous
/// pixel coordinates (pass pixel index + 0.5 for pixel centers).
pub fn unproject(u: f64, v: f64, depth: f64, cam: &CameraView) -> Vector3<f64> {
    let xc = depth * (u - cam.cx) / cam.fx;
    let yc = depth * (v - cam.cy) / cam.fy;
    let p = cam.world_from_camera * Vector4::new(xc, yc, depth, 1.0);
    p.xyz()
}

/// Pinhole projection of a world point: continuous pixel coordinates plus
/// signed camera-frame depth. `None` when the point is at or behind the
/// camera plane (z <= 1e-9) and must be culled by the caller.
pub fn project(point: &Vector3<f64>, cam: &CameraView) -> Option<(f64, f64, f64)> {
    let p = cam.camera_from_world() * Vector4::new(point.x, point.y, point.z, 1.0);
    let z = p.z;
    if z <= 1e-9 {
        return None;
    }
    let u = cam.fx * p.x / z + cam.cx;
    let v = cam.fy * p.y / z + cam.cy;
    Some((u, v, z))
}

/// Plane-sweep sampling of a quarter-resolution target feature map.
///
/// For every source pixel p and candidate depth k, unprojects p through
/// cam_i, projects into cam_j, and bilinearly samples `f_j`. Returns the
/// `[H4, W4, D, C]` sampled features and a `[H4, W4, D]` validity mask
/// (0 exactly when the sample is fully out of view or behind the camera).
/// `cam_i` / `cam_j` are full-resolution; intrinsics are scaled to match
/// `f_j`'s grid internally.
pub fn sweep_sample(
    f_j: &Tensor<f32>,
    cam_i: &CameraView,
    cam_j: &CameraView,
    cand: &DepthCandidates,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let [h4, w4, c] = f_j.shape() else {
        return Err(Error::ShapeMismatch("sweep_sample expects f_j [H4,W4,C]".into()));
    };
    let (h4, w4, c) = (*h4, *w4, *c);
    let scale = w4 as f64 / cam_j.width as f64;
    let qi = cam_i.scaled(scale);
    let qj = cam_j.scaled(scale);
    let d = cand.len();
    let mut feat = vec![0.0f32; h4 * w4 * d * c];
    let mut mask = vec![0.0f32; h4 * w4 * d];
    let mut sample = vec![0.0f32; c];
    for py in 0..h4 {
        for px in 0..w4 {
            for (k, &depth) in cand.values().iter().enumerate() {
                let world = unproject(px as f64 + 0.5, py as f64 + 0.5, depth, &qi);
                let idx = (py * w4 + px) * d + k;
                if let Some((u, v, _z)) = project(&world, &qj) {
                    let validity =
                        bilinear_sample(f_j, (u - 0.5) as f32, (v - 0.5) as f32, &mut sample);
                    if validity > 0.0 {
                        feat[idx * c..(idx + 1) * c].copy_from_slice(&sample);
                        mask[idx] = validity;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![h4, w4, d, c], feat)?,
        Tensor::new(vec![h4, w4, d], mask)?,
    ))
}

/// Fixed-length camera descriptor: normalized intrinsics (4), rotation (9),
/// translation (3), near, far. Length 18.
pub fn camera_embedding(cam: &CameraView) -> Tensor<f32> {
    let mut v = Vec::with_capacity(18);
    v.push((cam.fx / cam.width as f64) as f32);
    v.push((cam.fy / cam.height as f64) as f32);
    v.push((cam.cx / cam.width as f64) as f32);
    v.push((cam.cy / cam.height as f64) as f32);
    let r = cam.rotation();
    for i in 0..3 {
        for j in 0..3 {
            v.push(r[(i, j)] as f32);
        }
    }
    let t = cam.translation();
    v.extend_from_slice(&[t.x as f32, t.y as f32, t.z as f32]);
    v.push(cam.near as f32);
    v.push(cam.far as f32);
    Tensor::new(vec![18], v).unwrap()
}
