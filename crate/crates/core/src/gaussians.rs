//! 3D Gaussian primitives: covariance construction, spherical-harmonics
//! color, and per-pixel prediction from refined depth and features.

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::{unproject, CameraView};
use crate::matching::DepthDistribution;
use crate::nn::{linear, sigmoid, softplus, Activation};
use crate::refine::RefinedDepth;
use crate::sh;
use crate::tensor::{softmax_last, upsample_bilinear, Scalar, Tensor};
use crate::weights::{Init, WeightStore};

#[derive(Clone, Debug)]
pub struct Gaussian<T: Scalar = f32> {
    pub center: [T; 3],
    pub opacity: T,
    pub scale: [T; 3],
    /// Unit quaternion, (w, x, y, z).
    pub rotation: [T; 4],
    /// `(degree+1)^2` coefficients per color channel, band-major.
    pub sh: Vec<[T; 3]>,
}

#[derive(Clone, Debug)]
pub struct GaussianSet<T: Scalar = f32> {
    pub gaussians: Vec<Gaussian<T>>,
    pub sh_degree: usize,
}

impl<T: Scalar> GaussianSet<T> {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> GaussianSet<U> {
        let c = |v: T| U::from_f64c(v.to_f64().unwrap());
        GaussianSet {
            sh_degree: self.sh_degree,
            gaussians: self
                .gaussians
                .iter()
                .map(|g| Gaussian {
                    center: g.center.map(c),
                    opacity: c(g.opacity),
                    scale: g.scale.map(c),
                    rotation: g.rotation.map(c),
                    sh: g.sh.iter().map(|s| s.map(c)).collect(),
                })
                .collect(),
        }
    }

    /// Checks the type invariants of every member.
    pub fn validate(&self) -> Result<()> {
        let n = sh::num_coeffs(self.sh_degree);
        for (i, g) in self.gaussians.iter().enumerate() {
            let qn = g.rotation.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            if (qn - T::one()).abs() > T::from_f64c(1e-6) {
                return Err(Error::InvalidArgument(format!(
                    "gaussian {i}: quaternion norm {:?}",
                    qn
                )));
            }
            if g.scale.iter().any(|&s| s <= T::zero()) {
                return Err(Error::InvalidArgument(format!("gaussian {i}: non-positive scale")));
            }
            if g.opacity <= T::zero() || g.opacity >= T::one() {
                return Err(Error::InvalidArgument(format!(
                    "gaussian {i}: opacity outside (0,1)"
                )));
            }
            if g.sh.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "gaussian {i}: {} SH coefficients, expected {n}",
                    g.sh.len()
                )));
            }
        }
        Ok(())
    }
}

/// Rotation matrix from a unit quaternion (w, x, y, z).
pub fn rotation_matrix<T: Scalar>(q: [T; 4]) -> [[T; 3]; 3] {
    let [w, x, y, z] = q;
    let two = T::from_f64c(2.0);
    let one = T::one();
    [
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ]
}

/// Covariance Sigma = R diag(s^2) R^T: symmetric positive definite for any
/// positive scales.
pub fn covariance<T: Scalar>(scale: [T; 3], quaternion: [T; 4]) -> Result<[[T; 3]; 3]> {
    let norm = quaternion.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
    if norm < T::from_f64c(1e-12) {
        return Err(Error::InvalidArgument("zero-norm quaternion".into()));
    }
    let q = quaternion.map(|v| v / norm);
    let r = rotation_matrix(q);
    let s2 = [scale[0] * scale[0], scale[1] * scale[1], scale[2] * scale[2]];
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = T::zero();
            for k in 0..3 {
                acc += r[i][k] * s2[k] * r[j][k];
            }
            out[i][j] = acc;
        }
    }
    Ok(out)
}

/// Color from SH coefficients at a unit view direction:
/// clamp01(sum c_lm Y_lm + 0.5).
pub fn sh_evaluate<T: Scalar>(coeffs: &[[T; 3]], degree: usize, dir: [T; 3]) -> [T; 3] {
    let n = sh::num_coeffs(degree);
    debug_assert_eq!(coeffs.len(), n);
    let mut basis = vec![T::zero(); n];
    sh::basis(degree, dir, &mut basis);
    let half = T::from_f64c(0.5);
    let mut rgb = [half; 3];
    for (c, &b) in coeffs.iter().zip(&basis) {
        for ch in 0..3 {
            rgb[ch] += c[ch] * b;
        }
    }
    rgb.map(|v| v.max(T::zero()).min(T::one()))
}

pub fn register_head_weights(ws: &mut WeightStore, c: usize, sh_degree: usize) {
    let cin = c + 5; // feature + rgb + (max prob, entropy)
    let nsh = sh::num_coeffs(sh_degree);
    ws.ensure("head.opacity.w", vec![cin, 1], Init::FanInUniform { fan_in: cin });
    ws.ensure("head.opacity.b", vec![1], Init::Zero);
    ws.ensure("head.scale.w", vec![cin, 3], Init::FanInUniform { fan_in: cin });
    ws.ensure("head.scale.b", vec![3], Init::Zero);
    ws.ensure("head.rot.w", vec![cin, 4], Init::FanInUniform { fan_in: cin });
    ws.ensure("head.rot.b", vec![4], Init::Zero);
    ws.ensure("head.sh.w", vec![cin, 3 * nsh], Init::FanInUniform { fan_in: cin });
    ws.ensure("head.sh.b", vec![3 * nsh], Init::Zero);
}

/// Predicts one Gaussian per full-resolution pixel per view (view-major,
/// row-major order). Centers come from unprojecting the refined depth;
/// opacity, scale, rotation and SH color come from per-pixel MLP heads fed
/// with the upsampled feature vector, the pixel color, and depth-confidence
/// statistics (max softmax probability and distribution entropy).
pub fn predict_gaussians(
    refined: &[RefinedDepth],
    features: &[FeatureMap],
    images: &[Tensor<f32>],
    cams: &[CameraView],
    dists: &[DepthDistribution],
    ws: &WeightStore,
    sh_degree: usize,
) -> Result<GaussianSet<f32>> {
    let k = refined.len();
    if features.len() != k || images.len() != k || cams.len() != k || dists.len() != k {
        return Err(Error::ShapeMismatch(
            "predict_gaussians: per-view input lists must have equal length".into(),
        ));
    }
    let nsh = sh::num_coeffs(sh_degree);
    let mut gaussians = Vec::new();
    for v in 0..k {
        let cam = &cams[v];
        let (h, w) = (cam.height, cam.width);
        let depth = &refined[v].depth;
        if depth.shape() != [h, w] || images[v].shape() != [h, w, 3] {
            return Err(Error::ShapeMismatch(format!(
                "view {v}: depth/image shapes do not match camera {h}x{w}"
            )));
        }
        let c = features[v].grid.shape()[2];
        let feat_full = upsample_bilinear(&features[v].grid, 4);
        // Per-pixel confidence statistics from the depth distribution.
        let probs = softmax_last(&dists[v].logits)?;
        let d = *dists[v].logits.shape().last().unwrap();
        let (h4, w4) = (dists[v].logits.shape()[0], dists[v].logits.shape()[1]);
        let mut maxp = Tensor::zeros(vec![h4, w4]);
        let mut entropy = Tensor::zeros(vec![h4, w4]);
        for pix in 0..h4 * w4 {
            let row = &probs.data()[pix * d..(pix + 1) * d];
            let mut m = 0.0f32;
            let mut e = 0.0f32;
            for &p in row {
                m = m.max(p);
                if p > 1e-12 {
                    e -= p * p.ln();
                }
            }
            maxp.data_mut()[pix] = m;
            entropy.data_mut()[pix] = e;
        }
        let maxp_full = upsample_bilinear(&maxp, 4);
        let entropy_full = upsample_bilinear(&entropy, 4);

        let wop = ws.get("head.opacity.w")?;
        let bop = ws.get("head.opacity.b")?;
        let wsc = ws.get("head.scale.w")?;
        let bsc = ws.get("head.scale.b")?;
        let wrt = ws.get("head.rot.w")?;
        let brt = ws.get("head.rot.b")?;
        let wsh = ws.get("head.sh.w")?;
        let bsh = ws.get("head.sh.b")?;

        let mut input = Tensor::zeros(vec![c + 5]);
        for py in 0..h {
            for px in 0..w {
                let pix = py * w + px;
                let dm = depth.data()[pix];
                let inp = input.data_mut();
                inp[..c].copy_from_slice(&feat_full.data()[pix * c..(pix + 1) * c]);
                inp[c..c + 3].copy_from_slice(&images[v].data()[pix * 3..pix * 3 + 3]);
                inp[c + 3] = maxp_full.data()[pix];
                inp[c + 4] = entropy_full.data()[pix];

                let center =
                    unproject(px as f64 + 0.5, py as f64 + 0.5, dm as f64, cam);
                let op_raw = linear(&input, wop, Some(bop), Activation::None)?.data()[0];
                let opacity = sigmoid(op_raw).clamp(1e-6, 1.0 - 1e-6);
                let sc_raw = linear(&input, wsc, Some(bsc), Activation::None)?;
                let footprint = dm / cam.fx as f32;
                let scale = [
                    softplus(sc_raw.data()[0]) * footprint,
                    softplus(sc_raw.data()[1]) * footprint,
                    softplus(sc_raw.data()[2]) * footprint,
                ];
                let rt_raw = linear(&input, wrt, Some(brt), Activation::None)?;
                // Identity-biased so a zero head yields the identity rotation.
                let q = [
                    rt_raw.data()[0] + 1.0,
                    rt_raw.data()[1],
                    rt_raw.data()[2],
                    rt_raw.data()[3],
                ];
                let qn = q.iter().map(|v| v * v).sum::<f32>().sqrt();
                let rotation = if qn > 1e-8 {
                    q.map(|v| v / qn)
                } else {
                    [1.0, 0.0, 0.0, 0.0]
                };
                let sh_raw = linear(&input, wsh, Some(bsh), Activation::None)?;
                let mut shc = Vec::with_capacity(nsh);
                for band in 0..nsh {
                    shc.push([
                        sh_raw.data()[band],
                        sh_raw.data()[nsh + band],
                        sh_raw.data()[2 * nsh + band],
                    ]);
                }
                gaussians.push(Gaussian {
                    center: [center.x as f32, center.y as f32, center.z as f32],
                    opacity,
                    scale,
                    rotation,
                    sh: shc,
                });
            }
        }
    }
    Ok(GaussianSet {
        gaussians,
        sh_degree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{depth_candidates, project};
    use approx::assert_relative_eq;
    use nalgebra::{Matrix4, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn covariance_identity() {
        let s = covariance([1.0f64, 1.0, 1.0], [1.0, 0.0, 0.0, 0.0]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(s[i][j], if i == j { 1.0 } else { 0.0 }, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn covariance_axis_scales() {
        let s = covariance([2.0f64, 1.0, 1.0], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(s[0][0], 4.0, epsilon = 1e-12);
        assert_relative_eq!(s[1][1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(s[2][2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn covariance_rotated_90_about_z() {
        // 90 deg about z: q = (cos45, 0, 0, sin45); swaps x and y axes.
        let h = (0.5f64).sqrt();
        let s = covariance([2.0, 1.0, 1.0], [h, 0.0, 0.0, h]).unwrap();
        assert_relative_eq!(s[0][0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(s[1][1], 4.0, epsilon = 1e-9);
        assert_relative_eq!(s[2][2], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn covariance_rejects_zero_quaternion() {
        assert!(covariance([1.0f64, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0]).is_err());
    }

    fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
        [
            a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
        ]
    }

    fn rand_unit_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        q.map(|v| v / n)
    }

    #[test]
    fn covariance_symmetric_pd_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for _ in 0..10_000 {
            let scale: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.01..3.0));
            let q = rand_unit_quat(&mut rng);
            let s = covariance(scale, q).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert_relative_eq!(s[i][j], s[j][i], epsilon = 1e-12);
                }
            }
            // PD: Cholesky succeeds.
            let m = nalgebra::Matrix3::from_fn(|i, j| s[i][j]);
            assert!(m.cholesky().is_some(), "not PD for scale {scale:?} quat {q:?}");
        }
    }

    #[test]
    fn covariance_rotation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..200 {
            let scale: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..2.0));
            let q1 = rand_unit_quat(&mut rng);
            let q2 = rand_unit_quat(&mut rng);
            let composed = covariance(scale, quat_mul(q2, q1)).unwrap();
            let base = covariance(scale, q1).unwrap();
            let r2 = rotation_matrix(q2);
            // R2 * base * R2^T
            let mut expect = [[0.0f64; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for a in 0..3 {
                        for b in 0..3 {
                            expect[i][j] += r2[i][a] * base[a][b] * r2[j][b];
                        }
                    }
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    assert_relative_eq!(composed[i][j], expect[i][j], epsilon = 1e-5);
                }
            }
        }
    }

    #[test]
    fn sh_degree0_offset() {
        let c = vec![[0.0f64; 3]];
        let rgb = sh_evaluate(&c, 0, [0.0, 0.0, 1.0]);
        for v in rgb {
            assert_relative_eq!(v, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn sh_degree0_saturates_at_one() {
        let c0 = 0.5 / sh::SH_C0;
        let c = vec![[c0, c0, c0]];
        let rgb = sh_evaluate(&c, 0, [1.0, 0.0, 0.0]);
        for v in rgb {
            assert_relative_eq!(v, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn sh_degree0_direction_invariant() {
        let c = vec![[0.2f64, -0.1, 0.05]];
        let a = sh_evaluate(&c, 0, [1.0, 0.0, 0.0]);
        let b = sh_evaluate(&c, 0, [0.0, -1.0, 0.0]);
        assert_eq!(a, b);
    }

    #[test]
    fn sh_matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        for degree in 0..=3usize {
            let n = sh::num_coeffs(degree);
            let coeffs: Vec<[f64; 3]> = (0..n)
                .map(|_| std::array::from_fn(|_| rng.gen_range(-0.2..0.2)))
                .collect();
            let d: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dir = d.map(|v| v / norm);
            let got = sh_evaluate(&coeffs, degree, dir);
            // Independent oracle: evaluate each basis polynomial directly.
            let mut b = vec![0.0f64; n];
            sh::basis(degree, dir, &mut b);
            for ch in 0..3 {
                let mut v = 0.5;
                for (c, &bb) in coeffs.iter().zip(&b) {
                    v += c[ch] * bb;
                }
                assert_relative_eq!(got[ch], v.clamp(0.0, 1.0), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn predicted_centers_reproject_to_pixels() {
        use crate::encoder::{register_encoder_weights, FeatureMap};
        let cam = CameraView {
            fx: 16.0,
            fy: 16.0,
            cx: 8.0,
            cy: 8.0,
            world_from_camera: Matrix4::identity(),
            width: 16,
            height: 16,
            near: 1.0,
            far: 5.0,
        };
        let mut ws = WeightStore::new(73);
        register_encoder_weights(&mut ws, 4);
        register_head_weights(&mut ws, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let depth = Tensor::new(vec![16, 16], (0..256).map(|_| rng.gen_range(1.0..5.0)).collect())
            .unwrap();
        let refined = vec![RefinedDepth { depth: depth.clone(), view_index: 0 }];
        let features = vec![FeatureMap {
            grid: Tensor::new(vec![4, 4, 4], (0..64).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                .unwrap(),
            view_index: 0,
        }];
        let images = vec![Tensor::new(
            vec![16, 16, 3],
            (0..768).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()];
        let dists = vec![DepthDistribution {
            logits: Tensor::new(vec![4, 4, 6], (0..96).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                .unwrap(),
            candidates: depth_candidates(1.0, 5.0, 6).unwrap(),
        }];
        let set = predict_gaussians(&refined, &features, &images, &[cam.clone()], &dists, &ws, 1)
            .unwrap();
        assert_eq!(set.len(), 16 * 16);
        set.validate().unwrap();
        for py in 0..16 {
            for px in 0..16 {
                let g = &set.gaussians[py * 16 + px];
                let p = Vector3::new(g.center[0] as f64, g.center[1] as f64, g.center[2] as f64);
                let (u, v, z) = project(&p, &cam).unwrap();
                assert_relative_eq!(u, px as f64 + 0.5, epsilon = 1e-4);
                assert_relative_eq!(v, py as f64 + 0.5, epsilon = 1e-4);
                assert_relative_eq!(z, depth.at2(py, px) as f64, epsilon = 1e-4);
            }
        }
    }
}
