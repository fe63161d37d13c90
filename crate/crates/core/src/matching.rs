//! Cross-view correlation over plane-sweep depth candidates and the
//! depth-aware deformable matching block that refines the per-pixel depth
//! distribution.

use crate::error::{Error, Result};
use crate::geometry::{
    camera_embedding, project, sweep_sample, unproject, CameraView, DepthCandidates,
};
use crate::nn::{mlp2, se_gate, Activation};
use crate::tensor::{bilinear_sample, softmax_last, Tensor};
use crate::weights::{Init, WeightStore};

/// Per-pixel logits over the shared depth candidates of one view.
#[derive(Clone, Debug)]
pub struct DepthDistribution {
    pub logits: Tensor<f32>,
    pub candidates: DepthCandidates,
}

/// Learned per-pixel, per-candidate sampling offsets (quarter-res pixel
/// units) and attention weights over the P deformable points.
#[derive(Clone, Debug)]
pub struct DeformableField {
    pub offsets: Tensor<f32>,
    pub weights: Tensor<f32>,
}

/// Fused feature carrying the current depth estimate and the monocular
/// depth feature, used to predict the deformable field.
#[derive(Clone, Debug)]
pub struct DepthAwareFeature {
    pub grid: Tensor<f32>,
}

pub fn register_matching_weights(ws: &mut WeightStore, c: usize, d: usize, p: usize) {
    ws.ensure("ddmt.ftheta.fc1.w", vec![d, c], Init::FanInUniform { fan_in: d });
    ws.ensure("ddmt.ftheta.fc1.b", vec![c], Init::Zero);
    ws.ensure("ddmt.ftheta.fc2.w", vec![c, c], Init::FanInUniform { fan_in: c });
    ws.ensure("ddmt.ftheta.fc2.b", vec![c], Init::Zero);
    ws.ensure("ddmt.se.fc1.w", vec![18, c], Init::FanInUniform { fan_in: 18 });
    ws.ensure("ddmt.se.fc1.b", vec![c], Init::Zero);
    ws.ensure("ddmt.se.fc2.w", vec![c, c], Init::FanInUniform { fan_in: c });
    ws.ensure("ddmt.se.fc2.b", vec![c], Init::Zero);
    ws.ensure("ddmt.offset.fc1.w", vec![c, c], Init::FanInUniform { fan_in: c });
    ws.ensure("ddmt.offset.fc1.b", vec![c], Init::Zero);
    // Zero-init offset head: the block starts as plain epipolar sampling.
    ws.ensure("ddmt.offset.fc2.w", vec![c, d * p * 2], Init::Zero);
    ws.ensure("ddmt.offset.fc2.b", vec![d * p * 2], Init::Zero);
    ws.ensure("ddmt.attnw.fc1.w", vec![c, c], Init::FanInUniform { fan_in: c });
    ws.ensure("ddmt.attnw.fc1.b", vec![c], Init::Zero);
    ws.ensure("ddmt.attnw.fc2.w", vec![c, d * p], Init::FanInUniform { fan_in: c });
    ws.ensure("ddmt.attnw.fc2.b", vec![d * p], Init::Zero);
    for proj in ["wq", "wk", "wv"] {
        ws.ensure(&format!("ddmt.dsa.{proj}"), vec![d, d], Init::FanInUniform { fan_in: d });
    }
    ws.ensure("ddmt.dsa.wo", vec![d, d], Init::Zero);
}

/// Dot-product correlation between the source feature and plane-sweep
/// samples of each target view, averaged pixel-wise over targets. Invalid
/// samples contribute logit 0.
pub fn coarse_match(
    f_i: &Tensor<f32>,
    targets: &[(&Tensor<f32>, &CameraView)],
    cam_i: &CameraView,
    cand: &DepthCandidates,
) -> Result<DepthDistribution> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("coarse_match needs >= 1 target view".into()));
    }
    let [h4, w4, c] = f_i.shape() else {
        return Err(Error::ShapeMismatch("coarse_match expects f_i [H4,W4,C]".into()));
    };
    let (h4, w4, c) = (*h4, *w4, *c);
    let d = cand.len();
    let scale = 1.0 / (c as f32).sqrt();
    let mut logits = vec![0.0f32; h4 * w4 * d];
    for (f_j, cam_j) in targets {
        let (sampled, _mask) = sweep_sample(f_j, cam_i, cam_j, cand)?;
        for pix in 0..h4 * w4 {
            let frow = &f_i.data()[pix * c..(pix + 1) * c];
            for k in 0..d {
                let srow = &sampled.data()[(pix * d + k) * c..][..c];
                let mut dot = 0.0f32;
                for (a, b) in frow.iter().zip(srow) {
                    dot += a * b;
                }
                logits[pix * d + k] += dot * scale;
            }
        }
    }
    let inv = 1.0 / targets.len() as f32;
    for v in &mut logits {
        *v *= inv;
    }
    Ok(DepthDistribution {
        logits: Tensor::new(vec![h4, w4, d], logits)?,
        candidates: cand.clone(),
    })
}

/// Depth-aware feature: an MLP over the per-pixel logit vector plus a
/// camera-gated depth feature.
pub fn depth_aware_feature(
    dist: &DepthDistribution,
    depth_feature: &Tensor<f32>,
    cam_i: &CameraView,
    ws: &WeightStore,
) -> Result<DepthAwareFeature> {
    let [h4, w4, _d] = dist.logits.shape() else {
        return Err(Error::ShapeMismatch("logits must be [H4,W4,D]".into()));
    };
    if depth_feature.shape()[0] != *h4 || depth_feature.shape()[1] != *w4 {
        return Err(Error::ShapeMismatch("depth feature spatial dims mismatch".into()));
    }
    let theta = mlp2(&dist.logits, ws, "ddmt.ftheta", Activation::None)?;
    let emb = camera_embedding(cam_i);
    let phi = se_gate(
        depth_feature,
        &emb,
        ws.get("ddmt.se.fc1.w")?,
        ws.get("ddmt.se.fc1.b")?,
        ws.get("ddmt.se.fc2.w")?,
        ws.get("ddmt.se.fc2.b")?,
    )?;
    Ok(DepthAwareFeature {
        grid: theta.add(&phi)?,
    })
}

/// Offset and attention heads over the depth-aware feature. Offsets are
/// reshaped to `[H4, W4, D, P, 2]`; attention weights are softmaxed over P.
pub fn predict_deformable_field(
    fda: &DepthAwareFeature,
    d: usize,
    p: usize,
    ws: &WeightStore,
) -> Result<DeformableField> {
    let [h4, w4, _c] = fda.grid.shape() else {
        return Err(Error::ShapeMismatch("depth-aware feature must be [H4,W4,C]".into()));
    };
    let (h4, w4) = (*h4, *w4);
    let offsets = mlp2(&fda.grid, ws, "ddmt.offset", Activation::None)?
        .reshape(vec![h4, w4, d, p, 2])?;
    let raw = mlp2(&fda.grid, ws, "ddmt.attnw", Activation::None)?
        .reshape(vec![h4, w4, d, p])?;
    let weights = softmax_last(&raw)?;
    Ok(DeformableField { offsets, weights })
}

/// Epipolar sampling with learned per-point offsets: for point q, samples
/// `f_j` at the projection of (p, cand[k]) shifted by offsets[p,k,q].
/// Returns `[H4, W4, D, P, C]` features and a `[H4, W4, D, P]` mask.
pub fn deformable_sample(
    f_j: &Tensor<f32>,
    cam_i: &CameraView,
    cam_j: &CameraView,
    cand: &DepthCandidates,
    offsets: &Tensor<f32>,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let [h4, w4, c] = f_j.shape() else {
        return Err(Error::ShapeMismatch("deformable_sample expects f_j [H4,W4,C]".into()));
    };
    let (h4, w4, c) = (*h4, *w4, *c);
    let d = cand.len();
    let [oh, ow, od, p, two] = offsets.shape() else {
        return Err(Error::ShapeMismatch("offsets must be [H4,W4,D,P,2]".into()));
    };
    if *oh != h4 || *ow != w4 || *od != d || *two != 2 {
        return Err(Error::ShapeMismatch(format!(
            "offsets shape {:?} incompatible with grid {h4}x{w4}, D={d}",
            offsets.shape()
        )));
    }
    let p = *p;
    let scale = w4 as f64 / cam_j.width as f64;
    let qi = cam_i.scaled(scale);
    let qj = cam_j.scaled(scale);
    let mut feat = vec![0.0f32; h4 * w4 * d * p * c];
    let mut mask = vec![0.0f32; h4 * w4 * d * p];
    let mut sample = vec![0.0f32; c];
    let od = offsets.data();
    for py in 0..h4 {
        for px in 0..w4 {
            for (k, &depth) in cand.values().iter().enumerate() {
                let world = unproject(px as f64 + 0.5, py as f64 + 0.5, depth, &qi);
                let Some((u, v, _z)) = project(&world, &qj) else {
                    continue;
                };
                for q in 0..p {
                    let obase = (((py * w4 + px) * d + k) * p + q) * 2;
                    let su = (u - 0.5) as f32 + od[obase];
                    let sv = (v - 0.5) as f32 + od[obase + 1];
                    let validity = bilinear_sample(f_j, su, sv, &mut sample);
                    let idx = ((py * w4 + px) * d + k) * p + q;
                    if validity > 0.0 {
                        feat[idx * c..(idx + 1) * c].copy_from_slice(&sample);
                        mask[idx] = validity;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![h4, w4, d, p, c], feat)?,
        Tensor::new(vec![h4, w4, d, p], mask)?,
    ))
}

/// Windowed self-attention over pixels, treating each pixel's D logits as
/// its token features. Residual; candidates unchanged.
pub fn depth_self_attention(
    dist: &DepthDistribution,
    ws: &WeightStore,
    window: usize,
) -> Result<DepthDistribution> {
    let [h4, w4, d] = dist.logits.shape() else {
        return Err(Error::ShapeMismatch("logits must be [H4,W4,D]".into()));
    };
    let (h4, w4, d) = (*h4, *w4, *d);
    if window == 0 || h4 % window != 0 || w4 % window != 0 {
        return Err(Error::InvalidArgument(format!(
            "window {window} must divide {h4}x{w4}"
        )));
    }
    let wq = ws.get("ddmt.dsa.wq")?;
    let wk = ws.get("ddmt.dsa.wk")?;
    let wv = ws.get("ddmt.dsa.wv")?;
    let wo = ws.get("ddmt.dsa.wo")?;
    let q = crate::nn::linear(&dist.logits, wq, None, Activation::None)?;
    let k = crate::nn::linear(&dist.logits, wk, None, Activation::None)?;
    let v = crate::nn::linear(&dist.logits, wv, None, Activation::None)?;
    let n = window * window;
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = dist.logits.clone();
    for wy in (0..h4).step_by(window) {
        for wx in (0..w4).step_by(window) {
            let idx: Vec<usize> = (0..n)
                .map(|t| (wy + t / window) * w4 + (wx + t % window))
                .collect();
            let mut logits = Tensor::zeros(vec![n, n]);
            for (a, &ia) in idx.iter().enumerate() {
                for (b, &ib) in idx.iter().enumerate() {
                    let mut dot = 0.0f32;
                    for ci in 0..d {
                        dot += q.data()[ia * d + ci] * k.data()[ib * d + ci];
                    }
                    logits.data_mut()[a * n + b] = dot * scale;
                }
            }
            let probs = softmax_last(&logits)?;
            let mut attended = vec![0.0f32; n * d];
            for a in 0..n {
                for (b, &ib) in idx.iter().enumerate() {
                    let pr = probs.data()[a * n + b];
                    for ci in 0..d {
                        attended[a * d + ci] += pr * v.data()[ib * d + ci];
                    }
                }
            }
            let attended = Tensor::new(vec![n, d], attended)?;
            let delta = crate::nn::linear(&attended, wo, None, Activation::None)?;
            for (a, &ia) in idx.iter().enumerate() {
                for ci in 0..d {
                    out.data_mut()[ia * d + ci] += delta.data()[a * d + ci];
                }
            }
        }
    }
    Ok(DepthDistribution {
        logits: out,
        candidates: dist.candidates.clone(),
    })
}

/// Correlation between the source feature and the attention-weighted sum of
/// deformable samples: the additive correction to the depth logits.
pub fn depth_residual(
    f_i: &Tensor<f32>,
    field: &DeformableField,
    sampled: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let [h4, w4, c] = f_i.shape() else {
        return Err(Error::ShapeMismatch("depth_residual expects f_i [H4,W4,C]".into()));
    };
    let (h4, w4, c) = (*h4, *w4, *c);
    let [sh, sw, d, p, sc] = sampled.shape() else {
        return Err(Error::ShapeMismatch("sampled must be [H4,W4,D,P,C]".into()));
    };
    if *sh != h4 || *sw != w4 || *sc != c || field.weights.shape() != [h4, w4, *d, *p] {
        return Err(Error::ShapeMismatch("depth_residual shape mismatch".into()));
    }
    let (d, p) = (*d, *p);
    let scale = 1.0 / (c as f32).sqrt();
    let mut out = vec![0.0f32; h4 * w4 * d];
    let wdata = field.weights.data();
    let sdata = sampled.data();
    let mut agg = vec![0.0f32; c];
    for pix in 0..h4 * w4 {
        let frow = &f_i.data()[pix * c..(pix + 1) * c];
        for k in 0..d {
            for a in agg.iter_mut() {
                *a = 0.0;
            }
            for q in 0..p {
                let wgt = wdata[(pix * d + k) * p + q];
                let srow = &sdata[((pix * d + k) * p + q) * c..][..c];
                for (a, &s) in agg.iter_mut().zip(srow) {
                    *a += wgt * s;
                }
            }
            let mut dot = 0.0f32;
            for (f, a) in frow.iter().zip(&agg) {
                dot += f * a;
            }
            out[pix * d + k] = dot * scale;
        }
    }
    Tensor::new(vec![h4, w4, d], out)
}

/// Adds the (target-averaged) residual to the coarse logits.
pub fn fine_depth(dist: &DepthDistribution, residual: &Tensor<f32>) -> Result<DepthDistribution> {
    Ok(DepthDistribution {
        logits: dist.logits.add(residual)?,
        candidates: dist.candidates.clone(),
    })
}

/// Softmax-weighted expectation over the metric candidates, per pixel.
pub fn expected_depth(dist: &DepthDistribution) -> Result<Tensor<f32>> {
    let [h4, w4, d] = dist.logits.shape() else {
        return Err(Error::ShapeMismatch("logits must be [H4,W4,D]".into()));
    };
    let probs = softmax_last(&dist.logits)?;
    let mut out = vec![0.0f32; h4 * w4];
    for (pix, row) in probs.data().chunks(*d).enumerate() {
        let mut e = 0.0f32;
        for (k, &pr) in row.iter().enumerate() {
            e += pr * dist.candidates.values()[k] as f32;
        }
        out[pix] = e;
    }
    Tensor::new(vec![*h4, *w4], out)
}

/// Per-pixel argmax over candidates (diagnostic alternative to the
/// expectation).
pub fn argmax_depth_index(dist: &DepthDistribution) -> Tensor<f32> {
    let d = *dist.logits.shape().last().unwrap();
    let mut out = Vec::with_capacity(dist.logits.numel() / d);
    for row in dist.logits.data().chunks(d) {
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        out.push(best as f32);
    }
    let mut shape = dist.logits.shape().to_vec();
    shape.pop();
    Tensor::new(shape, out).unwrap()
}

/// One pass of the depth-aware deformable matching block: self-attention on
/// the logits, deformable field prediction, per-target residual, averaged
/// update.
#[allow(clippy::too_many_arguments)]
pub fn ddmt_block(
    dist: &DepthDistribution,
    f_i: &Tensor<f32>,
    targets: &[(&Tensor<f32>, &CameraView)],
    depth_feature: &Tensor<f32>,
    cam_i: &CameraView,
    ws: &WeightStore,
    window: usize,
    p: usize,
) -> Result<DepthDistribution> {
    let d = dist.candidates.len();
    let dist = depth_self_attention(dist, ws, window)?;
    let fda = depth_aware_feature(&dist, depth_feature, cam_i, ws)?;
    let field = predict_deformable_field(&fda, d, p, ws)?;
    let mut residual = Tensor::zeros(dist.logits.shape().to_vec());
    for (f_j, cam_j) in targets {
        let (sampled, _mask) =
            deformable_sample(f_j, cam_i, cam_j, &dist.candidates, &field.offsets)?;
        let r = depth_residual(f_i, &field, &sampled)?;
        residual = residual.add(&r)?;
    }
    let inv = 1.0 / targets.len() as f32;
    let residual = residual.map(|v| v * inv);
    fine_depth(&dist, &residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::depth_candidates;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(w: usize, h: usize) -> CameraView {
        CameraView {
            fx: w as f64,
            fy: h as f64,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            world_from_camera: Matrix4::identity(),
            width: w,
            height: h,
            near: 1.0,
            far: 10.0,
        }
    }

    fn rand_feat(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor<f32> {
        Tensor::new(vec![h, w, c], (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn constant_features_give_uniform_logits() {
        let ci = cam(32, 32);
        let f = Tensor::full(vec![8, 8, 4], 1.0f32);
        let cand = depth_candidates(1.0, 10.0, 4).unwrap();
        let dist = coarse_match(&f, &[(&f, &ci)], &ci, &cand).unwrap();
        // dot = 4, / sqrt(4) = 2 everywhere.
        for &v in dist.logits.data() {
            assert_relative_eq!(v, 2.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn coarse_match_empty_targets_errors() {
        let ci = cam(32, 32);
        let f = Tensor::zeros(vec![8, 8, 4]);
        let cand = depth_candidates(1.0, 10.0, 4).unwrap();
        assert!(coarse_match(&f, &[], &ci, &cand).is_err());
    }

    #[test]
    fn coarse_match_target_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let ci = cam(32, 32);
        let mut cj1 = cam(32, 32);
        cj1.world_from_camera[(0, 3)] = 0.1;
        let mut cj2 = cam(32, 32);
        cj2.world_from_camera[(0, 3)] = -0.1;
        let mut cj3 = cam(32, 32);
        cj3.world_from_camera[(1, 3)] = 0.15;
        let fi = rand_feat(&mut rng, 8, 8, 4);
        let f1 = rand_feat(&mut rng, 8, 8, 4);
        let f2 = rand_feat(&mut rng, 8, 8, 4);
        let f3 = rand_feat(&mut rng, 8, 8, 4);
        let cand = depth_candidates(1.0, 10.0, 6).unwrap();
        let a = coarse_match(&fi, &[(&f1, &cj1), (&f2, &cj2), (&f3, &cj3)], &ci, &cand).unwrap();
        let b = coarse_match(&fi, &[(&f3, &cj3), (&f1, &cj1), (&f2, &cj2)], &ci, &cand).unwrap();
        for (x, y) in a.logits.data().iter().zip(b.logits.data()) {
            assert_relative_eq!(x, y, epsilon = 1e-6);
        }
    }

    #[test]
    fn logits_invariant_under_channel_rotation() {
        // Dot products are preserved by an orthogonal transform of the
        // feature channels.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ci = cam(32, 32);
        let mut cj = cam(32, 32);
        cj.world_from_camera[(0, 3)] = 0.1;
        let c = 4;
        let fi = rand_feat(&mut rng, 8, 8, c);
        let fj = rand_feat(&mut rng, 8, 8, c);
        let cand = depth_candidates(1.0, 10.0, 5).unwrap();
        // Random rotation via QR of a random matrix.
        let m = nalgebra::Matrix4::<f64>::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let qr = m.qr();
        let q = qr.q();
        let rot = |f: &Tensor<f32>| {
            let mut out = f.clone();
            for pix in 0..64 {
                let row: Vec<f64> =
                    (0..c).map(|i| f.data()[pix * c + i] as f64).collect();
                for i in 0..c {
                    let mut s = 0.0;
                    for j in 0..c {
                        s += q[(i, j)] * row[j];
                    }
                    out.data_mut()[pix * c + i] = s as f32;
                }
            }
            out
        };
        let a = coarse_match(&fi, &[(&fj, &cj)], &ci, &cand).unwrap();
        let b = coarse_match(&rot(&fi), &[(&rot(&fj), &cj)], &ci, &cand).unwrap();
        for (x, y) in a.logits.data().iter().zip(b.logits.data()) {
            assert_relative_eq!(x, y, epsilon = 1e-4);
        }
    }

    #[test]
    fn depth_aware_feature_is_additive() {
        let mut ws = WeightStore::new(30);
        register_matching_weights(&mut ws, 4, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let ci = cam(32, 32);
        let dist = DepthDistribution {
            logits: rand_feat(&mut rng, 8, 8, 6),
            candidates: depth_candidates(1.0, 10.0, 6).unwrap(),
        };
        let dfeat = rand_feat(&mut rng, 8, 8, 4);
        let full = depth_aware_feature(&dist, &dfeat, &ci, &ws).unwrap();
        assert_eq!(full.grid.shape(), &[8, 8, 4]);
        // f_theta zeroed: output equals the SE branch alone.
        let mut ws_zero = ws.clone();
        for name in [
            "ddmt.ftheta.fc1.w",
            "ddmt.ftheta.fc1.b",
            "ddmt.ftheta.fc2.w",
            "ddmt.ftheta.fc2.b",
        ] {
            let shape = ws_zero.get(name).unwrap().shape().to_vec();
            ws_zero.insert(name, Tensor::zeros(shape));
        }
        let phi_only = depth_aware_feature(&dist, &dfeat, &ci, &ws_zero).unwrap();
        let phi = se_gate(
            &dfeat,
            &camera_embedding(&ci),
            ws.get("ddmt.se.fc1.w").unwrap(),
            ws.get("ddmt.se.fc1.b").unwrap(),
            ws.get("ddmt.se.fc2.w").unwrap(),
            ws.get("ddmt.se.fc2.b").unwrap(),
        )
        .unwrap();
        assert_eq!(phi_only.grid.data(), phi.data());
        // Additivity: full == theta + phi exactly.
        let theta = mlp2(&dist.logits, &ws, "ddmt.ftheta", Activation::None).unwrap();
        let sum = theta.add(&phi).unwrap();
        assert_eq!(full.grid.data(), sum.data());
    }

    #[test]
    fn fresh_offset_head_is_zero() {
        let mut ws = WeightStore::new(31);
        register_matching_weights(&mut ws, 4, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let fda = DepthAwareFeature {
            grid: rand_feat(&mut rng, 8, 8, 4),
        };
        let field = predict_deformable_field(&fda, 5, 3, &ws).unwrap();
        assert_eq!(field.offsets.shape(), &[8, 8, 5, 3, 2]);
        assert!(field.offsets.data().iter().all(|&v| v == 0.0));
        // Weights sum to 1 over P.
        for row in field.weights.data().chunks(3) {
            let s: f32 = row.iter().sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_offsets_reduce_to_sweep_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let ci = cam(32, 32);
        let mut cj = cam(32, 32);
        cj.world_from_camera[(0, 3)] = 0.2;
        let fj = rand_feat(&mut rng, 8, 8, 3);
        let cand = depth_candidates(1.0, 10.0, 4).unwrap();
        let p = 3;
        let offsets = Tensor::zeros(vec![8, 8, 4, p, 2]);
        let (ds, dmask) = deformable_sample(&fj, &ci, &cj, &cand, &offsets).unwrap();
        let (ss, smask) = sweep_sample(&fj, &ci, &cj, &cand).unwrap();
        for pix in 0..64 {
            for k in 0..4 {
                for q in 0..p {
                    for ch in 0..3 {
                        assert_eq!(
                            ds.data()[(((pix * 4) + k) * p + q) * 3 + ch],
                            ss.data()[(pix * 4 + k) * 3 + ch]
                        );
                    }
                    assert_eq!(dmask.data()[(pix * 4 + k) * p + q], smask.data()[pix * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn offset_shifts_along_ramp() {
        // Horizontal ramp: shifting the sample by (1, 0) adds the slope.
        let ci = cam(32, 32);
        let mut f = Tensor::zeros(vec![8, 8, 1]);
        for y in 0..8 {
            for x in 0..8 {
                f.set3(y, x, 0, x as f32 * 0.5);
            }
        }
        let cand = depth_candidates(1.0, 10.0, 1).unwrap();
        let zero = Tensor::zeros(vec![8, 8, 1, 1, 2]);
        let mut one = Tensor::zeros(vec![8, 8, 1, 1, 2]);
        for pix in 0..64 {
            one.data_mut()[pix * 2] = 1.0; // +1 in x
        }
        let (s0, _) = deformable_sample(&f, &ci, &ci, &cand, &zero).unwrap();
        let (s1, _) = deformable_sample(&f, &ci, &ci, &cand, &one).unwrap();
        // Interior pixels (shifted sample stays in bounds).
        for y in 0..8 {
            for x in 0..6 {
                let pix = y * 8 + x;
                assert_relative_eq!(s1.data()[pix], s0.data()[pix] + 0.5, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn offset_out_of_bounds_masks_zero() {
        let ci = cam(32, 32);
        let f = Tensor::full(vec![8, 8, 2], 1.0f32);
        let cand = depth_candidates(1.0, 10.0, 1).unwrap();
        let mut off = Tensor::zeros(vec![8, 8, 1, 1, 2]);
        for pix in 0..64 {
            off.data_mut()[pix * 2] = 100.0;
        }
        let (s, m) = deformable_sample(&f, &ci, &ci, &cand, &off).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depth_self_attention_zero_value_identity() {
        let mut ws = WeightStore::new(40);
        register_matching_weights(&mut ws, 4, 6, 2);
        ws.insert("ddmt.dsa.wv", Tensor::zeros(vec![6, 6]));
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let dist = DepthDistribution {
            logits: rand_feat(&mut rng, 8, 8, 6),
            candidates: depth_candidates(1.0, 10.0, 6).unwrap(),
        };
        let out = depth_self_attention(&dist, &ws, 4).unwrap();
        assert_eq!(out.logits.data(), dist.logits.data());
    }

    #[test]
    fn depth_self_attention_constant_stays_constant() {
        let mut ws = WeightStore::new(41);
        register_matching_weights(&mut ws, 4, 6, 2);
        // Give the output projection real values so the delta is nonzero.
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        ws.insert(
            "ddmt.dsa.wo",
            Tensor::new(vec![6, 6], (0..36).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap(),
        );
        let mut logits = Tensor::zeros(vec![8, 8, 6]);
        for pix in 0..64 {
            for k in 0..6 {
                logits.data_mut()[pix * 6 + k] = k as f32 * 0.3 - 1.0;
            }
        }
        let dist = DepthDistribution {
            logits,
            candidates: depth_candidates(1.0, 10.0, 6).unwrap(),
        };
        let out = depth_self_attention(&dist, &ws, 4).unwrap();
        // Spatially constant input: every pixel gets the same output vector.
        let first: Vec<f32> = out.logits.data()[0..6].to_vec();
        for row in out.logits.data().chunks(6) {
            for (a, b) in row.iter().zip(&first) {
                assert_relative_eq!(a, b, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn depth_self_attention_is_window_local() {
        let mut ws = WeightStore::new(42);
        register_matching_weights(&mut ws, 4, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        ws.insert(
            "ddmt.dsa.wo",
            Tensor::new(vec![6, 6], (0..36).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap(),
        );
        let base = rand_feat(&mut rng, 8, 8, 6);
        let mut pert = base.clone();
        pert.set3(7, 7, 0, 9.0); // bottom-right window
        let cand = depth_candidates(1.0, 10.0, 6).unwrap();
        let a = depth_self_attention(
            &DepthDistribution { logits: base, candidates: cand.clone() },
            &ws,
            4,
        )
        .unwrap();
        let b = depth_self_attention(
            &DepthDistribution { logits: pert, candidates: cand },
            &ws,
            4,
        )
        .unwrap();
        for y in 0..4 {
            for x in 0..8 {
                for k in 0..6 {
                    assert_eq!(a.logits.at3(y, x, k), b.logits.at3(y, x, k));
                }
            }
        }
    }

    #[test]
    fn one_hot_weights_reduce_to_coarse_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let ci = cam(32, 32);
        let mut cj = cam(32, 32);
        cj.world_from_camera[(0, 3)] = 0.15;
        let fi = rand_feat(&mut rng, 8, 8, 4);
        let fj = rand_feat(&mut rng, 8, 8, 4);
        let cand = depth_candidates(1.0, 10.0, 5).unwrap();
        let p = 3;
        let offsets = Tensor::zeros(vec![8, 8, 5, p, 2]);
        let mut weights = Tensor::zeros(vec![8, 8, 5, p]);
        for row in weights.data_mut().chunks_mut(p) {
            row[0] = 1.0; // one-hot on q0
        }
        let field = DeformableField { offsets: offsets.clone(), weights };
        let (sampled, _) = deformable_sample(&fj, &ci, &cj, &cand, &offsets).unwrap();
        let residual = depth_residual(&fi, &field, &sampled).unwrap();
        let coarse = coarse_match(&fi, &[(&fj, &cj)], &ci, &cand).unwrap();
        for (r, c) in residual.data().iter().zip(coarse.logits.data()) {
            assert_relative_eq!(r, c, epsilon = 1e-6);
        }
    }

    #[test]
    fn uniform_weights_average_point_correlations() {
        // Single pixel, hand-expanded weighted sum.
        let fi = Tensor::new(vec![1, 1, 2], vec![1.0f32, 2.0]).unwrap();
        let sampled = Tensor::new(
            vec![1, 1, 1, 2, 2],
            vec![0.5f32, 0.5, 1.5, -0.5],
        )
        .unwrap();
        let field = DeformableField {
            offsets: Tensor::zeros(vec![1, 1, 1, 2, 2]),
            weights: Tensor::new(vec![1, 1, 1, 2], vec![0.5f32, 0.5]).unwrap(),
        };
        let r = depth_residual(&fi, &field, &sampled).unwrap();
        // mean of per-point correlations: q0: (1*0.5 + 2*0.5)/sqrt(2), q1: (1*1.5 - 2*0.5)/sqrt(2)
        let expect = 0.5 * (1.5 + 0.5) / 2.0f32.sqrt();
        assert_relative_eq!(r.data()[0], expect, epsilon = 1e-6);
    }

    #[test]
    fn zero_source_feature_zero_residual() {
        let fi = Tensor::zeros(vec![2, 2, 3]);
        let sampled = Tensor::full(vec![2, 2, 2, 2, 3], 1.0f32);
        let field = DeformableField {
            offsets: Tensor::zeros(vec![2, 2, 2, 2, 2]),
            weights: Tensor::full(vec![2, 2, 2, 2], 0.5f32),
        };
        let r = depth_residual(&fi, &field, &sampled).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fine_depth_zero_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let dist = DepthDistribution {
            logits: rand_feat(&mut rng, 4, 4, 3),
            candidates: depth_candidates(1.0, 10.0, 3).unwrap(),
        };
        let out = fine_depth(&dist, &Tensor::zeros(vec![4, 4, 3])).unwrap();
        assert_eq!(out.logits.data(), dist.logits.data());
    }

    #[test]
    fn fine_depth_arithmetic() {
        let dist = DepthDistribution {
            logits: Tensor::new(vec![1, 1, 2], vec![1.0f32, 2.0]).unwrap(),
            candidates: depth_candidates(1.0, 10.0, 2).unwrap(),
        };
        let r = Tensor::new(vec![1, 1, 2], vec![0.5f32, -0.5]).unwrap();
        let out = fine_depth(&dist, &r).unwrap();
        assert_eq!(out.logits.data(), &[1.5, 1.5]);
        let probs = softmax_last(&out.logits).unwrap();
        assert_relative_eq!(probs.data()[0], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn expected_depth_one_hot_and_uniform() {
        let cand = depth_candidates(1.0, 3.0, 2).unwrap();
        // One-hot via huge logit.
        let hot = DepthDistribution {
            logits: Tensor::new(vec![1, 1, 2], vec![50.0f32, 0.0]).unwrap(),
            candidates: cand.clone(),
        };
        assert_relative_eq!(expected_depth(&hot).unwrap().data()[0], 1.0, epsilon = 1e-5);
        let uniform = DepthDistribution {
            logits: Tensor::zeros(vec![1, 1, 2]),
            candidates: cand,
        };
        assert_relative_eq!(expected_depth(&uniform).unwrap().data()[0], 2.0, epsilon = 1e-6);
    }

    #[test]
    fn expected_depth_in_range_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let cand = depth_candidates(1.0, 10.0, 8).unwrap();
        for _ in 0..100 {
            let logits: Vec<f32> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let dist = DepthDistribution {
                logits: Tensor::new(vec![1, 1, 8], logits.clone()).unwrap(),
                candidates: cand.clone(),
            };
            let e0 = expected_depth(&dist).unwrap().data()[0];
            assert!((1.0..=10.0).contains(&e0));
            // Raising candidate k's logit moves the expectation toward cand[k].
            let k = rng.gen_range(0..8);
            let mut raised = logits.clone();
            raised[k] += 1.0;
            let dist2 = DepthDistribution {
                logits: Tensor::new(vec![1, 1, 8], raised).unwrap(),
                candidates: cand.clone(),
            };
            let e1 = expected_depth(&dist2).unwrap().data()[0];
            let target = cand.values()[k] as f32;
            assert!(
                (e1 - target).abs() <= (e0 - target).abs() + 1e-5,
                "expectation moved away from raised candidate"
            );
        }
    }
}
