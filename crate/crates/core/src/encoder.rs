//! Per-view feature extraction: a small conv stack with camera-parameter
//! gating, one windowed self/cross attention exchange between views, and
//! file-based ingestion of monocular depth priors.

use crate::error::{Error, Result};
use crate::geometry::{camera_embedding, CameraView};
use crate::nn::{conv2d, linear, se_gate, Activation};
use crate::pfm::read_pfm;
use crate::tensor::{softmax_last, Tensor};
use crate::weights::{Init, WeightStore};
use std::path::Path;

/// Quarter-resolution feature grid for one view.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub grid: Tensor<f32>,
    pub view_index: usize,
}

/// Monocular depth prior loaded from disk: a relative (scale-free) depth
/// map plus an optional precomputed quarter-resolution depth feature.
#[derive(Clone, Debug)]
pub struct PriorDepth {
    pub relative: Tensor<f32>,
    pub feature: Option<Tensor<f32>>,
}

pub fn register_encoder_weights(ws: &mut WeightStore, c: usize) {
    ws.ensure("enc.conv1.w", vec![3, 3, 3, c], Init::FanInUniform { fan_in: 27 });
    ws.ensure("enc.conv1.b", vec![c], Init::Zero);
    ws.ensure("enc.conv2.w", vec![3, 3, c, c], Init::FanInUniform { fan_in: 9 * c });
    ws.ensure("enc.conv2.b", vec![c], Init::Zero);
    ws.ensure("enc.conv3.w", vec![3, 3, c, c], Init::FanInUniform { fan_in: 9 * c });
    ws.ensure("enc.conv3.b", vec![c], Init::Zero);
    ws.ensure("enc.se.fc1.w", vec![18, c], Init::FanInUniform { fan_in: 18 });
    ws.ensure("enc.se.fc1.b", vec![c], Init::Zero);
    ws.ensure("enc.se.fc2.w", vec![c, c], Init::FanInUniform { fan_in: c });
    ws.ensure("enc.se.fc2.b", vec![c], Init::Zero);
    for pass in ["self", "cross"] {
        for proj in ["wq", "wk", "wv"] {
            ws.ensure(
                &format!("xattn.{pass}.{proj}"),
                vec![c, c],
                Init::FanInUniform { fan_in: c },
            );
        }
        // Zero-init output projection: attention passes start as the identity.
        ws.ensure(&format!("xattn.{pass}.wo"), vec![c, c], Init::Zero);
    }
}

/// Conv stack (two stride-2 stages) followed by a squeeze-excitation gate
/// driven by the camera embedding. Output is `[H/4, W/4, C]`.
pub fn extract_features(
    image: &Tensor<f32>,
    cam: &CameraView,
    ws: &WeightStore,
) -> Result<Tensor<f32>> {
    let [h, w, ch] = image.shape() else {
        return Err(Error::ShapeMismatch("extract_features expects [H,W,3]".into()));
    };
    if *ch != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {ch}")));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "image dimensions {h}x{w} must be divisible by 4"
        )));
    }
    let x = conv2d(image, ws.get("enc.conv1.w")?, Some(ws.get("enc.conv1.b")?), 2, 1)?
        .map(|v| crate::nn::activate(Activation::Gelu, v));
    let x = conv2d(&x, ws.get("enc.conv2.w")?, Some(ws.get("enc.conv2.b")?), 2, 1)?
        .map(|v| crate::nn::activate(Activation::Gelu, v));
    let x = conv2d(&x, ws.get("enc.conv3.w")?, Some(ws.get("enc.conv3.b")?), 1, 1)?;
    // Per-channel instance normalization: without it the channel means
    // (driven by the image's DC component) dominate cross-view feature
    // correlation and drown out the texture alignment signal.
    let x = instance_norm(&x);
    // Per-pixel unit scaling (to norm sqrt(C)) so cross-view correlation
    // ranks candidates by feature direction, not local energy.
    let x = pixel_norm(&x);
    let emb = camera_embedding(cam);
    se_gate(
        &x,
        &emb,
        ws.get("enc.se.fc1.w")?,
        ws.get("enc.se.fc1.b")?,
        ws.get("enc.se.fc2.w")?,
        ws.get("enc.se.fc2.b")?,
    )
}

/// Zero-mean, unit-variance normalization of each channel over the spatial
/// extent of a `[H, W, C]` grid.
fn instance_norm(x: &Tensor<f32>) -> Tensor<f32> {
    let c = *x.shape().last().unwrap();
    let rows = x.numel() / c;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for row in x.data().chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    for row in x.data().chunks(c) {
        for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(row) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    let inv_std: Vec<f32> = var
        .iter()
        .map(|&s| (1.0 / (s / rows as f64 + 1e-6).sqrt()) as f32)
        .collect();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        for ((v, &m), &is) in row.iter_mut().zip(&mean).zip(&inv_std) {
            *v = (*v - m as f32) * is;
        }
    }
    out
}

/// Rescales every pixel's feature vector to L2 norm sqrt(C).
fn pixel_norm(x: &Tensor<f32>) -> Tensor<f32> {
    let c = *x.shape().last().unwrap();
    let target = (c as f32).sqrt();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-6);
        let s = target / norm;
        for v in row {
            *v *= s;
        }
    }
    out
}

/// Single-head attention restricted to non-overlapping `window`-sized
/// blocks. Queries come from `q_src`, keys/values from `kv_src`; returns
/// the attention delta (no residual).
fn window_attention_delta(
    q_src: &Tensor<f32>,
    kv_src: &Tensor<f32>,
    wq: &Tensor<f32>,
    wk: &Tensor<f32>,
    wv: &Tensor<f32>,
    wo: &Tensor<f32>,
    window: usize,
) -> Result<Tensor<f32>> {
    let [h, w, c] = q_src.shape() else {
        return Err(Error::ShapeMismatch("window attention expects [H,W,C]".into()));
    };
    let (h, w, c) = (*h, *w, *c);
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::InvalidArgument(format!(
            "window {window} must divide spatial dims {h}x{w}"
        )));
    }
    let q = linear(q_src, wq, None, Activation::None)?;
    let k = linear(kv_src, wk, None, Activation::None)?;
    let v = linear(kv_src, wv, None, Activation::None)?;
    let n = window * window;
    let scale = 1.0 / (c as f32).sqrt();
    let mut out = Tensor::zeros(vec![h, w, c]);
    for wy in (0..h).step_by(window) {
        for wx in (0..w).step_by(window) {
            // Gather token indices of this window in row-major order.
            let idx: Vec<usize> = (0..n)
                .map(|t| (wy + t / window) * w + (wx + t % window))
                .collect();
            let mut logits = Tensor::zeros(vec![n, n]);
            for (a, &ia) in idx.iter().enumerate() {
                for (b, &ib) in idx.iter().enumerate() {
                    let mut dot = 0.0f32;
                    for ci in 0..c {
                        dot += q.data()[ia * c + ci] * k.data()[ib * c + ci];
                    }
                    logits.data_mut()[a * n + b] = dot * scale;
                }
            }
            let probs = softmax_last(&logits)?;
            let mut attended = vec![0.0f32; n * c];
            for a in 0..n {
                for (b, &ib) in idx.iter().enumerate() {
                    let p = probs.data()[a * n + b];
                    for ci in 0..c {
                        attended[a * c + ci] += p * v.data()[ib * c + ci];
                    }
                }
            }
            let attended = Tensor::new(vec![n, c], attended)?;
            let delta = linear(&attended, wo, None, Activation::None)?;
            for (a, &ia) in idx.iter().enumerate() {
                for ci in 0..c {
                    out.data_mut()[ia * c + ci] = delta.data()[a * c + ci];
                }
            }
        }
    }
    Ok(out)
}

/// One windowed self-attention pass per view followed by one cross-view
/// pass; cross deltas are averaged over the other views so the result is
/// equivariant under permutations of the view list.
pub fn cross_view_attention(
    features: &[Tensor<f32>],
    window: usize,
    ws: &WeightStore,
) -> Result<Vec<Tensor<f32>>> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("cross_view_attention needs >= 1 view".into()));
    }
    let shape = features[0].shape().to_vec();
    for f in features {
        if f.shape() != shape {
            return Err(Error::ShapeMismatch("all views must share a feature shape".into()));
        }
    }
    let (swq, swk, swv, swo) = (
        ws.get("xattn.self.wq")?,
        ws.get("xattn.self.wk")?,
        ws.get("xattn.self.wv")?,
        ws.get("xattn.self.wo")?,
    );
    let mut after_self = Vec::with_capacity(features.len());
    for f in features {
        let delta = window_attention_delta(f, f, swq, swk, swv, swo, window)?;
        after_self.push(f.add(&delta)?);
    }
    if features.len() == 1 {
        return Ok(after_self);
    }
    let (cwq, cwk, cwv, cwo) = (
        ws.get("xattn.cross.wq")?,
        ws.get("xattn.cross.wk")?,
        ws.get("xattn.cross.wv")?,
        ws.get("xattn.cross.wo")?,
    );
    let mut out = Vec::with_capacity(features.len());
    for (i, fi) in after_self.iter().enumerate() {
        let mut acc = Tensor::zeros(shape.clone());
        let mut count = 0.0f32;
        for (j, fj) in after_self.iter().enumerate() {
            if i == j {
                continue;
            }
            let delta = window_attention_delta(fi, fj, cwq, cwk, cwv, cwo, window)?;
            acc = acc.add(&delta)?;
            count += 1.0;
        }
        let scaled = acc.map(|v| v / count);
        out.push(fi.add(&scaled)?);
    }
    Ok(out)
}

/// Loads a relative depth prior (PFM) and, when `feature_path` points to an
/// existing single-entry weight file, its companion depth feature.
pub fn load_prior(
    path: impl AsRef<Path>,
    expected_h: usize,
    expected_w: usize,
    feature_path: Option<&Path>,
) -> Result<PriorDepth> {
    let path = path.as_ref();
    let relative = read_pfm(path)?;
    if relative.shape() != [expected_h, expected_w] {
        return Err(Error::format(
            path.display().to_string(),
            format!(
                "prior size {:?} does not match expected {}x{}",
                relative.shape(),
                expected_h,
                expected_w
            ),
        ));
    }
    relative.check_finite("prior depth")?;
    let min = relative.data().iter().cloned().fold(f32::INFINITY, f32::min);
    let relative = relative.map(|v| v - min);
    let feature = match feature_path {
        Some(fp) if fp.exists() => {
            let store = WeightStore::load(fp)?;
            let name = store
                .names()
                .next()
                .ok_or_else(|| Error::format(fp.display().to_string(), "empty feature file"))?
                .to_string();
            Some(store.get(&name)?.clone())
        }
        _ => None,
    };
    Ok(PriorDepth { relative, feature })
}

/// Normalizes a relative map to [0, 1] by its own min/max (flat maps go to 0).
pub fn normalize01(map: &Tensor<f32>) -> Tensor<f32> {
    let min = map.data().iter().cloned().fold(f32::INFINITY, f32::min);
    let max = map.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let range = max - min;
    if range <= 0.0 {
        return Tensor::zeros(map.shape().to_vec());
    }
    map.map(|v| (v - min) / range)
}

/// Derives the quarter-resolution depth feature for a prior that shipped
/// without one: the normalized relative map replicated to three channels
/// and run through the image encoder.
pub fn derive_prior_feature(
    prior: &PriorDepth,
    cam: &CameraView,
    ws: &WeightStore,
) -> Result<Tensor<f32>> {
    if let Some(f) = &prior.feature {
        return Ok(f.clone());
    }
    let norm = normalize01(&prior.relative);
    let [h, w] = norm.shape() else {
        return Err(Error::ShapeMismatch("prior.relative must be [H,W]".into()));
    };
    let mut rgb = Tensor::zeros(vec![*h, *w, 3]);
    for (i, &v) in norm.data().iter().enumerate() {
        for ch in 0..3 {
            rgb.data_mut()[i * 3 + ch] = v;
        }
    }
    extract_features(&rgb, cam, ws)
}
