//! Per-scene Gaussian optimization: MSE loss through the differentiable
//! rasterizer with adaptive-moment gradient descent.
//!
//! Parameters are optimized in an unconstrained form (logit opacity, log
//! scale, raw quaternion renormalized every step) so the set invariants hold
//! by construction at every iteration.

use crate::error::{Error, Result};
use crate::gaussians::{Gaussian, GaussianSet};
use crate::geometry::{unproject, CameraView};
use crate::metrics::psnr;
use crate::pipeline::{run_infer, FitConfig, RunConfig};
use crate::rasterizer::{rasterize, rasterize_backward};
use crate::scene::SceneBundle;
use crate::sh;
use crate::tensor::Tensor;
use crate::weights::WeightStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Per-block learning-rate multipliers on top of the configured base rate.
const LR_CENTER: f32 = 0.1;
const LR_OPACITY: f32 = 1.0;
const LR_SCALE: f32 = 0.3;
const LR_ROTATION: f32 = 0.3;
const LR_SH: f32 = 1.0;
const ADAM_EPS: f32 = 1e-8;
const LOG_SCALE_MIN: f32 = -8.0;
const LOG_SCALE_MAX: f32 = 2.0;

#[derive(Clone, Debug)]
pub struct FitResult {
    pub set: GaussianSet<f32>,
    /// Best-so-far loss after each iteration; monotone non-increasing.
    pub loss_trace: Vec<f32>,
    /// PSNR of the best set against the supervision views (mean, dB).
    pub final_psnr: f32,
}

/// Unconstrained parameter vector for one Gaussian.
#[derive(Clone)]
struct Params {
    center: [f32; 3],
    logit_opacity: f32,
    log_scale: [f32; 3],
    quat: [f32; 4],
    sh: Vec<[f32; 3]>,
}

fn logit(p: f32) -> f32 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn to_params(set: &GaussianSet<f32>) -> Vec<Params> {
    set.gaussians
        .iter()
        .map(|g| Params {
            center: g.center,
            logit_opacity: logit(g.opacity),
            log_scale: g.scale.map(|s| s.max(1e-8).ln().clamp(LOG_SCALE_MIN, LOG_SCALE_MAX)),
            quat: g.rotation,
            sh: g.sh.clone(),
        })
        .collect()
}

fn to_set(params: &[Params], sh_degree: usize) -> GaussianSet<f32> {
    GaussianSet {
        sh_degree,
        gaussians: params
            .iter()
            .map(|p| {
                let qn = p.quat.iter().map(|v| v * v).sum::<f32>().sqrt();
                let rotation = if qn > 1e-8 {
                    p.quat.map(|v| v / qn)
                } else {
                    [1.0, 0.0, 0.0, 0.0]
                };
                Gaussian {
                    center: p.center,
                    opacity: sigmoid(p.logit_opacity).clamp(1e-6, 1.0 - 1e-6),
                    scale: p.log_scale.map(f32::exp),
                    rotation,
                    sh: p.sh.clone(),
                }
            })
            .collect(),
    }
}

/// Mean squared error between two same-shape images.
pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f32> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mse: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum();
    Ok((sum / a.numel() as f64) as f32)
}

/// Random Gaussians inside the camera frustum: uniform pixel positions and
/// depths, moderate scales, mid-gray colors.
pub fn random_init(n: usize, cam: &CameraView, sh_degree: usize, seed: u64) -> GaussianSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nsh = sh::num_coeffs(sh_degree);
    let gaussians = (0..n)
        .map(|_| {
            let u = rng.gen_range(0.0..cam.width as f64);
            let v = rng.gen_range(0.0..cam.height as f64);
            let z = rng.gen_range(cam.near..cam.far);
            let c = unproject(u, v, z, cam);
            // Footprint a few pixels wide at its depth.
            let base = (z / cam.fx) as f32 * rng.gen_range(2.0..5.0);
            let mut shc = vec![[0.0f32; 3]; nsh];
            shc[0] = std::array::from_fn(|_| rng.gen_range(-0.3..0.3));
            Gaussian {
                center: [c.x as f32, c.y as f32, c.z as f32],
                opacity: rng.gen_range(0.3..0.7),
                scale: [base; 3],
                rotation: [1.0, 0.0, 0.0, 0.0],
                sh: shc,
            }
        })
        .collect();
    GaussianSet {
        gaussians,
        sh_degree,
    }
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    beta1: f32,
    beta2: f32,
    step: usize,
}

impl Adam {
    fn new(n: usize, beta1: f32, beta2: f32) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            beta1,
            beta2,
            step: 0,
        }
    }

    /// One update over a flat parameter view with per-entry learning rates.
    fn update(&mut self, params: &mut [f32], grads: &[f32], lrs: &[f32]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lrs[i] * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

fn flatten(params: &[Params], nsh: usize) -> (Vec<f32>, Vec<f32>) {
    let stride = 11 + 3 * nsh;
    let mut flat = Vec::with_capacity(params.len() * stride);
    let mut lrs = Vec::with_capacity(params.len() * stride);
    for p in params {
        flat.extend_from_slice(&p.center);
        lrs.extend_from_slice(&[LR_CENTER; 3]);
        flat.push(p.logit_opacity);
        lrs.push(LR_OPACITY);
        flat.extend_from_slice(&p.log_scale);
        lrs.extend_from_slice(&[LR_SCALE; 3]);
        flat.extend_from_slice(&p.quat);
        lrs.extend_from_slice(&[LR_ROTATION; 4]);
        for c in &p.sh {
            flat.extend_from_slice(c);
            lrs.extend_from_slice(&[LR_SH; 3]);
        }
    }
    (flat, lrs)
}

fn unflatten(flat: &[f32], params: &mut [Params], nsh: usize) {
    let stride = 11 + 3 * nsh;
    for (i, p) in params.iter_mut().enumerate() {
        let base = i * stride;
        p.center.copy_from_slice(&flat[base..base + 3]);
        p.logit_opacity = flat[base + 3];
        p.log_scale.copy_from_slice(&flat[base + 4..base + 7]);
        for v in &mut p.log_scale {
            *v = v.clamp(LOG_SCALE_MIN, LOG_SCALE_MAX);
        }
        p.quat.copy_from_slice(&flat[base + 7..base + 11]);
        // Renormalize so the raw quaternion stays well-conditioned.
        let qn = p.quat.iter().map(|v| v * v).sum::<f32>().sqrt();
        if qn > 1e-8 {
            for v in &mut p.quat {
                *v /= qn;
            }
        } else {
            p.quat = [1.0, 0.0, 0.0, 0.0];
        }
        for (k, c) in p.sh.iter_mut().enumerate() {
            c.copy_from_slice(&flat[base + 11 + 3 * k..base + 14 + 3 * k]);
        }
    }
}

/// Fits `init` to the supervision views by MSE gradient descent. The loss
/// trace is the best-so-far loss; the returned set is the best one seen.
pub fn fit(
    init: GaussianSet<f32>,
    views: &[(Tensor<f32>, CameraView)],
    cfg: &FitConfig,
) -> Result<FitResult> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("fit needs at least 1 view".into()));
    }
    let sh_degree = init.sh_degree;
    let nsh = sh::num_coeffs(sh_degree);
    let stride = 11 + 3 * nsh;
    let n = init.len();
    let mut params = to_params(&init);
    let mut adam = Adam::new(n * stride, cfg.beta1, cfg.beta2);
    let background = [0.0f32; 3];
    let mut best_loss = f32::INFINITY;
    let mut best_params = params.clone();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let set = to_set(&params, sh_degree);
        // Forward: mean MSE over views; backward: summed parameter grads.
        let mut loss = 0.0f32;
        let mut grad_flat = vec![0.0f32; n * stride];
        for (target, cam) in views {
            let (h, w) = (cam.height, cam.width);
            let out = rasterize(&set, cam, w, h, background)?;
            loss += mse(&out.color, target)? / views.len() as f32;
            // d(mean MSE)/dC = 2 (C - T) / (numel * K).
            let scale = 2.0 / (target.numel() as f32 * views.len() as f32);
            let d_color = Tensor::new(
                vec![h, w, 3],
                out.color
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(c, t)| (c - t) * scale)
                    .collect(),
            )?;
            let g = rasterize_backward(&set, cam, w, h, background, &d_color)?;
            for i in 0..n {
                let base = i * stride;
                let gs = &set.gaussians[i];
                for k in 0..3 {
                    grad_flat[base + k] += g.center[i][k];
                }
                // opacity: chain through the sigmoid.
                grad_flat[base + 3] += g.opacity[i] * gs.opacity * (1.0 - gs.opacity);
                // scale: chain through exp.
                for k in 0..3 {
                    grad_flat[base + 4 + k] += g.scale[i][k] * gs.scale[k];
                }
                for k in 0..4 {
                    grad_flat[base + 7 + k] += g.rotation[i][k];
                }
                for (k, c) in g.sh[i].iter().enumerate() {
                    for ch in 0..3 {
                        grad_flat[base + 11 + 3 * k + ch] += c[ch];
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: iter,
                reason: format!("loss became {loss}"),
            });
        }
        if loss < best_loss {
            best_loss = loss;
            best_params = params.clone();
        }
        trace.push(best_loss);
        let (mut flat, lrs) = flatten(&params, nsh);
        let lrs: Vec<f32> = lrs.iter().map(|m| m * cfg.learning_rate).collect();
        adam.update(&mut flat, &grad_flat, &lrs);
        unflatten(&flat, &mut params, nsh);
    }
    let set = to_set(&best_params, sh_degree);
    let mut total_psnr = 0.0f32;
    for (target, cam) in views {
        let out = rasterize(&set, cam, cam.width, cam.height, background)?;
        total_psnr += psnr(&out.color, target, 1.0)? / views.len() as f32;
    }
    Ok(FitResult {
        set,
        loss_trace: trace,
        final_psnr: total_psnr,
    })
}

/// Scene-level entry point: supervision views are the scene targets (or the
/// context views when no targets are listed); initialization comes from
/// `run_infer` when a weight store is provided, otherwise from random
/// Gaussians in the first supervision view's frustum.
pub fn fit_scene(
    scene: &SceneBundle,
    config: &RunConfig,
    ws: Option<&WeightStore>,
) -> Result<FitResult> {
    let supervision: &[usize] = if scene.targets.is_empty() {
        &scene.context
    } else {
        &scene.targets
    };
    if supervision.is_empty() {
        return Err(Error::Scene("fit needs at least 1 supervision view".into()));
    }
    let views: Vec<(Tensor<f32>, CameraView)> = supervision
        .iter()
        .map(|&i| (scene.views[i].image.clone(), scene.views[i].camera.clone()))
        .collect();
    let init = match ws {
        Some(ws) => run_infer(scene, config, ws)?.gaussians,
        None => random_init(
            config.fit.init_gaussians,
            &views[0].1,
            config.sh_degree,
            config.seed,
        ),
    };
    fit(init, &views, &config.fit)
}
