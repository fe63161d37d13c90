//! Self-contained synthetic scenes: ground-truth Gaussian sets rendered by
//! the oracle rasterizer into multi-view scene bundles, with monocular-style
//! priors derived from the true depth (a non-metric power remap).

use crate::error::Result;
use crate::gaussians::{Gaussian, GaussianSet};
use crate::geometry::{depth_candidates, CameraView};
use crate::pfm::write_pfm;
use crate::ply::write_ply;
use crate::rasterizer::rasterize_reference;
use crate::scene::{save_scene, write_png, SceneBundle, SceneView};
use crate::sh::SH_C0;
use crate::tensor::Tensor;
use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

pub const SYNTH_SIZE: usize = 64;
pub const SYNTH_NEAR: f64 = 1.0;
pub const SYNTH_FAR: f64 = 8.0;
/// Depth-candidate grid the plane preset aligns with.
pub const SYNTH_D: usize = 32;
const PLANE_CANDIDATE: usize = 16;
const PRIOR_GAMMA: f32 = 0.7;

/// Camera x-offsets for the three views (context 0, context 1, target).
/// The context baseline is chosen so the plane preset's disparity between
/// the context views is exactly 3 quarter-resolution pixels: per-pixel
/// feature correlation is piecewise-linear in the sampled position, so its
/// maximum always falls on an integer alignment, and only an integer true
/// disparity makes the matching argmax land on the plane's candidate.
pub fn synth_offsets() -> [f64; 3] {
    let z0 = depth_candidates(SYNTH_NEAR, SYNTH_FAR, SYNTH_D)
        .expect("synth candidate grid")
        .values()[PLANE_CANDIDATE];
    // baseline = 3 * z0 / (fx/4); cameras sit at +-baseline/2.
    let half = 3.0 * z0 / (2.0 * (SYNTH_SIZE as f64 / 4.0));
    [-half, half, 0.0]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Plane,
    Box,
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "plane" => Ok(Preset::Plane),
            "box" => Ok(Preset::Box),
            other => Err(format!("unknown preset `{other}` (expected plane|box)")),
        }
    }
}

pub struct SynthOutput {
    pub scene_path: PathBuf,
    pub gt: GaussianSet<f32>,
    /// For the plane preset: the exact metric depth of the plane, which
    /// coincides with one of the inverse-depth candidates.
    pub plane_depth: Option<f64>,
}

fn synth_camera(x_offset: f64) -> CameraView {
    let mut wfc = Matrix4::identity();
    wfc[(0, 3)] = x_offset;
    CameraView {
        fx: SYNTH_SIZE as f64,
        fy: SYNTH_SIZE as f64,
        cx: SYNTH_SIZE as f64 / 2.0,
        cy: SYNTH_SIZE as f64 / 2.0,
        world_from_camera: wfc,
        width: SYNTH_SIZE,
        height: SYNTH_SIZE,
        near: SYNTH_NEAR,
        far: SYNTH_FAR,
    }
}

/// Seeded random texture: per channel, a sum of sinusoids with random
/// incommensurate wave vectors. The aperiodic mix keeps the spatial
/// autocorrelation decaying with shift, so view matching has a unique
/// alignment; frequencies stay below the quarter-resolution Nyquist limit.
struct TexField {
    // (amplitude, kx, ky, phase) per component, 8 components per channel.
    comps: [[(f64, f64, f64, f64); 8]; 3],
    gain: [f64; 3],
}

impl TexField {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut comps = [[(0.0, 0.0, 0.0, 0.0); 8]; 3];
        let mut gain = [0.0; 3];
        for ch in 0..3 {
            let mut power = 0.0;
            for comp in comps[ch].iter_mut() {
                let amp: f64 = rng.gen_range(0.5..1.5);
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let mag: f64 = rng.gen_range(4.0..14.0);
                let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                *comp = (amp, mag * theta.cos(), mag * theta.sin(), phase);
                power += amp * amp;
            }
            gain[ch] = 0.26 / (power / 2.0).sqrt();
        }
        TexField { comps, gain }
    }

    fn sample(&self, x: f64, y: f64, rng: &mut ChaCha8Rng) -> [f32; 3] {
        let mut out = [0.0f32; 3];
        for ch in 0..3 {
            let s: f64 = self.comps[ch]
                .iter()
                .map(|&(a, kx, ky, ph)| a * (kx * x + ky * y + ph).sin())
                .sum();
            let jitter: f64 = rng.gen_range(-0.04..0.04);
            out[ch] = ((0.5 + self.gain[ch] * s + jitter) as f32).clamp(0.05, 0.95);
        }
        out
    }
}

fn color_gaussian(center: [f64; 3], scale: f64, rgb: [f32; 3], opacity: f32) -> Gaussian<f32> {
    // Degree-0 coefficients reproducing the requested color exactly.
    let sh0 = rgb.map(|v| (v - 0.5) / SH_C0 as f32);
    Gaussian {
        center: center.map(|v| v as f32),
        opacity,
        scale: [scale as f32; 3],
        rotation: [1.0, 0.0, 0.0, 0.0],
        sh: vec![sh0],
    }
}

fn plane_set(seed: u64, z0: f64) -> GaussianSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = TexField::new(&mut rng);
    // Cover the union of all view frusta at depth z0, with margin for the
    // camera baselines.
    let half = z0 * 0.5 + 0.5;
    let grid = 48usize;
    let spacing = 2.0 * half / grid as f64;
    let mut gaussians = Vec::with_capacity(grid * grid);
    for iy in 0..grid {
        for ix in 0..grid {
            let x = -half + (ix as f64 + 0.5) * spacing;
            let y = -half + (iy as f64 + 0.5) * spacing;
            let rgb = field.sample(x, y, &mut rng);
            gaussians.push(color_gaussian([x, y, z0], spacing * 0.65, rgb, 0.92));
        }
    }
    GaussianSet {
        gaussians,
        sh_degree: 0,
    }
}

fn box_set(seed: u64) -> GaussianSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = TexField::new(&mut rng);
    let center = [0.0f64, 0.0, 3.2];
    let half = 0.9f64;
    let grid = 22usize;
    let spacing = 2.0 * half / grid as f64;
    let mut gaussians = Vec::new();
    // Face base colors are modulated by the shared texture.
    let faces: [([f64; 3], [f64; 3], [f64; 3], [f32; 3]); 5] = [
        // front (toward camera), left, right, top, bottom
        ([0.0, 0.0, -half], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.9, 0.4, 0.3]),
        ([-half, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [0.3, 0.8, 0.4]),
        ([half, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [0.35, 0.45, 0.9]),
        ([0.0, -half, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.85, 0.8, 0.3]),
        ([0.0, half, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.6, 0.35, 0.8]),
    ];
    for (origin, u, v, base) in faces {
        for iy in 0..grid {
            for ix in 0..grid {
                let a = -half + (ix as f64 + 0.5) * spacing;
                let b = -half + (iy as f64 + 0.5) * spacing;
                let p = [
                    center[0] + origin[0] + u[0] * a + v[0] * b,
                    center[1] + origin[1] + u[1] * a + v[1] * b,
                    center[2] + origin[2] + u[2] * a + v[2] * b,
                ];
                let tex = field.sample(a * 2.0, b * 2.0, &mut rng);
                let rgb = [
                    (base[0] * (0.7 + 0.3 * tex[0])).clamp(0.05, 0.95),
                    (base[1] * (0.7 + 0.3 * tex[1])).clamp(0.05, 0.95),
                    (base[2] * (0.7 + 0.3 * tex[2])).clamp(0.05, 0.95),
                ];
                gaussians.push(color_gaussian(p, spacing * 0.6, rgb, 0.9));
            }
        }
    }
    GaussianSet {
        gaussians,
        sh_degree: 0,
    }
}

/// Generates a 3-view scene bundle (context views 0 and 1, target view 2):
/// PNG images rendered from the ground-truth set by the oracle, PFM priors
/// remapped from the true depth by `depth^0.7`, the scene JSON, and the
/// ground-truth PLY.
pub fn generate(preset: Preset, dir: &Path, seed: u64) -> Result<SynthOutput> {
    let (gt, plane_depth) = match preset {
        Preset::Plane => {
            let cand = depth_candidates(SYNTH_NEAR, SYNTH_FAR, SYNTH_D)?;
            let z0 = cand.values()[PLANE_CANDIDATE];
            (plane_set(seed, z0), Some(z0))
        }
        Preset::Box => (box_set(seed), None),
    };
    let offsets = synth_offsets();
    let mut views = Vec::with_capacity(3);
    for (i, &off) in offsets.iter().enumerate() {
        let cam = synth_camera(off);
        let out = rasterize_reference(&gt, &cam, SYNTH_SIZE, SYNTH_SIZE, [0.0, 0.0, 0.0])?;
        let image_path = PathBuf::from(format!("view_{i}.png"));
        write_png(&out.color, dir.join(&image_path))?;
        // Prior: non-metric monotone remap of the true depth; background
        // pixels fall back to the far plane.
        let mut prior = Tensor::zeros(vec![SYNTH_SIZE, SYNTH_SIZE]);
        for pix in 0..SYNTH_SIZE * SYNTH_SIZE {
            let d = if out.alpha.data()[pix] > 0.5 {
                out.depth.data()[pix]
            } else {
                SYNTH_FAR as f32
            };
            prior.data_mut()[pix] = d.powf(PRIOR_GAMMA);
        }
        let prior_path = PathBuf::from(format!("prior_{i}.pfm"));
        write_pfm(dir.join(&prior_path), &prior)?;
        views.push(SceneView {
            image_path,
            image: out.color,
            camera: cam,
            prior_path: Some(prior_path),
        });
    }
    let scene = SceneBundle {
        views,
        context: vec![0, 1],
        targets: vec![2],
        root: dir.to_path_buf(),
    };
    let scene_path = dir.join("scene.json");
    save_scene(&scene, &scene_path)?;
    write_ply(&gt, dir.join("gt.ply"))?;
    Ok(SynthOutput {
        scene_path,
        gt,
        plane_depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::load_scene;

    #[test]
    fn plane_scene_is_loadable_and_aligned() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate(Preset::Plane, dir.path(), 1).unwrap();
        let scene = load_scene(&out.scene_path).unwrap();
        assert_eq!(scene.views.len(), 3);
        assert_eq!(scene.context, vec![0, 1]);
        assert_eq!(scene.targets, vec![2]);
        // The plane depth is exactly one of the candidates.
        let cand = depth_candidates(SYNTH_NEAR, SYNTH_FAR, SYNTH_D).unwrap();
        let z0 = out.plane_depth.unwrap();
        assert!(cand.values().iter().any(|&v| (v - z0).abs() < 1e-12));
        // Images carry real content.
        for v in &scene.views {
            let mean: f32 =
                v.image.data().iter().sum::<f32>() / v.image.numel() as f32;
            assert!(mean > 0.1, "image suspiciously dark, mean {mean}");
        }
    }

    #[test]
    fn plane_fills_every_context_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate(Preset::Plane, dir.path(), 2).unwrap();
        for &off in &synth_offsets()[..2] {
            let cam = synth_camera(off);
            let r = rasterize_reference(&out.gt, &cam, SYNTH_SIZE, SYNTH_SIZE, [0.0; 3]).unwrap();
            let covered = r.alpha.data().iter().filter(|&&a| a > 0.5).count();
            assert_eq!(covered, SYNTH_SIZE * SYNTH_SIZE);
        }
    }

    #[test]
    fn box_scene_generates_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate(Preset::Box, dir.path(), 3).unwrap();
        out.gt.validate().unwrap();
        assert!(out.plane_depth.is_none());
        let scene = load_scene(&out.scene_path).unwrap();
        // The box does not fill the frame: some background remains.
        let cam = &scene.views[2].camera;
        let r = rasterize_reference(&out.gt, cam, 64, 64, [0.0; 3]).unwrap();
        assert!(r.alpha.data().iter().any(|&a| a < 0.1));
        assert!(r.alpha.data().iter().any(|&a| a > 0.9));
    }

    #[test]
    fn deterministic_per_seed() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate(Preset::Plane, d1.path(), 5).unwrap();
        generate(Preset::Plane, d2.path(), 5).unwrap();
        for name in ["view_0.png", "view_2.png", "prior_1.pfm", "gt.ply"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical seeds");
        }
    }
}
