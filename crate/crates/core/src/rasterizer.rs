//! Tile-based CPU splatting of a Gaussian set with depth-sorted alpha
//! compositing, a brute-force per-pixel oracle, and analytic gradients.
//!
//! Both render paths share the same projection, the same per-pixel 3-sigma
//! bounding-box skip predicate, and the same compositing loop, so the tiled
//! renderer equals the oracle exactly by construction; tiles exist purely
//! for performance. All thresholds (0.99 opacity cap, 1/255 alpha skip,
//! 1e-4 transmittance cutoff, 0.3-pixel covariance floor) are the standard
//! splatting constants and are treated as non-differentiable gates by the
//! backward pass.

use crate::error::{Error, Result};
use crate::gaussians::{covariance, rotation_matrix, Gaussian, GaussianSet};
use crate::geometry::CameraView;
use crate::sh;
use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;

pub const TILE_SIZE: usize = 16;
const ALPHA_CAP: f64 = 0.99;
const ALPHA_SKIP: f64 = 1.0 / 255.0;
const T_CUTOFF: f64 = 1e-4;
const COV_FLOOR: f64 = 0.3;
const NEAR_CULL_FRAC: f64 = 0.05;
const BBOX_SIGMA: f64 = 3.0;

/// A projected Gaussian ready for compositing.
#[derive(Clone, Debug)]
pub struct Splat2D<T: Scalar = f32> {
    pub mean2d: [T; 2],
    /// 2x2 screen-space covariance, including the low-pass floor.
    pub cov2d: [[T; 2]; 2],
    /// Inverse of `cov2d`.
    pub conic: [[T; 2]; 2],
    pub depth: T,
    pub color: [T; 3],
    pub opacity: T,
    /// 3-sigma bounding half-width in pixels.
    pub radius: T,
    pub source: usize,
}

#[derive(Clone, Debug)]
pub struct RenderOutput<T: Scalar = f32> {
    pub color: Tensor<T>,
    pub alpha: Tensor<T>,
    /// Alpha-weighted expected depth (0 where nothing splats).
    pub depth: Tensor<T>,
    /// Number of splats that passed every gate at each pixel.
    pub contributors: Vec<u32>,
}

/// Per-parameter-block gradients, indexed like the input set.
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar = f32> {
    pub center: Vec<[T; 3]>,
    pub opacity: Vec<T>,
    pub scale: Vec<[T; 3]>,
    pub rotation: Vec<[T; 4]>,
    pub sh: Vec<Vec<[T; 3]>>,
}

impl<T: Scalar> Gradients<T> {
    fn zeros(set: &GaussianSet<T>) -> Self {
        let n = set.len();
        let nsh = sh::num_coeffs(set.sh_degree);
        Gradients {
            center: vec![[T::zero(); 3]; n],
            opacity: vec![T::zero(); n],
            scale: vec![[T::zero(); 3]; n],
            rotation: vec![[T::zero(); 4]; n],
            sh: vec![vec![[T::zero(); 3]; nsh]; n],
        }
    }
}

type Mat3<T> = [[T; 3]; 3];

fn mat3_mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn mat3_transpose<T: Scalar>(a: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

/// World-to-camera rotation and camera position in the requested scalar type.
fn camera_frame<T: Scalar>(cam: &CameraView) -> (Mat3<T>, [T; 3]) {
    let r = cam.rotation();
    // Rows of R^T are columns of R.
    let mut rw = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rw[i][j] = T::from_f64c(r[(j, i)]);
        }
    }
    let p = cam.position();
    (rw, [T::from_f64c(p.x), T::from_f64c(p.y), T::from_f64c(p.z)])
}

/// Perspective Jacobian at a camera-frame point t, 2x3 row-major.
fn perspective_jacobian<T: Scalar>(t: [T; 3], fx: T, fy: T) -> [[T; 3]; 2] {
    let inv_z = T::one() / t[2];
    let inv_z2 = inv_z * inv_z;
    [
        [fx * inv_z, T::zero(), -fx * t[0] * inv_z2],
        [T::zero(), fy * inv_z, -fy * t[1] * inv_z2],
    ]
}

/// Projects one Gaussian. Returns `None` when the center is culled by the
/// near-plane test (z <= 0.05 * near).
pub fn project_gaussian<T: Scalar>(
    g: &Gaussian<T>,
    sh_degree: usize,
    cam: &CameraView,
    source: usize,
) -> Option<Splat2D<T>> {
    let (rw, pos) = camera_frame::<T>(cam);
    let d = [g.center[0] - pos[0], g.center[1] - pos[1], g.center[2] - pos[2]];
    let mut t = [T::zero(); 3];
    for i in 0..3 {
        t[i] = rw[i][0] * d[0] + rw[i][1] * d[1] + rw[i][2] * d[2];
    }
    if t[2] <= T::from_f64c(NEAR_CULL_FRAC * cam.near) {
        return None;
    }
    let sigma = covariance(g.scale, g.rotation).ok()?;
    let m = mat3_mul(&mat3_mul(&rw, &sigma), &mat3_transpose(&rw));
    let fx = T::from_f64c(cam.fx);
    let fy = T::from_f64c(cam.fy);
    let j = perspective_jacobian(t, fx, fy);
    // cov2d = J M J^T + floor * I
    let mut jm = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            for k in 0..3 {
                jm[r][c] += j[r][k] * m[k][c];
            }
        }
    }
    let floor = T::from_f64c(COV_FLOOR);
    let mut cov2d = [[T::zero(); 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            for k in 0..3 {
                cov2d[r][c] += jm[r][k] * j[c][k];
            }
        }
    }
    cov2d[0][0] += floor;
    cov2d[1][1] += floor;
    let det = cov2d[0][0] * cov2d[1][1] - cov2d[0][1] * cov2d[1][0];
    if det <= T::zero() || !det.is_finite() {
        return None;
    }
    let inv_det = T::one() / det;
    let conic = [
        [cov2d[1][1] * inv_det, -cov2d[0][1] * inv_det],
        [-cov2d[1][0] * inv_det, cov2d[0][0] * inv_det],
    ];
    let mid = (cov2d[0][0] + cov2d[1][1]) * T::from_f64c(0.5);
    let lambda_max = mid + (mid * mid - det).max(T::zero()).sqrt();
    let radius = T::from_f64c(BBOX_SIGMA) * lambda_max.sqrt();
    let mean2d = [
        fx * t[0] / t[2] + T::from_f64c(cam.cx),
        fy * t[1] / t[2] + T::from_f64c(cam.cy),
    ];
    let dn = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let dir = if dn > T::from_f64c(1e-12) {
        [d[0] / dn, d[1] / dn, d[2] / dn]
    } else {
        [T::zero(), T::zero(), T::one()]
    };
    let color = crate::gaussians::sh_evaluate(&g.sh, sh_degree, dir);
    Some(Splat2D {
        mean2d,
        cov2d,
        conic,
        depth: t[2],
        color,
        opacity: g.opacity,
        radius,
        source,
    })
}

/// The shared per-pixel skip predicate: pixel center inside the splat's
/// axis-aligned 3-sigma bounding box. Both render paths use exactly this.
fn in_bbox<T: Scalar>(s: &Splat2D<T>, px: T, py: T) -> bool {
    (px - s.mean2d[0]).abs() <= s.radius && (py - s.mean2d[1]).abs() <= s.radius
}

/// Opacity-weighted Gaussian falloff at a pixel center, before the cap.
fn splat_alpha_raw<T: Scalar>(s: &Splat2D<T>, px: T, py: T) -> T {
    let dx = px - s.mean2d[0];
    let dy = py - s.mean2d[1];
    let power = -T::from_f64c(0.5)
        * (s.conic[0][0] * dx * dx
            + (s.conic[0][1] + s.conic[1][0]) * dx * dy
            + s.conic[1][1] * dy * dy);
    s.opacity * power.exp()
}

struct PixelResult<T: Scalar> {
    color: [T; 3],
    alpha: T,
    depth: T,
    count: u32,
}

/// Front-to-back compositing of an already depth-sorted splat list. When
/// `record` is given, every surviving contributor's (list index, alpha) is
/// appended in compositing order.
fn composite_pixel<T: Scalar>(
    splats: &[Splat2D<T>],
    px: T,
    py: T,
    background: [T; 3],
    mut record: Option<&mut Vec<(usize, T)>>,
) -> PixelResult<T> {
    let alpha_cap = T::from_f64c(ALPHA_CAP);
    let alpha_skip = T::from_f64c(ALPHA_SKIP);
    let t_cutoff = T::from_f64c(T_CUTOFF);
    let mut trans = T::one();
    let mut color = [T::zero(); 3];
    let mut depth = T::zero();
    let mut count = 0u32;
    for (i, s) in splats.iter().enumerate() {
        if !in_bbox(s, px, py) {
            continue;
        }
        let alpha = splat_alpha_raw(s, px, py).min(alpha_cap);
        if alpha < alpha_skip {
            continue;
        }
        let w = trans * alpha;
        for ch in 0..3 {
            color[ch] += w * s.color[ch];
        }
        depth += w * s.depth;
        count += 1;
        if let Some(rec) = record.as_deref_mut() {
            rec.push((i, alpha));
        }
        trans *= T::one() - alpha;
        if trans < t_cutoff {
            break;
        }
    }
    let alpha_total = T::one() - trans;
    for ch in 0..3 {
        color[ch] += trans * background[ch];
    }
    if alpha_total > T::zero() {
        depth /= alpha_total;
    }
    PixelResult {
        color,
        alpha: alpha_total,
        depth,
        count,
    }
}

fn check_set_finite<T: Scalar>(set: &GaussianSet<T>) -> Result<()> {
    for (i, g) in set.gaussians.iter().enumerate() {
        let finite = g.center.iter().all(|v| v.is_finite())
            && g.opacity.is_finite()
            && g.scale.iter().all(|v| v.is_finite())
            && g.rotation.iter().all(|v| v.is_finite())
            && g.sh.iter().all(|c| c.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite(format!("gaussian {i} has a non-finite parameter")));
        }
    }
    Ok(())
}

/// Projects every Gaussian and returns the survivors in global compositing
/// order: ascending (depth, source index).
fn project_sorted<T: Scalar>(set: &GaussianSet<T>, cam: &CameraView) -> Vec<Splat2D<T>> {
    let mut splats: Vec<Splat2D<T>> = set
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(g, set.sh_degree, cam, i))
        .collect();
    splats.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.source.cmp(&b.source))
    });
    splats
}

fn pixel_center<T: Scalar>(i: usize) -> T {
    T::from_usizec(i) + T::from_f64c(0.5)
}

/// Pixel range [lo, hi) whose centers can fall inside the splat's bbox.
fn pixel_span<T: Scalar>(mean: T, radius: T, limit: usize) -> (usize, usize) {
    let lo = (mean - radius - T::from_f64c(0.5)).ceil().to_f64().unwrap_or(0.0);
    let hi = (mean + radius - T::from_f64c(0.5)).floor().to_f64().unwrap_or(-1.0);
    if hi < 0.0 || lo > (limit - 1) as f64 {
        return (0, 0);
    }
    let lo = lo.max(0.0) as usize;
    let hi = (hi as usize).min(limit - 1);
    (lo, hi + 1)
}

struct Tiling {
    tiles_x: usize,
    /// Per tile, indices into the globally sorted splat list, in order.
    bins: Vec<Vec<usize>>,
}

fn bin_to_tiles<T: Scalar>(splats: &[Splat2D<T>], width: usize, height: usize) -> Tiling {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    for (i, s) in splats.iter().enumerate() {
        let (x0, x1) = pixel_span(s.mean2d[0], s.radius, width);
        let (y0, y1) = pixel_span(s.mean2d[1], s.radius, height);
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        let (tx0, tx1) = (x0 / TILE_SIZE, (x1 - 1) / TILE_SIZE);
        let (ty0, ty1) = (y0 / TILE_SIZE, (y1 - 1) / TILE_SIZE);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                // Splat indices stay sorted because i is increasing.
                bins[ty * tiles_x + tx].push(i);
            }
        }
    }
    Tiling { tiles_x, bins }
}

/// Tile-parallel splatting. Bit-identical to `rasterize_reference`.
pub fn rasterize<T: Scalar>(
    set: &GaussianSet<T>,
    cam: &CameraView,
    width: usize,
    height: usize,
    background: [T; 3],
) -> Result<RenderOutput<T>> {
    check_set_finite(set)?;
    let splats = project_sorted(set, cam);
    let tiling = bin_to_tiles(&splats, width, height);
    let tile_results: Vec<(usize, Vec<PixelResult<T>>)> = (0..tiling.bins.len())
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiling.tiles_x, tile / tiling.tiles_x);
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let x1 = (x0 + TILE_SIZE).min(width);
            let y1 = (y0 + TILE_SIZE).min(height);
            // Local sorted sub-list for this tile.
            let local: Vec<Splat2D<T>> =
                tiling.bins[tile].iter().map(|&i| splats[i].clone()).collect();
            let mut pixels = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for py in y0..y1 {
                for px in x0..x1 {
                    pixels.push(composite_pixel(
                        &local,
                        pixel_center(px),
                        pixel_center(py),
                        background,
                        None,
                    ));
                }
            }
            (tile, pixels)
        })
        .collect();
    let mut color = Tensor::zeros(vec![height, width, 3]);
    let mut alpha = Tensor::zeros(vec![height, width]);
    let mut depth = Tensor::zeros(vec![height, width]);
    let mut contributors = vec![0u32; height * width];
    for (tile, pixels) in tile_results {
        let (tx, ty) = (tile % tiling.tiles_x, tile / tiling.tiles_x);
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        let x1 = (x0 + TILE_SIZE).min(width);
        let mut it = pixels.into_iter();
        for py in y0..(y0 + TILE_SIZE).min(height) {
            for px in x0..x1 {
                let p = it.next().unwrap();
                let pix = py * width + px;
                color.data_mut()[pix * 3..pix * 3 + 3].copy_from_slice(&p.color);
                alpha.data_mut()[pix] = p.alpha;
                depth.data_mut()[pix] = p.depth;
                contributors[pix] = p.count;
            }
        }
    }
    Ok(RenderOutput {
        color,
        alpha,
        depth,
        contributors,
    })
}

/// Brute-force oracle: every pixel walks the full globally sorted splat
/// list with the identical skip rules and compositing arithmetic.
pub fn rasterize_reference<T: Scalar>(
    set: &GaussianSet<T>,
    cam: &CameraView,
    width: usize,
    height: usize,
    background: [T; 3],
) -> Result<RenderOutput<T>> {
    check_set_finite(set)?;
    let splats = project_sorted(set, cam);
    let mut color = Tensor::zeros(vec![height, width, 3]);
    let mut alpha = Tensor::zeros(vec![height, width]);
    let mut depth = Tensor::zeros(vec![height, width]);
    let mut contributors = vec![0u32; height * width];
    for py in 0..height {
        for px in 0..width {
            let p = composite_pixel(&splats, pixel_center(px), pixel_center(py), background, None);
            let pix = py * width + px;
            color.data_mut()[pix * 3..pix * 3 + 3].copy_from_slice(&p.color);
            alpha.data_mut()[pix] = p.alpha;
            depth.data_mut()[pix] = p.depth;
            contributors[pix] = p.count;
        }
    }
    Ok(RenderOutput {
        color,
        alpha,
        depth,
        contributors,
    })
}

/// Per-splat screen-space gradient accumulator.
#[derive(Clone)]
struct SplatGrad<T: Scalar> {
    mean2d: [T; 2],
    conic: [[T; 2]; 2],
    color: [T; 3],
    opacity: T,
    touched: bool,
}

impl<T: Scalar> SplatGrad<T> {
    fn zero() -> Self {
        SplatGrad {
            mean2d: [T::zero(); 2],
            conic: [[T::zero(); 2]; 2],
            color: [T::zero(); 3],
            opacity: T::zero(),
            touched: false,
        }
    }
}

/// Analytic gradients of a scalar loss with pixel-color gradient `d_color`
/// (shape [H, W, 3]) with respect to every Gaussian parameter block. Splats
/// removed by the near cull, the alpha skip, the transmittance cutoff, the
/// opacity cap, or the color clamp get exactly zero gradient through the
/// gated path — all thresholds are treated as non-differentiable gates.
pub fn rasterize_backward<T: Scalar>(
    set: &GaussianSet<T>,
    cam: &CameraView,
    width: usize,
    height: usize,
    background: [T; 3],
    d_color: &Tensor<T>,
) -> Result<Gradients<T>> {
    if d_color.shape() != [height, width, 3] {
        return Err(Error::ShapeMismatch(format!(
            "d_color shape {:?}, expected [{height}, {width}, 3]",
            d_color.shape()
        )));
    }
    check_set_finite(set)?;
    let splats = project_sorted(set, cam);
    let tiling = bin_to_tiles(&splats, width, height);

    // Screen-space gradients per tile, merged afterwards in tile order so
    // the result is independent of the rayon thread count.
    let tile_grads: Vec<Vec<(usize, SplatGrad<T>)>> = (0..tiling.bins.len())
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiling.tiles_x, tile / tiling.tiles_x);
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let x1 = (x0 + TILE_SIZE).min(width);
            let y1 = (y0 + TILE_SIZE).min(height);
            let local: Vec<Splat2D<T>> =
                tiling.bins[tile].iter().map(|&i| splats[i].clone()).collect();
            let mut acc: Vec<SplatGrad<T>> = vec![SplatGrad::zero(); local.len()];
            let mut hits: Vec<(usize, T)> = Vec::new();
            let alpha_cap = T::from_f64c(ALPHA_CAP);
            let half = T::from_f64c(0.5);
            for py in y0..y1 {
                for px in x0..x1 {
                    hits.clear();
                    let pcx = pixel_center::<T>(px);
                    let pcy = pixel_center::<T>(py);
                    let res =
                        composite_pixel(&local, pcx, pcy, background, Some(&mut hits));
                    if hits.is_empty() {
                        continue;
                    }
                    let pix = py * width + px;
                    let g: [T; 3] = [
                        d_color.data()[pix * 3],
                        d_color.data()[pix * 3 + 1],
                        d_color.data()[pix * 3 + 2],
                    ];
                    let _ = res;
                    // Forward scan to recover entry transmittances.
                    let mut trans = Vec::with_capacity(hits.len());
                    let mut t_cur = T::one();
                    for &(_, alpha) in &hits {
                        trans.push(t_cur);
                        t_cur *= T::one() - alpha;
                    }
                    // Suffix accumulator: starts at the background term.
                    let mut suffix = [
                        t_cur * background[0],
                        t_cur * background[1],
                        t_cur * background[2],
                    ];
                    for k in (0..hits.len()).rev() {
                        let (li, alpha) = hits[k];
                        let s = &local[li];
                        let t_i = trans[k];
                        let w = t_i * alpha;
                        let a = &mut acc[li];
                        a.touched = true;
                        // dL/d color_i
                        for ch in 0..3 {
                            a.color[ch] += g[ch] * w;
                        }
                        // dL/d alpha_i through this pixel.
                        let mut d_alpha = T::zero();
                        let one_m = T::one() - alpha;
                        for ch in 0..3 {
                            d_alpha += g[ch] * (t_i * s.color[ch] - suffix[ch] / one_m);
                        }
                        // Maintain the suffix for the next (nearer) splat.
                        for ch in 0..3 {
                            suffix[ch] += w * s.color[ch];
                        }
                        // Cap gate: a capped alpha is locally constant.
                        let raw = splat_alpha_raw(s, pcx, pcy);
                        if raw >= alpha_cap {
                            continue;
                        }
                        let gexp = raw / s.opacity; // exp(power)
                        a.opacity += d_alpha * gexp;
                        let d_power = d_alpha * raw;
                        let dx = pcx - s.mean2d[0];
                        let dy = pcy - s.mean2d[1];
                        // power = -1/2 d^T A d with A = conic.
                        let adx = s.conic[0][0] * dx + s.conic[0][1] * dy;
                        let ady = s.conic[1][0] * dx + s.conic[1][1] * dy;
                        a.mean2d[0] += d_power * adx;
                        a.mean2d[1] += d_power * ady;
                        let gc = -d_power * half;
                        a.conic[0][0] += gc * dx * dx;
                        a.conic[0][1] += gc * dx * dy;
                        a.conic[1][0] += gc * dy * dx;
                        a.conic[1][1] += gc * dy * dy;
                    }
                }
            }
            tiling.bins[tile]
                .iter()
                .zip(acc)
                .filter(|(_, a)| a.touched)
                .map(|(&gi, a)| (gi, a))
                .collect()
        })
        .collect();

    // Deterministic merge: fixed tile traversal order.
    let mut merged: Vec<SplatGrad<T>> = vec![SplatGrad::zero(); splats.len()];
    for tile in tile_grads {
        for (gi, a) in tile {
            let m = &mut merged[gi];
            m.touched = true;
            for i in 0..2 {
                m.mean2d[i] += a.mean2d[i];
                for j in 0..2 {
                    m.conic[i][j] += a.conic[i][j];
                }
            }
            for ch in 0..3 {
                m.color[ch] += a.color[ch];
            }
            m.opacity += a.opacity;
        }
    }

    let mut grads = Gradients::zeros(set);
    let (rw, pos) = camera_frame::<T>(cam);
    let rwt = mat3_transpose(&rw);
    let fx = T::from_f64c(cam.fx);
    let fy = T::from_f64c(cam.fy);
    let two = T::from_f64c(2.0);
    let nsh = sh::num_coeffs(set.sh_degree);
    for (s, m) in splats.iter().zip(&merged) {
        if !m.touched {
            continue;
        }
        let g3 = &set.gaussians[s.source];
        let d = [
            g3.center[0] - pos[0],
            g3.center[1] - pos[1],
            g3.center[2] - pos[2],
        ];
        let mut t = [T::zero(); 3];
        for i in 0..3 {
            t[i] = rw[i][0] * d[0] + rw[i][1] * d[1] + rw[i][2] * d[2];
        }
        // gV = -A gA A (A = conic, symmetric).
        let a = s.conic;
        let mut aga = [[T::zero(); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    aga[i][j] += a[i][k] * m.conic[k][j];
                }
            }
        }
        let mut gv = [[T::zero(); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    gv[i][j] -= aga[i][k] * a[k][j];
                }
            }
        }
        let j2 = perspective_jacobian(t, fx, fy);
        let sigma = covariance(g3.scale, g3.rotation)
            .expect("validated quaternion");
        let mcov = mat3_mul(&mat3_mul(&rw, &sigma), &mat3_transpose(&rw));
        // gM = J^T gV J
        let mut gm = [[T::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for p in 0..2 {
                    for q in 0..2 {
                        gm[i][j] += j2[p][i] * gv[p][q] * j2[q][j];
                    }
                }
            }
        }
        // gJ = 2 gV J M
        let mut gj = [[T::zero(); 3]; 2];
        for p in 0..2 {
            for i in 0..3 {
                for q in 0..2 {
                    for k in 0..3 {
                        gj[p][i] += two * gv[p][q] * j2[q][k] * mcov[k][i];
                    }
                }
            }
        }
        // Camera-frame center gradient from mean2d and from J's dependence
        // on t.
        let inv_z = T::one() / t[2];
        let inv_z2 = inv_z * inv_z;
        let inv_z3 = inv_z2 * inv_z;
        let mut gt = [T::zero(); 3];
        gt[0] += m.mean2d[0] * fx * inv_z;
        gt[1] += m.mean2d[1] * fy * inv_z;
        gt[2] += -m.mean2d[0] * fx * t[0] * inv_z2 - m.mean2d[1] * fy * t[1] * inv_z2;
        gt[0] += gj[0][2] * (-fx * inv_z2);
        gt[1] += gj[1][2] * (-fy * inv_z2);
        gt[2] += gj[0][0] * (-fx * inv_z2)
            + gj[0][2] * (two * fx * t[0] * inv_z3)
            + gj[1][1] * (-fy * inv_z2)
            + gj[1][2] * (two * fy * t[1] * inv_z3);
        let mut gcenter = [T::zero(); 3];
        for i in 0..3 {
            for k in 0..3 {
                gcenter[i] += rwt[i][k] * gt[k];
            }
        }
        // gSigma = Rw^T gM Rw
        let gsigma = mat3_mul(&mat3_mul(&rwt, &gm), &rw);
        // Sigma = R diag(s^2) R^T.
        let qn = g3
            .rotation
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt();
        let qh = g3.rotation.map(|v| v / qn);
        let rot = rotation_matrix(qh);
        for k in 0..3 {
            let mut rk_g_rk = T::zero();
            for i in 0..3 {
                for j in 0..3 {
                    rk_g_rk += rot[i][k] * gsigma[i][j] * rot[j][k];
                }
            }
            grads.scale[s.source][k] += two * g3.scale[k] * rk_g_rk;
        }
        // gR = 2 gSigma R diag(s^2)
        let mut gr = [[T::zero(); 3]; 3];
        for i in 0..3 {
            for k in 0..3 {
                let mut acc = T::zero();
                for j in 0..3 {
                    acc += gsigma[i][j] * rot[j][k];
                }
                gr[i][k] = two * acc * g3.scale[k] * g3.scale[k];
            }
        }
        // dR/dq for the unit quaternion, then through the normalization.
        let [w, x, y, z] = qh;
        let zero = T::zero();
        let dr = [
            // dR/dw
            [[zero, -z, y], [z, zero, -x], [-y, x, zero]],
            // dR/dx
            [[zero, y, z], [y, -two * x, -w], [z, w, -two * x]],
            // dR/dy
            [[-two * y, x, w], [x, zero, z], [-w, z, -two * y]],
            // dR/dz
            [[-two * z, -w, x], [w, -two * z, y], [x, y, zero]],
        ];
        let mut gqh = [T::zero(); 4];
        for (k, drk) in dr.iter().enumerate() {
            let mut acc = T::zero();
            for i in 0..3 {
                for j in 0..3 {
                    acc += gr[i][j] * two * drk[i][j];
                }
            }
            gqh[k] = acc;
        }
        let dot = (0..4).fold(T::zero(), |acc, i| acc + qh[i] * gqh[i]);
        for i in 0..4 {
            grads.rotation[s.source][i] += (gqh[i] - qh[i] * dot) / qn;
        }
        grads.opacity[s.source] += m.opacity;
        // Color chain: clamp gate per channel, then SH basis and direction.
        let dn = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let dir = [d[0] / dn, d[1] / dn, d[2] / dn];
        let mut basis = vec![T::zero(); nsh];
        sh::basis(set.sh_degree, dir, &mut basis);
        let mut basis_g = vec![[T::zero(); 3]; nsh];
        sh::basis_grad(set.sh_degree, dir, &mut basis_g);
        let half = T::from_f64c(0.5);
        let mut graw = [T::zero(); 3];
        for ch in 0..3 {
            let mut raw = half;
            for (c, &b) in g3.sh.iter().zip(&basis) {
                raw += c[ch] * b;
            }
            if raw > T::zero() && raw < T::one() {
                graw[ch] = m.color[ch];
            }
        }
        let mut gdir = [T::zero(); 3];
        for band in 0..nsh {
            for ch in 0..3 {
                grads.sh[s.source][band][ch] += graw[ch] * basis[band];
                for ax in 0..3 {
                    gdir[ax] += graw[ch] * g3.sh[band][ch] * basis_g[band][ax];
                }
            }
        }
        // dir = d / |d|: J = (I - dir dir^T) / |d|.
        let ddot = (0..3).fold(T::zero(), |acc, i| acc + dir[i] * gdir[i]);
        for i in 0..3 {
            gcenter[i] += (gdir[i] - dir[i] * ddot) / dn;
        }
        for i in 0..3 {
            grads.center[s.source][i] += gcenter[i];
        }
    }
    Ok(grads)
}
