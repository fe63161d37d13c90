//! End-to-end inference: per-view features, cross-view matching over depth
//! candidates, deformable refinement, full-resolution depth, per-pixel
//! Gaussian prediction, and target-view rendering.

use crate::encoder::{
    cross_view_attention, derive_prior_feature, extract_features, load_prior, FeatureMap,
    PriorDepth,
};
use crate::error::{Error, Result};
use crate::gaussians::{predict_gaussians, register_head_weights, GaussianSet};
use crate::geometry::depth_candidates;
use crate::matching::{
    coarse_match, ddmt_block, expected_depth, register_matching_weights, DepthDistribution,
};
use crate::rasterizer::{rasterize, RenderOutput};
use crate::refine::{refine_depth, register_refine_weights, RefinedDepth};
use crate::scene::SceneBundle;
use crate::tensor::Tensor;
use crate::weights::WeightStore;
use serde::{Deserialize, Serialize};

fn default_d() -> usize {
    32
}
fn default_c() -> usize {
    32
}
fn default_p() -> usize {
    4
}
fn default_window() -> usize {
    4
}
fn default_sh_degree() -> usize {
    1
}
fn default_repeats() -> usize {
    1
}
fn default_residual_scale() -> f32 {
    0.1
}
fn default_refine_channels() -> usize {
    8
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitConfig {
    #[serde(default = "FitConfig::default_iterations")]
    pub iterations: usize,
    #[serde(default = "FitConfig::default_learning_rate")]
    pub learning_rate: f32,
    #[serde(default = "FitConfig::default_beta1")]
    pub beta1: f32,
    #[serde(default = "FitConfig::default_beta2")]
    pub beta2: f32,
    #[serde(default = "FitConfig::default_init_gaussians")]
    pub init_gaussians: usize,
}

impl FitConfig {
    fn default_iterations() -> usize {
        2000
    }
    fn default_learning_rate() -> f32 {
        0.03
    }
    fn default_beta1() -> f32 {
        0.9
    }
    fn default_beta2() -> f32 {
        0.999
    }
    fn default_init_gaussians() -> usize {
        500
    }
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: Self::default_iterations(),
            learning_rate: Self::default_learning_rate(),
            beta1: Self::default_beta1(),
            beta2: Self::default_beta2(),
            init_gaussians: Self::default_init_gaussians(),
        }
    }
}

/// Desk-scale defaults: 64x64 inputs, 32 depth candidates, 32 feature
/// channels, 4 deformable points, degree-1 spherical harmonics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    /// Depth candidates per pixel.
    #[serde(default = "default_d")]
    pub d: usize,
    /// Feature channels.
    #[serde(default = "default_c")]
    pub c: usize,
    /// Deformable sampling points per candidate.
    #[serde(default = "default_p")]
    pub p: usize,
    /// Matching-block repeats.
    #[serde(default = "default_repeats")]
    pub ddmt_repeats: usize,
    /// Attention window (quarter-resolution cells).
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_sh_degree")]
    pub sh_degree: usize,
    #[serde(default)]
    pub seed: u64,
    /// Residual scale for depth refinement.
    #[serde(default = "default_residual_scale")]
    pub residual_scale: f32,
    /// Base channel count of the refinement encoder-decoder.
    #[serde(default = "default_refine_channels")]
    pub refine_channels: usize,
    #[serde(default)]
    pub fit: FitConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d: default_d(),
            c: default_c(),
            p: default_p(),
            ddmt_repeats: default_repeats(),
            window: default_window(),
            sh_degree: default_sh_degree(),
            seed: 0,
            residual_scale: default_residual_scale(),
            refine_channels: default_refine_channels(),
            fit: FitConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 || self.p < 1 || self.c < 1 {
            return Err(Error::InvalidArgument(
                "config requires D >= 1, P >= 1, C >= 1".into(),
            ));
        }
        if self.window == 0 {
            return Err(Error::InvalidArgument("window must be >= 1".into()));
        }
        if self.sh_degree > 3 {
            return Err(Error::InvalidArgument("sh_degree must be <= 3".into()));
        }
        Ok(())
    }
}

/// Registers every layer the pipeline needs, seeding any missing entries
/// deterministically from the store's seed.
pub fn register_pipeline_weights(ws: &mut WeightStore, config: &RunConfig) {
    crate::encoder::register_encoder_weights(ws, config.c);
    register_matching_weights(ws, config.c, config.d, config.p);
    register_refine_weights(ws, config.refine_channels);
    register_head_weights(ws, config.c, config.sh_degree);
}

/// Seed-initialized weight store covering the whole pipeline.
pub fn init_weights(config: &RunConfig) -> WeightStore {
    let mut ws = WeightStore::new(config.seed);
    register_pipeline_weights(&mut ws, config);
    ws
}

#[derive(Clone, Debug)]
pub struct InferOutput {
    /// One render per target view, in target-list order.
    pub renders: Vec<RenderOutput<f32>>,
    /// Refined full-resolution depth per context view.
    pub depths: Vec<RefinedDepth>,
    /// Per-context-view depth distributions (diagnostics).
    pub distributions: Vec<DepthDistribution>,
    pub gaussians: GaussianSet<f32>,
}

/// Loads a view's monocular prior, or substitutes a flat zero prior when
/// the scene does not provide one.
fn view_prior(scene: &SceneBundle, view: usize) -> Result<PriorDepth> {
    let v = &scene.views[view];
    let (h, w) = (v.camera.height, v.camera.width);
    match &v.prior_path {
        Some(p) => {
            let full = scene.resolve(p);
            let feature_path = full.with_extension("feat.tswt");
            load_prior(&full, h, w, Some(feature_path.as_path()))
        }
        None => Ok(PriorDepth {
            relative: Tensor::zeros(vec![h, w]),
            feature: None,
        }),
    }
}

/// Runs the full pipeline on the scene's context views and renders every
/// target view. Deterministic for fixed (scene, config, weights).
pub fn run_infer(
    scene: &SceneBundle,
    config: &RunConfig,
    ws: &WeightStore,
) -> Result<InferOutput> {
    config.validate()?;
    if scene.context.len() < 2 {
        return Err(Error::Scene(format!(
            "infer needs at least 2 context views, got {}",
            scene.context.len()
        )));
    }
    let k = scene.context.len();
    let ctx_cams: Vec<_> = scene
        .context
        .iter()
        .map(|&i| scene.views[i].camera.clone())
        .collect();
    let ctx_images: Vec<_> = scene
        .context
        .iter()
        .map(|&i| scene.views[i].image.clone())
        .collect();

    // Per-view features, then one cross-view exchange.
    let mut raw_features = Vec::with_capacity(k);
    for i in 0..k {
        raw_features.push(extract_features(&ctx_images[i], &ctx_cams[i], ws)?);
    }
    let exchanged = cross_view_attention(&raw_features, config.window, ws)?;
    let features: Vec<FeatureMap> = exchanged
        .into_iter()
        .enumerate()
        .map(|(i, grid)| FeatureMap {
            grid,
            view_index: scene.context[i],
        })
        .collect();

    // Priors and their quarter-resolution depth features.
    let mut priors = Vec::with_capacity(k);
    let mut prior_features = Vec::with_capacity(k);
    for i in 0..k {
        let prior = view_prior(scene, scene.context[i])?;
        prior_features.push(derive_prior_feature(&prior, &ctx_cams[i], ws)?);
        priors.push(prior);
    }

    // Matching: each context view against all the others.
    let mut dists = Vec::with_capacity(k);
    for i in 0..k {
        let cand = depth_candidates(ctx_cams[i].near, ctx_cams[i].far, config.d)?;
        let others: Vec<(&Tensor<f32>, &crate::geometry::CameraView)> = (0..k)
            .filter(|&j| j != i)
            .map(|j| (&features[j].grid, &ctx_cams[j]))
            .collect();
        let mut dist = coarse_match(&features[i].grid, &others, &ctx_cams[i], &cand)?;
        for _ in 0..config.ddmt_repeats {
            dist = ddmt_block(
                &dist,
                &features[i].grid,
                &others,
                &prior_features[i],
                &ctx_cams[i],
                ws,
                config.window,
                config.p,
            )?;
        }
        dists.push(dist);
    }

    // Full-resolution refinement and per-pixel Gaussian prediction.
    let mut depths = Vec::with_capacity(k);
    for i in 0..k {
        let d_quarter = expected_depth(&dists[i])?;
        depths.push(refine_depth(
            &d_quarter,
            &ctx_images[i],
            &priors[i],
            &ctx_cams[i],
            ws,
            config.residual_scale,
            scene.context[i],
        )?);
    }
    let gaussians = predict_gaussians(
        &depths,
        &features,
        &ctx_images,
        &ctx_cams,
        &dists,
        ws,
        config.sh_degree,
    )?;

    let mut renders = Vec::with_capacity(scene.targets.len());
    for &t in &scene.targets {
        let cam = &scene.views[t].camera;
        renders.push(rasterize(
            &gaussians,
            cam,
            cam.width,
            cam.height,
            [0.0, 0.0, 0.0],
        )?);
    }
    Ok(InferOutput {
        renders,
        depths,
        distributions: dists,
        gaussians,
    })
}
