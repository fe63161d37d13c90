//! Scene bundle IO: a minimal JSON schema listing per-view images,
//! intrinsics, poses, depth ranges, and optional monocular prior paths,
//! plus PNG helpers shared by the CLI and the synthetic scene generator.

use crate::error::{Error, Result};
use crate::geometry::CameraView;
use crate::tensor::Tensor;
use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct SceneView {
    /// Image path as written in the scene file (relative to it).
    pub image_path: PathBuf,
    pub image: Tensor<f32>,
    pub camera: CameraView,
    /// Optional monocular prior (PFM), resolved but loaded lazily.
    pub prior_path: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct SceneBundle {
    pub views: Vec<SceneView>,
    pub context: Vec<usize>,
    pub targets: Vec<usize>,
    /// Directory the scene file lives in; relative paths resolve here.
    pub root: PathBuf,
}

impl SceneBundle {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ViewJson {
    image: String,
    intrinsics: [f64; 4],
    world_from_camera: Vec<f64>,
    near: f64,
    far: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    prior: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct SceneJson {
    views: Vec<ViewJson>,
    context: Vec<usize>,
    targets: Vec<usize>,
}

/// Decodes an 8-bit PNG into a [H,W,3] tensor in [0,1].
pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| v as f32 / 255.0)
        .collect();
    Tensor::new(vec![h, w, 3], data)
}

/// Writes a [H,W,3] tensor as an 8-bit PNG, value = round(255 * clamp01).
pub fn write_png(img: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let [h, w, 3] = img.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "write_png expects [H,W,3], got {:?}",
            img.shape()
        )));
    };
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(*w as u32, *h as u32, bytes)
        .expect("sized from shape");
    buf.save(path.as_ref())?;
    Ok(())
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<SceneBundle> {
    let path = path.as_ref();
    let pathstr = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&pathstr, e))?;
    let parsed: SceneJson = serde_json::from_str(&text)?;
    let root = path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    if parsed.views.is_empty() {
        return Err(Error::Scene(format!("{pathstr}: no views")));
    }
    let mut views = Vec::with_capacity(parsed.views.len());
    for (i, v) in parsed.views.iter().enumerate() {
        if v.world_from_camera.len() != 16 {
            return Err(Error::Scene(format!(
                "{pathstr}: view {i} world_from_camera has {} entries, expected 16 row-major",
                v.world_from_camera.len()
            )));
        }
        let image_path = PathBuf::from(&v.image);
        let full = if image_path.is_absolute() {
            image_path.clone()
        } else {
            root.join(&image_path)
        };
        let image = read_png(&full)
            .map_err(|e| Error::Scene(format!("{pathstr}: view {i} image: {e}")))?;
        let (h, w) = (image.shape()[0], image.shape()[1]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Scene(format!(
                "{pathstr}: view {i} is {h}x{w}; dimensions must be divisible by 4"
            )));
        }
        let wfc = Matrix4::from_row_slice(&v.world_from_camera);
        let camera = CameraView {
            fx: v.intrinsics[0],
            fy: v.intrinsics[1],
            cx: v.intrinsics[2],
            cy: v.intrinsics[3],
            world_from_camera: wfc,
            width: w,
            height: h,
            near: v.near,
            far: v.far,
        };
        camera
            .validate()
            .map_err(|e| Error::Scene(format!("{pathstr}: view {i}: {e}")))?;
        let prior_path = v.prior.as_ref().map(PathBuf::from);
        if let Some(p) = &prior_path {
            let full = if p.is_absolute() { p.clone() } else { root.join(p) };
            if !full.exists() {
                return Err(Error::Scene(format!(
                    "{pathstr}: view {i} prior {} does not exist",
                    full.display()
                )));
            }
        }
        views.push(SceneView {
            image_path,
            image,
            camera,
            prior_path,
        });
    }
    for (label, idxs) in [("context", &parsed.context), ("targets", &parsed.targets)] {
        for &i in idxs {
            if i >= views.len() {
                return Err(Error::Scene(format!(
                    "{pathstr}: {label} index {i} out of range ({} views)",
                    views.len()
                )));
            }
        }
    }
    Ok(SceneBundle {
        views,
        context: parsed.context,
        targets: parsed.targets,
        root,
    })
}

/// Writes the scene file (not the referenced images) back to JSON.
pub fn save_scene(scene: &SceneBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let pathstr = path.display().to_string();
    let json = SceneJson {
        views: scene
            .views
            .iter()
            .map(|v| ViewJson {
                image: v.image_path.to_string_lossy().into_owned(),
                intrinsics: [v.camera.fx, v.camera.fy, v.camera.cx, v.camera.cy],
                world_from_camera: v
                    .camera
                    .world_from_camera
                    .row_iter()
                    .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
                    .collect(),
                near: v.camera.near,
                far: v.camera.far,
                prior: v
                    .prior_path
                    .as_ref()
                    .map(|p| p.to_string_lossy().into_owned()),
            })
            .collect(),
        context: scene.context.clone(),
        targets: scene.targets.clone(),
    };
    let text = serde_json::to_string_pretty(&json)?;
    std::fs::write(path, text).map_err(|e| Error::io(&pathstr, e))
}
