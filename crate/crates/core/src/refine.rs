//! Full-resolution depth refinement: a small encoder-decoder fuses the
//! matched depth with the image and the monocular relative depth and
//! predicts a bounded residual.

use crate::encoder::{normalize01, PriorDepth};
use crate::error::{Error, Result};
use crate::geometry::CameraView;
use crate::nn::{conv2d, Activation};
use crate::tensor::{upsample_bilinear, Tensor};
use crate::weights::{Init, WeightStore};

/// Refined metric depth for one view, clamped to its frustum range.
#[derive(Clone, Debug)]
pub struct RefinedDepth {
    pub depth: Tensor<f32>,
    pub view_index: usize,
}

pub fn register_refine_weights(ws: &mut WeightStore, c: usize) {
    let cin = 5; // normalized depth + rgb + normalized prior
    ws.ensure("refine.enc0.w", vec![3, 3, cin, c], Init::FanInUniform { fan_in: 9 * cin });
    ws.ensure("refine.enc0.b", vec![c], Init::Zero);
    ws.ensure("refine.down1.w", vec![3, 3, c, 2 * c], Init::FanInUniform { fan_in: 9 * c });
    ws.ensure("refine.down1.b", vec![2 * c], Init::Zero);
    ws.ensure("refine.down2.w", vec![3, 3, 2 * c, 4 * c], Init::FanInUniform { fan_in: 18 * c });
    ws.ensure("refine.down2.b", vec![4 * c], Init::Zero);
    ws.ensure("refine.up1.w", vec![3, 3, 6 * c, 2 * c], Init::FanInUniform { fan_in: 54 * c });
    ws.ensure("refine.up1.b", vec![2 * c], Init::Zero);
    ws.ensure("refine.up2.w", vec![3, 3, 3 * c, c], Init::FanInUniform { fan_in: 27 * c });
    ws.ensure("refine.up2.b", vec![c], Init::Zero);
    // Zero-init residual head: refinement starts as the identity.
    ws.ensure("refine.head.w", vec![3, 3, c, 1], Init::Zero);
    ws.ensure("refine.head.b", vec![1], Init::Zero);
}

/// Bilinear x4 upsampling with half-pixel alignment.
pub fn upsample_depth(quarter: &Tensor<f32>) -> Tensor<f32> {
    upsample_bilinear(quarter, 4)
}

fn concat_channels(parts: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let (h, w) = (parts[0].shape()[0], parts[0].shape()[1]);
    let chans: Vec<usize> = parts
        .iter()
        .map(|p| if p.shape().len() == 2 { 1 } else { p.shape()[2] })
        .collect();
    let ctot: usize = chans.iter().sum();
    let mut out = vec![0.0f32; h * w * ctot];
    for pix in 0..h * w {
        let mut off = 0;
        for (p, &c) in parts.iter().zip(&chans) {
            out[pix * ctot + off..pix * ctot + off + c]
                .copy_from_slice(&p.data()[pix * c..(pix + 1) * c]);
            off += c;
        }
    }
    Tensor::new(vec![h, w, ctot], out)
}

/// Refines an upsampled matched depth with image and prior conditioning.
/// The residual is scaled by `residual_scale * (far - near)` and the result
/// is clamped to [near, far].
pub fn refine_depth(
    d_fine_quarter: &Tensor<f32>,
    image: &Tensor<f32>,
    prior: &PriorDepth,
    cam: &CameraView,
    ws: &WeightStore,
    residual_scale: f32,
    view_index: usize,
) -> Result<RefinedDepth> {
    let [h, w, _] = image.shape() else {
        return Err(Error::ShapeMismatch("refine_depth expects image [H,W,3]".into()));
    };
    let (h, w) = (*h, *w);
    if prior.relative.shape() != [h, w] {
        return Err(Error::ShapeMismatch(format!(
            "prior shape {:?} vs image {h}x{w}",
            prior.relative.shape()
        )));
    }
    if d_fine_quarter.shape() != [h / 4, w / 4] {
        return Err(Error::ShapeMismatch(format!(
            "quarter depth shape {:?} vs expected {}x{}",
            d_fine_quarter.shape(),
            h / 4,
            w / 4
        )));
    }
    let upsampled = upsample_depth(d_fine_quarter);
    let (near, far) = (cam.near as f32, cam.far as f32);
    let range = far - near;
    let depth_norm = upsampled.map(|v| ((v - near) / range).clamp(0.0, 1.0));
    let prior_norm = normalize01(&prior.relative);
    let input = concat_channels(&[&depth_norm, image, &prior_norm])?;

    let gelu = |t: Tensor<f32>| t.map(|v| crate::nn::activate(Activation::Gelu, v));
    let e0 = gelu(conv2d(&input, ws.get("refine.enc0.w")?, Some(ws.get("refine.enc0.b")?), 1, 1)?);
    let d1 = gelu(conv2d(&e0, ws.get("refine.down1.w")?, Some(ws.get("refine.down1.b")?), 2, 1)?);
    let d2 = gelu(conv2d(&d1, ws.get("refine.down2.w")?, Some(ws.get("refine.down2.b")?), 2, 1)?);
    let u1_in = concat_channels(&[&upsample_bilinear(&d2, 2), &d1])?;
    let u1 = gelu(conv2d(&u1_in, ws.get("refine.up1.w")?, Some(ws.get("refine.up1.b")?), 1, 1)?);
    let u2_in = concat_channels(&[&upsample_bilinear(&u1, 2), &e0])?;
    let u2 = gelu(conv2d(&u2_in, ws.get("refine.up2.w")?, Some(ws.get("refine.up2.b")?), 1, 1)?);
    let residual = conv2d(&u2, ws.get("refine.head.w")?, Some(ws.get("refine.head.b")?), 1, 1)?;

    let mut depth = vec![0.0f32; h * w];
    for (i, d) in depth.iter_mut().enumerate() {
        *d = (upsampled.data()[i] + residual.data()[i] * range * residual_scale)
            .clamp(near, far);
    }
    let depth = Tensor::new(vec![h, w], depth)?;
    depth.check_finite("refined depth")?;
    Ok(RefinedDepth { depth, view_index })
}
