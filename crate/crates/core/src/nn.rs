//! Layer kernels (linear, conv2d, squeeze-excitation gate) with the f64
//! backward rules used by the finite-difference checker.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::weights::WeightStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Gelu,
    Sigmoid,
}

pub fn activate<T: Scalar>(act: Activation, x: T) -> T {
    match act {
        Activation::None => x,
        Activation::Relu => x.max(T::zero()),
        Activation::Gelu => gelu(x),
        Activation::Sigmoid => sigmoid(x),
    }
}

fn activate_grad<T: Scalar>(act: Activation, x: T) -> T {
    match act {
        Activation::None => T::one(),
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Gelu => gelu_grad(x),
        Activation::Sigmoid => {
            let s = sigmoid(x);
            s * (T::one() - s)
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// tanh-approximation GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64c(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64c(0.044715);
    let half = T::from_f64c(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64c(0.7978845608028654);
    let a = T::from_f64c(0.044715);
    let half = T::from_f64c(0.5);
    let three = T::from_f64c(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub fn softplus<T: Scalar>(x: T) -> T {
    // Stable log(1 + exp(x)).
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// y = act(x W + b), x: [..., In], W: [In, Out], b: [Out].
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    act: Activation,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.is_empty() || w.shape().len() != 2 {
        return Err(Error::ShapeMismatch("linear expects x rank >= 1, W rank 2".into()));
    }
    let inn = xs[xs.len() - 1];
    let (win, wout) = (w.shape()[0], w.shape()[1]);
    if inn != win {
        return Err(Error::ShapeMismatch(format!(
            "linear: x inner dim {} vs W rows {}",
            inn, win
        )));
    }
    if let Some(b) = b {
        if b.shape() != [wout] {
            return Err(Error::ShapeMismatch(format!(
                "linear: bias shape {:?} vs out dim {}",
                b.shape(),
                wout
            )));
        }
    }
    let rows = x.numel() / inn;
    let mut out = vec![T::zero(); rows * wout];
    let xd = x.data();
    let wd = w.data();
    for r in 0..rows {
        let xrow = &xd[r * inn..(r + 1) * inn];
        let orow = &mut out[r * wout..(r + 1) * wout];
        if let Some(b) = b {
            orow.copy_from_slice(b.data());
        }
        for (i, &xv) in xrow.iter().enumerate() {
            let wrow = &wd[i * wout..(i + 1) * wout];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
        for o in orow.iter_mut() {
            *o = activate(act, *o);
        }
    }
    let mut shape = xs.to_vec();
    *shape.last_mut().unwrap() = wout;
    Tensor::new(shape, out)
}

/// Gradients of `sum(grad_out * linear(x, w, b, act))` with respect to x, W, b.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    act: Activation,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let pre = linear(x, w, b, Activation::None)?;
    if grad_out.shape() != pre.shape() {
        return Err(Error::ShapeMismatch("linear_backward grad shape".into()));
    }
    let inn = w.shape()[0];
    let wout = w.shape()[1];
    let rows = x.numel() / inn;
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); w.numel()];
    let mut gb = vec![T::zero(); wout];
    let xd = x.data();
    let wd = w.data();
    for r in 0..rows {
        let xrow = &xd[r * inn..(r + 1) * inn];
        for o in 0..wout {
            let g = grad_out.data()[r * wout + o] * activate_grad(act, pre.data()[r * wout + o]);
            gb[o] += g;
            for i in 0..inn {
                gx[r * inn + i] += g * wd[i * wout + o];
                gw[i * wout + o] += g * xrow[i];
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(w.shape().to_vec(), gw)?,
        Tensor::new(vec![wout], gb)?,
    ))
}

/// 2D convolution with zero padding. x: [H, W, Cin], kernel: [k, k, Cin, Cout].
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let [h, w, cin] = x.shape() else {
        return Err(Error::ShapeMismatch("conv2d expects x [H,W,Cin]".into()));
    };
    let [k0, k1, kcin, cout] = kernel.shape() else {
        return Err(Error::ShapeMismatch("conv2d expects kernel [k,k,Cin,Cout]".into()));
    };
    if k0 != k1 || k0 % 2 == 0 {
        return Err(Error::InvalidArgument("conv2d kernel must be square and odd-sized".into()));
    }
    if kcin != cin {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: input channels {cin} vs kernel {kcin}"
        )));
    }
    let (h, w, cin, k, cout) = (*h, *w, *cin, *k0, *cout);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![T::zero(); oh * ow * cout];
    let xd = x.data();
    let kd = kernel.data();
    for oy in 0..oh {
        for ox in 0..ow {
            let orow = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            if let Some(b) = bias {
                orow.copy_from_slice(b.data());
            }
            for ky in 0..k {
                let iy = (oy * stride + ky) as i64 - pad as i64;
                if iy < 0 || iy >= h as i64 {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as i64 - pad as i64;
                    if ix < 0 || ix >= w as i64 {
                        continue;
                    }
                    let xrow = &xd[((iy as usize) * w + ix as usize) * cin..][..cin];
                    let kbase = ((ky * k + kx) * cin) * cout;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        let krow = &kd[kbase + ci * cout..][..cout];
                        for (o, &kv) in orow.iter_mut().zip(krow) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out)
}

/// Gradients of `sum(grad_out * conv2d(x, kernel, bias))` w.r.t. x, kernel, bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, cout) = (kernel.shape()[0], kernel.shape()[3]);
    let (oh, ow) = (grad_out.shape()[0], grad_out.shape()[1]);
    let mut gx = vec![T::zero(); x.numel()];
    let mut gk = vec![T::zero(); kernel.numel()];
    let mut gb = vec![T::zero(); cout];
    let xd = x.data();
    let kd = kernel.data();
    let gd = grad_out.data();
    for oy in 0..oh {
        for ox in 0..ow {
            let grow = &gd[(oy * ow + ox) * cout..][..cout];
            for (co, &g) in grow.iter().enumerate() {
                gb[co] += g;
            }
            for ky in 0..k {
                let iy = (oy * stride + ky) as i64 - pad as i64;
                if iy < 0 || iy >= h as i64 {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as i64 - pad as i64;
                    if ix < 0 || ix >= w as i64 {
                        continue;
                    }
                    let xbase = ((iy as usize) * w + ix as usize) * cin;
                    let kbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        for (co, &g) in grow.iter().enumerate() {
                            gx[xbase + ci] += g * kd[kbase + ci * cout + co];
                            gk[kbase + ci * cout + co] += g * xd[xbase + ci];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![cout], gb)?,
    ))
}

/// Squeeze-excitation gate: out = feature * sigmoid(fc2(gelu(fc1(context))))
/// broadcast over all leading dims of `feature` (last dim = channels).
pub fn se_gate<T: Scalar>(
    feature: &Tensor<T>,
    context: &Tensor<T>,
    fc1_w: &Tensor<T>,
    fc1_b: &Tensor<T>,
    fc2_w: &Tensor<T>,
    fc2_b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let c = *feature.shape().last().ok_or_else(|| {
        Error::ShapeMismatch("se_gate feature needs a channel dim".into())
    })?;
    let hidden = linear(context, fc1_w, Some(fc1_b), Activation::Gelu)?;
    let gate = linear(&hidden, fc2_w, Some(fc2_b), Activation::Sigmoid)?;
    if gate.numel() != c {
        return Err(Error::ShapeMismatch(format!(
            "se_gate: gate length {} vs channels {}",
            gate.numel(),
            c
        )));
    }
    let mut out = feature.clone();
    for row in out.data_mut().chunks_mut(c) {
        for (o, &g) in row.iter_mut().zip(gate.data()) {
            *o *= g;
        }
    }
    Ok(out)
}

/// Gradients of `sum(grad_out * se_gate(...))` w.r.t. feature and context.
pub fn se_gate_backward<T: Scalar>(
    feature: &Tensor<T>,
    context: &Tensor<T>,
    fc1_w: &Tensor<T>,
    fc1_b: &Tensor<T>,
    fc2_w: &Tensor<T>,
    fc2_b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = *feature.shape().last().unwrap();
    let hidden = linear(context, fc1_w, Some(fc1_b), Activation::Gelu)?;
    let gate = linear(&hidden, fc2_w, Some(fc2_b), Activation::Sigmoid)?;
    // d/dfeature
    let mut gfeat = grad_out.clone();
    for row in gfeat.data_mut().chunks_mut(c) {
        for (o, &g) in row.iter_mut().zip(gate.data()) {
            *o *= g;
        }
    }
    // d/dgate[c] = sum over spatial of grad_out * feature
    let mut ggate = vec![T::zero(); c];
    for (grow, frow) in grad_out.data().chunks(c).zip(feature.data().chunks(c)) {
        for ((gg, &g), &f) in ggate.iter_mut().zip(grow).zip(frow) {
            *gg += g * f;
        }
    }
    let ggate = Tensor::new(vec![c], ggate)?;
    let (ghidden, _, _) = linear_backward(&hidden, fc2_w, Some(fc2_b), Activation::Sigmoid, &ggate)?;
    let (gctx, _, _) = linear_backward(context, fc1_w, Some(fc1_b), Activation::Gelu, &ghidden)?;
    Ok((gfeat, gctx))
}

/// Two-layer MLP resolved from the weight store:
/// `{name}.fc1.{w,b}` (GELU) then `{name}.fc2.{w,b}` with `out_act`.
pub fn mlp2(
    x: &Tensor<f32>,
    ws: &WeightStore,
    name: &str,
    out_act: Activation,
) -> Result<Tensor<f32>> {
    let h = linear(
        x,
        ws.get(&format!("{name}.fc1.w"))?,
        Some(ws.get(&format!("{name}.fc1.b"))?),
        Activation::Gelu,
    )?;
    linear(
        &h,
        ws.get(&format!("{name}.fc2.w"))?,
        Some(ws.get(&format!("{name}.fc2.b"))?),
        out_act,
    )
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub pass: bool,
}

/// Central finite differences of a scalar function against an analytic
/// gradient. `f` must be finite at every probe point.
pub fn grad_check<F>(f: F, x: &[f64], analytic: &[f64], eps: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if x.len() != analytic.len() {
        return Err(Error::ShapeMismatch("grad_check: x vs analytic length".into()));
    }
    let mut probe = x.to_vec();
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut worst = 0;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let fp = f(&probe)?;
        probe[i] = x[i] - eps;
        let fm = f(&probe)?;
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("grad_check probe at coordinate {i}")));
        }
        let fd = (fp - fm) / (2.0 * eps);
        let abs = (fd - analytic[i]).abs();
        let rel = abs / fd.abs().max(analytic[i].abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
        max_abs = max_abs.max(abs);
    }
    Ok(GradReport {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        worst_index: worst,
        pass: max_rel <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_identity() {
        let x = Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut w = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let y = linear(&x, &w, None, Activation::None).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn linear_hand_case() {
        let x = Tensor::new(vec![2], vec![2.0f32, 3.0]).unwrap();
        let w = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![1], vec![1.0]).unwrap();
        let y = linear(&x, &w, Some(&b), Activation::None).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn relu_at_zero() {
        assert_eq!(activate(Activation::Relu, 0.0f32), 0.0);
    }

    #[test]
    fn linear_shape_mismatch() {
        let x = Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap();
        let w = Tensor::zeros(vec![3, 1]);
        assert!(linear(&x, &w, None, Activation::None).is_err());
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(vec![3, 4, 2], (0..24).map(|i| i as f32).collect()).unwrap();
        let mut k = Tensor::zeros(vec![1, 1, 2, 2]);
        k.data_mut()[0] = 1.0; // cin0 -> cout0
        k.data_mut()[3] = 1.0; // cin1 -> cout1
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_box_filter_on_constant() {
        let x = Tensor::full(vec![5, 5, 1], 5.0f32);
        let k = Tensor::full(vec![3, 3, 1, 1], 1.0 / 9.0);
        let y = conv2d(&x, &k, None, 1, 1).unwrap();
        // Interior pixels keep the constant.
        for iy in 1..4 {
            for ix in 1..4 {
                assert_relative_eq!(y.at3(iy, ix, 0), 5.0, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn conv_stride2_shape() {
        let x = Tensor::<f32>::zeros(vec![8, 8, 1]);
        let k = Tensor::zeros(vec![3, 3, 1, 4]);
        let y = conv2d(&x, &k, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[4, 4, 4]);
    }

    #[test]
    fn se_gate_zero_mlp_halves() {
        let feat = Tensor::new(vec![2, 2, 3], (0..12).map(|i| i as f32).collect()).unwrap();
        let ctx = Tensor::new(vec![4], vec![0.3, -0.2, 1.0, 0.0]).unwrap();
        let z1w = Tensor::zeros(vec![4, 3]);
        let z1b = Tensor::zeros(vec![3]);
        let z2w = Tensor::zeros(vec![3, 3]);
        let z2b = Tensor::zeros(vec![3]);
        let y = se_gate(&feat, &ctx, &z1w, &z1b, &z2w, &z2b).unwrap();
        for (o, x) in y.data().iter().zip(feat.data()) {
            assert_relative_eq!(*o, 0.5 * x, epsilon = 1e-6);
        }
    }

    #[test]
    fn se_gate_saturates_to_identity() {
        let feat = Tensor::new(vec![1, 1, 2], vec![3.0f32, -4.0]).unwrap();
        let ctx = Tensor::new(vec![1], vec![0.0]).unwrap();
        let w1 = Tensor::zeros(vec![1, 2]);
        let b1 = Tensor::zeros(vec![2]);
        let w2 = Tensor::zeros(vec![2, 2]);
        let b2 = Tensor::full(vec![2], 40.0); // sigmoid(40) == 1 in f32
        let y = se_gate(&feat, &ctx, &w1, &b1, &w2, &b2).unwrap();
        assert_eq!(y.data(), feat.data());
    }

    #[test]
    fn grad_check_quadratic() {
        let r = grad_check(|x| Ok(x[0] * x[0]), &[3.0], &[6.0], 1e-5, 1e-6).unwrap();
        assert!(r.pass, "rel err {}", r.max_rel_err);
    }

    #[test]
    fn grad_check_constant() {
        let r = grad_check(|_| Ok(2.0), &[1.0, -1.0], &[0.0, 0.0], 1e-5, 1e-6).unwrap();
        assert!(r.pass);
    }

    #[test]
    fn grad_check_detects_wrong_gradient() {
        // f(x) = 2x^2 at x=1 has gradient 4; claim 6.
        let r = grad_check(|x| Ok(2.0 * x[0] * x[0]), &[1.0], &[6.0], 1e-5, 1e-6).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn linear_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rng_tensor(&mut rng, vec![3, 4]);
        let w = rng_tensor(&mut rng, vec![4, 5]);
        let b = rng_tensor(&mut rng, vec![5]);
        let gout = rng_tensor(&mut rng, vec![3, 5]);
        for act in [Activation::None, Activation::Gelu, Activation::Sigmoid] {
            let (gx, gw, gb) = linear_backward(&x, &w, Some(&b), act, &gout).unwrap();
            let loss = |xd: &[f64]| {
                let xt = Tensor::new(vec![3, 4], xd.to_vec()).unwrap();
                let y = linear(&xt, &w, Some(&b), act)?;
                Ok(y.data().iter().zip(gout.data()).map(|(a, b)| a * b).sum())
            };
            let r = grad_check(loss, x.data(), gx.data(), 1e-6, 1e-5).unwrap();
            assert!(r.pass, "x grad, act {act:?}: rel {}", r.max_rel_err);
            let lossw = |wd: &[f64]| {
                let wt = Tensor::new(vec![4, 5], wd.to_vec()).unwrap();
                let y = linear(&x, &wt, Some(&b), act)?;
                Ok(y.data().iter().zip(gout.data()).map(|(a, b)| a * b).sum())
            };
            let r = grad_check(lossw, w.data(), gw.data(), 1e-6, 1e-5).unwrap();
            assert!(r.pass, "w grad, act {act:?}: rel {}", r.max_rel_err);
            let lossb = |bd: &[f64]| {
                let bt = Tensor::new(vec![5], bd.to_vec()).unwrap();
                let y = linear(&x, &w, Some(&bt), act)?;
                Ok(y.data().iter().zip(gout.data()).map(|(a, b)| a * b).sum())
            };
            let r = grad_check(lossb, b.data(), gb.data(), 1e-6, 1e-5).unwrap();
            assert!(r.pass, "b grad, act {act:?}: rel {}", r.max_rel_err);
        }
    }

    #[test]
    fn conv2d_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rng_tensor(&mut rng, vec![5, 6, 2]);
        let k = rng_tensor(&mut rng, vec![3, 3, 2, 3]);
        let gout = rng_tensor(&mut rng, vec![3, 3, 3]); // stride 2, pad 1 on 5x6
        let (gx, gk, gb) = conv2d_backward(&x, &k, 2, 1, &gout).unwrap();
        let loss_x = |xd: &[f64]| {
            let xt = Tensor::new(vec![5, 6, 2], xd.to_vec()).unwrap();
            let y = conv2d(&xt, &k, None, 2, 1)?;
            Ok(y.data().iter().zip(gout.data()).map(|(a, b)| a * b).sum())
        };
        let r = grad_check(loss_x, x.data(), gx.data(), 1e-6, 1e-5).unwrap();
        assert!(r.pass, "conv x grad rel {}", r.max_rel_err);
        let loss_k = |kd: &[f64]| {
            let kt = Tensor::new(vec![3, 3, 2, 3], kd.to_vec()).unwrap();
            let y = conv2d(&x, &kt, None, 2, 1)?;
            Ok(y.data().iter().zip(gout.data()).map(|(a, b)| a * b).sum())
        };
        let r = grad_check(loss_k, k.data(), gk.data(), 1e-6, 1e-5).unwrap();
        assert!(r.pass, "conv k grad rel {}", r.max_rel_err);
        // Bias gradient: loss is linear in bias, FD trivially matches.
        let b0 = Tensor::zeros(vec![3]);
        let loss_b = |bd: &[f64]| {
            let bt = Tensor::new(vec![3], bd.to_vec()).unwrap();
            let y = conv2d(&x, &k, Some(&bt), 2, 1)?;
            Ok(y.data().iter().zip(gout.data()).map(|(a, b)| a * b).sum())
        };
        let r = grad_check(loss_b, b0.data(), gb.data(), 1e-6, 1e-5).unwrap();
        assert!(r.pass, "conv b grad rel {}", r.max_rel_err);
    }

    #[test]
    fn se_gate_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feat = rng_tensor(&mut rng, vec![2, 3, 4]);
        let ctx = rng_tensor(&mut rng, vec![5]);
        let w1 = rng_tensor(&mut rng, vec![5, 4]);
        let b1 = rng_tensor(&mut rng, vec![4]);
        let w2 = rng_tensor(&mut rng, vec![4, 4]);
        let b2 = rng_tensor(&mut rng, vec![4]);
        let gout = rng_tensor(&mut rng, vec![2, 3, 4]);
        let (gf, gc) = se_gate_backward(&feat, &ctx, &w1, &b1, &w2, &b2, &gout).unwrap();
        let loss_f = |fd: &[f64]| {
            let ft = Tensor::new(vec![2, 3, 4], fd.to_vec()).unwrap();
            let y = se_gate(&ft, &ctx, &w1, &b1, &w2, &b2)?;
            Ok(y.data().iter().zip(gout.data()).map(|(a, b)| a * b).sum())
        };
        let r = grad_check(loss_f, feat.data(), gf.data(), 1e-6, 1e-5).unwrap();
        assert!(r.pass, "se feature grad rel {}", r.max_rel_err);
        let loss_c = |cd: &[f64]| {
            let ct = Tensor::new(vec![5], cd.to_vec()).unwrap();
            let y = se_gate(&feat, &ct, &w1, &b1, &w2, &b2)?;
            Ok(y.data().iter().zip(gout.data()).map(|(a, b)| a * b).sum())
        };
        let r = grad_check(loss_c, ctx.data(), gc.data(), 1e-6, 1e-5).unwrap();
        assert!(r.pass, "se context grad rel {}", r.max_rel_err);
    }
}
