//! Real spherical harmonics basis up to degree 3, with analytic gradients
//! with respect to the direction vector. Constants and band ordering follow
//! the common Gaussian-splatting convention.

use crate::tensor::Scalar;

pub const SH_C0: f64 = 0.28209479177387814;
const SH_C1: f64 = 0.4886025119029199;
const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
const SH_C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

pub fn num_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Evaluates the basis at a unit direction. `out` must hold
/// `num_coeffs(degree)` values.
pub fn basis<T: Scalar>(degree: usize, dir: [T; 3], out: &mut [T]) {
    debug_assert!(degree <= 3);
    debug_assert_eq!(out.len(), num_coeffs(degree));
    let [x, y, z] = dir;
    out[0] = T::from_f64c(SH_C0);
    if degree < 1 {
        return;
    }
    let c1 = T::from_f64c(SH_C1);
    out[1] = -c1 * y;
    out[2] = c1 * z;
    out[3] = -c1 * x;
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = T::from_f64c(SH_C2[0]) * xy;
    out[5] = T::from_f64c(SH_C2[1]) * yz;
    let two = T::from_f64c(2.0);
    out[6] = T::from_f64c(SH_C2[2]) * (two * zz - xx - yy);
    out[7] = T::from_f64c(SH_C2[3]) * xz;
    out[8] = T::from_f64c(SH_C2[4]) * (xx - yy);
    if degree < 3 {
        return;
    }
    let three = T::from_f64c(3.0);
    let four = T::from_f64c(4.0);
    out[9] = T::from_f64c(SH_C3[0]) * y * (three * xx - yy);
    out[10] = T::from_f64c(SH_C3[1]) * xy * z;
    out[11] = T::from_f64c(SH_C3[2]) * y * (four * zz - xx - yy);
    out[12] = T::from_f64c(SH_C3[3]) * z * (two * zz - three * xx - three * yy);
    out[13] = T::from_f64c(SH_C3[4]) * x * (four * zz - xx - yy);
    out[14] = T::from_f64c(SH_C3[5]) * z * (xx - yy);
    out[15] = T::from_f64c(SH_C3[6]) * x * (xx - yy);
}

/// Partial derivatives of each basis function with respect to (x, y, z).
/// `out[i]` is the gradient of basis function i.
pub fn basis_grad<T: Scalar>(degree: usize, dir: [T; 3], out: &mut [[T; 3]]) {
    debug_assert!(degree <= 3);
    debug_assert_eq!(out.len(), num_coeffs(degree));
    let [x, y, z] = dir;
    let zero = T::zero();
    out[0] = [zero, zero, zero];
    if degree < 1 {
        return;
    }
    let c1 = T::from_f64c(SH_C1);
    out[1] = [zero, -c1, zero];
    out[2] = [zero, zero, c1];
    out[3] = [-c1, zero, zero];
    if degree < 2 {
        return;
    }
    let two = T::from_f64c(2.0);
    let a = T::from_f64c(SH_C2[0]);
    out[4] = [a * y, a * x, zero];
    let b = T::from_f64c(SH_C2[1]);
    out[5] = [zero, b * z, b * y];
    let c = T::from_f64c(SH_C2[2]);
    out[6] = [-two * c * x, -two * c * y, T::from_f64c(4.0) * c * z];
    let d = T::from_f64c(SH_C2[3]);
    out[7] = [d * z, zero, d * x];
    let e = T::from_f64c(SH_C2[4]);
    out[8] = [two * e * x, -two * e * y, zero];
    if degree < 3 {
        return;
    }
    let three = T::from_f64c(3.0);
    let four = T::from_f64c(4.0);
    let six = T::from_f64c(6.0);
    let eight = T::from_f64c(8.0);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let k = T::from_f64c(SH_C3[0]);
    out[9] = [k * six * x * y, k * (three * xx - three * yy), zero];
    let k = T::from_f64c(SH_C3[1]);
    out[10] = [k * y * z, k * x * z, k * x * y];
    let k = T::from_f64c(SH_C3[2]);
    out[11] = [
        -k * two * x * y,
        k * (four * zz - xx - three * yy),
        k * eight * y * z,
    ];
    let k = T::from_f64c(SH_C3[3]);
    out[12] = [
        -k * six * x * z,
        -k * six * y * z,
        k * (six * zz - three * xx - three * yy),
    ];
    let k = T::from_f64c(SH_C3[4]);
    out[13] = [
        k * (four * zz - three * xx - yy),
        -k * two * x * y,
        k * eight * x * z,
    ];
    let k = T::from_f64c(SH_C3[5]);
    out[14] = [k * two * x * z, -k * two * y * z, k * (xx - yy)];
    let k = T::from_f64c(SH_C3[6]);
    out[15] = [k * (three * xx - yy), -k * two * x * y, zero];
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degree0_constant() {
        let mut out = [0.0f64; 1];
        basis(0, [0.3, -0.5, 0.81], &mut out);
        assert_relative_eq!(out[0], SH_C0, epsilon = 1e-12);
    }

    #[test]
    fn grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let eps = 1e-6f64;
        for _ in 0..50 {
            let dir = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n = num_coeffs(3);
            let mut grads = vec![[0.0f64; 3]; n];
            basis_grad(3, dir, &mut grads);
            for axis in 0..3 {
                let mut dp = dir;
                dp[axis] += eps;
                let mut dm = dir;
                dm[axis] -= eps;
                let mut bp = vec![0.0f64; n];
                let mut bm = vec![0.0f64; n];
                basis(3, dp, &mut bp);
                basis(3, dm, &mut bm);
                for i in 0..n {
                    let fd = (bp[i] - bm[i]) / (2.0 * eps);
                    assert_relative_eq!(grads[i][axis], fd, epsilon = 1e-5, max_relative = 1e-5);
                }
            }
        }
    }
}
