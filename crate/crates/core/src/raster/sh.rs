//! Real spherical harmonics (Condon-Shortley phase, `m = -l..=l` order) up
//! to degree 3, evaluated as polynomials of the unit view direction.

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Basis values and their gradients with respect to the (unnormalized)
/// direction components, for the first `(degree + 1)^2` functions.
pub fn basis_with_grad(dir: [f64; 3], degree: usize) -> ([f64; 16], [[f64; 3]; 16]) {
    let [x, y, z] = dir;
    let mut val = [0.0; 16];
    let mut grad = [[0.0; 3]; 16];
    val[0] = SH_C0;
    if degree >= 1 {
        val[1] = -SH_C1 * y;
        grad[1] = [0.0, -SH_C1, 0.0];
        val[2] = SH_C1 * z;
        grad[2] = [0.0, 0.0, SH_C1];
        val[3] = -SH_C1 * x;
        grad[3] = [-SH_C1, 0.0, 0.0];
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        val[4] = SH_C2[0] * x * y;
        grad[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
        val[5] = SH_C2[1] * y * z;
        grad[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
        val[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        grad[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
        val[7] = SH_C2[3] * x * z;
        grad[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
        val[8] = SH_C2[4] * (xx - yy);
        grad[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        val[9] = SH_C3[0] * y * (3.0 * xx - yy);
        grad[9] = [SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
        val[10] = SH_C3[1] * x * y * z;
        grad[10] = [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y];
        val[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
        grad[11] = [
            SH_C3[2] * -2.0 * x * y,
            SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
            SH_C3[2] * 8.0 * y * z,
        ];
        val[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        grad[12] = [
            SH_C3[3] * -6.0 * x * z,
            SH_C3[3] * -6.0 * y * z,
            SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ];
        val[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
        grad[13] = [
            SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
            SH_C3[4] * -2.0 * x * y,
            SH_C3[4] * 8.0 * x * z,
        ];
        val[14] = SH_C3[5] * z * (xx - yy);
        grad[14] = [SH_C3[5] * 2.0 * x * z, SH_C3[5] * -2.0 * y * z, SH_C3[5] * (xx - yy)];
        val[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        grad[15] = [SH_C3[6] * (3.0 * xx - 3.0 * yy), SH_C3[6] * -6.0 * x * y, 0.0];
    }
    (val, grad)
}

/// View-dependent RGB: SH expansion plus the 0.5 offset, clamped at zero.
///
/// `coeffs` is laid out basis-major (`coeffs[k * 3 + c]`) and may hold more
/// bands than `degree_active`; the extra ones are ignored.
pub fn eval_sh_color(coeffs: &[f64], view_dir: [f64; 3], degree_active: usize) -> [f64; 3] {
    let (basis, _) = basis_with_grad(view_dir, degree_active);
    let count = ((degree_active + 1) * (degree_active + 1)).min(coeffs.len() / 3);
    let mut rgb = [0.5; 3];
    for k in 0..count {
        for c in 0..3 {
            rgb[c] += coeffs[k * 3 + c] * basis[k];
        }
    }
    rgb.map(|v| v.max(0.0))
}

/// Converts a linear RGB value to the DC coefficient that reproduces it.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / SH_C0
}
