//! Struct-of-arrays storage for the trainable Gaussian kernels.

use serde::{Deserialize, Serialize};

/// Largest supported spherical-harmonics degree.
pub const MAX_SH_DEGREE: usize = 3;

/// Number of SH basis functions per color channel for `degree`.
pub const fn sh_basis_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Attribute arrays for `N` kernels.
///
/// Opacity is stored as a logit and scale as a log so the optimizer works on
/// unconstrained values. Color coefficients are laid out kernel-major, then
/// basis-function-major, then channel: `coeffs[(i * K + k) * 3 + c]` with
/// `K = (sh_degree + 1)^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    /// Quaternions stored as `(w, x, y, z)`.
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub color_coeffs: Vec<f64>,
    pub sh_degree: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CloudViolation {
    #[error("attribute `{attribute}` has length {actual}, expected {expected}")]
    LengthMismatch {
        attribute: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("attribute `{attribute}` of kernel {index} is not finite")]
    NonFinite { attribute: &'static str, index: usize },
    #[error("rotation of kernel {index} has zero norm")]
    DegenerateRotation { index: usize },
    #[error("SH degree {0} exceeds the supported maximum of {MAX_SH_DEGREE}")]
    ShDegree(usize),
}

impl GaussianCloud {
    pub fn empty(sh_degree: usize) -> Self {
        Self {
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            color_coeffs: Vec::new(),
            sh_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// SH coefficients per kernel across all three channels.
    pub fn coeffs_per_kernel(&self) -> usize {
        3 * sh_basis_count(self.sh_degree)
    }

    pub fn coeffs(&self, index: usize) -> &[f64] {
        let stride = self.coeffs_per_kernel();
        &self.color_coeffs[index * stride..(index + 1) * stride]
    }

    pub fn coeffs_mut(&mut self, index: usize) -> &mut [f64] {
        let stride = self.coeffs_per_kernel();
        &mut self.color_coeffs[index * stride..(index + 1) * stride]
    }

    pub fn opacity(&self, index: usize) -> f64 {
        sigmoid(self.opacity_logits[index])
    }

    pub fn scale(&self, index: usize) -> [f64; 3] {
        self.log_scales[index].map(f64::exp)
    }

    /// Appends a kernel; `coeffs` must hold `coeffs_per_kernel()` values.
    pub fn push(
        &mut self,
        position: [f64; 3],
        rotation: [f64; 4],
        log_scale: [f64; 3],
        opacity_logit: f64,
        coeffs: &[f64],
    ) {
        assert_eq!(coeffs.len(), self.coeffs_per_kernel());
        self.positions.push(position);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
        self.opacity_logits.push(opacity_logit);
        self.color_coeffs.extend_from_slice(coeffs);
    }

    /// Keeps kernels whose `keep` flag is set, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let stride = self.coeffs_per_kernel();
        let mut coeffs = Vec::with_capacity(self.color_coeffs.len());
        for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            coeffs.extend_from_slice(&self.color_coeffs[i * stride..(i + 1) * stride]);
        }
        self.color_coeffs = coeffs;
        retain(&mut self.positions, keep);
        retain(&mut self.rotations, keep);
        retain(&mut self.log_scales, keep);
        retain(&mut self.opacity_logits, keep);
    }

    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                q.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    /// Re-lays the color coefficients for a different SH degree, truncating
    /// or zero-filling the higher bands.
    pub fn with_sh_degree(&self, degree: usize) -> Self {
        let old_k = sh_basis_count(self.sh_degree);
        let new_k = sh_basis_count(degree);
        let mut coeffs = vec![0.0; self.len() * new_k * 3];
        for i in 0..self.len() {
            for k in 0..old_k.min(new_k) {
                for c in 0..3 {
                    coeffs[(i * new_k + k) * 3 + c] = self.color_coeffs[(i * old_k + k) * 3 + c];
                }
            }
        }
        Self {
            color_coeffs: coeffs,
            sh_degree: degree,
            ..self.clone()
        }
    }

    /// Checks the structural invariants, reporting the first violation.
    pub fn validate(&self) -> Result<(), CloudViolation> {
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(CloudViolation::ShDegree(self.sh_degree));
        }
        let n = self.len();
        let lengths = [
            ("rotations", self.rotations.len(), n),
            ("log_scales", self.log_scales.len(), n),
            ("opacity_logits", self.opacity_logits.len(), n),
            ("color_coeffs", self.color_coeffs.len(), n * self.coeffs_per_kernel()),
        ];
        for (attribute, actual, expected) in lengths {
            if actual != expected {
                return Err(CloudViolation::LengthMismatch {
                    attribute,
                    expected,
                    actual,
                });
            }
        }
        for i in 0..n {
            let finite = |attribute: &'static str, values: &[f64]| {
                if values.iter().all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(CloudViolation::NonFinite { attribute, index: i })
                }
            };
            finite("positions", &self.positions[i])?;
            finite("rotations", &self.rotations[i])?;
            finite("log_scales", &self.log_scales[i])?;
            finite("opacity_logits", &[self.opacity_logits[i]])?;
            finite("color_coeffs", self.coeffs(i))?;
            if self.rotations[i].iter().all(|&v| v == 0.0) {
                return Err(CloudViolation::DegenerateRotation { index: i });
            }
        }
        Ok(())
    }
}

fn retain<T: Copy>(values: &mut Vec<T>, keep: &[bool]) {
    let mut flags = keep.iter();
    values.retain(|_| *flags.next().unwrap());
}
