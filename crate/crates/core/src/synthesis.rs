//! Real-valued mask samplers with a prescribed coefficient matrix.
//!
//! Given a target `A` at ratio λ with `S = A − (1−λ)²·𝟙𝟙ᵀ ⪰ 0`, the sampler
//! draws `Z ∼ N(0, I)` and emits `M = λ·𝟙 + R·Z` with `R = S^{1/2}`. Then
//! `E[M] = λ𝟙` and `E[(1−M_j)(1−M_k)] = (1−λ)² + S_jk = A_jk`. Mask values
//! are unbounded.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::coefficients::chunked_mc;
use crate::error::{MsdaError, Result};
use crate::masks::{GridShape, Mask, MaskSource, Witness};
use crate::stochastics::{std_normal_vector, RngStream};

/// Largest asymmetry `|A_jk − A_kj|` accepted as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Dense eigendecomposition is capped at this many coordinates.
pub const MAX_DENSE_DIM: usize = 256;

/// A target coefficient matrix (row-major, `dim × dim`) at ratio λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub lambda: f64,
    pub dim: usize,
    pub a: Vec<f64>,
}

fn max_asymmetry(m: &[f64], d: usize) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..d {
        for k in j + 1..d {
            worst = worst.max((m[j * d + k] - m[k * d + j]).abs());
        }
    }
    worst
}

impl TargetSpec {
    pub fn new(lambda: f64, dim: usize, a: Vec<f64>) -> Result<Self> {
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(MsdaError::Parameter(format!("lambda must lie in (0,1), got {lambda}")));
        }
        if dim == 0 {
            return Err(MsdaError::Parameter("target must have at least one coordinate".into()));
        }
        if dim > MAX_DENSE_DIM {
            return Err(MsdaError::Size(format!("target dimension {dim} exceeds {MAX_DENSE_DIM}")));
        }
        crate::error::check_len(dim * dim, a.len())?;
        if a.iter().any(|v| !v.is_finite()) {
            return Err(MsdaError::Parameter("target contains non-finite entries".into()));
        }
        let asym = max_asymmetry(&a, dim);
        if asym > SYMMETRY_TOL {
            return Err(MsdaError::NotSymmetric(asym));
        }
        Ok(Self { lambda, dim, a })
    }

    /// Builds `A_jk = f(j, k)` for `j, k < dim`.
    pub fn from_fn(lambda: f64, dim: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let a = (0..dim * dim).map(|i| f(i / dim, i % dim)).collect();
        Self::new(lambda, dim, a)
    }

    /// `S = A − (1−λ)²·𝟙𝟙ᵀ`.
    pub fn residual(&self) -> Vec<f64> {
        let base = (1.0 - self.lambda).powi(2);
        self.a.iter().map(|v| v - base).collect()
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.a[j * self.dim + k]
    }
}

/// `max(1e-8 · max_j S_jj, 1e-15)`.
pub fn default_psd_tol(s: &[f64], dim: usize) -> f64 {
    let max_diag = (0..dim).map(|i| s[i * dim + i]).fold(0.0f64, f64::max);
    (1e-8 * max_diag).max(1e-15)
}

/// A symmetric square root together with spectrum diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdRoot {
    pub dim: usize,
    /// Row-major `R` with `R·R ≈ S`.
    pub root: Vec<f64>,
    pub min_eigenvalue: f64,
    /// Number of eigenvalues in `[−tol, 0)` that were set to zero.
    pub clamped: usize,
    /// `‖R·R − S‖_max`.
    pub reconstruction_error: f64,
}

/// Symmetric PSD square root via eigendecomposition.
pub fn psd_sqrt(s: &[f64], dim: usize, tol: f64) -> Result<PsdRoot> {
    crate::error::check_len(dim * dim, s.len())?;
    if dim > MAX_DENSE_DIM {
        return Err(MsdaError::Size(format!("dimension {dim} exceeds {MAX_DENSE_DIM}")));
    }
    let asym = max_asymmetry(s, dim);
    if asym > SYMMETRY_TOL {
        return Err(MsdaError::NotSymmetric(asym));
    }
    if !(tol >= 0.0) {
        return Err(MsdaError::Parameter(format!("tolerance must be non-negative, got {tol}")));
    }
    let m = DMatrix::from_row_slice(dim, dim, s);
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m.clone());
    let min_eigenvalue = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min_eigenvalue < -tol {
        return Err(MsdaError::NotPsd { eigenvalue: min_eigenvalue, tol });
    }
    let mut clamped = 0;
    let mut clamp_mass = 0.0f64;
    let roots = eig.eigenvalues.map(|v| {
        if v < 0.0 {
            clamped += 1;
            clamp_mass = clamp_mass.max(-v);
            0.0
        } else {
            v.sqrt()
        }
    });
    let q = &eig.eigenvectors;
    let r = q * DMatrix::from_diagonal(&roots) * q.transpose();
    let r = (&r + r.transpose()) * 0.5;
    let rr = &r * &r;
    let reconstruction_error = (&rr - &m).amax();
    let scale = m.amax();
    if reconstruction_error > 1e-8 * scale + 2.0 * clamp_mass + 1e-300 {
        return Err(MsdaError::Numerical(format!(
            "square root reconstruction error {reconstruction_error:e} exceeds tolerance"
        )));
    }
    let mut root = vec![0.0; dim * dim];
    for j in 0..dim {
        for k in 0..dim {
            root[j * dim + k] = r[(j, k)];
        }
    }
    Ok(PsdRoot { dim, root, min_eigenvalue, clamped, reconstruction_error })
}

/// Draws `M = λ·𝟙 + R·Z`.
#[derive(Debug, Clone)]
pub struct SynthesizedSampler {
    pub target: TargetSpec,
    pub root: PsdRoot,
    pub tol: f64,
}

/// Builds the sampler; `tol = None` uses [`default_psd_tol`].
pub fn synthesize_mask_sampler(target: &TargetSpec, tol: Option<f64>) -> Result<SynthesizedSampler> {
    let s = target.residual();
    let tol = tol.unwrap_or_else(|| default_psd_tol(&s, target.dim));
    let root = psd_sqrt(&s, target.dim, tol)?;
    Ok(SynthesizedSampler { target: target.clone(), root, tol })
}

impl MaskSource for SynthesizedSampler {
    fn dim(&self) -> usize {
        self.target.dim
    }

    fn draw(&self, rng: &mut RngStream) -> Result<Mask> {
        let d = self.target.dim;
        let z = std_normal_vector(rng, d)?;
        let r = &self.root.root;
        let values = (0..d)
            .map(|j| {
                let row = &r[j * d..(j + 1) * d];
                self.target.lambda + row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        Ok(Mask {
            values,
            lambda: self.target.lambda,
            shape: GridShape::flat(d),
            witness: Witness::None,
            box_side: None,
        })
    }
}

/// Monte-Carlo check of a synthesized sampler against its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub lambda: f64,
    pub dim: usize,
    pub samples: u64,
    pub seed: u64,
    pub tol: f64,
    /// Smallest eigenvalue of `A − (1−λ)²𝟙𝟙ᵀ`.
    pub psd_margin: f64,
    pub clamped_eigenvalues: usize,
    pub max_abs_error: f64,
    /// Entry `(j, k)` attaining `max_abs_error`.
    pub worst_entry: (usize, usize),
    /// Largest `|empirical − target| / SE` over coefficient entries.
    pub max_coeff_z: f64,
    pub max_mean_abs_error: f64,
    pub max_mean_z: f64,
    /// Both z-scores at most 4.
    pub within_four_sigma: bool,
}

fn z_score(err: f64, se: f64) -> f64 {
    if se > 0.0 {
        err / se
    } else if err <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Estimates `E[(1−M_j)(1−M_k)]` for every pair and `E[M_j]` for every
/// coordinate from `samples` draws, and compares with the target.
pub fn verify_sampler(rng: &RngStream, sampler: &SynthesizedSampler, samples: usize) -> Result<VerificationReport> {
    let d = sampler.target.dim;
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|j| (j..d).map(move |k| (j, k))).collect();
    let slots = pairs.len() + d;
    let acc = chunked_mc(rng, sampler, samples, slots, |u, acc| {
        let (pair_acc, mean_acc) = acc.split_at_mut(pairs.len());
        for (a, &(j, k)) in pair_acc.iter_mut().zip(&pairs) {
            a.push(u[j] * u[k]);
        }
        for (a, &uj) in mean_acc.iter_mut().zip(u) {
            a.push(1.0 - uj);
        }
    })?;
    let mut max_abs_error = 0.0f64;
    let mut worst_entry = (0, 0);
    let mut max_coeff_z = 0.0f64;
    for (a, &(j, k)) in acc.iter().zip(&pairs) {
        let err = (a.mean() - sampler.target.get(j, k)).abs();
        if err > max_abs_error {
            max_abs_error = err;
            worst_entry = (j, k);
        }
        max_coeff_z = max_coeff_z.max(z_score(err, a.std_error()));
    }
    let mut max_mean_abs_error = 0.0f64;
    let mut max_mean_z = 0.0f64;
    for a in &acc[pairs.len()..] {
        let err = (a.mean() - sampler.target.lambda).abs();
        max_mean_abs_error = max_mean_abs_error.max(err);
        max_mean_z = max_mean_z.max(z_score(err, a.std_error()));
    }
    Ok(VerificationReport {
        lambda: sampler.target.lambda,
        dim: d,
        samples: samples as u64,
        seed: rng.seed(),
        tol: sampler.tol,
        psd_margin: sampler.root.min_eigenvalue,
        clamped_eigenvalues: sampler.root.clamped,
        max_abs_error,
        worst_entry,
        max_coeff_z,
        max_mean_abs_error,
        max_mean_z,
        within_four_sigma: max_coeff_z <= 4.0 && max_mean_z <= 4.0,
    })
}
