//! The exact mixed-sample loss and its quadratic approximation
//! `L_m + R1 + R2 + R3` for binary targets.

use serde::{Deserialize, Serialize};

use crate::coefficients::ExpectedCoeffs;
use crate::error::{check_len, MsdaError, Result};
use crate::masks::MaskSource;
use crate::mixer::{mix_pair, Sample};
use crate::models::{GlmModel, LossFamily, Predictor};
use crate::numeric::{chunked_accumulate, pairwise_mean, pairwise_sum, McEstimate, MomentAccumulator};
use crate::stochastics::RngStream;

/// Per-coordinate tolerance on the mean for a dataset to count as centered.
pub const CENTERED_TOL: f64 = 1e-9;

/// Inputs with scalar targets in `[0, 1]` (stored as one-element labels),
/// plus cached first and second moments of the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub mean: Vec<f64>,
    /// Row-major `d×d` matrix `(1/m) Σ x xᵀ`.
    pub second_moment: Vec<f64>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| MsdaError::Parameter("dataset is empty".into()))?;
        let d = first.x.len();
        for s in &samples {
            check_len(d, s.x.len())?;
            check_len(1, s.y.len())?;
        }
        let (mean, second_moment) = moments(&samples, d);
        Ok(Self { samples, mean, second_moment })
    }

    pub fn binary(xs: Vec<Vec<f64>>, ys: Vec<f64>) -> Result<Self> {
        check_len(xs.len(), ys.len())?;
        if ys.iter().any(|y| !(0.0..=1.0).contains(y)) {
            return Err(MsdaError::Parameter("targets must lie in [0,1]".into()));
        }
        Self::new(xs.into_iter().zip(ys).map(|(x, y)| Sample::new(x, vec![y])).collect())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.samples[i].x
    }

    pub fn y(&self, i: usize) -> f64 {
        self.samples[i].y[0]
    }

    pub fn is_centered(&self) -> bool {
        self.mean.iter().all(|m| m.abs() <= CENTERED_TOL)
    }

    pub fn moment(&self, j: usize, k: usize) -> f64 {
        self.second_moment[j * self.dim() + k]
    }

    /// The subset at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.samples[i].clone()).collect())
    }

    /// The samples at `indices` with this dataset's moments kept, for
    /// mini-batch estimates of full-data objectives.
    pub fn batch_view(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            mean: self.mean.clone(),
            second_moment: self.second_moment.clone(),
        }
    }

    /// Shifts every input by `shift` (e.g. a training-set mean).
    pub fn shifted(&self, shift: &[f64]) -> Result<Self> {
        check_len(self.dim(), shift.len())?;
        Self::new(
            self.samples
                .iter()
                .map(|s| Sample::new(s.x.iter().zip(shift).map(|(a, b)| a - b).collect(), s.y.clone()))
                .collect(),
        )
    }
}

fn moments(samples: &[Sample], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    let mut col = vec![0.0; samples.len()];
    for (j, mj) in mean.iter_mut().enumerate() {
        for (c, s) in col.iter_mut().zip(samples) {
            *c = s.x[j];
        }
        *mj = pairwise_mean(&col);
    }
    let mut second = vec![0.0; d * d];
    for j in 0..d {
        for k in j..d {
            for (c, s) in col.iter_mut().zip(samples) {
                *c = s.x[j] * s.x[k];
            }
            let v = pairwise_mean(&col);
            second[j * d + k] = v;
            second[k * d + j] = v;
        }
    }
    (mean, second)
}

/// Subtracts the empirical mean from every input.
pub fn center_dataset(d: &Dataset) -> Result<Dataset> {
    if d.is_empty() {
        return Err(MsdaError::Parameter("cannot center an empty dataset".into()));
    }
    d.shifted(&d.mean.clone())
}

/// `L_m`, the three regularizers and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_m")]
    pub l_m: f64,
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R2")]
    pub r2: f64,
    #[serde(rename = "R3")]
    pub r3: f64,
    pub total: f64,
}

/// `(1/m) Σ_i l(f(x_i), y_i)`.
pub fn empirical_risk(model: &dyn Predictor, family: &dyn LossFamily, d: &Dataset) -> Result<f64> {
    let terms = (0..d.len())
        .map(|i| Ok(family.point_loss(model.predict(d.x(i))?, d.y(i))))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_mean(&terms))
}

fn mixed_loss(
    model: &dyn Predictor,
    family: &dyn LossFamily,
    d: &Dataset,
    i: usize,
    j: usize,
    source: &dyn MaskSource,
    rng: &mut RngStream,
) -> Result<f64> {
    let mask = source.draw(rng)?;
    let mixed = mix_pair(&d.samples[i], &d.samples[j], &mask)?;
    Ok(family.point_loss(model.predict(&mixed.x)?, mixed.y[0]))
}

/// Monte-Carlo estimate of `E_{i,j∼Unif[m]} E_{λ,M} l(θ, z̃)` from `draws`
/// independent `(i, j, λ, M)` tuples; `i = j` is allowed.
pub fn msda_empirical_loss(
    rng: &RngStream,
    model: &dyn Predictor,
    family: &dyn LossFamily,
    d: &Dataset,
    source: &dyn MaskSource,
    draws: usize,
) -> Result<McEstimate> {
    check_len(d.dim(), source.dim())?;
    check_len(d.dim(), model.input_dim())?;
    let m = d.len();
    let acc = chunked_accumulate(rng, draws, 1, |sub, count, acc| {
        for _ in 0..count {
            let i = sub.uniform_index(m);
            let j = sub.uniform_index(m);
            acc[0].push(mixed_loss(model, family, d, i, j, source, sub)?);
        }
        Ok(())
    })?;
    Ok(acc[0].estimate())
}

/// The literal double sum over all `m²` ordered pairs with `masks_per_pair`
/// mask draws each. Exact when the mask source is deterministic.
pub fn msda_all_pairs_loss(
    rng: &RngStream,
    model: &dyn Predictor,
    family: &dyn LossFamily,
    d: &Dataset,
    source: &dyn MaskSource,
    masks_per_pair: usize,
) -> Result<McEstimate> {
    check_len(d.dim(), source.dim())?;
    if masks_per_pair == 0 {
        return Err(MsdaError::Parameter("masks_per_pair must be at least 1".into()));
    }
    let m = d.len();
    let mut sub = rng.substream(0);
    let mut terms = Vec::with_capacity(m * m * masks_per_pair);
    for i in 0..m {
        for j in 0..m {
            for _ in 0..masks_per_pair {
                terms.push(mixed_loss(model, family, d, i, j, source, &mut sub)?);
            }
        }
    }
    let mut acc = MomentAccumulator::new();
    terms.iter().for_each(|&t| acc.push(t));
    Ok(McEstimate { mean: pairwise_mean(&terms), ..acc.estimate() })
}

fn check_approx_preconditions(d: &Dataset, coeffs: &ExpectedCoeffs) -> Result<()> {
    if !d.is_centered() {
        let worst = d.mean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        return Err(MsdaError::Precondition(format!(
            "dataset must be centered (max |mean| = {worst:e})"
        )));
    }
    check_len(d.dim(), coeffs.dim)
}

/// `Σ_jk ā_jk u_j v_k (S_jk + x_j x_k)`.
fn weighted_form(coeffs: &ExpectedCoeffs, d: &Dataset, x: &[f64], u: &[f64], v: &[f64]) -> f64 {
    let n = d.dim();
    let mut terms = Vec::with_capacity(n * n);
    for j in 0..n {
        for k in 0..n {
            terms.push(coeffs.get(j, k) * u[j] * v[k] * (d.moment(j, k) + x[j] * x[k]));
        }
    }
    pairwise_sum(&terms)
}

/// Quadratic approximation of the mixed-sample loss.
///
/// * `R1 = (1/m) Σ (y_i − h'(f_i)) ∇f(x_i)ᵀx_i · E(1−λ)`
/// * `R2 = (1/2m) Σ h''(f_i) Σ_jk ā_jk ∂_jf ∂_kf (S_jk + x_ij x_ik)`
/// * `R3 = (1/2m) Σ (h'(f_i) − y_i) Σ_jk ā_jk ∂²_jkf (S_jk + x_ij x_ik)`
pub fn approx_loss(
    model: &dyn Predictor,
    family: &dyn LossFamily,
    d: &Dataset,
    coeffs: &ExpectedCoeffs,
) -> Result<LossBreakdown> {
    check_approx_preconditions(d, coeffs)?;
    check_len(d.dim(), model.input_dim())?;
    let m = d.len();
    let n = d.dim();
    let (mut lm, mut r1, mut r2, mut r3) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let mut any_hessian = false;
    for i in 0..m {
        let x = d.x(i);
        let y = d.y(i);
        let f = model.predict(x)?;
        let g = model.input_grad(x)?;
        let h1 = family.h1(f);
        lm[i] = family.point_loss(f, y);
        let gx: f64 = g.iter().zip(x).map(|(a, b)| a * b).sum();
        r1[i] = (y - h1) * gx;
        r2[i] = family.h2(f) * weighted_form(coeffs, d, x, &g, &g);
        if let Some(hess) = model.input_hessian(x)? {
            any_hessian = true;
            let mut terms = Vec::with_capacity(n * n);
            for j in 0..n {
                for k in 0..n {
                    terms.push(coeffs.get(j, k) * hess[j * n + k] * (d.moment(j, k) + x[j] * x[k]));
                }
            }
            r3[i] = (h1 - y) * pairwise_sum(&terms);
        }
    }
    let l_m = pairwise_mean(&lm);
    let r1 = coeffs.one_minus_lambda * pairwise_mean(&r1);
    let r2 = 0.5 * pairwise_mean(&r2);
    let r3 = if any_hessian { 0.5 * pairwise_mean(&r3) } else { 0.0 };
    Ok(LossBreakdown { l_m, r1, r2, r3, total: l_m + r1 + r2 + r3 })
}

/// Gradients of each part of the GLM approximate loss with respect to
/// `(θ, bias)`; the last entry of every vector is the bias component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxGrad {
    pub l_m: Vec<f64>,
    pub r1: Vec<f64>,
    pub r2: Vec<f64>,
    pub total: Vec<f64>,
}

/// Analytic gradient of `L_m + R1 + R2` for a GLM. With `g_i = θᵀx_i` and
/// `Q_i = θᵀ(ā⊙(S + x_i x_iᵀ))θ`:
/// * `∂R1/∂θ = (E(1−λ)/m) Σ [(y_i − h'_i) x_i − h''_i g_i x_i]`
/// * `∂R2/∂θ = (1/2m) Σ [h'''_i Q_i x_i + 2 h''_i (ā⊙(S + x_i x_iᵀ)) θ]`
pub fn approx_loss_grad(
    model: &GlmModel,
    family: &dyn LossFamily,
    d: &Dataset,
    coeffs: &ExpectedCoeffs,
) -> Result<ApproxGrad> {
    check_approx_preconditions(d, coeffs)?;
    check_len(d.dim(), model.theta.len())?;
    let m = d.len();
    let n = d.dim();
    let theta = &model.theta;
    let e1 = coeffs.one_minus_lambda;

    // (ā⊙S)θ is shared by every sample
    let a_s_theta: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|k| coeffs.get(j, k) * d.moment(j, k) * theta[k]).sum())
        .collect();

    let p = n + 1;
    let mut per_lm = vec![vec![0.0; m]; p];
    let mut per_r1 = vec![vec![0.0; m]; p];
    let mut per_r2 = vec![vec![0.0; m]; p];
    for i in 0..m {
        let x = d.x(i);
        let y = d.y(i);
        let g: f64 = theta.iter().zip(x).map(|(a, b)| a * b).sum();
        let f = g + model.bias;
        let (h1, h2, h3) = (family.h1(f), family.h2(f), family.h3(f));
        // B_i θ = (ā⊙S)θ + x ⊙ (ā (x⊙θ))
        let b_theta: Vec<f64> = (0..n)
            .map(|j| a_s_theta[j] + x[j] * (0..n).map(|k| coeffs.get(j, k) * x[k] * theta[k]).sum::<f64>())
            .collect();
        let q: f64 = theta.iter().zip(&b_theta).map(|(a, b)| a * b).sum();
        for j in 0..n {
            per_lm[j][i] = (h1 - y) * x[j];
            per_r1[j][i] = (y - h1) * x[j] - h2 * g * x[j];
            per_r2[j][i] = h3 * q * x[j] + 2.0 * h2 * b_theta[j];
        }
        per_lm[n][i] = h1 - y;
        per_r1[n][i] = -h2 * g;
        per_r2[n][i] = h3 * q;
    }
    let l_m: Vec<f64> = per_lm.iter().map(|t| pairwise_mean(t)).collect();
    let r1: Vec<f64> = per_r1.iter().map(|t| e1 * pairwise_mean(t)).collect();
    let r2: Vec<f64> = per_r2.iter().map(|t| 0.5 * pairwise_mean(t)).collect();
    let total = (0..p).map(|j| l_m[j] + r1[j] + r2[j]).collect();
    Ok(ApproxGrad { l_m, r1, r2, total })
}
