//! Regularization coefficients `a_jk = E_M[(1−M_j)(1−M_k)]`.
//!
//! Three routes are provided:
//! * closed forms at fixed λ ([`coeff_closed`], [`ClosedForm`]),
//! * their expectation under the mixture D̃ ([`coeff_closed_expected`]),
//! * a direct Monte-Carlo estimator over any [`MaskSource`]
//!   ([`coeff_monte_carlo`]).
//!
//! Coordinates are flat indices; on a square grid index `i` is the 1-based
//! pixel `(i / n + 1, i % n + 1)`.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MsdaError, Result};
use crate::masks::{cutmix_side, hmix_outside_value, hmix_side, MaskSource, MaskSpec, Method};
use crate::numeric::{chunked_accumulate, gauss_legendre, integrate_gl, pairwise_mean, MomentAccumulator};
use crate::stochastics::{tilde_lambda_moment, RngStream};

/// Which GMix expression to evaluate.
///
/// `Continuum` is the Gaussian decay `(1−λ)·exp(−π‖(i−j)/2‖² / ((1−λ)n²))`
/// obtained by integrating the hole centre over the whole plane.
/// `GridSum` averages over the `n²` pixel centres the sampler actually uses,
/// so it is exact for [`crate::masks::sample_mask`]; near the image border it
/// is smaller than the continuum value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GmixForm {
    #[default]
    Continuum,
    GridSum,
}

/// Per-axis box coverage counts shared by the cutmix and hmix closed forms.
#[derive(Debug, Clone, Copy)]
struct BoxCoverage {
    n: usize,
    s: usize,
}

impl BoxCoverage {
    // t is a 1-based coordinate along one axis
    fn h(&self, t: i64) -> i64 {
        t.min((self.n - self.s) as i64)
    }

    fn l(&self, t: i64) -> i64 {
        (t - self.s as i64).max(0)
    }

    fn overlap(&self, a: i64, b: i64) -> i64 {
        (self.h(a) - self.l(b)).min(self.h(b) - self.l(a)).max(0)
    }

    fn positions(&self) -> f64 {
        (self.n - self.s) as f64
    }

    /// P(both pixels inside the box).
    fn both(&self, j: (usize, usize), k: (usize, usize)) -> f64 {
        if self.s == 0 {
            return 0.0;
        }
        if self.s >= self.n {
            return 1.0;
        }
        let o1 = self.overlap(j.0 as i64, k.0 as i64) as f64;
        let o2 = self.overlap(j.1 as i64, k.1 as i64) as f64;
        o1 * o2 / (self.positions() * self.positions())
    }

    /// P(pixel inside the box).
    fn single(&self, p: (usize, usize)) -> f64 {
        self.both(p, p)
    }
}

/// A closed-form coefficient evaluator for one `(spec, λ)`, with any
/// per-grid tables precomputed.
#[derive(Debug, Clone)]
pub struct ClosedForm {
    spec: MaskSpec,
    lambda: f64,
    kind: ClosedKind,
}

#[derive(Debug, Clone)]
enum ClosedKind {
    Constant(f64),
    Bernoulli { diag: f64, off: f64 },
    Cutmix(BoxCoverage),
    Hmix { cov: BoxCoverage, c: f64 },
    GmixContinuum { n: usize },
    GmixGrid { n: usize, table: Vec<f64> },
    Stochastic { q: f64, mixup: f64, cov: BoxCoverage },
}

impl ClosedForm {
    pub fn new(spec: &MaskSpec, lambda: f64, gmix: GmixForm) -> Result<Self> {
        spec.validate()?;
        if !(0.0..=1.0).contains(&lambda) {
            return Err(MsdaError::Parameter(format!("lambda must lie in [0,1], got {lambda}")));
        }
        let one_minus = 1.0 - lambda;
        let kind = match spec.method {
            Method::Mixup => ClosedKind::Constant(one_minus * one_minus),
            Method::Bernoulli => ClosedKind::Bernoulli { diag: one_minus, off: one_minus * one_minus },
            Method::Cutmix => {
                let n = side(spec);
                ClosedKind::Cutmix(BoxCoverage { n, s: cutmix_side(lambda, n) })
            }
            Method::Hmix => {
                let n = side(spec);
                ClosedKind::Hmix {
                    cov: BoxCoverage { n, s: hmix_side(lambda, spec.r, n) },
                    c: hmix_outside_value(lambda, spec.r),
                }
            }
            Method::Gmix => {
                let n = side(spec);
                match gmix {
                    GmixForm::Continuum => ClosedKind::GmixContinuum { n },
                    GmixForm::GridSum => ClosedKind::GmixGrid { n, table: gmix_axis_table(n, lambda) },
                }
            }
            Method::Stochastic => {
                let n = side(spec);
                ClosedKind::Stochastic {
                    q: spec.q,
                    mixup: one_minus * one_minus,
                    cov: BoxCoverage { n, s: cutmix_side(lambda, n) },
                }
            }
        };
        Ok(Self { spec: *spec, lambda, kind })
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    /// `a_jk` for flat coordinates `j`, `k`.
    pub fn at(&self, j: usize, k: usize) -> Result<f64> {
        let d = self.dim();
        if j >= d || k >= d {
            return Err(MsdaError::Parameter(format!("coordinate ({j},{k}) outside 0..{d}")));
        }
        Ok(self.at_unchecked(j, k))
    }

    fn pixel(&self, i: usize) -> (usize, usize) {
        self.spec.shape.pixel(i).expect("square grid")
    }

    pub(crate) fn at_unchecked(&self, j: usize, k: usize) -> f64 {
        match &self.kind {
            ClosedKind::Constant(v) => *v,
            ClosedKind::Bernoulli { diag, off } => {
                if j == k {
                    *diag
                } else {
                    *off
                }
            }
            ClosedKind::Cutmix(cov) => cov.both(self.pixel(j), self.pixel(k)),
            ClosedKind::Hmix { cov, c } => {
                let (pj, pk) = (self.pixel(j), self.pixel(k));
                let inside_both = cov.both(pj, pk);
                let vj = cov.single(pj);
                let vk = cov.single(pk);
                // 1−M is 1 inside the box and 1−c outside it.
                c * c * inside_both + c * (1.0 - c) * (vj + vk) + (1.0 - c) * (1.0 - c)
            }
            ClosedKind::GmixContinuum { n } => {
                let spread = 1.0 - self.lambda;
                if spread <= 0.0 {
                    return 0.0;
                }
                let (pj, pk) = (self.pixel(j), self.pixel(k));
                let dr = (pj.0 as f64 - pk.0 as f64) / 2.0;
                let dc = (pj.1 as f64 - pk.1 as f64) / 2.0;
                let nn = (*n * *n) as f64;
                spread * (-std::f64::consts::PI * (dr * dr + dc * dc) / (spread * nn)).exp()
            }
            ClosedKind::GmixGrid { n, table } => {
                let (pj, pk) = (self.pixel(j), self.pixel(k));
                let t = |a: usize, b: usize| table[(a - 1) * n + (b - 1)];
                t(pj.0, pk.0) * t(pj.1, pk.1) / (*n * *n) as f64
            }
            ClosedKind::Stochastic { q, mixup, cov } => {
                q * mixup + (1.0 - q) * cov.both(self.pixel(j), self.pixel(k))
            }
        }
    }
}

fn side(spec: &MaskSpec) -> usize {
    spec.shape.side().expect("validated square grid")
}

/// `T[a][b] = Σ_p exp(−π((a−p)² + (b−p)²) / (2(1−λ)n²))` along one axis; the
/// grid-sum GMix coefficient factorises as `T[r_j][r_k]·T[c_j][c_k] / n²`.
fn gmix_axis_table(n: usize, lambda: f64) -> Vec<f64> {
    let spread = 1.0 - lambda;
    let mut table = vec![0.0; n * n];
    if spread <= 0.0 {
        return table;
    }
    let scale = std::f64::consts::PI / (2.0 * spread * (n * n) as f64);
    for a in 0..n {
        for b in a..n {
            let terms: Vec<f64> = (0..n)
                .map(|p| {
                    let da = a as f64 - p as f64;
                    let db = b as f64 - p as f64;
                    (-(da * da + db * db) * scale).exp()
                })
                .collect();
            let v = crate::numeric::pairwise_sum(&terms);
            table[a * n + b] = v;
            table[b * n + a] = v;
        }
    }
    table
}

/// Closed-form `a_jk` at fixed λ. GMix uses the continuum expression.
pub fn coeff_closed(spec: &MaskSpec, lambda: f64, j: usize, k: usize) -> Result<f64> {
    coeff_closed_with(spec, lambda, j, k, GmixForm::Continuum)
}

pub fn coeff_closed_with(spec: &MaskSpec, lambda: f64, j: usize, k: usize, gmix: GmixForm) -> Result<f64> {
    ClosedForm::new(spec, lambda, gmix)?.at(j, k)
}

/// λ values where the closed form jumps (box side changes).
fn breakpoints(spec: &MaskSpec) -> Vec<f64> {
    let mut pts = vec![0.0, 1.0];
    match spec.method {
        Method::Cutmix | Method::Stochastic => {
            let n = side(spec);
            for t in 1..n {
                let frac = t as f64 / n as f64;
                pts.push(1.0 - frac * frac);
            }
        }
        Method::Hmix if spec.r > 0.0 => {
            let n = side(spec) as f64;
            let mut t = 1.0;
            loop {
                let lam = 1.0 - t * t / (spec.r * n * n);
                if lam <= 0.0 {
                    break;
                }
                pts.push(lam);
                t += 1.0;
            }
        }
        _ => {}
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    pts
}

const QUADRATURE_NODES: usize = 64;
const QUADRATURE_RTOL: f64 = 1e-6;

/// Integrates `g(λ)·p̃(λ)` over (0, 1) piecewise between `breaks`, with the
/// substitution `λ = lo + (hi−lo)(3t² − 2t³)` that tames endpoint
/// singularities of the density.
fn tilde_integral(spec: &MaskSpec, breaks: &[f64], nodes: usize, g: &dyn Fn(f64) -> f64) -> f64 {
    let rule = gauss_legendre(nodes);
    let beta = spec.beta;
    breaks
        .windows(2)
        .map(|w| {
            let (lo, hi) = (w[0], w[1]);
            let width = hi - lo;
            integrate_gl(
                |t| {
                    let lam = lo + width * t * t * (3.0 - 2.0 * t);
                    let jac = width * 6.0 * t * (1.0 - t);
                    g(lam) * beta.tilde_pdf(lam) * jac
                },
                0.0,
                1.0,
                &rule,
            )
        })
        .sum()
}

/// `E_{λ∼D̃}[a_jk(λ)]`. Exact for mixup / bernoulli (polynomial in λ);
/// piecewise Gauss–Legendre against the D̃ density otherwise.
pub fn coeff_closed_expected(spec: &MaskSpec, j: usize, k: usize) -> Result<f64> {
    coeff_closed_expected_with(spec, j, k, GmixForm::Continuum)
}

pub fn coeff_closed_expected_with(spec: &MaskSpec, j: usize, k: usize, gmix: GmixForm) -> Result<f64> {
    spec.validate()?;
    let d = spec.dim();
    if j >= d || k >= d {
        return Err(MsdaError::Parameter(format!("coordinate ({j},{k}) outside 0..{d}")));
    }
    match spec.method {
        Method::Mixup => tilde_lambda_moment(spec.beta, 2),
        Method::Bernoulli => tilde_lambda_moment(spec.beta, if j == k { 1 } else { 2 }),
        _ => {
            let g = |lam: f64| {
                ClosedForm::new(spec, lam, gmix)
                    .map(|c| c.at_unchecked(j, k))
                    .unwrap_or(f64::NAN)
            };
            let breaks = breakpoints(spec);
            let coarse = tilde_integral(spec, &breaks, QUADRATURE_NODES, &g);
            let fine = tilde_integral(spec, &breaks, 2 * QUADRATURE_NODES, &g);
            if !fine.is_finite() || (coarse - fine).abs() > QUADRATURE_RTOL * fine.abs() + 1e-15 {
                return Err(MsdaError::Numerical(format!(
                    "quadrature for {} a_({j},{k}) did not converge: {coarse} vs {fine}",
                    spec.method
                )));
            }
            Ok(fine)
        }
    }
}

/// The D̃-averaged quantities the approximate loss needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedCoeffs {
    pub dim: usize,
    /// `E_{D̃}[1−λ]`.
    pub one_minus_lambda: f64,
    /// Row-major `d×d` matrix of `E_{D̃}[a_jk(λ)]`.
    pub matrix: Vec<f64>,
}

impl ExpectedCoeffs {
    /// All-zero coefficients: no mixing at all (λ ≡ 1).
    pub fn no_mixing(dim: usize) -> Self {
        Self { dim, one_minus_lambda: 0.0, matrix: vec![0.0; dim * dim] }
    }

    pub fn for_spec(spec: &MaskSpec) -> Result<Self> {
        let d = spec.dim();
        let mut matrix = vec![0.0; d * d];
        for j in 0..d {
            for k in j..d {
                let v = coeff_closed_expected(spec, j, k)?;
                matrix[j * d + k] = v;
                matrix[k * d + j] = v;
            }
        }
        Ok(Self { dim: d, one_minus_lambda: tilde_lambda_moment(spec.beta, 1)?, matrix })
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.matrix[j * self.dim + k]
    }
}

/// Which `(j, k)` entries to estimate.
#[derive(Debug, Clone, PartialEq)]
pub enum PairSelection {
    Full,
    Pairs(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    ClosedForm,
    MonteCarlo { samples: u64 },
}

/// Largest coordinate count for which a full matrix may be requested.
pub const FULL_MATRIX_LIMIT: usize = 4096;

/// A symmetric set of coefficient entries with optional standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffMatrix {
    pub dim: usize,
    /// λ the entries were evaluated at; `None` when λ was drawn per mask.
    pub lambda: Option<f64>,
    pub provenance: Provenance,
    pairs: Vec<(usize, usize)>,
    values: Vec<f64>,
    std_errors: Vec<f64>,
    index: Option<HashMap<(usize, usize), usize>>,
}

fn canonical(j: usize, k: usize) -> (usize, usize) {
    if j <= k {
        (j, k)
    } else {
        (k, j)
    }
}

fn upper_index(d: usize, j: usize, k: usize) -> usize {
    j * d - j * (j + 1) / 2 + k
}

fn resolve_pairs(dim: usize, sel: &PairSelection) -> Result<(Vec<(usize, usize)>, bool)> {
    match sel {
        PairSelection::Full => {
            if dim > FULL_MATRIX_LIMIT {
                return Err(MsdaError::Size(format!(
                    "full matrix over {dim} coordinates exceeds {FULL_MATRIX_LIMIT}; request pairs or offsets"
                )));
            }
            let mut pairs = Vec::with_capacity(dim * (dim + 1) / 2);
            for j in 0..dim {
                for k in j..dim {
                    pairs.push((j, k));
                }
            }
            Ok((pairs, true))
        }
        PairSelection::Pairs(list) => {
            let mut out = Vec::with_capacity(list.len());
            for &(j, k) in list {
                if j >= dim || k >= dim {
                    return Err(MsdaError::Parameter(format!("coordinate ({j},{k}) outside 0..{dim}")));
                }
                let p = canonical(j, k);
                if !out.contains(&p) {
                    out.push(p);
                }
            }
            Ok((out, false))
        }
    }
}

impl CoeffMatrix {
    fn build(
        dim: usize,
        lambda: Option<f64>,
        provenance: Provenance,
        pairs: Vec<(usize, usize)>,
        full: bool,
        values: Vec<f64>,
        std_errors: Vec<f64>,
    ) -> Self {
        let index = if full {
            None
        } else {
            Some(pairs.iter().enumerate().map(|(i, &p)| (p, i)).collect())
        };
        Self { dim, lambda, provenance, pairs, values, std_errors, index }
    }

    fn slot(&self, j: usize, k: usize) -> Option<usize> {
        if j >= self.dim || k >= self.dim {
            return None;
        }
        let (a, b) = canonical(j, k);
        match &self.index {
            None => Some(upper_index(self.dim, a, b)),
            Some(map) => map.get(&(a, b)).copied(),
        }
    }

    pub fn get(&self, j: usize, k: usize) -> Option<f64> {
        self.slot(j, k).map(|i| self.values[i])
    }

    pub fn std_error(&self, j: usize, k: usize) -> Option<f64> {
        self.slot(j, k).map(|i| self.std_errors[i])
    }

    pub fn is_full(&self) -> bool {
        self.index.is_none()
    }

    /// Stored `(j, k, value, std_error)` with `j <= k`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64, f64)> + '_ {
        self.pairs
            .iter()
            .zip(self.values.iter().zip(&self.std_errors))
            .map(|(&(j, k), (&v, &se))| (j, k, v, se))
    }

    /// Dense row-major copy; only for full matrices.
    pub fn to_dense(&self) -> Option<Vec<f64>> {
        if !self.is_full() {
            return None;
        }
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for (j, k, v, _) in self.entries() {
            out[j * d + k] = v;
            out[k * d + j] = v;
        }
        Some(out)
    }
}

/// Closed-form entries for a selection of pairs.
pub fn coeff_closed_matrix(spec: &MaskSpec, lambda: f64, sel: &PairSelection, gmix: GmixForm) -> Result<CoeffMatrix> {
    let closed = ClosedForm::new(spec, lambda, gmix)?;
    let (pairs, full) = resolve_pairs(spec.dim(), sel)?;
    let values: Vec<f64> = pairs.par_iter().map(|&(j, k)| closed.at_unchecked(j, k)).collect();
    let std_errors = vec![0.0; values.len()];
    Ok(CoeffMatrix::build(
        spec.dim(),
        Some(lambda),
        Provenance::ClosedForm,
        pairs,
        full,
        values,
        std_errors,
    ))
}

/// Draws `samples` masks from `source` via [`chunked_accumulate`], handing
/// each `1 − M` to `observe`.
pub(crate) fn chunked_mc<F>(
    rng: &RngStream,
    source: &dyn MaskSource,
    samples: usize,
    slots: usize,
    observe: F,
) -> Result<Vec<MomentAccumulator>>
where
    F: Fn(&[f64], &mut [MomentAccumulator]) + Sync,
{
    chunked_accumulate(rng, samples, slots, |sub, count, acc| {
        let mut complement = vec![0.0; source.dim()];
        for _ in 0..count {
            let mask = source.draw(sub)?;
            for (u, m) in complement.iter_mut().zip(&mask.values) {
                *u = 1.0 - m;
            }
            observe(&complement, acc);
        }
        Ok(())
    })
}

/// Empirical `a_jk` over `samples` independent masks from `source`, with the
/// standard error of each entry. `lambda` is recorded as metadata only.
pub fn coeff_monte_carlo(
    rng: &RngStream,
    source: &dyn MaskSource,
    lambda: Option<f64>,
    samples: usize,
    sel: &PairSelection,
) -> Result<CoeffMatrix> {
    let dim = source.dim();
    let (pairs, full) = resolve_pairs(dim, sel)?;
    let acc = chunked_mc(rng, source, samples, pairs.len(), |u, acc| {
        for (a, &(j, k)) in acc.iter_mut().zip(&pairs) {
            a.push(u[j] * u[k]);
        }
    })?;
    let values = acc.iter().map(|a| a.mean()).collect();
    let std_errors = acc.iter().map(|a| a.std_error()).collect();
    Ok(CoeffMatrix::build(
        dim,
        lambda,
        Provenance::MonteCarlo { samples: samples as u64 },
        pairs,
        full,
        values,
        std_errors,
    ))
}

/// Offset-averaged coefficients `heat(Δ) = mean_i a_{i, i+Δ}` over all base
/// pixels `i` with `i + Δ` inside the grid. `dx` is the column offset and `dy`
/// the row offset, both in `−(n−1) ..= n−1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub n: usize,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
}

impl Heatmap {
    pub fn span(&self) -> i64 {
        self.n as i64 - 1
    }

    fn slot(&self, dx: i64, dy: i64) -> Option<usize> {
        let m = self.span();
        if dx.abs() > m || dy.abs() > m {
            return None;
        }
        let w = (2 * m + 1) as usize;
        Some((dy + m) as usize * w + (dx + m) as usize)
    }

    pub fn get(&self, dx: i64, dy: i64) -> Option<f64> {
        self.slot(dx, dy).map(|i| self.values[i])
    }

    /// `(dx, dy, value)` in row-major offset order.
    pub fn rows(&self) -> impl Iterator<Item = (i64, i64, f64)> + '_ {
        let m = self.span();
        (-m..=m).flat_map(move |dy| (-m..=m).map(move |dx| (dx, dy, self.get(dx, dy).unwrap())))
    }
}

pub enum HeatmapMode<'a> {
    Closed(GmixForm),
    MonteCarlo { rng: &'a RngStream, samples: usize },
}

fn offsets(n: usize) -> Vec<(i64, i64)> {
    let m = n as i64 - 1;
    (-m..=m).flat_map(|dy| (-m..=m).map(move |dx| (dx, dy))).collect()
}

/// Base pixels (0-based row, col) for which `i + Δ` stays in the grid.
fn valid_bases(n: usize, dx: i64, dy: i64) -> impl Iterator<Item = (usize, usize)> {
    let n = n as i64;
    let rows = (0.max(-dy))..(n.min(n - dy));
    let cols = (0.max(-dx))..(n.min(n - dx));
    rows.flat_map(move |r| cols.clone().map(move |c| (r as usize, c as usize)))
}

pub fn offset_heatmap(spec: &MaskSpec, lambda: f64, mode: HeatmapMode<'_>) -> Result<Heatmap> {
    spec.validate()?;
    let n = spec
        .shape
        .side()
        .ok_or_else(|| MsdaError::Spec("offset heatmaps need a square grid".into()))?;
    let offs = offsets(n);
    match mode {
        HeatmapMode::Closed(form) => {
            let closed = ClosedForm::new(spec, lambda, form)?;
            let values: Vec<f64> = offs
                .par_iter()
                .map(|&(dx, dy)| {
                    let terms: Vec<f64> = valid_bases(n, dx, dy)
                        .map(|(r, c)| {
                            let i = r * n + c;
                            let j = ((r as i64 + dy) as usize) * n + (c as i64 + dx) as usize;
                            closed.at_unchecked(i, j)
                        })
                        .collect();
                    pairwise_mean(&terms)
                })
                .collect();
            let std_errors = vec![0.0; values.len()];
            Ok(Heatmap { n, values, std_errors })
        }
        HeatmapMode::MonteCarlo { rng, samples } => {
            let source = crate::masks::FixedLambda { spec: *spec, lambda };
            let acc = chunked_mc(rng, &source, samples, offs.len(), |u, acc| {
                for (a, &(dx, dy)) in acc.iter_mut().zip(&offs) {
                    let mut sum = 0.0;
                    let mut count = 0usize;
                    for (r, c) in valid_bases(n, dx, dy) {
                        let j = ((r as i64 + dy) as usize) * n + (c as i64 + dx) as usize;
                        sum += u[r * n + c] * u[j];
                        count += 1;
                    }
                    a.push(sum / count as f64);
                }
            })?;
            Ok(Heatmap {
                n,
                values: acc.iter().map(|a| a.mean()).collect(),
                std_errors: acc.iter().map(|a| a.std_error()).collect(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{FixedLambda, GridShape};
    use crate::stochastics::BetaParams;
    use proptest::prelude::*;

    fn spec(method: Method, shape: GridShape) -> MaskSpec {
        MaskSpec::new(method, BetaParams::new(1.0, 1.0).unwrap(), shape).unwrap()
    }

    #[test]
    fn mixup_is_constant() {
        let s = spec(Method::Mixup, GridShape::square(8));
        for (j, k) in [(0, 0), (3, 60), (63, 1)] {
            assert_eq!(coeff_closed(&s, 0.5, j, k).unwrap(), 0.25);
        }
    }

    #[test]
    fn gmix_diagonal_is_one_minus_lambda() {
        let s = spec(Method::Gmix, GridShape::square(32));
        assert_eq!(coeff_closed(&s, 0.5, 100, 100).unwrap(), 0.5);
    }

    #[test]
    fn bernoulli_closed() {
        let s = spec(Method::Bernoulli, GridShape::flat(4));
        assert!((coeff_closed(&s, 0.3, 0, 1).unwrap() - 0.49).abs() < 1e-15);
        assert!((coeff_closed(&s, 0.3, 2, 2).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn coordinate_out_of_range() {
        let s = spec(Method::Cutmix, GridShape::square(4));
        assert!(coeff_closed(&s, 0.5, 16, 0).is_err());
        assert!(coeff_closed(&s, 1.5, 0, 0).is_err());
    }

    /// Direct enumeration over all box placements: the independent oracle for
    /// the cutmix coverage algebra.
    fn cutmix_enumerated(n: usize, s: usize, j: (usize, usize), k: (usize, usize)) -> f64 {
        let positions = n - s;
        let mut hits = 0usize;
        for pr in 0..positions {
            for pc in 0..positions {
                let inside = |p: (usize, usize)| p.0 > pr && p.0 <= pr + s && p.1 > pc && p.1 <= pc + s;
                if inside(j) && inside(k) {
                    hits += 1;
                }
            }
        }
        hits as f64 / (positions * positions) as f64
    }

    #[test]
    fn cutmix_matches_enumeration() {
        for n in [4usize, 7, 16] {
            for lam in [0.2, 0.5, 0.75, 0.9] {
                let s = spec(Method::Cutmix, GridShape::square(n));
                let side = cutmix_side(lam, n);
                let closed = ClosedForm::new(&s, lam, GmixForm::Continuum).unwrap();
                for j in 0..n * n {
                    for k in (0..n * n).step_by(3) {
                        let want = if side == 0 {
                            0.0
                        } else {
                            cutmix_enumerated(n, side, s.shape.pixel(j).unwrap(), s.shape.pixel(k).unwrap())
                        };
                        let got = closed.at(j, k).unwrap();
                        assert!((got - want).abs() < 1e-15, "n={n} lam={lam} j={j} k={k}: {got} vs {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn cutmix_center_example() {
        // n=16, λ=0.75: s = 8, 8 offsets per axis; pixel (8,8) is covered by
        // offsets 0..=7 on both axes, so every placement hits it.
        let s = spec(Method::Cutmix, GridShape::square(16));
        let idx = s.shape.index(8, 8).unwrap();
        assert_eq!(coeff_closed(&s, 0.75, idx, idx).unwrap(), 1.0);
        // last row/column is never covered
        let corner = s.shape.index(16, 16).unwrap();
        assert_eq!(coeff_closed(&s, 0.75, corner, corner).unwrap(), 0.0);
    }

    #[test]
    fn hmix_matches_enumeration() {
        let n = 12;
        for (lam, r) in [(0.5, 0.5), (0.3, 0.8), (0.75, 0.2)] {
            let s = spec(Method::Hmix, GridShape::square(n)).with_r(r).unwrap();
            let side = hmix_side(lam, r, n);
            let c = hmix_outside_value(lam, r);
            let positions = (n - side).max(1);
            let closed = ClosedForm::new(&s, lam, GmixForm::Continuum).unwrap();
            for j in (0..n * n).step_by(5) {
                for k in (0..n * n).step_by(7) {
                    let mut acc = 0.0;
                    for pr in 0..positions {
                        for pc in 0..positions {
                            let m = crate::masks::mask_with_witness(
                                &s,
                                lam,
                                crate::masks::Witness::BoxOffset { row: pr, col: pc },
                            )
                            .unwrap();
                            acc += (1.0 - m.values[j]) * (1.0 - m.values[k]);
                        }
                    }
                    let want = acc / (positions * positions) as f64;
                    let got = closed.at(j, k).unwrap();
                    assert!((got - want).abs() < 1e-12, "lam={lam} r={r} c={c}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn gmix_grid_matches_enumeration() {
        let n = 6;
        let s = spec(Method::Gmix, GridShape::square(n));
        let lam = 0.4;
        let closed = ClosedForm::new(&s, lam, GmixForm::GridSum).unwrap();
        for j in 0..n * n {
            for k in (0..n * n).step_by(4) {
                let mut acc = 0.0;
                for p in 0..n * n {
                    let m = crate::masks::mask_with_witness(
                        &s,
                        lam,
                        crate::masks::Witness::Center { row: p / n, col: p % n },
                    )
                    .unwrap();
                    acc += (1.0 - m.values[j]) * (1.0 - m.values[k]);
                }
                let want = acc / (n * n) as f64;
                assert!((closed.at(j, k).unwrap() - want).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn stochastic_is_weighted_average() {
        let n = 8;
        let s = spec(Method::Stochastic, GridShape::square(n)).with_q(0.3).unwrap();
        let cut = spec(Method::Cutmix, GridShape::square(n));
        for (j, k) in [(0, 0), (9, 18), (27, 63)] {
            let a = coeff_closed(&s, 0.6, j, k).unwrap();
            let want = 0.3 * 0.4 * 0.4 + 0.7 * coeff_closed(&cut, 0.6, j, k).unwrap();
            assert!((a - want).abs() < 1e-15);
        }
    }

    #[test]
    fn expected_mixup_and_bernoulli() {
        let mix = spec(Method::Mixup, GridShape::flat(3));
        assert!((coeff_closed_expected(&mix, 0, 2).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        let bern = spec(Method::Bernoulli, GridShape::flat(3));
        assert!((coeff_closed_expected(&bern, 1, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((coeff_closed_expected(&bern, 0, 1).unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn expected_quadrature_matches_mixup_polynomial() {
        // hmix with r→0 collapses to the mixup polynomial, exercising the
        // quadrature path against the exact moment.
        let beta = BetaParams::new(2.0, 3.0).unwrap();
        let s = MaskSpec::new(Method::Hmix, beta, GridShape::square(8)).unwrap().with_r(0.0).unwrap();
        let want = tilde_lambda_moment(beta, 2).unwrap();
        let got = coeff_closed_expected(&s, 3, 40).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn expected_values_are_in_unit_interval() {
        for m in Method::ALL {
            let s = spec(m, GridShape::square(8));
            for (j, k) in [(0, 0), (18, 27), (5, 60)] {
                let v = coeff_closed_expected(&s, j, k).unwrap();
                assert!((0.0..=1.0).contains(&v), "{m} ({j},{k}) = {v}");
            }
        }
    }

    #[test]
    fn monte_carlo_mixup_is_exact() {
        let s = spec(Method::Mixup, GridShape::square(4));
        let src = FixedLambda { spec: s, lambda: 0.5 };
        let m = coeff_monte_carlo(&RngStream::new(1, 0), &src, Some(0.5), 100, &PairSelection::Full).unwrap();
        assert!(m.is_full());
        for (_, _, v, se) in m.entries() {
            assert_eq!(v, 0.25);
            assert_eq!(se, 0.0);
        }
        assert_eq!(m.get(3, 1), m.get(1, 3));
    }

    #[test]
    fn full_matrix_size_limit() {
        let s = spec(Method::Mixup, GridShape::square(65));
        let src = FixedLambda { spec: s, lambda: 0.5 };
        assert!(matches!(
            coeff_monte_carlo(&RngStream::new(1, 0), &src, None, 10, &PairSelection::Full),
            Err(MsdaError::Size(_))
        ));
    }

    #[test]
    fn heatmap_rejects_flat() {
        let s = spec(Method::Mixup, GridShape::flat(4));
        assert!(offset_heatmap(&s, 0.5, HeatmapMode::Closed(GmixForm::Continuum)).is_err());
    }

    #[test]
    fn heatmap_mixup_constant_and_cutmix_support() {
        let s = spec(Method::Mixup, GridShape::square(6));
        let h = offset_heatmap(&s, 0.4, HeatmapMode::Closed(GmixForm::Continuum)).unwrap();
        assert!(h.values.iter().all(|&v| (v - 0.36).abs() < 1e-15));
        let c = spec(Method::Cutmix, GridShape::square(16));
        let lam = 0.75;
        let side = cutmix_side(lam, 16) as i64;
        let h = offset_heatmap(&c, lam, HeatmapMode::Closed(GmixForm::Continuum)).unwrap();
        for (dx, dy, v) in h.rows() {
            if dx.abs().max(dy.abs()) >= side {
                assert_eq!(v, 0.0, "offset ({dx},{dy})");
            }
        }
        assert!(h.get(0, 0).unwrap() > 0.0);
    }

    #[test]
    fn gmix_heatmap_decays() {
        let s = spec(Method::Gmix, GridShape::square(32));
        let h = offset_heatmap(&s, 0.5, HeatmapMode::Closed(GmixForm::Continuum)).unwrap();
        assert!((h.get(0, 0).unwrap() - 0.5).abs() < 1e-15);
        for t in 0..31 {
            assert!(h.get(t + 1, 0).unwrap() < h.get(t, 0).unwrap());
            assert!(h.get(0, t + 1).unwrap() < h.get(0, t).unwrap());
        }
    }

    #[test]
    fn heatmap_closed_vs_mc_cutmix() {
        let s = spec(Method::Cutmix, GridShape::square(8));
        let closed = offset_heatmap(&s, 0.6, HeatmapMode::Closed(GmixForm::Continuum)).unwrap();
        let rng = RngStream::new(4, 0);
        let mc = offset_heatmap(&s, 0.6, HeatmapMode::MonteCarlo { rng: &rng, samples: 20_000 }).unwrap();
        for (i, (&a, &b)) in closed.values.iter().zip(&mc.values).enumerate() {
            assert!((a - b).abs() <= 0.01f64.max(4.0 * mc.std_errors[i]), "slot {i}: {a} vs {b}");
        }
    }

    #[test]
    fn breakpoints_cover_unit_interval() {
        let s = spec(Method::Cutmix, GridShape::square(4));
        let b = breakpoints(&s);
        assert_eq!(b.first(), Some(&0.0));
        assert_eq!(b.last(), Some(&1.0));
        assert_eq!(b.len(), 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn closed_forms_are_symmetric_and_bounded(
            method_idx in 0usize..6,
            n in 2usize..12,
            lam in 0.0f64..1.0,
            r in 0.05f64..1.0,
            q in 0.0f64..1.0,
            j_seed in any::<usize>(),
            k_seed in any::<usize>(),
        ) {
            let shape = GridShape::square(n);
            let s = spec(Method::ALL[method_idx], shape).with_r(r).unwrap().with_q(q).unwrap();
            let (j, k) = (j_seed % (n * n), k_seed % (n * n));
            for form in [GmixForm::Continuum, GmixForm::GridSum] {
                let a = coeff_closed_with(&s, lam, j, k, form).unwrap();
                let b = coeff_closed_with(&s, lam, k, j, form).unwrap();
                prop_assert_eq!(a, b);
                prop_assert!((-1e-15..=1.0 + 1e-15).contains(&a), "{} = {}", Method::ALL[method_idx], a);
            }
        }

        #[test]
        fn cauchy_schwarz_for_closed_forms(
            method_idx in 0usize..6,
            n in 2usize..10,
            lam in 0.01f64..0.99,
            j_seed in any::<usize>(),
            k_seed in any::<usize>(),
        ) {
            let s = spec(Method::ALL[method_idx], GridShape::square(n));
            let (j, k) = (j_seed % (n * n), k_seed % (n * n));
            let c = ClosedForm::new(&s, lam, GmixForm::GridSum).unwrap();
            let bound = (c.at(j, j).unwrap() * c.at(k, k).unwrap()).sqrt();
            prop_assert!(c.at(j, k).unwrap() <= bound + 1e-12);
        }
    }
}
