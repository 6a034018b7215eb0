//! Small end-to-end experiments: the two-moons comparison of the exact and
//! approximate training objectives, and partial-gradient-product maps.

use serde::{Deserialize, Serialize};

use crate::coefficients::ExpectedCoeffs;
use crate::error::{check_len, MsdaError, Result};
use crate::losses::{approx_loss, approx_loss_grad, center_dataset, msda_empirical_loss, Dataset, LossBreakdown};
use crate::masks::{MaskSource, MaskSpec};
use crate::mixer::mix_pair;
use crate::models::{GlmModel, LossFamily, Logistic, Predictor, TwoLayerNet};
use crate::numeric::{pairwise_mean, pairwise_sum, McEstimate};
use crate::stochastics::RngStream;

/// Two interleaving half-circles of radius 1: class 0 on the upper arc,
/// class 1 on the lower arc shifted by `(1, −0.5)`. Points are evenly
/// spaced in angle, then perturbed by `N(0, noise²)` per coordinate.
pub fn two_moons(n: usize, noise: f64, rng: &mut RngStream) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 {
        return Err(MsdaError::Parameter(format!("two-moons needs a positive even n, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(MsdaError::Parameter(format!("noise must be non-negative, got {noise}")));
    }
    let half = n / 2;
    let angle = |i: usize| {
        if half == 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (half - 1) as f64
        }
    };
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..half {
        let t = angle(i);
        xs.push(vec![t.cos(), t.sin()]);
        ys.push(0.0);
    }
    for i in 0..half {
        let t = angle(i);
        xs.push(vec![1.0 - t.cos(), 0.5 - t.sin()]);
        ys.push(1.0);
    }
    if noise > 0.0 {
        for x in xs.iter_mut() {
            for v in x.iter_mut() {
                *v += noise * rng.normal();
            }
        }
    }
    Dataset::binary(xs, ys)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    /// Descends the loss of freshly mixed batches.
    Original,
    /// Descends `L_m + R1 + R2` analytically.
    Approximate,
}

impl std::str::FromStr for Engine {
    type Err = MsdaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Engine::Original),
            "approximate" => Ok(Engine::Approximate),
            other => Err(MsdaError::Parameter(format!("unknown engine '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Mini-batch size; `None` trains full-batch.
    pub batch: Option<usize>,
    pub engine: Engine,
    pub spec: MaskSpec,
    pub seed: u64,
    /// Draws used to evaluate the exact loss at the final parameters.
    pub eval_draws: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(MsdaError::Parameter("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MsdaError::Parameter(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch == Some(0) {
            return Err(MsdaError::Parameter("batch size must be at least 1".into()));
        }
        self.spec.validate()
    }
}

/// Both objectives at the final parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossGap {
    pub original: McEstimate,
    pub approximate: LossBreakdown,
    pub absolute: f64,
    /// `absolute / approximate.total`.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: TrainConfig,
    pub final_theta: Vec<f64>,
    pub final_bias: f64,
    pub train_loss_curve: Vec<f64>,
    pub heldout_accuracy: Option<f64>,
    pub loss_gap: LossGap,
}

/// Divergence threshold on the training objective.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Fraction of samples with `1[f(x) > 0] == 1[y ≥ ½]`.
pub fn accuracy(model: &dyn Predictor, d: &Dataset) -> Result<f64> {
    let hits = (0..d.len())
        .map(|i| Ok(((model.predict(d.x(i))? > 0.0) == (d.y(i) >= 0.5)) as u8 as f64))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_mean(&hits))
}

/// One step of the exact engine over `batch`: every sample is mixed with its
/// partner under the epoch permutation, with a fresh `(λ, M)` per pair.
fn original_step(
    model: &GlmModel,
    d: &Dataset,
    batch: &[usize],
    partner: &[usize],
    source: &dyn MaskSource,
    rng: &mut RngStream,
) -> Result<(f64, Vec<f64>)> {
    let n = d.dim();
    let mut losses = Vec::with_capacity(batch.len());
    let mut grads = vec![Vec::with_capacity(batch.len()); n + 1];
    for &i in batch {
        let mask = source.draw(rng)?;
        let mixed = mix_pair(&d.samples[i], &d.samples[partner[i]], &mask)?;
        let f = model.predict(&mixed.x)?;
        let y = mixed.y[0];
        losses.push(Logistic.point_loss(f, y));
        let r = Logistic.h1(f) - y;
        for (g, x) in grads.iter_mut().zip(&mixed.x) {
            g.push(r * x);
        }
        grads[n].push(r);
    }
    Ok((pairwise_mean(&losses), grads.iter().map(|g| pairwise_mean(g)).collect()))
}

/// Gradient descent on a logistic GLM under either engine, starting from
/// zero. The approximate engine needs a centered `train` set.
pub fn train_sgd(train: &Dataset, heldout: Option<&Dataset>, cfg: &TrainConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    check_len(train.dim(), cfg.spec.dim())?;
    let coeffs = ExpectedCoeffs::for_spec(&cfg.spec)?;
    if cfg.engine == Engine::Approximate && !train.is_centered() {
        return Err(MsdaError::Precondition("the approximate engine needs a centered dataset".into()));
    }
    let m = train.len();
    let batch = cfg.batch.unwrap_or(m).min(m);
    let mut rng = RngStream::new(cfg.seed, 0);
    let mut model = GlmModel::zeros(train.dim());
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        let order = rng.permutation(m);
        let perm = rng.permutation(m);
        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(batch) {
            let (loss, grad) = match cfg.engine {
                Engine::Original => original_step(&model, train, chunk, &perm, &cfg.spec, &mut rng)?,
                Engine::Approximate => {
                    let loss = approx_loss(&model, &Logistic, train, &coeffs)?.total;
                    let grad = if batch == m {
                        approx_loss_grad(&model, &Logistic, train, &coeffs)?
                    } else {
                        approx_loss_grad(&model, &Logistic, &train.batch_view(chunk), &coeffs)?
                    };
                    (loss, grad.total)
                }
            };
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(MsdaError::Divergence { step, loss });
            }
            epoch_losses.push(loss);
            let mut params = model.params();
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
            model = GlmModel::from_params(&params).map_err(|_| MsdaError::Divergence { step, loss: f64::INFINITY })?;
            step += 1;
        }
        curve.push(pairwise_mean(&epoch_losses));
    }
    let loss_gap = loss_gap(&model, train, &cfg.spec, &coeffs, cfg.seed, cfg.eval_draws)?;
    let heldout_accuracy = heldout.map(|h| accuracy(&model, h)).transpose()?;
    Ok(ExperimentReport {
        config: cfg.clone(),
        final_theta: model.theta.clone(),
        final_bias: model.bias,
        train_loss_curve: curve,
        heldout_accuracy,
        loss_gap,
    })
}

/// Exact (Monte-Carlo) and approximate objectives at `model`.
pub fn loss_gap(
    model: &GlmModel,
    d: &Dataset,
    spec: &MaskSpec,
    coeffs: &ExpectedCoeffs,
    seed: u64,
    draws: usize,
) -> Result<LossGap> {
    let original = msda_empirical_loss(&RngStream::new(seed, 1), model, &Logistic, d, spec, draws)?;
    let approximate = approx_loss(model, &Logistic, d, coeffs)?;
    let absolute = (original.mean - approximate.total).abs();
    Ok(LossGap { original, approximate, absolute, relative: absolute / approximate.total.abs() })
}

/// Angle in degrees between two weight vectors, via
/// `2·atan2(‖â − b̂‖, ‖â + b̂‖)` which stays accurate near 0° and 180°.
pub fn angle_degrees(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 0.0 } else { 90.0 };
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    (2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineComparison {
    pub original: ExperimentReport,
    pub approximate: ExperimentReport,
    pub angle_degrees: f64,
    pub accuracy_difference: f64,
}

/// Centers `train`, shifts `heldout` by the same mean, and trains both
/// engines from the same configuration.
pub fn compare_engines(train: &Dataset, heldout: &Dataset, cfg: &TrainConfig) -> Result<EngineComparison> {
    let centered = center_dataset(train)?;
    let held = heldout.shifted(&train.mean)?;
    let run = |engine| train_sgd(&centered, Some(&held), &TrainConfig { engine, ..cfg.clone() });
    let original = run(Engine::Original)?;
    let approximate = run(Engine::Approximate)?;
    let angle = angle_degrees(&original.final_theta, &approximate.final_theta);
    let diff = (original.heldout_accuracy.unwrap() - approximate.heldout_accuracy.unwrap()).abs();
    Ok(EngineComparison { original, approximate, angle_degrees: angle, accuracy_difference: diff })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Pixel-wise maximum over images.
    #[default]
    Max,
    /// Mean over images (exploratory).
    Mean,
}

/// Normalized partial-gradient-product map over a list of offsets
/// `(dx, dy)` (column, row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialGradMap {
    pub n: usize,
    pub offsets: Vec<(i64, i64)>,
    pub values: Vec<f64>,
}

/// All offsets with `|dx|, |dy| ≤ r`, row-major in `(dy, dx)`.
pub fn offset_square(r: i64) -> Vec<(i64, i64)> {
    (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).collect()
}

/// `max_v |g_v · g_{v+p}|` over base pixels `v` with `v + p` in the grid.
fn image_value(g: &[f64], n: usize, dx: i64, dy: i64) -> f64 {
    let ni = n as i64;
    let mut best = 0.0f64;
    for r in 0.max(-dy)..ni.min(ni - dy) {
        for c in 0.max(-dx)..ni.min(ni - dx) {
            let v = (r * ni + c) as usize;
            let w = ((r + dy) * ni + c + dx) as usize;
            best = best.max((g[v] * g[w]).abs());
        }
    }
    best
}

/// Per image, `value(x, p) = max_v |∂_v f · ∂_{v+p} f|`; images are combined
/// with `aggregation` and the map is normalized to sum to 1.
pub fn partial_grad_map(
    net: &TwoLayerNet,
    images: &[Vec<f64>],
    n: usize,
    offsets: &[(i64, i64)],
    aggregation: Aggregation,
) -> Result<PartialGradMap> {
    if images.is_empty() {
        return Err(MsdaError::Parameter("no images".into()));
    }
    check_len(n * n, net.input_dim())?;
    for &(dx, dy) in offsets {
        if dx.unsigned_abs() as usize >= n || dy.unsigned_abs() as usize >= n {
            return Err(MsdaError::Parameter(format!("offset ({dx},{dy}) leaves no valid base pixel on a {n}x{n} grid")));
        }
    }
    let grads = images.iter().map(|x| net.input_grad(x)).collect::<Result<Vec<_>>>()?;
    let raw: Vec<f64> = offsets
        .iter()
        .map(|&(dx, dy)| {
            let per: Vec<f64> = grads.iter().map(|g| image_value(g, n, dx, dy)).collect();
            match aggregation {
                Aggregation::Max => per.iter().copied().fold(0.0, f64::max),
                Aggregation::Mean => pairwise_mean(&per),
            }
        })
        .collect();
    let total = pairwise_sum(&raw);
    if !(total > 0.0) {
        return Err(MsdaError::DegenerateInput("all partial-gradient products vanish".into()));
    }
    Ok(PartialGradMap { n, offsets: offsets.to_vec(), values: raw.iter().map(|v| v / total).collect() })
}
