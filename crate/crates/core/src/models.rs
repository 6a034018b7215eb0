//! Predictors `f_θ` and the loss family `l(θ, z) = h(f_θ(x)) − y·f_θ(x)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, MsdaError, Result};
use crate::masks::Mask;
use crate::stochastics::RngStream;

/// A twice-differentiable link `h` with its derivatives.
pub trait LossFamily: Sync + Send {
    fn name(&self) -> &'static str;
    fn h(&self, f: f64) -> f64;
    fn h1(&self, f: f64) -> f64;
    fn h2(&self, f: f64) -> f64;

    /// Third derivative; defaults to a central difference of `h2` with step
    /// `1e-5`.
    fn h3(&self, f: f64) -> f64 {
        const STEP: f64 = 1e-5;
        (self.h2(f + STEP) - self.h2(f - STEP)) / (2.0 * STEP)
    }

    /// `h(f) − y·f`.
    fn point_loss(&self, f: f64, y: f64) -> f64 {
        self.h(f) - y * f
    }
}

/// `h(f) = log(1 + eᶠ)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Logistic;

pub fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

impl LossFamily for Logistic {
    fn name(&self) -> &'static str {
        "logistic"
    }

    fn h(&self, f: f64) -> f64 {
        if f > 0.0 {
            f + (-f).exp().ln_1p()
        } else {
            f.exp().ln_1p()
        }
    }

    fn h1(&self, f: f64) -> f64 {
        sigmoid(f)
    }

    fn h2(&self, f: f64) -> f64 {
        let s = sigmoid(f);
        s * (1.0 - s)
    }

    fn h3(&self, f: f64) -> f64 {
        let s = sigmoid(f);
        s * (1.0 - s) * (1.0 - 2.0 * s)
    }

    fn point_loss(&self, f: f64, y: f64) -> f64 {
        if f > 0.0 {
            (1.0 - y) * f + (-f).exp().ln_1p()
        } else {
            f.exp().ln_1p() - y * f
        }
    }
}

/// A scalar predictor of a feature vector.
pub trait Predictor: Sync {
    fn input_dim(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Result<f64>;
    fn input_grad(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// Row-major Hessian in the input; `None` where it vanishes identically
    /// (linear and piecewise-linear predictors).
    fn input_hessian(&self, x: &[f64]) -> Result<Option<Vec<f64>>>;
}

/// `f(x) = θᵀx + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmModel {
    pub theta: Vec<f64>,
    pub bias: f64,
}

impl GlmModel {
    pub fn new(theta: Vec<f64>, bias: f64) -> Result<Self> {
        if theta.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
            return Err(MsdaError::Parameter("model parameters must be finite".into()));
        }
        Ok(Self { theta, bias })
    }

    pub fn zeros(d: usize) -> Self {
        Self { theta: vec![0.0; d], bias: 0.0 }
    }

    /// Parameters flattened as `(θ, bias)`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.theta.clone();
        p.push(self.bias);
        p
    }

    pub fn from_params(p: &[f64]) -> Result<Self> {
        if p.is_empty() {
            return Err(MsdaError::Parameter("parameter vector is empty".into()));
        }
        let (theta, bias) = p.split_at(p.len() - 1);
        Self::new(theta.to_vec(), bias[0])
    }
}

pub fn glm_predict(m: &GlmModel, x: &[f64]) -> Result<f64> {
    check_len(m.theta.len(), x.len())?;
    Ok(m.theta.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + m.bias)
}

impl Predictor for GlmModel {
    fn input_dim(&self) -> usize {
        self.theta.len()
    }

    fn predict(&self, x: &[f64]) -> Result<f64> {
        glm_predict(self, x)
    }

    fn input_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.theta.len(), x.len())?;
        Ok(self.theta.clone())
    }

    fn input_hessian(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        check_len(self.theta.len(), x.len())?;
        Ok(None)
    }
}

/// `f(x) = θ₁ᵀ relu(W x) + θ₀` with `W` stored as `hidden` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoLayerNet {
    pub w: Vec<Vec<f64>>,
    pub theta1: Vec<f64>,
    pub theta0: f64,
}

fn relu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

impl TwoLayerNet {
    pub fn new(w: Vec<Vec<f64>>, theta1: Vec<f64>, theta0: f64) -> Result<Self> {
        if w.is_empty() {
            return Err(MsdaError::Parameter("hidden width must be at least 1".into()));
        }
        check_len(w.len(), theta1.len())?;
        let d = w[0].len();
        for row in &w {
            check_len(d, row.len())?;
        }
        let finite = w.iter().flatten().chain(&theta1).all(|v| v.is_finite()) && theta0.is_finite();
        if !finite {
            return Err(MsdaError::Parameter("network parameters must be finite".into()));
        }
        Ok(Self { w, theta1, theta0 })
    }

    /// Gaussian weights: `W ∼ N(0, 1/input)`, `θ₁ ∼ N(0, 1/hidden)`, `θ₀ ∼ N(0, 1)`.
    pub fn random(input: usize, hidden: usize, rng: &mut RngStream) -> Result<Self> {
        if input == 0 {
            return Err(MsdaError::Parameter("input width must be at least 1".into()));
        }
        let ws = (1.0 / input as f64).sqrt();
        let w = (0..hidden)
            .map(|_| (0..input).map(|_| ws * rng.normal()).collect())
            .collect();
        let ts = (1.0 / hidden.max(1) as f64).sqrt();
        let theta1 = (0..hidden).map(|_| ts * rng.normal()).collect();
        let theta0 = rng.normal();
        Self::new(w, theta1, theta0)
    }

    pub fn hidden(&self) -> usize {
        self.w.len()
    }

    /// Pre-activations `W x`.
    pub fn pre_activations(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.input_dim(), x.len())?;
        Ok(self.w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect())
    }

    /// `∂f/∂W_hk = θ₁_h · relu'(z_h) · x_k`, as `hidden` rows.
    pub fn layer1_grad(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let z = self.pre_activations(x)?;
        Ok(z.iter()
            .zip(&self.theta1)
            .map(|(&zh, &t)| {
                let g = t * relu_grad(zh);
                x.iter().map(|&xk| g * xk).collect()
            })
            .collect())
    }
}

impl Predictor for TwoLayerNet {
    fn input_dim(&self) -> usize {
        self.w[0].len()
    }

    fn predict(&self, x: &[f64]) -> Result<f64> {
        let z = self.pre_activations(x)?;
        Ok(z.iter().zip(&self.theta1).map(|(&zh, &t)| t * zh.max(0.0)).sum::<f64>() + self.theta0)
    }

    fn input_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.pre_activations(x)?;
        let mut g = vec![0.0; x.len()];
        for ((row, &zh), &t) in self.w.iter().zip(&z).zip(&self.theta1) {
            let back = t * relu_grad(zh);
            if back != 0.0 {
                for (gk, &wk) in g.iter_mut().zip(row) {
                    *gk += back * wk;
                }
            }
        }
        Ok(g)
    }

    fn input_hessian(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        check_len(self.input_dim(), x.len())?;
        Ok(None)
    }
}

pub fn net_predict(net: &TwoLayerNet, x: &[f64]) -> Result<f64> {
    net.predict(x)
}

pub fn net_input_grad(net: &TwoLayerNet, x: &[f64]) -> Result<Vec<f64>> {
    net.input_grad(x)
}

pub fn net_layer1_grad(net: &TwoLayerNet, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    net.layer1_grad(x)
}

/// Minimum `|W x|_h` for the identity check to be trusted.
pub const KINK_MARGIN: f64 = 1e-6;
pub const KINK_RESAMPLES: usize = 100;

/// Both sides of `((1−M)⊙∇ₓf)ᵀx = tr((∂f/∂W)ᵀ · W · diag(1−M))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatnessCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub abs_diff: f64,
}

/// Evaluates the identity at `x`; fails if a pre-activation is within
/// [`KINK_MARGIN`] of zero.
pub fn flatness_identity_check(net: &TwoLayerNet, x: &[f64], mask: &Mask) -> Result<FlatnessCheck> {
    check_len(net.input_dim(), mask.values.len())?;
    let z = net.pre_activations(x)?;
    if z.iter().any(|v| v.abs() < KINK_MARGIN) {
        return Err(MsdaError::DegenerateInput("input lies on a ReLU kink".into()));
    }
    let u = mask.complement_values();

    let grad = net.input_grad(x)?;
    let lhs: f64 = grad.iter().zip(&u).zip(x).map(|((g, u), x)| u * g * x).sum();

    // tr(Gᵀ B) = Σ_hk G_hk B_hk with B = W diag(1−M)
    let g1 = net.layer1_grad(x)?;
    let rhs: f64 = g1
        .iter()
        .zip(&net.w)
        .map(|(grow, wrow)| {
            grow.iter()
                .zip(wrow)
                .zip(&u)
                .map(|((g, w), u)| g * w * u)
                .sum::<f64>()
        })
        .sum();
    Ok(FlatnessCheck { lhs, rhs, abs_diff: (lhs - rhs).abs() })
}

/// Like [`flatness_identity_check`], drawing `x` from `sample_x` and
/// redrawing up to [`KINK_RESAMPLES`] times when it lands near a kink.
pub fn flatness_identity_check_sampled(
    net: &TwoLayerNet,
    mask: &Mask,
    rng: &mut RngStream,
    mut sample_x: impl FnMut(&mut RngStream) -> Vec<f64>,
) -> Result<(Vec<f64>, FlatnessCheck)> {
    for _ in 0..=KINK_RESAMPLES {
        let x = sample_x(rng);
        match flatness_identity_check(net, &x, mask) {
            Ok(c) => return Ok((x, c)),
            Err(MsdaError::DegenerateInput(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(MsdaError::DegenerateInput(format!(
        "every input stayed within {KINK_MARGIN:e} of a ReLU kink after {KINK_RESAMPLES} resamples"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{GridShape, Witness};
    use proptest::prelude::*;

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], k: usize) -> f64 {
        let h = 1e-5 * x[k].abs().max(1.0);
        let mut p = x.to_vec();
        let mut m = x.to_vec();
        p[k] += h;
        m[k] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn glm_examples() {
        assert_eq!(glm_predict(&GlmModel::zeros(3), &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        let m = GlmModel::new(vec![1.0, -1.0], 0.0).unwrap();
        assert_eq!(glm_predict(&m, &[3.0, 1.0]).unwrap(), 2.0);
        let m = GlmModel::new(vec![1.0, 0.0], 5.0).unwrap();
        assert_eq!(glm_predict(&m, &[0.0, 0.0]).unwrap(), 5.0);
        assert!(glm_predict(&m, &[0.0]).is_err());
    }

    #[test]
    fn point_loss_examples() {
        let l = Logistic;
        assert!((l.point_loss(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((l.point_loss(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let v = l.point_loss(50.0, 1.0);
        assert!(v >= 0.0 && v < 1e-20, "{v}");
        assert!(l.point_loss(-800.0, 0.0) < 1e-300);
        assert!(l.point_loss(800.0, 0.0).is_finite());
    }

    #[test]
    fn logistic_derivatives_match_finite_differences() {
        let l = Logistic;
        for i in -40..=40 {
            let f = i as f64 * 0.2;
            let fd1 = central_diff(|v| l.h(v[0]), &[f], 0);
            let fd2 = central_diff(|v| l.h1(v[0]), &[f], 0);
            let fd3 = central_diff(|v| l.h2(v[0]), &[f], 0);
            assert!(rel_err(l.h1(f), fd1) <= 1e-6, "h' at {f}");
            assert!(rel_err(l.h2(f), fd2) <= 1e-6, "h'' at {f}");
            assert!((l.h3(f) - fd3).abs() <= 1e-8, "h''' at {f}");
            assert!(l.h2(f) >= 0.0);
        }
    }

    /// A family relying on the default finite-difference third derivative.
    struct Quartic;
    impl LossFamily for Quartic {
        fn name(&self) -> &'static str {
            "quartic"
        }
        fn h(&self, f: f64) -> f64 {
            f.powi(4) / 12.0
        }
        fn h1(&self, f: f64) -> f64 {
            f.powi(3) / 3.0
        }
        fn h2(&self, f: f64) -> f64 {
            f * f
        }
    }

    #[test]
    fn default_third_derivative() {
        assert!((Quartic.h3(1.5) - 3.0).abs() < 1e-8);
        assert_eq!(Quartic.point_loss(0.0, 1.0), 0.0);
    }

    #[test]
    fn identity_net_examples() {
        let net = TwoLayerNet::new(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]], vec![1.0; 3], 0.0)
            .unwrap();
        let x = [0.5, 1.5, 2.0];
        assert_eq!(net.predict(&x).unwrap(), 4.0);
        assert_eq!(net.input_grad(&x).unwrap(), vec![1.0; 3]);
        let net = TwoLayerNet { theta0: 0.7, ..net };
        assert_eq!(net.predict(&[0.0; 3]).unwrap(), 0.7);
    }

    #[test]
    fn net_validation() {
        assert!(TwoLayerNet::new(vec![], vec![], 0.0).is_err());
        assert!(TwoLayerNet::new(vec![vec![1.0]], vec![1.0, 2.0], 0.0).is_err());
        assert!(TwoLayerNet::new(vec![vec![1.0], vec![1.0, 2.0]], vec![1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn flatness_all_ones_mask_is_zero() {
        let mut rng = RngStream::new(3, 0);
        let net = TwoLayerNet::random(6, 5, &mut rng).unwrap();
        let mask = Mask::constant(1.0, 1.0, GridShape::flat(6));
        let (_, c) = flatness_identity_check_sampled(&net, &mask, &mut rng, |r| (0..6).map(|_| r.normal()).collect())
            .unwrap();
        assert_eq!(c.lhs, 0.0);
        assert_eq!(c.rhs, 0.0);
    }

    #[test]
    fn flatness_linear_regime_hand_expansion() {
        let d = 4;
        let w = (0..d).map(|i| (0..d).map(|k| if i == k { 1.0 } else { 0.0 }).collect()).collect();
        let theta1 = vec![0.5, -1.0, 2.0, 0.25];
        let net = TwoLayerNet::new(w, theta1.clone(), 0.0).unwrap();
        let x = [1.0, 2.0, 0.5, 3.0];
        let mask = Mask {
            values: vec![0.2, 1.0, 0.0, 0.6],
            lambda: 0.5,
            shape: GridShape::flat(d),
            witness: Witness::None,
            box_side: None,
        };
        let c = flatness_identity_check(&net, &x, &mask).unwrap();
        let want: f64 = (0..d).map(|k| (1.0 - mask.values[k]) * theta1[k] * x[k]).sum();
        assert!((c.lhs - want).abs() < 1e-14);
        assert!(c.abs_diff < 1e-14);
    }

    #[test]
    fn kink_inputs_are_rejected() {
        let net = TwoLayerNet::new(vec![vec![1.0, -1.0]], vec![1.0], 0.0).unwrap();
        let mask = Mask::constant(0.5, 0.5, GridShape::flat(2));
        assert!(matches!(
            flatness_identity_check(&net, &[1.0, 1.0], &mask),
            Err(MsdaError::DegenerateInput(_))
        ));
        let mut rng = RngStream::new(0, 0);
        assert!(matches!(
            flatness_identity_check_sampled(&net, &mask, &mut rng, |_| vec![2.0, 2.0]),
            Err(MsdaError::DegenerateInput(_))
        ));
    }

    #[test]
    fn model_json_round_trip() {
        let mut rng = RngStream::new(8, 0);
        let net = TwoLayerNet::random(3, 2, &mut rng).unwrap();
        let s = serde_json::to_string(&net).unwrap();
        assert!(s.contains("\"w\":[["));
        let back: TwoLayerNet = serde_json::from_str(&s).unwrap();
        assert_eq!(back, net);
        let glm = GlmModel::new(vec![1.25, -5.0], 0.5).unwrap();
        let back: GlmModel = serde_json::from_str(&serde_json::to_string(&glm).unwrap()).unwrap();
        assert_eq!(back, glm);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn net_gradients_match_finite_differences(seed in any::<u64>(), input in 1usize..8, hidden in 1usize..8) {
            let mut rng = RngStream::new(seed, 0);
            let net = TwoLayerNet::random(input, hidden, &mut rng).unwrap();
            let x: Vec<f64> = (0..input).map(|_| rng.normal()).collect();
            let z = net.pre_activations(&x).unwrap();
            // finite differences are only valid away from kinks
            let h = 1e-5 * x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let row_norm = net.w.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
            prop_assume!(z.iter().all(|v| v.abs() > 10.0 * h * row_norm));
            let g = net.input_grad(&x).unwrap();
            for k in 0..input {
                let fd = central_diff(|v| net.predict(v).unwrap(), &x, k);
                prop_assert!(rel_err(g[k], fd) <= 1e-5 || (g[k] - fd).abs() < 1e-9, "k={} {} vs {}", k, g[k], fd);
            }
            let g1 = net.layer1_grad(&x).unwrap();
            for hi in 0..hidden {
                for k in 0..input {
                    let mut p = net.clone();
                    let mut m = net.clone();
                    let step = 1e-5 * net.w[hi][k].abs().max(1.0);
                    p.w[hi][k] += step;
                    m.w[hi][k] -= step;
                    let fd = (p.predict(&x).unwrap() - m.predict(&x).unwrap()) / (2.0 * step);
                    prop_assert!(rel_err(g1[hi][k], fd) <= 1e-5 || (g1[hi][k] - fd).abs() < 1e-9);
                }
            }
        }
    }
}
