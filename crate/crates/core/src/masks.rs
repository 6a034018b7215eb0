//! Mixing masks for every supported family.
//!
//! A mask `M` weighs the first sample: the mixed input is
//! `M ⊙ x_a + (1 − M) ⊙ x_b`. Square grids are flattened row-major; when a
//! formula talks about 1-based pixel `(row, col)` the flat index is
//! `(row − 1)·n + (col − 1)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MsdaError, Result};
use crate::stochastics::{beta_sample, BetaParams, RngStream};

/// Coordinate layout of the mixed inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GridShape {
    Flat { d: usize },
    Square { n: usize },
}

impl GridShape {
    pub fn flat(d: usize) -> Self {
        GridShape::Flat { d }
    }

    pub fn square(n: usize) -> Self {
        GridShape::Square { n }
    }

    pub fn dim(&self) -> usize {
        match *self {
            GridShape::Flat { d } => d,
            GridShape::Square { n } => n * n,
        }
    }

    pub fn side(&self) -> Option<usize> {
        match *self {
            GridShape::Square { n } => Some(n),
            GridShape::Flat { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            GridShape::Flat { d } if d < 1 => Err(MsdaError::Spec("flat shape needs d >= 1".into())),
            GridShape::Square { n } if n < 2 => Err(MsdaError::Spec("square shape needs n >= 2".into())),
            _ => Ok(()),
        }
    }

    /// 1-based `(row, col)` of a flat index on a square grid.
    pub fn pixel(&self, index: usize) -> Option<(usize, usize)> {
        self.side().map(|n| (index / n + 1, index % n + 1))
    }

    /// Flat index of the 1-based pixel `(row, col)`.
    pub fn index(&self, row: usize, col: usize) -> Option<usize> {
        let n = self.side()?;
        if row == 0 || col == 0 || row > n || col > n {
            return None;
        }
        Some((row - 1) * n + (col - 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mixup,
    Cutmix,
    Hmix,
    Gmix,
    Stochastic,
    Bernoulli,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Mixup,
        Method::Cutmix,
        Method::Hmix,
        Method::Gmix,
        Method::Stochastic,
        Method::Bernoulli,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Mixup => "mixup",
            Method::Cutmix => "cutmix",
            Method::Hmix => "hmix",
            Method::Gmix => "gmix",
            Method::Stochastic => "stochastic",
            Method::Bernoulli => "bernoulli",
        }
    }

    pub fn needs_square(&self) -> bool {
        matches!(self, Method::Cutmix | Method::Hmix | Method::Gmix | Method::Stochastic)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = MsdaError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| MsdaError::Spec(format!("unknown method '{s}'")))
    }
}

/// Declarative description of a mixing family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub method: Method,
    pub beta: BetaParams,
    /// HMix box shrink ratio.
    pub r: f64,
    /// Probability that the stochastic family picks its mixup branch.
    pub q: f64,
    pub shape: GridShape,
}

impl MaskSpec {
    pub fn new(method: Method, beta: BetaParams, shape: GridShape) -> Result<Self> {
        let spec = Self { method, beta, r: 0.5, q: 0.5, shape };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_r(mut self, r: f64) -> Result<Self> {
        self.r = r;
        self.validate()?;
        Ok(self)
    }

    pub fn with_q(mut self, q: f64) -> Result<Self> {
        self.q = q;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.beta.validate()?;
        self.shape.validate()?;
        if !(0.0..=1.0).contains(&self.r) {
            return Err(MsdaError::Spec(format!("r must lie in [0,1], got {}", self.r)));
        }
        if !(0.0..=1.0).contains(&self.q) {
            return Err(MsdaError::Spec(format!("q must lie in [0,1], got {}", self.q)));
        }
        if self.method.needs_square() && self.shape.side().is_none() {
            return Err(MsdaError::Spec(format!("{} needs a square grid", self.method)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.shape.dim()
    }

    fn side(&self) -> usize {
        self.shape.side().expect("validated square shape")
    }
}

/// Method-specific record of how a mask was drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Witness {
    /// Nothing random beyond λ (mixup, synthesized masks).
    None,
    /// Zero-based top-left offset `(p_row, p_col)` of the box; it covers
    /// 1-based pixels `p+1 ..= p+s` along each axis.
    BoxOffset { row: usize, col: usize },
    /// Zero-based pixel hosting the Gaussian hole.
    Center { row: usize, col: usize },
    /// Per-coordinate Bernoulli outcomes.
    Bits(Vec<bool>),
    /// The stochastic family took its mixup branch.
    MixupBranch,
}

/// A realized mask together with the λ attached to its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub values: Vec<f64>,
    pub lambda: f64,
    pub shape: GridShape,
    pub witness: Witness,
    /// Side of the zeroed box for cutmix / hmix draws.
    pub box_side: Option<usize>,
}

impl Mask {
    pub fn constant(value: f64, lambda: f64, shape: GridShape) -> Self {
        Mask {
            values: vec![value; shape.dim()],
            lambda,
            shape,
            witness: Witness::None,
            box_side: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `1 − M`, the weight of the second sample.
    pub fn complement_values(&self) -> Vec<f64> {
        self.values.iter().map(|m| 1.0 - m).collect()
    }

    pub fn spatial_mean(&self) -> f64 {
        crate::numeric::pairwise_mean(&self.values)
    }
}

/// `floor(√(1−λ)·n)`, the CutMix box side.
pub fn cutmix_side(lambda: f64, n: usize) -> usize {
    let s = ((1.0 - lambda).max(0.0).sqrt() * n as f64).floor() as usize;
    s.min(n)
}

/// `floor(√(1−λ)·√r·n)`, the HMix box side.
pub fn hmix_side(lambda: f64, r: f64, n: usize) -> usize {
    let s = ((1.0 - lambda).max(0.0).sqrt() * r.sqrt() * n as f64).floor() as usize;
    s.min(n)
}

/// Out-of-box HMix value `λ / (1 − (1−λ)·r)`.
pub fn hmix_outside_value(lambda: f64, r: f64) -> f64 {
    let denom = 1.0 - (1.0 - lambda) * r;
    if denom <= 0.0 {
        // λ = 0 and r = 1: the box covers the whole image.
        1.0
    } else {
        lambda / denom
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MsdaError::Parameter(format!("lambda must lie in [0,1], got {lambda}")));
    }
    Ok(())
}

/// Draws λ ~ Beta(α, β) and then a mask of the requested family.
pub fn sample_mask(rng: &mut RngStream, spec: &MaskSpec) -> Result<Mask> {
    spec.validate()?;
    let lambda = beta_sample(rng, spec.beta)?;
    sample_mask_at(rng, spec, lambda)
}

/// Draws a mask for a fixed λ (only the family's own randomness is used).
pub fn sample_mask_at(rng: &mut RngStream, spec: &MaskSpec, lambda: f64) -> Result<Mask> {
    spec.validate()?;
    check_lambda(lambda)?;
    let witness = match spec.method {
        Method::Mixup => Witness::None,
        Method::Cutmix => {
            let n = spec.side();
            random_offset(rng, n, cutmix_side(lambda, n))
        }
        Method::Hmix => {
            let n = spec.side();
            random_offset(rng, n, hmix_side(lambda, spec.r, n))
        }
        Method::Gmix => {
            let n = spec.side();
            let p = rng.uniform_index(n * n);
            Witness::Center { row: p / n, col: p % n }
        }
        Method::Stochastic => {
            if rng.uniform() < spec.q {
                Witness::MixupBranch
            } else {
                let n = spec.side();
                random_offset(rng, n, cutmix_side(lambda, n))
            }
        }
        Method::Bernoulli => Witness::Bits((0..spec.dim()).map(|_| rng.bernoulli(lambda)).collect()),
    };
    mask_with_witness(spec, lambda, witness)
}

fn random_offset(rng: &mut RngStream, n: usize, s: usize) -> Witness {
    let positions = (n - s).max(1);
    let row = rng.uniform_index(positions);
    let col = rng.uniform_index(positions);
    Witness::BoxOffset { row, col }
}

/// Builds the exact mask the sampler would emit for `lambda` and `witness`.
pub fn mask_with_witness(spec: &MaskSpec, lambda: f64, witness: Witness) -> Result<Mask> {
    spec.validate()?;
    check_lambda(lambda)?;
    let shape = spec.shape;
    match spec.method {
        Method::Mixup => Ok(Mask::constant(lambda, lambda, shape)),
        Method::Cutmix => {
            let n = spec.side();
            boxed_mask(n, cutmix_side(lambda, n), 1.0, lambda, shape, witness)
        }
        Method::Hmix => {
            let n = spec.side();
            let outside = hmix_outside_value(lambda, spec.r);
            boxed_mask(n, hmix_side(lambda, spec.r, n), outside, lambda, shape, witness)
        }
        Method::Gmix => {
            let n = spec.side();
            let (pr, pc) = match witness {
                Witness::Center { row, col } if row < n && col < n => (row, col),
                other => {
                    return Err(MsdaError::Parameter(format!("gmix needs an in-grid center witness, got {other:?}")))
                }
            };
            Ok(gmix_mask(n, lambda, pr, pc, shape))
        }
        Method::Stochastic => match witness {
            Witness::MixupBranch => {
                let mut m = Mask::constant(lambda, lambda, shape);
                m.witness = Witness::MixupBranch;
                Ok(m)
            }
            w @ Witness::BoxOffset { .. } => {
                let n = spec.side();
                boxed_mask(n, cutmix_side(lambda, n), 1.0, lambda, shape, w)
            }
            other => Err(MsdaError::Parameter(format!(
                "stochastic needs a mixup-branch or box-offset witness, got {other:?}"
            ))),
        },
        Method::Bernoulli => match witness {
            Witness::Bits(bits) => {
                if bits.len() != shape.dim() {
                    return Err(MsdaError::Shape { expected: shape.dim(), got: bits.len() });
                }
                let values = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                Ok(Mask { values, lambda, shape, witness: Witness::Bits(bits), box_side: None })
            }
            other => Err(MsdaError::Parameter(format!("bernoulli needs a bit-vector witness, got {other:?}"))),
        },
    }
}

fn boxed_mask(n: usize, s: usize, outside: f64, lambda: f64, shape: GridShape, witness: Witness) -> Result<Mask> {
    let positions = (n - s).max(1);
    let (pr, pc) = match witness {
        Witness::BoxOffset { row, col } if row < positions && col < positions => (row, col),
        other => {
            return Err(MsdaError::Parameter(format!(
                "box offset witness must lie in 0..{positions} per axis, got {other:?}"
            )))
        }
    };
    let mut values = vec![outside; n * n];
    for row in pr..pr + s {
        values[row * n + pc..row * n + pc + s].fill(0.0);
    }
    Ok(Mask {
        values,
        lambda,
        shape,
        witness: Witness::BoxOffset { row: pr, col: pc },
        box_side: Some(s),
    })
}

fn gmix_mask(n: usize, lambda: f64, pr: usize, pc: usize, shape: GridShape) -> Mask {
    let witness = Witness::Center { row: pr, col: pc };
    let spread = 1.0 - lambda;
    if spread <= 0.0 {
        return Mask { values: vec![1.0; n * n], lambda, shape, witness, box_side: None };
    }
    let scale = std::f64::consts::PI / (2.0 * spread * (n * n) as f64);
    let mut values = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let dr = row as f64 - pr as f64;
            let dc = col as f64 - pc as f64;
            values.push(1.0 - (-(dr * dr + dc * dc) * scale).exp());
        }
    }
    Mask { values, lambda, shape, witness, box_side: None }
}

/// Anything that can produce masks: a family with Beta-distributed λ, a
/// family at fixed λ, or a synthesized sampler.
pub trait MaskSource: Sync {
    fn dim(&self) -> usize;
    fn draw(&self, rng: &mut RngStream) -> Result<Mask>;
}

impl MaskSource for MaskSpec {
    fn dim(&self) -> usize {
        self.shape.dim()
    }

    fn draw(&self, rng: &mut RngStream) -> Result<Mask> {
        sample_mask(rng, self)
    }
}

/// A family evaluated at one fixed λ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedLambda {
    pub spec: MaskSpec,
    pub lambda: f64,
}

impl MaskSource for FixedLambda {
    fn dim(&self) -> usize {
        self.spec.shape.dim()
    }

    fn draw(&self, rng: &mut RngStream) -> Result<Mask> {
        sample_mask_at(rng, &self.spec, self.lambda)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(method: Method, shape: GridShape) -> MaskSpec {
        MaskSpec::new(method, BetaParams::new(1.0, 1.0).unwrap(), shape).unwrap()
    }

    #[test]
    fn mixup_mask_is_constant() {
        let s = spec(Method::Mixup, GridShape::square(4));
        let m = mask_with_witness(&s, 0.65, Witness::None).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.65));
        // witness ignored
        let m2 = mask_with_witness(&s, 0.65, Witness::Center { row: 1, col: 1 }).unwrap();
        assert_eq!(m.values, m2.values);
    }

    #[test]
    fn cutmix_side_arithmetic() {
        assert_eq!(cutmix_side(0.65, 64), 37);
        assert_eq!(cutmix_side(0.75, 8), 4);
        assert_eq!(cutmix_side(1.0, 8), 0);
        assert_eq!(cutmix_side(0.0, 8), 8);
    }

    #[test]
    fn cutmix_box_at_origin() {
        let s = spec(Method::Cutmix, GridShape::square(8));
        let m = mask_with_witness(&s, 0.75, Witness::BoxOffset { row: 0, col: 0 }).unwrap();
        assert_eq!(m.box_side, Some(4));
        for row in 1..=8 {
            for col in 1..=8 {
                let v = m.values[s.shape.index(row, col).unwrap()];
                let inside = row <= 4 && col <= 4;
                assert_eq!(v, if inside { 0.0 } else { 1.0 }, "pixel ({row},{col})");
            }
        }
    }

    #[test]
    fn cutmix_sampled_zero_count() {
        let s = spec(Method::Cutmix, GridShape::square(64));
        let mut rng = RngStream::new(11, 0);
        let m = sample_mask_at(&mut rng, &s, 0.65).unwrap();
        assert_eq!(m.values.iter().filter(|&&v| v == 0.0).count(), 37 * 37);
    }

    #[test]
    fn cutmix_offset_out_of_range_is_rejected() {
        let s = spec(Method::Cutmix, GridShape::square(8));
        // s = 4, so offsets live in 0..4
        assert!(mask_with_witness(&s, 0.75, Witness::BoxOffset { row: 4, col: 0 }).is_err());
        assert!(mask_with_witness(&s, 0.75, Witness::None).is_err());
    }

    #[test]
    fn hmix_outside_value_example() {
        let v = hmix_outside_value(0.65, 0.5);
        assert!((v - 0.65 / (1.0 - 0.35 * 0.5)).abs() < 1e-15);
        assert!((v - 0.7879).abs() < 1e-4);
        let s = spec(Method::Hmix, GridShape::square(32)).with_r(0.5).unwrap();
        let m = sample_mask_at(&mut RngStream::new(2, 0), &s, 0.65).unwrap();
        let side = m.box_side.unwrap();
        assert_eq!(side, hmix_side(0.65, 0.5, 32));
        let zeros = m.values.iter().filter(|&&x| x == 0.0).count();
        let outs = m.values.iter().filter(|&&x| x == v).count();
        assert_eq!(zeros, side * side);
        assert_eq!(zeros + outs, 32 * 32);
    }

    #[test]
    fn gmix_center_is_zero_and_limit_is_ones() {
        let s = spec(Method::Gmix, GridShape::square(16));
        let m = mask_with_witness(&s, 0.5, Witness::Center { row: 3, col: 9 }).unwrap();
        assert_eq!(m.values[3 * 16 + 9], 0.0);
        let one = mask_with_witness(&s, 1.0, Witness::Center { row: 3, col: 9 }).unwrap();
        assert!(one.values.iter().all(|&v| v == 1.0));
        assert!(mask_with_witness(&s, 0.5, Witness::Center { row: 16, col: 0 }).is_err());
    }

    #[test]
    fn square_methods_reject_flat_shape() {
        let beta = BetaParams::new(1.0, 1.0).unwrap();
        for m in [Method::Cutmix, Method::Hmix, Method::Gmix, Method::Stochastic] {
            assert!(matches!(MaskSpec::new(m, beta, GridShape::flat(4)), Err(MsdaError::Spec(_))));
        }
        assert!(MaskSpec::new(Method::Bernoulli, beta, GridShape::flat(2)).is_ok());
        assert!(MaskSpec::new(Method::Mixup, beta, GridShape::square(1)).is_err());
        assert!(spec(Method::Hmix, GridShape::square(4)).with_r(1.5).is_err());
        assert!(spec(Method::Stochastic, GridShape::square(4)).with_q(-0.1).is_err());
    }

    #[test]
    fn bernoulli_witness_path() {
        let s = spec(Method::Bernoulli, GridShape::flat(3));
        let m = mask_with_witness(&s, 0.4, Witness::Bits(vec![true, false, true])).unwrap();
        assert_eq!(m.values, vec![1.0, 0.0, 1.0]);
        assert!(mask_with_witness(&s, 0.4, Witness::Bits(vec![true])).is_err());
    }

    #[test]
    fn method_parsing() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("fmix".parse::<Method>().is_err());
    }

    #[test]
    fn pixel_index_roundtrip() {
        let g = GridShape::square(5);
        for i in 0..25 {
            let (r, c) = g.pixel(i).unwrap();
            assert_eq!(g.index(r, c), Some(i));
        }
        assert_eq!(g.index(0, 1), None);
        assert_eq!(GridShape::flat(3).pixel(0), None);
    }
}
