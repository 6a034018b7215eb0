//! Seedable random streams and the distributions the mixing framework
//! needs: Beta(α, β), the label-conjugate mixture D̃, and standard normals.
//!
//! The generator is ChaCha20 (`rand_chacha`), seeded from a 64-bit seed with
//! the 64-bit stream id selecting the ChaCha stream. The keystream is
//! specified bit-for-bit, so a `(seed, stream_id)` pair yields the same draws
//! on every platform.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Open01, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{MsdaError, Result};

/// A single-owner deterministic random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// An independent child stream. Depends only on `(seed, stream_id, index)`,
    /// not on how many draws the parent has made.
    pub fn substream(&self, index: u64) -> RngStream {
        let child_seed = splitmix64(self.seed ^ splitmix64(self.stream_id ^ 0xA5A5_5A5A_C3C3_3C3C));
        RngStream::new(child_seed, index)
    }

    /// Uniform on [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform on the open interval (0, 1).
    #[inline]
    pub fn uniform_open(&mut self) -> f64 {
        Open01.sample(&mut self.rng)
    }

    /// Uniform integer in `0..n`.
    #[inline]
    pub fn uniform_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "uniform_index over an empty range");
        self.rng.random_range(0..n)
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.uniform_index(i + 1);
            p.swap(i, j);
        }
        p
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Parameters of a Beta(α, β) distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let p = Self { alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite() && self.beta > 0.0 && self.beta.is_finite()) {
            return Err(MsdaError::Parameter(format!(
                "Beta parameters must be positive and finite, got alpha={}, beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        beta_pdf(self.alpha, self.beta, x)
    }

    /// The two components of D̃ and their weights:
    /// `(α/(α+β), Beta(α+1, β))` and `(β/(α+β), Beta(β+1, α))`.
    pub fn tilde_components(&self) -> [(f64, BetaParams); 2] {
        let s = self.alpha + self.beta;
        [
            (self.alpha / s, BetaParams { alpha: self.alpha + 1.0, beta: self.beta }),
            (self.beta / s, BetaParams { alpha: self.beta + 1.0, beta: self.alpha }),
        ]
    }

    /// Density of the mixture D̃ at `x`.
    pub fn tilde_pdf(&self, x: f64) -> f64 {
        self.tilde_components().iter().map(|(w, c)| w * c.pdf(x)).sum()
    }
}

fn beta_pdf(a: f64, b: f64, x: f64) -> f64 {
    if !(x > 0.0 && x < 1.0) {
        return 0.0;
    }
    let ln_norm = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b);
    (ln_norm + (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p()).exp()
}

/// Gamma(shape, 1) by Marsaglia–Tsang; shapes below one are boosted with
/// `G(shape) = G(shape + 1) · U^(1/shape)`.
pub fn gamma_sample(rng: &mut RngStream, shape: f64) -> f64 {
    if shape < 1.0 {
        let g = gamma_sample(rng, shape + 1.0);
        let u = rng.uniform_open();
        return g * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let z = rng.normal();
        let v = 1.0 + c * z;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = rng.uniform_open();
        let z2 = z * z;
        if u < 1.0 - 0.0331 * z2 * z2 {
            return d * v;
        }
        if u.ln() < 0.5 * z2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// A draw from Beta(α, β) as `X / (X + Y)` with independent Gamma draws.
pub fn beta_sample(rng: &mut RngStream, p: BetaParams) -> Result<f64> {
    p.validate()?;
    Ok(beta_sample_unchecked(rng, p))
}

pub(crate) fn beta_sample_unchecked(rng: &mut RngStream, p: BetaParams) -> f64 {
    loop {
        let x = gamma_sample(rng, p.alpha);
        let y = gamma_sample(rng, p.beta);
        let s = x + y;
        if s > 0.0 {
            let v = x / s;
            // Both endpoints can only appear through underflow for tiny shapes.
            if v > 0.0 && v < 1.0 {
                return v;
            }
        }
    }
}

/// A draw from D̃ = α/(α+β)·Beta(α+1, β) + β/(α+β)·Beta(β+1, α).
pub fn tilde_lambda_sample(rng: &mut RngStream, p: BetaParams) -> Result<f64> {
    p.validate()?;
    let [(w1, c1), (_, c2)] = p.tilde_components();
    let comp = if rng.uniform() < w1 { c1 } else { c2 };
    Ok(beta_sample_unchecked(rng, comp))
}

/// Exact `E_{λ∼D̃}[(1−λ)^k]` for `k ∈ {1, 2}`.
pub fn tilde_lambda_moment(p: BetaParams, k: u32) -> Result<f64> {
    p.validate()?;
    if !(k == 1 || k == 2) {
        return Err(MsdaError::UnsupportedMoment(k));
    }
    // For Beta(a, b), 1−λ ~ Beta(b, a): E[(1−λ)] = b/(a+b), E[(1−λ)²] = b(b+1)/((a+b)(a+b+1)).
    let moment = |c: BetaParams| {
        let (a, b) = (c.alpha, c.beta);
        match k {
            1 => b / (a + b),
            _ => b * (b + 1.0) / ((a + b) * (a + b + 1.0)),
        }
    };
    Ok(p.tilde_components().iter().map(|&(w, c)| w * moment(c)).sum())
}

/// `d` independent standard normal draws.
pub fn std_normal_vector(rng: &mut RngStream, d: usize) -> Result<Vec<f64>> {
    if d == 0 {
        return Err(MsdaError::Parameter("normal vector length must be at least 1".into()));
    }
    Ok((0..d).map(|_| rng.normal()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_repeat() {
        let mut a = RngStream::new(42, 3);
        let mut b = RngStream::new(42, 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = RngStream::new(42, 0);
        let mut b = RngStream::new(42, 1);
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn substream_ignores_parent_position() {
        let parent = RngStream::new(9, 2);
        let mut advanced = parent.clone();
        for _ in 0..17 {
            advanced.next_u64();
        }
        let mut s1 = parent.substream(5);
        let mut s2 = advanced.substream(5);
        assert_eq!(s1.next_u64(), s2.next_u64());
        let mut s3 = parent.substream(6);
        assert_ne!(parent.substream(5).next_u64(), s3.next_u64());
    }

    #[test]
    fn beta_rejects_bad_params() {
        let mut rng = RngStream::new(1, 0);
        assert!(matches!(
            beta_sample(&mut rng, BetaParams { alpha: 0.0, beta: 1.0 }),
            Err(MsdaError::Parameter(_))
        ));
        assert!(BetaParams::new(1.0, -2.0).is_err());
        assert!(BetaParams::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn tilde_weights_are_half_for_symmetric_params() {
        let p = BetaParams::new(2.5, 2.5).unwrap();
        let [(w1, _), (w2, _)] = p.tilde_components();
        assert_eq!(w1, 0.5);
        assert_eq!(w2, 0.5);
    }

    #[test]
    fn tilde_moments_closed_form() {
        let p = BetaParams::new(1.0, 1.0).unwrap();
        assert!((tilde_lambda_moment(p, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((tilde_lambda_moment(p, 2).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert!(matches!(tilde_lambda_moment(p, 3), Err(MsdaError::UnsupportedMoment(3))));
        for (a, b) in [(0.25, 0.25), (1.0, 3.0), (2.0, 0.5), (7.0, 7.0)] {
            let p = BetaParams::new(a, b).unwrap();
            let m1 = tilde_lambda_moment(p, 1).unwrap();
            let m2 = tilde_lambda_moment(p, 2).unwrap();
            assert!(m2 >= m1 * m1, "Jensen violated for ({a},{b})");
            // simplified closed forms
            let s = a + b;
            assert!((m1 - 2.0 * a * b / (s * (s + 1.0))).abs() < 1e-14);
            assert!((m2 - a * b / (s * (s + 1.0))).abs() < 1e-14);
        }
    }

    #[test]
    fn pdfs_integrate_to_one() {
        let rule = crate::numeric::gauss_legendre(64);
        for (a, b) in [(1.0, 1.0), (2.0, 5.0), (3.0, 4.0)] {
            let p = BetaParams::new(a, b).unwrap();
            let z = crate::numeric::integrate_gl(|x| p.pdf(x), 0.0, 1.0, &rule);
            assert!((z - 1.0).abs() < 1e-8, "Beta({a},{b}) integrates to {z}");
            let zt = crate::numeric::integrate_gl(|x| p.tilde_pdf(x), 0.0, 1.0, &rule);
            assert!((zt - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn normal_vector_shape_and_determinism() {
        let mut rng = RngStream::new(5, 0);
        assert_eq!(std_normal_vector(&mut rng, 3).unwrap().len(), 3);
        assert!(std_normal_vector(&mut rng, 0).is_err());
        let a = std_normal_vector(&mut RngStream::new(5, 1), 8).unwrap();
        let b = std_normal_vector(&mut RngStream::new(5, 1), 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut rng = RngStream::new(3, 0);
        let mut p = rng.permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
