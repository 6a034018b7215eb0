use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use msda_core::coefficients::{
    coeff_closed_matrix, coeff_monte_carlo, offset_heatmap, GmixForm, Heatmap, HeatmapMode, PairSelection,
};
use msda_core::experiments::{
    compare_engines, offset_square, partial_grad_map, train_sgd, two_moons, Aggregation, Engine, TrainConfig,
};
use msda_core::io::{atomic_write, format_f64, matrix_csv, parse_square_csv, Pgm};
use msda_core::losses::center_dataset;
use msda_core::masks::{sample_mask, sample_mask_at, FixedLambda, GridShape, MaskSpec, Method};
use msda_core::mixer::{mix_extrapolate, mix_pair, Sample};
use msda_core::models::TwoLayerNet;
use msda_core::stochastics::{BetaParams, RngStream};
use msda_core::synthesis::{synthesize_mask_sampler, verify_sampler, TargetSpec};
use msda_core::MsdaError;

#[derive(Parser, Debug)]
#[command(name = "msda", version, about = "Mixed-sample data augmentation masks, coefficients and experiments")]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample one mask and write it as a PGM image.
    GenMask(GenMaskArgs),
    /// Mix two PGM images with a sampled mask.
    Mix(MixArgs),
    /// Regularization coefficients as a matrix or offset map.
    Coeff(CoeffArgs),
    /// Offset-averaged coefficient map.
    Heatmap(HeatmapArgs),
    /// Build a sampler for a target coefficient matrix and verify it.
    SynthMask(SynthArgs),
    /// Train logistic regression on two moons under either loss engine.
    TwoMoons(TwoMoonsArgs),
    /// Partial-gradient-product map of a random two-layer network.
    Partialgrad(PartialGradArgs),
}

#[derive(Args, Debug, Clone)]
struct MaskArgs {
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// HMix box ratio.
    #[arg(long, default_value_t = 0.5)]
    r: f64,
    /// Probability of the mixup branch of the stochastic family.
    #[arg(long, default_value_t = 0.5)]
    q: f64,
}

impl MaskArgs {
    fn spec(&self, shape: GridShape) -> Result<MaskSpec, MsdaError> {
        MaskSpec::new(self.method, BetaParams::new(self.alpha, self.beta)?, shape)?
            .with_r(self.r)?
            .with_q(self.q)
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
struct GenMaskArgs {
    #[command(flatten)]
    mask: MaskArgs,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// Fix λ instead of drawing it.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the exact mask values as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Plain-text P2 instead of binary P5.
    #[arg(long)]
    ascii: bool,
}

#[derive(Args, Debug)]
struct MixArgs {
    #[command(flatten)]
    mask: MaskArgs,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<f64>,
    /// Constant-weight combination with λ allowed outside [0, 1].
    #[arg(long)]
    extrapolate: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ascii: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Closed,
    Mc,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Pairs {
    Full,
    Offsets,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum GmixFormArg {
    Continuum,
    Grid,
}

impl From<GmixFormArg> for GmixForm {
    fn from(g: GmixFormArg) -> Self {
        match g {
            GmixFormArg::Continuum => GmixForm::Continuum,
            GmixFormArg::Grid => GmixForm::GridSum,
        }
    }
}

#[derive(Args, Debug)]
struct CoeffArgs {
    #[command(flatten)]
    mask: MaskArgs,
    #[arg(long)]
    lambda: f64,
    #[arg(long)]
    n: usize,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long, default_value_t = 200_000)]
    samples: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Pairs::Full)]
    pairs: Pairs,
    /// GMix closed form to evaluate.
    #[arg(long, value_enum, default_value_t = GmixFormArg::Continuum)]
    gmix_form: GmixFormArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[command(flatten)]
    mask: MaskArgs,
    #[arg(long)]
    lambda: f64,
    #[arg(long)]
    n: usize,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = GmixFormArg::Continuum)]
    gmix_form: GmixFormArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Square CSV with the target coefficients.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    lambda: f64,
    #[arg(long)]
    samples: usize,
    #[arg(long)]
    seed: u64,
    /// Eigenvalue tolerance for the PSD check.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum EngineArg {
    Original,
    Approximate,
    Both,
}

#[derive(Args, Debug)]
struct TwoMoonsArgs {
    #[arg(long, value_enum)]
    engine: EngineArg,
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Training points.
    #[arg(long, default_value_t = 200)]
    m: usize,
    /// Held-out points.
    #[arg(long, default_value_t = 1000)]
    heldout: usize,
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 2000)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Mini-batch size (full batch when omitted).
    #[arg(long)]
    batch: Option<usize>,
    /// Draws for the exact loss at the final parameters.
    #[arg(long, default_value_t = 100_000)]
    eval_draws: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
    /// Per-epoch training loss as CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum AggregationArg {
    Max,
    Mean,
}

#[derive(Args, Debug)]
struct PartialGradArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    hidden: usize,
    #[arg(long)]
    seed: u64,
    /// `R` for offsets in −R..=R on both axes, or `LO:HI`.
    #[arg(long, allow_hyphen_values = true)]
    offsets: String,
    #[arg(long, default_value_t = 32)]
    images: usize,
    #[arg(long, value_enum, default_value_t = AggregationArg::Max)]
    aggregation: AggregationArg,
    #[arg(long)]
    out: PathBuf,
}

/// Usage problems detected after argument parsing.
fn usage(msg: impl Into<String>) -> MsdaError {
    MsdaError::Parameter(msg.into())
}

fn exit_code(e: &MsdaError) -> u8 {
    match e {
        MsdaError::Numerical(_)
        | MsdaError::NotPsd { .. }
        | MsdaError::NotSymmetric(_)
        | MsdaError::Precondition(_)
        | MsdaError::DegenerateInput(_)
        | MsdaError::Divergence { .. }
        | MsdaError::UnsupportedMoment(_) => 2,
        _ => 1,
    }
}

fn require_seed(seed: Option<u64>, what: &str) -> Result<u64, MsdaError> {
    seed.ok_or_else(|| usage(format!("--seed is required for {what}")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), MsdaError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

fn read_pgm(path: &Path) -> Result<Pgm, MsdaError> {
    Pgm::decode(&std::fs::read(path)?)
}

fn heatmap_csv(h: &Heatmap) -> String {
    let mut out = String::from("dx,dy,value\n");
    for (dx, dy, v) in h.rows() {
        out.push_str(&format!("{dx},{dy},{}\n", format_f64(v)));
    }
    out
}

fn gen_mask(a: &GenMaskArgs) -> Result<(), MsdaError> {
    let spec = a.mask.spec(GridShape::square(a.n))?;
    let mut rng = RngStream::new(a.seed, 0);
    let mask = match a.lambda {
        Some(l) => sample_mask_at(&mut rng, &spec, l)?,
        None => sample_mask(&mut rng, &spec)?,
    };
    let pgm = Pgm::from_unit(&mask.values, a.n, a.n)?;
    atomic_write(&a.out, &pgm.encode(a.ascii))?;
    if let Some(csv) = &a.csv {
        atomic_write(csv, matrix_csv(&mask.values, a.n, a.n)?.as_bytes())?;
    }
    Ok(())
}

fn mix(a: &MixArgs) -> Result<(), MsdaError> {
    let (pa, pb) = (read_pgm(&a.a)?, read_pgm(&a.b)?);
    if (pa.width, pa.height) != (pb.width, pb.height) {
        return Err(usage(format!(
            "image sizes differ: {}x{} vs {}x{}",
            pa.width, pa.height, pb.width, pb.height
        )));
    }
    let sa = Sample::new(pa.to_unit(), vec![1.0, 0.0]);
    let sb = Sample::new(pb.to_unit(), vec![0.0, 1.0]);
    let mixed = if a.extrapolate {
        let l = a.lambda.ok_or_else(|| usage("--extrapolate needs --lambda"))?;
        mix_extrapolate(&sa, &sb, l)?
    } else {
        if pa.width != pa.height {
            return Err(usage("mask mixing needs square images"));
        }
        let spec = a.mask.spec(GridShape::square(pa.width))?;
        let mut rng = RngStream::new(require_seed(a.seed, "mask sampling")?, 0);
        let mask = match a.lambda {
            Some(l) => sample_mask_at(&mut rng, &spec, l)?,
            None => sample_mask(&mut rng, &spec)?,
        };
        mix_pair(&sa, &sb, &mask)?
    };
    let out = Pgm::from_unit(&mixed.x, pa.width, pa.height)?;
    atomic_write(&a.out, &out.encode(a.ascii))
}

fn coeff(a: &CoeffArgs) -> Result<(), MsdaError> {
    let shape = GridShape::square(a.n);
    let spec = a.mask.spec(shape)?;
    let text = match a.pairs {
        Pairs::Full => {
            let d = shape.dim();
            let m = match a.mode {
                Mode::Closed => coeff_closed_matrix(&spec, a.lambda, &PairSelection::Full, a.gmix_form.into())?,
                Mode::Mc => {
                    let rng = RngStream::new(require_seed(a.seed, "--mode mc")?, 0);
                    let src = FixedLambda { spec, lambda: a.lambda };
                    coeff_monte_carlo(&rng, &src, Some(a.lambda), a.samples, &PairSelection::Full)?
                }
            };
            matrix_csv(&m.to_dense().expect("full matrix"), d, d)?
        }
        Pairs::Offsets => heatmap_csv(&heatmap_for(&spec, a.lambda, a.mode, a.samples, a.seed, a.gmix_form)?),
    };
    atomic_write(&a.out, text.as_bytes())
}

fn heatmap_for(
    spec: &MaskSpec,
    lambda: f64,
    mode: Mode,
    samples: usize,
    seed: Option<u64>,
    form: GmixFormArg,
) -> Result<Heatmap, MsdaError> {
    match mode {
        Mode::Closed => offset_heatmap(spec, lambda, HeatmapMode::Closed(form.into())),
        Mode::Mc => {
            let rng = RngStream::new(require_seed(seed, "--mode mc")?, 0);
            offset_heatmap(spec, lambda, HeatmapMode::MonteCarlo { rng: &rng, samples })
        }
    }
}

fn heatmap(a: &HeatmapArgs) -> Result<(), MsdaError> {
    let spec = a.mask.spec(GridShape::square(a.n))?;
    let h = heatmap_for(&spec, a.lambda, a.mode, a.samples, a.seed, a.gmix_form)?;
    atomic_write(&a.out, heatmap_csv(&h).as_bytes())
}

#[derive(Serialize)]
struct SynthConfig<'a> {
    target: &'a Path,
    lambda: f64,
    samples: usize,
    seed: u64,
    tol: Option<f64>,
}

#[derive(Serialize)]
struct SynthReport<'a> {
    config: SynthConfig<'a>,
    verification: msda_core::synthesis::VerificationReport,
}

fn synth_mask(a: &SynthArgs) -> Result<(), MsdaError> {
    let (d, values) = parse_square_csv(&std::fs::read_to_string(&a.target)?)?;
    let target = TargetSpec::new(a.lambda, d, values)?;
    let sampler = synthesize_mask_sampler(&target, a.tol)?;
    let verification = verify_sampler(&RngStream::new(a.seed, 0), &sampler, a.samples)?;
    let report = SynthReport {
        config: SynthConfig { target: &a.target, lambda: a.lambda, samples: a.samples, seed: a.seed, tol: a.tol },
        verification,
    };
    write_json(&a.report, &report)
}

#[derive(Serialize)]
struct MoonsConfig {
    m: usize,
    heldout: usize,
    noise: f64,
    seed: u64,
    train: TrainConfig,
}

#[derive(Serialize)]
struct MoonsReport<T: Serialize> {
    config: MoonsConfig,
    result: T,
}

fn curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, v) in curve.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, format_f64(*v)));
    }
    out
}

fn two_moons_cmd(a: &TwoMoonsArgs) -> Result<(), MsdaError> {
    if !matches!(a.method, Method::Mixup | Method::Bernoulli) {
        return Err(usage("two-moons supports --method mixup or bernoulli"));
    }
    let spec = MaskSpec::new(a.method, BetaParams::new(a.alpha, a.beta)?, GridShape::flat(2))?;
    let train = two_moons(a.m, a.noise, &mut RngStream::new(a.seed, 10))?;
    let held = two_moons(a.heldout, a.noise, &mut RngStream::new(a.seed, 11))?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch: a.batch,
        engine: Engine::Original,
        spec,
        seed: a.seed,
        eval_draws: a.eval_draws,
    };
    let config = |train: TrainConfig| MoonsConfig { m: a.m, heldout: a.heldout, noise: a.noise, seed: a.seed, train };
    match a.engine {
        EngineArg::Both => {
            let c = compare_engines(&train, &held, &cfg)?;
            if let Some(path) = &a.curve {
                let mut out = String::from("epoch,original,approximate\n");
                for (i, (o, p)) in c.original.train_loss_curve.iter().zip(&c.approximate.train_loss_curve).enumerate() {
                    out.push_str(&format!("{},{},{}\n", i + 1, format_f64(*o), format_f64(*p)));
                }
                atomic_write(path, out.as_bytes())?;
            }
            write_json(&a.report, &MoonsReport { config: config(cfg), result: c })
        }
        EngineArg::Original | EngineArg::Approximate => {
            let engine = if a.engine == EngineArg::Original { Engine::Original } else { Engine::Approximate };
            let cfg = TrainConfig { engine, ..cfg };
            let centered = center_dataset(&train)?;
            let held = held.shifted(&train.mean)?;
            let r = train_sgd(&centered, Some(&held), &cfg)?;
            if let Some(path) = &a.curve {
                atomic_write(path, curve_csv(&r.train_loss_curve).as_bytes())?;
            }
            write_json(&a.report, &MoonsReport { config: config(cfg), result: r })
        }
    }
}

fn parse_offsets(s: &str) -> Result<Vec<(i64, i64)>, MsdaError> {
    let bad = || usage(format!("--offsets expects R or LO:HI, got '{s}'"));
    if let Some((lo, hi)) = s.split_once(':') {
        let lo: i64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: i64 = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        Ok((lo..=hi).flat_map(|dy| (lo..=hi).map(move |dx| (dx, dy))).collect())
    } else {
        let r: i64 = s.trim().parse().map_err(|_| bad())?;
        if r < 0 {
            return Err(bad());
        }
        Ok(offset_square(r))
    }
}

fn partialgrad(a: &PartialGradArgs) -> Result<(), MsdaError> {
    let offsets = parse_offsets(&a.offsets)?;
    if a.n == 0 || a.images == 0 {
        return Err(usage("--n and --images must be positive"));
    }
    let d = a.n * a.n;
    let net = TwoLayerNet::random(d, a.hidden, &mut RngStream::new(a.seed, 0))?;
    let mut rng = RngStream::new(a.seed, 1);
    let images: Vec<Vec<f64>> = (0..a.images).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
    let agg = match a.aggregation {
        AggregationArg::Max => Aggregation::Max,
        AggregationArg::Mean => Aggregation::Mean,
    };
    let map = partial_grad_map(&net, &images, a.n, &offsets, agg)?;
    let mut out = String::from("dx,dy,value\n");
    for (&(dx, dy), v) in map.offsets.iter().zip(&map.values) {
        out.push_str(&format!("{dx},{dy},{}\n", format_f64(*v)));
    }
    atomic_write(&a.out, out.as_bytes())
}

fn run(cli: &Cli) -> Result<(), MsdaError> {
    match &cli.command {
        Command::GenMask(a) => gen_mask(a),
        Command::Mix(a) => mix(a),
        Command::Coeff(a) => coeff(a),
        Command::Heatmap(a) => heatmap(a),
        Command::SynthMask(a) => synth_mask(a),
        Command::TwoMoons(a) => two_moons_cmd(a),
        Command::Partialgrad(a) => partialgrad(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
