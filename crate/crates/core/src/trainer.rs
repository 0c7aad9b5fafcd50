//! Weighted least-squares fit of object vectors to log co-occurrence counts.
//!
//! For every stored cell `X_ij` the model predicts
//! `o_i . c_j + b_i + bc_j ~ log X_ij`, where `o`/`b` are the main vectors and
//! biases and `c`/`bc` the context ones. Each cell's squared residual is
//! scaled by the clipped power weight [`weight_fn`]. Parameters are fitted
//! with per-parameter adaptive steps (AdaGrad).

use std::cell::Cell;
use std::fmt;
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cooccur::CooccurTable;
use crate::error::{Error, Result};

/// Added to the accumulated squared gradient before the square root.
pub const ADAGRAD_EPSILON: f64 = 1e-8;

/// Which parameters make up the published embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputMode {
    /// Main plus context vectors.
    #[default]
    SumMainContext,
    MainOnly,
}

impl FromStr for OutputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "sum" | "sum-main-context" => Ok(OutputMode::SumMainContext),
            "main" | "main-only" => Ok(OutputMode::MainOnly),
            other => Err(Error::Config(format!("unknown output mode {other:?}"))),
        }
    }
}

impl fmt::Display for OutputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputMode::SumMainContext => "sum",
            OutputMode::MainOnly => "main",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub x_max: f64,
    pub alpha: f64,
    pub initial_step: f64,
    pub epochs: usize,
    pub seed: u64,
    pub output_mode: OutputMode,
    /// 1 is the deterministic reference mode. More threads update shared
    /// parameters without locking and give up bit-reproducibility.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 50,
            x_max: 100.0,
            alpha: 0.75,
            initial_step: 0.05,
            epochs: 50,
            seed: 0,
            output_mode: OutputMode::SumMainContext,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 {
            return fail("dim must be at least 1");
        }
        if !(self.x_max > 0.0 && self.x_max.is_finite()) {
            return fail("x_max must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return fail("alpha must lie in (0, 1]");
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return fail("initial step must be positive");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.threads == 0 {
            return fail("threads must be at least 1");
        }
        Ok(())
    }
}

/// Clipped power weight: `(x / x_max)^alpha` below `x_max`, 1 from there on.
pub fn weight_fn(x: f64, x_max: f64, alpha: f64) -> f64 {
    if x < x_max {
        (x / x_max).powf(alpha)
    } else {
        1.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Weighted squared residual of one cell.
pub fn pair_loss(
    main: &[f64],
    context: &[f64],
    main_bias: f64,
    context_bias: f64,
    x: f64,
    x_max: f64,
    alpha: f64,
) -> Result<f64> {
    let diff = dot(main, context) + main_bias + context_bias - x.ln();
    let loss = weight_fn(x, x_max, alpha) * diff * diff;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!("non-finite pair loss for X={x}")))
    }
}

/// Gradients of [`pair_loss`] with the constant factor 2 dropped; the step
/// size absorbs it.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGradients {
    pub main: Vec<f64>,
    pub context: Vec<f64>,
    pub main_bias: f64,
    pub context_bias: f64,
}

pub fn pair_gradients(
    main: &[f64],
    context: &[f64],
    main_bias: f64,
    context_bias: f64,
    x: f64,
    x_max: f64,
    alpha: f64,
) -> PairGradients {
    let diff = dot(main, context) + main_bias + context_bias - x.ln();
    let g = weight_fn(x, x_max, alpha) * diff;
    PairGradients {
        main: context.iter().map(|c| g * c).collect(),
        context: main.iter().map(|o| g * o).collect(),
        main_bias: g,
        context_bias: g,
    }
}

/// Fitted parameters and their AdaGrad accumulators.
///
/// Both are stored flat as `[main (V*d) | context (V*d) | main bias (V) |
/// context bias (V)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    vocab_size: usize,
    dim: usize,
    values: Vec<f64>,
    grad_sq: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    v: usize,
    d: usize,
}

impl Layout {
    fn main(self, i: usize) -> usize {
        i * self.d
    }
    fn context(self, j: usize) -> usize {
        (self.v + j) * self.d
    }
    fn main_bias(self, i: usize) -> usize {
        2 * self.v * self.d + i
    }
    fn context_bias(self, j: usize) -> usize {
        2 * self.v * self.d + self.v + j
    }
    fn len(self) -> usize {
        2 * self.v * (self.d + 1)
    }
}

impl ModelParams {
    /// Seeded uniform init in `(-0.5/d, 0.5/d)` for vectors and biases.
    pub fn init(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let layout = Layout {
            v: vocab_size,
            d: dim,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = 0.5 / dim as f64;
        let dist = Uniform::new(-half, half);
        let values = (0..layout.len()).map(|_| dist.sample(&mut rng)).collect();
        ModelParams {
            vocab_size,
            dim,
            values,
            grad_sq: vec![0.0; layout.len()],
        }
    }

    /// Builds parameters from explicit blocks; accumulators start at zero.
    pub fn from_parts(
        vocab_size: usize,
        dim: usize,
        main: Vec<f64>,
        context: Vec<f64>,
        main_bias: Vec<f64>,
        context_bias: Vec<f64>,
    ) -> Result<Self> {
        let vd = vocab_size * dim;
        if main.len() != vd
            || context.len() != vd
            || main_bias.len() != vocab_size
            || context_bias.len() != vocab_size
        {
            return Err(Error::Data("parameter block sizes do not match V and d".into()));
        }
        let mut values = main;
        values.extend(context);
        values.extend(main_bias);
        values.extend(context_bias);
        let n = values.len();
        Ok(ModelParams {
            vocab_size,
            dim,
            values,
            grad_sq: vec![0.0; n],
        })
    }

    fn layout(&self) -> Layout {
        Layout {
            v: self.vocab_size,
            d: self.dim,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn main(&self, i: usize) -> &[f64] {
        let o = self.layout().main(i);
        &self.values[o..o + self.dim]
    }

    pub fn context(&self, j: usize) -> &[f64] {
        let o = self.layout().context(j);
        &self.values[o..o + self.dim]
    }

    pub fn main_bias(&self, i: usize) -> f64 {
        self.values[self.layout().main_bias(i)]
    }

    pub fn context_bias(&self, j: usize) -> f64 {
        self.values[self.layout().context_bias(j)]
    }

    /// Same model with the main and context roles exchanged.
    pub fn swapped(&self) -> Self {
        let l = self.layout();
        let vd = l.v * l.d;
        let swap = |buf: &[f64]| {
            let mut out = Vec::with_capacity(buf.len());
            out.extend_from_slice(&buf[vd..2 * vd]);
            out.extend_from_slice(&buf[..vd]);
            out.extend_from_slice(&buf[2 * vd + l.v..]);
            out.extend_from_slice(&buf[2 * vd..2 * vd + l.v]);
            out
        };
        ModelParams {
            vocab_size: self.vocab_size,
            dim: self.dim,
            values: swap(&self.values),
            grad_sq: swap(&self.grad_sq),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().chain(&self.grad_sq).all(|v| v.is_finite())
    }

    /// Total objective over the stored cells of `table`.
    pub fn objective(&self, table: &CooccurTable, x_max: f64, alpha: f64) -> Result<f64> {
        table.records().try_fold(0.0, |acc, r| {
            let (i, j) = (r.i as usize, r.j as usize);
            Ok(acc
                + pair_loss(
                    self.main(i),
                    self.context(j),
                    self.main_bias(i),
                    self.context_bias(j),
                    r.weight,
                    x_max,
                    alpha,
                )?)
        })
    }
}

/// Row-major `V x d` embedding from trained parameters.
pub fn finalize(params: &ModelParams, mode: OutputMode) -> Vec<f64> {
    let vd = params.vocab_size * params.dim;
    let main = &params.values[..vd];
    match mode {
        OutputMode::MainOnly => main.to_vec(),
        OutputMode::SumMainContext => main
            .iter()
            .zip(&params.values[vd..2 * vd])
            .map(|(o, c)| o + c)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean weighted squared error per epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
    pub wall_time: Duration,
    pub entries_processed: u64,
}

/// Shared-access parameter storage used by the update kernel.
trait Slots {
    fn get(&self, k: usize) -> f64;
    fn set(&self, k: usize, v: f64);
}

impl Slots for [Cell<f64>] {
    #[inline]
    fn get(&self, k: usize) -> f64 {
        self[k].get()
    }
    #[inline]
    fn set(&self, k: usize, v: f64) {
        self[k].set(v)
    }
}

impl Slots for [AtomicU64] {
    #[inline]
    fn get(&self, k: usize) -> f64 {
        f64::from_bits(self[k].load(Ordering::Relaxed))
    }
    #[inline]
    fn set(&self, k: usize, v: f64) {
        self[k].store(v.to_bits(), Ordering::Relaxed)
    }
}

#[derive(Clone, Copy)]
struct Cell3 {
    i: u32,
    j: u32,
    x: f64,
}

#[derive(Clone, Copy)]
struct StepSettings {
    x_max: f64,
    alpha: f64,
    eta: f64,
}

/// One AdaGrad step on a single cell. Returns the pre-update pair loss.
fn update_cell<S: Slots + ?Sized>(vals: &S, sq: &S, l: Layout, c: Cell3, s: StepSettings) -> f64 {
    let (i, j) = (c.i as usize, c.j as usize);
    let (mo, co) = (l.main(i), l.context(j));
    let (mb, cb) = (l.main_bias(i), l.context_bias(j));
    let mut pred = vals.get(mb) + vals.get(cb);
    for k in 0..l.d {
        pred += vals.get(mo + k) * vals.get(co + k);
    }
    let diff = pred - c.x.ln();
    let g = weight_fn(c.x, s.x_max, s.alpha) * diff;
    let loss = g * diff;
    if !loss.is_finite() {
        return loss;
    }
    let step = |idx: usize, grad: f64| {
        let acc = sq.get(idx) + grad * grad;
        sq.set(idx, acc);
        vals.set(idx, vals.get(idx) - s.eta * grad / (acc + ADAGRAD_EPSILON).sqrt());
    };
    for k in 0..l.d {
        let o = vals.get(mo + k);
        let cv = vals.get(co + k);
        step(mo + k, g * cv);
        step(co + k, g * o);
    }
    step(mb, g);
    step(cb, g);
    loss
}

fn run_chunk<S: Slots + ?Sized>(
    vals: &S,
    sq: &S,
    l: Layout,
    cells: &[Cell3],
    order: &[u32],
    s: StepSettings,
    epoch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for &k in order {
        let c = cells[k as usize];
        let loss = update_cell(vals, sq, l, c, s);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became non-finite in epoch {} at entry ({}, {})",
                epoch + 1,
                c.i,
                c.j
            )));
        }
        total += loss;
    }
    Ok(total)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Wall clock for reports; reads zero where the platform has no clock.
struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    fn start() -> Self {
        Stopwatch(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn elapsed(&self) -> Duration {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed();
        #[cfg(target_arch = "wasm32")]
        return Duration::ZERO;
    }
}

/// Trains from a fresh seeded initialization.
pub fn train(table: &CooccurTable, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    let mut params = ModelParams::init(table.vocab_size(), cfg.dim, cfg.seed);
    let report = train_epochs(table, cfg, &mut params, 0, |_, _| Ok(()))?;
    Ok((params, report))
}

/// Runs epochs `start_epoch..cfg.epochs` on `params`, calling `on_epoch` with
/// the 1-based epoch number after each one.
///
/// Visit order for an epoch depends only on the seed and the epoch index, so
/// resuming from a checkpoint reproduces an uninterrupted single-threaded run.
pub fn train_epochs<F>(
    table: &CooccurTable,
    cfg: &TrainConfig,
    params: &mut ModelParams,
    start_epoch: usize,
    mut on_epoch: F,
) -> Result<TrainReport>
where
    F: FnMut(usize, &ModelParams) -> Result<()>,
{
    cfg.validate()?;
    if table.is_empty() {
        return Err(Error::Data("co-occurrence table is empty".into()));
    }
    if table.vocab_size() < 2 {
        return Err(Error::Data("training needs at least two classes".into()));
    }
    if params.vocab_size != table.vocab_size() || params.dim != cfg.dim {
        return Err(Error::Data(format!(
            "parameters are {}x{}, table/config need {}x{}",
            params.vocab_size,
            params.dim,
            table.vocab_size(),
            cfg.dim
        )));
    }

    let started = Stopwatch::start();
    let cells: Vec<Cell3> = table
        .records()
        .map(|r| Cell3 {
            i: r.i,
            j: r.j,
            x: r.weight,
        })
        .collect();
    let layout = params.layout();
    let settings = StepSettings {
        x_max: cfg.x_max,
        alpha: cfg.alpha,
        eta: cfg.initial_step,
    };
    let mut order: Vec<u32> = (0..cells.len() as u32).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs.saturating_sub(start_epoch));
    let mut processed = 0u64;

    for epoch in start_epoch..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));

        let total = if cfg.threads <= 1 {
            let ModelParams { values, grad_sq, .. } = params;
            let vals = Cell::from_mut(values.as_mut_slice()).as_slice_of_cells();
            let sq = Cell::from_mut(grad_sq.as_mut_slice()).as_slice_of_cells();
            run_chunk(vals, sq, layout, &cells, &order, settings, epoch)?
        } else {
            let to_atomic = |v: &[f64]| v.iter().map(|x| AtomicU64::new(x.to_bits())).collect::<Vec<_>>();
            let vals = to_atomic(&params.values);
            let sq = to_atomic(&params.grad_sq);
            let chunk = order.len().div_ceil(cfg.threads);
            let results: Vec<Result<f64>> = std::thread::scope(|scope| {
                let handles: Vec<_> = order
                    .chunks(chunk)
                    .map(|part| {
                        let (vals, sq, cells) = (vals.as_slice(), sq.as_slice(), cells.as_slice());
                        scope.spawn(move || run_chunk(vals, sq, layout, cells, part, settings, epoch))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("training worker panicked"))
                    .collect()
            });
            let total = results.into_iter().try_fold(0.0, |acc, r| r.map(|x| acc + x))?;
            let from_atomic =
                |v: Vec<AtomicU64>| v.into_iter().map(|a| f64::from_bits(a.into_inner())).collect();
            params.values = from_atomic(vals);
            params.grad_sq = from_atomic(sq);
            total
        };

        processed += cells.len() as u64;
        epoch_losses.push(total / cells.len() as f64);
        on_epoch(epoch + 1, params)?;
    }

    Ok(TrainReport {
        epoch_losses,
        wall_time: started.elapsed(),
        entries_processed: processed,
    })
}

/// Full resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub params: ModelParams,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SCNCKPT1";

impl Checkpoint {
    /// Little-endian layout: magic, config echo (dim, x_max, alpha, step,
    /// epochs, seed, output mode, threads), epochs done, V, then parameter
    /// values and accumulators as f64 blocks.
    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        let c = &self.config;
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [c.dim as u64, c.epochs as u64, c.seed, c.threads as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in [c.x_max, c.alpha, c.initial_step] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[match c.output_mode {
            OutputMode::SumMainContext => 0,
            OutputMode::MainOnly => 1,
        }])?;
        w.write_all(&(self.epochs_done as u64).to_le_bytes())?;
        w.write_all(&(self.params.vocab_size as u64).to_le_bytes())?;
        for v in self.params.values.iter().chain(&self.params.grad_sq) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::format("checkpoint", m);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| bad(&e.to_string()))?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u = [0u64; 4];
        for v in &mut u {
            *v = u64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        let mut f = [0f64; 3];
        for v in &mut f {
            *v = f64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        let output_mode = match take(1)?[0] {
            0 => OutputMode::SumMainContext,
            1 => OutputMode::MainOnly,
            t => return Err(bad(&format!("unknown output mode tag {t}"))),
        };
        let epochs_done = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let vocab_size = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let config = TrainConfig {
            dim: u[0] as usize,
            epochs: u[1] as usize,
            seed: u[2],
            threads: u[3] as usize,
            x_max: f[0],
            alpha: f[1],
            initial_step: f[2],
            output_mode,
        };
        let layout = Layout {
            v: vocab_size,
            d: config.dim,
        };
        let n = layout.len();
        let body = take(2 * n * 8)?;
        let floats: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if take(1).is_ok() {
            return Err(bad("trailing bytes"));
        }
        let (values, grad_sq) = floats.split_at(n);
        Ok(Checkpoint {
            config,
            epochs_done,
            params: ModelParams {
                vocab_size,
                dim: layout.d,
                values: values.to_vec(),
                grad_sq: grad_sq.to_vec(),
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file))
    }
}
