//! AttentionDrop: stochastic perturbations of attention logits.
//!
//! * Hard masking multiplies each row's top-k logits by independent
//!   Bernoulli(1 - p) masks. A masked logit becomes exactly `0.0`, not
//!   `-inf`, so the position keeps `e^0` softmax mass.
//! * Blur smoothing convolves each logit row with a normalised Gaussian
//!   kernel whose width `sigma ~ U(0, sigma_max)` is drawn once per batch
//!   and snapped to the nearest row of a precomputed [`GaussianKernelTable`].
//!   Rows are zero padded, so edge logits lose mass.
//! * Consistency training runs two independently perturbed passes and adds
//!   `lambda * KL(softmax(Z1) || softmax(Z2))` to the task loss.
//!
//! With `training = false` every variant reduces to `softmax_rows(L)`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor, Var};

/// Below this width the Gaussian kernel is replaced by its delta limit.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Default resolution of the precomputed kernel table.
pub const DEFAULT_TABLE_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    None,
    HardMask,
    BlurSmooth,
}

/// How the blur kernel is applied to the `N x N` logit map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlurMode {
    /// Each query row convolved with the 1D kernel.
    #[default]
    Row,
    /// Rows then columns (separable 2D blur).
    Separable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropConfig {
    pub variant: Variant,
    /// Drop probability for top-k logits.
    pub p: f64,
    pub k: usize,
    pub sigma_max: f64,
    /// Kernel width, odd.
    pub w: usize,
    /// Kernel table resolution.
    pub steps: usize,
    pub blur_mode: BlurMode,
    pub lambda: f64,
    /// Wrap the variant in two-pass KL consistency training.
    pub consistency: bool,
    pub seed: u64,
}

impl Default for DropConfig {
    fn default() -> Self {
        DropConfig {
            variant: Variant::None,
            p: 0.1,
            k: 3,
            sigma_max: 0.5,
            w: 5,
            steps: DEFAULT_TABLE_STEPS,
            blur_mode: BlurMode::Row,
            lambda: 0.5,
            consistency: false,
            seed: 0,
        }
    }
}

impl DropConfig {
    pub fn baseline() -> Self {
        Self::default()
    }

    pub fn hard_mask(p: f64, k: usize) -> Self {
        DropConfig {
            variant: Variant::HardMask,
            p,
            k,
            ..Self::default()
        }
    }

    pub fn blur(sigma_max: f64, w: usize) -> Self {
        DropConfig {
            variant: Variant::BlurSmooth,
            sigma_max,
            w,
            ..Self::default()
        }
    }

    pub fn with_consistency(mut self, lambda: f64) -> Self {
        self.consistency = true;
        self.lambda = lambda;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// True when a forward pass under this config can differ from the clean model.
    pub fn perturbs(&self) -> bool {
        self.variant != Variant::None
    }

    /// Checks ranges against a sequence length `n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.p) {
            return err(format!("drop.p must lie in [0, 1], got {}", self.p));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return err(format!("drop.lambda must be finite and >= 0, got {}", self.lambda));
        }
        match self.variant {
            Variant::HardMask if self.k == 0 || self.k > n => {
                err(format!("drop.k must lie in [1, {n}], got {}", self.k))
            }
            Variant::BlurSmooth if self.w % 2 == 0 || self.w > n => {
                err(format!("drop.w must be odd and at most {n}, got {}", self.w))
            }
            Variant::BlurSmooth if !(self.sigma_max > 0.0 && self.sigma_max.is_finite()) => {
                err(format!("drop.sigma_max must be positive, got {}", self.sigma_max))
            }
            Variant::BlurSmooth if self.steps == 0 => err("drop.steps must be positive".into()),
            _ => Ok(()),
        }
    }

    /// Kernel table for the blur variant, `None` otherwise.
    pub fn kernel_table(&self) -> Result<Option<GaussianKernelTable>> {
        match self.variant {
            Variant::BlurSmooth => Ok(Some(GaussianKernelTable::new(self.w, self.sigma_max, self.steps)?)),
            _ => Ok(None),
        }
    }
}

// ---------------------------------------------------------------------------
// Top-k selection and hard masking

#[derive(PartialEq)]
struct Ranked {
    value: f64,
    index: usize,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    // "Greater" means worse: smaller value, or equal value with larger index.
    // The heap top is therefore the weakest of the kept entries.
    fn cmp(&self, other: &Self) -> Ordering {
        other.value.total_cmp(&self.value).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Indices of the `k` largest entries of `row`, best first. Ties go to the
/// smaller index. Runs in `O(n log k)` with a bounded heap.
pub fn topk_indices(row: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > row.len() {
        return Err(Error::Parameter(format!(
            "top-k needs 1 <= k <= {}, got k = {k}",
            row.len()
        )));
    }
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for (index, &value) in row.iter().enumerate() {
        heap.push(Ranked { value, index });
        if heap.len() > k {
            heap.pop();
        }
    }
    Ok(heap.into_sorted_vec().into_iter().map(|r| r.index).collect())
}

/// Per-row top-k positions and the constant factors (0 or 1) applied to them.
#[derive(Clone, Debug, PartialEq)]
pub struct TopKMask {
    pub k: usize,
    /// `k` column indices per row, rows in row-major order.
    pub indices: Vec<usize>,
    /// Mask value `M_ij` for each entry of `indices`.
    pub factors: Vec<f64>,
}

impl TopKMask {
    /// Computes the top-k sets of `logits` and asks `keep(row, rank)` for each
    /// mask bit.
    pub fn with_keep(logits: &Tensor, k: usize, mut keep: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let n = logits.last_dim();
        if k == 0 || k > n {
            return Err(Error::Parameter(format!("hard mask needs 1 <= k <= N = {n}, got {k}")));
        }
        let rows = logits.numel() / n;
        let mut indices = Vec::with_capacity(rows * k);
        let mut factors = Vec::with_capacity(rows * k);
        for (r, row) in logits.rows().enumerate() {
            for (rank, j) in topk_indices(row, k)?.into_iter().enumerate() {
                indices.push(j);
                factors.push(if keep(r, rank) { 1.0 } else { 0.0 });
            }
        }
        Ok(TopKMask { k, indices, factors })
    }

    /// Draws `M ~ Bernoulli(1 - p)` for every top-k entry, row-major over
    /// `(b, h, i)` and in descending-logit order within a row.
    pub fn sample(logits: &Tensor, p: f64, k: usize, rng: &mut RngStream) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Parameter(format!("drop probability {p} outside [0, 1]")));
        }
        Self::with_keep(logits, k, |_, _| rng.keep(p))
    }

    /// `L'` on the graph: top-k logits scaled by the mask, others untouched.
    pub fn apply(&self, g: &mut Graph, logits: Var) -> Result<Var> {
        g.scatter_mul_last_dim(logits, &self.indices, &self.factors, self.k)
    }
}

/// Hard attention masking: returns `A' = softmax(L')`.
pub fn hard_mask(g: &mut Graph, logits: Var, p: f64, k: usize, rng: &mut RngStream, training: bool) -> Result<Var> {
    let n = g.value(logits).last_dim();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("hard mask needs 1 <= k <= N = {n}, got {k}")));
    }
    if !training {
        return g.softmax_rows(logits);
    }
    let mask = TopKMask::sample(g.value(logits), p, k, rng)?;
    let masked = mask.apply(g, logits)?;
    g.softmax_rows(masked)
}

// ---------------------------------------------------------------------------
// Gaussian kernels and blur smoothing

/// Normalised Gaussian of odd width `w`, centred on the middle tap.
///
/// Only the left half and centre are evaluated; the right half is mirrored,
/// so the result is exactly symmetric.
pub fn gaussian_kernel_1d(w: usize, sigma: f64) -> Result<Vec<f64>> {
    if w == 0 || w % 2 == 0 {
        return Err(Error::Parameter(format!("kernel width must be odd and positive, got {w}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("kernel sigma must be finite and >= 0, got {sigma}")));
    }
    let c = w / 2;
    let mut kernel = vec![0.0; w];
    if sigma < SIGMA_FLOOR {
        kernel[c] = 1.0;
        return Ok(kernel);
    }
    for j in 0..=c {
        let x = (c - j) as f64;
        kernel[j] = (-0.5 * (x / sigma) * (x / sigma)).exp();
        kernel[w - 1 - j] = kernel[j];
    }
    // Pairwise from the tails inward so the sum is itself symmetric.
    let total = (0..c).map(|j| kernel[j] + kernel[w - 1 - j]).sum::<f64>() + kernel[c];
    kernel.iter_mut().for_each(|v| *v /= total);
    Ok(kernel)
}

/// Kernels for `steps` widths evenly spaced on `[0, sigma_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianKernelTable {
    pub w: usize,
    pub sigma_max: f64,
    pub steps: usize,
    pub sigmas: Vec<f64>,
    pub kernels: Vec<Vec<f64>>,
}

impl GaussianKernelTable {
    pub fn new(w: usize, sigma_max: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("kernel table needs at least one step".into()));
        }
        if !(sigma_max > 0.0 && sigma_max.is_finite()) {
            return Err(Error::Parameter(format!("sigma_max must be positive, got {sigma_max}")));
        }
        let sigmas: Vec<f64> = if steps == 1 {
            vec![0.0]
        } else {
            (0..steps).map(|i| sigma_max * i as f64 / (steps - 1) as f64).collect()
        };
        let kernels = sigmas
            .iter()
            .map(|&s| gaussian_kernel_1d(w, s))
            .collect::<Result<_>>()?;
        Ok(GaussianKernelTable {
            w,
            sigma_max,
            steps,
            sigmas,
            kernels,
        })
    }

    /// Row whose sigma is closest to `sigma`; ties resolve to the smaller row.
    pub fn nearest_index(&self, sigma: f64) -> usize {
        let mut best = 0;
        for (i, s) in self.sigmas.iter().enumerate() {
            if (s - sigma).abs() < (self.sigmas[best] - sigma).abs() {
                best = i;
            }
        }
        best
    }

    pub fn kernel(&self, index: usize) -> &[f64] {
        &self.kernels[index]
    }

    /// Draws `sigma ~ U(0, sigma_max)` and returns the nearest row.
    pub fn sample_index(&self, rng: &mut RngStream) -> usize {
        self.nearest_index(rng.uniform_range(0.0, self.sigma_max))
    }

    /// Structural checks, used after deserialising.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("kernel table: {m}")));
        if self.w == 0 || self.w % 2 == 0 {
            return err(format!("width {} is not odd", self.w));
        }
        if self.steps == 0 || self.sigmas.len() != self.steps || self.kernels.len() != self.steps {
            return err(format!(
                "steps = {} but {} sigmas and {} kernels",
                self.steps,
                self.sigmas.len(),
                self.kernels.len()
            ));
        }
        if self.sigmas.windows(2).any(|p| p[0] > p[1]) {
            return err("sigmas are not increasing".into());
        }
        for (i, k) in self.kernels.iter().enumerate() {
            let total: f64 = k.iter().sum();
            if k.len() != self.w || (total - 1.0).abs() > 1e-12 {
                return err(format!("row {i} has {} taps summing to {total}", k.len()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let table: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        table.validate()?;
        Ok(table)
    }
}

/// Smoothed logits `L''` (pre-softmax).
pub fn blur_logits(g: &mut Graph, logits: Var, kernel: &[f64], mode: BlurMode) -> Result<Var> {
    let n = g.value(logits).last_dim();
    if kernel.len() > n {
        return Err(Error::Parameter(format!(
            "blur kernel width {} exceeds sequence length {n}",
            kernel.len()
        )));
    }
    let rows = g.conv_rows(logits, kernel)?;
    match mode {
        BlurMode::Row => Ok(rows),
        BlurMode::Separable => {
            let t = g.transpose_last2(rows)?;
            let cols = g.conv_rows(t, kernel)?;
            g.transpose_last2(cols)
        }
    }
}

/// Blurred attention smoothing: returns `A'' = softmax(G_sigma * L)`.
pub fn blur_smooth(
    g: &mut Graph,
    logits: Var,
    table: &GaussianKernelTable,
    mode: BlurMode,
    rng: &mut RngStream,
    training: bool,
) -> Result<Var> {
    let n = g.value(logits).last_dim();
    if table.w > n {
        return Err(Error::Parameter(format!(
            "blur kernel width {} exceeds sequence length {n}",
            table.w
        )));
    }
    if !training {
        return g.softmax_rows(logits);
    }
    let idx = table.sample_index(rng);
    let smoothed = blur_logits(g, logits, table.kernel(idx), mode)?;
    g.softmax_rows(smoothed)
}

// ---------------------------------------------------------------------------
// Consistency objective

/// Mean over the batch of `KL(softmax(Z1) || softmax(Z2))`, in log space.
/// Gradients flow into both arguments.
pub fn consistency_loss(g: &mut Graph, z1: Var, z2: Var) -> Result<Var> {
    let (s1, s2) = (g.shape(z1).to_vec(), g.shape(z2).to_vec());
    if s1 != s2 || s1.len() != 2 {
        return Err(Error::shape("consistency_loss", &s1, &s2));
    }
    if s1[1] < 2 {
        return Err(Error::Parameter(format!("consistency loss needs >= 2 classes, got {}", s1[1])));
    }
    let lp1 = g.log_softmax_rows(z1)?;
    let lp2 = g.log_softmax_rows(z2)?;
    let p1 = g.exp(lp1);
    let diff = g.sub(lp1, lp2)?;
    let terms = g.mul(p1, diff)?;
    let total = g.sum(terms);
    Ok(g.scale(total, 1.0 / s1[0] as f64))
}

/// `task + lambda * cons`.
pub fn total_loss(g: &mut Graph, task: Var, cons: Var, lambda: f64) -> Result<Var> {
    for v in [task, cons] {
        let t = g.value(v);
        if t.numel() != 1 || !t.is_finite() {
            return Err(Error::Contract(format!(
                "total_loss needs finite scalars, got shape {:?}",
                t.shape()
            )));
        }
    }
    let weighted = g.scale(cons, lambda);
    g.add(task, weighted)
}

// ---------------------------------------------------------------------------
// Dispatch with recordable draws

/// Random choices made by one perturbed attention sublayer.
#[derive(Clone, Debug, PartialEq)]
pub enum Draw {
    Mask(TopKMask),
    Sigma(usize),
}

enum Source<'a> {
    Clean,
    Sample { rng: &'a mut RngStream, log: Vec<Draw> },
    Replay { draws: &'a [Draw], next: usize },
}

/// Turns attention logits into weights according to a [`DropConfig`].
///
/// A perturber either samples fresh draws (recording them), replays a
/// recorded sequence so the same masks and widths apply again, or is clean
/// (inference: plain softmax).
pub struct Perturber<'a> {
    config: &'a DropConfig,
    table: Option<&'a GaussianKernelTable>,
    source: Source<'a>,
}

impl<'a> Perturber<'a> {
    pub fn clean(config: &'a DropConfig) -> Self {
        Perturber {
            config,
            table: None,
            source: Source::Clean,
        }
    }

    pub fn sampling(config: &'a DropConfig, table: Option<&'a GaussianKernelTable>, rng: &'a mut RngStream) -> Self {
        Perturber {
            config,
            table,
            source: Source::Sample { rng, log: Vec::new() },
        }
    }

    pub fn replaying(config: &'a DropConfig, table: Option<&'a GaussianKernelTable>, draws: &'a [Draw]) -> Self {
        Perturber {
            config,
            table,
            source: Source::Replay { draws, next: 0 },
        }
    }

    /// Draws made so far (empty unless sampling).
    pub fn into_draws(self) -> Vec<Draw> {
        match self.source {
            Source::Sample { log, .. } => log,
            _ => Vec::new(),
        }
    }

    fn next_draw(&mut self, g: &Graph, logits: Var) -> Result<Draw> {
        let cfg = self.config;
        match &mut self.source {
            Source::Clean => unreachable!("clean perturber never draws"),
            Source::Sample { rng, log } => {
                let draw = match cfg.variant {
                    Variant::HardMask => Draw::Mask(TopKMask::sample(g.value(logits), cfg.p, cfg.k, rng)?),
                    Variant::BlurSmooth => {
                        let table = self.table.ok_or_else(|| Error::Contract("blur variant without a kernel table".into()))?;
                        Draw::Sigma(table.sample_index(rng))
                    }
                    Variant::None => unreachable!("baseline never draws"),
                };
                log.push(draw.clone());
                Ok(draw)
            }
            Source::Replay { draws, next } => {
                let draw = draws
                    .get(*next)
                    .cloned()
                    .ok_or_else(|| Error::Contract("replay ran out of recorded draws".into()))?;
                *next += 1;
                Ok(draw)
            }
        }
    }

    /// Attention weights for `logits`.
    pub fn weights(&mut self, g: &mut Graph, logits: Var) -> Result<Var> {
        if matches!(self.source, Source::Clean) || !self.config.perturbs() {
            return g.softmax_rows(logits);
        }
        let perturbed = match self.next_draw(g, logits)? {
            Draw::Mask(mask) if self.config.variant == Variant::HardMask => mask.apply(g, logits)?,
            Draw::Sigma(idx) if self.config.variant == Variant::BlurSmooth => {
                let table = self.table.ok_or_else(|| Error::Contract("blur variant without a kernel table".into()))?;
                let kernel = table
                    .kernels
                    .get(idx)
                    .ok_or_else(|| Error::Contract(format!("kernel row {idx} out of range")))?;
                blur_logits(g, logits, kernel, self.config.blur_mode)?
            }
            other => {
                return Err(Error::Contract(format!(
                    "recorded draw {other:?} does not match variant {:?}",
                    self.config.variant
                )))
            }
        };
        g.softmax_rows(perturbed)
    }
}
