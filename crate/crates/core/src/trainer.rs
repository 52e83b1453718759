//! Losses, their placement per ablation mode, the optimisation step and the
//! training loop.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{MaskingMode, ModelConfig, Student};
use crate::optim::{clip_global_norm, lr_at, AdamW, Schedule};
use crate::params::{Bound, ParamSet};
use crate::patch_mask::{blockwise_plan, focused_blockwise_plan, focused_plan, random_plan, MaskPlan, PatchBatch};
use crate::teacher::{Teacher, TeacherSignal};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Where the two supervisions attach.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Mimic loss on the encoder's visible tokens, reconstruction at the decoder.
    #[default]
    MrMae,
    /// Reconstruction only: a plain masked autoencoder.
    LowOnly,
    /// Both targets regressed from decoder outputs at the masked positions.
    JointAtDecoder,
    /// Mimic loss only. The decoder still runs and its loss is reported, but
    /// it contributes no gradient.
    MimicOnly,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::MrMae,
        AblationMode::LowOnly,
        AblationMode::JointAtDecoder,
        AblationMode::MimicOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::MrMae => "mr_mae",
            AblationMode::LowOnly => "low_only",
            AblationMode::JointAtDecoder => "joint_at_decoder",
            AblationMode::MimicOnly => "mimic_only",
        }
    }

    /// `(weight_r, weight_m)` actually applied in this mode.
    pub fn effective_weights(self, weight_r: f64, weight_m: f64) -> (f64, f64) {
        match self {
            AblationMode::MrMae | AblationMode::JointAtDecoder => (weight_r, weight_m),
            AblationMode::LowOnly => (weight_r, 0.0),
            AblationMode::MimicOnly => (0.0, weight_m),
        }
    }

    pub fn uses_teacher_features(self) -> bool {
        self != AblationMode::LowOnly
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (expected mr_mae, low_only, joint_at_decoder or mimic_only)")))
    }
}

/// Normaliser of the squared-error losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Divide the summed squared error by the token count.
    #[default]
    Tokens,
    /// Divide by tokens times feature width.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; `0` disables clipping.
    pub clip_norm: f64,
    pub weight_r: f64,
    pub weight_m: f64,
    pub loss_norm: LossNorm,
    /// L2-normalise each teacher feature row before the mimic loss.
    pub normalize_teacher_features: bool,
    /// Checkpoint interval in steps; `0` writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr_max: 1.5e-4,
            lr_min: 0.0,
            warmup_fraction: 0.2,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            clip_norm: 3.0,
            weight_r: 0.5,
            weight_m: 0.5,
            loss_norm: LossNorm::Tokens,
            normalize_teacher_features: false,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::new(self.lr_max, self.lr_min, self.warmup_fraction, self.steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        if self.weight_r < 0.0 || self.weight_m < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

fn squared_error<T: Element>(g: &mut Graph<T>, pred: Var, target: Var, norm: LossNorm, op: &'static str) -> Result<Var> {
    let (ps, ts) = (g.value(pred).shape().to_vec(), g.value(target).shape().to_vec());
    if ps != ts || ps.len() != 2 {
        return Err(Error::Shape {
            op,
            detail: format!("prediction {ps:?} vs target {ts:?}"),
        });
    }
    let diff = g.sub(pred, target)?;
    let sq = g.sum_sq(diff)?;
    let denom = match norm {
        LossNorm::Tokens => ps[0],
        LossNorm::Mean => ps[0] * ps[1],
    };
    g.scale(sq, 1.0 / denom as f64)
}

/// `L_R = ||D_m - I_m||^2 / l_m`.
pub fn loss_reconstruct<T: Element>(g: &mut Graph<T>, d_m: Var, i_m: Var, norm: LossNorm) -> Result<Var> {
    squared_error(g, d_m, i_m, norm, "loss_reconstruct")
}

/// `L_M = ||L(E_v) - F_v||^2 / l_v`. `f_v` should be a constant.
pub fn loss_mimic<T: Element>(g: &mut Graph<T>, projected: Var, f_v: Var, norm: LossNorm) -> Result<Var> {
    squared_error(g, projected, f_v, norm, "loss_mimic")
}

/// Mask plan for one image.
pub fn mask_plan(cfg: &ModelConfig, seed: u64, saliency: Option<&[f64]>) -> Result<MaskPlan> {
    let side = cfg.grid_side();
    let factors = cfg.stage_factors();
    let plan = match cfg.masking_mode {
        MaskingMode::Random if factors.is_empty() => random_plan(cfg.tokens(), cfg.visible_ratio, seed)?,
        MaskingMode::Random | MaskingMode::Blockwise => {
            blockwise_plan((side, side), cfg.visible_ratio, &factors, seed)?
        }
        MaskingMode::Focused => {
            let s = saliency.ok_or_else(|| Error::Teacher("focused masking needs teacher saliency".into()))?;
            if factors.is_empty() {
                focused_plan(s, cfg.visible_ratio, seed)?
            } else {
                focused_blockwise_plan(s, (side, side), cfg.visible_ratio, &factors)?
            }
        }
    };
    Ok(plan)
}

/// Loss nodes for one image. `l_m` is `None` in `low_only` mode.
#[derive(Clone, Copy, Debug)]
pub struct ImageLosses {
    pub l_r: Var,
    pub l_m: Option<Var>,
}

fn teacher_rows<T: Element>(signal: &TeacherSignal, rows: &[usize], l2_norm: bool) -> Result<Tensor<T>> {
    let mut f: Tensor<T> = signal.features.gather_rows(rows)?.cast();
    if l2_norm {
        let (_, cols) = f.rows_cols();
        for row in f.data_mut().chunks_mut(cols) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::of(1e-12));
            row.iter_mut().for_each(|v| *v = *v / n);
        }
    }
    Ok(f)
}

/// Forward one image and build its loss nodes under `mode`.
#[allow(clippy::too_many_arguments)]
pub fn image_losses<T: Element>(
    student: &Student<T>,
    g: &mut Graph<T>,
    bp: &Bound,
    image: &Tensor<T>,
    plan: &MaskPlan,
    signal: Option<&TeacherSignal>,
    mode: AblationMode,
    cfg: &TrainConfig,
) -> Result<ImageLosses> {
    let mc = &student.config;
    let batch = PatchBatch::new(image, mc.patch_size, plan.clone(), mc.per_patch_norm)?;
    let enc = student.encode(g, bp, image, plan)?;
    let dec = student.decode(g, bp, enc.e_v, plan)?;
    let target = g.constant(batch.masked.expect("decode checked the plan has masked tokens"));
    let l_r = loss_reconstruct(g, dec.d_m, target, cfg.loss_norm)?;
    let need = || signal.ok_or_else(|| Error::Teacher(format!("mode {mode} needs teacher features")));
    let l_m = match mode {
        AblationMode::LowOnly => None,
        AblationMode::MrMae | AblationMode::MimicOnly => {
            let f_v = g.constant(teacher_rows(need()?, &plan.visible, cfg.normalize_teacher_features)?);
            let projected = student.mimic_head(g, bp, enc.e_v)?;
            Some(loss_mimic(g, projected, f_v, cfg.loss_norm)?)
        }
        AblationMode::JointAtDecoder => {
            let f_m = g.constant(teacher_rows(need()?, &plan.masked, cfg.normalize_teacher_features)?);
            let hidden = g.gather_rows(dec.hidden, &plan.masked)?;
            let predicted = student.decoder_features(g, bp, hidden)?;
            Some(loss_mimic(g, predicted, f_m, cfg.loss_norm)?)
        }
    };
    Ok(ImageLosses { l_r, l_m })
}

/// One training image.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub id: u64,
    pub image: &'a Tensor<f32>,
}

fn step_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * step + stream);
    rng
}

/// Indices of the batch used at 1-based `step`; a pure function of
/// `(seed, step)`.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, len: usize) -> Vec<usize> {
    let mut rng = step_rng(seed, step, 0);
    (0..batch_size).map(|_| rng.gen_range(0..len)).collect()
}

/// Batch-averaged loss values and the gradient of the weighted total.
#[derive(Clone, Debug)]
pub struct BatchGradients<T> {
    pub grads: BTreeMap<String, Tensor<T>>,
    pub loss_r: f64,
    pub loss_m: f64,
}

/// Forward and backward over `batch` with explicit loss weights. A loss
/// whose weight is zero is left out of the graph entirely, so parameters it
/// alone would reach get exactly zero gradient.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients<T: Element>(
    student: &Student<T>,
    seed: u64,
    step: u64,
    batch: &[Sample],
    teacher: Option<&dyn Teacher>,
    mode: AblationMode,
    weights: (f64, f64),
    cfg: &TrainConfig,
) -> Result<BatchGradients<T>> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mc = &student.config;
    let needs_signal = mode.uses_teacher_features() || mc.masking_mode == MaskingMode::Focused;
    if let (true, Some(t)) = (needs_signal, teacher) {
        if t.tokens() != mc.tokens() || t.dim() != mc.teacher_dim {
            return Err(Error::Teacher(format!(
                "teacher gives {} tokens of width {}, the student expects {} of width {}",
                t.tokens(),
                t.dim(),
                mc.tokens(),
                mc.teacher_dim
            )));
        }
    }
    let mut rng = step_rng(seed, step, 1);
    let mut g = Graph::new();
    let bp = student.bind(&mut g, true);
    let (mut sum_r, mut sum_m) = (0.0, 0.0);
    let mut total: Option<Var> = None;
    for sample in batch {
        let signal = match (needs_signal, teacher) {
            (false, _) => None,
            (true, Some(t)) => Some(t.signal(sample.id, sample.image)?),
            (true, None) => return Err(Error::Teacher(format!("mode {mode} with {:?} masking needs a teacher", mc.masking_mode))),
        };
        let saliency = signal.as_ref().map(TeacherSignal::saliency_f64);
        let plan = mask_plan(mc, rng.gen(), saliency.as_deref())?;
        let image: Tensor<T> = sample.image.cast();
        let losses = image_losses(student, &mut g, &bp, &image, &plan, signal.as_ref(), mode, cfg)?;
        sum_r += g.value(losses.l_r).data()[0].to_f64().unwrap_or(f64::NAN);
        let mut terms = Vec::new();
        if weights.0 != 0.0 {
            terms.push(g.scale(losses.l_r, weights.0)?);
        }
        if let Some(l_m) = losses.l_m {
            sum_m += g.value(l_m).data()[0].to_f64().unwrap_or(f64::NAN);
            if weights.1 != 0.0 {
                terms.push(g.scale(l_m, weights.1)?);
            }
        }
        for t in terms {
            total = Some(match total {
                None => t,
                Some(acc) => g.add(acc, t)?,
            });
        }
    }
    let b = batch.len() as f64;
    let total = total.ok_or_else(|| Error::Config(format!("mode {mode} with weights {weights:?} has no loss to optimise")))?;
    let total = g.scale(total, 1.0 / b)?;
    let handles: Vec<(String, Var)> = bp.iter().map(|(k, v)| (k.to_string(), v)).collect();
    let mut raw = g.backward(total)?;
    let grads = handles
        .into_iter()
        .map(|(k, v)| (k, raw.take(v).expect("parameters are leaves")))
        .collect();
    Ok(BatchGradients {
        grads,
        loss_r: sum_r / b,
        loss_m: sum_m / b,
    })
}

/// What one step reports.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub step: u64,
    pub lr: f64,
    pub loss_r: f64,
    pub loss_m: f64,
    /// `weight_r * loss_r + weight_m * loss_m`, in f64.
    pub total: f64,
    pub weight_r: f64,
    pub weight_m: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Everything needed to continue training bit-exactly: the per-step random
/// streams are derived from `(seed, step)`, so those two numbers are the
/// whole RNG and schedule state.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub step: u64,
    pub seed: u64,
    pub student: Student<T>,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

const STEP_KEY: &str = "train.step";
const SEED_KEY: &str = "train.seed";
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

/// A u64 stored as two f32 records carrying its raw bits.
fn u64_tensor(x: u64) -> Tensor<f32> {
    let bits = [x as u32, (x >> 32) as u32].map(f32::from_bits);
    Tensor::new(vec![2], bits.to_vec()).expect("two values")
}

fn tensor_u64(t: &Tensor<f32>) -> Option<u64> {
    match t.data() {
        [lo, hi] => Some(lo.to_bits() as u64 | (hi.to_bits() as u64) << 32),
        _ => None,
    }
}

impl<T: Element> TrainState<T> {
    pub fn new(model: ModelConfig, seed: u64) -> Result<Self> {
        let student = Student::new(model, seed)?;
        let zeros = {
            let mut z = student.params.clone();
            z.iter_mut().for_each(|(_, t)| t.data_mut().fill(T::zero()));
            z
        };
        Ok(Self {
            step: 0,
            seed,
            student,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn to_checkpoint(&self, config_digest: [u8; 32]) -> Checkpoint {
        let mut c = Checkpoint::new(config_digest);
        for (name, t) in self.student.params.iter() {
            c.tensors.insert(name.to_string(), t.cast());
        }
        for (prefix, set) in [(M_PREFIX, &self.m), (V_PREFIX, &self.v)] {
            for (name, t) in set.iter() {
                c.tensors.insert(format!("{prefix}{name}"), t.cast());
            }
        }
        c.tensors.insert(STEP_KEY.into(), u64_tensor(self.step));
        c.tensors.insert(SEED_KEY.into(), u64_tensor(self.seed));
        c
    }

    /// Restore from a checkpoint; with `expected_digest` set, refuse one
    /// written under a different configuration.
    pub fn from_checkpoint(ckpt: &Checkpoint, model: ModelConfig, expected_digest: Option<[u8; 32]>) -> Result<Self> {
        if let Some(d) = expected_digest {
            if d != ckpt.config_digest {
                return Err(Error::Config("checkpoint was written under a different configuration".into()));
            }
        }
        let scalar = |key: &str| {
            ckpt.tensors
                .get(key)
                .and_then(tensor_u64)
                .ok_or_else(|| Error::MissingParam(key.to_string()))
        };
        let mut params = ParamSet::new();
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (name, t) in &ckpt.tensors {
            if name == STEP_KEY || name == SEED_KEY {
                continue;
            }
            let target = if let Some(rest) = name.strip_prefix(M_PREFIX) {
                (&mut m, rest)
            } else if let Some(rest) = name.strip_prefix(V_PREFIX) {
                (&mut v, rest)
            } else {
                (&mut params, name.as_str())
            };
            target.0.insert(target.1, t.cast());
        }
        params.check_layout(&m)?;
        params.check_layout(&v)?;
        Ok(Self {
            step: scalar(STEP_KEY)?,
            seed: scalar(SEED_KEY)?,
            student: Student::from_params(model, params)?,
            m,
            v,
        })
    }
}

/// One optimisation step on `batch`. On a non-finite loss or gradient the
/// state is left untouched and [`Error::NonFiniteLoss`] carries the
/// diagnostics.
pub fn train_step<T: Element>(
    state: &mut TrainState<T>,
    batch: &[Sample],
    teacher: Option<&dyn Teacher>,
    cfg: &TrainConfig,
    mode: AblationMode,
) -> Result<LossBreakdown> {
    let step = state.step + 1;
    let (weight_r, weight_m) = mode.effective_weights(cfg.weight_r, cfg.weight_m);
    let mut out = batch_gradients(
        &state.student,
        state.seed,
        step,
        batch,
        teacher,
        mode,
        (weight_r, weight_m),
        cfg,
    )?;
    let grad_norm = clip_global_norm(out.grads.values_mut(), cfg.clip_norm);
    if !(out.loss_r.is_finite() && out.loss_m.is_finite() && grad_norm.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            loss_r: out.loss_r,
            loss_m: out.loss_m,
            grad_norm,
        });
    }
    let lr = lr_at(step, &cfg.schedule());
    let opt = cfg.optimizer();
    for (name, grad) in &out.grads {
        let p = state.student.params.get_mut(name)?;
        let decay = p.rank() >= 2;
        opt.update(p, grad, state.m.get_mut(name)?, state.v.get_mut(name)?, step, lr, decay);
    }
    state.step = step;
    Ok(LossBreakdown {
        step,
        lr,
        loss_r: out.loss_r,
        loss_m: out.loss_m,
        total: weight_r * out.loss_r + weight_m * out.loss_m,
        weight_r,
        weight_m,
        grad_norm,
    })
}

/// One metrics CSV row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_r: f64,
    pub loss_m: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_r,loss_m,grad_norm,seconds";

impl MetricsRow {
    pub fn new(b: &LossBreakdown, seconds: f64) -> Self {
        Self {
            step: b.step,
            lr: b.lr,
            loss_total: b.total,
            loss_r: b.loss_r,
            loss_m: b.loss_m,
            grad_norm: b.grad_norm,
            seconds,
        }
    }

    /// Shortest round-trip formatting, so equal rows print identically.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.step, self.lr, self.loss_total, self.loss_r, self.loss_m, self.grad_norm, self.seconds
        )
    }
}

pub trait MetricsSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRow> {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.push(*row);
        Ok(())
    }
}

/// CSV file sink, flushed after every row so a concurrent reader always
/// sees whole lines.
pub struct CsvMetrics {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl CsvMetrics {
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut sink = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        sink.line(METRICS_HEADER)?;
        Ok(sink)
    }

    /// Reopen for a run resumed after `step`: rows past `step` (left by an
    /// interrupted run) are dropped.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut sink = Self::create(path)?;
        for line in text.lines().skip(1) {
            let row_step: u64 = line
                .split(',')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(path, format!("bad metrics row `{line}`")))?;
            if row_step <= step {
                sink.line(line)?;
            }
        }
        Ok(sink)
    }

    fn line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

impl MetricsSink for CsvMetrics {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.line(&row.csv_line())
    }
}

/// Train from `state.step` up to `until` (inclusive). Batches are drawn from
/// `samples` by [`batch_indices`]. With `deterministic` set the `seconds`
/// column is written as zero so metric streams compare bitwise.
/// `on_step` runs after every step, e.g. to write checkpoints.
#[allow(clippy::too_many_arguments)]
pub fn run<T: Element>(
    state: &mut TrainState<T>,
    samples: &[Sample],
    teacher: Option<&dyn Teacher>,
    cfg: &TrainConfig,
    mode: AblationMode,
    until: u64,
    deterministic: bool,
    sink: &mut dyn MetricsSink,
    mut on_step: impl FnMut(&TrainState<T>) -> Result<()>,
) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training images".into()));
    }
    let mut out = Vec::new();
    while state.step < until {
        let start = Instant::now();
        let idx = batch_indices(state.seed, state.step + 1, cfg.batch_size, samples.len());
        let batch: Vec<Sample> = idx.iter().map(|&i| samples[i]).collect();
        let b = train_step(state, &batch, teacher, cfg, mode)?;
        let seconds = if deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
        sink.record(&MetricsRow::new(&b, seconds))?;
        on_step(state)?;
        out.push(b);
    }
    Ok(out)
}
