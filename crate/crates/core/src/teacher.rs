//! Frozen teachers that supply target features and token saliency.
//!
//! [`VitTeacher`] is a small ViT classifier with a `[CLS]` token, run in
//! process. [`FileTeacher`] serves signals precomputed into an `MRTF` file:
//!
//! ```text
//! "MRTF"  u32 version  u32 record_count
//! per record: u64 image_id  u32 n  u32 dim  f32 features[n * dim]  f32 saliency[n]
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{self, put_f32s, put_u32, put_u64, Reader};
use crate::error::{Error, Result};
use crate::model::layers::{block, init_block, layernorm, linear, sincos_2d};
use crate::optim::{clip_global_norm, lr_at, AdamW, Schedule};
use crate::params::{Bound, Initializer, ParamSet, INIT_STD};
use crate::patch_mask::{patchify, PatchGrid};
use crate::tensor::{Element, Graph, Tensor, Var};

pub const MRTF_MAGIC: &[u8; 4] = b"MRTF";
pub const MRTF_VERSION: u32 = 1;

/// Teacher output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSignal {
    /// `[n, dim]`, one row per patch token.
    pub features: Tensor<f32>,
    /// Non-negative, sums to one.
    pub saliency: Vec<f32>,
}

impl TeacherSignal {
    pub fn validate(&self) -> Result<()> {
        let n = self.features.shape()[0];
        if self.features.rank() != 2 || self.saliency.len() != n {
            return Err(Error::Teacher(format!(
                "features {:?} and saliency of length {} disagree",
                self.features.shape(),
                self.saliency.len()
            )));
        }
        if !self.features.all_finite() {
            return Err(Error::Teacher("non-finite teacher features".into()));
        }
        let sum: f64 = self.saliency.iter().map(|&s| s as f64).sum();
        if self.saliency.iter().any(|&s| s.is_nan() || s < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Teacher(format!("saliency is not a distribution (sum {sum})")));
        }
        Ok(())
    }

    pub fn saliency_f64(&self) -> Vec<f64> {
        self.saliency.iter().map(|&s| s as f64).collect()
    }
}

/// Renormalise in f64, round to f32, then push the rounding residue into the
/// largest entry so the f32 values sum to one as closely as f32 allows.
pub fn to_distribution(weights: &[f64]) -> Vec<f32> {
    let total: f64 = weights.iter().sum();
    let mut out: Vec<f32> = weights.iter().map(|&w| (w / total) as f32).collect();
    let residue = 1.0 - out.iter().map(|&s| s as f64).sum::<f64>();
    if let Some(big) = (0..out.len()).max_by(|&a, &b| out[a].total_cmp(&out[b]).then(b.cmp(&a))) {
        out[big] = (out[big] as f64 + residue).max(0.0) as f32;
    }
    out
}

/// Frozen source of target features and saliency.
pub trait Teacher {
    /// Number of patch tokens per image.
    fn tokens(&self) -> usize;
    fn dim(&self) -> usize;
    /// Signal for image `id`. In-process teachers use `image`; file-backed
    /// teachers look up `id`.
    fn signal(&self, id: u64, image: &Tensor<f32>) -> Result<TeacherSignal>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    pub train_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            classes: 8,
            train_steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.05,
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::square(self.image_size, self.patch_size)
    }
}

/// Small ViT with a `[CLS]` token. Features are the patch tokens after the
/// final layer norm; saliency is the last block's `[CLS]`-to-patch attention,
/// averaged over heads and renormalised over the patches.
#[derive(Clone, Debug)]
pub struct VitTeacher {
    pub config: TeacherConfig,
    pub params: ParamSet<f32>,
    pos: Tensor<f32>,
}

/// Graph handles of one teacher forward pass.
pub struct TeacherForward {
    pub features: Var,
    pub logits: Var,
    /// Last block's attention, `[heads, n + 1, n + 1]`; row/column 0 is `[CLS]`.
    pub attention: Var,
}

impl VitTeacher {
    /// Randomly initialised teacher; frozen as-is it is the mechanism-only
    /// stand-in.
    pub fn random(config: TeacherConfig, seed: u64) -> Result<Self> {
        let params = Self::init_params(&config, seed)?;
        Self::from_params(config, params)
    }

    fn init_params(config: &TeacherConfig, seed: u64) -> Result<ParamSet<f32>> {
        let grid = config.grid()?;
        if config.heads == 0 || !config.dim.is_multiple_of(config.heads) || !config.dim.is_multiple_of(4) || config.depth == 0 {
            return Err(Error::Config(format!(
                "teacher width {} must be divisible by 4 and by {} heads, depth positive",
                config.dim, config.heads
            )));
        }
        let mut init = Initializer::new(seed);
        let mut p = ParamSet::new();
        init.linear(&mut p, "patch_embed", grid.patch_dim(), config.dim);
        p.insert("cls_token", init.trunc_normal(&[1, config.dim], INIT_STD));
        for l in 0..config.depth {
            init_block(&mut init, &mut p, &format!("blocks.{l}"), config.dim, config.mlp_ratio);
        }
        init.norm(&mut p, "norm", config.dim);
        init.linear(&mut p, "head", config.dim, config.classes);
        Ok(p)
    }

    /// Wrap trained parameters; names and shapes must match `config`.
    pub fn from_params(config: TeacherConfig, params: ParamSet<f32>) -> Result<Self> {
        Self::init_params(&config, 0)?.check_layout(&params)?;
        let grid = config.grid()?;
        let pos = sincos_2d(config.dim, grid.rows(), grid.cols())?;
        Ok(Self { config, params, pos })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, bp: &Bound, image: &Tensor<T>) -> Result<TeacherForward> {
        let c = &self.config;
        let patches = patchify(image, c.patch_size)?;
        let n = patches.shape()[0];
        if n != self.pos.shape()[0] {
            return Err(Error::Teacher(format!(
                "image gives {n} patches, the teacher grid has {}",
                self.pos.shape()[0]
            )));
        }
        let x = g.constant(patches);
        let x = linear(g, bp, "patch_embed", x)?;
        let pos = g.constant(self.pos.cast());
        let x = g.add(x, pos)?;
        let rows: Vec<usize> = (1..=n).collect();
        let x = g.scatter_rows(x, &rows, n + 1)?;
        let cls = g.scatter_rows(bp.get("cls_token")?, &[0], n + 1)?;
        let mut x = g.add(x, cls)?;
        let mut attention = None;
        for l in 0..c.depth {
            let (y, probs) = block(g, bp, &format!("blocks.{l}"), x, c.heads)?;
            x = y;
            attention = Some(probs);
        }
        let h = layernorm(g, bp, "norm", x)?;
        let features = g.gather_rows(h, &rows)?;
        let cls = g.gather_rows(h, &[0])?;
        let logits = linear(g, bp, "head", cls)?;
        Ok(TeacherForward {
            features,
            logits,
            attention: attention.expect("depth is positive"),
        })
    }

    /// Class logits for one image.
    pub fn logits(&self, image: &Tensor<f32>) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let bp = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &bp, image)?;
        Ok(g.value(out.logits).data().to_vec())
    }

    pub fn predict(&self, image: &Tensor<f32>) -> Result<usize> {
        let logits = self.logits(image)?;
        Ok((0..logits.len())
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
            .expect("at least one class"))
    }
}

/// `[CLS]` row of `attention` (`[heads, n+1, n+1]`) over the patch columns,
/// averaged over heads.
pub fn cls_attention(attention: &Tensor<f32>) -> Vec<f64> {
    let (heads, n1) = (attention.shape()[0], attention.shape()[1]);
    let mut out = vec![0.0; n1 - 1];
    for h in 0..heads {
        let row = &attention.data()[h * n1 * n1..h * n1 * n1 + n1];
        for (o, &a) in out.iter_mut().zip(&row[1..]) {
            *o += a as f64 / heads as f64;
        }
    }
    out
}

impl Teacher for VitTeacher {
    fn tokens(&self) -> usize {
        self.pos.shape()[0]
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn signal(&self, _id: u64, image: &Tensor<f32>) -> Result<TeacherSignal> {
        let mut g = Graph::new();
        let bp = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &bp, image)?;
        let saliency = to_distribution(&cls_attention(g.value(out.attention)));
        Ok(TeacherSignal {
            features: g.value(out.features).clone(),
            saliency,
        })
    }
}

/// Outcome of toy-teacher training.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherReport {
    pub steps: u64,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Supervised training of a small ViT on labelled images, then freeze.
/// `progress` sees `(step, batch loss)` after every step.
pub fn train_toy_teacher(
    config: TeacherConfig,
    images: &[(Tensor<f32>, usize)],
    mut progress: impl FnMut(u64, f64),
) -> Result<(VitTeacher, TeacherReport)> {
    if images.is_empty() {
        return Err(Error::Teacher("no labelled images to train on".into()));
    }
    if let Some((_, l)) = images.iter().find(|(_, l)| *l >= config.classes) {
        return Err(Error::Teacher(format!("label {l} outside {} classes", config.classes)));
    }
    let mut teacher = VitTeacher::random(config.clone(), config.seed)?;
    let opt = AdamW {
        weight_decay: config.weight_decay,
        ..AdamW::default()
    };
    let schedule = Schedule::new(config.lr, 0.0, 0.1, config.train_steps);
    let zeros = |p: &ParamSet<f32>| {
        let mut z = p.clone();
        z.iter_mut().for_each(|(_, t)| t.data_mut().fill(0.0));
        z
    };
    let (mut m, mut v) = (zeros(&teacher.params), zeros(&teacher.params));
    let mut final_loss = f64::NAN;
    for step in 1..=config.train_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(step);
        let batch: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.gen_range(0..images.len()))
            .collect();
        let mut g = Graph::new();
        let bp = teacher.params.bind(&mut g, true);
        let mut total = None;
        for &i in &batch {
            let out = teacher.forward(&mut g, &bp, &images[i].0)?;
            let ce = g.cross_entropy(out.logits, &[images[i].1])?;
            total = Some(match total {
                None => ce,
                Some(t) => g.add(t, ce)?,
            });
        }
        let loss = g.scale(total.expect("batch is non-empty"), 1.0 / batch.len() as f64)?;
        final_loss = g.value(loss).data()[0] as f64;
        if !final_loss.is_finite() {
            return Err(Error::Teacher(format!("non-finite loss at step {step}")));
        }
        let handles: Vec<(String, Var)> = bp.iter().map(|(k, v)| (k.to_string(), v)).collect();
        let mut grads = g.backward(loss)?;
        let mut grads: Vec<(String, Tensor<f32>)> = handles
            .into_iter()
            .map(|(k, v)| (k, grads.take(v).expect("parameters are leaves")))
            .collect();
        clip_global_norm(grads.iter_mut().map(|(_, t)| t), 3.0);
        let lr = lr_at(step, &schedule);
        for (name, grad) in &grads {
            let p = teacher.params.get_mut(name)?;
            let decay = p.rank() >= 2;
            opt.update(p, grad, m.get_mut(name)?, v.get_mut(name)?, step, lr, decay);
        }
        progress(step, final_loss);
    }
    let correct = images
        .iter()
        .map(|(im, l)| teacher.predict(im).map(|p| (p == *l) as usize))
        .sum::<Result<usize>>()?;
    let report = TeacherReport {
        steps: config.train_steps,
        final_loss,
        train_accuracy: correct as f64 / images.len() as f64,
    };
    Ok((teacher, report))
}

/// Teacher signals held in memory, keyed by image id; backs the MRTF file.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FileTeacher {
    signals: BTreeMap<u64, TeacherSignal>,
}

impl FileTeacher {
    /// Run `teacher` over every `(id, image)` and keep the signals.
    pub fn collect<'a>(
        teacher: &dyn Teacher,
        images: impl IntoIterator<Item = (u64, &'a Tensor<f32>)>,
    ) -> Result<Self> {
        let mut out = Self::default();
        for (id, image) in images {
            out.insert(id, teacher.signal(id, image)?)?;
        }
        Ok(out)
    }

    pub fn insert(&mut self, id: u64, signal: TeacherSignal) -> Result<()> {
        signal.validate()?;
        if let Some(first) = self.signals.values().next() {
            if first.features.shape() != signal.features.shape() {
                return Err(Error::Teacher(format!(
                    "image {id}: features {:?} drift from {:?}",
                    signal.features.shape(),
                    first.features.shape()
                )));
            }
        }
        self.signals.insert(id, signal);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&TeacherSignal> {
        self.signals.get(&id)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MRTF_MAGIC);
        put_u32(&mut out, MRTF_VERSION);
        put_u32(&mut out, self.signals.len() as u32);
        for (&id, s) in &self.signals {
            let (n, dim) = (s.features.shape()[0], s.features.shape()[1]);
            put_u64(&mut out, id);
            put_u32(&mut out, n as u32);
            put_u32(&mut out, dim as u32);
            put_f32s(&mut out, s.features.data().iter().copied());
            put_f32s(&mut out, s.saliency.iter().copied());
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        if r.take(4, "magic")? != MRTF_MAGIC {
            return Err(r.fail("not an MRTF feature file"));
        }
        let version = r.u32("version")?;
        if version != MRTF_VERSION {
            return Err(r.fail(format!("unsupported MRTF version {version}")));
        }
        let count = r.u32("record count")?;
        let mut out = Self::default();
        for index in 0..count {
            let what = format!("record {index}");
            let id = r.u64(&what)?;
            let n = r.u32(&what)? as usize;
            let dim = r.u32(&what)? as usize;
            let features = r.f32s(n * dim, &what)?;
            let saliency = r.f32s(n, &what)?;
            let features = Tensor::new(vec![n, dim], features).map_err(|e| r.fail(format!("{what}: {e}")))?;
            let signal = TeacherSignal { features, saliency };
            out.insert(id, signal).map_err(|e| r.fail(format!("{what}: {e}")))?;
        }
        if !r.at_end() {
            return Err(r.fail(format!("trailing bytes after {count} records")));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &binio::read(path)?)
    }
}

impl Teacher for FileTeacher {
    fn tokens(&self) -> usize {
        self.signals.values().next().map_or(0, |s| s.features.shape()[0])
    }

    fn dim(&self) -> usize {
        self.signals.values().next().map_or(0, |s| s.features.shape()[1])
    }

    fn signal(&self, id: u64, _image: &Tensor<f32>) -> Result<TeacherSignal> {
        self.signals
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::Teacher(format!("no precomputed features for image {id}")))
    }
}

/// Export `teacher` signals for `images` to an MRTF file at `path`.
pub fn export_features<'a>(
    teacher: &dyn Teacher,
    images: impl IntoIterator<Item = (u64, &'a Tensor<f32>)>,
    path: &Path,
) -> Result<FileTeacher> {
    let file = FileTeacher::collect(teacher, images)?;
    file.save(path)?;
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TeacherConfig {
        TeacherConfig {
            image_size: 8,
            patch_size: 2,
            dim: 8,
            depth: 1,
            heads: 2,
            ..TeacherConfig::default()
        }
    }

    fn img(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[8, 8, 3], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn signal_is_frozen_and_valid() {
        let t = VitTeacher::random(small(), 3).unwrap();
        let a = t.signal(0, &img(1)).unwrap();
        assert_eq!(a, t.signal(0, &img(1)).unwrap());
        a.validate().unwrap();
        assert_eq!(a.features.shape(), &[16, 8]);
    }

    #[test]
    fn uniform_attention_gives_uniform_saliency() {
        let mut t = VitTeacher::random(small(), 3).unwrap();
        for name in ["blocks.0.attn.q.weight", "blocks.0.attn.k.weight"] {
            t.params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let s = t.signal(0, &Tensor::full(&[8, 8, 3], 0.3)).unwrap();
        assert!(s.saliency.iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-7));
    }

    #[test]
    fn distribution_sums_to_one() {
        let w: Vec<f64> = (1..=196).map(|i| (i as f64).sqrt()).collect();
        let d = to_distribution(&w);
        let sum: f64 = d.iter().map(|&x| x as f64).sum();
        assert!((sum - 1.0).abs() < 1e-7);
    }

    #[test]
    fn wrong_grid_is_rejected() {
        let t = VitTeacher::random(small(), 0).unwrap();
        assert!(t.signal(0, &Tensor::zeros(&[16, 16, 3])).is_err());
    }
}
