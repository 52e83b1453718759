use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use mimic_mae::checkpoint::Checkpoint;
use mimic_mae::data::{Split, ToyDataset, ToySpec};
use mimic_mae::params::ParamSet;
use mimic_mae::probe::{linear_probe, ProbeConfig};
use mimic_mae::teacher::{export_features, train_toy_teacher, FileTeacher, Teacher, VitTeacher};
use mimic_mae::tensor::Tensor;
use mimic_mae::trainer::{run, CsvMetrics, Sample, TrainState};
use mimic_mae::visualize::{render_map, top_quartile_iou};
use serde::{Deserialize, Serialize};

use crate::config::{claim_dir, hex, write, RunConfig};

const SPEC_FILE: &str = "spec.toml";
const METRICS_FILE: &str = "metrics.csv";
const LAST_CHECKPOINT: &str = "last.mrmc";
const PRETRAIN_SUMMARY: &str = "pretrain.toml";
const PROBE_SUMMARY: &str = "probe.toml";

/// Sidecar of an MRTF file naming the teacher that produced it.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct FeaturesInfo {
    teacher: String,
    images: usize,
    tokens: usize,
    dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TeacherSummary {
    digest: String,
    steps: u64,
    final_loss: f64,
    train_accuracy: f64,
    val_accuracy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub config: String,
    pub mode: String,
    pub seed: u64,
    pub steps: u64,
    pub loss_r: f64,
    pub loss_m: f64,
    pub loss_total: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub checkpoint: String,
    pub config: String,
    pub seed: u64,
    pub evaluation: String,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub final_loss: f64,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    s.into()
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn tensors(data: &ToyDataset) -> Vec<Tensor<f32>> {
    data.images.iter().map(|im| im.tensor()).collect()
}

fn samples<'a>(data: &ToyDataset, tensors: &'a [Tensor<f32>], split: Split) -> Vec<Sample<'a>> {
    data.images
        .iter()
        .zip(tensors)
        .filter(|(im, _)| im.split == split)
        .map(|(im, t)| Sample { id: im.id, image: t })
        .collect()
}

pub fn gen_data(cfg: &RunConfig, force: bool) -> Result<()> {
    let dir = &cfg.data_dir;
    let spec_text = toml::to_string(&cfg.data)?;
    let spec_path = dir.join(SPEC_FILE);
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        match fs::read_to_string(&spec_path) {
            Ok(s) if s == spec_text => {}
            _ => bail!("{} is not empty and holds another dataset; pass --force to overwrite", dir.display()),
        }
    }
    let t0 = Instant::now();
    let data = ToyDataset::generate(cfg.data.clone())?;
    data.save(dir)?;
    write(&spec_path, spec_text.as_bytes())?;
    let val = data.split(Split::Val).count();
    eprintln!(
        "wrote {} images ({} train, {val} val) to {} in {:.1}s",
        data.images.len(),
        data.images.len() - val,
        dir.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Load the dataset under `cfg.data_dir`, refusing one generated from another spec.
pub fn load_data(cfg: &RunConfig) -> Result<ToyDataset> {
    let spec_path = cfg.data_dir.join(SPEC_FILE);
    let spec: ToySpec = read_toml(&spec_path).context("no dataset found; run gen-data first")?;
    if spec != cfg.data {
        bail!("{} was generated from a different [data] section", cfg.data_dir.display());
    }
    let data = ToyDataset::load(&cfg.data_dir, spec)?;
    if data.images.len() != cfg.data.count {
        bail!("{} holds {} images, expected {}", cfg.data_dir.display(), data.images.len(), cfg.data.count);
    }
    Ok(data)
}

pub fn train_teacher(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let labelled: Vec<(Tensor<f32>, usize)> = data.split(Split::Train).map(|im| (im.tensor(), im.label)).collect();
    let t0 = Instant::now();
    let steps = cfg.teacher.train_steps;
    let (teacher, report) = train_toy_teacher(cfg.teacher.clone(), &labelled, |step, loss| {
        if step % 200 == 0 || step == steps {
            eprintln!("teacher step {step}/{steps} loss {loss:.4} ({:.0}s)", t0.elapsed().as_secs_f64());
        }
    })?;
    let val: Vec<_> = data.split(Split::Val).collect();
    let mut correct = 0;
    for im in &val {
        correct += (teacher.predict(&im.tensor())? == im.label) as usize;
    }
    let val_accuracy = correct as f64 / val.len().max(1) as f64;
    let digest = cfg.teacher_digest()?;
    let mut ckpt = Checkpoint::new(digest);
    for (name, t) in teacher.params.iter() {
        ckpt.tensors.insert(name.to_string(), t.clone());
    }
    let path = cfg.teacher_path();
    ckpt.save(&path)?;
    let summary = TeacherSummary {
        digest: hex(&digest),
        steps: report.steps,
        final_loss: report.final_loss,
        train_accuracy: report.train_accuracy,
        val_accuracy,
    };
    write(&sidecar(&path), toml::to_string(&summary)?.as_bytes())?;
    println!(
        "teacher: train accuracy {:.4}, val accuracy {val_accuracy:.4}, saved {}",
        report.train_accuracy,
        path.display()
    );
    Ok(())
}

pub fn load_teacher(cfg: &RunConfig) -> Result<VitTeacher> {
    let path = cfg.teacher_path();
    let ckpt = Checkpoint::load(&path).context("no trained teacher; run train-teacher first")?;
    if ckpt.config_digest != cfg.teacher_digest()? {
        bail!("{} was trained under different [teacher] or [data] settings", path.display());
    }
    let mut params = ParamSet::new();
    for (name, t) in ckpt.tensors {
        params.insert(name, t);
    }
    Ok(VitTeacher::from_params(cfg.teacher.clone(), params)?)
}

/// Teacher name recorded in a features sidecar.
fn teacher_label(cfg: &RunConfig, random: bool) -> Result<String> {
    Ok(if random {
        format!("random:{}", cfg.teacher.seed)
    } else {
        format!("trained:{}", hex(&cfg.teacher_digest()?))
    })
}

pub fn export(cfg: &RunConfig, random: bool) -> Result<()> {
    let data = load_data(cfg)?;
    let teacher = if random {
        VitTeacher::random(cfg.teacher.clone(), cfg.teacher.seed)?
    } else {
        load_teacher(cfg)?
    };
    let tensors = tensors(&data);
    let path = cfg.features_path();
    let t0 = Instant::now();
    let file = export_features(&teacher, data.images.iter().zip(&tensors).map(|(im, t)| (im.id, t)), &path)?;
    let info = FeaturesInfo {
        teacher: teacher_label(cfg, random)?,
        images: file.len(),
        tokens: teacher.tokens(),
        dim: teacher.dim(),
    };
    write(&sidecar(&path), toml::to_string(&info)?.as_bytes())?;
    eprintln!("exported {} teacher signals to {} in {:.1}s", file.len(), path.display(), t0.elapsed().as_secs_f64());
    Ok(())
}

/// Precomputed signals covering every image of the dataset.
pub fn load_features(cfg: &RunConfig, data: &ToyDataset) -> Result<FileTeacher> {
    let path = cfg.features_path();
    let info: FeaturesInfo = read_toml(&sidecar(&path)).context("no teacher features; run export-features first")?;
    let trained = teacher_label(cfg, false)?;
    if info.teacher != trained && info.teacher != teacher_label(cfg, true)? {
        bail!("{} came from teacher {}, not the configured one", path.display(), info.teacher);
    }
    let file = FileTeacher::load(&path)?;
    if let Some(im) = data.images.iter().find(|im| file.get(im.id).is_none()) {
        bail!("{} has no signal for image {}", path.display(), im.id);
    }
    if file.tokens() != cfg.model.tokens() || file.dim() != cfg.model.teacher_dim {
        bail!(
            "features are {} tokens x {}, the model expects {} x {}",
            file.tokens(),
            file.dim(),
            cfg.model.tokens(),
            cfg.model.teacher_dim
        );
    }
    Ok(file)
}

pub fn pretrain(cfg: &RunConfig, resume: Option<&Path>, deterministic: bool, force: bool) -> Result<()> {
    cfg.validate()?;
    let out = &cfg.output;
    claim_dir(out, cfg, force && resume.is_none())?;
    let digest = cfg.digest()?;
    let data = load_data(cfg)?;
    let teacher = if cfg.needs_teacher() { Some(load_features(cfg, &data)?) } else { None };
    let tensors = tensors(&data);
    let train = samples(&data, &tensors, Split::Train);
    let metrics = out.join(METRICS_FILE);
    let (mut state, mut sink) = match resume {
        Some(path) => {
            let state = TrainState::<f32>::from_checkpoint(&Checkpoint::load(path)?, cfg.model.clone(), Some(digest))?;
            eprintln!("resuming from step {}", state.step);
            let sink = CsvMetrics::resume(&metrics, state.step)?;
            (state, sink)
        }
        None => (TrainState::new(cfg.model.clone(), cfg.seed)?, CsvMetrics::create(&metrics)?),
    };
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    let total = cfg.train.steps;
    let every = cfg.train.checkpoint_every;
    let t0 = Instant::now();
    let history = run(
        &mut state,
        &train,
        teacher.as_ref().map(|t| t as &dyn Teacher),
        &cfg.train,
        cfg.mode,
        total,
        deterministic,
        &mut sink,
        |s| {
            if (every > 0 && s.step % every == 0) || s.step == total {
                let ckpt = s.to_checkpoint(digest);
                ckpt.save(&ckpt_dir.join(format!("step_{:06}.mrmc", s.step)))?;
                ckpt.save(&out.join(LAST_CHECKPOINT))?;
            }
            if s.step % 100 == 0 {
                eprintln!("step {}/{total} ({:.0}s)", s.step, t0.elapsed().as_secs_f64());
            }
            Ok(())
        },
    )?;
    let last = history.last();
    let summary = PretrainSummary {
        config: hex(&digest),
        mode: cfg.mode.to_string(),
        seed: cfg.seed,
        steps: state.step,
        loss_r: last.map_or(f64::NAN, |b| b.loss_r),
        loss_m: last.map_or(f64::NAN, |b| b.loss_m),
        loss_total: last.map_or(f64::NAN, |b| b.total),
    };
    write(&out.join(PRETRAIN_SUMMARY), toml::to_string(&summary)?.as_bytes())?;
    println!(
        "pretrained {} steps in mode {}: loss_r {:.4}, loss_m {:.4}",
        state.step, cfg.mode, summary.loss_r, summary.loss_m
    );
    Ok(())
}

/// Student from `checkpoint`, or freshly initialised when `None`.
fn load_student(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(TrainState<f32>, String)> {
    match checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let state = TrainState::from_checkpoint(&ckpt, cfg.model.clone(), None)
                .with_context(|| format!("{} does not fit the [model] section", path.display()))?;
            Ok((state, path.display().to_string()))
        }
        None => Ok((TrainState::new(cfg.model.clone(), cfg.seed)?, "random-init".into())),
    }
}

pub fn probe(cfg: &RunConfig, checkpoint: Option<&Path>, force: bool) -> Result<()> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let (state, source) = load_student(cfg, checkpoint)?;
    claim_dir(&cfg.output, cfg, force)?;
    let t0 = Instant::now();
    let features = |split| -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for im in data.split(split) {
            x.push(state.student.embed_image(&im.tensor())?);
            y.push(im.label);
        }
        Ok((x, y))
    };
    let (xt, yt) = features(Split::Train)?;
    let (xv, yv) = features(Split::Val)?;
    let report = linear_probe(&xt, &yt, &xv, &yv, cfg.data.classes, &ProbeConfig::default())?;
    let summary = ProbeSummary {
        checkpoint: source,
        config: hex(&cfg.digest()?),
        seed: state.seed,
        evaluation: "frozen-encoder linear probe on mean-pooled tokens (no fine-tuning)".into(),
        train_accuracy: report.train_accuracy,
        val_accuracy: report.val_accuracy,
        final_loss: report.final_loss,
    };
    write(&cfg.output.join(PROBE_SUMMARY), toml::to_string(&summary)?.as_bytes())?;
    eprintln!("probe took {:.1}s", t0.elapsed().as_secs_f64());
    println!(
        "probe ({}): train accuracy {:.4}, val accuracy {:.4}, seed {}",
        summary.checkpoint, report.train_accuracy, report.val_accuracy, summary.seed
    );
    Ok(())
}

/// Maps for the first `limit` validation images: student attention received
/// at the last encoder layer when `checkpoint` is given, teacher saliency
/// otherwise.
pub fn visualize(cfg: &RunConfig, checkpoint: Option<&Path>, limit: usize, force: bool) -> Result<()> {
    let data = load_data(cfg)?;
    let student = match checkpoint {
        Some(_) => Some(load_student(cfg, checkpoint)?.0),
        None => None,
    };
    let teacher = if student.is_none() { Some(FileTeacher::load(&cfg.features_path())?) } else { None };
    claim_dir(&cfg.output, cfg, force)?;
    let maps = cfg.output.join("maps");
    fs::create_dir_all(&maps).with_context(|| format!("creating {}", maps.display()))?;
    let source = if student.is_some() { "student" } else { "teacher" };
    let mut log = String::from("id,label,source,min,max,iou\n");
    let mut ious = Vec::new();
    for im in data.split(Split::Val).take(limit) {
        let values = match (&student, &teacher) {
            (Some(s), _) => s.student.attention_received(&im.tensor())?,
            (_, Some(t)) => t
                .get(im.id)
                .with_context(|| format!("no teacher signal for image {}", im.id))?
                .saliency_f64(),
            _ => unreachable!(),
        };
        let side = (values.len() as f64).sqrt().round() as usize;
        let map = render_map(&values, side, im.size)?;
        map.save(&maps.join(format!("{source}_{:05}.pgm", im.id)))?;
        let iou = top_quartile_iou(&values, side, &im.foreground, im.size)?;
        ious.push(iou);
        writeln!(log, "{},{},{source},{:?},{:?},{:?}", im.id, im.label, map.min, map.max, iou)?;
    }
    write(&cfg.output.join("maps.csv"), log.as_bytes())?;
    let mean = ious.iter().sum::<f64>() / ious.len().max(1) as f64;
    println!("wrote {} {source} maps to {}; mean top-quartile IoU {mean:.4}", ious.len(), maps.display());
    Ok(())
}

/// Markdown table over run directories holding pretrain and probe summaries.
pub fn report(dirs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    if dirs.is_empty() {
        bail!("report needs at least one run directory");
    }
    let mut text = String::from(
        "Downstream evaluation: frozen-encoder linear probe on mean-pooled tokens, not fine-tuning.\n\n\
         | run | mode | seed | steps | loss_r | loss_m | probe train | probe val |\n\
         |---|---|---|---|---|---|---|---|\n",
    );
    for dir in dirs {
        let pre: PretrainSummary = read_toml(&dir.join(PRETRAIN_SUMMARY))?;
        let probe: Option<ProbeSummary> = read_toml(&dir.join(PROBE_SUMMARY)).ok();
        let (pt, pv) = probe.map_or(("-".into(), "-".into()), |p| {
            (format!("{:.4}", p.train_accuracy), format!("{:.4}", p.val_accuracy))
        });
        writeln!(
            text,
            "| {} | {} | {} | {} | {:.4} | {:.4} | {pt} | {pv} |",
            dir.display(),
            pre.mode,
            pre.seed,
            pre.steps,
            pre.loss_r,
            pre.loss_m
        )?;
    }
    print!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write(&dir.join("report.md"), text.as_bytes())?;
    }
    Ok(())
}
