// Shared builders for the integration tests and the acceptance runner.
#![allow(dead_code)]

use mimic_mae::model::{ConvStage, ModelConfig, Student};
use mimic_mae::params::Bound;
use mimic_mae::teacher::TeacherSignal;
use mimic_mae::tensor::{ConvGeometry, Graph, Op, Tensor, Var};
use mimic_mae::trainer::{image_losses, AblationMode, TrainConfig};
use mimic_mae::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// A scalar function exercising one op, with its evaluation point.
pub struct OpCase {
    pub name: &'static str,
    pub points: Vec<Tensor<f64>>,
    pub f: OpFn,
}

/// `sum(out * w)` for a fixed random `w`, so every output coordinate
/// contributes to the checked gradient with a distinct weight.
fn probe(out_shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(&mut rng(seed ^ 0x9e37), out_shape, -1.0, 1.0)
}

fn case(
    name: &'static str,
    points: Vec<Tensor<f64>>,
    out_shape: &[usize],
    seed: u64,
    op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    let w = probe(out_shape, seed);
    OpCase {
        name,
        points,
        f: Box::new(move |g, v| {
            let y = op(g, v)?;
            let w = g.constant(w.clone());
            let p = g.mul(y, w)?;
            g.sum(p)
        }),
    }
}

/// One case per registered op (plus extra layouts for matmul, transpose and
/// im2col), drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let mut u = |shape: &[usize]| uniform(&mut r, shape, -1.5, 1.5);
    let conv = ConvGeometry {
        height: 4,
        width: 4,
        channels: 2,
        kernel: 3,
        stride: 1,
        pad: 1,
    };
    let merge = ConvGeometry {
        kernel: 2,
        stride: 2,
        pad: 0,
        ..conv
    };
    let positive_gamma = {
        let mut gm = u(&[5]);
        gm.data_mut().iter_mut().for_each(|x| *x = 0.5 + x.abs());
        gm
    };
    vec![
        case("add", vec![u(&[3, 4]), u(&[3, 4])], &[3, 4], seed, |g, v| g.add(v[0], v[1])),
        case("sub", vec![u(&[3, 4]), u(&[3, 4])], &[3, 4], seed, |g, v| g.sub(v[0], v[1])),
        case("mul", vec![u(&[3, 4]), u(&[3, 4])], &[3, 4], seed, |g, v| g.mul(v[0], v[1])),
        case("scale", vec![u(&[3, 4])], &[3, 4], seed, |g, v| g.scale(v[0], -1.7)),
        case("add_bias", vec![u(&[3, 4]), u(&[4])], &[3, 4], seed, |g, v| g.add_bias(v[0], v[1])),
        case("matmul", vec![u(&[3, 4]), u(&[4, 2])], &[3, 2], seed, |g, v| g.matmul(v[0], v[1])),
        case("matmul", vec![u(&[2, 3, 4]), u(&[2, 4, 5])], &[2, 3, 5], seed, |g, v| g.matmul(v[0], v[1])),
        case("transpose", vec![u(&[3, 4])], &[4, 3], seed, |g, v| g.transpose(v[0])),
        case("transpose", vec![u(&[2, 3, 4])], &[2, 4, 3], seed, |g, v| g.transpose(v[0])),
        case("reshape", vec![u(&[3, 4])], &[2, 6], seed, |g, v| g.reshape(v[0], &[2, 6])),
        case("split_heads", vec![u(&[4, 6])], &[2, 4, 3], seed, |g, v| g.split_heads(v[0], 2)),
        case("merge_heads", vec![u(&[2, 4, 3])], &[4, 6], seed, |g, v| g.merge_heads(v[0])),
        case("softmax", vec![u(&[3, 5])], &[3, 5], seed, |g, v| g.softmax(v[0])),
        case("layernorm", vec![u(&[3, 5]), positive_gamma, u(&[5])], &[3, 5], seed, |g, v| {
            g.layernorm(v[0], v[1], v[2])
        }),
        case("gelu", vec![u(&[3, 4])], &[3, 4], seed, |g, v| g.gelu(v[0])),
        case("mean", vec![u(&[3, 4])], &[1], seed, |g, v| g.mean(v[0])),
        case("sum", vec![u(&[3, 4])], &[1], seed, |g, v| g.sum(v[0])),
        case("sum_sq", vec![u(&[3, 4])], &[1], seed, |g, v| g.sum_sq(v[0])),
        case("gather_rows", vec![u(&[5, 3])], &[4, 3], seed, |g, v| g.gather_rows(v[0], &[4, 0, 4, 2])),
        case("scatter_rows", vec![u(&[3, 3])], &[5, 3], seed, |g, v| g.scatter_rows(v[0], &[4, 0, 2], 5)),
        case("im2col", vec![u(&[16, 2])], &[16, 18], seed, move |g, v| g.apply(Op::Im2Col(conv), &[v[0]])),
        case("im2col", vec![u(&[16, 2])], &[4, 8], seed, move |g, v| g.apply(Op::Im2Col(merge), &[v[0]])),
        case("cross_entropy", vec![u(&[3, 4])], &[1], seed, |g, v| g.cross_entropy(v[0], &[1, 0, 3])),
    ]
}

/// Small student shapes for exact and finite-difference checks.
pub fn tiny_config(conv: bool) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: if conv { 4 } else { 2 },
        embed_dim: 8,
        encoder_depth: 2,
        encoder_heads: 2,
        mlp_ratio: 2,
        decoder_depth: 1,
        decoder_dim: 8,
        decoder_heads: 2,
        conv_stages: if conv {
            vec![
                ConvStage { blocks: 1, dim: 4, downsample: 2 },
                ConvStage { blocks: 1, dim: 4, downsample: 2 },
            ]
        } else {
            Vec::new()
        },
        fusion_layers: vec![1, 2],
        teacher_dim: 4,
        visible_ratio: if conv { 0.5 } else { 0.25 },
        ..ModelConfig::default()
    }
}

pub fn random_image(seed: u64, size: usize) -> Tensor<f64> {
    uniform(&mut rng(seed ^ 0x1234), &[size, size, 3], -2.0, 2.0)
}

pub fn random_signal(seed: u64, tokens: usize, dim: usize) -> TeacherSignal {
    let mut r = rng(seed ^ 0x5151);
    let w: Vec<f64> = (0..tokens).map(|_| r.gen_range(0.1..1.0)).collect();
    TeacherSignal {
        features: Tensor::from_fn(&[tokens, dim], |_| r.gen_range(-1.0f32..1.0)),
        saliency: mimic_mae::teacher::to_distribution(&w),
    }
}

/// The student's parameters as a flat list of evaluation points plus the
/// names to rebind them under.
pub fn student_points(s: &Student<f64>) -> (Vec<String>, Vec<Tensor<f64>>) {
    s.params.iter().map(|(k, v)| (k.to_string(), v.clone())).unzip()
}

pub fn bind_points(names: &[String], vars: &[Var]) -> Bound {
    Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()))
}

/// Which of the two losses to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Reconstruct,
    Mimic,
}

/// Scalar loss of one image as a function of bound student parameters.
#[allow(clippy::too_many_arguments)]
pub fn loss_of(
    s: &Student<f64>,
    g: &mut Graph<f64>,
    bp: &Bound,
    image: &Tensor<f64>,
    plan: &mimic_mae::patch_mask::MaskPlan,
    signal: &TeacherSignal,
    mode: AblationMode,
    which: Which,
) -> Result<Var> {
    let l = image_losses(s, g, bp, image, plan, Some(signal), mode, &TrainConfig::default())?;
    Ok(match which {
        Which::Reconstruct => l.l_r,
        Which::Mimic => l.l_m.expect("mode computes a mimic loss"),
    })
}
