// Forward and backward kernels for every tape operation.
//
// All kernels are sequential; results are a pure function of the inputs.

use super::graph::{ConvGeometry, Op};
use super::{Element, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

pub(super) struct Forward<T> {
    pub value: Tensor<T>,
    pub saved: Option<Vec<T>>,
}

fn plain<T>(value: Tensor<T>) -> Result<Forward<T>> {
    Ok(Forward { value, saved: None })
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn arity<T>(op: &Op, inputs: &[&Tensor<T>], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::shape(
            op.name(),
            format!("expected {n} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

fn rank2<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

/// Leading batch extent and trailing matrix dims of a rank-2 or rank-3 tensor.
fn batched<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((1, r, c)),
        &[b, r, c] => Ok((b, r, c)),
        s => Err(Error::shape(op, format!("expected rank 2 or 3, got {s:?}"))),
    }
}

fn with_last_two<T: Element>(t: &Tensor<T>, r: usize, c: usize) -> Vec<usize> {
    let mut shape = t.shape().to_vec();
    let k = shape.len();
    shape[k - 2] = r;
    shape[k - 1] = c;
    shape
}

pub(super) fn forward<T: Element>(op: &Op, inputs: &[&Tensor<T>]) -> Result<Forward<T>> {
    match op {
        Op::Add | Op::Sub | Op::Mul => {
            arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(op.name(), a, b)?;
            let f = match op {
                Op::Add => |x: T, y: T| x + y,
                Op::Sub => |x: T, y: T| x - y,
                _ => |x: T, y: T| x * y,
            };
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y));
            plain(Tensor::new(a.shape().to_vec(), data.collect())?)
        }
        Op::Scale(c) => {
            arity(op, inputs, 1)?;
            let c = T::of(*c);
            let x = inputs[0];
            plain(Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|&v| v * c).collect(),
            )?)
        }
        Op::AddBias => {
            arity(op, inputs, 2)?;
            let (x, b) = (inputs[0], inputs[1]);
            let (_, cols) = x.rows_cols();
            if b.shape() != [cols] {
                return Err(Error::shape(
                    "add_bias",
                    format!("bias {:?} does not match last dim of {:?}", b.shape(), x.shape()),
                ));
            }
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(cols) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o = *o + bv;
                }
            }
            plain(out)
        }
        Op::MatMul => {
            arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != b.rank() {
                return Err(Error::shape(
                    "matmul",
                    format!("rank mismatch {:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let (ba, m, k) = batched("matmul", a)?;
            let (bb, k2, n) = batched("matmul", b)?;
            if ba != bb || k != k2 {
                return Err(Error::shape(
                    "matmul",
                    format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                ));
            }
            let mut out = vec![T::zero(); ba * m * n];
            for i in 0..ba {
                T::gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    k as isize,
                    1,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    n as isize,
                    1,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
            plain(Tensor::new(with_last_two(a, m, n), out)?)
        }
        Op::Transpose => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            let (bt, r, c) = batched("transpose", x)?;
            let mut out = vec![T::zero(); x.numel()];
            transpose_into(x.data(), &mut out, bt, r, c);
            plain(Tensor::new(with_last_two(x, c, r), out)?)
        }
        Op::Reshape(shape) => {
            arity(op, inputs, 1)?;
            plain(inputs[0].clone().reshaped(shape)?)
        }
        Op::SplitHeads(heads) => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            let (n, d) = rank2("split_heads", x)?;
            if *heads == 0 || d % heads != 0 {
                return Err(Error::shape(
                    "split_heads",
                    format!("width {d} not divisible into {heads} heads"),
                ));
            }
            let dh = d / heads;
            let mut out = vec![T::zero(); x.numel()];
            for i in 0..n {
                for h in 0..*heads {
                    let src = &x.data()[i * d + h * dh..i * d + (h + 1) * dh];
                    out[(h * n + i) * dh..(h * n + i + 1) * dh].copy_from_slice(src);
                }
            }
            plain(Tensor::new(vec![*heads, n, dh], out)?)
        }
        Op::MergeHeads => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            let &[heads, n, dh] = x.shape() else {
                return Err(Error::shape(
                    "merge_heads",
                    format!("expected [heads, n, dh], got {:?}", x.shape()),
                ));
            };
            plain(Tensor::new(vec![n, heads * dh], merge_heads(x.data(), heads, n, dh))?)
        }
        Op::Softmax => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            let (_, cols) = x.rows_cols();
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(cols) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total = total + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / total;
                }
            }
            plain(Tensor::new(x.shape().to_vec(), out)?)
        }
        Op::LayerNorm { eps } => {
            arity(op, inputs, 3)?;
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let (rows, d) = x.rows_cols();
            if gamma.shape() != [d] || beta.shape() != [d] {
                return Err(Error::shape(
                    "layernorm",
                    format!(
                        "affine params {:?}/{:?} do not match width {d}",
                        gamma.shape(),
                        beta.shape()
                    ),
                ));
            }
            let eps = T::of(*eps);
            let inv_d = T::one() / T::of(d as f64);
            let mut out = vec![T::zero(); x.numel()];
            let mut saved = Vec::with_capacity(2 * rows);
            for r in 0..rows {
                let row = x.row(r);
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let rstd = T::one() / (var + eps).sqrt();
                for j in 0..d {
                    out[r * d + j] = (row[j] - mean) * rstd * gamma.data()[j] + beta.data()[j];
                }
                saved.push(mean);
                saved.push(rstd);
            }
            Ok(Forward {
                value: Tensor::new(x.shape().to_vec(), out)?,
                saved: Some(saved),
            })
        }
        Op::Gelu => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            let (k, c, half) = (T::of(GELU_K), T::of(GELU_C), T::of(0.5));
            let out = x
                .data()
                .iter()
                .map(|&v| half * v * (T::one() + (k * (v + c * v * v * v)).tanh()))
                .collect();
            plain(Tensor::new(x.shape().to_vec(), out)?)
        }
        Op::Mean | Op::Sum | Op::SumSq => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            let v = match op {
                Op::SumSq => x.data().iter().map(|&v| v * v).sum::<T>(),
                Op::Sum => x.data().iter().copied().sum::<T>(),
                _ => x.data().iter().copied().sum::<T>() / T::of(x.numel() as f64),
            };
            plain(Tensor::scalar(v))
        }
        Op::GatherRows(index) => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            rank2("gather_rows", x)?;
            plain(x.gather_rows(index)?)
        }
        Op::ScatterRows { index, rows } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            let (l, d) = rank2("scatter_rows", x)?;
            if index.len() != l {
                return Err(Error::shape(
                    "scatter_rows",
                    format!("{} indices for {l} rows", index.len()),
                ));
            }
            let mut seen = vec![false; *rows];
            let mut out = vec![T::zero(); rows * d];
            for (src, &dst) in index.iter().enumerate() {
                if dst >= *rows || std::mem::replace(&mut seen[dst], true) {
                    return Err(Error::shape(
                        "scatter_rows",
                        format!("target row {dst} out of range or repeated (rows = {rows})"),
                    ));
                }
                out[dst * d..(dst + 1) * d].copy_from_slice(x.row(src));
            }
            plain(Tensor::new(vec![*rows, d], out)?)
        }
        Op::Im2Col(geom) => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            geom.check(x.shape())?;
            let (oh, ow) = geom.output_hw();
            let mut out = vec![T::zero(); oh * ow * geom.patch_len()];
            im2col(geom, x.data(), &mut out);
            plain(Tensor::new(vec![oh * ow, geom.patch_len()], out)?)
        }
        Op::CrossEntropy(labels) => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            let (b, k) = rank2("cross_entropy", x)?;
            if labels.len() != b || labels.iter().any(|&l| l >= k) {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("{} labels (max class {k}) for {b} rows", labels.len()),
                ));
            }
            let mut probs = x.data().to_vec();
            let mut loss = T::zero();
            for (r, row) in probs.chunks_mut(k).enumerate() {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                loss = loss + lse - row[labels[r]];
                for v in row.iter_mut() {
                    *v = (*v - lse).exp();
                }
            }
            Ok(Forward {
                value: Tensor::scalar(loss / T::of(b as f64)),
                saved: Some(probs),
            })
        }
    }
}

/// Gradients for each input (`None` where `need[i]` is false).
pub(super) fn backward<T: Element>(
    op: &Op,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    saved: Option<&[T]>,
    dy: &[T],
    need: &[bool],
) -> Vec<Option<Vec<T>>> {
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    match op {
        Op::Add => vec![
            want(0).then(|| dy.to_vec()),
            want(1).then(|| dy.to_vec()),
        ],
        Op::Sub => vec![
            want(0).then(|| dy.to_vec()),
            want(1).then(|| dy.iter().map(|&g| -g).collect()),
        ],
        Op::Mul => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            vec![
                want(0).then(|| dy.iter().zip(b).map(|(&g, &v)| g * v).collect()),
                want(1).then(|| dy.iter().zip(a).map(|(&g, &v)| g * v).collect()),
            ]
        }
        Op::Scale(c) => {
            let c = T::of(*c);
            vec![want(0).then(|| dy.iter().map(|&g| g * c).collect())]
        }
        Op::AddBias => {
            let d = inputs[1].numel();
            let db = want(1).then(|| {
                let mut db = vec![T::zero(); d];
                for row in dy.chunks(d) {
                    for (acc, &g) in db.iter_mut().zip(row) {
                        *acc = *acc + g;
                    }
                }
                db
            });
            vec![want(0).then(|| dy.to_vec()), db]
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (bt, m, k) = batched("matmul", a).expect("validated in forward");
            let n = out.shape()[out.rank() - 1];
            let da = want(0).then(|| {
                let mut da = vec![T::zero(); a.numel()];
                for i in 0..bt {
                    T::gemm(
                        m,
                        n,
                        k,
                        &dy[i * m * n..(i + 1) * m * n],
                        n as isize,
                        1,
                        &b.data()[i * k * n..(i + 1) * k * n],
                        1,
                        n as isize,
                        T::zero(),
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
                da
            });
            let db = want(1).then(|| {
                let mut db = vec![T::zero(); b.numel()];
                for i in 0..bt {
                    T::gemm(
                        k,
                        m,
                        n,
                        &a.data()[i * m * k..(i + 1) * m * k],
                        1,
                        k as isize,
                        &dy[i * m * n..(i + 1) * m * n],
                        n as isize,
                        1,
                        T::zero(),
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                db
            });
            vec![da, db]
        }
        Op::Transpose => {
            // dy has the transposed layout [.., c, r]
            let (bt, r, c) = batched("transpose", inputs[0]).expect("validated in forward");
            vec![want(0).then(|| {
                let mut dx = vec![T::zero(); dy.len()];
                transpose_into(dy, &mut dx, bt, c, r);
                dx
            })]
        }
        Op::Reshape(_) => vec![want(0).then(|| dy.to_vec())],
        Op::SplitHeads(heads) => {
            let (n, d) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            vec![want(0).then(|| merge_heads(dy, *heads, n, d / heads))]
        }
        Op::MergeHeads => {
            let &[heads, n, dh] = inputs[0].shape() else {
                unreachable!("validated in forward")
            };
            vec![want(0).then(|| {
                let mut dx = vec![T::zero(); dy.len()];
                for i in 0..n {
                    for h in 0..heads {
                        dx[(h * n + i) * dh..(h * n + i + 1) * dh].copy_from_slice(
                            &dy[i * heads * dh + h * dh..i * heads * dh + (h + 1) * dh],
                        );
                    }
                }
                dx
            })]
        }
        Op::Softmax => {
            let (_, cols) = out.rows_cols();
            vec![want(0).then(|| {
                let mut dx = vec![T::zero(); dy.len()];
                for ((dxr, yr), gr) in dx
                    .chunks_mut(cols)
                    .zip(out.data().chunks(cols))
                    .zip(dy.chunks(cols))
                {
                    let dot = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum::<T>();
                    for ((d, &y), &g) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                dx
            })]
        }
        Op::LayerNorm { .. } => {
            let (x, gamma) = (inputs[0], inputs[1]);
            let (rows, d) = x.rows_cols();
            let saved = saved.expect("layernorm saves statistics");
            let inv_d = T::one() / T::of(d as f64);
            let mut dx = want(0).then(|| vec![T::zero(); x.numel()]);
            let mut dgamma = want(1).then(|| vec![T::zero(); d]);
            let mut dbeta = want(2).then(|| vec![T::zero(); d]);
            let mut xhat = vec![T::zero(); d];
            let mut dxhat = vec![T::zero(); d];
            for r in 0..rows {
                let (mean, rstd) = (saved[2 * r], saved[2 * r + 1]);
                let g = &dy[r * d..(r + 1) * d];
                for j in 0..d {
                    xhat[j] = (x.row(r)[j] - mean) * rstd;
                    dxhat[j] = g[j] * gamma.data()[j];
                }
                if let Some(dg) = dgamma.as_mut() {
                    for j in 0..d {
                        dg[j] = dg[j] + g[j] * xhat[j];
                    }
                }
                if let Some(db) = dbeta.as_mut() {
                    for j in 0..d {
                        db[j] = db[j] + g[j];
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    for j in 0..d {
                        dx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
            }
            vec![dx, dgamma, dbeta]
        }
        Op::Gelu => {
            let (k, c, half) = (T::of(GELU_K), T::of(GELU_C), T::of(0.5));
            let three = T::of(3.0);
            vec![want(0).then(|| {
                inputs[0]
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| {
                        let t = (k * (v + c * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * k * (T::one() + three * c * v * v);
                        g * (half * (T::one() + t) + half * v * dt)
                    })
                    .collect()
            })]
        }
        Op::Mean => {
            let n = T::of(inputs[0].numel() as f64);
            vec![want(0).then(|| vec![dy[0] / n; inputs[0].numel()])]
        }
        Op::Sum => vec![want(0).then(|| vec![dy[0]; inputs[0].numel()])],
        Op::SumSq => {
            let two = T::of(2.0);
            vec![want(0).then(|| inputs[0].data().iter().map(|&v| two * v * dy[0]).collect())]
        }
        Op::GatherRows(index) => {
            let (_, d) = inputs[0].rows_cols();
            vec![want(0).then(|| {
                let mut dx = vec![T::zero(); inputs[0].numel()];
                for (src, &dst) in index.iter().enumerate() {
                    for j in 0..d {
                        dx[dst * d + j] = dx[dst * d + j] + dy[src * d + j];
                    }
                }
                dx
            })]
        }
        Op::ScatterRows { index, .. } => {
            let (_, d) = inputs[0].rows_cols();
            vec![want(0).then(|| {
                let mut dx = Vec::with_capacity(inputs[0].numel());
                for &row in index {
                    dx.extend_from_slice(&dy[row * d..(row + 1) * d]);
                }
                dx
            })]
        }
        Op::Im2Col(geom) => vec![want(0).then(|| {
            let mut dx = vec![T::zero(); inputs[0].numel()];
            col2im(geom, dy, &mut dx);
            dx
        })],
        Op::CrossEntropy(labels) => {
            let probs = saved.expect("cross entropy saves probabilities");
            let (b, k) = (labels.len(), inputs[0].shape()[1]);
            let scale = dy[0] / T::of(b as f64);
            vec![want(0).then(|| {
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * k + l] = dx[r * k + l] - scale;
                }
                dx
            })]
        }
    }
}

fn transpose_into<T: Copy>(src: &[T], dst: &mut [T], batch: usize, r: usize, c: usize) {
    for b in 0..batch {
        let (s, d) = (&src[b * r * c..(b + 1) * r * c], &mut dst[b * r * c..(b + 1) * r * c]);
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = s[i * c + j];
            }
        }
    }
}

fn merge_heads<T: Element>(src: &[T], heads: usize, n: usize, dh: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for h in 0..heads {
        for i in 0..n {
            out[i * heads * dh + h * dh..i * heads * dh + (h + 1) * dh]
                .copy_from_slice(&src[(h * n + i) * dh..(h * n + i + 1) * dh]);
        }
    }
    out
}

/// Column layout per output position: (ky, kx, channel), channel fastest.
fn im2col<T: Element>(g: &ConvGeometry, x: &[T], out: &mut [T]) {
    let (oh, ow) = g.output_hw();
    let plen = g.patch_len();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut out[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let dst = &mut row[(ky * g.kernel + kx) * g.channels..][..g.channels];
                    if let Some(src) = g.source_pixel(oy, ox, ky, kx) {
                        dst.copy_from_slice(&x[src * g.channels..(src + 1) * g.channels]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeometry, dcols: &[T], dx: &mut [T]) {
    let (oh, ow) = g.output_hw();
    let plen = g.patch_len();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &dcols[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    if let Some(src) = g.source_pixel(oy, ox, ky, kx) {
                        let grad = &row[(ky * g.kernel + kx) * g.channels..][..g.channels];
                        for (acc, &v) in dx[src * g.channels..(src + 1) * g.channels]
                            .iter_mut()
                            .zip(grad)
                        {
                            *acc = *acc + v;
                        }
                    }
                }
            }
        }
    }
}
