//! Linear probe: softmax regression on frozen, mean-pooled encoder features.

use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.05,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub final_loss: f64,
}

/// Per-column `(mean, std)` of the training features.
fn zscore_stats(rows: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = rows.len() as f64;
    (0..rows[0].len())
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt().max(1e-8))
        })
        .collect()
}

fn standardise(rows: &[Vec<f64>], stats: &[(f64, f64)]) -> Result<Tensor<f64>> {
    let data = rows
        .iter()
        .flat_map(|r| r.iter().zip(stats).map(|(x, (m, s))| (x - m) / s))
        .collect();
    Tensor::new(vec![rows.len(), stats.len()], data)
}

fn accuracy(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, labels: &[usize]) -> f64 {
    let (n, d) = x.rows_cols();
    let k = b.numel();
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate().take(n) {
        let row = x.row(i);
        let scores: Vec<f64> = (0..k)
            .map(|c| b.data()[c] + (0..d).map(|j| row[j] * w.data()[j * k + c]).sum::<f64>())
            .collect();
        let best = (0..k)
            .max_by(|&a, &c| scores[a].total_cmp(&scores[c]).then(c.cmp(&a)))
            .expect("classes");
        correct += (best == label) as usize;
    }
    correct as f64 / n as f64
}

/// Train on `(train, train_labels)` full-batch from zero weights, then score
/// both splits. Features are standardised with training statistics. The
/// procedure has no randomness: equal inputs give equal reports.
pub fn linear_probe(
    train: &[Vec<f64>],
    train_labels: &[usize],
    val: &[Vec<f64>],
    val_labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if train.is_empty() || train.len() != train_labels.len() || val.len() != val_labels.len() {
        return Err(Error::Config("probe features and labels disagree".into()));
    }
    let dim = train[0].len();
    if train.iter().chain(val).any(|r| r.len() != dim) {
        return Err(Error::Config("probe feature rows differ in width".into()));
    }
    let stats = zscore_stats(train);
    let x_train = standardise(train, &stats)?;
    let mut w = Tensor::<f64>::zeros(&[dim, classes]);
    let mut b = Tensor::<f64>::zeros(&[classes]);
    let opt = AdamW {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let (mut mw, mut vw) = (Tensor::zeros(&[dim, classes]), Tensor::zeros(&[dim, classes]));
    let (mut mb, mut vb) = (Tensor::zeros(&[classes]), Tensor::zeros(&[classes]));
    let mut final_loss = f64::NAN;
    for step in 1..=cfg.steps {
        let mut g = Graph::new();
        let x = g.constant(x_train.clone());
        let wv = g.param(w.clone());
        let bv = g.param(b.clone());
        let logits = g.linear(x, wv, bv)?;
        let loss = g.cross_entropy(logits, train_labels)?;
        final_loss = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        let gw = grads.take(wv).expect("leaf");
        let gb = grads.take(bv).expect("leaf");
        opt.update(&mut w, &gw, &mut mw, &mut vw, step, cfg.lr, true);
        opt.update(&mut b, &gb, &mut mb, &mut vb, step, cfg.lr, false);
    }
    let train_accuracy = accuracy(&x_train, &w, &b, train_labels);
    let val_accuracy = if val.is_empty() {
        f64::NAN
    } else {
        accuracy(&standardise(val, &stats)?, &w, &b, val_labels)
    };
    Ok(ProbeReport {
        train_accuracy,
        val_accuracy,
        final_loss,
    })
}
