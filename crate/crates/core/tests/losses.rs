mod common;

use common::*;
use mimic_mae::tensor::{Graph, Tensor, Var};
use mimic_mae::trainer::{loss_mimic, loss_reconstruct, LossNorm};
use rand::Rng;

/// Independent scalar-loop evaluation: sum of squared differences over rows,
/// divided by the row count.
fn oracle(pred: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        for (a, b) in p.iter().zip(t) {
            total += (a - b) * (a - b);
        }
    }
    total / pred.len() as f64
}

fn flat(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

type LossFn = fn(&mut Graph<f64>, Var, Var, LossNorm) -> mimic_mae::Result<Var>;

fn eval(f: LossFn, p: &[Vec<f64>], t: &[Vec<f64>]) -> f64 {
    let mut g = Graph::new();
    let pv = g.constant(flat(p));
    let tv = g.constant(flat(t));
    let l = f(&mut g, pv, tv, LossNorm::Tokens).unwrap();
    g.value(l).data()[0]
}

#[test]
fn hand_computed_vectors() {
    let ones = vec![vec![1.0; 3]; 2];
    let zeros = vec![vec![0.0; 3]; 2];
    assert_eq!(eval(loss_reconstruct, &ones, &zeros), 3.0);
    assert_eq!(eval(loss_reconstruct, &ones, &ones), 0.0);
    let half = vec![vec![0.5; 2]; 4];
    assert_eq!(eval(loss_mimic, &half, &vec![vec![0.0; 2]; 4]), 0.5);
    assert_eq!(eval(loss_mimic, &half, &half), 0.0);
}

#[test]
fn randomized_cases_match_scalar_loops() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let rows = r.gen_range(1..20);
        let cols = r.gen_range(1..50);
        let mut m = || (0..rows).map(|_| (0..cols).map(|_| r.gen_range(-3.0..3.0)).collect()).collect::<Vec<Vec<f64>>>();
        let (p, t) = (m(), m());
        let expect = oracle(&p, &t);
        for f in [loss_reconstruct as LossFn, loss_mimic] {
            let got = eval(f, &p, &t);
            assert!((got - expect).abs() <= 1e-6 * expect.abs().max(1.0), "seed {seed}: {got} vs {expect}");
        }
    }
}

#[test]
fn mean_normalisation_divides_by_width_too() {
    let p = vec![vec![1.0; 4]; 2];
    let t = vec![vec![0.0; 4]; 2];
    let mut g = Graph::new();
    let pv = g.constant(flat(&p));
    let tv = g.constant(flat(&t));
    let l = loss_mimic(&mut g, pv, tv, LossNorm::Mean).unwrap();
    assert_eq!(g.value(l).data(), &[1.0]);
}
