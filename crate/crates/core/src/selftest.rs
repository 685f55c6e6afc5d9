//! Built-in verification suites: finite-difference gradient checks for
//! every differentiable op and composite path, and Gumbel sampler
//! frequency checks.

use rand::Rng as _;
use serde::Serialize;

use crate::generator::{
    choice_probabilities, gumbel_softmax, gumbel_softmax_with_noise, sample_gumbel, AugChoice,
    NUM_CHOICES,
};
use crate::gin::{gin_layer, GinStack, Mlp};
use crate::gradcheck::{check_gradients, GradCheckConfig};
use crate::graph::Topology;
use crate::losses::{classification_loss, nt_xent, similarity_of};
use crate::params::ParamStore;
use crate::rng::{stream, Rng};
use crate::tensor::{TResult, Tensor};

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn uniform(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn param(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::param(uniform(rng, shape.iter().product(), lo, hi), shape).unwrap()
}

/// Weighted sum against a fixed random tensor, so every output entry
/// carries a distinct upstream gradient.
fn probe(y: &Tensor, weights: &Tensor) -> TResult<Tensor> {
    Ok(y.reshape(&[y.numel()])?.mul(weights)?.sum())
}

type Case = Box<dyn Fn(&mut Rng) -> (Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> TResult<Tensor>>)>;

fn unary(f: impl Fn(&Tensor) -> TResult<Tensor> + Clone + 'static, lo: f64, hi: f64) -> Case {
    Box::new(move |rng| {
        let (r, c) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let x = param(rng, &[r, c], lo, hi);
        let f = f.clone();
        let out_len = f(&x).unwrap().numel();
        let w = Tensor::new(uniform(rng, out_len, -1.0, 1.0), &[out_len]).unwrap();
        (
            vec![x],
            Box::new(move |ins: &[Tensor]| probe(&f(&ins[0])?, &w)),
        )
    })
}

fn binary(
    f: impl Fn(&Tensor, &Tensor) -> TResult<Tensor> + Clone + 'static,
    broadcast: bool,
    positive_rhs: bool,
) -> Case {
    Box::new(move |rng| {
        let (r, c) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let a = param(rng, &[r, c], -2.0, 2.0);
        let rhs_shape: Vec<usize> = match (broadcast, rng.gen_range(0..3)) {
            (true, 0) => vec![c],
            (true, 1) => vec![r, 1],
            _ => vec![r, c],
        };
        let b = if positive_rhs {
            param(rng, &rhs_shape, 0.5, 2.0)
        } else {
            param(rng, &rhs_shape, -2.0, 2.0)
        };
        let f = f.clone();
        let out_len = f(&a, &b).unwrap().numel();
        let w = Tensor::new(uniform(rng, out_len, -1.0, 1.0), &[out_len]).unwrap();
        (
            vec![a, b],
            Box::new(move |ins: &[Tensor]| probe(&f(&ins[0], &ins[1])?, &w)),
        )
    })
}

fn random_topology(rng: &mut Rng, n: usize, graphs: usize) -> Topology {
    let mut batch_vector: Vec<usize> = (0..n).map(|i| i * graphs / n).collect();
    batch_vector.sort_unstable();
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for _ in 0..2 * n {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b && batch_vector[a] == batch_vector[b] {
            src.extend([a, b]);
            dst.extend([b, a]);
        }
    }
    Topology {
        num_nodes: n,
        num_graphs: graphs,
        src,
        dst,
        batch_vector,
    }
}

fn cases() -> Vec<(&'static str, Case)> {
    let mut v: Vec<(&'static str, Case)> = vec![
        ("add", binary(|a, b| a.add(b), true, false)),
        ("sub", binary(|a, b| a.sub(b), true, false)),
        ("mul", binary(|a, b| a.mul(b), true, false)),
        ("div", binary(|a, b| a.div(b), true, true)),
        (
            "matmul",
            Box::new(|rng: &mut Rng| {
                let (m, k, n) = (
                    rng.gen_range(1..5),
                    rng.gen_range(1..5),
                    rng.gen_range(1..5),
                );
                let a = param(rng, &[m, k], -2.0, 2.0);
                let b = param(rng, &[k, n], -2.0, 2.0);
                let w = Tensor::new(uniform(rng, m * n, -1.0, 1.0), &[m * n]).unwrap();
                (
                    vec![a, b],
                    Box::new(move |ins: &[Tensor]| probe(&ins[0].matmul(&ins[1])?, &w)),
                )
            }),
        ),
        ("neg", unary(|x| Ok(x.neg()), -2.0, 2.0)),
        ("exp", unary(|x| Ok(x.exp()), -2.0, 2.0)),
        ("log", unary(|x| x.log(), 0.2, 3.0)),
        ("relu", unary(|x| Ok(x.relu()), -2.0, 2.0)),
        ("powf", unary(|x| Ok(x.powf(2.5)), 0.2, 2.0)),
        ("scale", unary(|x| Ok(x.scale(-1.7)), -2.0, 2.0)),
        ("add_scalar", unary(|x| x.add_scalar(0.3).mul(x), -2.0, 2.0)),
        (
            "reshape",
            unary(
                |x| {
                    x.reshape(&[x.numel(), 1])?
                        .mul(&x.reshape(&[x.numel(), 1])?)
                },
                -2.0,
                2.0,
            ),
        ),
        (
            "transpose",
            unary(|x| x.transpose()?.exp().matmul(x), -1.0, 1.0),
        ),
        (
            "concat_rows",
            unary(|x| Tensor::concat_rows(&[x, &x.exp(), x]), -2.0, 2.0),
        ),
        (
            "select_cols",
            unary(
                |x| {
                    let c = x.shape()[1];
                    x.select_cols(&[c - 1, 0, c - 1])
                },
                -2.0,
                2.0,
            ),
        ),
        ("sum", unary(|x| Ok(x.exp().sum()), -2.0, 2.0)),
        ("mean", unary(|x| Ok(x.exp().mean()), -2.0, 2.0)),
        ("row_sum", unary(|x| x.exp().row_sum(), -2.0, 2.0)),
        ("row_mean", unary(|x| x.exp().row_mean(), -2.0, 2.0)),
        ("softmax_rows", unary(|x| x.softmax_rows(), -3.0, 3.0)),
        (
            "log_softmax_rows",
            unary(|x| x.log_softmax_rows(), -3.0, 3.0),
        ),
        (
            "normalize_rows",
            unary(|x| x.normalize_rows(1e-12), 0.1, 2.0),
        ),
        (
            "scatter_sum",
            unary(
                |x| {
                    let n = x.shape()[0];
                    let idx: Vec<usize> = (0..n).map(|i| (i * 7 + 1) % 3).collect();
                    x.exp().scatter_sum(&idx, 3)
                },
                -2.0,
                2.0,
            ),
        ),
        (
            "gather_rows",
            unary(
                |x| {
                    let n = x.shape()[0];
                    x.exp().gather_rows(&[n - 1, 0, n - 1])
                },
                -2.0,
                2.0,
            ),
        ),
        (
            "segment_mean",
            unary(
                |x| {
                    let n = x.shape()[0];
                    let idx: Vec<usize> = (0..n).map(|i| i % 2).collect();
                    x.exp().segment_mean(&idx, 2)
                },
                -2.0,
                2.0,
            ),
        ),
        (
            "pick_per_row",
            unary(
                |x| {
                    let (n, c) = (x.shape()[0], x.shape()[1]);
                    x.exp()
                        .pick_per_row(&(0..n).map(|i| i % c).collect::<Vec<_>>())
                },
                -2.0,
                2.0,
            ),
        ),
        (
            "cross_entropy",
            unary(
                |x| {
                    let (n, c) = (x.shape()[0], x.shape()[1]);
                    x.cross_entropy(&(0..n).map(|i| (i * 3) % c).collect::<Vec<_>>())
                },
                -3.0,
                3.0,
            ),
        ),
    ];
    v.push((
        "cosine_rows",
        Box::new(|rng: &mut Rng| {
            let (r, c) = (rng.gen_range(1..5), rng.gen_range(2..5));
            let a = param(rng, &[r, c], 0.1, 2.0);
            let b = param(rng, &[r, c], -2.0, 2.0);
            let w = Tensor::new(uniform(rng, r, -1.0, 1.0), &[r]).unwrap();
            (
                vec![a, b],
                Box::new(move |ins: &[Tensor]| probe(&ins[0].cosine_rows(&ins[1], 1e-12)?, &w)),
            )
        }),
    ));
    v.push((
        "gin_layer",
        Box::new(|rng: &mut Rng| {
            let n = rng.gen_range(2..8);
            let graphs = rng.gen_range(1..3usize).min(n);
            let topo = random_topology(rng, n, graphs);
            let mut store = ParamStore::new();
            let mlp = Mlp::new(&mut store, "m", [3, 4, 2], rng).unwrap();
            let eps = store
                .register("eps", vec![rng.gen_range(-0.5..0.5)], &[1])
                .unwrap();
            let h = param(rng, &[n, 3], -2.0, 2.0);
            let w = Tensor::new(uniform(rng, n * 2, -1.0, 1.0), &[n * 2]).unwrap();
            let mut inputs = vec![h];
            inputs.extend(store.iter().map(|p| p.tensor.clone()));
            (
                inputs,
                Box::new(move |ins: &[Tensor]| probe(&gin_layer(&ins[0], &topo, &eps, &mlp)?, &w)),
            )
        }),
    ));
    v.push((
        "generator_soft_path",
        Box::new(|rng: &mut Rng| {
            let n = rng.gen_range(2..8);
            let topo = random_topology(rng, n, 1);
            let mut store = ParamStore::new();
            let stack = GinStack::new(&mut store, "g", 2, 4, NUM_CHOICES, 2, rng).unwrap();
            let x = param(rng, &[n, 2], -1.0, 1.0);
            let noise = sample_gumbel(n * NUM_CHOICES, rng);
            let w = Tensor::new(uniform(rng, n * 2, -1.0, 1.0), &[n * 2]).unwrap();
            let mut inputs = vec![x];
            inputs.extend(store.iter().map(|p| p.tensor.clone()));
            (
                inputs,
                Box::new(move |ins: &[Tensor]| {
                    let logits = stack.forward(&ins[0], &topo, false)?;
                    let choices = gumbel_softmax_with_noise(&logits, 0.7, &noise)?;
                    let keep = choices.relaxed.select_cols(&[AugChoice::Keep.column()])?;
                    probe(&ins[0].mul(&keep)?, &w)
                }),
            )
        }),
    ));
    v.push((
        "nt_xent",
        Box::new(|rng: &mut Rng| {
            let pairs = rng.gen_range(1..5);
            let h = rng.gen_range(2..5);
            let z = param(rng, &[2 * pairs, h], 0.1, 2.0);
            let tau = rng.gen_range(0.2..1.0);
            (
                vec![z],
                Box::new(move |ins: &[Tensor]| nt_xent(&ins[0], tau)),
            )
        }),
    ));
    v.push((
        "similarity_loss",
        Box::new(|rng: &mut Rng| {
            let n = rng.gen_range(1..6);
            let a = param(rng, &[n, NUM_CHOICES], -2.0, 2.0);
            let b = param(rng, &[n, NUM_CHOICES], -2.0, 2.0);
            (
                vec![a, b],
                Box::new(|ins: &[Tensor]| {
                    similarity_of(&ins[0].softmax_rows()?, &ins[1].softmax_rows()?)
                }),
            )
        }),
    ));
    v.push((
        "classification_loss",
        Box::new(|rng: &mut Rng| {
            let (n, c) = (rng.gen_range(1..5), rng.gen_range(2..4));
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let ins = vec![
                param(rng, &[n, c], -2.0, 2.0),
                param(rng, &[n, c], -2.0, 2.0),
                param(rng, &[n, c], -2.0, 2.0),
            ];
            (
                ins,
                Box::new(move |t: &[Tensor]| classification_loss(&t[0], &t[1], &t[2], &labels)),
            )
        }),
    ));
    v
}

/// Names of every case in the gradient suite.
pub fn gradient_case_names() -> Vec<&'static str> {
    let mut names: Vec<&'static str> = cases().into_iter().map(|(n, _)| n).collect();
    names.push("straight_through");
    names
}

/// Finite-difference checks, `trials` random instances per case.
/// `straight_through` has a deliberately non-differentiable forward, so it
/// is checked against its identity surrogate instead.
pub fn gradient_suite(trials: usize, seed: u64) -> Vec<CheckOutcome> {
    let cfg = GradCheckConfig::default();
    let mut out = Vec::new();
    for (name, case) in cases() {
        let mut rng = stream(seed, &["gradcheck", name]);
        let mut checked = 0;
        let mut failures = 0;
        let mut worst: f64 = 0.0;
        let mut error = None;
        for _ in 0..trials {
            let (inputs, f) = case(&mut rng);
            match check_gradients(|ins| f(ins), &inputs, cfg) {
                Ok(r) => {
                    checked += r.checked;
                    failures += r.failures;
                    worst = worst.max(r.max_rel_error);
                }
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            }
        }
        out.push(CheckOutcome {
            suite: "gradient",
            name: name.to_string(),
            passed: error.is_none() && failures == 0 && checked > 0,
            detail: error.unwrap_or_else(|| {
                format!("{trials} trials, {checked} entries, {failures} failures, max rel err {worst:.2e}")
            }),
        });
    }
    let mut rng = stream(seed, &["gradcheck", "straight_through"]);
    let mut ok = true;
    for _ in 0..trials {
        let x = param(&mut rng, &[3, 3], -2.0, 2.0);
        let hard: Vec<f64> = (0..9).map(|i| f64::from(i % 4 == 0)).collect();
        let w = uniform(&mut rng, 9, -1.0, 1.0);
        let y = x.straight_through(hard.clone()).unwrap();
        ok &= y.to_vec() == hard;
        probe(&y, &Tensor::new(w.clone(), &[9]).unwrap())
            .unwrap()
            .backward()
            .unwrap();
        ok &= x.grad().unwrap() == w;
    }
    out.push(CheckOutcome {
        suite: "gradient",
        name: "straight_through".into(),
        passed: ok,
        detail: format!("{trials} trials: forward exactly hard, backward exactly upstream"),
    });
    out
}

/// Empirical Gumbel-softmax choice frequencies against `softmax(logits)`.
pub fn sampler_suite(vectors: usize, draws: usize, seed: u64, l1_tol: f64) -> Vec<CheckOutcome> {
    let mut rng = stream(seed, &["sampler"]);
    (0..vectors)
        .map(|v| {
            let logits: Vec<f64> = uniform(&mut rng, NUM_CHOICES, -2.0, 2.0);
            let p = choice_probabilities(&logits);
            let rows: Vec<f64> = logits
                .iter()
                .copied()
                .cycle()
                .take(draws * NUM_CHOICES)
                .collect();
            let t = Tensor::new(rows, &[draws, NUM_CHOICES]).unwrap();
            let m = gumbel_softmax(&t, 1.0, &mut rng).unwrap();
            let st = m.straight_through.to_vec();
            let one_hot = st
                .chunks(NUM_CHOICES)
                .all(|r| r.iter().all(|&x| x == 0.0 || x == 1.0) && r.iter().sum::<f64>() == 1.0);
            let counts = m.counts();
            let l1: f64 = (0..NUM_CHOICES)
                .map(|k| (counts[k] as f64 / draws as f64 - p[k]).abs())
                .sum();
            CheckOutcome {
                suite: "sampler",
                name: format!("logits#{v}"),
                passed: one_hot && l1 < l1_tol,
                detail: format!("L1 {l1:.4} (tol {l1_tol}), one-hot {one_hot}"),
            }
        })
        .collect()
}

/// The full suite run by the `selftest` command.
pub fn run_selftest(seed: u64) -> Vec<CheckOutcome> {
    let mut out = gradient_suite(20, seed);
    out.extend(sampler_suite(10, 10_000, seed, 0.03));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let failed: Vec<_> = gradient_suite(3, 11)
            .into_iter()
            .filter(|c| !c.passed)
            .collect();
        assert!(failed.is_empty(), "{failed:#?}");
        assert!(sampler_suite(2, 5000, 3, 0.05).iter().all(|c| c.passed));
    }
}
