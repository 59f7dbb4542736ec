//! Built-in checks: finite-difference gradients of every graph operator
//! and the β-NLL loss, plus the aggregation-weight, β-NLL, and gate fixtures.

use pfin_core::federation::weights_from_stats;
use pfin_core::gradcheck::check_gradients;
use pfin_core::pfin::{beta_nll, beta_nll_loss, uncertainty_gate, ImputationNodes, ImputationOutput};
use pfin_core::{Graph, NodeId, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            passed,
            detail,
        }
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
    t
}

/// `sum(out ⊙ r)` for a fixed random `r`, so every output element matters.
fn project(g: &mut Graph, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = g.constant(random(g.shape(out), &mut rng));
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

/// Worst relative gradient error of `build` over `points` random inputs.
fn worst_error<F>(shapes: &[&[usize]], points: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId], u64) -> Result<NodeId>,
{
    let mut worst = 0.0f64;
    for seed in 0..points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let report = check_gradients(&inputs, GRAD_STEP, |g, ids| build(g, ids, seed))?;
        worst = worst.max(report.max_relative_error());
    }
    Ok(worst)
}

type Build = fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

const OPERATORS: &[(&str, &[&[usize]], Build)] = &[
    ("matmul", &[&[3, 4], &[4, 2]], |g, x| g.matmul(x[0], x[1])),
    ("linear", &[&[2, 3, 4], &[4, 5], &[5]], |g, x| g.linear(x[0], x[1], Some(x[2]))),
    ("add", &[&[3, 2], &[3, 2]], |g, x| g.add(x[0], x[1])),
    ("sub", &[&[3, 2], &[3, 2]], |g, x| g.sub(x[0], x[1])),
    ("mul", &[&[3, 2], &[3, 2]], |g, x| g.mul(x[0], x[1])),
    ("scale", &[&[5]], |g, x| Ok(g.scale(x[0], -1.7))),
    ("exp", &[&[5]], |g, x| Ok(g.exp(x[0]))),
    ("sigmoid", &[&[5]], |g, x| Ok(g.sigmoid(x[0]))),
    ("gelu", &[&[2, 5]], |g, x| Ok(g.gelu(x[0]))),
    ("square", &[&[5]], |g, x| Ok(g.square(x[0]))),
    ("clamp", &[&[2, 6]], |g, x| Ok(g.clamp(x[0], -1.0, 1.0))),
    ("softmax", &[&[3, 5]], |g, x| Ok(g.softmax(x[0]))),
    ("layer_norm", &[&[3, 6], &[6], &[6]], |g, x| g.layer_norm(x[0], x[1], x[2], 1e-5)),
    ("l2_normalize", &[&[3, 4]], |g, x| Ok(g.l2_normalize(x[0], 1e-12))),
    ("sum", &[&[3, 4]], |g, x| {
        let s = g.sum(x[0]);
        Ok(g.square(s))
    }),
    ("mean", &[&[3, 4]], |g, x| {
        let s = g.mean(x[0]);
        Ok(g.exp(s))
    }),
    ("concat", &[&[2, 3, 4], &[2, 1, 4]], |g, x| g.concat(x[0], x[1], 1)),
    ("select", &[&[2, 3, 4]], |g, x| g.select(x[0], 1, 2)),
    ("reshape", &[&[2, 6]], |g, x| g.reshape(x[0], &[3, 4])),
    ("expand", &[&[1, 4]], |g, x| g.expand(x[0], 3)),
    ("attention", &[&[2, 2, 4], &[2, 3, 4], &[2, 3, 4]], |g, x| g.attention(x[0], x[1], x[2], 2)),
];

/// Finite-difference check of every operator, the BCE loss, and the β-NLL
/// loss with its stop-gradient weight held fixed, at `points` random inputs.
pub fn gradient_suite(points: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let mut record = |name: &str, err: Result<f64>| {
        out.push(match err {
            Ok(e) => Check::new(name, e < GRAD_TOL, format!("max relative error {e:.2e}")),
            Err(e) => Check::new(name, false, e.to_string()),
        })
    };
    for (name, shapes, build) in OPERATORS {
        record(
            name,
            worst_error(shapes, points, |g, ids, seed| {
                let y = build(g, ids)?;
                project(g, y, seed)
            }),
        );
    }
    record(
        "bce_with_logits",
        worst_error(&[&[4, 3]], points, |g, ids, seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let mut targets = Tensor::zeros(&[4, 3]);
            targets.data_mut().iter_mut().for_each(|v| *v = f64::from(rng.random_bool(0.5)));
            let t = g.constant(targets);
            g.bce_with_logits(ids[0], t)
        }),
    );
    record("beta_nll", beta_nll_gradients(points, 0.5));
    out
}

/// Analytic gradients of the β-NLL graph against finite differences of the
/// same objective with `exp(β·log σ²)` frozen at the evaluation point.
fn beta_nll_gradients(points: u64, beta: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mu, lv, z) = (random(&[2, 5], &mut rng), random(&[2, 5], &mut rng), random(&[2, 5], &mut rng));
        let frozen = lv.map(|v| (beta * v).exp());

        let mut g = Graph::new();
        let nodes = ImputationNodes {
            mu: g.variable(mu.clone()),
            log_var: g.variable(lv.clone()),
        };
        let t = g.constant(z.clone());
        let loss = beta_nll_loss(&mut g, nodes, t, beta)?;
        let grads = g.backward(loss)?;
        let analytic: Vec<f64> = [nodes.mu, nodes.log_var]
            .iter()
            .flat_map(|&id| grads.get(id).map(|t| t.data().to_vec()).unwrap_or_default())
            .collect();

        let mut numeric = Vec::with_capacity(analytic.len());
        let frozen_loss = |m: &Tensor, l: &Tensor| -> f64 {
            (0..m.len())
                .map(|i| {
                    let (m, l, y) = (m.data()[i], l.data()[i], z.data()[i]);
                    frozen.data()[i] * 0.5 * (l + (y - m) * (y - m) * (-l).exp())
                })
                .sum::<f64>()
                / m.len() as f64
        };
        for which in 0..2 {
            for i in 0..mu.len() {
                let (mut up, mut down) = ([mu.clone(), lv.clone()], [mu.clone(), lv.clone()]);
                up[which].data_mut()[i] += GRAD_STEP;
                down[which].data_mut()[i] -= GRAD_STEP;
                numeric.push((frozen_loss(&up[0], &up[1]) - frozen_loss(&down[0], &down[1])) / (2.0 * GRAD_STEP));
            }
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        worst = worst.max(if scale > 0.0 { norm(&diff) / scale } else { norm(&diff) });
    }
    Ok(worst)
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Check {
    Check::new(name, (got - want).abs() <= tol, format!("got {got:.9}, expected {want} ± {tol:e}"))
}

/// Fed-UQ-Avg weights at n=(100,300), σ̄²=(0.1,0.5), T=0.2, α=0.6.
pub fn weight_fixtures() -> Vec<Check> {
    match weights_from_stats(&[100, 300], &[0.1, 0.5], 0.6, 0.2) {
        Ok(w) => vec![
            close("fed_uq_avg lambda[0]", w.lambda[0], 0.628_478, 1e-6),
            close("fed_uq_avg lambda[1]", w.lambda[1], 0.371_522, 1e-6),
        ],
        Err(e) => vec![Check::new("fed_uq_avg weights", false, e.to_string())],
    }
}

fn single(mu: f64, log_var: f64) -> ImputationOutput {
    ImputationOutput {
        mu: Tensor::scalar(mu).reshape(&[1, 1]).expect("1x1"),
        log_var: Tensor::scalar(log_var).reshape(&[1, 1]).expect("1x1"),
    }
}

pub fn beta_nll_fixtures() -> Vec<Check> {
    let one = |v: f64| Tensor::scalar(v).reshape(&[1, 1]).expect("1x1");
    let unit = beta_nll(&single(0.0, 0.0), &one(1.0), 0.5);
    let at_mean = beta_nll(&single(0.3, 1.0), &one(0.3), 0.5);
    match (unit, at_mean) {
        (Ok(a), Ok(b)) => vec![
            Check::new("beta_nll(z=1, mu=0, var=1)", a == 0.5, format!("got {a}, expected exactly 0.5")),
            close("beta_nll(z=mu, var=e, beta=0.5)", b, 0.824_361, 1e-6),
        ],
        (Err(e), _) | (_, Err(e)) => vec![Check::new("beta_nll fixtures", false, e.to_string())],
    }
}

pub fn gate_fixtures() -> Vec<Check> {
    let g = uncertainty_gate(&Tensor::vector(vec![0.0, -2.0]).expect("vector"));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut violations = 0;
    for _ in 0..1000 {
        let (a, b): (f64, f64) = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let pair = uncertainty_gate(&Tensor::vector(vec![a.min(b), a.max(b)]).expect("vector"));
        if a != b && pair.data()[0] <= pair.data()[1] {
            violations += 1;
        }
    }
    vec![
        Check::new("gate(var=1)", g.data()[0] == 0.5, format!("got {}, expected exactly 0.5", g.data()[0])),
        close("gate(log_var=-2)", g.data()[1], 0.880_797, 1e-6),
        Check::new(
            "gate strictly decreasing",
            violations == 0,
            format!("{violations} of 1000 random pairs out of order"),
        ),
    ]
}

pub fn run_all(points: u64) -> Vec<Check> {
    let mut all = gradient_suite(points);
    all.extend(weight_fixtures());
    all.extend(beta_nll_fixtures());
    all.extend(gate_fixtures());
    all
}
