//! Finite-difference verification of every differentiable operation.
//!
//! Each case builds `loss = sum(op(inputs) * R)` for a random fixed `R`, runs
//! the reverse pass, and compares each input adjoint with a central
//! difference of the same scalar evaluated on a fresh graph.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{finite_difference, rel_err, Graph, NumericsError, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;

type Build = fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>;

/// How to draw input values for a case.
#[derive(Debug, Clone, Copy)]
pub enum Domain {
    /// Uniform in `[-2, 2]`.
    Any,
    /// Uniform in `[0.5, 3]`.
    Positive,
    /// Uniform in `[-2, 2]` excluding `(-0.05, 0.05)`, away from kinks at 0.
    AwayFromZero,
}

pub struct OpCase {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    pub domain: Domain,
    pub build: Build,
}

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: &'static str,
    pub trials: usize,
    pub checked: usize,
    pub max_rel_err: f64,
}

impl CaseReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn draw(rng: &mut ChaCha8Rng, shape: &[usize], domain: Domain) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| match domain {
            Domain::Any => rng.gen_range(-2.0..2.0),
            Domain::Positive => rng.gen_range(0.5..3.0),
            Domain::AwayFromZero => {
                let v: f64 = rng.gen_range(0.05..2.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("case shape")
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "add", shapes: &[&[3, 4], &[3, 4]], domain: Domain::Any, build: |g, v| g.add(v[0], v[1]) },
        OpCase { name: "sub", shapes: &[&[3, 4], &[3, 4]], domain: Domain::Any, build: |g, v| g.sub(v[0], v[1]) },
        OpCase { name: "mul", shapes: &[&[3, 4], &[3, 4]], domain: Domain::Any, build: |g, v| g.mul(v[0], v[1]) },
        OpCase { name: "scale", shapes: &[&[5]], domain: Domain::Any, build: |g, v| Ok(g.scale(v[0], -1.7)) },
        OpCase { name: "add_scalar", shapes: &[&[5]], domain: Domain::Any, build: |g, v| Ok(g.add_scalar(v[0], 0.3)) },
        OpCase { name: "add_bias", shapes: &[&[3, 4], &[4]], domain: Domain::Any, build: |g, v| g.add_bias(v[0], v[1]) },
        OpCase { name: "mul_last", shapes: &[&[2, 3, 4], &[4]], domain: Domain::Any, build: |g, v| g.mul_last(v[0], v[1]) },
        OpCase { name: "scale_rows", shapes: &[&[3, 2, 2], &[3]], domain: Domain::Any, build: |g, v| g.scale_rows(v[0], v[1]) },
        OpCase { name: "broadcast", shapes: &[&[1]], domain: Domain::Any, build: |g, v| g.broadcast(v[0], &[2, 3]) },
        OpCase { name: "matmul", shapes: &[&[3, 4], &[4, 2]], domain: Domain::Any, build: |g, v| g.matmul(v[0], v[1]) },
        OpCase { name: "batch_matmul", shapes: &[&[2, 3, 4], &[2, 4, 2]], domain: Domain::Any, build: |g, v| g.batch_matmul(v[0], v[1]) },
        OpCase { name: "transpose", shapes: &[&[3, 4]], domain: Domain::Any, build: |g, v| g.transpose(v[0]) },
        OpCase { name: "transpose3", shapes: &[&[2, 3, 4]], domain: Domain::Any, build: |g, v| g.transpose(v[0]) },
        OpCase { name: "permute", shapes: &[&[2, 3, 4]], domain: Domain::Any, build: |g, v| g.permute(v[0], &[2, 0, 1]) },
        OpCase { name: "reshape", shapes: &[&[2, 6]], domain: Domain::Any, build: |g, v| g.reshape(v[0], &[3, 4]) },
        OpCase { name: "concat", shapes: &[&[2, 3], &[2, 2]], domain: Domain::Any, build: |g, v| g.concat(&[v[0], v[1]], 1) },
        OpCase { name: "slice", shapes: &[&[2, 5, 2]], domain: Domain::Any, build: |g, v| g.slice(v[0], 1, 1, 4) },
        OpCase { name: "sum", shapes: &[&[3, 4]], domain: Domain::Any, build: |g, v| Ok(g.sum(v[0])) },
        OpCase { name: "mean", shapes: &[&[3, 4]], domain: Domain::Any, build: |g, v| Ok(g.mean(v[0])) },
        OpCase { name: "sum_axis", shapes: &[&[2, 3, 4]], domain: Domain::Any, build: |g, v| g.sum_axis(v[0], 1) },
        OpCase { name: "mean_axis", shapes: &[&[2, 3, 4]], domain: Domain::Any, build: |g, v| g.mean_axis(v[0], 2) },
        OpCase { name: "neg", shapes: &[&[6]], domain: Domain::Any, build: |g, v| Ok(g.neg(v[0])) },
        OpCase { name: "exp", shapes: &[&[6]], domain: Domain::Any, build: |g, v| Ok(g.exp(v[0])) },
        OpCase { name: "ln", shapes: &[&[6]], domain: Domain::Positive, build: |g, v| Ok(g.ln(v[0])) },
        OpCase { name: "softplus", shapes: &[&[6]], domain: Domain::Any, build: |g, v| Ok(g.softplus(v[0])) },
        OpCase { name: "tanh", shapes: &[&[6]], domain: Domain::Any, build: |g, v| Ok(g.tanh(v[0])) },
        OpCase { name: "sigmoid", shapes: &[&[6]], domain: Domain::Any, build: |g, v| Ok(g.sigmoid(v[0])) },
        OpCase { name: "relu", shapes: &[&[6]], domain: Domain::AwayFromZero, build: |g, v| Ok(g.relu(v[0])) },
        OpCase { name: "square", shapes: &[&[6]], domain: Domain::Any, build: |g, v| Ok(g.square(v[0])) },
        OpCase { name: "sqrt", shapes: &[&[6]], domain: Domain::Positive, build: |g, v| Ok(g.sqrt(v[0])) },
        OpCase { name: "recip", shapes: &[&[6]], domain: Domain::Positive, build: |g, v| Ok(g.recip(v[0])) },
        OpCase { name: "clamp_min", shapes: &[&[6]], domain: Domain::AwayFromZero, build: |g, v| Ok(g.clamp_min(v[0], 0.0)) },
        OpCase { name: "softmax", shapes: &[&[3, 4]], domain: Domain::Any, build: |g, v| Ok(g.softmax(v[0])) },
        OpCase { name: "log_softmax", shapes: &[&[3, 4]], domain: Domain::Any, build: |g, v| Ok(g.log_softmax(v[0])) },
        OpCase { name: "layer_norm", shapes: &[&[3, 5]], domain: Domain::Any, build: |g, v| Ok(g.layer_norm(v[0], 1e-5)) },
        OpCase { name: "l2_norm", shapes: &[&[3, 4]], domain: Domain::AwayFromZero, build: |g, v| Ok(g.l2_norm(v[0])) },
        OpCase { name: "gather_last", shapes: &[&[3, 4]], domain: Domain::Any, build: |g, v| g.gather_last(v[0], &[2, 0, 3]) },
        OpCase { name: "cross_entropy", shapes: &[&[3, 4]], domain: Domain::Any, build: |g, v| g.cross_entropy(v[0], &[1, 3, 0]) },
        OpCase { name: "unfold1d", shapes: &[&[2, 7, 3]], domain: Domain::Any, build: |g, v| g.unfold1d(v[0], 7, 3, 3, 2, 1) },
    ]
}

fn weighted_loss(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var, NumericsError> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Runs `trials` randomized finite-difference comparisons for one case.
pub fn check_case(case: &OpCase, trials: usize, seed: u64) -> Result<CaseReport, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..trials {
        let inputs: Vec<Tensor> = case.shapes.iter().map(|s| draw(&mut rng, s, case.domain)).collect();

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = (case.build)(&mut g, &vars)?;
        let weights = draw(&mut rng, g.shape(out), Domain::Any);
        let loss = weighted_loss(&mut g, out, &weights)?;
        g.backward(loss)?;

        for (k, &v) in vars.iter().enumerate() {
            let analytic = g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
            let numeric = finite_difference(inputs[k].data(), FD_STEP, |probe| {
                let mut h = Graph::inference();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == k { h.constant(Tensor::new(t.shape().to_vec(), probe.to_vec()).unwrap()) } else { h.constant(t.clone()) })
                    .collect();
                let o = (case.build)(&mut h, &vs).unwrap();
                let l = weighted_loss(&mut h, o, &weights).unwrap();
                h.value(l).item()
            });
            for (a, n) in analytic.iter().zip(&numeric) {
                max_err = max_err.max(rel_err(*a, *n));
                checked += 1;
            }
        }
    }
    Ok(CaseReport { name: case.name, trials, checked, max_rel_err: max_err })
}

/// Every case, `trials` each.
pub fn check_all(trials: usize, seed: u64) -> Result<Vec<CaseReport>, NumericsError> {
    op_cases().iter().enumerate().map(|(i, c)| check_case(c, trials, seed.wrapping_add(i as u64))).collect()
}
