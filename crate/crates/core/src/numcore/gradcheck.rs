//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward rules it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Largest elementwise relative error between analytic and numeric gradients.
///
/// The relative error is `|a − n| / max(|a|, |n|, floor)`; the floor keeps
/// near-zero entries from being judged on finite-difference noise.
pub fn max_gradient_error<F>(inputs: &[Tensor], f: F, h: f64, floor: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zero(v, &g)).collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

type CaseFn = fn(&mut ChaCha8Rng) -> Result<f64>;

/// Random-input gradient checks, one per differentiable op family.
pub fn standard_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("matmul", case_matmul),
        ("matmul_t_batched", case_matmul_t),
        ("add_sub_broadcast", case_add_sub),
        ("mul_broadcast", case_mul),
        ("softmax", case_softmax),
        ("layer_norm", case_layer_norm),
        ("gelu_relu", case_activations),
        ("embedding", case_embedding),
        ("cross_entropy", case_cross_entropy),
        ("permute_reshape", case_permute),
        ("select_mean_scale", case_select),
    ]
}

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-2;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape.to_vec(), -2.0, 2.0, rng)
}

/// Reduce an arbitrary-shape output to a scalar through fixed random weights.
fn weighted_sum(g: &mut Graph<'_>, v: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(v, wv)?;
    Ok(g.sum(p))
}

fn case_matmul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, k, p) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..5));
    let w = rand_t(rng, &[n, p]);
    let ins = [rand_t(rng, &[n, k]), rand_t(rng, &[k, p])];
    max_gradient_error(&ins, |g, v| {
        let c = g.matmul(v[0], v[1])?;
        weighted_sum(g, c, &w)
    }, H, FLOOR)
}

fn case_matmul_t(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, n, k, p) = (2, rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4));
    let w = rand_t(rng, &[b, n, p]);
    let ins = [rand_t(rng, &[b, n, k]), rand_t(rng, &[b, p, k]), rand_t(rng, &[k, p])];
    max_gradient_error(&ins, |g, v| {
        let c = g.matmul_t(v[0], v[1])?;
        let d = g.matmul(v[0], v[2])?; // 2-D rhs broadcast over the batch
        let e = g.add(c, d)?;
        weighted_sum(g, e, &w)
    }, H, FLOOR)
}

fn case_add_sub(rng: &mut ChaCha8Rng) -> Result<f64> {
    let w = rand_t(rng, &[3, 4]);
    let ins = [rand_t(rng, &[3, 4]), rand_t(rng, &[4]), rand_t(rng, &[3, 1])];
    max_gradient_error(&ins, |g, v| {
        let a = g.add(v[0], v[1])?;
        let b = g.sub(a, v[2])?;
        weighted_sum(g, b, &w)
    }, H, FLOOR)
}

fn case_mul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let w = rand_t(rng, &[2, 3, 4]);
    let ins = [rand_t(rng, &[2, 3, 4]), rand_t(rng, &[3, 4]), rand_t(rng, &[1])];
    max_gradient_error(&ins, |g, v| {
        let a = g.mul(v[0], v[1])?;
        let b = g.mul(a, v[2])?;
        let c = g.mul(b, v[0])?; // reuse: accumulation path
        weighted_sum(g, c, &w)
    }, H, FLOOR)
}

fn case_softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let axis = rng.gen_range(0..2);
    let w = rand_t(rng, &[3, 5]);
    let ins = [rand_t(rng, &[3, 5])];
    max_gradient_error(&ins, |g, v| {
        let s = g.softmax(v[0], axis)?;
        weighted_sum(g, s, &w)
    }, H, FLOOR)
}

fn case_layer_norm(rng: &mut ChaCha8Rng) -> Result<f64> {
    let w = rand_t(rng, &[2, 4]);
    let ins = [rand_t(rng, &[2, 4]), rand_t(rng, &[4]), rand_t(rng, &[4])];
    max_gradient_error(&ins, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(g, y, &w)
    }, H, FLOOR)
}

fn case_activations(rng: &mut ChaCha8Rng) -> Result<f64> {
    let w = rand_t(rng, &[6]);
    let ins = [rand_t(rng, &[6])];
    max_gradient_error(&ins, |g, v| {
        let a = g.gelu(v[0]);
        let b = g.relu(v[0]);
        let c = g.add(a, b)?;
        weighted_sum(g, c, &w)
    }, H, FLOOR)
}

fn case_embedding(rng: &mut ChaCha8Rng) -> Result<f64> {
    let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(0..4)).collect();
    let w = rand_t(rng, &[5, 3]);
    let ins = [rand_t(rng, &[4, 3])];
    max_gradient_error(&ins, |g, v| {
        let e = g.embedding(v[0], &ids)?;
        weighted_sum(g, e, &w)
    }, H, FLOOR)
}

fn case_cross_entropy(rng: &mut ChaCha8Rng) -> Result<f64> {
    let vocab = 6;
    let mut targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..vocab)).collect();
    targets[1] = vocab; // ignored position
    let ins = [rand_t(rng, &[4, vocab])];
    max_gradient_error(&ins, |g, v| g.cross_entropy(v[0], &targets, Some(vocab)), H, FLOOR)
}

fn case_permute(rng: &mut ChaCha8Rng) -> Result<f64> {
    let w = rand_t(rng, &[4, 2, 3]);
    let ins = [rand_t(rng, &[2, 3, 4])];
    max_gradient_error(&ins, |g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        let r = g.reshape(p, vec![4, 6])?;
        let r = g.reshape(r, vec![4, 2, 3])?;
        weighted_sum(g, r, &w)
    }, H, FLOOR)
}

fn case_select(rng: &mut ChaCha8Rng) -> Result<f64> {
    let idx = rng.gen_range(0..5);
    let ins = [rand_t(rng, &[5]), rand_t(rng, &[2, 2])];
    max_gradient_error(&ins, |g, v| {
        let s = g.select(v[0], idx)?;
        let m = g.mul(v[1], s)?;
        let m = g.scale(m, -1.5);
        Ok(g.mean(m))
    }, H, FLOOR)
}

/// Run `trials` random checks cycling through [`standard_cases`]; returns
/// `(case name, max relative error)` for each trial.
pub fn run_random_checks(trials: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let cases = standard_cases();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|i| {
            let (name, f) = cases[i % cases.len()];
            f(&mut rng).map(|e| (name, e))
        })
        .collect()
}
