//! Shared oracles and checking harness used by the test suites.
//!
//! Everything here is an independent implementation: plain loops and closed
//! forms that deliberately avoid the code paths they are used to check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::compute::{Tape, Tensor, TensorId};

/// Outcome of one oracle comparison, serializable as a JSON line.
#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub max_abs_dev: f64,
    pub max_rel_dev: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub seed: u64,
}

impl OracleReport {
    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// |a−b| relative to the larger magnitude, floored to keep tiny values sane.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / scale
}

/// Gradient-check deviation metric: relative above unit magnitude, absolute
/// below it. An f32 forward pass resolves central differences to roughly
/// 1e-4 absolute at h=1e-3, so sub-unit gradients are held to that scale
/// rather than to a meaningless pure ratio.
pub fn grad_dev(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1.0)
}

/// Central finite differences against reverse-mode gradients.
///
/// `build` must construct a scalar loss from leaf nodes created for each
/// input tensor. Every coordinate of every input is probed; accumulation is
/// in f64 over the f32 forward values.
pub fn fd_gradient_check(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
    h: f64,
    tol: f64,
) -> OracleReport {
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    fd_gradient_check_coords(name, inputs, build, &coords, h, tol, 0)
}

/// Finite-difference check restricted to sampled coordinates with a
/// non-negligible analytic gradient (f32 forward noise swamps smaller ones).
#[allow(clippy::too_many_arguments)]
pub fn fd_gradient_check_sampled(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
    n_coords: usize,
    min_grad: f64,
    h: f64,
    tol: f64,
    seed: u64,
) -> OracleReport {
    let (grads, _) = analytic_grads(inputs, &build);
    let mut eligible: Vec<(usize, usize)> = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        for (j, &gv) in g.data().iter().enumerate() {
            if (gv as f64).abs() >= min_grad {
                eligible.push((i, j));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(n_coords);
    for _ in 0..n_coords.min(eligible.len()) {
        coords.push(eligible.swap_remove(rng.gen_range(0..eligible.len())));
    }
    fd_gradient_check_coords(name, inputs, build, &coords, h, tol, seed)
}

fn analytic_grads(
    inputs: &[Tensor],
    build: &impl Fn(&mut Tape, &[TensorId]) -> TensorId,
) -> (Vec<Tensor>, f64) {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    let value = tape.precise_value(loss);
    let grads = tape.backward(loss);
    let out = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    (out, value)
}

fn eval_loss(
    inputs: &[Tensor],
    build: &impl Fn(&mut Tape, &[TensorId]) -> TensorId,
) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    tape.precise_value(loss)
}

fn fd_gradient_check_coords(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
    coords: &[(usize, usize)],
    h: f64,
    tol: f64,
    seed: u64,
) -> OracleReport {
    let (grads, _) = analytic_grads(inputs, &build);
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    for &(i, j) in coords {
        let orig = inputs[i].data()[j];
        let plus = (orig as f64 + h) as f32;
        let minus = (orig as f64 - h) as f32;

        let mut probe = inputs.to_vec();
        probe[i].data_mut()[j] = plus;
        let f_plus = eval_loss(&probe, &build);
        probe[i].data_mut()[j] = minus;
        let f_minus = eval_loss(&probe, &build);

        let span = plus as f64 - minus as f64;
        let fd = (f_plus - f_minus) / span;
        let analytic = grads[i].data()[j] as f64;
        max_abs = max_abs.max((fd - analytic).abs());
        max_rel = max_rel.max(grad_dev(fd, analytic));
    }
    OracleReport {
        name: name.to_string(),
        max_abs_dev: max_abs,
        max_rel_dev: max_rel,
        tolerance: tol,
        pass: max_rel < tol,
        seed,
    }
}

/// Exhaustive integer evaluation of the spiking attention product
/// (Q'·K'ᵀ)·V for binary operands shaped `[T, d]`.
pub fn attention_product_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let t = q.shape()[0];
    let d = q.shape()[1];
    assert_eq!(k.shape(), q.shape());
    assert_eq!(v.shape(), q.shape());
    let at = |m: &Tensor, i: usize, j: usize| m.data()[i * d + j] as i64;
    let mut out = vec![0.0f32; t * d];
    for i in 0..t {
        for j in 0..d {
            let mut acc: i64 = 0;
            for tp in 0..t {
                let mut score: i64 = 0;
                for c in 0..d {
                    score += at(q, i, c) * at(k, tp, c);
                }
                acc += score * at(v, tp, j);
            }
            out[i * d + j] = acc as f32;
        }
    }
    Tensor::new(vec![t, d], out).expect("sized")
}

/// Block-summation rebinning oracle: each coarse bin is the plain sum of the
/// `factor` fine bins it covers.
pub fn block_sum_oracle(dense: &[f32], t_from: usize, n: usize, factor: usize) -> Vec<f32> {
    assert_eq!(dense.len(), t_from * n);
    assert!(factor > 0 && t_from % factor == 0);
    let t_to = t_from / factor;
    let mut out = vec![0.0f32; t_to * n];
    for tc in 0..t_to {
        for f in 0..factor {
            let src = &dense[(tc * factor + f) * n..(tc * factor + f + 1) * n];
            let dst = &mut out[tc * n..(tc + 1) * n];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

/// One paired seed comparison row.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub seed: u64,
    pub a: f64,
    pub b: f64,
}

/// Paired comparison of two runs across seeds.
#[derive(Clone, Debug, Serialize)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
    pub mean_gap: f64,
}

/// Run two experiments on identical per-seed conditions and tally wins.
pub fn seed_sweep_compare(
    seeds: &[u64],
    run_a: impl Fn(u64) -> f64,
    run_b: impl Fn(u64) -> f64,
) -> SweepOutcome {
    let mut rows = Vec::with_capacity(seeds.len());
    let (mut wins_a, mut wins_b, mut ties) = (0, 0, 0);
    let mut gap = 0.0;
    for &seed in seeds {
        let a = run_a(seed);
        let b = run_b(seed);
        if a > b {
            wins_a += 1;
        } else if b > a {
            wins_b += 1;
        } else {
            ties += 1;
        }
        gap += a - b;
        rows.push(SweepRow { seed, a, b });
    }
    SweepOutcome {
        rows,
        wins_a,
        wins_b,
        ties,
        mean_gap: if seeds.is_empty() { 0.0 } else { gap / seeds.len() as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        // loss = Σ x², grad = 2x; exact for quadratics up to fp noise.
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let report = fd_gradient_check(
            "quadratic",
            &[x],
            |tape, ids| {
                let sq = tape.mul(ids[0], ids[0]).unwrap();
                tape.sum(sq)
            },
            0.25, // central differences are exact for quadratics at any h
            1e-6,
        );
        assert!(report.pass, "{}", report.json_line());
    }

    #[test]
    fn sweep_ties_on_identical_runs() {
        let out = seed_sweep_compare(&[1, 2, 3], |s| s as f64, |s| s as f64);
        assert_eq!(out.ties, 3);
        assert_eq!(out.wins_a, 0);
        assert_eq!(out.mean_gap, 0.0);
        assert_eq!(out.rows.len(), 3);
    }
}
