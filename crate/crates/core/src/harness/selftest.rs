//! Fast property suite run by `duo selftest`.

use serde::Serialize;

use crate::autodiff::{finite_difference, max_relative_error, Tape};
use crate::error::Result;
use crate::fusion::{fuse_depth, uncertainty_regression_loss, HeadSet};
use crate::geometric::{
    edge_weight, interior, ncl_graph, normal_consistency_loss, normal_field, sobel_gradients, DepthMap, ImageGrid,
};
use crate::linalg::{min_eigen_sym, solve_dense, symmetrize};
use crate::rng::Rng;
use crate::semantic::{
    approx_matrix, cfl_graph, conjugate_focal_loss, entropy, focal_loss, jacobian_g, lf_decompose, softmax, y0_approx,
    y0_exact, BracketForm, CflGradient, FocalParams, Logits, OneHot, ProbVector,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub detail: String,
}

fn random_logits(rng: &mut Rng, c: usize, scale: f64) -> Logits {
    Logits::new((0..c).map(|_| rng.uniform_in(-scale, scale)).collect()).expect("finite logits")
}

fn lf_identity(rng: &mut Rng) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let c = rng.int_in(2, 10);
        let h = random_logits(rng, c, 5.0);
        let y = OneHot::new(rng.int_in(0, c - 1), c)?;
        let fp = FocalParams::new(rng.uniform_in(0.5, 4.0), rng.int_in(0, 3) as f64)?;
        let (f, g) = lf_decompose(&h, fp);
        worst = worst.max((f - g[y.index()] - focal_loss(&h, &y, fp)?).abs());
    }
    Ok(Check { name: "lf_identity", passed: worst <= 1e-10, detail: format!("max |error| {worst:.2e}") })
}

fn jacobian_psd(rng: &mut Rng) -> Result<Check> {
    let mut lowest = f64::INFINITY;
    for _ in 0..2000 {
        let c = rng.int_in(2, 10);
        let fp = FocalParams::new(rng.uniform_in(0.5, 4.0), 2.0)?;
        let j = jacobian_g(&softmax(&random_logits(rng, c, 6.0)), fp)?;
        let scaled = j.map(|v| v / fp.alpha);
        lowest = lowest.min(min_eigen_sym(&symmetrize(&scaled)?)?);
    }
    Ok(Check { name: "jacobian_psd", passed: lowest >= -1e-8, detail: format!("min eigenvalue {lowest:.3e}") })
}

fn conjugate_reductions(rng: &mut Rng) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = rng.int_in(2, 10);
        let p = softmax(&random_logits(rng, c, 4.0));
        let alpha = rng.uniform_in(0.5, 4.0);
        let ce = conjugate_focal_loss(&p, FocalParams::new(alpha, 0.0)?)?;
        worst = worst.max((ce - alpha * entropy(&p)).abs());
        let u = ProbVector::uniform(c);
        let y = y0_exact(&u, FocalParams::new(alpha, 2.0)?)?;
        worst = worst.max(y.iter().zip(u.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        // residual of A y = p with the approximate bracket
        let fp = FocalParams::new(alpha, 2.0)?;
        let y = y0_approx(&p, fp)?;
        let a = approx_matrix(&p, fp.gamma, BracketForm::Outer);
        let ay = a.matvec(&y)?;
        worst = worst.max(ay.iter().zip(p.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let direct = solve_dense(a.data(), p.as_slice(), c)?;
        worst = worst.max(direct.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok(Check { name: "conjugate_reductions", passed: worst <= 1e-10, detail: format!("max |error| {worst:.2e}") })
}

fn cfl_gradient(rng: &mut Rng) -> Result<Check> {
    let mut worst: f64 = 0.0;
    let fp = FocalParams::default();
    let value = |t: &Tensor| -> f64 {
        let tape = Tape::new();
        let x = tape.constant(t.clone());
        cfl_graph(&tape, x, fp, BracketForm::Outer, CflGradient::Full).map_or(f64::NAN, |v| v.sum().item())
    };
    for _ in 0..50 {
        let c = rng.int_in(2, 6);
        let h = Tensor::from_parts(vec![1, c], random_logits(rng, c, 2.0).as_slice().to_vec());
        let tape = Tape::new();
        let x = tape.leaf(h.clone());
        let loss = cfl_graph(&tape, x, fp, BracketForm::Outer, CflGradient::Full)?.sum();
        let g = tape.backward(loss)?.get_or_zeros(x);
        let fd = finite_difference(value, &h, 1e-5)?;
        worst = worst.max(max_relative_error(&g, &fd, 1e-3));
    }
    Ok(Check { name: "cfl_gradient", passed: worst <= 1e-4, detail: format!("max relative error {worst:.2e}") })
}

fn ncl_gradient(rng: &mut Rng) -> Result<Check> {
    let (h, w) = (8, 10);
    let edge = Tensor::from_parts(vec![1, 1, h, w], (0..h * w).map(|_| rng.uniform_in(0.2, 1.0)).collect());
    let value = |t: &Tensor| -> f64 {
        let tape = Tape::new();
        ncl_graph(&tape, tape.constant(t.clone()), &edge).map_or(f64::NAN, |v| v.mean().item())
    };
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let d = Tensor::from_parts(vec![1, 1, h, w], (0..h * w).map(|_| rng.uniform_in(2.0, 4.0)).collect());
        let tape = Tape::new();
        let x = tape.leaf(d.clone());
        let loss = ncl_graph(&tape, x, &edge)?.mean();
        let g = tape.backward(loss)?.get_or_zeros(x);
        let fd = finite_difference(value, &d, 1e-5)?;
        worst = worst.max(max_relative_error(&g, &fd, 1e-3));
    }
    Ok(Check { name: "ncl_gradient", passed: worst <= 1e-4, detail: format!("max relative error {worst:.2e}") })
}

fn geometric_nulls(rng: &mut Rng) -> Result<Check> {
    let (a, b, c) = (rng.uniform_in(-0.2, 0.2), rng.uniform_in(-0.2, 0.2), rng.uniform_in(5.0, 10.0));
    let d = DepthMap::from_fn(16, 20, |r, k| a * k as f64 + b * r as f64 + c)?;
    let img = ImageGrid::from_fn(16, 20, |r, k| ((r * 7 + k * 3) % 11) as f64 / 10.0)?;
    let ncl = interior(&normal_consistency_loss(&d, &img)?).fold(0.0, f64::max);
    let normals = normal_field(&sobel_gradients(&d)?);
    let unit = normals
        .tensor()
        .data()
        .chunks(3)
        .map(|n| ((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs())
        .fold(0.0, f64::max);
    let edges_ok = edge_weight(&img)?.data().iter().all(|v| *v > 0.0 && *v <= 1.0);
    Ok(Check {
        name: "geometric_nulls",
        passed: ncl <= 1e-10 && unit <= 1e-6 && edges_ok,
        detail: format!("interior ncl {ncl:.2e}, normal length error {unit:.2e}"),
    })
}

fn fusion_oracles() -> Result<Check> {
    let hand = fuse_depth(&HeadSet::new(vec![10.0, 20.0], vec![1.0, 2.0])?);
    let mut worst = (hand - 40.0 / 3.0).abs();
    let equal = fuse_depth(&HeadSet::new(vec![3.0, 5.0, 10.0], vec![0.7; 3])?);
    worst = worst.max((equal - 6.0).abs());
    // stationary at sigma = |residual|
    let (z, target) = (vec![4.0, 7.5], 5.0);
    let sigma: Vec<f64> = z.iter().map(|v: &f64| (v - target).abs()).collect();
    let loss = |s: &[f64]| uncertainty_regression_loss(&HeadSet::new(z.clone(), s.to_vec()).expect("valid heads"), target);
    let step = 1e-5;
    for j in 0..sigma.len() {
        let (mut up, mut down) = (sigma.clone(), sigma.clone());
        up[j] += step;
        down[j] -= step;
        worst = worst.max(((loss(&up)? - loss(&down)?) / (2.0 * step)).abs());
    }
    Ok(Check { name: "fusion_oracles", passed: worst <= 1e-9, detail: format!("max |error| {worst:.2e}") })
}

/// Runs every property check with a fixed seed.
pub fn run_selftest(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed);
    Ok(vec![
        lf_identity(&mut rng.fork(1))?,
        jacobian_psd(&mut rng.fork(2))?,
        conjugate_reductions(&mut rng.fork(3))?,
        cfl_gradient(&mut rng.fork(4))?,
        ncl_gradient(&mut rng.fork(5))?,
        geometric_nulls(&mut rng.fork(6))?,
        fusion_oracles()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_selftest(3).unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
