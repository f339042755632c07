//! Multi-head depth fusion and the Laplace-style uncertainty regression loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{DuoError, Result};

/// Depth estimates `z` with per-head uncertainties `sigma`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSet {
    z: Vec<f64>,
    sigma: Vec<f64>,
}

impl HeadSet {
    pub fn new(z: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if z.is_empty() || z.len() != sigma.len() {
            return Err(DuoError::contract(format!("need n >= 1 heads, got {} z and {} sigma", z.len(), sigma.len())));
        }
        if let Some(i) = sigma.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(DuoError::contract(format!("sigma[{i}] = {} must be positive and finite", sigma[i])));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(DuoError::contract("depth estimates must be finite"));
        }
        Ok(HeadSet { z, sigma })
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// `z_soft = (Σ zᵢ/σᵢ) / (Σ 1/σᵢ)`.
pub fn fuse_depth(hs: &HeadSet) -> f64 {
    let num: f64 = hs.z.iter().zip(&hs.sigma).map(|(z, s)| z / s).sum();
    let den: f64 = hs.sigma.iter().map(|s| 1.0 / s).sum();
    num / den
}

/// Mean of `log σᵢ`.
pub fn depth_uncertainty_metric(hs: &HeadSet) -> f64 {
    hs.sigma.iter().map(|s| s.ln()).sum::<f64>() / hs.len() as f64
}

/// `L_dep = Σᵢ |zᵢ − z*|/σᵢ + log σᵢ`.
pub fn uncertainty_regression_loss(hs: &HeadSet, z_star: f64) -> Result<f64> {
    if !z_star.is_finite() {
        return Err(DuoError::contract("target depth must be finite"));
    }
    Ok(hs.z.iter().zip(&hs.sigma).map(|(z, s)| (z - z_star).abs() / s + s.ln()).sum())
}

/// `L_dep` against the fused depth used as its own pseudo-label.
pub fn depth_uncertainty_min_objective(hs: &HeadSet) -> f64 {
    let z_soft = fuse_depth(hs);
    uncertainty_regression_loss(hs, z_soft).expect("fused depth is finite")
}

/// Per-row `L_dep` on the tape: `z`, `log_sigma` and `target` are `[n, k]`,
/// `[n, k]` and `[n, 1]` (or `[n, k]`). Returns `[n]`.
pub fn regression_loss_graph<'t>(z: Var<'t>, log_sigma: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let resid = z.try_sub(target)?.abs();
    (resid / log_sigma.exp() + log_sigma).sum_axis(1)
}

/// Per-row fused depth `[n]` from `z` and `log_sigma`, both `[n, k]`.
pub fn fuse_graph<'t>(z: Var<'t>, log_sigma: Var<'t>) -> Result<Var<'t>> {
    let inv = (-log_sigma).exp();
    (z * inv).sum_axis(1)?.try_div(inv.sum_axis(1)?)
}

/// The direct depth-uncertainty minimization objective per row, with the
/// fused pseudo-label under stop-gradient. Returns `[n]`.
pub fn depth_unc_min_graph<'t>(tape: &'t Tape, z: Var<'t>, log_sigma: Var<'t>) -> Result<Var<'t>> {
    let n = z.shape()[0];
    let fused = fuse_graph(z, log_sigma)?;
    let target = tape.stop_gradient(fused).reshape(&[n, 1])?;
    regression_loss_graph(z, log_sigma, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, max_relative_error};
    use crate::rng::Rng;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn hs(z: &[f64], s: &[f64]) -> HeadSet {
        HeadSet::new(z.to_vec(), s.to_vec()).unwrap()
    }

    #[test]
    fn fuse_examples() {
        assert!((fuse_depth(&hs(&[10.0, 20.0], &[1.0, 2.0])) - 40.0 / 3.0).abs() < 1e-12);
        assert_eq!(fuse_depth(&hs(&[3.0, 5.0, 10.0], &[0.7; 3])), 6.0);
        assert_eq!(fuse_depth(&hs(&[7.5], &[0.3])), 7.5);
    }

    #[test]
    fn invalid_headsets() {
        assert!(HeadSet::new(vec![1.0], vec![0.0]).is_err());
        assert!(HeadSet::new(vec![1.0], vec![-1.0]).is_err());
        assert!(HeadSet::new(vec![], vec![]).is_err());
        assert!(HeadSet::new(vec![1.0, 2.0], vec![1.0]).is_err());
    }

    #[test]
    fn metric_examples() {
        assert_eq!(depth_uncertainty_metric(&hs(&[1.0; 3], &[1.0; 3])), 0.0);
        let e = std::f64::consts::E;
        assert!((depth_uncertainty_metric(&hs(&[1.0, 2.0], &[e, e])) - 1.0).abs() < 1e-15);
        assert!((depth_uncertainty_metric(&hs(&[1.0, 2.0], &[1.0, 4.0])) - 4f64.ln() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn regression_examples() {
        let h = hs(&[10.0, 10.0], &[2.0, 3.0]);
        assert_eq!(uncertainty_regression_loss(&h, 10.0).unwrap(), 2f64.ln() + 3f64.ln());
        assert_eq!(uncertainty_regression_loss(&hs(&[11.0], &[1.0]), 10.0).unwrap(), 1.0);
        assert!(uncertainty_regression_loss(&h, f64::NAN).is_err());
    }

    #[test]
    fn unc_min_examples() {
        let h = hs(&[4.0, 4.0], &[0.5, 2.0]);
        assert!((depth_uncertainty_min_objective(&h) - (0.5f64.ln() + 2f64.ln())).abs() < 1e-15);
        let v = depth_uncertainty_min_objective(&hs(&[10.0, 20.0], &[1.0, 2.0]));
        let expect = 10.0 / 3.0 + (20.0 / 3.0) / 2.0 + 2f64.ln();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 7.3598).abs() < 1e-4);
    }

    #[test]
    fn stationary_at_residual() {
        // d/dσ (r/σ + log σ) = −r/σ² + 1/σ = 0 at σ = r
        let (z, zs) = (13.0, 10.0);
        let r = (z - zs) as f64;
        let at = |s: f64| uncertainty_regression_loss(&hs(&[z], &[s]), zs).unwrap();
        let d = (at(r + 1e-6) - at(r - 1e-6)) / 2e-6;
        assert!(d.abs() < 1e-9);
        assert!(at(r) < at(r * 1.1) && at(r) < at(r * 0.9));
    }

    #[test]
    fn graph_gradients_match_finite_differences() {
        let mut r = Rng::new(2);
        let (n, k) = (4, 3);
        let mut z = vec![];
        let mut target = vec![];
        for _ in 0..n {
            let t = r.uniform_in(5.0, 30.0);
            target.push(t);
            for _ in 0..k {
                // keep residuals away from the |·| kink
                let off = r.uniform_in(0.2, 3.0) * if r.uniform() < 0.5 { -1.0 } else { 1.0 };
                z.push(t + off);
            }
        }
        let ls: Vec<f64> = (0..n * k).map(|_| r.uniform_in(-1.0, 1.0)).collect();
        let mut params = z.clone();
        params.extend(&ls);
        let at = Tensor::vector(params);
        let eval = |t: &Tensor| -> f64 {
            (0..n)
                .map(|i| {
                    let zi = t.data()[i * k..(i + 1) * k].to_vec();
                    let si = t.data()[n * k + i * k..n * k + (i + 1) * k].iter().map(|v| v.exp()).collect();
                    uncertainty_regression_loss(&HeadSet::new(zi, si).unwrap(), target[i]).unwrap()
                })
                .sum()
        };
        let tape = Tape::new();
        let x = tape.leaf(at.clone());
        let zv = x.narrow(0, 0, n * k).unwrap().reshape(&[n, k]).unwrap();
        let sv = x.narrow(0, n * k, n * k).unwrap().reshape(&[n, k]).unwrap();
        let tv = tape.constant(Tensor::new(vec![n, 1], target.clone()).unwrap());
        let loss = regression_loss_graph(zv, sv, tv).unwrap().sum();
        assert!((loss.item() - eval(&at)).abs() < 1e-10);
        let g = tape.backward(loss).unwrap().get_or_zeros(x);
        let fd = finite_difference(eval, &at, 1e-6).unwrap();
        assert!(max_relative_error(&g, &fd, 1e-8) < 1e-4);
    }

    #[test]
    fn unc_min_graph_matches_plain() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![1, 2], vec![10.0, 20.0]).unwrap());
        let ls = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 2f64.ln()]).unwrap());
        let v = depth_unc_min_graph(&tape, z, ls).unwrap().item();
        assert!((v - depth_uncertainty_min_objective(&hs(&[10.0, 20.0], &[1.0, 2.0]))).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn fused_depth_is_convex_combination(
            z in prop::collection::vec(0.5f64..80.0, 1..6),
            s in prop::collection::vec(0.01f64..10.0, 6),
            scale in 0.01f64..100.0,
        ) {
            let s = s[..z.len()].to_vec();
            let h = HeadSet::new(z.clone(), s.clone()).unwrap();
            let f = fuse_depth(&h);
            let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(f >= lo - 1e-9 && f <= hi + 1e-9);
            let scaled = HeadSet::new(z, s.iter().map(|v| v * scale).collect()).unwrap();
            prop_assert!((fuse_depth(&scaled) - f).abs() <= 1e-9 * (1.0 + f.abs()));
        }
    }
}
