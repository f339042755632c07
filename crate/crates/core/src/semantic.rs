//! Focal loss, its Legendre–Fenchel split `L = f(h) − yᵀg(h)`, and the
//! label-free Conjugate Focal Loss built from an approximated conjugate
//! pseudo-label `y₀`.
//!
//! Plain functions operate on one object's class scores. The `*_graph`
//! functions build the same quantities on an autodiff [`Tape`] for a batch of
//! objects laid out as rows of a `[n, c]` tensor.

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Var, PROB_FLOOR};
use crate::error::{DuoError, Result};
use crate::linalg;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(h: Vec<f64>) -> Result<Self> {
        if h.len() < 2 {
            return Err(DuoError::contract(format!("need at least 2 classes, got {}", h.len())));
        }
        if h.iter().any(|x| !x.is_finite()) {
            return Err(DuoError::contract("logits must be finite"));
        }
        Ok(Logits(h))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }
}

/// A point on the probability simplex with every entry at least [`PROB_FLOOR`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates a user-supplied distribution, then floors and renormalizes it.
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.len() < 2 {
            return Err(DuoError::contract("need at least 2 classes"));
        }
        if p.iter().any(|x| !x.is_finite() || *x < 0.0 || *x > 1.0) {
            return Err(DuoError::contract(format!("probabilities out of [0,1]: {p:?}")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(DuoError::contract(format!("probabilities sum to {s}")));
        }
        Ok(ProbVector::floored(p))
    }

    fn floored(mut p: Vec<f64>) -> Self {
        for v in p.iter_mut() {
            *v = v.max(PROB_FLOOR);
        }
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        ProbVector(p)
    }

    pub fn uniform(c: usize) -> Self {
        ProbVector(vec![1.0 / c as f64; c])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn max_prob(&self) -> f64 {
        self.0.iter().cloned().fold(0.0, f64::max)
    }

    pub fn argmax(&self) -> usize {
        self.0.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 4.0, gamma: 2.0 }
    }
}

impl FocalParams {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self> {
        if !(alpha > 0.0) || !(gamma >= 0.0) || !alpha.is_finite() || !gamma.is_finite() {
            return Err(DuoError::contract(format!("need alpha > 0 and gamma >= 0, got {alpha}, {gamma}")));
        }
        Ok(FocalParams { alpha, gamma })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OneHot {
    index: usize,
    classes: usize,
}

impl OneHot {
    pub fn new(index: usize, classes: usize) -> Result<Self> {
        if index >= classes || classes < 2 {
            return Err(DuoError::contract(format!("class {index} out of range for {classes} classes")));
        }
        Ok(OneHot { index, classes })
    }

    /// Parses a dense 0/1 vector with exactly one 1.
    pub fn from_dense(y: &[f64]) -> Result<Self> {
        let ones: Vec<usize> = y.iter().enumerate().filter(|(_, v)| **v == 1.0).map(|(i, _)| i).collect();
        if ones.len() != 1 || y.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(DuoError::contract(format!("malformed one-hot vector {y:?}")));
        }
        OneHot::new(ones[0], y.len())
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.classes];
        v[self.index] = 1.0;
        v
    }
}

/// How the outer-product term of the pseudo-label matrix is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BracketForm {
    /// `p pᵀ`, consistent with the derivation of `y₀`.
    #[default]
    Outer,
    /// The scalar `pᵀp` times the identity.
    Inner,
}

/// Which parts of the Conjugate Focal Loss carry gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CflGradient {
    /// The pseudo-label matrix is a constant; gradient flows through the focal
    /// weight, the solved right-hand side `p`, and `log p`.
    #[default]
    PseudoLabel,
    /// Differentiate through every term, including the matrix being inverted.
    Full,
}

pub fn softmax(h: &Logits) -> ProbVector {
    ProbVector(autodiff::softmax_vec(h.as_slice()))
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(DuoError::contract(format!("dimension mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// `−α Σᵢ yᵢ (1−pᵢ)^γ log pᵢ`.
pub fn focal_loss(h: &Logits, y: &OneHot, fp: FocalParams) -> Result<f64> {
    check_dims(h.classes(), y.classes)?;
    let p = softmax(h);
    let pt = p.0[y.index];
    Ok(-fp.alpha * (1.0 - pt).powf(fp.gamma) * pt.ln())
}

fn log_sum_exp(h: &[f64]) -> f64 {
    let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + h.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Legendre–Fenchel pieces `f(h) = α log Σ exp(hᵢ)` and
/// `g(h) = α h + α((1−p)^γ − 1)∘log p`.
pub fn lf_decompose(h: &Logits, fp: FocalParams) -> (f64, Vec<f64>) {
    let f = fp.alpha * log_sum_exp(h.as_slice());
    let p = softmax(h);
    let g = h
        .as_slice()
        .iter()
        .zip(p.as_slice())
        .map(|(&hi, &pi)| fp.alpha * hi + fp.alpha * ((1.0 - pi).powf(fp.gamma) - 1.0) * pi.ln())
        .collect();
    (f, g)
}

fn check_interior(p: &ProbVector) -> Result<()> {
    match p.0.iter().position(|&v| v <= PROB_FLOOR) {
        Some(i) => Err(DuoError::DegenerateProbability { index: i, value: p.0[i] }),
        None => Ok(()),
    }
}

/// Diagonal of `S = ((1−p)^γ−1)/p − γ(1−p)^{γ−1} log p`.
fn jacobian_scale(p: &[f64], gamma: f64) -> Vec<f64> {
    p.iter()
        .map(|&pi| {
            let tail = if gamma == 0.0 { 0.0 } else { gamma * (1.0 - pi).powf(gamma - 1.0) * pi.ln() };
            ((1.0 - pi).powf(gamma) - 1.0) / pi - tail
        })
        .collect()
}

/// `I + S·H` with `H = diag(p) − p pᵀ`, row-major.
fn bracket(p: &[f64], gamma: f64) -> Vec<f64> {
    let c = p.len();
    let s = jacobian_scale(p, gamma);
    let mut m = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let h = if i == j { p[i] - p[i] * p[j] } else { -p[i] * p[j] };
            m[i * c + j] = if i == j { 1.0 } else { 0.0 } + s[i] * h;
        }
    }
    m
}

/// Jacobian of `g` with respect to the logits: `α[I + S·H]`.
pub fn jacobian_g(p: &ProbVector, fp: FocalParams) -> Result<Tensor> {
    check_interior(p)?;
    let c = p.classes();
    let m = bracket(&p.0, fp.gamma).into_iter().map(|v| fp.alpha * v).collect();
    Tensor::new(vec![c, c], m)
}

/// `y₀ = [I + S·H]⁻¹ p` before any series approximation.
pub fn y0_exact(p: &ProbVector, fp: FocalParams) -> Result<Vec<f64>> {
    check_interior(p)?;
    linalg::solve_dense(&bracket(&p.0, fp.gamma), &p.0, p.classes())
}

/// The matrix `A = I + γ(1−log p)∘ppᵀ − γ log p∘diag(p)`, with row `i`
/// weighted by `log pᵢ`.
pub fn approx_matrix(p: &ProbVector, gamma: f64, form: BracketForm) -> Tensor {
    Tensor::from_parts(vec![p.classes(), p.classes()], approx_matrix_raw(&p.0, gamma, form))
}

fn approx_matrix_raw(p: &[f64], gamma: f64, form: BracketForm) -> Vec<f64> {
    let c = p.len();
    let sq: f64 = p.iter().map(|v| v * v).sum();
    let mut a = vec![0.0; c * c];
    for i in 0..c {
        let lp = p[i].ln();
        for j in 0..c {
            let outer = match form {
                BracketForm::Outer => p[i] * p[j],
                BracketForm::Inner => {
                    if i == j {
                        sq
                    } else {
                        0.0
                    }
                }
            };
            let mut v = gamma * (1.0 - lp) * outer;
            if i == j {
                v += 1.0 - gamma * lp * p[i];
            }
            a[i * c + j] = v;
        }
    }
    a
}

/// Series-approximated pseudo-label `y₀ ≈ A⁻¹ p`.
pub fn y0_approx(p: &ProbVector, fp: FocalParams) -> Result<Vec<f64>> {
    y0_approx_with(p, fp, BracketForm::Outer)
}

pub fn y0_approx_with(p: &ProbVector, fp: FocalParams, form: BracketForm) -> Result<Vec<f64>> {
    linalg::solve_dense(&approx_matrix_raw(&p.0, fp.gamma, form), &p.0, p.classes())
}

/// `L_CFL = −α Σᵢ (1−pᵢ)^γ · y₀ᵢ · log pᵢ`.
pub fn conjugate_focal_loss(p: &ProbVector, fp: FocalParams) -> Result<f64> {
    conjugate_focal_loss_with(p, fp, BracketForm::Outer)
}

pub fn conjugate_focal_loss_with(p: &ProbVector, fp: FocalParams, form: BracketForm) -> Result<f64> {
    let y0 = y0_approx_with(p, fp, form)?;
    Ok(-fp.alpha
        * p.0.iter().zip(&y0).map(|(&pi, &yi)| (1.0 - pi).powf(fp.gamma) * yi * pi.ln()).sum::<f64>())
}

/// Per-object semantic uncertainty: the object's Conjugate Focal Loss value.
pub fn semantic_uncertainty(p: &ProbVector, fp: FocalParams) -> Result<f64> {
    conjugate_focal_loss(p, fp)
}

/// Shannon entropy `−Σ pᵢ log pᵢ`.
pub fn entropy(p: &ProbVector) -> f64 {
    -p.0.iter().map(|&v| v * v.ln()).sum::<f64>()
}

/// Per-row Conjugate Focal Loss of `logits [n, c]`; returns `[n]`.
pub fn cfl_graph<'t>(
    tape: &'t Tape,
    logits: Var<'t>,
    fp: FocalParams,
    form: BracketForm,
    mode: CflGradient,
) -> Result<Var<'t>> {
    let p = tape.softmax(logits);
    cfl_from_probs_graph(tape, p, fp, form, mode)
}

/// Same as [`cfl_graph`] but starting from probabilities `[n, c]`.
pub fn cfl_from_probs_graph<'t>(
    tape: &'t Tape,
    p: Var<'t>,
    fp: FocalParams,
    form: BracketForm,
    mode: CflGradient,
) -> Result<Var<'t>> {
    let shape = p.shape();
    let [n, c] = shape[..] else {
        return Err(DuoError::contract(format!("expected [n, c] probabilities, got {shape:?}")));
    };
    let logp = p.ln();
    let a = match mode {
        CflGradient::PseudoLabel => {
            let pv = p.value();
            let mut data = Vec::with_capacity(n * c * c);
            for row in pv.data().chunks(c) {
                data.extend(approx_matrix_raw(row, fp.gamma, form));
            }
            tape.constant(Tensor::from_parts(vec![n, c, c], data))
        }
        CflGradient::Full => {
            let col = p.reshape(&[n, c, 1])?;
            let lcol = logp.reshape(&[n, c, 1])?;
            let eye = tape.constant(Tensor::eye(c).reshape(&[1, c, c])?);
            let outer = match form {
                BracketForm::Outer => col.try_mul(p.reshape(&[n, 1, c])?)?,
                BracketForm::Inner => p.square().sum_axis(1)?.reshape(&[n, 1, 1])?.try_mul(eye)?,
            };
            let correction = lcol.rsub_scalar(1.0).try_mul(outer)?.mul_scalar(fp.gamma);
            let diag = lcol.try_mul(col)?.try_mul(eye)?.mul_scalar(fp.gamma);
            eye.try_add(correction)?.try_sub(diag)?
        }
    };
    let y0 = tape.solve(a, p)?;
    let weight = p.rsub_scalar(1.0).powf(fp.gamma);
    Ok((weight * y0 * logp).sum_axis(1)?.mul_scalar(-fp.alpha))
}

/// Per-row entropy of probabilities `[n, c]`; returns `[n]`.
pub fn entropy_graph<'t>(p: Var<'t>) -> Result<Var<'t>> {
    (p * p.ln()).sum_axis(1).map(|s| -s)
}

/// Per-row focal loss of `logits [n, c]` against dense one-hot targets `[n, c]`.
pub fn focal_graph<'t>(tape: &'t Tape, logits: Var<'t>, targets: &Tensor, fp: FocalParams) -> Result<Var<'t>> {
    let p = tape.softmax(logits);
    let y = tape.constant(targets.clone());
    let w = p.rsub_scalar(1.0).powf(fp.gamma);
    Ok((w * p.ln()).try_mul(y)?.sum_axis(1)?.mul_scalar(-fp.alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, max_relative_error};
    use crate::rng::Rng;

    fn probs(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    const FP: FocalParams = FocalParams { alpha: 4.0, gamma: 2.0 };

    #[test]
    fn softmax_examples() {
        let p = softmax(&Logits::new(vec![0.0, 0.0]).unwrap());
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
        let p = softmax(&Logits::new(vec![0.0; 3]).unwrap());
        for v in p.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&Logits::new(vec![2f64.ln(), 0.0]).unwrap());
        assert!((p.as_slice()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.as_slice()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let p = softmax(&Logits::new(vec![1000.0, -1000.0, 0.0]).unwrap());
        assert!(p.as_slice().iter().all(|v| v.is_finite() && *v >= PROB_FLOOR * 0.5));
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn focal_examples() {
        let h = Logits::new(vec![0.0, 0.0]).unwrap();
        let y = OneHot::new(0, 2).unwrap();
        assert!((focal_loss(&h, &y, FP).unwrap() - 4.0 * 0.25 * 2f64.ln()).abs() < 1e-15);
        let ce = focal_loss(&h, &y, FocalParams::new(4.0, 0.0).unwrap()).unwrap();
        assert!((ce - 4.0 * 2f64.ln()).abs() < 1e-15);
        let confident = Logits::new(vec![50.0, 0.0]).unwrap();
        assert!(focal_loss(&confident, &y, FP).unwrap() <= 1e-10);
    }

    #[test]
    fn malformed_inputs_rejected() {
        assert!(OneHot::from_dense(&[1.0, 1.0]).is_err());
        assert!(OneHot::from_dense(&[0.5, 0.5]).is_err());
        assert_eq!(OneHot::from_dense(&[0.0, 1.0, 0.0]).unwrap().index(), 1);
        assert!(Logits::new(vec![1.0]).is_err());
        assert!(Logits::new(vec![1.0, f64::NAN]).is_err());
        assert!(FocalParams::new(0.0, 2.0).is_err());
        assert!(FocalParams::new(1.0, -1.0).is_err());
        let h = Logits::new(vec![0.0, 0.0, 0.0]).unwrap();
        assert!(focal_loss(&h, &OneHot::new(0, 2).unwrap(), FP).is_err());
    }

    #[test]
    fn lf_examples() {
        let (f, _) = lf_decompose(&Logits::new(vec![0.0; 3]).unwrap(), FP);
        assert!((f - 4.0 * 3f64.ln()).abs() < 1e-14);
        let h = Logits::new(vec![0.3, -1.2, 2.0]).unwrap();
        let (_, g) = lf_decompose(&h, FocalParams::new(4.0, 0.0).unwrap());
        for (gi, hi) in g.iter().zip(h.as_slice()) {
            assert_eq!(*gi, 4.0 * hi);
        }
    }

    #[test]
    fn lf_identity_random() {
        let mut r = Rng::new(11);
        for _ in 0..1000 {
            let c = r.int_in(2, 10);
            let h = Logits::new((0..c).map(|_| r.uniform_in(-5.0, 5.0)).collect()).unwrap();
            let y = OneHot::new(r.int_in(0, c - 1), c).unwrap();
            let fp = FocalParams::new([1.0, 4.0][r.int_in(0, 1)], r.int_in(0, 3) as f64).unwrap();
            let (f, g) = lf_decompose(&h, fp);
            let lf = f - g[y.index()];
            assert!((lf - focal_loss(&h, &y, fp).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn jacobian_examples() {
        let j = jacobian_g(&probs(&[0.5, 0.5]), FocalParams::new(1.0, 2.0).unwrap()).unwrap();
        let s = -1.5 + 2f64.ln();
        assert!((s + 0.8069).abs() < 1e-4);
        let expect = [1.0 + 0.25 * s, -0.25 * s, -0.25 * s, 1.0 + 0.25 * s];
        for (a, b) in j.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((j.data()[0] - 0.7983).abs() < 1e-4 && (j.data()[1] - 0.2017).abs() < 1e-4);
        let j0 = jacobian_g(&probs(&[0.2, 0.3, 0.5]), FocalParams::new(3.0, 0.0).unwrap()).unwrap();
        assert_eq!(j0, Tensor::eye(3).map(|v| 3.0 * v));
        let degenerate = ProbVector(vec![1.0, 0.0]);
        assert!(matches!(
            jacobian_g(&degenerate, FP),
            Err(DuoError::DegenerateProbability { index: 1, .. })
        ));
    }

    #[test]
    fn jacobian_matches_finite_differences_of_g() {
        let h = vec![0.4, -0.3, 1.1, 0.2];
        let fp = FocalParams::new(2.5, 2.0).unwrap();
        let p = softmax(&Logits::new(h.clone()).unwrap());
        let j = jacobian_g(&p, fp).unwrap();
        for k in 0..h.len() {
            let fd = finite_difference(
                |t| lf_decompose(&Logits::new(t.data().to_vec()).unwrap(), fp).1[k],
                &Tensor::vector(h.clone()),
                1e-6,
            )
            .unwrap();
            for l in 0..h.len() {
                assert!((j.at(&[k, l]) - fd.data()[l]).abs() < 1e-6, "entry ({k},{l})");
            }
        }
    }

    #[test]
    fn y0_fixed_points() {
        for c in 2..=10 {
            for gamma in [0.0, 2.0] {
                let p = ProbVector::uniform(c);
                let y0 = y0_exact(&p, FocalParams::new(4.0, gamma).unwrap()).unwrap();
                for (a, b) in y0.iter().zip(p.as_slice()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
        let p = probs(&[0.7, 0.2, 0.1]);
        assert_eq!(y0_exact(&p, FocalParams::new(4.0, 0.0).unwrap()).unwrap(), p.as_slice());
        assert_eq!(y0_approx(&p, FocalParams::new(4.0, 0.0).unwrap()).unwrap(), p.as_slice());
    }

    #[test]
    fn y0_approx_two_class() {
        let p = probs(&[0.5, 0.5]);
        let a = approx_matrix(&p, 2.0, BracketForm::Outer);
        assert!((a.at(&[0, 0]) - 2.5397).abs() < 1e-4);
        assert!((a.at(&[0, 1]) - 0.8466).abs() < 1e-4);
        let y0 = y0_approx(&p, FP).unwrap();
        let want = 0.5 / (1.0 + 2.0 * 0.5 * (1.0 - 0.5f64.ln()) - 2.0 * 0.5f64.ln() * 0.5);
        for v in &y0 {
            assert!((v - want).abs() < 1e-14);
            assert!((v - 0.14765).abs() < 1e-5);
        }
    }

    #[test]
    fn inner_form_differs_from_outer() {
        let p = probs(&[0.6, 0.3, 0.1]);
        let a = y0_approx_with(&p, FP, BracketForm::Outer).unwrap();
        let b = y0_approx_with(&p, FP, BracketForm::Inner).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-3));
    }

    #[test]
    fn cfl_examples() {
        let p = probs(&[0.5, 0.5]);
        let l = conjugate_focal_loss(&p, FP).unwrap();
        assert!((l - 0.2047).abs() < 1e-4);
        let ce = conjugate_focal_loss(&p, FocalParams::new(4.0, 0.0).unwrap()).unwrap();
        assert!((ce - 4.0 * 2f64.ln()).abs() < 1e-14);
        let eps = PROB_FLOOR;
        let sharp = probs(&[1.0 - 2.0 * eps, eps, eps]);
        assert!(conjugate_focal_loss(&sharp, FP).unwrap() <= 1e-6);
    }

    #[test]
    fn uncertainty_orders_confident_below_uniform() {
        let u_uniform = semantic_uncertainty(&ProbVector::uniform(3), FP).unwrap();
        let u_sharp = semantic_uncertainty(&probs(&[0.98, 0.01, 0.01]), FP).unwrap();
        assert!(u_sharp < u_uniform);
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&ProbVector::uniform(2)) - 2f64.ln()).abs() < 1e-15);
        let sharp = softmax(&Logits::new(vec![100.0, 0.0]).unwrap());
        assert!(entropy(&sharp) <= 1e-10);
        let e = entropy(&probs(&[0.25, 0.75]));
        assert!((e - (-(0.25f64 * 0.25f64.ln()) - 0.75 * 0.75f64.ln())).abs() < 1e-15);
        assert!((e - 0.5623).abs() < 1e-4);
    }

    #[test]
    fn graph_matches_plain() {
        let mut r = Rng::new(3);
        let (n, c) = (5, 4);
        let h: Vec<f64> = (0..n * c).map(|_| r.uniform_in(-3.0, 3.0)).collect();
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![n, c], h.clone()).unwrap());
        for mode in [CflGradient::PseudoLabel, CflGradient::Full] {
            for form in [BracketForm::Outer, BracketForm::Inner] {
                let l = cfl_graph(&tape, x, FP, form, mode).unwrap().value();
                for i in 0..n {
                    let p = softmax(&Logits::new(h[i * c..(i + 1) * c].to_vec()).unwrap());
                    let want = conjugate_focal_loss_with(&p, FP, form).unwrap();
                    assert!((l.data()[i] - want).abs() < 1e-12);
                }
            }
        }
        let p = tape.softmax(x);
        let e = entropy_graph(p).unwrap().value();
        let mut targets = Tensor::zeros(&[n, c]);
        for i in 0..n {
            targets.set(&[i, i % c], 1.0);
        }
        let fl = focal_graph(&tape, x, &targets, FP).unwrap().value();
        for i in 0..n {
            let lg = Logits::new(h[i * c..(i + 1) * c].to_vec()).unwrap();
            assert!((e.data()[i] - entropy(&softmax(&lg))).abs() < 1e-12);
            let want = focal_loss(&lg, &OneHot::new(i % c, c).unwrap(), FP).unwrap();
            assert!((fl.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_label_gradient_freezes_matrix() {
        // With the matrix frozen at the base point, autodiff must match finite
        // differences of a function that also freezes it.
        let h0 = vec![0.3, -0.1, 0.4];
        let p0 = softmax(&Logits::new(h0.clone()).unwrap());
        let a0 = approx_matrix(&p0, FP.gamma, BracketForm::Outer);
        let frozen = |t: &Tensor| {
            let p = softmax(&Logits::new(t.data().to_vec()).unwrap());
            let y0 = linalg::solve_dense(a0.data(), p.as_slice(), 3).unwrap();
            -FP.alpha
                * p.as_slice().iter().zip(&y0).map(|(&pi, &yi)| (1.0 - pi).powi(2) * yi * pi.ln()).sum::<f64>()
        };
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], h0.clone()).unwrap());
        let l = cfl_graph(&tape, x, FP, BracketForm::Outer, CflGradient::PseudoLabel).unwrap().sum();
        let g = tape.backward(l).unwrap().get_or_zeros(x);
        let fd = finite_difference(frozen, &Tensor::new(vec![1, 3], h0).unwrap(), 1e-6).unwrap();
        assert!(max_relative_error(&g, &fd, 1e-8) < 1e-4);
    }
}
