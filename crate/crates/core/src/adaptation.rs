//! Online test-time adaptation: the reliability threshold, the region mask,
//! the combined dual-uncertainty objective and the per-batch update step.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{DuoError, Result};
use crate::fusion::{depth_unc_min_graph, HeadSet};
use crate::geometric::{edge_weight, ncl_graph, normal_consistency_loss, DepthMap, ImageGrid};
use crate::semantic::{
    cfl_graph, conjugate_focal_loss_with, entropy, entropy_graph, BracketForm, CflGradient, FocalParams, ProbVector,
};
use crate::tensor::Tensor;
use crate::toy::detector::{BnMode, ToyDetector, HEADS};
use crate::toy::eval::quantile;
use crate::toy::scene::BoxPx;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoxPx,
    pub probs: ProbVector,
    pub objectness: f64,
    /// Objectness times the top class probability.
    pub score: f64,
    pub heads: HeadSet,
    /// Index of the emitting cell within its image.
    pub cell: usize,
}

/// Per-pixel weights in `[0, 1]`, zero outside the selected boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask(Tensor);

impl RegionMask {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn ones(h: usize, w: usize) -> Self {
        RegionMask(Tensor::ones(&[h, w]))
    }
}

/// Exponential moving average of per-object semantic uncertainty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaThreshold {
    pub u_bar: f64,
    pub beta: f64,
    pub initialized: bool,
}

impl EmaThreshold {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(DuoError::contract(format!("EMA beta {beta} outside [0, 1]")));
        }
        Ok(EmaThreshold { u_bar: 0.0, beta, initialized: false })
    }

    /// Folds in a batch of uncertainties. Returns false (state unchanged) on an empty batch.
    pub fn update(&mut self, u: &[f64]) -> bool {
        if u.is_empty() {
            return false;
        }
        let mean = u.iter().sum::<f64>() / u.len() as f64;
        if self.initialized {
            self.u_bar = self.beta * mean + (1.0 - self.beta) * self.u_bar;
        } else {
            self.u_bar = mean;
            self.initialized = true;
        }
        true
    }
}

/// Pure form of [`EmaThreshold::update`].
pub fn ema_update(ema: &EmaThreshold, u: &[f64]) -> EmaThreshold {
    let mut next = *ema;
    next.update(u);
    next
}

/// Indices with `U_i <= U_bar`.
pub fn select_reliable(u: &[f64], ema: &EmaThreshold) -> Vec<usize> {
    u.iter().enumerate().filter(|(_, v)| **v <= ema.u_bar).map(|(i, _)| i).collect()
}

/// `m(u, v) = max over selected i of s_i` inside box `i`, else 0.
pub fn region_mask(dets: &[Detection], selected: &[usize], h: usize, w: usize) -> RegionMask {
    let mut m = vec![0.0; h * w];
    for &i in selected {
        let d = &dets[i];
        let b = d.bbox.clipped(h, w);
        let (r0, r1) = (b.v_min.floor() as usize, (b.v_max.ceil() as usize).min(h));
        let (c0, c1) = (b.u_min.floor() as usize, (b.u_max.ceil() as usize).min(w));
        for r in r0..r1 {
            for c in c0..c1 {
                if b.contains_pixel(r, c) {
                    let v = &mut m[r * w + c];
                    *v = f64::max(*v, d.score);
                }
            }
        }
    }
    RegionMask(Tensor::from_parts(vec![h, w], m))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Duo,
    EntropyMin,
    DepthUncMin,
    None,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Duo, Objective::EntropyMin, Objective::DepthUncMin, Objective::None];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Duo => "duo",
            Objective::EntropyMin => "entropy_min",
            Objective::DepthUncMin => "depth_unc_min",
            Objective::None => "none",
        }
    }

    pub fn adapts(self) -> bool {
        self != Objective::None
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = DuoError;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| DuoError::Config(format!("unknown objective '{s}'")))
    }
}

/// How the masked geometric term is reduced over pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelReduction {
    Mean,
    Sum,
}

/// Which detector parameters receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamFilter {
    All,
    /// Normalization affine parameters and the output layers only.
    NormAndHeads,
}

impl ParamFilter {
    pub fn accepts(self, name: &str) -> bool {
        match self {
            ParamFilter::All => true,
            ParamFilter::NormAndHeads => {
                name.starts_with("bn") || name.starts_with("out.") || name.starts_with("depth.") || name.starts_with("geo.")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub lambda: f64,
    pub focal: FocalParams,
    pub beta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub objective: Objective,
    pub use_cfl: bool,
    pub use_ncl: bool,
    pub use_mask: bool,
    pub pixel_reduction: PixelReduction,
    pub param_filter: ParamFilter,
    pub bracket: BracketForm,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lambda: 0.7,
            focal: FocalParams::default(),
            beta: 0.1,
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 16,
            objective: Objective::Duo,
            use_cfl: true,
            use_ncl: true,
            use_mask: true,
            pixel_reduction: PixelReduction::Mean,
            param_filter: ParamFilter::All,
            bracket: BracketForm::Outer,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DuoError::Config(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        FocalParams::new(self.focal.alpha, self.focal.gamma).map_err(|e| DuoError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Value of an objective together with whether its semantic term was skipped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub skipped: bool,
}

/// Per-object semantic uncertainties (conjugate focal loss values).
pub fn uncertainties(dets: &[Detection], fp: FocalParams, form: BracketForm) -> Result<Vec<f64>> {
    dets.iter().map(|d| conjugate_focal_loss_with(&d.probs, fp, form)).collect()
}

fn reduce_pixels(t: &Tensor, mode: PixelReduction) -> f64 {
    match mode {
        PixelReduction::Mean => t.mean(),
        PixelReduction::Sum => t.sum(),
    }
}

/// `Σ CFL(p_i) + λ · reduce(M ⊙ NCL)` for one image. The threshold is
/// updated with this image's uncertainties before selection.
pub fn duo_objective(
    dets: &[Detection],
    depth: &DepthMap,
    image: &ImageGrid,
    ema: &mut EmaThreshold,
    cfg: &AdaptConfig,
) -> Result<ObjectiveValue> {
    if dets.is_empty() {
        return Ok(ObjectiveValue { value: 0.0, skipped: true });
    }
    let u = uncertainties(dets, cfg.focal, cfg.bracket)?;
    ema.update(&u);
    let semantic: f64 = u.iter().sum();
    if cfg.lambda == 0.0 {
        return Ok(ObjectiveValue { value: semantic, skipped: false });
    }
    let (h, w) = depth.dims();
    let mask = region_mask(dets, &select_reliable(&u, ema), h, w);
    let ncl = normal_consistency_loss(depth, image)?;
    let masked = ncl.zip_map(mask.tensor(), |a, b| a * b);
    Ok(ObjectiveValue { value: semantic + cfg.lambda * reduce_pixels(&masked, cfg.pixel_reduction), skipped: false })
}

/// Sum of per-object entropies.
pub fn entropy_min_objective(dets: &[Detection]) -> ObjectiveValue {
    ObjectiveValue { value: dets.iter().map(|d| entropy(&d.probs)).sum(), skipped: dets.is_empty() }
}

/// Mutable adaptation context. The detector carries the parameters.
#[derive(Clone, Debug)]
pub struct AdaptState {
    pub detector: ToyDetector,
    pub momentum_buffers: BTreeMap<String, Tensor>,
    pub ema: EmaThreshold,
    pub step_count: usize,
    pub config: AdaptConfig,
}

impl AdaptState {
    pub fn new(detector: ToyDetector, config: AdaptConfig) -> Result<Self> {
        config.validate()?;
        let momentum_buffers = detector.params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Ok(AdaptState { detector, momentum_buffers, ema: EmaThreshold::new(config.beta)?, step_count: 0, config })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.detector.params
    }
}

/// `v <- momentum * v + g`, `θ <- θ - lr * v`, for every entry of `grads`.
pub fn sgd_momentum(
    params: &mut BTreeMap<String, Tensor>,
    buffers: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    momentum: f64,
) {
    for (name, g) in grads {
        let (Some(p), Some(v)) = (params.get_mut(name), buffers.get_mut(name)) else { continue };
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
}

/// What one adaptation step observed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub n_dets: usize,
    pub objective_value: f64,
    pub mean_entropy: f64,
    pub mean_cfl: f64,
    pub mean_ncl: f64,
    pub mean_log_sigma: [f64; HEADS],
    pub score_q25: f64,
    pub score_q50: f64,
    pub score_q75: f64,
    /// No parameter update was applied at this step.
    pub skipped: bool,
}

/// Rows of the batch-flattened cell outputs that were emitted as detections.
fn emitted_rows(dets: &[Vec<Detection>], cells: usize) -> Vec<usize> {
    dets.iter().enumerate().flat_map(|(i, ds)| ds.iter().map(move |d| i * cells + d.cell)).collect()
}

struct Terms<'t> {
    total: Option<Var<'t>>,
    mean_ncl: f64,
}

fn build_objective<'t>(
    tape: &'t Tape,
    state: &mut AdaptState,
    fwd: &crate::toy::detector::Forward<'t>,
    dets: &[Vec<Detection>],
    images: &Tensor,
) -> Result<Terms<'t>> {
    let cfg = state.config.clone();
    let cells = state.detector.cfg.cells();
    let n = fwd.images;
    let rows = emitted_rows(dets, cells);
    let mut parts: Vec<Var<'t>> = Vec::new();
    let mut mean_ncl = 0.0;
    match cfg.objective {
        Objective::None => {}
        Objective::EntropyMin => {
            if !rows.is_empty() {
                let p = tape.softmax(fwd.logits.gather_rows(&rows)?);
                parts.push(entropy_graph(p)?.sum());
            }
        }
        Objective::DepthUncMin => {
            if !rows.is_empty() {
                let z = fwd.head_z.gather_rows(&rows)?;
                let ls = fwd.head_log_sigma.gather_rows(&rows)?;
                parts.push(depth_unc_min_graph(tape, z, ls)?.sum());
            }
        }
        Objective::Duo => {
            let flat: Vec<Detection> = dets.iter().flatten().cloned().collect();
            let u = uncertainties(&flat, cfg.focal, cfg.bracket)?;
            state.ema.update(&u);
            if cfg.use_cfl && !rows.is_empty() {
                let logits = fwd.logits.gather_rows(&rows)?;
                parts.push(cfl_graph(tape, logits, cfg.focal, cfg.bracket, CflGradient::PseudoLabel)?.sum());
            }
            if cfg.use_ncl && cfg.lambda > 0.0 {
                let (h, w) = (state.detector.cfg.height, state.detector.cfg.width);
                let mut masks = Vec::with_capacity(n * h * w);
                let mut edges = Vec::with_capacity(n * h * w);
                let mut offset = 0;
                for (i, ds) in dets.iter().enumerate() {
                    let mask = if cfg.use_mask {
                        let sel = select_reliable(&u[offset..offset + ds.len()], &state.ema);
                        region_mask(ds, &sel, h, w)
                    } else {
                        RegionMask::ones(h, w)
                    };
                    offset += ds.len();
                    masks.extend_from_slice(mask.tensor().data());
                    let plane = 3 * h * w;
                    let rgb = Tensor::from_parts(vec![3, h, w], images.data()[i * plane..(i + 1) * plane].to_vec());
                    edges.extend_from_slice(edge_weight(&ImageGrid::from_rgb(&rgb)?)?.data());
                }
                if masks.iter().any(|m| *m > 0.0) {
                    let up = tape.upsample_bilinear(fwd.dense, h, w)?;
                    let ncl = ncl_graph(tape, up, &Tensor::from_parts(vec![n, 1, h, w], edges))?;
                    let masked = ncl.try_mul(tape.constant(Tensor::from_parts(vec![n, 1, h, w], masks)))?;
                    let reduced = match cfg.pixel_reduction {
                        PixelReduction::Mean => masked.sum().mul_scalar(1.0 / (h * w) as f64),
                        PixelReduction::Sum => masked.sum(),
                    };
                    mean_ncl = reduced.item() / n as f64;
                    parts.push(reduced.mul_scalar(cfg.lambda));
                }
            }
        }
    }
    let total = parts.into_iter().reduce(|a, b| a + b).map(|t| t.mul_scalar(1.0 / n as f64));
    Ok(Terms { total, mean_ncl })
}

/// One online step over a batch `[N, 3, H, W]`: detect with the current
/// parameters, then update them on the configured objective.
pub fn tta_step(state: &mut AdaptState, images: &Tensor) -> Result<(Vec<Vec<Detection>>, StepMetrics)> {
    let cfg = state.config.clone();
    let tape = Tape::new();
    let mode = if cfg.objective.adapts() { BnMode::Batch } else { BnMode::Running };
    let filter = cfg.param_filter;
    let adapts = cfg.objective.adapts() && cfg.lr > 0.0;
    let fwd = state.detector.forward(&tape, images, mode, &|name| adapts && filter.accepts(name))?;
    let dets = state.detector.decode(&fwd)?;
    let terms = build_objective(&tape, state, &fwd, &dets, images)?;

    let mut skipped = true;
    let mut objective_value = 0.0;
    if let Some(total) = terms.total {
        objective_value = total.item();
        if adapts && total.requires_grad() {
            let grads = tape.backward(total)?;
            let named: BTreeMap<String, Tensor> = fwd
                .vars
                .iter()
                .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
                .collect();
            if !grads.diagnostics.non_finite && named.values().all(Tensor::all_finite) {
                sgd_momentum(&mut state.detector.params, &mut state.momentum_buffers, &named, cfg.lr, cfg.momentum);
                skipped = false;
            }
        }
    }
    state.step_count += 1;

    let flat: Vec<&Detection> = dets.iter().flatten().collect();
    let nd = flat.len();
    let per = |s: f64| if nd == 0 { 0.0 } else { s / nd as f64 };
    let mut scores: Vec<f64> = flat.iter().map(|d| d.score).collect();
    scores.sort_by(f64::total_cmp);
    let mut log_sigma = [0.0; HEADS];
    for d in &flat {
        for (acc, s) in log_sigma.iter_mut().zip(d.heads.sigma()) {
            *acc += s.ln();
        }
    }
    let cfl_sum: f64 = flat.iter().map(|d| conjugate_focal_loss_with(&d.probs, cfg.focal, cfg.bracket)).sum::<Result<f64>>()?;
    let metrics = StepMetrics {
        step: state.step_count,
        n_dets: nd,
        objective_value,
        mean_entropy: per(flat.iter().map(|d| entropy(&d.probs)).sum()),
        mean_cfl: per(cfl_sum),
        mean_ncl: terms.mean_ncl,
        mean_log_sigma: log_sigma.map(per),
        score_q25: quantile(&scores, 0.25),
        score_q50: quantile(&scores, 0.5),
        score_q75: quantile(&scores, 0.75),
        skipped,
    };
    Ok((dets, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::semantic::conjugate_focal_loss;
    use crate::toy::detector::{stack_images, DetectorConfig};
    use crate::toy::scene::{generate_scene, SceneConfig};

    fn det(bbox: BoxPx, p: &[f64], score: f64) -> Detection {
        Detection {
            bbox,
            probs: ProbVector::new(p.to_vec()).unwrap(),
            objectness: 1.0,
            score,
            heads: HeadSet::new(vec![10.0; HEADS], vec![1.0; HEADS]).unwrap(),
            cell: 0,
        }
    }

    fn bx(u: f64, v: f64, w: f64, h: f64) -> BoxPx {
        BoxPx { u_min: u, v_min: v, u_max: u + w, v_max: v + h }
    }

    #[test]
    fn ema_examples() {
        let e = EmaThreshold { u_bar: 1.0, beta: 0.1, initialized: true };
        assert!((ema_update(&e, &[2.0, 2.0]).u_bar - 1.1).abs() < 1e-15);
        let first = ema_update(&EmaThreshold::new(0.1).unwrap(), &[3.0]);
        assert_eq!((first.u_bar, first.initialized), (3.0, true));
        let one = EmaThreshold { u_bar: 9.0, beta: 1.0, initialized: true };
        assert_eq!(ema_update(&one, &[1.0, 2.0]).u_bar, 1.5);
        assert_eq!(ema_update(&e, &[]), e);
        assert!(EmaThreshold::new(1.5).is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut e = EmaThreshold::new(0.1).unwrap();
        e.update(&[0.0]);
        let c = 2.0;
        let mut gap = c;
        for _ in 0..50 {
            e.update(&[c - 1.0, c + 1.0]);
            let next = (c - e.u_bar).abs();
            assert!((next - 0.9 * gap).abs() < 1e-12);
            gap = next;
        }
    }

    #[test]
    fn selection_examples() {
        let e = EmaThreshold { u_bar: 1.0, beta: 0.1, initialized: true };
        assert_eq!(select_reliable(&[0.5, 1.5], &e), vec![0]);
        assert_eq!(select_reliable(&[1.0, 1.0, 1.0], &e), vec![0, 1, 2]);
        assert!(select_reliable(&[2.0, 3.0], &e).is_empty());
    }

    #[test]
    fn mask_examples() {
        let dets = vec![det(bx(1.0, 1.0, 2.0, 2.0), &[0.5, 0.5], 0.8)];
        assert!(region_mask(&dets, &[], 5, 5).tensor().data().iter().all(|v| *v == 0.0));
        let m = region_mask(&dets, &[0], 5, 5);
        for r in 0..5 {
            for c in 0..5 {
                let inside = (1..3).contains(&r) && (1..3).contains(&c);
                assert_eq!(m.tensor().at(&[r, c]), if inside { 0.8 } else { 0.0 });
            }
        }
        let dets = vec![det(bx(0.0, 0.0, 3.0, 3.0), &[0.5, 0.5], 0.6), det(bx(2.0, 2.0, 3.0, 3.0), &[0.5, 0.5], 0.9)];
        let m = region_mask(&dets, &[0, 1], 5, 5);
        assert_eq!(m.tensor().at(&[2, 2]), 0.9);
        assert_eq!(m.tensor().at(&[0, 0]), 0.6);
        assert!(m.tensor().data().iter().all(|v| (0.0..=0.9).contains(v)));
    }

    #[test]
    fn objective_examples() {
        let depth = DepthMap::new(Tensor::full(&[8, 8], 5.0)).unwrap();
        let image = ImageGrid::from_fn(8, 8, |r, c| ((r * 8 + c) % 7) as f64 / 7.0).unwrap();
        let cfg = AdaptConfig::default();
        let mut ema = EmaThreshold::new(0.1).unwrap();
        let none = duo_objective(&[], &depth, &image, &mut ema, &cfg).unwrap();
        assert_eq!(none, ObjectiveValue { value: 0.0, skipped: true });
        assert!(!ema.initialized);

        let uniform = vec![det(bx(1.0, 1.0, 5.0, 5.0), &[0.5, 0.5], 0.5)];
        let v = duo_objective(&uniform, &depth, &image, &mut ema, &cfg).unwrap().value;
        assert!((v - 0.2047).abs() < 1e-4, "{v}");

        let dets = vec![
            det(bx(0.0, 0.0, 4.0, 4.0), &[0.7, 0.2, 0.1], 0.7),
            det(bx(3.0, 3.0, 4.0, 4.0), &[0.4, 0.35, 0.25], 0.4),
        ];
        let ramp = DepthMap::from_fn(8, 8, |r, c| 1.0 + 0.1 * (r * c) as f64).unwrap();
        let no_geo = AdaptConfig { lambda: 0.0, ..cfg.clone() };
        let v = duo_objective(&dets, &ramp, &image, &mut EmaThreshold::new(0.1).unwrap(), &no_geo).unwrap().value;
        let direct: f64 = dets.iter().map(|d| conjugate_focal_loss(&d.probs, cfg.focal).unwrap()).sum();
        assert_eq!(v, direct);
        let with_geo = duo_objective(&dets, &ramp, &image, &mut EmaThreshold::new(0.1).unwrap(), &cfg).unwrap();
        assert!(with_geo.value > direct);
    }

    #[test]
    fn entropy_objective_examples() {
        let d = det(bx(0.0, 0.0, 2.0, 2.0), &[0.5, 0.5], 0.5);
        assert!((entropy_min_objective(&[d]).value - 2f64.ln()).abs() < 1e-15);
        let sure = det(bx(0.0, 0.0, 2.0, 2.0), &[1.0 - 1e-9, 1e-9], 0.9);
        assert!(entropy_min_objective(&[sure]).value < 1e-6);
        assert!(entropy_min_objective(&[]).skipped);
    }

    fn setup(objective: Objective, lr: f64) -> (AdaptState, Tensor) {
        let cfg = SceneConfig::default();
        let det = ToyDetector::init(DetectorConfig::for_scenes(&cfg), &mut Rng::new(8)).unwrap();
        let mut r = Rng::new(3);
        let scenes: Vec<_> = (0..4).map(|_| generate_scene(&mut r.fork(0), &cfg)).collect();
        let imgs = stack_images(&scenes.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
        let mut ac = AdaptConfig { objective, lr, batch_size: 4, ..AdaptConfig::default() };
        ac.focal = FocalParams::default();
        let mut state = AdaptState::new(det, ac).unwrap();
        // make sure some cells are emitted
        state.detector.cfg.threshold = 0.1;
        (state, imgs)
    }

    #[test]
    fn no_adapt_leaves_parameters_untouched() {
        let (mut state, imgs) = setup(Objective::None, 0.1);
        let before = state.params().clone();
        let (dets, m) = tta_step(&mut state, &imgs).unwrap();
        assert_eq!(state.params(), &before);
        assert!(m.skipped && m.n_dets > 0);
        assert_eq!(dets.len(), 4);
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let (mut state, imgs) = setup(Objective::Duo, 0.0);
        let before = state.params().clone();
        let (_, m) = tta_step(&mut state, &imgs).unwrap();
        assert_eq!(state.params(), &before);
        assert!(m.n_dets > 0 && m.mean_entropy > 0.0);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn detections_reflect_pre_update_parameters() {
        for objective in [Objective::Duo, Objective::EntropyMin, Objective::DepthUncMin] {
            let (mut state, imgs) = setup(objective, 0.05);
            let snapshot = state.clone();
            let (dets, m) = tta_step(&mut state, &imgs).unwrap();
            assert!(!m.skipped, "{objective}");
            assert_ne!(state.params(), snapshot.params());
            // the same forward in batch mode on the old parameters gives the same detections
            let tape = Tape::new();
            let fwd = snapshot.detector.forward(&tape, &imgs, BnMode::Batch, &|_| false).unwrap();
            assert_eq!(snapshot.detector.decode(&fwd).unwrap(), dets);
        }
    }

    #[test]
    fn steps_are_reproducible() {
        let run = || {
            let (mut state, imgs) = setup(Objective::Duo, 0.05);
            let a = tta_step(&mut state, &imgs).unwrap().1;
            let b = tta_step(&mut state, &imgs).unwrap().1;
            (a, b, state.detector.params)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_mask_blocks_depth_gradient() {
        // with an all-zero mask the geometric term never reaches the depth head
        let (mut state, imgs) = setup(Objective::Duo, 0.05);
        state.config.use_cfl = false;
        state.ema = EmaThreshold { u_bar: -1.0, beta: 0.0, initialized: true };
        let before = state.params().clone();
        let (_, m) = tta_step(&mut state, &imgs).unwrap();
        assert!(m.skipped);
        assert_eq!(state.params(), &before);
    }

    #[test]
    fn objective_names_roundtrip() {
        for o in Objective::ALL {
            assert_eq!(o.name().parse::<Objective>().unwrap(), o);
        }
        assert!("tent".parse::<Objective>().is_err());
    }
}
