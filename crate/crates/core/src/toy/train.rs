//! Supervised source training on clean scenes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adaptation::sgd_momentum;
use crate::autodiff::{Tape, Var};
use crate::error::{DuoError, Result};
use crate::fusion::regression_loss_graph;
use crate::rng::Rng;
use crate::semantic::{focal_graph, FocalParams};
use crate::tensor::Tensor;
use crate::toy::detector::{stack_images, BnMode, Forward, ToyDetector, CELL, SIZE_UNIT};
use crate::toy::eval::{Accumulator, EvalReport};
use crate::toy::scene::{generate_scene, Scene, SceneConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Weight of the new batch in the running normalization statistics.
    pub bn_momentum: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
    pub focal: FocalParams,
    /// Extra weight on positive cells in the objectness loss.
    pub pos_weight: f64,
    pub w_box: f64,
    pub w_dep: f64,
    pub w_dense: f64,
    pub eval_scenes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch: 16,
            lr: 0.02,
            momentum: 0.9,
            bn_momentum: 0.1,
            clip: 5.0,
            focal: FocalParams::default(),
            pos_weight: 4.0,
            w_box: 2.0,
            w_dep: 0.05,
            w_dense: 0.5,
            eval_scenes: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Total loss at every step.
    pub losses: Vec<f64>,
    /// Clean-stream evaluation after training.
    pub clean: EvalReport,
}

/// Supervision for one batch, aligned with the flattened cell rows.
pub struct Targets {
    pub positives: Vec<usize>,
    /// `[N*G, 1]`.
    pub objectness: Tensor,
    /// `[P, C]` one-hot.
    pub classes: Tensor,
    /// `[P, 2]`.
    pub offset: Tensor,
    /// `[P, 2]`.
    pub log_size: Tensor,
    /// `[P, 1]`.
    pub depth: Tensor,
    /// `[N, 1, H, W]` log of the dense ground truth.
    pub log_dense: Tensor,
}

pub fn targets(det: &ToyDetector, scenes: &[Scene]) -> Targets {
    let (gh, gw) = det.cfg.grid();
    let g = gh * gw;
    let c = det.cfg.classes;
    let mut t = Targets {
        positives: Vec::new(),
        objectness: Tensor::zeros(&[scenes.len() * g, 1]),
        classes: Tensor::zeros(&[1]),
        offset: Tensor::zeros(&[1]),
        log_size: Tensor::zeros(&[1]),
        depth: Tensor::zeros(&[1]),
        log_dense: Tensor::zeros(&[1]),
    };
    let (mut cls, mut off, mut size, mut depth, mut dense) = (vec![], vec![], vec![], vec![], vec![]);
    for (i, s) in scenes.iter().enumerate() {
        for o in &s.objects {
            let (cu, cv) = o.bbox.center();
            let (fu, fv) = (cu / CELL as f64, cv / CELL as f64);
            let (col, row) = ((fu as usize).min(gw - 1), (fv as usize).min(gh - 1));
            let r = i * g + row * gw + col;
            t.positives.push(r);
            t.objectness.data_mut()[r] = 1.0;
            let mut one = vec![0.0; c];
            one[o.class_id] = 1.0;
            cls.extend(one);
            off.extend([(fu - col as f64).clamp(0.02, 0.98), (fv - row as f64).clamp(0.02, 0.98)]);
            size.extend([(o.bbox.width() / SIZE_UNIT).ln(), (o.bbox.height() / SIZE_UNIT).ln()]);
            depth.push(o.depth);
        }
        dense.extend(s.depth.data().iter().map(|v| v.ln()));
    }
    let p = t.positives.len();
    let (h, w) = (det.cfg.height, det.cfg.width);
    t.classes = Tensor::from_parts(vec![p, c], cls);
    t.offset = Tensor::from_parts(vec![p, 2], off);
    t.log_size = Tensor::from_parts(vec![p, 2], size);
    t.depth = Tensor::from_parts(vec![p, 1], depth);
    t.log_dense = Tensor::from_parts(vec![scenes.len(), 1, h, w], dense);
    t
}

/// Weighted sum of the supervised losses.
pub fn source_loss<'t>(
    tape: &'t Tape,
    det: &ToyDetector,
    fwd: &Forward<'t>,
    t: &Targets,
    cfg: &TrainConfig,
) -> Result<Var<'t>> {
    let y = tape.constant(t.objectness.clone());
    let weight = tape.constant(t.objectness.map(|v| 1.0 + (cfg.pos_weight - 1.0) * v));
    let bce = (fwd.obj_logit.softplus() - fwd.obj_logit * y) * weight;
    let mut loss = bce.mean();
    if !t.positives.is_empty() {
        let pos = &t.positives;
        let focal = focal_graph(tape, fwd.logits.gather_rows(pos)?, &t.classes, cfg.focal)?.mean();
        let l1 = |v: Var<'t>, target: &Tensor| -> Result<Var<'t>> {
            Ok(v.gather_rows(pos)?.try_sub(tape.constant(target.clone()))?.abs().mean())
        };
        let boxes = l1(fwd.offset, &t.offset)? + l1(fwd.log_size, &t.log_size)?;
        let kp_target = Tensor::from_parts(
            vec![pos.len(), 1],
            t.log_size.data().chunks(2).map(|r| r[1]).collect(),
        );
        let kp = l1(fwd.log_kp, &kp_target)?;
        let dep = regression_loss_graph(
            fwd.head_z.gather_rows(pos)?,
            fwd.head_log_sigma.gather_rows(pos)?,
            tape.constant(t.depth.clone()),
        )?
        .mean();
        loss = loss + focal + (boxes + kp).mul_scalar(cfg.w_box) + dep.mul_scalar(cfg.w_dep);
    }
    let (h, w) = (det.cfg.height, det.cfg.width);
    let dense = tape
        .upsample_bilinear(fwd.dense, h, w)?
        .ln()
        .try_sub(tape.constant(t.log_dense.clone()))?
        .abs()
        .mean();
    Ok(loss + dense.mul_scalar(cfg.w_dense))
}

fn clip_grads(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    let norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Clean-stream evaluation with running statistics.
pub fn evaluate_clean(det: &ToyDetector, rng: &mut Rng, scenes: &SceneConfig, count: usize) -> Result<EvalReport> {
    let mut acc = Accumulator::new();
    let all: Vec<Scene> = (0..count).map(|_| generate_scene(&mut rng.fork(0), scenes)).collect();
    for chunk in all.chunks(16) {
        let imgs = stack_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        for (dets, s) in det.detect(&imgs)?.iter().zip(chunk) {
            acc.add(dets, &s.objects);
        }
    }
    Ok(acc.report())
}

/// Trains `det` in place on freshly generated clean scenes.
pub fn source_train(det: &mut ToyDetector, rng: &mut Rng, scenes: &SceneConfig, cfg: &TrainConfig) -> Result<TrainLog> {
    scenes.validate()?;
    let mut buffers: BTreeMap<String, Tensor> =
        det.params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Scene> = (0..cfg.batch).map(|_| generate_scene(&mut rng.fork(0), scenes)).collect();
        let imgs = stack_images(&batch.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let t = targets(det, &batch);
        let tape = Tape::new();
        let fwd = det.forward(&tape, &imgs, BnMode::Batch, &|_| true)?;
        let loss = source_loss(&tape, det, &fwd, &t, cfg)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(DuoError::Divergence { step, loss: value });
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        let mut named: BTreeMap<String, Tensor> =
            fwd.vars.iter().filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone()))).collect();
        if grads.diagnostics.non_finite {
            return Err(DuoError::Divergence { step, loss: f64::NAN });
        }
        clip_grads(&mut named, cfg.clip);
        // cosine decay over the last half
        let progress = step as f64 / cfg.steps as f64;
        let lr = if progress < 0.5 { cfg.lr } else { cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * (2.0 * progress - 1.0)).cos()) };
        sgd_momentum(&mut det.params, &mut buffers, &named, lr, cfg.momentum);
        det.update_running(&fwd.batch_stats, cfg.bn_momentum);
    }
    let clean = evaluate_clean(det, &mut rng.fork(u64::MAX), scenes, cfg.eval_scenes)?;
    Ok(TrainLog { losses, clean })
}
