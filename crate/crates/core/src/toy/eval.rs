//! Detection matching and stream-level metrics.

use serde::{Deserialize, Serialize};

use crate::adaptation::Detection;
use crate::fusion::fuse_depth;
use crate::semantic::entropy;
use crate::toy::detector::HEADS;
use crate::toy::scene::GtObject;

/// Greedy matching, highest score first (ties by index). A detection matches
/// an unmatched object of the same class whose center lies within half the
/// object's box diagonal. Returns `(detection, object)` pairs.
pub fn match_detections(dets: &[Detection], gt: &[GtObject]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for i in order {
        let d = &dets[i];
        let (du, dv) = d.bbox.center();
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gt.iter().enumerate() {
            if taken[j] || g.class_id != d.probs.argmax() {
                continue;
            }
            let (gu, gv) = g.bbox.center();
            let dist = (du - gu).hypot(dv - gv);
            if dist <= 0.5 * g.bbox.diagonal() && best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, j));
            }
        }
        if let Some((_, j)) = best {
            taken[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub depth_mae: f64,
    /// Mean of `|z - z*| / z*` over matched pairs.
    pub depth_rel: f64,
    pub score_q25: f64,
    pub score_q50: f64,
    pub score_q75: f64,
    pub mean_entropy: f64,
    pub mean_log_sigma: [f64; HEADS],
    pub detections: usize,
    pub objects: usize,
    pub matched: usize,
}

/// Linear-interpolation quantile of sorted data (the common "type 7" rule).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Running totals over any number of images.
#[derive(Clone, Debug, Default)]
pub struct Accumulator {
    tp: usize,
    dets: usize,
    objects: usize,
    abs_err: f64,
    rel_err: f64,
    matched_scores: Vec<f64>,
    entropy_sum: f64,
    log_sigma_sum: [f64; HEADS],
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, dets: &[Detection], gt: &[GtObject]) {
        let pairs = match_detections(dets, gt);
        self.tp += pairs.len();
        self.dets += dets.len();
        self.objects += gt.len();
        for &(i, j) in &pairs {
            let z = fuse_depth(&dets[i].heads);
            let err = (z - gt[j].depth).abs();
            self.abs_err += err;
            self.rel_err += err / gt[j].depth;
            self.matched_scores.push(dets[i].score);
        }
        for d in dets {
            self.entropy_sum += entropy(&d.probs);
            for (acc, s) in self.log_sigma_sum.iter_mut().zip(d.heads.sigma()) {
                *acc += s.ln();
            }
        }
    }

    pub fn report(&self) -> EvalReport {
        // no detections: precision is 1 by convention
        let precision = if self.dets == 0 { 1.0 } else { self.tp as f64 / self.dets as f64 };
        let recall = if self.objects == 0 { 1.0 } else { self.tp as f64 / self.objects as f64 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        let mut scores = self.matched_scores.clone();
        scores.sort_by(f64::total_cmp);
        let per = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        EvalReport {
            precision,
            recall,
            f1,
            depth_mae: per(self.abs_err, self.tp),
            depth_rel: per(self.rel_err, self.tp),
            score_q25: quantile(&scores, 0.25),
            score_q50: quantile(&scores, 0.5),
            score_q75: quantile(&scores, 0.75),
            mean_entropy: per(self.entropy_sum, self.dets),
            mean_log_sigma: self.log_sigma_sum.map(|s| per(s, self.dets)),
            detections: self.dets,
            objects: self.objects,
            matched: self.tp,
        }
    }
}

pub fn evaluate(dets: &[Detection], gt: &[GtObject]) -> EvalReport {
    let mut acc = Accumulator::new();
    acc.add(dets, gt);
    acc.report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::HeadSet;
    use crate::semantic::ProbVector;
    use crate::toy::scene::BoxPx;

    fn gt(u: f64, v: f64, class_id: usize, depth: f64) -> GtObject {
        GtObject { bbox: BoxPx { u_min: u, v_min: v, u_max: u + 10.0, v_max: v + 10.0 }, class_id, depth }
    }

    fn det_for(g: &GtObject, score: f64, depth: f64) -> Detection {
        let mut p = vec![0.05; 3];
        p[g.class_id] = 0.9;
        Detection {
            bbox: g.bbox,
            probs: ProbVector::new(p).unwrap(),
            objectness: score / 0.9,
            score,
            heads: HeadSet::new(vec![depth; HEADS], vec![1.0; HEADS]).unwrap(),
            cell: 0,
        }
    }

    #[test]
    fn perfect_predictions() {
        let objs = vec![gt(0.0, 0.0, 0, 10.0), gt(40.0, 20.0, 2, 24.0)];
        let dets: Vec<_> = objs.iter().map(|g| det_for(g, 0.8, g.depth)).collect();
        let r = evaluate(&dets, &objs);
        assert_eq!((r.precision, r.recall, r.f1, r.depth_mae), (1.0, 1.0, 1.0, 0.0));
    }

    #[test]
    fn no_detections() {
        let r = evaluate(&[], &[gt(0.0, 0.0, 0, 10.0)]);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 0.0, 0.0));
    }

    #[test]
    fn order_does_not_change_f1() {
        let objs = vec![gt(0.0, 0.0, 0, 10.0), gt(40.0, 20.0, 1, 24.0), gt(70.0, 30.0, 2, 15.0)];
        let mut dets = vec![
            det_for(&objs[0], 0.9, 11.0),
            det_for(&objs[0], 0.5, 9.0),
            det_for(&objs[2], 0.4, 15.0),
            det_for(&gt(20.0, 40.0, 1, 9.0), 0.7, 9.0),
        ];
        let a = evaluate(&dets, &objs);
        dets.reverse();
        let b = evaluate(&dets, &objs);
        assert_eq!(a, b);
        assert_eq!(a.matched, 2);
        assert!((a.precision - 0.5).abs() < 1e-15 && (a.recall - 2.0 / 3.0).abs() < 1e-15);
        // the higher-scored duplicate claims the object
        assert_eq!(a.depth_mae, 0.5);
    }

    #[test]
    fn wrong_class_does_not_match() {
        let objs = vec![gt(0.0, 0.0, 0, 10.0)];
        let mut d = det_for(&objs[0], 0.9, 10.0);
        d.probs = ProbVector::new(vec![0.1, 0.8, 0.1]).unwrap();
        assert_eq!(evaluate(&[d], &objs).matched, 0);
    }

    #[test]
    fn quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.25), 2.0);
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.25), 1.25);
        assert_eq!(quantile(&[], 0.5), 0.0);
    }
}
