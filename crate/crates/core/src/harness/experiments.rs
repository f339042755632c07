//! Stream runner and the comparison experiments built on it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptation::{tta_step, AdaptState, Detection, Objective};
use crate::duot;
use crate::error::{DuoError, Result};
use crate::harness::config::ExperimentConfig;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::toy::corrupt::corrupt;
use crate::toy::detector::{stack_images, DetectorConfig, ToyDetector, HEADS};
use crate::toy::eval::{Accumulator, EvalReport};
use crate::toy::scene::{generate_scene, GtObject, Scene};
use crate::toy::train::{source_train, TrainLog};

/// One CSV row per adaptation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamRow {
    pub step: usize,
    pub objective: String,
    pub n_dets: usize,
    pub mean_entropy: f64,
    pub mean_cfl: f64,
    pub mean_ncl: f64,
    pub logsig_head0: f64,
    pub logsig_head1: f64,
    pub logsig_head2: f64,
    pub f1_running: f64,
    pub mae_running: f64,
    pub skipped: bool,
}

impl StreamRow {
    pub fn log_sigma(&self) -> [f64; HEADS] {
        [self.logsig_head0, self.logsig_head1, self.logsig_head2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub objective: String,
    pub corruption: String,
    pub severity: u8,
    pub steps: usize,
    pub skipped_steps: usize,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub depth_mae: f64,
    pub depth_rel: f64,
    pub mean_entropy: f64,
    pub score_q25: f64,
    pub score_q50: f64,
    pub score_q75: f64,
    pub logsig_start: [f64; HEADS],
    pub logsig_end: [f64; HEADS],
}

#[derive(Clone, Debug)]
pub struct StreamResult {
    pub rows: Vec<StreamRow>,
    pub summary: StreamSummary,
    pub report: EvalReport,
}

/// Deterministic corrupted stream: scene `i` depends only on the seed and `i`.
pub struct SceneStream<'a> {
    cfg: &'a ExperimentConfig,
    rng: Rng,
    emitted: usize,
}

impl<'a> SceneStream<'a> {
    pub fn new(cfg: &'a ExperimentConfig) -> Self {
        SceneStream { cfg, rng: Rng::new(cfg.seed), emitted: 0 }
    }

    /// Next scene with its (possibly corrupted) image in place of the clean one.
    /// Returns the clean scene alongside.
    pub fn next_scene(&mut self) -> Result<Option<(Scene, Tensor)>> {
        if self.emitted == self.cfg.stream_length {
            return Ok(None);
        }
        self.emitted += 1;
        let scene = generate_scene(&mut self.rng.fork(0), &self.cfg.scene);
        let mut noise = self.rng.fork(1);
        let image = match self.cfg.corruption {
            Some(c) => corrupt(&scene.image, c, &mut noise)?,
            None => scene.image.clone(),
        };
        Ok(Some((scene, image)))
    }
}

fn corruption_label(cfg: &ExperimentConfig) -> (String, u8) {
    cfg.corruption.map_or(("none".into(), 0), |c| (c.kind.name().into(), c.severity))
}

/// Loads the source checkpoint, or trains one when allowed.
pub fn prepare_detector(cfg: &ExperimentConfig) -> Result<ToyDetector> {
    match ToyDetector::load(&cfg.checkpoint) {
        Ok(mut det) => {
            det.cfg.threshold = cfg.threshold;
            Ok(det)
        }
        Err(DuoError::MissingCheckpoint(_)) if cfg.train_if_missing => {
            let (mut det, _) = train_source(cfg)?;
            det.cfg.threshold = cfg.threshold;
            Ok(det)
        }
        Err(e) => Err(e),
    }
}

/// Trains a source model on clean scenes and saves it to the checkpoint path.
pub fn train_source(cfg: &ExperimentConfig) -> Result<(ToyDetector, TrainLog)> {
    let mut rng = Rng::new(cfg.seed ^ 0x5EED_0F50_u64);
    let mut dcfg = DetectorConfig::for_scenes(&cfg.scene);
    dcfg.threshold = cfg.threshold;
    let mut det = ToyDetector::init(dcfg, &mut rng.fork(0))?;
    let log = source_train(&mut det, &mut rng, &cfg.scene, &cfg.train)?;
    det.save(&cfg.checkpoint)?;
    Ok((det, log))
}

#[derive(Serialize)]
struct SceneSidecar<'a> {
    index: usize,
    seed: u64,
    objects: &'a [GtObject],
    detections: &'a [Detection],
}

fn dump_scene(dir: &Path, index: usize, scene: &Scene, image: &Tensor, dets: &[Detection]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    duot::save(image, dir.join(format!("scene_{index:04}.image.duot")))?;
    duot::save(&scene.depth, dir.join(format!("scene_{index:04}.depth.duot")))?;
    let side = SceneSidecar { index, seed: scene.seed, objects: &scene.objects, detections: dets };
    std::fs::write(dir.join(format!("scene_{index:04}.json")), serde_json::to_vec_pretty(&side)?)?;
    Ok(())
}

/// Streams the corrupted scenes through `tta_step` in batches.
pub fn run_stream(cfg: &ExperimentConfig, det: &ToyDetector) -> Result<StreamResult> {
    run_stream_dumping(cfg, det, None)
}

pub fn run_stream_dumping(cfg: &ExperimentConfig, det: &ToyDetector, dump_dir: Option<&Path>) -> Result<StreamResult> {
    cfg.validate()?;
    let mut det = det.clone();
    det.cfg.threshold = cfg.threshold;
    let mut state = AdaptState::new(det, cfg.adapt.clone())?;
    let mut stream = SceneStream::new(cfg);
    let mut acc = Accumulator::new();
    let mut rows = Vec::with_capacity(cfg.steps());
    let mut seen = 0;
    for _ in 0..cfg.steps() {
        let mut batch = Vec::with_capacity(cfg.adapt.batch_size);
        for _ in 0..cfg.adapt.batch_size {
            batch.push(stream.next_scene()?.ok_or_else(|| DuoError::contract("stream ended early"))?);
        }
        let images = stack_images(&batch.iter().map(|(_, im)| im).collect::<Vec<_>>())?;
        let (dets, m) = tta_step(&mut state, &images)?;
        for ((scene, image), d) in batch.iter().zip(&dets) {
            acc.add(d, &scene.objects);
            if let Some(dir) = dump_dir {
                if seen < cfg.dump_scenes {
                    dump_scene(dir, seen, scene, image, d)?;
                }
            }
            seen += 1;
        }
        let running = acc.report();
        rows.push(StreamRow {
            step: m.step,
            objective: cfg.adapt.objective.name().into(),
            n_dets: m.n_dets,
            mean_entropy: m.mean_entropy,
            mean_cfl: m.mean_cfl,
            mean_ncl: m.mean_ncl,
            logsig_head0: m.mean_log_sigma[0],
            logsig_head1: m.mean_log_sigma[1],
            logsig_head2: m.mean_log_sigma[2],
            f1_running: running.f1,
            mae_running: running.depth_mae,
            skipped: m.skipped,
        });
    }
    let report = acc.report();
    let (corruption, severity) = corruption_label(cfg);
    let first = rows.first().map_or([0.0; HEADS], StreamRow::log_sigma);
    let last = rows.last().map_or([0.0; HEADS], StreamRow::log_sigma);
    let summary = StreamSummary {
        objective: cfg.adapt.objective.name().into(),
        corruption,
        severity,
        steps: rows.len(),
        skipped_steps: rows.iter().filter(|r| r.skipped).count(),
        f1: report.f1,
        precision: report.precision,
        recall: report.recall,
        depth_mae: report.depth_mae,
        depth_rel: report.depth_rel,
        mean_entropy: report.mean_entropy,
        score_q25: report.score_q25,
        score_q50: report.score_q50,
        score_q75: report.score_q75,
        logsig_start: first,
        logsig_end: last,
    };
    Ok(StreamResult { rows, summary, report })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// `metrics.csv` and `summary.json` under `dir`.
pub fn write_stream(result: &StreamResult, dir: &Path) -> Result<()> {
    write_csv(&dir.join("metrics.csv"), &result.rows)?;
    write_json(&dir.join("summary.json"), &result.summary)
}

/// Runs the stream once per objective on the identical scene sequence.
pub fn run_objectives(cfg: &ExperimentConfig, det: &ToyDetector, objectives: &[Objective]) -> Result<Vec<StreamResult>> {
    objectives
        .iter()
        .map(|&o| {
            let mut c = cfg.clone();
            c.adapt.objective = o;
            let r = run_stream(&c, det)?;
            write_stream(&r, &cfg.output_dir.join(o.name()))?;
            Ok(r)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreShift {
    pub objective: String,
    pub q25: f64,
    pub q75: f64,
    pub delta_q25: f64,
    pub delta_q75: f64,
    /// See [`skew_ratio`].
    pub skew_ratio: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation1Report {
    pub methods: Vec<ScoreShift>,
    /// The bottom quartile gains more under the dual objective than under entropy minimization.
    pub duo_q25_gain_exceeds_entropy: bool,
    /// The top-heavy skew of the gains is smaller under the dual objective.
    pub duo_skew_below_entropy: bool,
}

/// `Δq75 / Δq25`. When the bottom quartile did not gain, any top gain is
/// infinitely top-heavy; with no gain anywhere the ratio is undefined.
pub fn skew_ratio(dq75: f64, dq25: f64) -> f64 {
    if dq25 > 0.0 {
        dq75 / dq25
    } else if dq75 > dq25 {
        f64::INFINITY
    } else {
        f64::NAN
    }
}

/// Matched-object score quartiles under no adaptation, entropy minimization
/// and the dual objective.
pub fn run_observation1(cfg: &ExperimentConfig, det: &ToyDetector) -> Result<Observation1Report> {
    let runs = run_objectives(cfg, det, &[Objective::None, Objective::EntropyMin, Objective::Duo])?;
    let base = &runs[0].report;
    let methods: Vec<ScoreShift> = runs
        .iter()
        .map(|r| {
            let (dq25, dq75) = (r.report.score_q25 - base.score_q25, r.report.score_q75 - base.score_q75);
            ScoreShift {
                objective: r.summary.objective.clone(),
                q25: r.report.score_q25,
                q75: r.report.score_q75,
                delta_q25: dq25,
                delta_q75: dq75,
                skew_ratio: skew_ratio(dq75, dq25),
                f1: r.report.f1,
            }
        })
        .collect();
    let (ent, duo) = (&methods[1], &methods[2]);
    let report = Observation1Report {
        duo_q25_gain_exceeds_entropy: duo.delta_q25 > ent.delta_q25,
        duo_skew_below_entropy: duo.skew_ratio < ent.skew_ratio,
        methods,
    };
    write_json(&cfg.output_dir.join("obs1.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaTrajectory {
    pub objective: String,
    /// Per-step mean `log σ` of every head.
    pub log_sigma: Vec<[f64; HEADS]>,
    /// Drop of the regression head over the mean drop of the geometric heads.
    pub collapse_ratio: f64,
    /// Smallest `σ / σ_source` reached by each head.
    pub min_sigma_fraction: [f64; HEADS],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation2Report {
    /// The unadapted model on the same batches, with batch statistics.
    pub source: Vec<[f64; HEADS]>,
    pub methods: Vec<SigmaTrajectory>,
    pub ratio_exceeds_twice_duo: bool,
    pub duo_sigma_floor_held: bool,
}

/// Fraction of the stream, at its end, over which head drops are averaged.
pub const COLLAPSE_WINDOW: f64 = 0.1;

/// Per-step, per-head drop of `log σ` below the source model on the same batch.
pub fn sigma_drops(source: &[[f64; HEADS]], traj: &[[f64; HEADS]]) -> Vec<[f64; HEADS]> {
    source.iter().zip(traj).map(|(s, t)| std::array::from_fn(|j| s[j] - t[j])).collect()
}

/// `(drop of head 0) / (mean drop of heads 1..)`, each averaged over the
/// final window of the stream.
pub fn collapse_ratio(drops: &[[f64; HEADS]]) -> f64 {
    if drops.is_empty() {
        return 0.0;
    }
    let k = ((drops.len() as f64 * COLLAPSE_WINDOW).ceil() as usize).max(1);
    let tail = &drops[drops.len() - k..];
    let mean = |j: usize| tail.iter().map(|d| d[j]).sum::<f64>() / k as f64;
    let (reg, geo) = (mean(0), (1..HEADS).map(mean).sum::<f64>() / (HEADS - 1) as f64);
    ratio_of_drops(reg, geo)
}

/// `reg / geo` for positive `geo`. If only the regression head declined the
/// ratio is infinite; if neither declined there is no collapse.
pub fn ratio_of_drops(reg: f64, geo: f64) -> f64 {
    if geo > 0.0 {
        reg / geo
    } else if reg > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Per-head uncertainty trajectories under direct depth-uncertainty
/// minimization and the dual objective. Drops are measured against the
/// frozen source model on the same batches so scene content cancels.
pub fn run_observation2(cfg: &ExperimentConfig, det: &ToyDetector) -> Result<Observation2Report> {
    let runs = run_objectives(cfg, det, &[Objective::DepthUncMin, Objective::Duo])?;
    let mut frozen = cfg.clone();
    frozen.adapt.objective = Objective::DepthUncMin;
    frozen.adapt.lr = 0.0;
    let source: Vec<[f64; HEADS]> = run_stream(&frozen, det)?.rows.iter().map(StreamRow::log_sigma).collect();
    let mut plot = Vec::new();
    for (i, t) in source.iter().enumerate() {
        plot.push(("source".to_string(), i + 1, t[0], t[1], t[2]));
    }
    let methods: Vec<SigmaTrajectory> = runs
        .iter()
        .map(|r| {
            let traj: Vec<[f64; HEADS]> = r.rows.iter().map(StreamRow::log_sigma).collect();
            let drops = sigma_drops(&source, &traj);
            let mut min_frac = [f64::INFINITY; HEADS];
            for d in &drops {
                for j in 0..HEADS {
                    min_frac[j] = min_frac[j].min((-d[j]).exp());
                }
            }
            for (i, t) in traj.iter().enumerate() {
                plot.push((r.summary.objective.clone(), i + 1, t[0], t[1], t[2]));
            }
            SigmaTrajectory {
                objective: r.summary.objective.clone(),
                collapse_ratio: collapse_ratio(&drops),
                min_sigma_fraction: min_frac,
                log_sigma: traj,
            }
        })
        .collect();
    let (dum, duo) = (&methods[0], &methods[1]);
    let report = Observation2Report {
        ratio_exceeds_twice_duo: dum.collapse_ratio > 2.0 * duo.collapse_ratio,
        duo_sigma_floor_held: duo.min_sigma_fraction.iter().all(|f| *f >= 0.1),
        source,
        methods,
    };
    #[derive(Serialize)]
    struct PlotRow {
        objective: String,
        step: usize,
        logsig_head0: f64,
        logsig_head1: f64,
        logsig_head2: f64,
    }
    let rows: Vec<PlotRow> = plot
        .into_iter()
        .map(|(objective, step, a, b, c)| PlotRow { objective, step, logsig_head0: a, logsig_head1: b, logsig_head2: c })
        .collect();
    write_csv(&cfg.output_dir.join("obs2_trajectories.csv"), &rows)?;
    write_json(&cfg.output_dir.join("obs2.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub cfl: bool,
    pub ncl: bool,
    pub mask: bool,
    pub f1: f64,
    pub depth_mae: f64,
}

/// The component grid: baseline, CFL alone, NCL without and with the mask,
/// CFL with unmasked NCL, and the full method.
pub const ABLATION_GRID: [(&str, bool, bool, bool); 6] = [
    ("baseline", false, false, false),
    ("cfl", true, false, false),
    ("ncl", false, true, false),
    ("ncl_mask", false, true, true),
    ("cfl_ncl", true, true, false),
    ("full", true, true, true),
];

pub fn run_ablation(cfg: &ExperimentConfig, det: &ToyDetector) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, cfl, ncl, mask) in ABLATION_GRID {
        let mut c = cfg.clone();
        c.adapt.use_cfl = cfl;
        c.adapt.use_ncl = ncl;
        c.adapt.use_mask = mask;
        // with every component off the run is plain inference
        c.adapt.objective = if cfl || ncl { Objective::Duo } else { Objective::None };
        let r = run_stream(&c, det)?;
        write_stream(&r, &cfg.output_dir.join(format!("ablation_{name}")))?;
        rows.push(AblationRow { name: name.into(), cfl, ncl, mask, f1: r.report.f1, depth_mae: r.report.depth_mae });
    }
    write_csv(&cfg.output_dir.join("ablation.csv"), &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lambda: f64,
    pub alpha: f64,
    pub f1: f64,
    pub depth_mae: f64,
}

/// Sweeps `lambda x alpha` for the configured objective.
pub fn run_grid(cfg: &ExperimentConfig, det: &ToyDetector, lambdas: &[f64], alphas: &[f64]) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for &lambda in lambdas {
        for &alpha in alphas {
            let mut c = cfg.clone();
            c.adapt.lambda = lambda;
            c.adapt.focal.alpha = alpha;
            let r = run_stream(&c, det)?;
            write_stream(&r, &cfg.output_dir.join(format!("grid_l{lambda}_a{alpha}")))?;
            rows.push(GridRow { lambda, alpha, f1: r.report.f1, depth_mae: r.report.depth_mae });
        }
    }
    write_csv(&cfg.output_dir.join("grid.csv"), &rows)?;
    Ok(rows)
}
