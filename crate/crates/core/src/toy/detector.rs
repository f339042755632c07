//! A tiny multi-branch detector: a two-layer convolutional trunk with batch
//! normalization, a coarse cell head (class logits, objectness, box, three
//! object-depth heads) and a dense depth head.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptation::Detection;
use crate::autodiff::{NormStats, Tape, Var};
use crate::error::{DuoError, Result};
use crate::fusion::HeadSet;
use crate::rng::Rng;
use crate::semantic::ProbVector;
use crate::tensor::Tensor;
use crate::toy::scene::{BoxPx, SceneConfig};

/// Cell edge in pixels; the cell grid is `H/8 x W/8`.
pub const CELL: usize = 8;
/// Object-depth heads: one direct regression head and two geometric heads.
pub const HEADS: usize = 3;
/// Box extents are predicted as `SIZE_UNIT * exp(raw)`.
pub const SIZE_UNIT: f64 = 16.0;
/// The regression head predicts `REG_UNIT * exp(raw)`.
pub const REG_UNIT: f64 = 20.0;
/// Quantization floor of the geometric heads, in pixels of box height.
pub const GEO_FLOOR_PX: f64 = 0.5;
/// Emission threshold on objectness.
pub const DEFAULT_THRESHOLD: f64 = 0.3;

const BN_LAYERS: [&str; 2] = ["bn1", "bn2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub f_scale: f64,
    pub trunk1: usize,
    pub trunk2: usize,
    pub hidden: usize,
    pub threshold: f64,
}

impl DetectorConfig {
    pub fn for_scenes(s: &SceneConfig) -> Self {
        DetectorConfig {
            height: s.height,
            width: s.width,
            classes: s.classes,
            f_scale: s.f_scale,
            trunk1: 8,
            trunk2: 16,
            hidden: 32,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % (2 * CELL) != 0 || self.width % (2 * CELL) != 0 {
            return Err(DuoError::Config(format!(
                "image {}x{} must be a multiple of {} in both dims",
                self.height,
                self.width,
                2 * CELL
            )));
        }
        if self.classes < 2 || !(self.threshold > 0.0 && self.threshold < 1.0) || self.f_scale <= 0.0 {
            return Err(DuoError::Config("bad detector classes, threshold or f_scale".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / CELL, self.width / CELL)
    }

    pub fn cells(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Dense depth resolution (the trunk stride is 4).
    pub fn dense_dims(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    /// Per-cell output channels.
    pub fn outputs(&self) -> usize {
        self.classes + 10
    }

    fn col(&self, what: Col) -> usize {
        let c = self.classes;
        match what {
            Col::Obj => c,
            Col::Offset => c + 1,
            Col::LogSize => c + 3,
            Col::Keypoint => c + 5,
            Col::RegZ => c + 6,
            Col::RegLogSigma => c + 7,
            Col::GeoSigma => c + 8,
        }
    }
}

#[derive(Clone, Copy)]
enum Col {
    Obj,
    Offset,
    LogSize,
    Keypoint,
    RegZ,
    RegLogSigma,
    GeoSigma,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDetector {
    pub cfg: DetectorConfig,
    pub params: BTreeMap<String, Tensor>,
    /// Batch-norm running statistics, `<layer>.mean` and `<layer>.var`.
    pub running: BTreeMap<String, Tensor>,
}

/// Which statistics batch normalization uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Running,
    Batch,
}

/// Differentiable outputs of one forward pass over `N` images with `G` cells each.
pub struct Forward<'t> {
    /// Parameter nodes by name.
    pub vars: BTreeMap<String, Var<'t>>,
    /// `[N*G, C]`.
    pub logits: Var<'t>,
    /// `[N*G, 1]`, pre-sigmoid.
    pub obj_logit: Var<'t>,
    /// `[N*G, 2]` in-cell center offsets in `(0, 1)`, `(x, y)`.
    pub offset: Var<'t>,
    /// `[N*G, 2]` log box `(w, h)` in `SIZE_UNIT`s.
    pub log_size: Var<'t>,
    /// `[N*G, 1]` log keypoint height in `SIZE_UNIT`s.
    pub log_kp: Var<'t>,
    /// `[N*G, HEADS]` depth estimates.
    pub head_z: Var<'t>,
    /// `[N*G, HEADS]`.
    pub head_log_sigma: Var<'t>,
    /// `[N, 1, H/4, W/4]`, strictly positive.
    pub dense: Var<'t>,
    /// Batch statistics per normalization layer, present in [`BnMode::Batch`].
    pub batch_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
    pub images: usize,
}

fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

impl ToyDetector {
    fn shapes(cfg: &DetectorConfig) -> Vec<(String, Vec<usize>)> {
        let (t1, t2, hid, out) = (cfg.trunk1, cfg.trunk2, cfg.hidden, cfg.outputs());
        [
            ("conv1.w", vec![t1, 4, 3, 3]),
            ("bn1.gamma", vec![t1]),
            ("bn1.beta", vec![t1]),
            ("conv2.w", vec![t2, t1, 3, 3]),
            ("bn2.gamma", vec![t2]),
            ("bn2.beta", vec![t2]),
            ("depth.w", vec![1, t2, 1, 1]),
            ("depth.b", vec![1]),
            ("head.w", vec![hid, t2, 3, 3]),
            ("head.b", vec![hid]),
            ("out.w", vec![out, hid, 1, 1]),
            ("out.b", vec![out]),
            ("geo.log_scale", vec![2]),
        ]
        .into_iter()
        .map(|(n, s)| (n.to_string(), s))
        .collect()
    }

    fn fresh_running(cfg: &DetectorConfig) -> BTreeMap<String, Tensor> {
        let mut running = BTreeMap::new();
        for (layer, c) in BN_LAYERS.iter().zip([cfg.trunk1, cfg.trunk2]) {
            running.insert(format!("{layer}.mean"), Tensor::zeros(&[c]));
            running.insert(format!("{layer}.var"), Tensor::ones(&[c]));
        }
        running
    }

    /// All-zero weights: every cell has objectness 0.5.
    pub fn zeros(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let params = Self::shapes(&cfg).into_iter().map(|(n, s)| (n, Tensor::zeros(&s))).collect();
        let running = Self::fresh_running(&cfg);
        Ok(ToyDetector { cfg, params, running })
    }

    /// He-initialized weights with priors on the output biases.
    pub fn init(cfg: DetectorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape) in Self::shapes(&cfg) {
            let len: usize = shape.iter().product();
            let t = if name.ends_with(".w") {
                let fan_in: usize = shape[1..].iter().product();
                let std = if name == "out.w" { 0.01 } else { (2.0 / fan_in as f64).sqrt() };
                Tensor::from_parts(shape, (0..len).map(|_| rng.normal(0.0, std)).collect())
            } else if name.ends_with(".gamma") {
                Tensor::ones(&shape)
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t);
        }
        let b = params.get_mut("out.b").expect("declared above");
        let d = b.data_mut();
        d[cfg.col(Col::Obj)] = -2.0;
        d[cfg.col(Col::RegLogSigma)] = 2f64.ln();
        d[cfg.col(Col::GeoSigma)] = softplus_inv(0.05);
        d[cfg.col(Col::GeoSigma) + 1] = softplus_inv(0.05);
        params.get_mut("depth.b").expect("declared above").data_mut()[0] = 20f64.ln();
        let running = Self::fresh_running(&cfg);
        Ok(ToyDetector { cfg, params, running })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Appends a normalized row-coordinate channel to `[N, 3, H, W]` images.
    fn with_coords(&self, images: &Tensor) -> Result<Tensor> {
        let [n, 3, h, w] = *images.shape() else {
            return Err(DuoError::contract(format!("expected [N,3,H,W] images, got {:?}", images.shape())));
        };
        if h != self.cfg.height || w != self.cfg.width {
            return Err(DuoError::contract(format!(
                "image {h}x{w} does not match detector {}x{}",
                self.cfg.height, self.cfg.width
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * 4 * plane);
        for i in 0..n {
            data.extend_from_slice(&images.data()[i * 3 * plane..(i + 1) * 3 * plane]);
            for r in 0..h {
                let v = (r as f64 + 0.5) / h as f64 - 0.5;
                data.extend(std::iter::repeat_n(v, w));
            }
        }
        Ok(Tensor::from_parts(vec![n, 4, h, w], data))
    }

    /// Records the network on `tape`. Parameters for which `trainable` is
    /// false enter as constants.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        images: &Tensor,
        mode: BnMode,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<Forward<'t>> {
        let x = tape.constant(self.with_coords(images)?);
        let n = images.shape()[0];
        let vars: BTreeMap<String, Var<'t>> = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable(k) { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        let p = |k: &str| vars[k];
        let mut batch_stats = Vec::new();
        let mut norm = |x: Var<'t>, layer: &str| -> Result<Var<'t>> {
            let (g, b) = (p(&format!("{layer}.gamma")), p(&format!("{layer}.beta")));
            let stats = match mode {
                BnMode::Batch => NormStats::Batch,
                BnMode::Running => NormStats::Fixed {
                    mean: self.running[&format!("{layer}.mean")].data(),
                    var: self.running[&format!("{layer}.var")].data(),
                },
            };
            let (y, s) = tape.batch_norm(x, g, b, stats)?;
            if let Some((m, v)) = s {
                batch_stats.push((layer.to_string(), m, v));
            }
            Ok(y)
        };
        let f1 = norm(tape.conv2d(x, p("conv1.w"), None, 2, 1)?, "bn1")?.relu();
        let f2 = norm(tape.conv2d(f1, p("conv2.w"), None, 2, 1)?, "bn2")?.relu();

        let dense = tape.conv2d(f2, p("depth.w"), Some(p("depth.b")), 1, 0)?.exp();

        let pooled = tape.avg_pool2(f2)?;
        let hid = tape.conv2d(pooled, p("head.w"), Some(p("head.b")), 1, 1)?.relu();
        let out = tape.conv2d(hid, p("out.w"), Some(p("out.b")), 1, 0)?;
        let k = self.cfg.outputs();
        let rows = out.permute(&[0, 2, 3, 1])?.reshape(&[n * self.cfg.cells(), k])?;
        let col = |c: Col, len: usize| rows.narrow(1, self.cfg.col(c), len);

        let logits = rows.narrow(1, 0, self.cfg.classes)?;
        let obj_logit = col(Col::Obj, 1)?;
        let offset = col(Col::Offset, 2)?.sigmoid();
        let log_size = col(Col::LogSize, 2)?;
        let log_kp = col(Col::Keypoint, 1)?;

        // Regression head: free depth and free log sigma.
        let z_reg = col(Col::RegZ, 1)?.add_scalar(REG_UNIT.ln()).exp();
        let ls_reg = col(Col::RegLogSigma, 1)?;
        // Geometric heads: depth from an apparent height through the size law.
        // Sigma is relative to that depth and bounded below by the height
        // quantization floor; the geometry enters sigma as a constant so an
        // uncertainty objective cannot shrink sigma by bending the boxes.
        let geo_sigma_raw = col(Col::GeoSigma, 2)?.softplus();
        let scale = p("geo.log_scale");
        let log_heights = [log_size.narrow(1, 1, 1)?, log_kp];
        let base = (self.cfg.f_scale / SIZE_UNIT).ln();
        let mut zs = vec![z_reg];
        let mut lss = vec![ls_reg];
        for (j, lh) in log_heights.into_iter().enumerate() {
            let lz = lh.rsub_scalar(base).try_add(scale.narrow(0, j, 1)?)?;
            let floor = tape.stop_gradient((-lh).exp().mul_scalar(GEO_FLOOR_PX / SIZE_UNIT));
            let rel = floor + geo_sigma_raw.narrow(1, j, 1)?;
            lss.push(tape.stop_gradient(lz) + rel.ln());
            zs.push(lz.exp());
        }
        let head_z = tape.concat(&zs, 1)?;
        let head_log_sigma = tape.concat(&lss, 1)?;

        Ok(Forward {
            vars,
            logits,
            obj_logit,
            offset,
            log_size,
            log_kp,
            head_z,
            head_log_sigma,
            dense,
            batch_stats,
            images: n,
        })
    }

    /// Inference forward plus decoding, with running statistics.
    pub fn detect(&self, images: &Tensor) -> Result<Vec<Vec<Detection>>> {
        let tape = Tape::new();
        let fwd = self.forward(&tape, images, BnMode::Running, &|_| false)?;
        self.decode(&fwd)
    }

    /// Dense depth `[N, H, W]` at image resolution, running statistics.
    pub fn dense_depth(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let fwd = self.forward(&tape, images, BnMode::Running, &|_| false)?;
        let up = tape.upsample_bilinear(fwd.dense, self.cfg.height, self.cfg.width)?;
        up.value().reshape(&[fwd.images, self.cfg.height, self.cfg.width])
    }

    /// Emits every cell whose objectness reaches the threshold and is a
    /// local maximum of its 3x3 neighborhood (ties are kept).
    pub fn decode(&self, fwd: &Forward<'_>) -> Result<Vec<Vec<Detection>>> {
        let (gh, gw) = self.cfg.grid();
        let g = gh * gw;
        let c = self.cfg.classes;
        let logits = fwd.logits.value();
        let obj = fwd.obj_logit.value();
        let off = fwd.offset.value();
        let size = fwd.log_size.value();
        let z = fwd.head_z.value();
        let ls = fwd.head_log_sigma.value();
        let mut out = Vec::with_capacity(fwd.images);
        for i in 0..fwd.images {
            let mut dets = Vec::new();
            for cell in 0..g {
                let r = i * g + cell;
                let o = crate::autodiff::sigmoid_scalar(obj.data()[r]);
                if o < self.cfg.threshold || !is_peak(&obj.data()[i * g..(i + 1) * g], gh, gw, cell) {
                    continue;
                }
                let (row, colx) = ((cell / gw) as f64, (cell % gw) as f64);
                let cx = (colx + off.data()[2 * r]) * CELL as f64;
                let cy = (row + off.data()[2 * r + 1]) * CELL as f64;
                let bw = SIZE_UNIT * size.data()[2 * r].exp();
                let bh = SIZE_UNIT * size.data()[2 * r + 1].exp();
                let bbox = BoxPx { u_min: cx - bw / 2.0, v_min: cy - bh / 2.0, u_max: cx + bw / 2.0, v_max: cy + bh / 2.0 }
                    .clipped(self.cfg.height, self.cfg.width);
                let probs = ProbVector::new(crate::autodiff::softmax_vec(&logits.data()[r * c..(r + 1) * c]))?;
                let score = (o * probs.max_prob()).clamp(0.0, 1.0);
                let heads = HeadSet::new(
                    z.data()[r * HEADS..(r + 1) * HEADS].to_vec(),
                    ls.data()[r * HEADS..(r + 1) * HEADS].iter().map(|v| v.exp()).collect(),
                )?;
                dets.push(Detection { bbox, probs, objectness: o, score, heads, cell });
            }
            out.push(dets);
        }
        Ok(out)
    }

    /// Blends batch statistics into the running statistics.
    pub fn update_running(&mut self, stats: &[(String, Vec<f64>, Vec<f64>)], momentum: f64) {
        for (layer, mean, var) in stats {
            for (key, src) in [("mean", mean), ("var", var)] {
                if let Some(t) = self.running.get_mut(&format!("{layer}.{key}")) {
                    for (r, s) in t.data_mut().iter_mut().zip(src) {
                        *r = (1.0 - momentum) * *r + momentum * s;
                    }
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(DuoError::MissingCheckpoint(path.to_path_buf()));
        }
        let det: ToyDetector = serde_json::from_slice(&std::fs::read(path)?)?;
        det.cfg.validate()?;
        for (name, shape) in Self::shapes(&det.cfg) {
            match det.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(DuoError::Format(format!("checkpoint parameter {name} missing or misshapen"))),
            }
        }
        Ok(det)
    }
}

fn is_peak(obj: &[f64], gh: usize, gw: usize, cell: usize) -> bool {
    let (r, c) = (cell / gw, cell % gw);
    let v = obj[cell];
    for nr in r.saturating_sub(1)..=(r + 1).min(gh - 1) {
        for nc in c.saturating_sub(1)..=(c + 1).min(gw - 1) {
            if obj[nr * gw + nc] > v {
                return false;
            }
        }
    }
    true
}

/// Stacks `[3, H, W]` images into `[N, 3, H, W]`.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| DuoError::contract("no images to stack"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for im in images {
        if im.shape() != shape.as_slice() {
            return Err(DuoError::contract("images differ in shape"));
        }
        data.extend_from_slice(im.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Ok(Tensor::from_parts(full, data))
}
