//! Synthetic street-like scenes: colored boxes standing on a ground plane.
//!
//! Object depth follows a pinhole size law, `depth = f_scale / box_height`,
//! and objects rest on the ground, so both apparent size and image row
//! carry depth information.

use serde::{Deserialize, Serialize};

use crate::error::{DuoError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Axis-aligned box in pixels, `u` horizontal and `v` vertical.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPx {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl BoxPx {
    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.u_min + self.u_max), 0.5 * (self.v_min + self.v_max))
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn overlaps(&self, o: &BoxPx) -> bool {
        self.u_min < o.u_max && o.u_min < self.u_max && self.v_min < o.v_max && o.v_min < self.v_max
    }

    /// Clips to `[0, w] × [0, h]`, keeping at least one pixel of extent.
    pub fn clipped(&self, h: usize, w: usize) -> BoxPx {
        let (wf, hf) = (w as f64, h as f64);
        let u_min = self.u_min.clamp(0.0, wf - 1.0);
        let v_min = self.v_min.clamp(0.0, hf - 1.0);
        BoxPx {
            u_min,
            v_min,
            u_max: self.u_max.clamp(u_min + 1.0, wf),
            v_max: self.v_max.clamp(v_min + 1.0, hf),
        }
    }

    /// Whether the center of pixel `(row, col)` lies inside the box.
    pub fn contains_pixel(&self, row: usize, col: usize) -> bool {
        let (u, v) = (col as f64 + 0.5, row as f64 + 0.5);
        u >= self.u_min && u < self.u_max && v >= self.v_min && v < self.v_max
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: BoxPx,
    pub class_id: usize,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub classes: usize,
    /// `depth = f_scale / box_height_px`.
    pub f_scale: f64,
    pub horizon: f64,
    /// Ground contact row: `horizon + ground_scale / depth`.
    pub ground_scale: f64,
    pub min_box_height: usize,
    pub max_box_height: usize,
    pub sky_depth: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 96,
            min_objects: 1,
            max_objects: 4,
            classes: 3,
            f_scale: 240.0,
            horizon: 24.0,
            ground_scale: 380.0,
            min_box_height: 8,
            max_box_height: 24,
            sky_depth: 60.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 || self.classes < 2 || self.classes > CLASS_STYLES.len() {
            return Err(DuoError::Config(format!("unsupported scene geometry {self:?}")));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(DuoError::Config("object count range must satisfy 1 <= min <= max".into()));
        }
        if self.min_box_height < 4 || self.min_box_height > self.max_box_height || self.max_box_height >= self.height {
            return Err(DuoError::Config("bad box height range".into()));
        }
        Ok(())
    }

    pub fn depth_for_height(&self, box_height: f64) -> f64 {
        self.f_scale / box_height
    }
}

struct ClassStyle {
    color: [f64; 3],
    aspect: f64,
}

const CLASS_STYLES: [ClassStyle; 3] = [
    ClassStyle { color: [0.85, 0.22, 0.16], aspect: 1.6 },
    ClassStyle { color: [0.18, 0.32, 0.88], aspect: 0.5 },
    ClassStyle { color: [0.20, 0.78, 0.30], aspect: 1.0 },
];

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Dense ground-truth depth `[H, W]`.
    pub depth: Tensor,
    pub objects: Vec<GtObject>,
    pub seed: u64,
}

fn ground_depth(cfg: &SceneConfig, row: usize) -> f64 {
    let dv = row as f64 + 0.5 - cfg.horizon;
    if dv <= 0.0 {
        cfg.sky_depth
    } else {
        (cfg.ground_scale / dv).min(cfg.sky_depth)
    }
}

pub fn generate_scene(rng: &mut Rng, cfg: &SceneConfig) -> Scene {
    let seed = rng.seed();
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;

    // Background: sky gradient above the horizon, textured ground below.
    let sky_tint = rng.uniform_in(-0.05, 0.05);
    let ground_tint = rng.uniform_in(-0.05, 0.05);
    let (fu, fv, phase) = (rng.uniform_in(0.05, 0.2), rng.uniform_in(0.1, 0.3), rng.uniform_in(0.0, 6.28));
    let mut image = vec![0.0; 3 * n];
    let mut depth = vec![0.0; n];
    for r in 0..h {
        for c in 0..w {
            let k = r * w + c;
            depth[k] = ground_depth(cfg, r);
            let rgb = if (r as f64 + 0.5) < cfg.horizon {
                let t = r as f64 / cfg.horizon;
                [0.55 + 0.15 * t + sky_tint, 0.65 + 0.1 * t + sky_tint, 0.82 + sky_tint]
            } else {
                let tex = 0.04 * (fu * c as f64 + phase).sin() * (fv * r as f64).cos() + rng.uniform_in(-0.03, 0.03);
                [0.42 + ground_tint + tex, 0.40 + ground_tint + tex, 0.36 + ground_tint + tex]
            };
            for ch in 0..3 {
                image[ch * n + k] = rgb[ch];
            }
        }
    }

    let target = rng.int_in(cfg.min_objects, cfg.max_objects);
    let mut objects: Vec<GtObject> = Vec::with_capacity(target);
    let mut attempts = 0;
    while objects.len() < target && attempts < 200 {
        attempts += 1;
        let class_id = rng.int_in(0, cfg.classes - 1);
        let bh = rng.int_in(cfg.min_box_height, cfg.max_box_height) as f64;
        let z = cfg.depth_for_height(bh);
        let bw = (CLASS_STYLES[class_id].aspect * bh).round().max(4.0);
        let bottom = (cfg.horizon + cfg.ground_scale / z + rng.uniform_in(-3.0, 3.0)).round().min(h as f64);
        let top = bottom - bh;
        if top < 0.0 || bw >= w as f64 {
            continue;
        }
        let left = rng.int_in(0, w - bw as usize) as f64;
        let bbox = BoxPx { u_min: left, v_min: top, u_max: left + bw, v_max: bottom };
        // one object per cell of the 8-pixel grid, no overlaps
        let cell = |b: &BoxPx| {
            let (cu, cv) = b.center();
            ((cv / 8.0) as usize, (cu / 8.0) as usize)
        };
        if objects.iter().any(|o| o.bbox.overlaps(&bbox) || cell(&o.bbox) == cell(&bbox)) {
            continue;
        }
        objects.push(GtObject { bbox, class_id, depth: z });
    }
    if objects.is_empty() {
        // the smallest object always fits somewhere near the horizon
        let bh = cfg.min_box_height as f64;
        let z = cfg.depth_for_height(bh);
        let bottom = (cfg.horizon + cfg.ground_scale / z).round().min(h as f64);
        objects.push(GtObject {
            bbox: BoxPx { u_min: 2.0, v_min: bottom - bh, u_max: 2.0 + (bh * 1.6).round(), v_max: bottom },
            class_id: 0,
            depth: z,
        });
    }

    // Paint far to near so nearer objects occlude.
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| objects[b].depth.total_cmp(&objects[a].depth));
    for &i in &order {
        let o = &objects[i];
        let style = &CLASS_STYLES[o.class_id];
        let shade = rng.uniform_in(-0.08, 0.08);
        for r in o.bbox.v_min as usize..o.bbox.v_max as usize {
            for c in o.bbox.u_min as usize..o.bbox.u_max as usize {
                let k = r * w + c;
                depth[k] = o.depth;
                // darker lower band hints at wheels/legs and gives vertical structure
                let band = if (r as f64) > o.bbox.v_max - 0.25 * o.bbox.height() { -0.2 } else { 0.0 };
                for ch in 0..3 {
                    image[ch * n + k] = style.color[ch] + shade + band + rng.uniform_in(-0.02, 0.02);
                }
            }
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Scene {
        image: Tensor::from_parts(vec![3, h, w], image),
        depth: Tensor::from_parts(vec![h, w], depth),
        objects,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_seed() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&mut Rng::new(42), &cfg);
        let b = generate_scene(&mut Rng::new(42), &cfg);
        assert_eq!(a, b);
        let c = generate_scene(&mut Rng::new(43), &cfg);
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn size_depth_law() {
        let cfg = SceneConfig::default();
        assert_eq!(cfg.depth_for_height(10.0) / cfg.depth_for_height(20.0), 2.0);
        let s = generate_scene(&mut Rng::new(1), &cfg);
        for o in &s.objects {
            assert_eq!(o.depth, cfg.f_scale / o.bbox.height());
        }
    }

    #[test]
    fn object_count_and_bounds() {
        let cfg = SceneConfig::default();
        let mut r = Rng::new(7);
        for _ in 0..1000 {
            let s = generate_scene(&mut r.fork(0), &cfg);
            assert!((cfg.min_objects..=cfg.max_objects).contains(&s.objects.len()));
            for o in &s.objects {
                assert!(o.bbox.u_min >= 0.0 && o.bbox.v_min >= 0.0);
                assert!(o.bbox.u_max <= cfg.width as f64 && o.bbox.v_max <= cfg.height as f64);
            }
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.depth.data().iter().all(|v| *v > 0.0));
        }
    }
}
