//! Parametric image corruptions with a five-level severity ladder.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DuoError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    Brightness,
    Contrast,
    Pixelate,
    FogHaze,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
        CorruptionKind::FogHaze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::FogHaze => "fog_haze",
        }
    }

    /// Severity-indexed parameter (index 0 is severity 1).
    pub fn parameter(self, severity: u8) -> f64 {
        let table: [f64; 5] = match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            // photon count per unit intensity
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            // contrast factor around the image mean
            CorruptionKind::Contrast => [0.6, 0.45, 0.3, 0.2, 0.1],
            // block edge in pixels
            CorruptionKind::Pixelate => [2.0, 3.0, 4.0, 6.0, 8.0],
            // haze opacity
            CorruptionKind::FogHaze => [0.2, 0.35, 0.5, 0.62, 0.75],
        };
        table[usize::from(severity.clamp(1, 5)) - 1]
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = DuoError;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DuoError::contract(format!("unknown corruption kind '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl Corruption {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(DuoError::contract(format!("severity {severity} outside 1..=5")));
        }
        Ok(Corruption { kind, severity })
    }
}

/// Applies `c` to a `[3, H, W]` image; output is clipped to `[0, 1]`.
pub fn corrupt(image: &Tensor, c: Corruption, rng: &mut Rng) -> Result<Tensor> {
    let [3, h, w] = *image.shape() else {
        return Err(DuoError::contract(format!("expected [3,H,W] image, got {:?}", image.shape())));
    };
    if !(1..=5).contains(&c.severity) {
        return Err(DuoError::contract(format!("severity {} outside 1..=5", c.severity)));
    }
    let p = c.kind.parameter(c.severity);
    let src = image.data();
    let mut out = src.to_vec();
    match c.kind {
        CorruptionKind::GaussianNoise => out.iter_mut().for_each(|v| *v += rng.normal(0.0, p)),
        CorruptionKind::ShotNoise => out.iter_mut().for_each(|v| {
            let lam = (v.max(0.0) * p).max(1e-9);
            *v = rng.poisson(lam) / p;
        }),
        CorruptionKind::Brightness => out.iter_mut().for_each(|v| *v += p),
        CorruptionKind::Contrast => {
            let n = h * w;
            for ch in 0..3 {
                let plane = &mut out[ch * n..(ch + 1) * n];
                let mean = plane.iter().sum::<f64>() / n as f64;
                plane.iter_mut().for_each(|v| *v = (*v - mean) * p + mean);
            }
        }
        CorruptionKind::Pixelate => {
            let b = p as usize;
            let n = h * w;
            for ch in 0..3 {
                let plane = &src[ch * n..(ch + 1) * n];
                for r0 in (0..h).step_by(b) {
                    for c0 in (0..w).step_by(b) {
                        let (r1, c1) = ((r0 + b).min(h), (c0 + b).min(w));
                        let mut s = 0.0;
                        for r in r0..r1 {
                            s += plane[r * w + c0..r * w + c1].iter().sum::<f64>();
                        }
                        let mean = s / ((r1 - r0) * (c1 - c0)) as f64;
                        for r in r0..r1 {
                            out[ch * n + r * w + c0..ch * n + r * w + c1].iter_mut().for_each(|v| *v = mean);
                        }
                    }
                }
            }
        }
        CorruptionKind::FogHaze => {
            // airlight with a smooth random vertical gradient
            let airlight = 0.8 + rng.uniform_in(-0.05, 0.05);
            let slope = rng.uniform_in(0.0, 0.3);
            let n = h * w;
            for ch in 0..3 {
                for r in 0..h {
                    let t = (p * (1.0 + slope * (0.5 - r as f64 / h as f64))).clamp(0.0, 1.0);
                    for v in &mut out[ch * n + r * w..ch * n + (r + 1) * w] {
                        *v = *v * (1.0 - t) + airlight * t;
                    }
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Tensor::from_parts(image.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::scene::{generate_scene, SceneConfig};

    fn mse(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn severity_increases_distortion() {
        let scene = generate_scene(&mut Rng::new(3), &SceneConfig::default());
        for kind in CorruptionKind::ALL {
            let errs: Vec<f64> = (1..=5)
                .map(|s| mse(&corrupt(&scene.image, Corruption::new(kind, s).unwrap(), &mut Rng::new(9)).unwrap(), &scene.image))
                .collect();
            assert!(errs[4] > errs[0], "{kind}: {errs:?}");
            for pair in errs.windows(2) {
                assert!(pair[1] >= pair[0] * 0.95, "{kind}: {errs:?}");
            }
        }
    }

    #[test]
    fn brightness_on_gray_image() {
        let img = Tensor::full(&[3, 4, 4], 0.5);
        let out = corrupt(&img, Corruption::new(CorruptionKind::Brightness, 1).unwrap(), &mut Rng::new(0)).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.6).abs() < 1e-15));
        let bright = Tensor::full(&[3, 4, 4], 0.95);
        let out = corrupt(&bright, Corruption::new(CorruptionKind::Brightness, 1).unwrap(), &mut Rng::new(0)).unwrap();
        assert!(out.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn deterministic_given_rng() {
        let img = generate_scene(&mut Rng::new(5), &SceneConfig::default()).image;
        for kind in CorruptionKind::ALL {
            let c = Corruption::new(kind, 3).unwrap();
            assert_eq!(corrupt(&img, c, &mut Rng::new(1)).unwrap(), corrupt(&img, c, &mut Rng::new(1)).unwrap());
        }
    }

    #[test]
    fn contract_errors() {
        assert!(Corruption::new(CorruptionKind::Contrast, 0).is_err());
        assert!(Corruption::new(CorruptionKind::Contrast, 6).is_err());
        assert!("snow".parse::<CorruptionKind>().is_err());
        assert_eq!("fog_haze".parse::<CorruptionKind>().unwrap(), CorruptionKind::FogHaze);
        let bad = Corruption { kind: CorruptionKind::Brightness, severity: 9 };
        assert!(corrupt(&Tensor::full(&[3, 4, 4], 0.5), bad, &mut Rng::new(0)).is_err());
    }
}
