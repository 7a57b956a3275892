//! Parametric shape renderer.

use std::f32::consts::{PI, TAU};

use rand::Rng;

use super::Nuisance;
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use rand_distr::{Distribution, StandardNormal};

pub const NUM_CLASSES: u32 = 8;

const BACKGROUND: f32 = -0.75;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageConfig {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 3,
        }
    }
}

impl ImageConfig {
    pub fn shape(&self) -> [usize; 3] {
        [
            self.height as usize,
            self.width as usize,
            self.channels as usize,
        ]
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image extents must be positive".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "renderer supports 1 or 3 channels, got {}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Inside test in shape-local units (circumradius ≈ 1).
fn inside(class: u32, u: f32, v: f32) -> bool {
    let r2 = u * u + v * v;
    match class {
        0 => r2 <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        2 => v >= -0.5 && v <= 1.0 - 3f32.sqrt() * u.abs(),
        3 => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
        4 => (0.3025..=1.0).contains(&r2),
        5 => u.abs() <= 1.0 && v.abs() <= 0.3,
        6 => v >= -0.5 && u * u + (v + 0.5) * (v + 0.5) <= 1.0,
        _ => {
            let phi = v.atan2(u);
            r2.sqrt() <= 0.4 + 0.6 * (2.5 * phi).cos().abs().powi(3)
        }
    }
}

fn hue_to_rgb(hue: f32) -> [f32; 3] {
    let (s, v) = (0.85f32, 1.0f32);
    let h = hue.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m].map(|ch| ch * 2.0 - 1.0)
}

/// Draws nuisance factors from their fixed ranges.
pub fn sample_nuisance(rng: &mut StreamRng) -> Nuisance {
    Nuisance {
        pos_x: rng.random_range(-0.35..=0.35),
        pos_y: rng.random_range(-0.35..=0.35),
        scale: rng.random_range(0.45..=0.75),
        rotation: rng.random_range(0.0..TAU),
        noise: rng.random_range(0.0..=0.08),
    }
}

/// Renders one `[H, W, C]` image with values in `[-1, 1]`.
pub fn render(
    cfg: &ImageConfig,
    class: u32,
    hue: f32,
    nuisance: &Nuisance,
    rng: &mut StreamRng,
) -> Vec<f32> {
    let (h, w, c) = (
        cfg.height as usize,
        cfg.width as usize,
        cfg.channels as usize,
    );
    let half = 0.5 * h.min(w) as f32;
    let cx = 0.5 * w as f32 * (1.0 + nuisance.pos_x);
    let cy = 0.5 * h as f32 * (1.0 + nuisance.pos_y);
    let radius = nuisance.scale * half;
    let (sin, cos) = (-nuisance.rotation).sin_cos();
    let color = if c == 1 {
        // luminance-like grey level per hue keeps single-channel images informative
        [(hue * 2.0 * PI).cos() * 0.8; 3]
    } else {
        hue_to_rgb(hue)
    };
    let mut out = Vec::with_capacity(h * w * c);
    let sub = 1.0 / SUPERSAMPLE as f32;
    for y in 0..h {
        for x in 0..w {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f32 + (sx as f32 + 0.5) * sub - cx;
                    let py = y as f32 + (sy as f32 + 0.5) * sub - cy;
                    // image y grows downward; flip so shapes are upright
                    let (u0, v0) = (px / radius, -py / radius);
                    let u = cos * u0 - sin * v0;
                    let v = sin * u0 + cos * v0;
                    if inside(class, u, v) {
                        hits += 1;
                    }
                }
            }
            let cover = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
            for ch in color.iter().take(c) {
                let n: f32 = StandardNormal.sample(rng);
                let value = BACKGROUND * (1.0 - cover) + ch * cover + nuisance.noise * n;
                out.push(value.clamp(-1.0, 1.0));
            }
        }
    }
    out
}
