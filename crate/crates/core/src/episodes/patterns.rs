use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{default_splits, stream_rng, Split};
use crate::error::{Error, Result};

/// Number of distinct glyph classes the generator can draw.
pub const MAX_GLYPHS: usize = 48;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatternsParams {
    pub image_size: usize,
    pub n_classes: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Maximum placement offset in pixels along each axis.
    pub jitter: usize,
    /// Seed for the assignment of glyphs to class ids.
    pub world_seed: u64,
}

impl Default for PatternsParams {
    fn default() -> Self {
        PatternsParams {
            image_size: 16,
            n_classes: MAX_GLYPHS,
            noise: 0.1,
            jitter: 1,
            world_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Glyph {
    Bar(f64),
    Cross(f64),
    Ring(f64),
    Disk(f64),
    Square(f64),
    Corner(f64, f64),
    Parallel(f64),
    Triangle(f64),
    Grating(f64, f64),
    Checker(f64),
    Frame(bool),
}

fn glyph_table() -> Vec<Glyph> {
    let mut g = Vec::with_capacity(MAX_GLYPHS);
    g.extend((0..8).map(|i| Glyph::Bar(i as f64 * PI / 8.0)));
    g.extend((0..4).map(|i| Glyph::Cross(i as f64 * PI / 8.0)));
    g.extend([0.3, 0.45, 0.6, 0.75].map(Glyph::Ring));
    g.extend([0.2, 0.35, 0.5, 0.65].map(Glyph::Disk));
    g.extend([0.3, 0.5, 0.7, 0.85].map(Glyph::Square));
    g.extend([(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)].map(|(x, y)| Glyph::Corner(x, y)));
    g.extend((0..4).map(|i| Glyph::Parallel(i as f64 * PI / 4.0)));
    g.extend((0..4).map(|i| Glyph::Triangle(i as f64 * PI / 2.0)));
    for f in [2.0, 3.0] {
        g.extend((0..4).map(|i| Glyph::Grating(i as f64 * PI / 4.0, f)));
    }
    g.extend([2.0, 3.0].map(Glyph::Checker));
    g.extend([true, false].map(Glyph::Frame));
    debug_assert_eq!(g.len(), MAX_GLYPHS);
    g
}

/// Distance from `(u, v)` to the centered segment of half-length `half` at
/// angle `theta`.
fn segment_distance(u: f64, v: f64, theta: f64, half: f64) -> f64 {
    let (c, s) = (theta.cos(), theta.sin());
    let t = (u * c + v * s).clamp(-half, half);
    ((u - t * c).powi(2) + (v - t * s).powi(2)).sqrt()
}

/// `(along, across)` coordinates in a frame rotated by `theta`.
fn rotated(u: f64, v: f64, theta: f64) -> (f64, f64) {
    let (c, s) = (theta.cos(), theta.sin());
    (u * c + v * s, -u * s + v * c)
}

impl Glyph {
    /// Whether the point `(u, v) ∈ [-1, 1]²` is inked.
    fn contains(self, u: f64, v: f64) -> bool {
        let rho = (u * u + v * v).sqrt();
        let box_norm = u.abs().max(v.abs());
        match self {
            Glyph::Bar(t) => segment_distance(u, v, t, 0.75) < 0.14,
            Glyph::Cross(t) => segment_distance(u, v, t, 0.75).min(segment_distance(u, v, t + PI / 2.0, 0.75)) < 0.14,
            Glyph::Ring(r) => (rho - r).abs() < 0.1,
            Glyph::Disk(r) => rho < r,
            Glyph::Square(h) => box_norm < h && box_norm > h - 0.14,
            Glyph::Corner(sx, sy) => {
                ((v - 0.55 * sy).abs() < 0.12 && u.abs() <= 0.67) || ((u - 0.55 * sx).abs() < 0.12 && v.abs() <= 0.67)
            }
            Glyph::Parallel(t) => {
                let (a, b) = rotated(u, v, t);
                a.abs() < 0.7 && (b.abs() - 0.35).abs() < 0.1
            }
            Glyph::Triangle(t) => {
                let (a, b) = rotated(u, v, t);
                a > -0.6 && b.abs() < (0.7 - a) * 0.5
            }
            Glyph::Grating(t, f) => rho < 0.85 && (f * PI * rotated(u, v, t).0).sin() > 0.0,
            Glyph::Checker(k) => box_norm < 0.85 && (k * PI * u).sin() * (k * PI * v).sin() > 0.0,
            Glyph::Frame(dot) => {
                let outer = box_norm < 0.8 && box_norm > 0.66;
                let inner = if dot {
                    rho < 0.25
                } else {
                    box_norm < 0.45 && box_norm > 0.31
                };
                outer || inner
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Patterns {
    pub params: PatternsParams,
    pub splits: Vec<Split>,
    glyphs: Vec<Glyph>,
}

impl Patterns {
    pub fn new(params: PatternsParams) -> Result<Self> {
        if params.image_size < 8 {
            return Err(Error::invalid(format!(
                "image_size must be >= 8, got {}",
                params.image_size
            )));
        }
        if params.n_classes > MAX_GLYPHS {
            return Err(Error::invalid(format!(
                "{} glyph classes requested, the generator supports {MAX_GLYPHS}",
                params.n_classes
            )));
        }
        if !(params.noise >= 0.0) {
            return Err(Error::invalid("noise must be >= 0"));
        }
        if params.jitter * 4 >= params.image_size {
            return Err(Error::invalid("jitter must be under a quarter of the image size"));
        }
        let splits = default_splits(params.n_classes)?;
        let mut glyphs = glyph_table();
        glyphs.shuffle(&mut stream_rng(params.world_seed, 0));
        glyphs.truncate(params.n_classes);
        Ok(Patterns { params, splits, glyphs })
    }

    /// Renders `count` images of `class`. Ink maps to `0.5 + contrast / 2`
    /// and background to `0.5 - contrast / 2` (swapped when `flip`), then
    /// noise is added and values are clamped to `[0, 1]`.
    pub(super) fn draw<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        class: usize,
        count: usize,
        contrast: f64,
        flip: bool,
        out: &mut Vec<f64>,
    ) {
        let s = self.params.image_size;
        let j = self.params.jitter as i64;
        let glyph = self.glyphs[class];
        let pixel = 2.0 / s as f64;
        for _ in 0..count {
            let dx = rng.random_range(-j..=j) as f64;
            let dy = rng.random_range(-j..=j) as f64;
            for r in 0..s {
                for c in 0..s {
                    let u = (c as f64 + 0.5 - dx) * pixel - 1.0;
                    let v = (r as f64 + 0.5 - dy) * pixel - 1.0;
                    let ink = if glyph.contains(u, v) { 1.0 } else { 0.0 };
                    let mut x = 0.5 + contrast * (ink - 0.5);
                    if flip {
                        x = 1.0 - x;
                    }
                    if self.params.noise > 0.0 {
                        x += self.params.noise * rng.sample::<f64, _>(StandardNormal);
                    }
                    out.push(x.clamp(0.0, 1.0));
                }
            }
        }
    }
}
