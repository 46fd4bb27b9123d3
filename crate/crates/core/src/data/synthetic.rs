//! Procedural video clips with coherent motion, values in `[-1, 1]`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SyntheticKind {
    MovingRects,
    DriftingGradient,
    BouncingDisc,
    TexturedNoisePan,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 4] = [
        SyntheticKind::MovingRects,
        SyntheticKind::DriftingGradient,
        SyntheticKind::BouncingDisc,
        SyntheticKind::TexturedNoisePan,
    ];
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::MovingRects => "moving-rects",
            SyntheticKind::DriftingGradient => "drifting-gradient",
            SyntheticKind::BouncingDisc => "bouncing-disc",
            SyntheticKind::TexturedNoisePan => "textured-noise-pan",
        })
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SyntheticKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown synthetic video kind {:?}", s)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideoSpec {
    pub kind: SyntheticKind,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Upper bound on per-frame displacement in pixels.
    pub max_velocity: f64,
    pub objects: usize,
    pub seed: u64,
}

impl SyntheticVideoSpec {
    pub fn new(kind: SyntheticKind, frames: usize, height: usize, width: usize, seed: u64) -> Self {
        SyntheticVideoSpec {
            kind,
            frames,
            height,
            width,
            max_velocity: 1.5,
            objects: 2,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("synthetic video needs positive extents".into()));
        }
        if !(self.max_velocity >= 0.0 && self.max_velocity.is_finite()) {
            return Err(Error::Config("max_velocity must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// A disc moving on straight lines and reflecting off the frame borders.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disc {
    pub start: [f64; 2],
    pub velocity: [f64; 2],
    pub radius: f64,
    pub color: [f64; 3],
}

/// Position of a point starting at `p0` with velocity `v` on `[lo, hi]` with
/// mirror reflections at both ends, after `t` frames.
pub fn reflect_path(p0: f64, v: f64, lo: f64, hi: f64, t: f64) -> f64 {
    let len = hi - lo;
    if len <= 0.0 {
        return lo;
    }
    let u = (p0 - lo + v * t).rem_euclid(2.0 * len);
    lo + if u > len { 2.0 * len - u } else { u }
}

impl Disc {
    /// Closed-form centre `(y, x)` at frame `t` within an `h × w` frame.
    pub fn center(&self, t: usize, h: usize, w: usize) -> [f64; 2] {
        let r = self.radius;
        [
            reflect_path(self.start[0], self.velocity[0], r, h as f64 - r, t as f64),
            reflect_path(self.start[1], self.velocity[1], r, w as f64 - r, t as f64),
        ]
    }
}

/// The discs drawn by a bouncing-disc spec, in drawing order.
pub fn bouncing_discs(spec: &SyntheticVideoSpec) -> Vec<Disc> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let _background = random_color(&mut rng);
    (0..spec.objects.max(1))
        .map(|_| {
            let radius = (h.min(w) * rng.gen_range(0.12..0.22)).max(1.0);
            let start = [
                rng.gen_range(radius..(h - radius).max(radius + 1e-9)),
                rng.gen_range(radius..(w - radius).max(radius + 1e-9)),
            ];
            let velocity = random_velocity(&mut rng, spec.max_velocity);
            Disc {
                start,
                velocity,
                radius,
                color: random_color(&mut rng),
            }
        })
        .collect()
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)]
}

/// Velocity with Euclidean norm at most `max`.
fn random_velocity<R: Rng>(rng: &mut R, max: f64) -> [f64; 2] {
    let speed = rng.gen_range(0.5..=1.0) * max;
    let angle = rng.gen_range(0.0..2.0 * PI);
    [speed * angle.sin(), speed * angle.cos()]
}

/// Generates a `(1, frames, height, width, 3)` clip.
pub fn gen_synthetic(spec: &SyntheticVideoSpec) -> Result<Tensor<f32>> {
    spec.validate()?;
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let mut data = vec![0.0f32; t * h * w * 3];
    match spec.kind {
        SyntheticKind::BouncingDisc => draw_discs(spec, &mut data),
        SyntheticKind::MovingRects => draw_rects(spec, &mut data),
        SyntheticKind::DriftingGradient => draw_gradient(spec, &mut data),
        SyntheticKind::TexturedNoisePan => draw_texture(spec, &mut data),
    }
    for v in &mut data {
        *v = v.clamp(-1.0, 1.0);
    }
    Tensor::from_vec(&[1, t, h, w, 3], data)
}

fn draw_discs(spec: &SyntheticVideoSpec, data: &mut [f32]) {
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let background = random_color(&mut rng);
    let discs = bouncing_discs(spec);
    for f in 0..t {
        let centers: Vec<[f64; 2]> = discs.iter().map(|d| d.center(f, h, w)).collect();
        for y in 0..h {
            for x in 0..w {
                let shade = 0.15 * ((y as f64 / h as f64) - 0.5);
                let mut px = background.map(|c| c * 0.5 + shade);
                for (d, c) in discs.iter().zip(&centers) {
                    let dist = ((y as f64 + 0.5 - c[0]).powi(2) + (x as f64 + 0.5 - c[1]).powi(2)).sqrt();
                    let cover = (d.radius - dist + 0.5).clamp(0.0, 1.0);
                    for k in 0..3 {
                        px[k] += cover * (d.color[k] - px[k]);
                    }
                }
                let i = ((f * h + y) * w + x) * 3;
                for k in 0..3 {
                    data[i + k] = px[k] as f32;
                }
            }
        }
    }
}

fn draw_rects(spec: &SyntheticVideoSpec, data: &mut [f32]) {
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let background = random_color(&mut rng);
    struct Rect {
        pos: [f64; 2],
        size: [f64; 2],
        velocity: [f64; 2],
        color: [f64; 3],
    }
    let rects: Vec<Rect> = (0..spec.objects.max(1))
        .map(|_| Rect {
            pos: [rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)],
            size: [
                (h as f64 * rng.gen_range(0.2..0.5)).max(1.0),
                (w as f64 * rng.gen_range(0.2..0.5)).max(1.0),
            ],
            velocity: random_velocity(&mut rng, spec.max_velocity),
            color: random_color(&mut rng),
        })
        .collect();
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let mut px = background.map(|c| c * 0.5);
                for r in &rects {
                    // toroidal wrap keeps every rectangle on screen
                    let oy = (r.pos[0] + r.velocity[0] * f as f64).rem_euclid(h as f64);
                    let ox = (r.pos[1] + r.velocity[1] * f as f64).rem_euclid(w as f64);
                    let dy = (y as f64 + 0.5 - oy).rem_euclid(h as f64);
                    let dx = (x as f64 + 0.5 - ox).rem_euclid(w as f64);
                    if dy < r.size[0] && dx < r.size[1] {
                        px = r.color;
                    }
                }
                let i = ((f * h + y) * w + x) * 3;
                for k in 0..3 {
                    data[i + k] = px[k] as f32;
                }
            }
        }
    }
}

fn draw_gradient(spec: &SyntheticVideoSpec, data: &mut [f32]) {
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let velocity = random_velocity(&mut rng, spec.max_velocity);
    let waves: Vec<([f64; 2], f64)> = (0..3)
        .map(|_| {
            let period = rng.gen_range(0.6..1.5) * h.max(w) as f64;
            let angle: f64 = rng.gen_range(0.0..2.0 * PI);
            ([angle.sin() * 2.0 * PI / period, angle.cos() * 2.0 * PI / period], rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let py = y as f64 - velocity[0] * f as f64;
                let px = x as f64 - velocity[1] * f as f64;
                let i = ((f * h + y) * w + x) * 3;
                for (k, (kv, phase)) in waves.iter().enumerate() {
                    data[i + k] = (0.8 * (kv[0] * py + kv[1] * px + phase).sin()) as f32;
                }
            }
        }
    }
}

fn draw_texture(spec: &SyntheticVideoSpec, data: &mut [f32]) {
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let velocity = random_velocity(&mut rng, spec.max_velocity);
    // band-limited noise: a handful of random plane waves per channel
    let waves: Vec<Vec<(f64, f64, f64, f64)>> = (0..3)
        .map(|_| {
            (0..6)
                .map(|_| {
                    let freq = rng.gen_range(0.08..0.45);
                    let angle: f64 = rng.gen_range(0.0..2.0 * PI);
                    (freq * angle.sin(), freq * angle.cos(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.1..0.3))
                })
                .collect()
        })
        .collect();
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let py = y as f64 - velocity[0] * f as f64;
                let px = x as f64 - velocity[1] * f as f64;
                let i = ((f * h + y) * w + x) * 3;
                for (k, ws) in waves.iter().enumerate() {
                    let v: f64 = ws.iter().map(|(ky, kx, ph, a)| a * (ky * py + kx * px + ph).sin()).sum();
                    data[i + k] = v as f32;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_path_stays_in_range() {
        for t in 0..200 {
            let p = reflect_path(3.0, 1.7, 2.0, 10.0, t as f64);
            assert!((2.0..=10.0).contains(&p));
        }
        assert!((reflect_path(9.0, 2.0, 2.0, 10.0, 1.0) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in SyntheticKind::ALL {
            assert_eq!(k.to_string().parse::<SyntheticKind>().unwrap(), k);
        }
    }

    #[test]
    fn values_in_range() {
        for k in SyntheticKind::ALL {
            let v = gen_synthetic(&SyntheticVideoSpec::new(k, 5, 12, 10, 3)).unwrap();
            assert!(v.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }
}
