//! Procedural kidney phantoms: a rotated elliptical kidney with a smaller
//! elliptical tumor centred inside it, over Gaussian background noise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{preprocess, GrayImage, LabelMap, Sample};
use crate::error::{Error, Result};
use crate::seed;

const MAX_ATTEMPTS: u64 = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// Square canvas extent in pixels.
    pub size: usize,
    /// Kidney semi-axis range as a fraction of `size`.
    pub kidney_axes: (f64, f64),
    /// Tumor semi-axis range as a fraction of `size`.
    pub tumor_axes: (f64, f64),
    /// Inclusive intensity band of kidney pixels.
    pub kidney_band: (u8, u8),
    pub tumor_band: (u8, u8),
    pub background_mean: f64,
    /// Standard deviation of the background noise (0 gives a flat background).
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 64,
            kidney_axes: (0.16, 0.28),
            tumor_axes: (0.06, 0.11),
            kidney_band: (125, 175),
            tumor_band: (190, 240),
            background_mean: 70.0,
            noise_std: 18.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawPhantom {
    pub id: String,
    pub image: GrayImage,
    pub mask: LabelMap,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    /// Half-widths of the axis-aligned bounding box.
    fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let hx = ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt();
        let hy = ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt();
        (hx, hy)
    }

    fn inside_canvas(&self, size: f64) -> bool {
        let (hx, hy) = self.half_extents();
        self.cx - hx >= 0.0 && self.cx + hx <= size && self.cy - hy >= 0.0 && self.cy + hy <= size
    }

    fn area(&self) -> f64 {
        std::f64::consts::PI * self.a * self.b
    }
}

fn validate(spec: &PhantomSpec) -> Result<()> {
    let ok_range = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi < 0.5;
    if spec.size < 8 {
        return Err(Error::invalid("generate_phantom", format!("canvas {} too small (min 8)", spec.size)));
    }
    if !ok_range(spec.kidney_axes) || !ok_range(spec.tumor_axes) {
        return Err(Error::invalid("generate_phantom", "axis fractions must satisfy 0 < lo <= hi < 0.5"));
    }
    if spec.kidney_band.0 > spec.kidney_band.1 || spec.tumor_band.0 > spec.tumor_band.1 {
        return Err(Error::invalid("generate_phantom", "intensity band lower bound exceeds upper bound"));
    }
    if !(spec.noise_std >= 0.0) || !spec.background_mean.is_finite() {
        return Err(Error::invalid("generate_phantom", "noise must be finite and non-negative"));
    }
    Ok(())
}

fn draw_geometry(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Option<(Ellipse, Ellipse)> {
    let s = spec.size as f64;
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let a = rng.random_range(spec.kidney_axes.0..=spec.kidney_axes.1) * s;
    let b = rng.random_range(spec.kidney_axes.0..=spec.kidney_axes.1) * s;
    let mut kidney = Ellipse { cx: 0.0, cy: 0.0, a, b, theta };
    let (hx, hy) = kidney.half_extents();
    if 2.0 * hx + 2.0 >= s || 2.0 * hy + 2.0 >= s {
        return None;
    }
    kidney.cx = rng.random_range(hx + 1.0..s - hx - 1.0);
    kidney.cy = rng.random_range(hy + 1.0..s - hy - 1.0);

    // tumor centre: a point within 80% of the kidney radius
    let r = 0.8 * rng.random::<f64>().sqrt();
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let (u, v) = (kidney.a * r * phi.cos(), kidney.b * r * phi.sin());
    let (st, ct) = kidney.theta.sin_cos();
    let tumor = Ellipse {
        cx: kidney.cx + u * ct - v * st,
        cy: kidney.cy + u * st + v * ct,
        a: rng.random_range(spec.tumor_axes.0..=spec.tumor_axes.1) * s,
        b: rng.random_range(spec.tumor_axes.0..=spec.tumor_axes.1) * s,
        theta: rng.random_range(0.0..std::f64::consts::PI),
    };
    (tumor.inside_canvas(s) && tumor.area() < kidney.area()).then_some((kidney, tumor))
}

/// Raw 8-bit phantom number `index`, a pure function of `(spec, index)`.
pub fn generate_phantom_raw(spec: &PhantomSpec, index: usize) -> Result<RawPhantom> {
    validate(spec)?;
    let base = seed::derive(spec.seed, index as u64);
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(base, attempt));
        let Some((kidney, tumor)) = draw_geometry(spec, &mut rng) else { continue };
        let n = spec.size;
        let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
        let mut pixels = Vec::with_capacity(n * n);
        let mut labels = Vec::with_capacity(n * n);
        for row in 0..n {
            for col in 0..n {
                let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                let (label, value) = if tumor.contains(x, y) {
                    (2, rng.random_range(spec.tumor_band.0..=spec.tumor_band.1))
                } else if kidney.contains(x, y) {
                    (1, rng.random_range(spec.kidney_band.0..=spec.kidney_band.1))
                } else {
                    let jitter = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    (0, (spec.background_mean + jitter).round().clamp(0.0, 255.0) as u8)
                };
                pixels.push(value);
                labels.push(label);
            }
        }
        return Ok(RawPhantom {
            id: format!("{index:04}"),
            image: GrayImage::new(n, n, pixels)?,
            mask: LabelMap::new(n, n, labels)?,
        });
    }
    Err(Error::invalid(
        "generate_phantom",
        format!("no valid geometry for index {index} after {MAX_ATTEMPTS} attempts"),
    ))
}

/// Normalised phantom sample.
pub fn generate_phantom(spec: &PhantomSpec, index: usize) -> Result<Sample> {
    let raw = generate_phantom_raw(spec, index)?;
    Ok(Sample {
        id: raw.id,
        image: preprocess(&raw.image, spec.size)?,
        mask: raw.mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = PhantomSpec { seed: 9, ..Default::default() };
        assert_eq!(generate_phantom(&spec, 3).unwrap(), generate_phantom(&spec, 3).unwrap());
        assert_ne!(generate_phantom_raw(&spec, 3).unwrap().image, generate_phantom_raw(&spec, 4).unwrap().image);
    }

    #[test]
    fn label_counts_ordered() {
        let spec = PhantomSpec::default();
        for i in 0..50 {
            let p = generate_phantom_raw(&spec, i).unwrap();
            let (bg, k, t) = (p.mask.count(0), p.mask.count(1), p.mask.count(2));
            assert!(0 < t && t < k && k < bg, "index {i}: {bg} {k} {t}");
        }
    }

    #[test]
    fn zero_noise_background_is_flat() {
        let spec = PhantomSpec { noise_std: 0.0, ..Default::default() };
        let p = generate_phantom_raw(&spec, 0).unwrap();
        let bg: Vec<u8> = p.image.pixels.iter().zip(&p.mask.labels).filter(|(_, &l)| l == 0).map(|(&v, _)| v).collect();
        assert!(bg.iter().all(|&v| v == 70));
    }

    #[test]
    fn intensities_follow_bands() {
        let spec = PhantomSpec::default();
        let p = generate_phantom_raw(&spec, 1).unwrap();
        for (&v, &l) in p.image.pixels.iter().zip(&p.mask.labels) {
            match l {
                1 => assert!((125..=175).contains(&v)),
                2 => assert!((190..=240).contains(&v)),
                _ => {}
            }
        }
    }

    #[test]
    fn impossible_geometry_rejected() {
        let spec = PhantomSpec { kidney_axes: (0.49, 0.49), ..Default::default() };
        assert!(generate_phantom_raw(&spec, 0).is_err());
        let spec = PhantomSpec { size: 4, ..Default::default() };
        assert!(generate_phantom_raw(&spec, 0).is_err());
    }
}
