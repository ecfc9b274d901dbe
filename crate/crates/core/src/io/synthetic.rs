//! Procedural shape images: one coloured geometric object on a textured
//! noise background. The object's shape is the class label; its size class
//! controls how much of the image it covers.

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, SampleMeta, SizeClass};
use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const SHAPES: [&str; 8] = ["disk", "square", "triangle", "diamond", "plus", "ring", "cross", "frame"];

/// Fractions of small, medium and large objects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyMix {
    pub small: f64,
    pub medium: f64,
    pub large: f64,
}

impl Default for DifficultyMix {
    fn default() -> Self {
        DifficultyMix { small: 1.0 / 3.0, medium: 1.0 / 3.0, large: 1.0 / 3.0 }
    }
}

impl DifficultyMix {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.small, self.medium, self.large];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("difficulty mix {parts:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }

    /// Parses `small,medium,large` fractions.
    pub fn parse(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad mix entry '{p}'"))))
            .collect::<Result<_>>()?;
        let [small, medium, large] = v[..] else {
            return Err(Error::Config(format!("mix needs three fractions, got '{s}'")));
        };
        let mix = DifficultyMix { small, medium, large };
        mix.validate()?;
        Ok(mix)
    }

    /// Exact per-sample size classes for `count` samples (largest-remainder
    /// apportionment), in a seeded random order.
    fn assign(&self, count: usize, rng: &mut Rng) -> Vec<SizeClass> {
        let fr = [self.small, self.medium, self.large];
        let mut n: Vec<usize> = fr.iter().map(|f| (f * count as f64).floor() as usize).collect();
        let mut rest: Vec<(f64, usize)> =
            fr.iter().enumerate().map(|(i, f)| (f * count as f64 - n[i] as f64, i)).collect();
        rest.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut missing = count - n.iter().sum::<usize>();
        for (_, i) in rest {
            if missing == 0 {
                break;
            }
            n[i] += 1;
            missing -= 1;
        }
        let mut out: Vec<SizeClass> =
            SizeClass::ALL.iter().zip(&n).flat_map(|(&c, &k)| std::iter::repeat_n(c, k)).collect();
        rng.shuffle(&mut out);
        out
    }
}

/// Half-extent of the object as a fraction of the image side.
fn radius_range(class: SizeClass) -> (f64, f64) {
    match class {
        SizeClass::Small => (0.10, 0.15),
        SizeClass::Medium => (0.20, 0.27),
        SizeClass::Large => (0.36, 0.46),
    }
}

/// Membership test in object coordinates (`u, v` in roughly `[-1, 1]`).
fn inside(shape: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    let r2 = u * u + v * v;
    match shape {
        0 => r2 <= 1.0,
        1 => au.max(av) <= 0.85,
        2 => (-0.9..=0.8).contains(&v) && au <= 0.5 * (0.8 - v) + 0.05,
        3 => au + av <= 1.0,
        4 => (au <= 0.3 && av <= 0.95) || (av <= 0.3 && au <= 0.95),
        5 => (0.35..=1.0).contains(&r2),
        6 => (au - av).abs() <= 0.3 && au.max(av) <= 0.9,
        _ => au.max(av) <= 0.92 && au.max(av) >= 0.58,
    }
}

fn contrasting_color(rng: &mut Rng, background: &[f64; 3]) -> [f64; 3] {
    let lum = |c: &[f64; 3]| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    loop {
        let c = [rng.uniform(), rng.uniform(), rng.uniform()];
        let spread = c.iter().copied().fold(0.0, f64::max) - c.iter().copied().fold(1.0, f64::min);
        if (lum(&c) - lum(background)).abs() >= 0.25 && spread >= 0.3 {
            return c;
        }
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Deterministic synthetic dataset of `count` RGB images of side
/// `image_size`. Labels cycle through the eight shapes, so every class count
/// is within one of the others.
pub fn gen_synthetic(count: usize, image_size: usize, seed: u64, mix: DifficultyMix, split: &str) -> Result<Dataset> {
    mix.validate()?;
    if image_size < 8 {
        return Err(Error::Config(format!("image size {image_size} too small for shapes")));
    }
    let root = Rng::new(seed);
    let classes = mix.assign(count, &mut root.fork(1));
    let s = image_size;
    let sf = s as f64;
    let mut images = Vec::with_capacity(count * 3 * s * s);
    let mut labels = Vec::with_capacity(count);
    let mut meta = Vec::with_capacity(count);
    let mut rng = root.fork(2);
    let mut plane = vec![0.0f64; 3 * s * s];
    for (i, &size_class) in classes.iter().enumerate() {
        let shape = i % SHAPES.len();
        let bg = [rng.uniform_in(0.2, 0.8), rng.uniform_in(0.2, 0.8), rng.uniform_in(0.2, 0.8)];
        let color = contrasting_color(&mut rng, &bg);
        let (lo, hi) = radius_range(size_class);
        let r = rng.uniform_in(lo, hi) * sf;
        let cx = rng.uniform_in(r, sf - r);
        let cy = rng.uniform_in(r, sf - r);
        let angle = rng.uniform_in(-0.35, 0.35);
        let (sin, cos) = angle.sin_cos();
        let (fx, fy, phase) = (rng.uniform_in(0.2, 0.9), rng.uniform_in(0.2, 0.9), rng.uniform_in(0.0, 6.3));
        let mut covered = 0usize;
        for y in 0..s {
            for x in 0..s {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = (cos * dx + sin * dy) / r;
                let v = (-sin * dx + cos * dy) / r;
                let hit = inside(shape, u, v);
                covered += hit as usize;
                let texture = 0.07 * (fx * x as f64 + fy * y as f64 + phase).sin();
                for c in 0..3 {
                    let px = if hit { color[c] + 0.03 * rng.normal() } else { bg[c] + texture + 0.05 * rng.normal() };
                    plane[(c * s + y) * s + x] = px;
                }
            }
        }
        images.extend(plane.iter().map(|&v| to_byte(v)));
        labels.push(shape as u8);
        meta.push(SampleMeta {
            index: i,
            label: shape as u8,
            shape: SHAPES[shape].to_string(),
            size_class,
            area: covered as f64 / (s * s) as f64,
        });
    }
    let mut data = Dataset::new(images, labels, 3, s, split)?;
    data.meta = Some(meta);
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = gen_synthetic(20, 32, 5, DifficultyMix::default(), "t").unwrap();
        let b = gen_synthetic(20, 32, 5, DifficultyMix::default(), "t").unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(20, 32, 6, DifficultyMix::default(), "t").unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn balanced_and_sized() {
        let d = gen_synthetic(300, 32, 1, DifficultyMix::default(), "t").unwrap();
        let mut counts = [0usize; 8];
        d.labels.iter().for_each(|&l| counts[l as usize] += 1);
        let (mn, mx) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(mx - mn <= 1, "{counts:?}");
        let meta = d.meta.unwrap();
        let mean = |c| {
            let v: Vec<f64> = meta.iter().filter(|m| m.size_class == c).map(|m| m.area).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(SizeClass::Small) < mean(SizeClass::Medium));
        assert!(mean(SizeClass::Medium) < mean(SizeClass::Large));
        assert!(meta.iter().all(|m| m.area > 0.0));
    }

    #[test]
    fn mix_parse() {
        let m = DifficultyMix::parse("0.5,0.25,0.25").unwrap();
        assert_eq!(m.small, 0.5);
        assert!(DifficultyMix::parse("0.5,0.5").is_err());
        assert!(DifficultyMix::parse("0.5,0.5,0.5").is_err());
    }
}
