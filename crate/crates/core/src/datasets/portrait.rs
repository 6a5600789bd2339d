//! Synthetic person-like portraits with silhouette masks.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pointcloud::synth::{lattice, splitmix, value_noise};
use crate::raster::{Mask, Raster};

pub const MIN_COVERAGE: f64 = 0.2;
pub const MAX_COVERAGE: f64 = 0.8;

struct Figure {
    cx: f64,
    head_y: f64,
    head_rx: f64,
    head_ry: f64,
    neck_w: f64,
    shoulder_y: f64,
    shoulder_w: f64,
    hairline: f64,
}

impl Figure {
    fn sample(s: f64, r: &mut impl Rng) -> Figure {
        let head_rx = s * r.random_range(0.11..0.2);
        let head_ry = head_rx * r.random_range(1.1..1.4);
        let head_y = s * r.random_range(0.22..0.4);
        Figure {
            cx: s * r.random_range(0.35..0.65),
            head_y,
            head_rx,
            head_ry,
            neck_w: head_rx * r.random_range(0.45..0.7),
            shoulder_y: head_y + head_ry * r.random_range(1.1..1.5),
            shoulder_w: s * r.random_range(0.25..0.48),
            hairline: r.random_range(-0.5..0.0),
        }
    }

    fn in_head(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = ((x - self.cx) / self.head_rx, (y - self.head_y) / self.head_ry);
        dx * dx + dy * dy <= 1.0
    }

    fn in_neck(&self, x: f64, y: f64) -> bool {
        y >= self.head_y && y <= self.shoulder_y + 2.0 && (x - self.cx).abs() <= self.neck_w
    }

    /// Shoulders widen smoothly from the neck to full width.
    fn in_torso(&self, x: f64, y: f64) -> bool {
        if y < self.shoulder_y {
            return false;
        }
        let t = ((y - self.shoulder_y) / (self.head_ry * 1.2)).min(1.0);
        let half = self.neck_w + (self.shoulder_w - self.neck_w) * t.sqrt();
        (x - self.cx).abs() <= half
    }

    fn in_hair(&self, x: f64, y: f64, wobble: f64) -> bool {
        self.in_head(x, y) && (y - self.head_y) / self.head_ry < self.hairline + wobble
    }
}

fn mask_of(fig: &Figure, w: usize, h: usize) -> Mask {
    let mut m = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            m.set(x, y, fig.in_head(fx, fy) || fig.in_neck(fx, fy) || fig.in_torso(fx, fy));
        }
    }
    m
}

/// One portrait image and its person mask; coverage lies in
/// `[MIN_COVERAGE, MAX_COVERAGE]`.
pub fn synth_portrait(size: usize, seed: u64) -> (Raster, Mask) {
    let mut r = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x0050_4F52_5452_4149));
    let s = size as f64;
    let (fig, mask) = loop {
        let fig = Figure::sample(s, &mut r);
        let mask = mask_of(&fig, size, size);
        if (MIN_COVERAGE..=MAX_COVERAGE).contains(&mask.coverage()) {
            break (fig, mask);
        }
    };
    let nseed = r.random::<u64>();
    let skin = [r.random_range(150.0..235.0), r.random_range(105.0..180.0), r.random_range(80.0..150.0)];
    let hair = [r.random_range(15.0..110.0), r.random_range(10.0..80.0), r.random_range(5.0..60.0)];
    let cloth: [f64; 3] = [r.random_range(20.0..235.0), r.random_range(20.0..235.0), r.random_range(20.0..235.0)];
    let accent: [f64; 3] = [r.random_range(20.0..235.0), r.random_range(20.0..235.0), r.random_range(20.0..235.0)];
    let stripe_period = r.random_range(4.0..14.0);
    let stripe_angle = r.random_range(0.0..TAU / 2.0);
    let stripe_mix = r.random_range(0.2..0.9);
    let light = r.random_range(-0.6..0.6);
    let (sa, ca) = stripe_angle.sin_cos();

    let mut img = Raster::new(size, size, 3);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let p = [fx, fy, 0.0];
            let shade = 1.0 + 0.18 * value_noise(nseed, p, s / 4.0, 0) + 0.12 * light * (fx - fig.cx) / s;
            let grain = |c: u64| 4.0 * lattice(nseed ^ 0x9A, x as i64, y as i64, 0, c);
            let wobble = 0.15 * value_noise(nseed, p, s / 12.0, 1);
            let base: [f64; 3] = if fig.in_hair(fx, fy, wobble) {
                hair
            } else if fig.in_head(fx, fy) || (fig.in_neck(fx, fy) && !fig.in_torso(fx, fy)) {
                skin
            } else if mask.get(x, y) {
                let t = (TAU * (fx * ca + fy * sa) / stripe_period).sin();
                let k = stripe_mix * (0.5 + 0.5 * t.signum() * t.abs().sqrt());
                let fold = 0.1 * value_noise(nseed, p, s / 8.0, 2);
                [0, 1, 2].map(|c| (cloth[c] * (1.0 - k) + accent[c] * k) * (1.0 + fold))
            } else {
                // background, removed by the mask before padding
                [0, 1, 2].map(|c| 128.0 + 90.0 * value_noise(nseed ^ 0xB6, p, s / 6.0, c as u64))
            };
            let px = img.pixel_mut(x, y);
            for c in 0..3 {
                px[c] = (base[c] * shade + grain(c as u64)).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    (img, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coverage_in_range_and_deterministic() {
        for seed in 0..40 {
            let (img, mask) = synth_portrait(64, seed);
            let c = mask.coverage();
            assert!((MIN_COVERAGE..=MAX_COVERAGE).contains(&c), "seed {seed}: {c}");
            assert_eq!(synth_portrait(64, seed), (img, mask));
        }
        assert_ne!(synth_portrait(64, 1).0, synth_portrait(64, 2).0);
    }
}
