//! Random occupancy-constrained crops with flip/rot90 augmentation.

use rand::Rng;

use super::PhaseConfig;
use crate::datasets::TrainingPair;
use crate::nn::Tensor;

/// One training sample as network tensors (`n = 1`).
#[derive(Clone, Debug)]
pub struct Crop {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub mask: Tensor<f32>,
}

fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let r = i.rem_euclid(period);
    (if r < len as isize { r } else { period - r }) as usize
}

/// Summed-area table of the mask, `(w+1)×(h+1)`.
fn integral(pair: &TrainingPair) -> Vec<u32> {
    let (w, h) = (pair.mask.width, pair.mask.height);
    let mut s = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0;
        for x in 0..w {
            row += pair.mask.get(x, y) as u32;
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn window_count(s: &[u32], w: usize, x0: usize, y0: usize, cw: usize, ch: usize) -> u32 {
    let at = |x: usize, y: usize| s[y * (w + 1) + x];
    at(x0 + cw, y0 + ch) + at(x0, y0) - at(x0 + cw, y0) - at(x0, y0 + ch)
}

/// Samples a `crop × crop` window holding at least `min_crop_occupancy`
/// occupied pixels (the best of 64 tries otherwise) and augments it.
/// Images smaller than the crop are reflect-extended.
pub fn sample_crop(pair: &TrainingPair, cfg: &PhaseConfig, with_mask: bool, rng: &mut impl Rng) -> Crop {
    let (w, h, c) = (pair.clean.width, pair.clean.height, cfg.crop);
    let (cw, ch) = (c.min(w), c.min(h));
    let sat = integral(pair);
    let need = (cfg.min_crop_occupancy * (cw * ch) as f64).ceil() as u32;
    let mut best: Option<(usize, usize, u32)> = None;
    for _ in 0..64 {
        let x0 = rng.random_range(0..=w - cw);
        let y0 = rng.random_range(0..=h - ch);
        let n = window_count(&sat, w, x0, y0, cw, ch);
        if best.is_none_or(|b| n > b.2) {
            best = Some((x0, y0, n));
        }
        if n >= need {
            break;
        }
    }
    let (x0, y0, _) = best.expect("at least one try");
    let (flip_h, flip_v, rot) = if cfg.augment {
        (rng.random::<bool>(), rng.random::<bool>(), rng.random_range(0..4u8))
    } else {
        (false, false, 0)
    };
    let in_c = if with_mask { 4 } else { 3 };
    let mut input = Tensor::zeros(1, in_c, c, c);
    let mut target = Tensor::zeros(1, 3, c, c);
    let mut mask = Tensor::zeros(1, 1, c, c);
    let plane = c * c;
    for i in 0..c {
        for j in 0..c {
            // output (i, j) ← crop coordinates (a, b)
            let (mut a, mut b) = (i, j);
            for _ in 0..rot {
                (a, b) = (b, c - 1 - a);
            }
            if flip_v {
                a = c - 1 - a;
            }
            if flip_h {
                b = c - 1 - b;
            }
            let sy = reflect((y0 + a) as isize, h);
            let sx = reflect((x0 + b) as isize, w);
            let k = i * c + j;
            let (n, t) = (pair.noisy.pixel(sx, sy), pair.clean.pixel(sx, sy));
            for ch in 0..3 {
                input.data[ch * plane + k] = n[ch] as f32 / 255.0;
                target.data[ch * plane + k] = t[ch] as f32 / 255.0;
            }
            let m = pair.mask.get(sx, sy) as u8 as f32;
            mask.data[k] = m;
            if with_mask {
                input.data[3 * plane + k] = m;
            }
        }
    }
    if !cfg.masked_loss {
        mask.data.fill(1.0);
    }
    Crop { input, target, mask }
}
