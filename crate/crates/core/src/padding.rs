//! Background filling for unoccupied pixels: push-pull mip-map interpolation
//! followed by a harmonic (5-point Laplacian) refinement with the occupied
//! pixels as Dirichlet data.

use crate::error::{Error, Result};
use crate::raster::{Mask, Raster};

/// An image together with the mask of pixels whose values are ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedImage {
    pub pixels: Raster,
    pub mask: Mask,
}

impl MaskedImage {
    pub fn new(pixels: Raster, mask: Mask) -> Result<Self> {
        if !mask.matches(&pixels) {
            return Err(Error::contract(
                "padding",
                format!(
                    "mask {}x{} does not match image {}x{}",
                    mask.width, mask.height, pixels.width, pixels.height
                ),
            ));
        }
        if pixels.channels != 1 && pixels.channels != 3 {
            return Err(Error::contract("padding", "images must have 1 or 3 channels"));
        }
        Ok(MaskedImage { pixels, mask })
    }
}

struct Level {
    w: usize,
    h: usize,
    vals: Vec<f64>,
    valid: Vec<bool>,
}

fn downsample(l: &Level, ch: usize) -> Level {
    let (w, h) = (l.w.div_ceil(2), l.h.div_ceil(2));
    let mut vals = vec![0.0; w * h * ch];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut n = 0.0;
            let mut acc = [0.0f64; 3];
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let (sx, sy) = (2 * x + dx, 2 * y + dy);
                if sx >= l.w || sy >= l.h || !l.valid[sy * l.w + sx] {
                    continue;
                }
                n += 1.0;
                let s = (sy * l.w + sx) * ch;
                for c in 0..ch {
                    acc[c] += l.vals[s + c];
                }
            }
            if n > 0.0 {
                let k = y * w + x;
                valid[k] = true;
                for c in 0..ch {
                    vals[k * ch + c] = acc[c] / n;
                }
            }
        }
    }
    Level { w, h, vals, valid }
}

/// Fills invalid cells of `fine` by bilinear upsampling of the complete `coarse` level.
fn pull(fine: &mut Level, coarse: &Level, ch: usize) {
    let sample = |p: f64, n: usize| {
        let p = p.clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        (i0, (i0 + 1).min(n - 1), p - i0 as f64)
    };
    for y in 0..fine.h {
        let (y0, y1, fy) = sample((y as f64 + 0.5) / 2.0 - 0.5, coarse.h);
        for x in 0..fine.w {
            let k = y * fine.w + x;
            if fine.valid[k] {
                continue;
            }
            let (x0, x1, fx) = sample((x as f64 + 0.5) / 2.0 - 0.5, coarse.w);
            for c in 0..ch {
                let at = |xx: usize, yy: usize| coarse.vals[(yy * coarse.w + xx) * ch + c];
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                fine.vals[k * ch + c] = top * (1.0 - fy) + bot * fy;
            }
            fine.valid[k] = true;
        }
    }
}

fn check_nonempty(img: &MaskedImage) -> Result<()> {
    if img.mask.is_empty() {
        return Err(Error::contract("padding", "mask has no occupied pixel"));
    }
    Ok(())
}

/// Push-pull fill. Occupied pixels are returned unchanged.
pub fn pushpull_fill(img: &MaskedImage) -> Result<Raster> {
    check_nonempty(img)?;
    let ch = img.pixels.channels;
    let mut levels = vec![Level {
        w: img.pixels.width,
        h: img.pixels.height,
        vals: img.pixels.data.iter().map(|&v| v as f64).collect(),
        valid: img.mask.data.clone(),
    }];
    while {
        let top = levels.last().unwrap();
        top.w > 1 || top.h > 1
    } {
        let next = downsample(levels.last().unwrap(), ch);
        levels.push(next);
    }
    for l in (0..levels.len() - 1).rev() {
        let (lo, hi) = levels.split_at_mut(l + 1);
        pull(&mut lo[l], &hi[0], ch);
    }
    let base = &levels[0];
    let mut out = img.pixels.clone();
    for (k, &occ) in img.mask.data.iter().enumerate() {
        if !occ {
            for c in 0..ch {
                out.data[k * ch + c] = base.vals[k * ch + c].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RefineOptions {
    /// Target relative residual `||b - Ax|| / ||b||`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            tol: 1e-5,
            max_iter: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refined {
    pub image: Raster,
    /// False when some channel stopped at `max_iter` above `tol`.
    pub converged: bool,
    pub iterations: Vec<usize>,
    /// Relative residual after every iteration, per channel (index 0 = initial).
    pub residual_history: Vec<Vec<f64>>,
}

/// Sparse Laplacian over the empty pixels; occupied neighbours become data.
struct Laplace {
    /// Unknown index per pixel, `usize::MAX` for occupied pixels.
    slot: Vec<usize>,
    pixels: Vec<usize>,
    diag: Vec<f64>,
    /// Unknown neighbours per unknown (up to 4).
    nbrs: Vec<[usize; 4]>,
    nbr_len: Vec<u8>,
}

impl Laplace {
    fn new(mask: &Mask) -> Self {
        let (w, h) = (mask.width, mask.height);
        let mut slot = vec![usize::MAX; w * h];
        let mut pixels = Vec::new();
        for (k, &occ) in mask.data.iter().enumerate() {
            if !occ {
                slot[k] = pixels.len();
                pixels.push(k);
            }
        }
        let mut diag = Vec::with_capacity(pixels.len());
        let mut nbrs = Vec::with_capacity(pixels.len());
        let mut nbr_len = Vec::with_capacity(pixels.len());
        for &k in &pixels {
            let (x, y) = (k % w, k / w);
            let mut deg = 0.0;
            let mut list = [0usize; 4];
            let mut n = 0;
            for q in neighbours(x, y, w, h) {
                deg += 1.0;
                if slot[q] != usize::MAX {
                    list[n] = slot[q];
                    n += 1;
                }
            }
            diag.push(deg);
            nbrs.push(list);
            nbr_len.push(n as u8);
        }
        Laplace {
            slot,
            pixels,
            diag,
            nbrs,
            nbr_len,
        }
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..x.len() {
            let mut acc = self.diag[i] * x[i];
            for &j in &self.nbrs[i][..self.nbr_len[i] as usize] {
                acc -= x[j];
            }
            y[i] = acc;
        }
    }
}

fn neighbours(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let mut out = [usize::MAX; 4];
    if x > 0 {
        out[0] = y * w + x - 1;
    }
    if x + 1 < w {
        out[1] = y * w + x + 1;
    }
    if y > 0 {
        out[2] = (y - 1) * w + x;
    }
    if y + 1 < h {
        out[3] = (y + 1) * w + x;
    }
    out.into_iter().filter(|&q| q != usize::MAX)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate residual iteration: the residual 2-norm is non-increasing.
fn solve(op: &Laplace, b: &[f64], x: &mut [f64], opts: &RefineOptions) -> (usize, bool, Vec<f64>) {
    let n = b.len();
    let mut ax = vec![0.0; n];
    op.apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let bnorm = dot(b, b).sqrt();
    let scale = if bnorm > 0.0 { bnorm } else { 1.0 };
    let mut history = vec![dot(&r, &r).sqrt() / scale];
    if history[0] <= opts.tol {
        return (0, true, history);
    }
    let mut p = r.clone();
    let mut ar = vec![0.0; n];
    op.apply(&r, &mut ar);
    let mut ap = ar.clone();
    let mut rar = dot(&r, &ar);
    for it in 1..=opts.max_iter {
        let apap = dot(&ap, &ap);
        if apap == 0.0 || rar == 0.0 {
            return (it - 1, true, history);
        }
        let alpha = rar / apap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rel = dot(&r, &r).sqrt() / scale;
        history.push(rel);
        if rel <= opts.tol {
            return (it, true, history);
        }
        op.apply(&r, &mut ar);
        let rar_new = dot(&r, &ar);
        let beta = rar_new / rar;
        rar = rar_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
            ap[i] = ar[i] + beta * ap[i];
        }
    }
    (opts.max_iter, false, history)
}

/// Harmonic refinement of `filled` over the empty pixels of `img`, solved
/// per channel in floating point and quantized once at the end.
pub fn harmonic_refine(img: &MaskedImage, filled: &Raster, opts: &RefineOptions) -> Result<Refined> {
    check_nonempty(img)?;
    if !filled.same_dims(&img.pixels) {
        return Err(Error::contract("padding", "filled image does not match masked image"));
    }
    let ch = img.pixels.channels;
    let (w, h) = (img.pixels.width, img.pixels.height);
    let op = Laplace::new(&img.mask);
    let mut out = img.pixels.clone();
    let mut converged = true;
    let mut iterations = Vec::with_capacity(ch);
    let mut residual_history = Vec::with_capacity(ch);
    for c in 0..ch {
        let n = op.pixels.len();
        let mut b = vec![0.0; n];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (k, &occ) in img.mask.data.iter().enumerate() {
            if occ {
                let v = img.pixels.data[k * ch + c] as f64;
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        for (i, &k) in op.pixels.iter().enumerate() {
            for q in neighbours(k % w, k / w, w, h) {
                if op.slot[q] == usize::MAX {
                    b[i] += img.pixels.data[q * ch + c] as f64;
                }
            }
        }
        let mut x: Vec<f64> = op.pixels.iter().map(|&k| filled.data[k * ch + c] as f64).collect();
        let (its, ok, hist) = solve(&op, &b, &mut x, opts);
        converged &= ok;
        iterations.push(its);
        residual_history.push(hist);
        for (i, &k) in op.pixels.iter().enumerate() {
            out.data[k * ch + c] = x[i].clamp(lo, hi).round() as u8;
        }
    }
    if !converged {
        log::warn!(
            "harmonic refinement stopped at max_iter={} above tol={:e}",
            opts.max_iter,
            opts.tol
        );
    }
    Ok(Refined {
        image: out,
        converged,
        iterations,
        residual_history,
    })
}

/// Push-pull then harmonic refinement (`refine = false` skips the solve).
pub fn pad(img: &MaskedImage, refine: bool, opts: &RefineOptions) -> Result<Raster> {
    let filled = pushpull_fill(img)?;
    if !refine {
        return Ok(filled);
    }
    Ok(harmonic_refine(img, &filled, opts)?.image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn masked(w: usize, h: usize, ch: usize, data: Vec<u8>, mask: Vec<bool>) -> MaskedImage {
        MaskedImage::new(
            Raster::from_vec(w, h, ch, data).unwrap(),
            Mask {
                width: w,
                height: h,
                data: mask,
            },
        )
        .unwrap()
    }

    #[test]
    fn single_source_propagates_everywhere() {
        let mut mask = vec![false; 7 * 5];
        mask[12] = true;
        let mut data = vec![0u8; 7 * 5 * 3];
        data[36..39].copy_from_slice(&[9, 150, 77]);
        let img = masked(7, 5, 3, data, mask);
        let out = pushpull_fill(&img).unwrap();
        assert!(out.data.chunks(3).all(|p| p == [9, 150, 77]));
        let refined = harmonic_refine(&img, &out, &RefineOptions::default()).unwrap();
        assert!(refined.image.data.chunks(3).all(|p| p == [9, 150, 77]));
    }

    #[test]
    fn full_mask_is_noop() {
        let data: Vec<u8> = (0..48).map(|i| (i * 5) as u8).collect();
        let img = masked(4, 4, 3, data.clone(), vec![true; 16]);
        let filled = pushpull_fill(&img).unwrap();
        assert_eq!(filled.data, data);
        let r = harmonic_refine(&img, &filled, &RefineOptions::default()).unwrap();
        assert_eq!(r.image.data, data);
        assert!(r.converged);
    }

    #[test]
    fn left_half_value_fills_right_half() {
        let mut data = vec![0u8; 16];
        let mut mask = vec![false; 16];
        for y in 0..4 {
            for x in 0..2 {
                data[y * 4 + x] = 10;
                mask[y * 4 + x] = true;
            }
        }
        let out = pushpull_fill(&masked(4, 4, 1, data, mask)).unwrap();
        assert!(out.data.iter().all(|&v| v == 10));
    }

    #[test]
    fn one_dimensional_strip_is_linear() {
        let img = masked(5, 1, 1, vec![0, 0, 0, 0, 100], vec![true, false, false, false, true]);
        let filled = pushpull_fill(&img).unwrap();
        let r = harmonic_refine(&img, &filled, &RefineOptions::default()).unwrap();
        assert!(r.converged);
        for (got, want) in r.image.data[1..4].iter().zip([25i32, 50, 75]) {
            assert!((*got as i32 - want).abs() <= 1, "{got} vs {want}");
        }
    }

    #[test]
    fn constant_boundary_gives_constant_interior() {
        let (w, h) = (9, 7);
        let mut mask = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                    mask[y * w + x] = true;
                }
            }
        }
        let data: Vec<u8> = mask.iter().map(|&m| if m { 200 } else { 3 }).collect();
        let img = masked(w, h, 1, data, mask);
        let r = harmonic_refine(&img, &img.pixels.clone(), &RefineOptions::default()).unwrap();
        assert!(r.image.data.iter().all(|&v| v == 200));
    }

    #[test]
    fn empty_mask_rejected() {
        let img = masked(2, 2, 1, vec![0; 4], vec![false; 4]);
        assert!(pushpull_fill(&img).is_err());
        assert!(harmonic_refine(&img, &img.pixels.clone(), &RefineOptions::default()).is_err());
    }

    #[test]
    fn max_iter_exhaustion_flags_warning() {
        let (w, h) = (40, 40);
        let mut mask = vec![false; w * h];
        mask[0] = true;
        mask[w * h - 1] = true;
        let mut data = vec![0u8; w * h];
        data[w * h - 1] = 255;
        let img = masked(w, h, 1, data, mask);
        let opts = RefineOptions {
            tol: 1e-12,
            max_iter: 3,
        };
        let r = harmonic_refine(&img, &img.pixels.clone(), &opts).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, vec![3]);
    }

    fn arb_masked() -> impl Strategy<Value = MaskedImage> {
        (1usize..24, 1usize..24, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(w, h, ch)| {
            (
                proptest::collection::vec(any::<u8>(), w * h * ch),
                proptest::collection::vec(any::<bool>(), w * h),
                0..w * h,
            )
                .prop_map(move |(data, mut mask, forced)| {
                    mask[forced] = true;
                    masked(w, h, ch, data, mask)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn occupied_pixels_preserved(img in arb_masked()) {
            let filled = pushpull_fill(&img).unwrap();
            let refined = harmonic_refine(&img, &filled, &RefineOptions::default()).unwrap();
            let ch = img.pixels.channels;
            for (k, &occ) in img.mask.data.iter().enumerate() {
                if occ {
                    prop_assert_eq!(&filled.data[k * ch..(k + 1) * ch], &img.pixels.data[k * ch..(k + 1) * ch]);
                    prop_assert_eq!(&refined.image.data[k * ch..(k + 1) * ch], &img.pixels.data[k * ch..(k + 1) * ch]);
                }
            }
        }

        #[test]
        fn residual_never_grows(img in arb_masked()) {
            let filled = pushpull_fill(&img).unwrap();
            let r = harmonic_refine(&img, &filled, &RefineOptions { tol: 1e-10, max_iter: 400 }).unwrap();
            for hist in &r.residual_history {
                for w in hist.windows(2) {
                    prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-12);
                }
                for pair in hist.iter().step_by(50).collect::<Vec<_>>().windows(2) {
                    prop_assert!(pair[1] <= pair[0]);
                }
            }
        }

        #[test]
        fn converged_solution_obeys_max_principle(img in arb_masked()) {
            let filled = pushpull_fill(&img).unwrap();
            let ch = img.pixels.channels;
            let op = Laplace::new(&img.mask);
            // unclamped solve, checked against occupied extrema
            for c in 0..ch {
                let occ: Vec<f64> = img.mask.data.iter().enumerate()
                    .filter(|(_, &m)| m).map(|(k, _)| img.pixels.data[k * ch + c] as f64).collect();
                let lo = occ.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = occ.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let (w, h) = (img.pixels.width, img.pixels.height);
                let mut b = vec![0.0; op.pixels.len()];
                for (i, &k) in op.pixels.iter().enumerate() {
                    for q in neighbours(k % w, k / w, w, h) {
                        if op.slot[q] == usize::MAX {
                            b[i] += img.pixels.data[q * ch + c] as f64;
                        }
                    }
                }
                let mut x: Vec<f64> = op.pixels.iter().map(|&k| filled.data[k * ch + c] as f64).collect();
                let (_, ok, _) = solve(&op, &b, &mut x, &RefineOptions { tol: 1e-12, max_iter: 5000 });
                prop_assert!(ok);
                for v in x {
                    prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
                }
            }
        }
    }
}
