//! Layers with explicit forward caches and backward passes.

use rand::Rng;

use super::{gemm, Grads, Mat, ParamId, Params, Real, Tensor};

/// What a layer keeps from its forward pass.
pub struct Saved<T> {
    input: Tensor<T>,
}

/// He gain for layers feeding a ReLU.
pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Fan-in scaled standard deviation `gain / sqrt(fan_in)`.
fn fan_in_std(fan_in: usize, gain: f64) -> f64 {
    gain / (fan_in as f64).sqrt()
}

fn add_bias<T: Real>(y: &mut [T], bias: &[T], hw: usize) {
    for (row, &b) in y.chunks_exact_mut(hw).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

fn acc_bias_grad<T: Real>(gy: &[T], gb: &mut [T], hw: usize) {
    for (row, g) in gy.chunks_exact(hw).zip(gb.iter_mut()) {
        *g += row.iter().copied().sum();
    }
}

// ---------------------------------------------------------------------------

/// k×k convolution, stride 1, zero "same" padding, k odd.
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - p, kx as isize - p);
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, gx: &mut [T]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut gx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - p, kx as isize - p);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        p: &mut Params<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(k % 2 == 1, "convolution kernel must be odd");
        let std = fan_in_std(cin * k * k, gain);
        let weight = p.add_normal(format!("{name}.weight"), vec![cout, cin, k, k], std, rng);
        let bias = bias.then(|| p.add_zeros(format!("{name}.bias"), vec![cout]));
        Conv2d {
            weight,
            bias,
            cin,
            cout,
            k,
        }
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Tensor<T>) -> (Tensor<T>, Saved<T>) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let hw = x.hw();
        let kk = self.cin * self.k * self.k;
        let mut y = Tensor::zeros(x.n, self.cout, x.h, x.w);
        let mut cols = vec![T::zero(); kk * hw];
        let w = p.get(self.weight);
        for i in 0..x.n {
            im2col(x.sample(i), self.cin, x.h, x.w, self.k, &mut cols);
            let yi = y.sample_mut(i);
            gemm(Mat::new(w, self.cout, kk), Mat::new(&cols, kk, hw), T::zero(), yi);
            if let Some(b) = self.bias {
                add_bias(yi, p.get(b), hw);
            }
        }
        (y, Saved { input: x.clone() })
    }

    pub fn backward<T: Real>(&self, p: &Params<T>, s: &Saved<T>, gy: &Tensor<T>, g: &mut Grads<T>) -> Tensor<T> {
        let x = &s.input;
        let hw = x.hw();
        let kk = self.cin * self.k * self.k;
        let mut gx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut cols = vec![T::zero(); kk * hw];
        let mut gcols = vec![T::zero(); kk * hw];
        let w = p.get(self.weight);
        for i in 0..x.n {
            im2col(x.sample(i), self.cin, x.h, x.w, self.k, &mut cols);
            let gyi = gy.sample(i);
            gemm(Mat::new(gyi, self.cout, hw), Mat::new(&cols, kk, hw).t(), T::one(), g.get_mut(self.weight));
            if let Some(b) = self.bias {
                acc_bias_grad(gyi, g.get_mut(b), hw);
            }
            gemm(Mat::new(w, self.cout, kk).t(), Mat::new(gyi, self.cout, hw), T::zero(), &mut gcols);
            col2im(&gcols, self.cin, x.h, x.w, self.k, gx.sample_mut(i));
        }
        gx
    }
}

// ---------------------------------------------------------------------------

/// Per-channel k×k spatial filter (the depthwise half of a DSC).
pub struct Depthwise {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c: usize,
    pub k: usize,
}

/// Calls `f(dy, dx, y-range, x-range, kernel index)` for every kernel tap with
/// the output rows/columns whose shifted source stays inside the image.
fn for_taps(h: usize, w: usize, k: usize, mut f: impl FnMut(isize, isize, (usize, usize), (usize, usize), usize)) {
    let p = (k / 2) as isize;
    for ky in 0..k {
        for kx in 0..k {
            let (dy, dx) = (ky as isize - p, kx as isize - p);
            let y0 = (-dy).max(0) as usize;
            let y1 = (h as isize - dy.max(0)).max(0) as usize;
            let x0 = (-dx).max(0) as usize;
            let x1 = (w as isize - dx.max(0)).max(0) as usize;
            if y0 < y1 && x0 < x1 {
                f(dy, dx, (y0, y1), (x0, x1), ky * k + kx);
            }
        }
    }
}

impl Depthwise {
    pub fn new<T: Real>(p: &mut Params<T>, name: &str, c: usize, k: usize, bias: bool, rng: &mut impl Rng) -> Self {
        assert!(k % 2 == 1, "depthwise kernel must be odd");
        let weight = p.add_normal(format!("{name}.weight"), vec![c, 1, k, k], fan_in_std(k * k, 1.0), rng);
        let bias = bias.then(|| p.add_zeros(format!("{name}.bias"), vec![c]));
        Depthwise { weight, bias, c, k }
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Tensor<T>) -> (Tensor<T>, Saved<T>) {
        assert_eq!(x.c, self.c, "depthwise channels");
        let (h, w, hw, kk) = (x.h, x.w, x.hw(), self.k * self.k);
        let wt = p.get(self.weight);
        let bias = self.bias.map(|b| p.get(b));
        let mut y = Tensor::zeros(x.n, x.c, h, w);
        for i in 0..x.n {
            let (xi, yi) = (x.sample(i), y.sample_mut(i));
            for c in 0..self.c {
                let src = &xi[c * hw..(c + 1) * hw];
                let dst = &mut yi[c * hw..(c + 1) * hw];
                if let Some(b) = bias {
                    dst.iter_mut().for_each(|v| *v = b[c]);
                }
                let kern = &wt[c * kk..(c + 1) * kk];
                for_taps(h, w, self.k, |dy, dx, (y0, y1), (x0, x1), t| {
                    let kv = kern[t];
                    for yy in y0..y1 {
                        let sy = (yy as isize + dy) as usize;
                        let s = &src[sy * w..(sy + 1) * w];
                        let d = &mut dst[yy * w..(yy + 1) * w];
                        for xx in x0..x1 {
                            d[xx] += kv * s[(xx as isize + dx) as usize];
                        }
                    }
                });
            }
        }
        (y, Saved { input: x.clone() })
    }

    pub fn backward<T: Real>(&self, p: &Params<T>, s: &Saved<T>, gy: &Tensor<T>, g: &mut Grads<T>) -> Tensor<T> {
        let x = &s.input;
        let (h, w, hw, kk) = (x.h, x.w, x.hw(), self.k * self.k);
        let wt = p.get(self.weight);
        let mut gx = Tensor::zeros(x.n, x.c, h, w);
        let mut gk = vec![T::zero(); self.c * kk];
        let mut gb = vec![T::zero(); self.c];
        for i in 0..x.n {
            let (xi, gyi) = (x.sample(i), gy.sample(i));
            let gxi = gx.sample_mut(i);
            for c in 0..self.c {
                let src = &xi[c * hw..(c + 1) * hw];
                let go = &gyi[c * hw..(c + 1) * hw];
                let gsrc = &mut gxi[c * hw..(c + 1) * hw];
                gb[c] += go.iter().copied().sum();
                let kern = &wt[c * kk..(c + 1) * kk];
                let gkern = &mut gk[c * kk..(c + 1) * kk];
                for_taps(h, w, self.k, |dy, dx, (y0, y1), (x0, x1), t| {
                    let kv = kern[t];
                    let mut acc = T::zero();
                    for yy in y0..y1 {
                        let sy = (yy as isize + dy) as usize;
                        let grow = &go[yy * w..(yy + 1) * w];
                        for xx in x0..x1 {
                            let sx = (xx as isize + dx) as usize;
                            acc += grow[xx] * src[sy * w + sx];
                            gsrc[sy * w + sx] += kv * grow[xx];
                        }
                    }
                    gkern[t] += acc;
                });
            }
        }
        for (a, b) in g.get_mut(self.weight).iter_mut().zip(&gk) {
            *a += *b;
        }
        if let Some(b) = self.bias {
            for (a, v) in g.get_mut(b).iter_mut().zip(&gb) {
                *a += *v;
            }
        }
        gx
    }
}

// ---------------------------------------------------------------------------

/// 1×1 channel mixing (the pointwise half of a DSC).
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Pointwise {
    pub fn new<T: Real>(p: &mut Params<T>, name: &str, cin: usize, cout: usize, bias: bool, gain: f64, rng: &mut impl Rng) -> Self {
        let weight = p.add_normal(format!("{name}.weight"), vec![cout, cin, 1, 1], fan_in_std(cin, gain), rng);
        let bias = bias.then(|| p.add_zeros(format!("{name}.bias"), vec![cout]));
        Pointwise { weight, bias, cin, cout }
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Tensor<T>) -> (Tensor<T>, Saved<T>) {
        assert_eq!(x.c, self.cin, "pointwise input channels");
        let hw = x.hw();
        let mut y = Tensor::zeros(x.n, self.cout, x.h, x.w);
        let w = p.get(self.weight);
        for i in 0..x.n {
            let yi = y.sample_mut(i);
            gemm(Mat::new(w, self.cout, self.cin), Mat::new(x.sample(i), self.cin, hw), T::zero(), yi);
            if let Some(b) = self.bias {
                add_bias(yi, p.get(b), hw);
            }
        }
        (y, Saved { input: x.clone() })
    }

    pub fn backward<T: Real>(&self, p: &Params<T>, s: &Saved<T>, gy: &Tensor<T>, g: &mut Grads<T>) -> Tensor<T> {
        let x = &s.input;
        let hw = x.hw();
        let w = p.get(self.weight);
        let mut gx = Tensor::zeros(x.n, x.c, x.h, x.w);
        for i in 0..x.n {
            let gyi = gy.sample(i);
            gemm(Mat::new(gyi, self.cout, hw), Mat::new(x.sample(i), self.cin, hw).t(), T::one(), g.get_mut(self.weight));
            if let Some(b) = self.bias {
                acc_bias_grad(gyi, g.get_mut(b), hw);
            }
            gemm(Mat::new(w, self.cout, self.cin).t(), Mat::new(gyi, self.cout, hw), T::zero(), gx.sample_mut(i));
        }
        gx
    }
}

// ---------------------------------------------------------------------------

/// Rearranges `[c, h, w]` into `[c·4, h/2·w/2]`, row `ci·4 + dy·2 + dx`.
fn space_to_depth<T: Real>(x: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    let (h2, w2) = (h / 2, w / 2);
    let hw2 = h2 * w2;
    for ci in 0..c {
        for dy in 0..2 {
            for dx in 0..2 {
                let row = &mut out[(ci * 4 + dy * 2 + dx) * hw2..][..hw2];
                for y in 0..h2 {
                    let src = &x[ci * h * w + (2 * y + dy) * w..];
                    for xx in 0..w2 {
                        row[y * w2 + xx] = src[2 * xx + dx];
                    }
                }
            }
        }
    }
}

fn depth_to_space<T: Real>(z: &[T], c: usize, h: usize, w: usize, out: &mut [T], accumulate: bool) {
    let (h2, w2) = (h / 2, w / 2);
    let hw2 = h2 * w2;
    for ci in 0..c {
        for dy in 0..2 {
            for dx in 0..2 {
                let row = &z[(ci * 4 + dy * 2 + dx) * hw2..][..hw2];
                for y in 0..h2 {
                    let dst = &mut out[ci * h * w + (2 * y + dy) * w..];
                    for xx in 0..w2 {
                        if accumulate {
                            dst[2 * xx + dx] += row[y * w2 + xx];
                        } else {
                            dst[2 * xx + dx] = row[y * w2 + xx];
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 convolution with stride 2 (downsampling).
pub struct Down2 {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Down2 {
    pub fn new<T: Real>(p: &mut Params<T>, name: &str, cin: usize, cout: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = p.add_normal(format!("{name}.weight"), vec![cout, cin, 2, 2], fan_in_std(cin * 4, 1.0), rng);
        let bias = bias.then(|| p.add_zeros(format!("{name}.bias"), vec![cout]));
        Down2 { weight, bias, cin, cout }
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Tensor<T>) -> (Tensor<T>, Saved<T>) {
        assert_eq!(x.c, self.cin, "down input channels");
        assert!(x.h.is_multiple_of(2) && x.w.is_multiple_of(2), "down needs even spatial size");
        let (h2, w2) = (x.h / 2, x.w / 2);
        let hw2 = h2 * w2;
        let k = self.cin * 4;
        let mut s2d = vec![T::zero(); k * hw2];
        let mut y = Tensor::zeros(x.n, self.cout, h2, w2);
        let w = p.get(self.weight);
        for i in 0..x.n {
            space_to_depth(x.sample(i), x.c, x.h, x.w, &mut s2d);
            let yi = y.sample_mut(i);
            gemm(Mat::new(w, self.cout, k), Mat::new(&s2d, k, hw2), T::zero(), yi);
            if let Some(b) = self.bias {
                add_bias(yi, p.get(b), hw2);
            }
        }
        (y, Saved { input: x.clone() })
    }

    pub fn backward<T: Real>(&self, p: &Params<T>, s: &Saved<T>, gy: &Tensor<T>, g: &mut Grads<T>) -> Tensor<T> {
        let x = &s.input;
        let hw2 = (x.h / 2) * (x.w / 2);
        let k = self.cin * 4;
        let w = p.get(self.weight);
        let mut s2d = vec![T::zero(); k * hw2];
        let mut gs = vec![T::zero(); k * hw2];
        let mut gx = Tensor::zeros(x.n, x.c, x.h, x.w);
        for i in 0..x.n {
            space_to_depth(x.sample(i), x.c, x.h, x.w, &mut s2d);
            let gyi = gy.sample(i);
            gemm(Mat::new(gyi, self.cout, hw2), Mat::new(&s2d, k, hw2).t(), T::one(), g.get_mut(self.weight));
            if let Some(b) = self.bias {
                acc_bias_grad(gyi, g.get_mut(b), hw2);
            }
            gemm(Mat::new(w, self.cout, k).t(), Mat::new(gyi, self.cout, hw2), T::zero(), &mut gs);
            depth_to_space(&gs, x.c, x.h, x.w, gx.sample_mut(i), false);
        }
        gx
    }
}

/// 2×2 transposed convolution with stride 2 (upsampling); weight `[cin, cout, 2, 2]`.
pub struct Up2 {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Up2 {
    pub fn new<T: Real>(p: &mut Params<T>, name: &str, cin: usize, cout: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = p.add_normal(format!("{name}.weight"), vec![cin, cout, 2, 2], fan_in_std(cin, 1.0), rng);
        let bias = bias.then(|| p.add_zeros(format!("{name}.bias"), vec![cout]));
        Up2 { weight, bias, cin, cout }
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Tensor<T>) -> (Tensor<T>, Saved<T>) {
        assert_eq!(x.c, self.cin, "up input channels");
        let hw = x.hw();
        let k = self.cout * 4;
        let (h, w) = (x.h * 2, x.w * 2);
        let mut z = vec![T::zero(); k * hw];
        let mut y = Tensor::zeros(x.n, self.cout, h, w);
        let wt = p.get(self.weight);
        for i in 0..x.n {
            gemm(Mat::new(wt, self.cin, k).t(), Mat::new(x.sample(i), self.cin, hw), T::zero(), &mut z);
            let yi = y.sample_mut(i);
            depth_to_space(&z, self.cout, h, w, yi, false);
            if let Some(b) = self.bias {
                add_bias(yi, p.get(b), h * w);
            }
        }
        (y, Saved { input: x.clone() })
    }

    pub fn backward<T: Real>(&self, p: &Params<T>, s: &Saved<T>, gy: &Tensor<T>, g: &mut Grads<T>) -> Tensor<T> {
        let x = &s.input;
        let hw = x.hw();
        let k = self.cout * 4;
        let (h, w) = (x.h * 2, x.w * 2);
        let wt = p.get(self.weight);
        let mut gz = vec![T::zero(); k * hw];
        let mut gx = Tensor::zeros(x.n, x.c, x.h, x.w);
        for i in 0..x.n {
            let gyi = gy.sample(i);
            if let Some(b) = self.bias {
                acc_bias_grad(gyi, g.get_mut(b), h * w);
            }
            space_to_depth(gyi, self.cout, h, w, &mut gz);
            gemm(Mat::new(x.sample(i), self.cin, hw), Mat::new(&gz, k, hw).t(), T::one(), g.get_mut(self.weight));
            gemm(Mat::new(wt, self.cin, k), Mat::new(&gz, k, hw), T::zero(), gx.sample_mut(i));
        }
        gx
    }
}

// ---------------------------------------------------------------------------

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through ReLU given its output.
pub fn relu_backward<T: Real>(out: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let mut g = gy.clone();
    for (gv, &o) in g.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

// ---------------------------------------------------------------------------

/// Depthwise k×k followed by pointwise mixing.
pub struct Dsc {
    pub depthwise: Depthwise,
    pub pointwise: Pointwise,
}

pub struct DscSaved<T> {
    dw: Saved<T>,
    pw: Saved<T>,
}

impl Dsc {
    /// `gain` scales the pointwise initialization (use [`RELU_GAIN`] before a ReLU).
    pub fn new<T: Real>(p: &mut Params<T>, name: &str, cin: usize, cout: usize, k: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Dsc {
            depthwise: Depthwise::new(p, &format!("{name}.depthwise"), cin, k, true, rng),
            pointwise: Pointwise::new(p, &format!("{name}.pointwise"), cin, cout, true, gain, rng),
        }
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Tensor<T>) -> (Tensor<T>, DscSaved<T>) {
        let (d, dw) = self.depthwise.forward(p, x);
        let (y, pw) = self.pointwise.forward(p, &d);
        (y, DscSaved { dw, pw })
    }

    pub fn backward<T: Real>(&self, p: &Params<T>, s: &DscSaved<T>, gy: &Tensor<T>, g: &mut Grads<T>) -> Tensor<T> {
        let gd = self.pointwise.backward(p, &s.pw, gy, g);
        self.depthwise.backward(p, &s.dw, &gd, g)
    }
}

// ---------------------------------------------------------------------------

/// Global context gate: GAP → C/r bottleneck → ReLU → C → sigmoid.
pub struct ContextGate {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub c: usize,
    pub hidden: usize,
}

pub struct GateSaved<T> {
    pooled: Vec<T>,
    hidden: Vec<T>,
    gate: Vec<T>,
    hw: usize,
}

impl ContextGate {
    pub fn new<T: Real>(p: &mut Params<T>, name: &str, c: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        assert!(reduction >= 1 && c.is_multiple_of(reduction), "channels must divide by the reduction");
        let hidden = c / reduction;
        ContextGate {
            fc1_w: p.add_normal(format!("{name}.fc1.weight"), vec![hidden, c], fan_in_std(c, RELU_GAIN), rng),
            fc1_b: p.add_zeros(format!("{name}.fc1.bias"), vec![hidden]),
            fc2_w: p.add_normal(format!("{name}.fc2.weight"), vec![c, hidden], fan_in_std(hidden, 1.0), rng),
            fc2_b: p.add_zeros(format!("{name}.fc2.bias"), vec![c]),
            c,
            hidden,
        }
    }

    /// Per-sample, per-channel gate values `[n·c]` in (0, 1).
    pub fn forward<T: Real>(&self, p: &Params<T>, r: &Tensor<T>) -> (Vec<T>, GateSaved<T>) {
        assert_eq!(r.c, self.c, "gate channels");
        let (n, c, m, hw) = (r.n, self.c, self.hidden, r.hw());
        let inv = T::one() / T::of(hw as f64);
        let mut pooled = vec![T::zero(); n * c];
        for i in 0..n {
            for (ch, plane) in r.sample(i).chunks_exact(hw).enumerate() {
                pooled[i * c + ch] = plane.iter().copied().sum::<T>() * inv;
            }
        }
        let (w1, b1, w2, b2) = (p.get(self.fc1_w), p.get(self.fc1_b), p.get(self.fc2_w), p.get(self.fc2_b));
        let mut hidden = vec![T::zero(); n * m];
        let mut gate = vec![T::zero(); n * c];
        for i in 0..n {
            let s = &pooled[i * c..(i + 1) * c];
            for j in 0..m {
                let v = b1[j] + w1[j * c..(j + 1) * c].iter().zip(s).map(|(&a, &b)| a * b).sum::<T>();
                hidden[i * m + j] = if v > T::zero() { v } else { T::zero() };
            }
            let hdn = &hidden[i * m..(i + 1) * m];
            for ch in 0..c {
                let z = b2[ch] + w2[ch * m..(ch + 1) * m].iter().zip(hdn).map(|(&a, &b)| a * b).sum::<T>();
                gate[i * c + ch] = sigmoid(z);
            }
        }
        let saved = GateSaved {
            pooled,
            hidden,
            gate: gate.clone(),
            hw,
        };
        (gate, saved)
    }

    /// Takes d(loss)/d(gate) and returns d(loss)/d(r) through the pooling.
    pub fn backward<T: Real>(&self, p: &Params<T>, s: &GateSaved<T>, ggate: &[T], n: usize, h: usize, w: usize, g: &mut Grads<T>) -> Tensor<T> {
        let (c, m) = (self.c, self.hidden);
        let (w1, w2) = (p.get(self.fc1_w), p.get(self.fc2_w));
        let mut gw1 = vec![T::zero(); m * c];
        let mut gb1 = vec![T::zero(); m];
        let mut gw2 = vec![T::zero(); c * m];
        let mut gb2 = vec![T::zero(); c];
        let mut gr = Tensor::zeros(n, c, h, w);
        let inv = T::one() / T::of(s.hw as f64);
        for i in 0..n {
            let gt = &s.gate[i * c..(i + 1) * c];
            let hdn = &s.hidden[i * m..(i + 1) * m];
            let pooled = &s.pooled[i * c..(i + 1) * c];
            let gz: Vec<T> = (0..c).map(|ch| ggate[i * c + ch] * gt[ch] * (T::one() - gt[ch])).collect();
            let mut gh = vec![T::zero(); m];
            for ch in 0..c {
                gb2[ch] += gz[ch];
                for j in 0..m {
                    gw2[ch * m + j] += gz[ch] * hdn[j];
                    gh[j] += w2[ch * m + j] * gz[ch];
                }
            }
            for j in 0..m {
                if hdn[j] <= T::zero() {
                    gh[j] = T::zero();
                }
            }
            let mut gs = vec![T::zero(); c];
            for j in 0..m {
                gb1[j] += gh[j];
                for ch in 0..c {
                    gw1[j * c + ch] += gh[j] * pooled[ch];
                    gs[ch] += w1[j * c + ch] * gh[j];
                }
            }
            for (ch, plane) in gr.sample_mut(i).chunks_exact_mut(s.hw).enumerate() {
                let v = gs[ch] * inv;
                plane.iter_mut().for_each(|x| *x = v);
            }
        }
        for (id, buf) in [(self.fc1_w, gw1), (self.fc1_b, gb1), (self.fc2_w, gw2), (self.fc2_b, gb2)] {
            for (a, b) in g.get_mut(id).iter_mut().zip(buf) {
                *a += b;
            }
        }
        gr
    }
}

// ---------------------------------------------------------------------------

/// Lightweight residual block: `x + gate(r) ⊙ r` with `r = DSC(ReLU(DSC(x)))`.
pub struct LrBlock {
    pub dsc1: Dsc,
    pub dsc2: Dsc,
    pub gate: ContextGate,
}

pub struct LrSaved<T> {
    d1: DscSaved<T>,
    act: Tensor<T>,
    d2: DscSaved<T>,
    residual: Tensor<T>,
    gate: Vec<T>,
    gs: GateSaved<T>,
}

/// `x ⊙ g` with one gate value per (sample, channel).
pub(crate) fn scale_channels<T: Real>(x: &Tensor<T>, g: &[T]) -> Tensor<T> {
    let hw = x.hw();
    let mut out = x.clone();
    for (plane, &gv) in out.data.chunks_exact_mut(hw).zip(g) {
        plane.iter_mut().for_each(|v| *v *= gv);
    }
    out
}

impl LrBlock {
    pub fn new<T: Real>(p: &mut Params<T>, name: &str, c: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        LrBlock {
            dsc1: Dsc::new(p, &format!("{name}.dsc1"), c, c, 3, RELU_GAIN, rng),
            dsc2: Dsc::new(p, &format!("{name}.dsc2"), c, c, 3, 1.0, rng),
            gate: ContextGate::new(p, &format!("{name}.gate"), c, reduction, rng),
        }
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Tensor<T>) -> (Tensor<T>, LrSaved<T>) {
        let (t1, d1) = self.dsc1.forward(p, x);
        let act = relu(&t1);
        let (residual, d2) = self.dsc2.forward(p, &act);
        let (gate, gs) = self.gate.forward(p, &residual);
        let mut out = scale_channels(&residual, &gate);
        out.add_assign(x);
        (
            out,
            LrSaved {
                d1,
                act,
                d2,
                residual,
                gate,
                gs,
            },
        )
    }

    pub fn backward<T: Real>(&self, p: &Params<T>, s: &LrSaved<T>, gy: &Tensor<T>, g: &mut Grads<T>) -> Tensor<T> {
        let hw = gy.hw();
        let mut gr = scale_channels(gy, &s.gate);
        let ggate: Vec<T> = gy
            .data
            .chunks_exact(hw)
            .zip(s.residual.data.chunks_exact(hw))
            .map(|(a, b)| a.iter().zip(b).map(|(&u, &v)| u * v).sum())
            .collect();
        gr.add_assign(&self.gate.backward(p, &s.gs, &ggate, gy.n, gy.h, gy.w, g));
        let gact = self.dsc2.backward(p, &s.d2, &gr, g);
        let gt1 = relu_backward(&s.act, &gact);
        let mut gx = self.dsc1.backward(p, &s.d1, &gt1, g);
        gx.add_assign(gy);
        gx
    }
}

/// Plain residual block `x + conv(ReLU(conv(x)))`, 3×3 convolutions.
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

pub struct ResSaved<T> {
    c1: Saved<T>,
    act: Tensor<T>,
    c2: Saved<T>,
}

impl ResBlock {
    pub fn new<T: Real>(p: &mut Params<T>, name: &str, c: usize, bias: bool, rng: &mut impl Rng) -> Self {
        ResBlock {
            conv1: Conv2d::new(p, &format!("{name}.conv1"), c, c, 3, bias, RELU_GAIN, rng),
            conv2: Conv2d::new(p, &format!("{name}.conv2"), c, c, 3, bias, 1.0, rng),
        }
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Tensor<T>) -> (Tensor<T>, ResSaved<T>) {
        let (t1, c1) = self.conv1.forward(p, x);
        let act = relu(&t1);
        let (mut out, c2) = self.conv2.forward(p, &act);
        out.add_assign(x);
        (out, ResSaved { c1, act, c2 })
    }

    pub fn backward<T: Real>(&self, p: &Params<T>, s: &ResSaved<T>, gy: &Tensor<T>, g: &mut Grads<T>) -> Tensor<T> {
        let gact = self.conv2.backward(p, &s.c2, gy, g);
        let gt1 = relu_backward(&s.act, &gact);
        let mut gx = self.conv1.backward(p, &s.c1, &gt1, g);
        gx.add_assign(gy);
        gx
    }
}
