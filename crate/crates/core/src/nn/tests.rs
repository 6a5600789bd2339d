use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::*;
use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: [usize; 4], r: &mut impl Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// Perturbs every parameter so biases and zero-init weights are exercised.
fn jitter(p: &mut Params<f64>, r: &mut impl Rng) {
    for param in p.iter_mut() {
        for v in &mut param.value {
            *v += r.random_range(-0.3..0.3);
        }
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central-difference check of `loss = <f(x), proj>` against the analytic
/// input and parameter gradients.
fn gradcheck(
    params: &Params<f64>,
    x: &Tensor<f64>,
    f: impl Fn(&Params<f64>, &Tensor<f64>) -> Tensor<f64>,
    back: impl Fn(&Params<f64>, &Tensor<f64>, &Tensor<f64>, &mut Grads<f64>) -> Tensor<f64>,
    seed: u64,
) -> f64 {
    const EPS: f64 = 1e-5;
    let y = f(params, x);
    let proj = random_tensor(y.shape(), &mut rng(seed));
    let mut grads = params.zeros_like();
    let gx = back(params, x, &proj, &mut grads);
    let mut worst: f64 = 0.0;

    let mut xp = x.clone();
    let mut num = vec![0.0; x.data.len()];
    for (i, slot) in num.iter_mut().enumerate() {
        let orig = xp.data[i];
        xp.data[i] = orig + EPS;
        let lp = dot(&f(params, &xp), &proj);
        xp.data[i] = orig - EPS;
        let lm = dot(&f(params, &xp), &proj);
        xp.data[i] = orig;
        *slot = (lp - lm) / (2.0 * EPS);
    }
    worst = worst.max(rel_err(&gx.data, &num));

    let mut pp = params.clone();
    for (k, id) in (0..params.len()).map(|k| (k, ParamId(k))) {
        let mut num = vec![0.0; params.get(id).len()];
        for (i, slot) in num.iter_mut().enumerate() {
            let orig = pp.get(id)[i];
            pp.get_mut(id)[i] = orig + EPS;
            let lp = dot(&f(&pp, x), &proj);
            pp.get_mut(id)[i] = orig - EPS;
            let lm = dot(&f(&pp, x), &proj);
            pp.get_mut(id)[i] = orig;
            *slot = (lp - lm) / (2.0 * EPS);
        }
        let e = rel_err(grads.by_index(k), &num);
        assert!(e < 1e-4, "parameter {} rel err {e}", params.iter().nth(k).unwrap().name);
        worst = worst.max(e);
    }
    worst
}

#[test]
fn gemm_matches_naive() {
    let mut r = rng(1);
    let a: Vec<f64> = (0..6).map(|_| r.random()).collect();
    let b: Vec<f64> = (0..12).map(|_| r.random()).collect();
    let mut c = vec![0.0; 8];
    gemm(Mat::new(&a, 2, 3), Mat::new(&b, 3, 4), 0.0, &mut c);
    for i in 0..2 {
        for j in 0..4 {
            let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
            assert!((c[i * 4 + j] - want).abs() < 1e-12);
        }
    }
    // transposed view of b (4×3 stored) reproduces the same product
    let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect();
    let mut c2 = vec![0.0; 8];
    gemm(Mat::new(&a, 2, 3), Mat::new(&bt, 4, 3).t(), 0.0, &mut c2);
    assert_eq!(c, c2);
}

#[test]
fn conv_gradients() {
    let mut p = Params::new();
    let conv = Conv2d::new(&mut p, "c", 3, 4, 3, true, 1.0, &mut rng(2));
    jitter(&mut p, &mut rng(3));
    let x = random_tensor([2, 3, 5, 4], &mut rng(4));
    let e = gradcheck(
        &p,
        &x,
        |p, x| conv.forward(p, x).0,
        |p, x, gy, g| {
            let (_, s) = conv.forward(p, x);
            conv.backward(p, &s, gy, g)
        },
        5,
    );
    assert!(e < 1e-4, "{e}");
}

#[test]
fn conv_matches_direct_sum() {
    let mut p = Params::new();
    let conv = Conv2d::new(&mut p, "c", 2, 3, 3, true, 1.0, &mut rng(6));
    jitter(&mut p, &mut rng(7));
    let x = random_tensor([1, 2, 4, 5], &mut rng(8));
    let y = conv.forward(&p, &x).0;
    let (w, b) = (p.get(conv.weight), p.get(conv.bias.unwrap()));
    for co in 0..3 {
        for yy in 0..4i32 {
            for xx in 0..5i32 {
                let mut acc = b[co];
                for ci in 0..2 {
                    for ky in 0..3i32 {
                        for kx in 0..3i32 {
                            let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                            if (0..4).contains(&sy) && (0..5).contains(&sx) {
                                acc += w[((co * 2 + ci) * 3 + ky as usize) * 3 + kx as usize] * x.data[(ci * 4 + sy as usize) * 5 + sx as usize];
                            }
                        }
                    }
                }
                assert!((y.data[(co * 4 + yy as usize) * 5 + xx as usize] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn down_up_gradients() {
    let mut p = Params::new();
    let down = Down2::new(&mut p, "d", 3, 5, true, &mut rng(9));
    let up = Up2::new(&mut p, "u", 5, 2, true, &mut rng(10));
    jitter(&mut p, &mut rng(11));
    let x = random_tensor([2, 3, 6, 4], &mut rng(12));
    let e = gradcheck(
        &p,
        &x,
        |p, x| up.forward(p, &down.forward(p, x).0).0,
        |p, x, gy, g| {
            let (d, sd) = down.forward(p, x);
            let (_, su) = up.forward(p, &d);
            let gd = up.backward(p, &su, gy, g);
            down.backward(p, &sd, &gd, g)
        },
        13,
    );
    assert!(e < 1e-4, "{e}");
}

#[test]
fn up_matches_transposed_conv_definition() {
    let mut p = Params::new();
    let up = Up2::new(&mut p, "u", 2, 3, true, &mut rng(14));
    jitter(&mut p, &mut rng(15));
    let x = random_tensor([1, 2, 2, 3], &mut rng(16));
    let y = up.forward(&p, &x).0;
    let (w, b) = (p.get(up.weight), p.get(up.bias.unwrap()));
    for co in 0..3 {
        for oy in 0..4 {
            for ox in 0..6 {
                let (iy, ix, ky, kx) = (oy / 2, ox / 2, oy % 2, ox % 2);
                let mut acc = b[co];
                for ci in 0..2 {
                    acc += x.data[(ci * 2 + iy) * 3 + ix] * w[((ci * 3 + co) * 2 + ky) * 2 + kx];
                }
                assert!((y.data[(co * 4 + oy) * 6 + ox] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn dsc_gradients() {
    let mut p = Params::new();
    let dsc = Dsc::new(&mut p, "dsc", 8, 8, 3, 1.0, &mut rng(17));
    jitter(&mut p, &mut rng(18));
    let x = random_tensor([1, 8, 6, 6], &mut rng(19));
    let e = gradcheck(
        &p,
        &x,
        |p, x| dsc.forward(p, x).0,
        |p, x, gy, g| {
            let (_, s) = dsc.forward(p, x);
            dsc.backward(p, &s, gy, g)
        },
        20,
    );
    assert!(e < 1e-4, "{e}");
}

#[test]
fn dsc_equals_explicit_composition() {
    let mut p = Params::new();
    let dsc = Dsc::new(&mut p, "dsc", 5, 7, 3, 1.0, &mut rng(21));
    jitter(&mut p, &mut rng(22));
    let x = random_tensor([2, 5, 7, 6], &mut rng(23));
    let y = dsc.forward(&p, &x).0;
    let (kd, bd) = (p.get(dsc.depthwise.weight), p.get(dsc.depthwise.bias.unwrap()));
    let (kp, bp) = (p.get(dsc.pointwise.weight), p.get(dsc.pointwise.bias.unwrap()));
    let (h, w) = (7usize, 6usize);
    for n in 0..2 {
        let xs = x.sample(n);
        let mut dep = vec![0.0; 5 * h * w];
        for c in 0..5 {
            for yy in 0..h as i32 {
                for xx in 0..w as i32 {
                    let mut acc = bd[c];
                    for ky in 0..3i32 {
                        for kx in 0..3i32 {
                            let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                            if sy >= 0 && sy < h as i32 && sx >= 0 && sx < w as i32 {
                                acc += kd[c * 9 + (ky * 3 + kx) as usize] * xs[(c * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    dep[(c * h + yy as usize) * w + xx as usize] = acc;
                }
            }
        }
        let ys = y.sample(n);
        for co in 0..7 {
            for i in 0..h * w {
                let want = bp[co] + (0..5).map(|c| kp[co * 5 + c] * dep[c * h * w + i]).sum::<f64>();
                assert!((ys[co * h * w + i] - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn dsc_identity_factorization() {
    let mut p: Params<f64> = Params::new();
    let dsc = Dsc::new(&mut p, "dsc", 4, 4, 3, 1.0, &mut rng(24));
    let kd = p.get_mut(dsc.depthwise.weight);
    kd.iter_mut().enumerate().for_each(|(i, v)| *v = if i % 9 == 4 { 1.0 } else { 0.0 });
    let kp = p.get_mut(dsc.pointwise.weight);
    kp.iter_mut().enumerate().for_each(|(i, v)| *v = if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let x = random_tensor([1, 4, 5, 3], &mut rng(25));
    assert_eq!(dsc.forward(&p, &x).0, x);
}

#[test]
fn dsc_parameter_count() {
    let mut p: Params<f32> = Params::new();
    Dsc::new(&mut p, "dsc", 64, 64, 3, 1.0, &mut rng(26));
    assert_eq!(p.scalar_count(), 4800);
    let mut p: Params<f32> = Params::new();
    Pointwise::new(&mut p, "pw", 2, 3, true, 1.0, &mut rng(27));
    assert_eq!(p.scalar_count(), 9);
}

#[test]
fn context_gate_gradients() {
    let mut p = Params::new();
    let gate = ContextGate::new(&mut p, "gate", 8, 4, &mut rng(28));
    jitter(&mut p, &mut rng(29));
    let x = random_tensor([2, 8, 6, 6], &mut rng(30));
    // present the gate as an [n, c, 1, 1] tensor so the generic check applies
    let as_tensor = |g: Vec<f64>| Tensor::from_vec([2, 8, 1, 1], g);
    let e = gradcheck(
        &p,
        &x,
        |p, x| as_tensor(gate.forward(p, x).0),
        |p, x, gy, g| {
            let (_, s) = gate.forward(p, x);
            gate.backward(p, &s, &gy.data, x.n, x.h, x.w, g)
        },
        31,
    );
    assert!(e < 1e-4, "{e}");
}

#[test]
fn lr_block_gradients() {
    let mut p = Params::new();
    let block = LrBlock::new(&mut p, "lr", 8, 4, &mut rng(32));
    jitter(&mut p, &mut rng(33));
    let x = random_tensor([1, 8, 6, 6], &mut rng(34));
    let e = gradcheck(
        &p,
        &x,
        |p, x| block.forward(p, x).0,
        |p, x, gy, g| {
            let (_, s) = block.forward(p, x);
            block.backward(p, &s, gy, g)
        },
        35,
    );
    assert!(e < 1e-4, "{e}");
}

#[test]
fn res_block_gradients() {
    let mut p = Params::new();
    let block = ResBlock::new(&mut p, "res", 4, false, &mut rng(36));
    let x = random_tensor([1, 4, 5, 5], &mut rng(37));
    let e = gradcheck(
        &p,
        &x,
        |p, x| block.forward(p, x).0,
        |p, x, gy, g| {
            let (_, s) = block.forward(p, x);
            block.backward(p, &s, gy, g)
        },
        38,
    );
    assert!(e < 1e-4, "{e}");
}

#[test]
fn lr_block_zero_residual_is_skip() {
    let mut p: Params<f64> = Params::new();
    let block = LrBlock::new(&mut p, "lr", 8, 8, &mut rng(39));
    for id in [block.dsc2.pointwise.weight, block.dsc2.pointwise.bias.unwrap()] {
        p.get_mut(id).iter_mut().for_each(|v| *v = 0.0);
    }
    let x = random_tensor([1, 8, 7, 3], &mut rng(40));
    assert_eq!(block.forward(&p, &x).0, x);
}

#[test]
fn lr_block_saturated_gate_is_skip() {
    let mut p: Params<f64> = Params::new();
    let block = LrBlock::new(&mut p, "lr", 8, 8, &mut rng(41));
    jitter(&mut p, &mut rng(42));
    p.get_mut(block.gate.fc2_b).iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
    let x = random_tensor([2, 8, 5, 9], &mut rng(43));
    let y = block.forward(&p, &x).0;
    assert_eq!(y.shape(), x.shape());
    assert_eq!(y, x);
}

#[test]
fn f32_and_f64_agree() {
    let mut p: Params<f64> = Params::new();
    let block = LrBlock::new(&mut p, "lr", 8, 4, &mut rng(44));
    let x = random_tensor([1, 8, 9, 7], &mut rng(45));
    let y64 = block.forward(&p, &x).0;
    let y32 = block.forward(&p.cast::<f32>(), &x.cast::<f32>()).0;
    for (a, b) in y64.data.iter().zip(&y32.data) {
        assert!((a - *b as f64).abs() < 1e-4);
    }
}
