use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{contract, ModelHandle};
use crate::error::Result;
use crate::nn::Tensor;
use crate::raster::{Mask, Raster};

/// Tiling for maps larger than one forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhanceOptions {
    /// Largest tile side fed to the network (rounded down to the size multiple).
    pub tile: usize,
    /// Pixels shared by neighbouring tiles; blended with linear ramps after a
    /// dead margin of a quarter of the overlap.
    pub overlap: usize,
}

impl Default for EnhanceOptions {
    fn default() -> Self {
        EnhanceOptions { tile: 256, overlap: 16 }
    }
}

/// Mirror index without repeating the edge sample.
fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let r = i % period;
    if r < len {
        r
    } else {
        period - r
    }
}

fn tile_starts(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let mut starts = vec![0];
    let mut s = 0;
    while s + tile < len {
        s = (s + tile - overlap).min(len - tile);
        starts.push(s);
    }
    starts
}

/// Blend weight of position `p` inside a tile `[s, s+t)` of an axis of length
/// `len`. The outer quarter of the overlap gets zero weight so pixels whose
/// receptive field reaches the tile border do not leak into the blend.
fn ramp(p: usize, s: usize, t: usize, len: usize, overlap: usize) -> f32 {
    let margin = overlap / 4;
    let on = (overlap - 2 * margin + 1) as f32;
    let rise = |d: usize| (d.saturating_sub(margin) as f32 / on).min(1.0);
    let rin = if s == 0 { 1.0 } else { rise(p - s + 1) };
    let rout = if s + t >= len { 1.0 } else { rise(s + t - p) };
    rin.min(rout)
}

/// Enhances the occupied pixels of an attribute map; everything else is
/// copied from the input.
pub fn enhance(m: &ModelHandle, attribute: &Raster, occupancy: &Mask, opts: &EnhanceOptions) -> Result<Raster> {
    if attribute.channels != 3 {
        return Err(contract("attribute map must be RGB"));
    }
    if !occupancy.matches(attribute) {
        return Err(contract("occupancy and attribute dimensions differ"));
    }
    let in_c = m.architecture().in_channels();
    if !(in_c == 3 || in_c == 4) || m.architecture().out_channels() != 3 {
        return Err(contract("enhancement needs a 3- or 4-channel input and RGB output model"));
    }
    let mult = m.size_multiple();
    let tile = (opts.tile / mult) * mult;
    if tile == 0 || opts.overlap >= tile {
        return Err(contract(format!("tile {} must hold one {mult}-multiple and exceed the overlap", opts.tile)));
    }
    if occupancy.is_empty() {
        return Ok(attribute.clone());
    }
    let (w, h) = (attribute.width, attribute.height);
    let hp = h.div_ceil(mult) * mult;
    let wp = w.div_ceil(mult) * mult;

    // channels-first padded input
    let mut padded = vec![0f32; in_c * hp * wp];
    for y in 0..hp {
        let sy = reflect(y, h);
        for x in 0..wp {
            let sx = reflect(x, w);
            let px = attribute.pixel(sx, sy);
            for c in 0..3 {
                padded[(c * hp + y) * wp + x] = px[c] as f32 / 255.0;
            }
            if in_c == 4 {
                padded[(3 * hp + y) * wp + x] = occupancy.get(sx, sy) as u8 as f32;
            }
        }
    }

    let ys = tile_starts(hp, tile, opts.overlap);
    let xs = tile_starts(wp, tile, opts.overlap);
    let (th, tw) = (tile.min(hp), tile.min(wp));
    let jobs: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    let outputs: Vec<Tensor<f32>> = jobs
        .par_iter()
        .map(|&(y0, x0)| {
            let mut t = Tensor::zeros(1, in_c, th, tw);
            for c in 0..in_c {
                for y in 0..th {
                    let src = &padded[(c * hp + y0 + y) * wp + x0..][..tw];
                    t.data[(c * th + y) * tw..][..tw].copy_from_slice(src);
                }
            }
            m.forward(&t)
        })
        .collect::<Result<_>>()?;

    let mut acc = vec![0f32; 3 * h * w];
    let mut wsum = vec![0f32; h * w];
    for (&(y0, x0), out) in jobs.iter().zip(&outputs) {
        for y in 0..th.min(h.saturating_sub(y0)) {
            let wy = ramp(y0 + y, y0, th, hp, opts.overlap);
            for x in 0..tw.min(w.saturating_sub(x0)) {
                let wt = wy * ramp(x0 + x, x0, tw, wp, opts.overlap);
                let i = (y0 + y) * w + x0 + x;
                wsum[i] += wt;
                for c in 0..3 {
                    acc[c * h * w + i] += wt * out.data[(c * th + y) * tw + x];
                }
            }
        }
    }

    let mut result = attribute.clone();
    for y in 0..h {
        for x in 0..w {
            if !occupancy.get(x, y) {
                continue;
            }
            let i = y * w + x;
            let px = result.pixel_mut(x, y);
            for c in 0..3 {
                let v = acc[c * h * w + i] / wsum[i];
                px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Ok(result)
}
