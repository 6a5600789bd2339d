//! Deterministic stand-in for intra coding of attribute maps.
//!
//! RGB is converted to full-range BT.709 YCbCr, every plane is cut into
//! square blocks, transformed with an orthonormal 2-D DCT-II, quantized with
//! the HEVC step law `2^((qp - 4) / 6)` and transformed back. 4:4:4 is kept
//! throughout. The DC coefficient uses a step of at most 1, which stands in
//! for DC intra prediction: flat content survives any QP.
//!
//! [`degrade_external`] runs a real encoder instead when one is available.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{KB, KR};
use crate::raster::{self, Raster};

pub const MAX_QP: i32 = 51;

/// Attribute QPs of the three standard rate points (r1, r2, r3).
pub const STANDARD_QPS: [i32; 3] = [42, 37, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    #[default]
    Ycbcr709Full,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub qp: i32,
    pub block: usize,
    pub color_space: ColorSpace,
    pub chroma_qp_offset: i32,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            qp: 42,
            block: 8,
            color_space: ColorSpace::Ycbcr709Full,
            chroma_qp_offset: 0,
        }
    }
}

impl CodecConfig {
    pub fn with_qp(qp: i32) -> Self {
        CodecConfig {
            qp,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_qp(self.qp)?;
        if ![4, 8, 16].contains(&self.block) {
            return Err(Error::contract(
                "codec_sim",
                format!("block size {} not in {{4, 8, 16}}", self.block),
            ));
        }
        Ok(())
    }

    fn chroma_qp(&self) -> i32 {
        (self.qp + self.chroma_qp_offset).clamp(0, MAX_QP)
    }
}

fn check_qp(qp: i32) -> Result<()> {
    if !(0..=MAX_QP).contains(&qp) {
        return Err(Error::contract(
            "codec_sim",
            format!("qp {qp} outside [0, {MAX_QP}]"),
        ));
    }
    Ok(())
}

/// Quantizer step size for `qp`.
pub fn qstep(qp: i32) -> Result<f64> {
    check_qp(qp)?;
    Ok(2f64.powf((qp - 4) as f64 / 6.0))
}

/// Orthonormal DCT-II basis, row `k` holds frequency `k`.
pub(crate) fn dct_basis(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let a = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            m[k * n + i] =
                a * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

/// `coef = C · X · Cᵀ` for a row-major `n×n` block.
pub(crate) fn dct2(basis: &[f64], n: usize, x: &[f64], out: &mut [f64]) {
    let mut tmp = vec![0.0; n * n];
    for k in 0..n {
        for j in 0..n {
            tmp[k * n + j] = (0..n).map(|i| basis[k * n + i] * x[i * n + j]).sum();
        }
    }
    for k in 0..n {
        for l in 0..n {
            out[k * n + l] = (0..n).map(|j| tmp[k * n + j] * basis[l * n + j]).sum();
        }
    }
}

/// `X = Cᵀ · coef · C`.
pub(crate) fn idct2(basis: &[f64], n: usize, c: &[f64], out: &mut [f64]) {
    let mut tmp = vec![0.0; n * n];
    for i in 0..n {
        for l in 0..n {
            tmp[i * n + l] = (0..n).map(|k| basis[k * n + i] * c[k * n + l]).sum();
        }
    }
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|l| tmp[i * n + l] * basis[l * n + j]).sum();
        }
    }
}

/// Uniform reconstruction `round(c / step) · step`; DC uses `min(step, 1)`.
pub(crate) fn quantize_block(coef: &mut [f64], step: f64) {
    let dc_step = step.min(1.0);
    coef[0] = (coef[0] / dc_step).round() * dc_step;
    for c in coef[1..].iter_mut() {
        *c = (*c / step).round() * step;
    }
}

fn reflect(i: usize, n: usize) -> usize {
    // symmetric extension: ... 2 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
    let period = 2 * n;
    let m = i % period;
    if m < n {
        m
    } else {
        period - 1 - m
    }
}

fn code_plane(plane: &[f64], w: usize, h: usize, block: usize, step: f64) -> Vec<f64> {
    let (pw, ph) = (w.div_ceil(block) * block, h.div_ceil(block) * block);
    let basis = dct_basis(block);
    let mut out = vec![0.0; w * h];
    let mut blk = vec![0.0; block * block];
    let mut coef = vec![0.0; block * block];
    for by in (0..ph).step_by(block) {
        for bx in (0..pw).step_by(block) {
            for i in 0..block {
                let y = reflect(by + i, h);
                for j in 0..block {
                    let x = reflect(bx + j, w);
                    blk[i * block + j] = plane[y * w + x] - 128.0;
                }
            }
            dct2(&basis, block, &blk, &mut coef);
            quantize_block(&mut coef, step);
            idct2(&basis, block, &coef, &mut blk);
            for i in 0..block {
                let y = by + i;
                if y >= h {
                    break;
                }
                for j in 0..block {
                    let x = bx + j;
                    if x < w {
                        out[y * w + x] = blk[i * block + j] + 128.0;
                    }
                }
            }
        }
    }
    out
}

/// Simulated lossy coding of an RGB map at `cfg.qp`.
pub fn degrade(img: &Raster, cfg: &CodecConfig) -> Result<Raster> {
    cfg.validate()?;
    if img.channels != 3 {
        return Err(Error::contract("codec_sim", "degrade expects an RGB image"));
    }
    let (w, h) = (img.width, img.height);
    if w == 0 || h == 0 {
        return Ok(img.clone());
    }
    let n = w * h;
    let (mut y, mut cb, mut cr) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for (k, px) in img.data.chunks_exact(3).enumerate() {
        let [yy, u, v] = rgb_to_ycbcr(px[0], px[1], px[2]);
        y[k] = yy;
        cb[k] = u;
        cr[k] = v;
    }
    let luma_step = qstep(cfg.qp)?;
    let chroma_step = qstep(cfg.chroma_qp())?;
    let y = code_plane(&y, w, h, cfg.block, luma_step);
    let cb = code_plane(&cb, w, h, cfg.block, chroma_step);
    let cr = code_plane(&cr, w, h, cfg.block, chroma_step);
    let mut out = Raster::new(w, h, 3);
    for k in 0..n {
        out.data[k * 3..k * 3 + 3].copy_from_slice(&ycbcr_to_rgb(y[k], cb[k], cr[k]));
    }
    Ok(out)
}

/// Full-range BT.709 YCbCr with chroma centred on 128.
pub fn rgb_to_ycbcr(r: u8, g: u8, b: u8) -> [f64; 3] {
    let (r, g, b) = (r as f64, g as f64, b as f64);
    let y = KR * r + (1.0 - KR - KB) * g + KB * b;
    [
        y,
        (b - y) / (2.0 * (1.0 - KB)) + 128.0,
        (r - y) / (2.0 * (1.0 - KR)) + 128.0,
    ]
}

pub fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> [u8; 3] {
    let r = y + 2.0 * (1.0 - KR) * (cr - 128.0);
    let b = y + 2.0 * (1.0 - KB) * (cb - 128.0);
    let g = (y - KR * r - KB * b) / (1.0 - KR - KB);
    [r, g, b].map(|v| v.round().clamp(0.0, 255.0) as u8)
}

/// Splits a command template into arguments, honouring single and double quotes.
fn split_command(s: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_token = false;
    let mut quote: Option<char> = None;
    for ch in s.chars() {
        match quote {
            Some(q) if ch == q => quote = None,
            Some(_) => cur.push(ch),
            None if ch == '\'' || ch == '"' => {
                quote = Some(ch);
                in_token = true;
            }
            None if ch.is_whitespace() => {
                if in_token {
                    out.push(std::mem::take(&mut cur));
                    in_token = false;
                }
            }
            None => {
                cur.push(ch);
                in_token = true;
            }
        }
    }
    if quote.is_some() {
        return Err(Error::Config(format!("unterminated quote in `{s}`")));
    }
    if in_token {
        out.push(cur);
    }
    Ok(out)
}

/// Checks that an external encoder template carries every placeholder.
pub fn validate_template(template: &str) -> Result<()> {
    for key in ["{input}", "{output}", "{qp}"] {
        if !template.contains(key) {
            return Err(Error::Config(format!(
                "external encoder template lacks {key}: `{template}`"
            )));
        }
    }
    Ok(())
}

fn scratch_path(ext: &str) -> PathBuf {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    std::env::temp_dir().join(format!("pcce-ext-{}-{n}.{ext}", std::process::id()))
}

/// Runs an external encode/decode round trip: `{input}`, `{output}` and
/// `{qp}` in `template` are substituted, the decoded PNG at `{output}` is
/// read back and checked against the input dimensions.
pub fn degrade_external(input: &Path, cfg: &CodecConfig, template: &str) -> Result<Raster> {
    cfg.validate()?;
    validate_template(template)?;
    let src = raster::read_rgb_png(input)?;
    let out_path = scratch_path("png");
    let args: Vec<String> = split_command(template)?
        .into_iter()
        .map(|a| {
            a.replace("{input}", &input.to_string_lossy())
                .replace("{output}", &out_path.to_string_lossy())
                .replace("{qp}", &cfg.qp.to_string())
        })
        .collect();
    let (program, rest) = args
        .split_first()
        .ok_or_else(|| Error::Config("empty external encoder template".into()))?;
    let result = Command::new(program).args(rest).output();
    let output = match result {
        Ok(o) => o,
        Err(e) => {
            return Err(Error::ExternalTool {
                command: program.clone(),
                detail: format!("could not start: {e}"),
            })
        }
    };
    if !output.status.success() {
        let _ = std::fs::remove_file(&out_path);
        return Err(Error::ExternalTool {
            command: program.clone(),
            detail: format!(
                "{}; stdout: {}; stderr: {}",
                output.status,
                String::from_utf8_lossy(&output.stdout).trim(),
                String::from_utf8_lossy(&output.stderr).trim()
            ),
        });
    }
    let decoded = raster::read_rgb_png(&out_path).map_err(|e| Error::ExternalTool {
        command: program.clone(),
        detail: format!("no readable output image: {e}"),
    });
    let _ = std::fs::remove_file(&out_path);
    let decoded = decoded?;
    if (decoded.width, decoded.height) != (src.width, src.height) {
        return Err(Error::ExternalTool {
            command: program.clone(),
            detail: format!(
                "output is {}x{}, input was {}x{}",
                decoded.width, decoded.height, src.width, src.height
            ),
        });
    }
    Ok(decoded)
}

/// The in-process simulator, or an external encoder when a template is set.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Codec {
    pub config: CodecConfig,
    pub external: Option<String>,
}

impl Codec {
    /// Degrades `img` at `qp` (overriding `config.qp`).
    pub fn apply(&self, img: &Raster, qp: i32) -> Result<Raster> {
        let cfg = CodecConfig { qp, ..self.config.clone() };
        match &self.external {
            None => degrade(img, &cfg),
            Some(template) => {
                cfg.validate()?;
                validate_template(template)?;
                let input = scratch_path("png");
                raster::write_rgb_png(&input, img)?;
                let out = degrade_external(&input, &cfg, template);
                let _ = std::fs::remove_file(&input);
                out
            }
        }
    }
}
