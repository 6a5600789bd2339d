//! Luma conversion and Y-PSNR in 2D (over occupied map pixels) and 3D
//! (symmetric nearest-neighbour color error between two clouds).

mod kdtree;
mod report;

pub use kdtree::KdTree;
pub use report::{make_report, read_rows, write_report, QualityRow, Report};

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::raster::{Mask, Raster};

/// BT.709 red luma weight.
pub const KR: f64 = 0.2126;
/// BT.709 blue luma weight.
pub const KB: f64 = 0.0722;

const PEAK2: f64 = 255.0 * 255.0;

/// Full-range BT.709 luma.
#[inline]
pub fn rgb_to_y(r: u8, g: u8, b: u8) -> f64 {
    KR * r as f64 + (1.0 - KR - KB) * g as f64 + KB * b as f64
}

/// `10·log10(255² / mse)`, `+inf` for a zero error.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK2 / mse).log10()
    }
}

/// Mean squared Y error over `mask`.
pub fn y_mse_2d(reference: &Raster, test: &Raster, mask: &Mask) -> Result<f64> {
    if !reference.same_dims(test) || !mask.matches(reference) || reference.channels != 3 {
        return Err(Error::contract(
            "metrics",
            "reference, test and mask must share dimensions and be RGB",
        ));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for (k, &m) in mask.data.iter().enumerate() {
        if m {
            let a = &reference.data[k * 3..k * 3 + 3];
            let b = &test.data[k * 3..k * 3 + 3];
            let d = rgb_to_y(a[0], a[1], a[2]) - rgb_to_y(b[0], b[1], b[2]);
            acc += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::contract("metrics", "PSNR mask has no occupied pixel"));
    }
    Ok(acc / n as f64)
}

/// Y-PSNR restricted to occupied pixels.
pub fn psnr_2d(reference: &Raster, test: &Raster, mask: &Mask) -> Result<f64> {
    Ok(psnr_from_mse(y_mse_2d(reference, test, mask)?))
}

/// Y-PSNR over every pixel of the frame.
pub fn psnr_2d_full_frame(reference: &Raster, test: &Raster) -> Result<f64> {
    psnr_2d(reference, test, &Mask::full(reference.width, reference.height))
}

fn one_way_mse(from: &PointCloud, to: &PointCloud, tree: &KdTree) -> f64 {
    let mut acc = 0.0;
    for p in from.points() {
        let (j, _) = tree.nearest(p.coords()).expect("non-empty target");
        let q = &to.points()[j as usize];
        let d = rgb_to_y(p.r, p.g, p.b) - rgb_to_y(q.r, q.g, q.b);
        acc += d * d;
    }
    acc / from.len() as f64
}

/// Symmetric color Y-PSNR: each cloud is matched to its nearest neighbours in
/// the other and the worse of the two directional errors is reported.
pub fn psnr_3d_color(reference: &PointCloud, test: &PointCloud) -> Result<f64> {
    if reference.is_empty() || test.is_empty() {
        return Err(Error::contract("metrics", "3D PSNR needs two non-empty clouds"));
    }
    let ref_tree = KdTree::new(reference.points().iter().map(|p| p.coords()));
    let test_tree = KdTree::new(test.points().iter().map(|p| p.coords()));
    let ab = one_way_mse(reference, test, &test_tree);
    let ba = one_way_mse(test, reference, &ref_tree);
    Ok(psnr_from_mse(ab.max(ba)))
}
