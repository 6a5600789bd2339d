use std::path::Path;

use super::Axis;
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::raster::{self, Raster};

/// Orthographic view along `axis`: per pixel the point with the smallest
/// depth wins, background is black with a one-pixel border, the vertical
/// tangent axis points up.
pub fn render_ortho_raster(pc: &PointCloud, axis: Axis) -> Result<Raster> {
    let (lo, hi) = pc
        .bounds()
        .ok_or_else(|| Error::contract("projection", "cannot render an empty cloud"))?;
    let (d, tu, tv) = axis.frame();
    let w = (hi[tu] - lo[tu] + 3) as usize;
    let h = (hi[tv] - lo[tv] + 3) as usize;
    let mut img = Raster::new(w, h, 3);
    let mut depth = vec![i32::MAX; w * h];
    for p in pc.points() {
        let c = p.coords();
        let x = (c[tu] - lo[tu] + 1) as usize;
        let y = (hi[tv] - c[tv] + 1) as usize;
        let k = y * w + x;
        if c[d] < depth[k] {
            depth[k] = c[d];
            img.pixel_mut(x, y).copy_from_slice(&p.rgb());
        }
    }
    Ok(img)
}

pub fn render_ortho(pc: &PointCloud, axis: Axis, out: &Path) -> Result<()> {
    raster::write_rgb_png(out, &render_ortho_raster(pc, axis)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::Point;

    #[test]
    fn single_red_point() {
        let pc = PointCloud::new(vec![Point::new(3, 4, 5, 255, 0, 0)]).unwrap();
        let img = render_ortho_raster(&pc, Axis::Z).unwrap();
        assert_eq!((img.width, img.height), (3, 3));
        let lit: Vec<_> = (0..9).filter(|k| img.pixel(k % 3, k / 3) != [0, 0, 0]).collect();
        assert_eq!(lit, vec![4]);
        assert_eq!(img.pixel(1, 1), &[255, 0, 0]);
    }

    #[test]
    fn nearer_point_occludes() {
        let pc = PointCloud::new(vec![
            Point::new(0, 0, 7, 0, 0, 255),
            Point::new(0, 0, 2, 0, 255, 0),
            Point::new(1, 0, 9, 255, 255, 255),
        ])
        .unwrap();
        let img = render_ortho_raster(&pc, Axis::Z).unwrap();
        assert_eq!((img.width, img.height), (4, 3));
        assert_eq!(img.pixel(1, 1), &[0, 255, 0]);
        assert_eq!(img.pixel(2, 1), &[255, 255, 255]);
    }
}
