//! Voxelized colored point clouds: the in-memory type, PLY I/O and synthetic
//! test content.

mod ply;
pub(crate) mod synth;

use std::collections::HashSet;

pub use ply::{load_ply, read_ply, save_ply, write_ply};
pub use synth::{synth_cloud, SynthKind};

use crate::error::{Error, Result};

/// One voxel with an 8-bit RGB color.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Point {
    pub x: i32,
    pub y: i32,
    pub z: i32,
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl Point {
    pub const fn new(x: i32, y: i32, z: i32, r: u8, g: u8, b: u8) -> Self {
        Point { x, y, z, r, g, b }
    }

    #[inline]
    pub fn coords(&self) -> [i32; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn rgb(&self) -> [u8; 3] {
        [self.r, self.g, self.b]
    }

    #[inline]
    pub fn set_rgb(&mut self, c: [u8; 3]) {
        self.r = c[0];
        self.g = c[1];
        self.b = c[2];
    }
}

/// Ordered set of voxels with unique coordinates on a `2^bit_depth` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointCloud {
    points: Vec<Point>,
    bit_depth: u32,
}

/// Removes repeated coordinates, keeping the first occurrence. Returns the
/// surviving points and how many were dropped.
pub fn dedup_points(points: Vec<Point>) -> (Vec<Point>, usize) {
    let mut seen = HashSet::with_capacity(points.len());
    let before = points.len();
    let kept: Vec<Point> = points
        .into_iter()
        .filter(|p| seen.insert(p.coords()))
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Smallest `b >= 8` such that every coordinate is below `2^b`.
pub fn infer_bit_depth(points: &[Point]) -> u32 {
    let max = points
        .iter()
        .flat_map(|p| p.coords())
        .max()
        .unwrap_or(0)
        .max(0) as u64;
    let mut b = 8;
    while (1u64 << b) <= max {
        b += 1;
    }
    b
}

impl PointCloud {
    /// Validates coordinates, drops duplicate voxels (first wins, with a
    /// warning) and infers the grid precision.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| p.x < 0 || p.y < 0 || p.z < 0) {
            return Err(Error::contract(
                "pointcloud",
                format!("negative coordinate ({}, {}, {})", p.x, p.y, p.z),
            ));
        }
        let (points, dropped) = dedup_points(points);
        if dropped > 0 {
            log::warn!("dropped {dropped} duplicate voxel(s); first occurrence kept");
        }
        let bit_depth = infer_bit_depth(&points);
        Ok(PointCloud { points, bit_depth })
    }

    pub fn empty() -> Self {
        PointCloud {
            points: Vec::new(),
            bit_depth: 8,
        }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bit_depth(&self) -> u32 {
        self.bit_depth
    }

    /// Same coordinates and order, colors replaced. Panics if the lengths differ.
    pub fn with_colors(&self, colors: &[[u8; 3]]) -> PointCloud {
        assert_eq!(colors.len(), self.points.len());
        let points = self
            .points
            .iter()
            .zip(colors)
            .map(|(p, &c)| {
                let mut q = *p;
                q.set_rgb(c);
                q
            })
            .collect();
        PointCloud {
            points,
            bit_depth: self.bit_depth,
        }
    }

    pub fn colors(&self) -> Vec<[u8; 3]> {
        self.points.iter().map(Point::rgb).collect()
    }

    /// Inclusive per-axis bounds, or `None` for an empty cloud.
    pub fn bounds(&self) -> Option<([i32; 3], [i32; 3])> {
        let first = self.points.first()?.coords();
        let mut lo = first;
        let mut hi = first;
        for p in &self.points {
            for (a, v) in p.coords().into_iter().enumerate() {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        Some((lo, hi))
    }
}
