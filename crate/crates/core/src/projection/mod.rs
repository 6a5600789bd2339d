//! 3D→2D projection of a voxel cloud into occupancy, geometry and attribute
//! maps with an exact point↔pixel correspondence, and the inverse recoloring.
//!
//! Points are captured by repeated axial sweeps. Each pass visits the X, Y and
//! Z axes in that order; for every tangent-plane cell the unassigned point with
//! the smallest depth forms the near layer, and the deepest unassigned point
//! within `surface_thickness` of it forms the far layer. Every non-empty layer
//! becomes one patch. Points still unassigned after `max_passes` are carried
//! verbatim as leftovers, so geometry survives the round trip exactly.

mod io;
mod render;

use serde::{Deserialize, Serialize};

pub use io::{read_atlas, write_atlas, ATLAS_FORMAT_VERSION};
pub use render::{render_ortho, render_ortho_raster};

use crate::error::{Error, Result};
use crate::pointcloud::{Point, PointCloud};
use crate::raster::{Mask, Raster};

/// Marks an unoccupied pixel in [`AtlasBundle::correspondence`].
pub const NONE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    /// (depth axis, horizontal tangent axis, vertical tangent axis) as coordinate indices.
    #[inline]
    pub fn frame(self) -> (usize, usize, usize) {
        match self {
            Axis::X => (0, 2, 1),
            Axis::Y => (1, 0, 2),
            Axis::Z => (2, 0, 1),
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::Config(format!("unknown axis `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Near,
    Far,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlacement {
    pub axis: Axis,
    pub direction: Direction,
    pub pass_index: u32,
    /// Top-left pixel (u0, v0) in the atlas.
    pub atlas_origin: [u32; 2],
    /// Patch extent in pixels (width, height).
    pub size: [u32; 2],
    /// Inclusive 3D bounds of the captured points.
    pub source_box: [[i32; 3]; 2],
    pub depth_offset: i32,
}

impl PatchPlacement {
    /// Tangent-plane coordinates of the patch's top-left pixel.
    pub fn tangent_origin(&self) -> [i32; 2] {
        let (_, tu, tv) = self.axis.frame();
        [self.source_box[0][tu], self.source_box[0][tv]]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub surface_thickness: u32,
    pub max_passes: u32,
    pub block_align: u32,
    pub max_dimension: u32,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            surface_thickness: 4,
            max_passes: 4,
            block_align: 16,
            max_dimension: 8192,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.surface_thickness == 0 || self.max_passes == 0 || self.block_align == 0 {
            return Err(Error::contract(
                "projection",
                "surface_thickness, max_passes and block_align must be >= 1",
            ));
        }
        if self.max_dimension < self.block_align {
            return Err(Error::contract("projection", "max_dimension below block_align"));
        }
        Ok(())
    }
}

/// Occupancy, geometry and attribute maps of one cloud plus the bookkeeping
/// needed to go back to 3D.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AtlasBundle {
    pub width: usize,
    pub height: usize,
    pub block_align: u32,
    pub occupancy: Mask,
    /// Depth relative to the patch `depth_offset`, row-major.
    pub geometry: Vec<u16>,
    pub attribute: Raster,
    /// Point index per pixel, row-major, [`NONE`] where unoccupied.
    pub correspondence: Vec<u32>,
    pub leftovers: Vec<u32>,
    /// Full records of the leftover points, in `leftovers` order.
    pub leftover_points: Vec<Point>,
    pub placements: Vec<PatchPlacement>,
    pub source_point_count: usize,
    pub bit_depth: u32,
}

struct Patch {
    axis: Axis,
    direction: Direction,
    pass_index: u32,
    members: Vec<u32>,
}

/// Near and far layers of one axis over the currently unassigned points.
fn capture_axis(
    pts: &[Point],
    unassigned: &[bool],
    axis: Axis,
    thickness: i32,
) -> (Vec<u32>, Vec<u32>) {
    let (d, tu, tv) = axis.frame();
    let mut lo = [i32::MAX; 2];
    let mut hi = [i32::MIN; 2];
    for (p, _) in pts.iter().zip(unassigned).filter(|(_, &u)| u) {
        let c = p.coords();
        lo = [lo[0].min(c[tu]), lo[1].min(c[tv])];
        hi = [hi[0].max(c[tu]), hi[1].max(c[tv])];
    }
    if lo[0] > hi[0] {
        return (Vec::new(), Vec::new());
    }
    let w = (hi[0] - lo[0] + 1) as usize;
    let h = (hi[1] - lo[1] + 1) as usize;
    let cell = |c: &[i32; 3]| (c[tv] - lo[1]) as usize * w + (c[tu] - lo[0]) as usize;

    let mut near = vec![NONE; w * h];
    for (i, p) in pts.iter().enumerate().filter(|(i, _)| unassigned[*i]) {
        let c = p.coords();
        let k = cell(&c);
        if near[k] == NONE || c[d] < pts[near[k] as usize].coords()[d] {
            near[k] = i as u32;
        }
    }
    let mut far = vec![NONE; w * h];
    for (i, p) in pts.iter().enumerate().filter(|(i, _)| unassigned[*i]) {
        let c = p.coords();
        let k = cell(&c);
        let n = near[k];
        if n == i as u32 {
            continue;
        }
        let nd = pts[n as usize].coords()[d];
        if c[d] > nd + thickness {
            continue;
        }
        if far[k] == NONE || c[d] > pts[far[k] as usize].coords()[d] {
            far[k] = i as u32;
        }
    }
    (
        near.into_iter().filter(|&i| i != NONE).collect(),
        far.into_iter().filter(|&i| i != NONE).collect(),
    )
}

fn round_up(v: u32, a: u32) -> u32 {
    v.div_ceil(a) * a
}

/// Projects `pc` into an atlas. Deterministic for fixed input and config.
pub fn project(pc: &PointCloud, cfg: &ProjectionConfig) -> Result<AtlasBundle> {
    cfg.validate()?;
    if pc.is_empty() {
        return Err(Error::contract("projection", "cannot project an empty cloud"));
    }
    let pts = pc.points();
    let n = pts.len();
    if n >= NONE as usize {
        return Err(Error::Capacity(format!("{n} points exceed the u32 index space")));
    }
    let thickness = cfg.surface_thickness as i32;
    let mut unassigned = vec![true; n];
    let mut remaining = n;
    let mut patches = Vec::new();

    'passes: for pass in 0..cfg.max_passes {
        for axis in Axis::ALL {
            if remaining == 0 {
                break 'passes;
            }
            let (near, far) = capture_axis(pts, &unassigned, axis, thickness);
            for (direction, members) in [(Direction::Near, near), (Direction::Far, far)] {
                if members.is_empty() {
                    continue;
                }
                for &i in &members {
                    unassigned[i as usize] = false;
                }
                remaining -= members.len();
                patches.push(Patch {
                    axis,
                    direction,
                    pass_index: pass,
                    members,
                });
            }
        }
    }

    // Pack patches top to bottom; start a new column when the height budget runs out.
    let align = cfg.block_align;
    let mut placements = Vec::with_capacity(patches.len());
    let (mut col_u, mut col_w, mut cur_v, mut max_v) = (0u32, 0u32, 0u32, 0u32);
    for patch in &patches {
        let (d, tu, tv) = patch.axis.frame();
        let mut lo = [i32::MAX; 3];
        let mut hi = [i32::MIN; 3];
        for &i in &patch.members {
            let c = pts[i as usize].coords();
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        let pw = (hi[tu] - lo[tu] + 1) as u32;
        let ph = (hi[tv] - lo[tv] + 1) as u32;
        if hi[d] - lo[d] > u16::MAX as i32 {
            return Err(Error::Capacity(format!(
                "patch depth range {} exceeds 16-bit geometry",
                hi[d] - lo[d]
            )));
        }
        let (aw, ah) = (round_up(pw, align), round_up(ph, align));
        if ah > cfg.max_dimension || aw > cfg.max_dimension {
            return Err(Error::Capacity(format!(
                "patch {pw}x{ph} exceeds max atlas dimension {}",
                cfg.max_dimension
            )));
        }
        if cur_v + ah > cfg.max_dimension {
            col_u += col_w;
            col_w = 0;
            cur_v = 0;
        }
        placements.push(PatchPlacement {
            axis: patch.axis,
            direction: patch.direction,
            pass_index: patch.pass_index,
            atlas_origin: [col_u, cur_v],
            size: [pw, ph],
            source_box: [lo, hi],
            depth_offset: lo[d],
        });
        col_w = col_w.max(aw);
        cur_v += ah;
        max_v = max_v.max(cur_v);
    }
    let width = col_u + col_w;
    if width > cfg.max_dimension {
        return Err(Error::Capacity(format!(
            "atlas width {width} exceeds max dimension {}",
            cfg.max_dimension
        )));
    }
    let (width, height) = (width.max(align) as usize, max_v.max(align) as usize);

    let mut occupancy = Mask::new(width, height);
    let mut geometry = vec![0u16; width * height];
    let mut attribute = Raster::new(width, height, 3);
    let mut correspondence = vec![NONE; width * height];
    for (patch, pl) in patches.iter().zip(&placements) {
        let (d, tu, tv) = patch.axis.frame();
        let t0 = pl.tangent_origin();
        for &i in &patch.members {
            let p = &pts[i as usize];
            let c = p.coords();
            let u = pl.atlas_origin[0] as usize + (c[tu] - t0[0]) as usize;
            let v = pl.atlas_origin[1] as usize + (c[tv] - t0[1]) as usize;
            let k = v * width + u;
            debug_assert_eq!(correspondence[k], NONE);
            correspondence[k] = i;
            occupancy.data[k] = true;
            geometry[k] = (c[d] - pl.depth_offset) as u16;
            attribute.pixel_mut(u, v).copy_from_slice(&p.rgb());
        }
    }
    let leftovers: Vec<u32> = (0..n as u32).filter(|&i| unassigned[i as usize]).collect();
    let leftover_points = leftovers.iter().map(|&i| pts[i as usize]).collect();
    Ok(AtlasBundle {
        width,
        height,
        block_align: align,
        occupancy,
        geometry,
        attribute,
        correspondence,
        leftovers,
        leftover_points,
        placements,
        source_point_count: n,
        bit_depth: pc.bit_depth(),
    })
}

/// Recolors `pc` from an attribute map laid out like `atlas`. Leftover points
/// keep their original color.
pub fn back_project(pc: &PointCloud, atlas: &AtlasBundle, enhanced: &Raster) -> Result<PointCloud> {
    if enhanced.width != atlas.width || enhanced.height != atlas.height || enhanced.channels != 3 {
        return Err(Error::contract(
            "projection",
            format!(
                "attribute map {}x{}x{} does not match atlas {}x{}x3",
                enhanced.width, enhanced.height, enhanced.channels, atlas.width, atlas.height
            ),
        ));
    }
    if atlas.source_point_count != pc.len() {
        return Err(Error::contract(
            "projection",
            format!(
                "atlas was built from {} points, cloud has {}",
                atlas.source_point_count,
                pc.len()
            ),
        ));
    }
    let mut colors = pc.colors();
    for (k, &idx) in atlas.correspondence.iter().enumerate() {
        if idx != NONE {
            let px = &enhanced.data[k * 3..k * 3 + 3];
            colors[idx as usize] = [px[0], px[1], px[2]];
        }
    }
    Ok(pc.with_colors(&colors))
}

/// Decoder-side inverse: rebuilds the full cloud (original order) from the
/// maps alone, taking colors from `attribute`.
pub fn reconstruct(atlas: &AtlasBundle, attribute: &Raster) -> Result<PointCloud> {
    if attribute.width != atlas.width || attribute.height != atlas.height || attribute.channels != 3
    {
        return Err(Error::contract("projection", "attribute map does not match atlas"));
    }
    let mut slots: Vec<Option<Point>> = vec![None; atlas.source_point_count];
    for pl in &atlas.placements {
        let (d, tu, tv) = pl.axis.frame();
        let t0 = pl.tangent_origin();
        for dv in 0..pl.size[1] as usize {
            for du in 0..pl.size[0] as usize {
                let u = pl.atlas_origin[0] as usize + du;
                let v = pl.atlas_origin[1] as usize + dv;
                let k = v * atlas.width + u;
                let idx = atlas.correspondence[k];
                if idx == NONE {
                    continue;
                }
                let mut c = [0i32; 3];
                c[d] = atlas.geometry[k] as i32 + pl.depth_offset;
                c[tu] = t0[0] + du as i32;
                c[tv] = t0[1] + dv as i32;
                let px = attribute.pixel(u, v);
                let slot = slots.get_mut(idx as usize).ok_or_else(|| {
                    Error::contract("projection", format!("pixel index {idx} out of range"))
                })?;
                *slot = Some(Point::new(c[0], c[1], c[2], px[0], px[1], px[2]));
            }
        }
    }
    for (&i, p) in atlas.leftovers.iter().zip(&atlas.leftover_points) {
        slots[i as usize] = Some(*p);
    }
    let points = slots
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            p.ok_or_else(|| Error::contract("projection", format!("point {i} missing from maps")))
        })
        .collect::<Result<Vec<_>>>()?;
    PointCloud::new(points)
}
