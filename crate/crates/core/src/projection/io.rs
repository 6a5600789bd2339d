use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AtlasBundle, PatchPlacement};
use crate::error::{Error, Result};
use crate::pointcloud::Point;
use crate::raster::{self, Mask};

pub const ATLAS_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct AtlasMeta {
    format_version: u32,
    width: usize,
    height: usize,
    block_align: u32,
    bit_depth: u32,
    source_point_count: usize,
    placements: Vec<PatchPlacement>,
    leftovers: Vec<u32>,
    leftover_points: Vec<Point>,
}

/// Writes `occupancy.png`, `geometry.png`, `attribute.png`,
/// `correspondence.bin` and `atlas.json` into `dir`.
pub fn write_atlas(atlas: &AtlasBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    raster::write_mask_png(&dir.join("occupancy.png"), &atlas.occupancy)?;
    raster::write_gray16_png(&dir.join("geometry.png"), atlas.width, atlas.height, &atlas.geometry)?;
    raster::write_rgb_png(&dir.join("attribute.png"), &atlas.attribute)?;
    let mut corr = Vec::with_capacity(atlas.correspondence.len() * 4);
    for &c in &atlas.correspondence {
        corr.extend_from_slice(&c.to_le_bytes());
    }
    let p = dir.join("correspondence.bin");
    fs::write(&p, corr).map_err(|e| Error::io(&p, e))?;
    let meta = AtlasMeta {
        format_version: ATLAS_FORMAT_VERSION,
        width: atlas.width,
        height: atlas.height,
        block_align: atlas.block_align,
        bit_depth: atlas.bit_depth,
        source_point_count: atlas.source_point_count,
        placements: atlas.placements.clone(),
        leftovers: atlas.leftovers.clone(),
        leftover_points: atlas.leftover_points.clone(),
    };
    let p = dir.join("atlas.json");
    fs::write(&p, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&p, e))
}

pub fn read_atlas(dir: &Path) -> Result<AtlasBundle> {
    let p = dir.join("atlas.json");
    let meta: AtlasMeta =
        serde_json::from_slice(&fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
    if meta.format_version != ATLAS_FORMAT_VERSION {
        return Err(Error::Unsupported(format!(
            "atlas format version {} (expected {ATLAS_FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let (w, h) = (meta.width, meta.height);
    let dims = |what: &str, ww: usize, hh: usize| -> Result<()> {
        if (ww, hh) != (w, h) {
            return Err(Error::contract(
                "projection",
                format!("{what} is {ww}x{hh}, atlas.json declares {w}x{h}"),
            ));
        }
        Ok(())
    };
    let occupancy: Mask = raster::read_mask_png(&dir.join("occupancy.png"))?;
    dims("occupancy.png", occupancy.width, occupancy.height)?;
    let (gw, gh, geometry) = raster::read_gray16_png(&dir.join("geometry.png"))?;
    dims("geometry.png", gw, gh)?;
    let attribute = raster::read_rgb_png(&dir.join("attribute.png"))?;
    dims("attribute.png", attribute.width, attribute.height)?;
    let p = dir.join("correspondence.bin");
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    if bytes.len() != w * h * 4 {
        return Err(Error::contract("projection", "correspondence.bin size mismatch"));
    }
    let correspondence = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(AtlasBundle {
        width: w,
        height: h,
        block_align: meta.block_align,
        occupancy,
        geometry,
        attribute,
        correspondence,
        leftovers: meta.leftovers,
        leftover_points: meta.leftover_points,
        placements: meta.placements,
        source_point_count: meta.source_point_count,
        bit_depth: meta.bit_depth,
    })
}
