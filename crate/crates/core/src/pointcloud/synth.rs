use std::f64::consts::TAU;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Surface voxels of a `size³` cube.
    CubeShell,
    /// Boundary voxels of the ball inscribed in a `size³` grid.
    SphereShell,
    /// Gently curved one-voxel sheet over a `size²` footprint with a strong color ramp.
    GradientSlab,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cube_shell" | "cube" => Ok(SynthKind::CubeShell),
            "sphere_shell" | "sphere" => Ok(SynthKind::SphereShell),
            "gradient_slab" | "slab" => Ok(SynthKind::GradientSlab),
            other => Err(Error::Config(format!("unknown synthetic cloud kind `{other}`"))),
        }
    }
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform value in [-1, 1] keyed by seed, lattice point and channel.
pub(crate) fn lattice(seed: u64, x: i64, y: i64, z: i64, ch: u64) -> f64 {
    let mut h = splitmix(seed ^ ch.wrapping_mul(0x5851_F42D_4C95_7F2D));
    h = splitmix(h ^ x as u64);
    h = splitmix(h ^ (y as u64).rotate_left(21));
    h = splitmix(h ^ (z as u64).rotate_left(42));
    (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinear value noise with lattice spacing `cell`.
pub(crate) fn value_noise(seed: u64, p: [f64; 3], cell: f64, ch: u64) -> f64 {
    let q = [p[0] / cell, p[1] / cell, p[2] / cell];
    let base = q.map(|v| v.floor());
    let f = [
        smooth(q[0] - base[0]),
        smooth(q[1] - base[1]),
        smooth(q[2] - base[2]),
    ];
    let (bx, by, bz) = (base[0] as i64, base[1] as i64, base[2] as i64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
        let w = (if dx == 1 { f[0] } else { 1.0 - f[0] })
            * (if dy == 1 { f[1] } else { 1.0 - f[1] })
            * (if dz == 1 { f[2] } else { 1.0 - f[2] });
        acc += w * lattice(seed, bx + dx, by + dy, bz + dz, ch);
    }
    acc
}

fn texture(seed: u64, p: [i32; 3], size: usize, ramp: f64) -> [u8; 3] {
    let s = size as f64;
    let pf = [p[0] as f64, p[1] as f64, p[2] as f64];
    let u = pf.map(|v| v / s.max(1.0));
    let base = [
        70.0 + ramp * 120.0 * u[0],
        90.0 + ramp * 90.0 * u[1],
        110.0 + ramp * 100.0 * u[2] - 40.0 * u[0],
    ];
    let period = 5.0 + (splitmix(seed) % 5) as f64;
    let stripe = (TAU * (pf[0] + 2.0 * pf[1] + 0.5 * pf[2]) / period).sin();
    let fine_seed = splitmix(seed ^ 0xF17E);
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let low = value_noise(seed, pf, (s / 3.0).max(2.0), c as u64);
        let mid = value_noise(seed, pf, (s / 10.0).max(1.5), 8 + c as u64);
        let fine = lattice(fine_seed, p[0] as i64, p[1] as i64, p[2] as i64, c as u64);
        let stripe_gain = [22.0, 12.0, 18.0][c];
        let v = base[c] + 45.0 * low + 20.0 * mid + stripe_gain * stripe + 5.0 * fine;
        *o = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}

fn cube_shell(size: i32) -> Vec<[i32; 3]> {
    let m = size - 1;
    let mut v = Vec::new();
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                if x == 0 || y == 0 || z == 0 || x == m || y == m || z == m {
                    v.push([x, y, z]);
                }
            }
        }
    }
    v
}

fn sphere_shell(size: i32) -> Vec<[i32; 3]> {
    let c = (size - 1) as f64 / 2.0;
    let r2 = (size as f64 / 2.0).powi(2);
    let inside = |x: i32, y: i32, z: i32| {
        if x < 0 || y < 0 || z < 0 || x >= size || y >= size || z >= size {
            return false;
        }
        let d = [(x as f64 - c), (y as f64 - c), (z as f64 - c)];
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= r2
    };
    let mut v = Vec::new();
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                if !inside(x, y, z) {
                    continue;
                }
                let boundary = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                    .iter()
                    .any(|&(dx, dy, dz)| !inside(x + dx, y + dy, z + dz));
                if boundary {
                    v.push([x, y, z]);
                }
            }
        }
    }
    v
}

fn gradient_slab(size: i32) -> Vec<[i32; 3]> {
    let amp = (size as f64 / 8.0).max(1.0);
    let mut v = Vec::new();
    for y in 0..size {
        for x in 0..size {
            let t = TAU * x as f64 / size as f64;
            let z = (amp * (1.0 + t.sin()) + 0.5 * amp * (1.0 + (TAU * y as f64 / size as f64).cos()))
                .round() as i32;
            v.push([x, y, z]);
        }
    }
    v
}

/// Deterministic synthetic content; the seed changes colors only.
pub fn synth_cloud(kind: SynthKind, size: usize, seed: u64) -> Result<PointCloud> {
    if size < 2 {
        return Err(Error::contract("pointcloud", format!("synthetic size {size} < 2")));
    }
    if size > 4096 {
        return Err(Error::contract("pointcloud", format!("synthetic size {size} > 4096")));
    }
    let s = size as i32;
    let (coords, ramp) = match kind {
        SynthKind::CubeShell => (cube_shell(s), 1.0),
        SynthKind::SphereShell => (sphere_shell(s), 1.0),
        SynthKind::GradientSlab => (gradient_slab(s), 1.6),
    };
    let points = coords
        .into_iter()
        .map(|p| {
            let c = texture(seed, p, size, ramp);
            Point::new(p[0], p[1], p[2], c[0], c[1], c[2])
        })
        .collect();
    PointCloud::new(points)
}
