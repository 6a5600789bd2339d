//! Training corpora: padded clean maps paired with codec-degraded copies.
//!
//! On disk a corpus is `<root>/<split>/<id>_{noisy|clean|mask}.png` plus
//! `<root>/manifest.json`.

mod portrait;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec_sim::Codec;
use crate::error::{Error, Result};
use crate::padding::{pad, MaskedImage, RefineOptions};
use crate::pointcloud::PointCloud;
use crate::projection::{project, ProjectionConfig};
use crate::raster::{read_mask_png, read_rgb_png, write_mask_png, write_rgb_png, Mask, Raster};

pub use portrait::{synth_portrait, MAX_COVERAGE, MIN_COVERAGE};

pub const GENERATOR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Portrait,
    Pcmaps,
    Synth,
}

impl CorpusKind {
    /// Training phase the corpus feeds.
    pub fn phase(self) -> u8 {
        match self {
            CorpusKind::Pcmaps => 2,
            CorpusKind::Portrait | CorpusKind::Synth => 1,
        }
    }
}

impl std::str::FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "portrait" => Ok(CorpusKind::Portrait),
            "pcmaps" => Ok(CorpusKind::Pcmaps),
            "synth" => Ok(CorpusKind::Synth),
            other => Err(Error::Config(format!("unknown corpus kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMeta {
    pub source: String,
    pub qp: i32,
    pub phase: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingPair {
    pub noisy: Raster,
    pub clean: Raster,
    pub mask: Mask,
    pub meta: PairMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub source: String,
    pub qp: i32,
    pub split: Split,
    pub noisy: String,
    pub clean: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub source: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub kind: CorpusKind,
    pub generator_version: u32,
    pub seed: u64,
    pub qps: Vec<i32>,
    pub entries: Vec<ManifestEntry>,
    pub skipped: Vec<Skipped>,
}

impl CorpusManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Knobs shared by all corpus builders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildOptions {
    pub qps: Vec<i32>,
    pub seed: u64,
    /// Fraction of sources held out for validation.
    pub val_fraction: f64,
    pub refine: bool,
    pub refine_options: RefineOptions,
    pub codec: Codec,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            qps: vec![42],
            seed: 0,
            val_fraction: 0.2,
            refine: true,
            refine_options: RefineOptions::default(),
            codec: Codec::default(),
        }
    }
}

impl BuildOptions {
    fn validate(&self) -> Result<()> {
        if self.qps.is_empty() {
            return Err(Error::contract("datasets", "qp list must be nonempty"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::contract("datasets", "val fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Pads the masked portrait into the clean target and degrades it.
/// Returns `None` (with a warning) when the mask is empty.
pub fn build_portrait_pair(image: &Raster, mask: &Mask, qp: i32, source: &str, opts: &BuildOptions) -> Result<Option<TrainingPair>> {
    if mask.is_empty() {
        log::warn!("skipping {source}: mask has no occupied pixel");
        return Ok(None);
    }
    let rgb = if image.channels == 3 {
        image.clone()
    } else {
        return Err(Error::contract("datasets", format!("{source}: expected an RGB image")));
    };
    let masked = MaskedImage::new(rgb, mask.clone())?;
    let clean = pad(&masked, opts.refine, &opts.refine_options)?;
    let noisy = opts.codec.apply(&clean, qp)?;
    Ok(Some(TrainingPair {
        noisy,
        clean,
        mask: mask.clone(),
        meta: PairMeta {
            source: source.to_string(),
            qp,
            phase: 1,
        },
    }))
}

/// Deterministic source → split assignment.
fn assign_splits(sources: &[String], seed: u64, val_fraction: f64) -> Vec<(String, Split)> {
    let unique: BTreeSet<&String> = sources.iter().collect();
    let mut order: Vec<&String> = unique.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5911));
    let n_val = if order.len() >= 2 && val_fraction > 0.0 {
        ((order.len() as f64 * val_fraction).round() as usize).clamp(1, order.len() - 1)
    } else {
        0
    };
    let mut out: Vec<(String, Split)> = order
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), if i < n_val { Split::Val } else { Split::Train }))
        .collect();
    out.sort();
    out
}

/// Writes pairs under `root` and returns (and writes) the manifest.
pub fn write_corpus(root: &Path, kind: CorpusKind, pairs: &[TrainingPair], skipped: Vec<Skipped>, opts: &BuildOptions) -> Result<CorpusManifest> {
    let sources: Vec<String> = pairs.iter().map(|p| p.meta.source.clone()).collect();
    let splits = assign_splits(&sources, opts.seed, opts.val_fraction);
    let split_of = |s: &str| splits[splits.binary_search_by(|(k, _)| k.as_str().cmp(s)).expect("assigned")].1;
    let mut entries = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let split = split_of(&pair.meta.source);
        let id = format!("{}_q{}", pair.meta.source, pair.meta.qp);
        let dir = root.join(split.dir());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let rel = |what: &str| format!("{}/{id}_{what}.png", split.dir());
        let entry = ManifestEntry {
            id: id.clone(),
            source: pair.meta.source.clone(),
            qp: pair.meta.qp,
            split,
            noisy: rel("noisy"),
            clean: rel("clean"),
            mask: rel("mask"),
        };
        write_rgb_png(&root.join(&entry.noisy), &pair.noisy)?;
        write_rgb_png(&root.join(&entry.clean), &pair.clean)?;
        write_mask_png(&root.join(&entry.mask), &pair.mask)?;
        entries.push(entry);
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let manifest = CorpusManifest {
        kind,
        generator_version: GENERATOR_VERSION,
        seed: opts.seed,
        qps: opts.qps.clone(),
        entries,
        skipped,
    };
    let path = root.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<CorpusManifest> {
    let path = root.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_pair(root: &Path, e: &ManifestEntry, phase: u8) -> Result<TrainingPair> {
    let pair = TrainingPair {
        noisy: read_rgb_png(&root.join(&e.noisy))?,
        clean: read_rgb_png(&root.join(&e.clean))?,
        mask: read_mask_png(&root.join(&e.mask))?,
        meta: PairMeta {
            source: e.source.clone(),
            qp: e.qp,
            phase,
        },
    };
    if !pair.noisy.same_dims(&pair.clean) || !pair.mask.matches(&pair.clean) {
        return Err(Error::contract("datasets", format!("pair {} has mismatched dimensions", e.id)));
    }
    Ok(pair)
}

/// Every (source, qp) job, built in parallel and returned in job order.
fn build_all<F>(jobs: Vec<(String, i32)>, f: F) -> Result<(Vec<TrainingPair>, Vec<Skipped>)>
where
    F: Fn(&str, i32) -> Result<std::result::Result<TrainingPair, String>> + Sync,
{
    let results: Vec<_> = jobs.par_iter().map(|(s, qp)| f(s, *qp)).collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for ((source, _), r) in jobs.iter().zip(results) {
        match r {
            Ok(p) => pairs.push(p),
            Err(reason) => {
                if !skipped.iter().any(|s: &Skipped| &s.source == source) {
                    skipped.push(Skipped {
                        source: source.clone(),
                        reason,
                    });
                }
            }
        }
    }
    Ok((pairs, skipped))
}

/// `n` generated portraits of side `size`, one pair per QP.
pub fn synth_portrait_corpus(root: &Path, n: usize, size: usize, opts: &BuildOptions) -> Result<CorpusManifest> {
    opts.validate()?;
    if n == 0 {
        return Err(Error::contract("datasets", "portrait count must be at least 1"));
    }
    if size < 16 {
        return Err(Error::contract("datasets", "portrait size must be at least 16"));
    }
    let jobs = (0..n).flat_map(|i| opts.qps.iter().map(move |&q| (format!("synth{i:05}"), q))).collect();
    let (pairs, skipped) = build_all(jobs, |source, qp| {
        let index: u64 = source[5..].parse().expect("generated id");
        let (img, mask) = synth_portrait(size, opts.seed.wrapping_mul(0x9E37_79B9).wrapping_add(index));
        Ok(build_portrait_pair(&img, &mask, qp, source, opts)?.ok_or_else(|| "empty mask".to_string()))
    })?;
    write_corpus(root, CorpusKind::Synth, &pairs, skipped, opts)
}

/// Portraits from `<input>/images/<id>.png` with masks `<input>/masks/<id>.png`.
pub fn build_portrait_corpus(root: &Path, input: &Path, opts: &BuildOptions) -> Result<CorpusManifest> {
    opts.validate()?;
    let dir = input.join("images");
    let mut ids: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::contract("datasets", format!("no PNG images in {}", dir.display())));
    }
    let jobs = ids.iter().flat_map(|id| opts.qps.iter().map(move |&q| (id.clone(), q))).collect();
    let (pairs, skipped) = build_all(jobs, |id, qp| {
        let img = read_rgb_png(&input.join("images").join(format!("{id}.png")))?;
        let mask_path = input.join("masks").join(format!("{id}.png"));
        let mask = read_mask_png(&mask_path)?;
        if !mask.matches(&img) {
            return Err(Error::contract("datasets", format!("{id}: image and mask sizes differ")));
        }
        Ok(build_portrait_pair(&img, &mask, qp, id, opts)?.ok_or_else(|| "empty mask".to_string()))
    })?;
    write_corpus(root, CorpusKind::Portrait, &pairs, skipped, opts)
}

/// Projected attribute maps of named clouds, padded then degraded per QP.
pub fn build_pc_map_corpus(root: &Path, clouds: &[(String, PointCloud)], cfg: &ProjectionConfig, opts: &BuildOptions) -> Result<CorpusManifest> {
    opts.validate()?;
    if clouds.is_empty() {
        return Err(Error::contract("datasets", "cloud list must be nonempty"));
    }
    // project and pad once per cloud, degrade per QP
    let padded: Vec<std::result::Result<(Raster, Mask), String>> = clouds
        .par_iter()
        .map(|(name, pc)| match project(pc, cfg) {
            Ok(atlas) => {
                let masked = MaskedImage::new(atlas.attribute.clone(), atlas.occupancy.clone())?;
                Ok(Ok((pad(&masked, opts.refine, &opts.refine_options)?, atlas.occupancy)))
            }
            Err(e @ Error::Capacity(_)) => {
                log::warn!("skipping {name}: {e}");
                Ok(Err(e.to_string()))
            }
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let jobs = clouds.iter().flat_map(|(n, _)| opts.qps.iter().map(move |&q| (n.clone(), q))).collect();
    let index_of = |name: &str| clouds.iter().position(|(n, _)| n == name).expect("known cloud");
    let (pairs, skipped) = build_all(jobs, |name, qp| match &padded[index_of(name)] {
        Ok((clean, mask)) => Ok(Ok(TrainingPair {
            noisy: opts.codec.apply(clean, qp)?,
            clean: clean.clone(),
            mask: mask.clone(),
            meta: PairMeta {
                source: name.to_string(),
                qp,
                phase: 2,
            },
        })),
        Err(reason) => Ok(Err(reason.clone())),
    })?;
    write_corpus(root, CorpusKind::Pcmaps, &pairs, skipped, opts)
}

/// Paths of a corpus's files, for hashing and cleanup.
pub fn corpus_files(root: &Path, m: &CorpusManifest) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = m
        .entries
        .iter()
        .flat_map(|e| [&e.noisy, &e.clean, &e.mask])
        .map(|p| root.join(p))
        .collect();
    v.push(root.join("manifest.json"));
    v
}
