//! End-to-end attribute path for one or more clouds: project, pad, degrade,
//! enhance, reconstruct and score.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! <cloud>/atlas/            occupancy, geometry, attribute, correspondence, atlas.json
//! <cloud>/padded.png        attribute map as handed to the codec
//! <cloud>/q<QP>/degraded.png, degraded.ply
//! <cloud>/q<QP>/enhanced.png, enhanced.ply   (only with a checkpoint)
//! results.csv, results.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec_sim::{Codec, STANDARD_QPS};
use crate::error::{Error, Result};
use crate::metrics::{psnr_2d, psnr_2d_full_frame, psnr_3d_color, write_report, QualityRow};
use crate::model::{enhance, EnhanceOptions, ModelHandle};
use crate::padding::{pad, MaskedImage, RefineOptions};
use crate::pointcloud::{load_ply, save_ply, synth_cloud, PointCloud, SynthKind};
use crate::projection::{project, reconstruct, write_atlas, AtlasBundle, ProjectionConfig};
use crate::raster::{write_rgb_png, Raster};

/// A generated input cloud, written on the command line as `kind:size[:seed]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub size: usize,
    /// Falls back to the run seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl SynthSpec {
    pub fn name(&self, run_seed: u64) -> String {
        let kind = serde_json::to_value(self.kind).ok();
        let kind = kind.as_ref().and_then(|v| v.as_str()).unwrap_or("synth");
        format!("{kind}_{}_s{}", self.size, self.seed.unwrap_or(run_seed))
    }
}

impl FromStr for SynthSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Config(format!("synthetic cloud `{s}` is not kind:size[:seed]"));
        if !(2..=3).contains(&parts.len()) {
            return Err(bad());
        }
        Ok(SynthSpec {
            kind: parts[0].parse()?,
            size: parts[1].parse().map_err(|_| bad())?,
            seed: parts.get(2).map(|v| v.parse()).transpose().map_err(|_| bad())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub inputs: Vec<PathBuf>,
    pub synth: Vec<SynthSpec>,
    pub qps: Vec<i32>,
    pub projection: ProjectionConfig,
    pub codec: Codec,
    pub refine: bool,
    pub refine_options: RefineOptions,
    /// Without a checkpoint only the degraded baseline is produced.
    pub checkpoint: Option<PathBuf>,
    pub enhance: EnhanceOptions,
    /// Score 2D PSNR over the whole frame instead of occupied pixels.
    pub full_frame: bool,
    pub binary_ply: bool,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            inputs: Vec::new(),
            synth: Vec::new(),
            qps: STANDARD_QPS.to_vec(),
            projection: ProjectionConfig::default(),
            codec: Codec::default(),
            refine: true,
            refine_options: RefineOptions::default(),
            checkpoint: None,
            enhance: EnhanceOptions::default(),
            full_frame: false,
            binary_ply: false,
            out_dir: PathBuf::from("pcce-out"),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.qps.is_empty() {
            return Err(Error::Config("qp list must be nonempty".into()));
        }
        if self.inputs.is_empty() && self.synth.is_empty() {
            return Err(Error::Config("no input cloud given".into()));
        }
        let missing = self
            .inputs
            .iter()
            .chain(self.checkpoint.as_ref())
            .find(|p| !p.exists());
        if let Some(p) = missing {
            return Err(Error::Config(format!("{} does not exist", p.display())));
        }
        self.projection.validate()?;
        for &qp in &self.qps {
            crate::codec_sim::CodecConfig { qp, ..self.codec.config.clone() }.validate()?;
        }
        let mut names: Vec<String> = self.clouds_names();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("two inputs share the same output name".into()));
        }
        Ok(())
    }

    fn clouds_names(&self) -> Vec<String> {
        self.inputs
            .iter()
            .map(|p| cloud_name(p))
            .chain(self.synth.iter().map(|s| s.name(self.seed)))
            .collect()
    }
}

fn cloud_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "cloud".into())
}

/// Products of one cloud at one QP.
#[derive(Clone, Debug)]
pub struct QpResult {
    pub degraded: Raster,
    pub enhanced: Option<Raster>,
    pub row: QualityRow,
}

/// Runs `cloud` through every QP. Nothing is written to disk.
pub fn process_cloud(
    name: &str,
    pc: &PointCloud,
    cfg: &PipelineConfig,
    model: Option<&ModelHandle>,
) -> Result<(AtlasBundle, Raster, Vec<QpResult>)> {
    let atlas = project(pc, &cfg.projection).map_err(Error::at("projection", name))?;
    let padded = MaskedImage::new(atlas.attribute.clone(), atlas.occupancy.clone())
        .and_then(|m| pad(&m, cfg.refine, &cfg.refine_options))
        .map_err(Error::at("padding", name))?;
    let score_2d = |test: &Raster| {
        if cfg.full_frame {
            psnr_2d_full_frame(&padded, test)
        } else {
            psnr_2d(&atlas.attribute, test, &atlas.occupancy)
        }
        .map_err(Error::at("metrics", name))
    };
    let score_3d = |attribute: &Raster| {
        let rec = reconstruct(&atlas, attribute).map_err(Error::at("reconstruction", name))?;
        psnr_3d_color(pc, &rec).map_err(Error::at("metrics", name))
    };
    let results = cfg
        .qps
        .par_iter()
        .map(|&qp| {
            let item = format!("{name} at QP {qp}");
            let degraded = cfg.codec.apply(&padded, qp).map_err(Error::at("codec", item.clone()))?;
            let enhanced = model
                .map(|m| enhance(m, &degraded, &atlas.occupancy, &cfg.enhance))
                .transpose()
                .map_err(Error::at("enhancement", item))?;
            let row = QualityRow {
                sequence: name.to_string(),
                qp,
                psnr2d_noisy: Some(score_2d(&degraded)?),
                psnr2d_enhanced: enhanced.as_ref().map(score_2d).transpose()?,
                psnr3d_input: Some(score_3d(&degraded)?),
                psnr3d_output: enhanced.as_ref().map(score_3d).transpose()?,
            };
            Ok(QpResult { degraded, enhanced, row })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((atlas, padded, results))
}

fn write_cloud(dir: &Path, atlas: &AtlasBundle, padded: &Raster, results: &[QpResult], binary: bool) -> Result<()> {
    write_atlas(atlas, &dir.join("atlas"))?;
    write_rgb_png(&dir.join("padded.png"), padded)?;
    for r in results {
        let qdir = dir.join(format!("q{}", r.row.qp));
        fs::create_dir_all(&qdir).map_err(|e| Error::io(&qdir, e))?;
        let maps = std::iter::once(("degraded", &r.degraded)).chain(r.enhanced.as_ref().map(|e| ("enhanced", e)));
        for (tag, map) in maps {
            write_rgb_png(&qdir.join(format!("{tag}.png")), map)?;
            save_ply(&reconstruct(atlas, map)?, &qdir.join(format!("{tag}.ply")), binary)?;
        }
    }
    Ok(())
}

/// Runs the whole pipeline and writes every artifact plus the results table.
/// Artifacts of clouds finished before a failure stay on disk.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Vec<QualityRow>> {
    cfg.validate()?;
    let model = cfg
        .checkpoint
        .as_deref()
        .map(|p| ModelHandle::load(p).map_err(Error::at("checkpoint", p.display().to_string())))
        .transpose()?;
    if model.is_none() {
        log::info!("no checkpoint given; producing the degraded baseline only");
    }
    let mut rows = Vec::new();
    let sources = cfg
        .inputs
        .iter()
        .map(|p| (cloud_name(p), Source::Ply(p)))
        .chain(cfg.synth.iter().map(|s| (s.name(cfg.seed), Source::Synth(s))));
    for (name, src) in sources {
        let pc = match src {
            Source::Ply(p) => load_ply(p),
            Source::Synth(s) => synth_cloud(s.kind, s.size, s.seed.unwrap_or(cfg.seed)),
        }
        .map_err(Error::at("input", name.clone()))?;
        log::info!("{name}: {} points", pc.len());
        let (atlas, padded, results) = process_cloud(&name, &pc, cfg, model.as_ref())?;
        write_cloud(&cfg.out_dir.join(&name), &atlas, &padded, &results, cfg.binary_ply)
            .map_err(Error::at("output", name.clone()))?;
        rows.extend(results.into_iter().map(|r| r.row));
    }
    write_report(&rows, &cfg.out_dir).map_err(Error::at("report", cfg.out_dir.display().to_string()))?;
    Ok(rows)
}

enum Source<'a> {
    Ply(&'a PathBuf),
    Synth(&'a SynthSpec),
}
