//! The `pcce` command line. Each subcommand wraps one library operation;
//! configs are layered default < `--config` file < flags, and the effective
//! config is echoed to stderr before work starts.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::codec_sim::Codec;
use crate::datasets::{
    build_pc_map_corpus, build_portrait_corpus, synth_portrait_corpus, BuildOptions, CorpusKind, Split,
    GENERATOR_VERSION,
};
use crate::error::{Error, Result};
use crate::metrics::{psnr_2d, psnr_2d_full_frame, psnr_3d_color, read_rows, write_report, make_report};
use crate::model::{
    build_drunet_baseline, build_ldc_unet, enhance, EnhanceOptions, LdcUnetConfig, ModelHandle,
    CHECKPOINT_FORMAT_VERSION,
};
use crate::padding::{pad, MaskedImage, RefineOptions};
use crate::pipeline::{run_pipeline, PipelineConfig, SynthSpec};
use crate::pointcloud::{load_ply, save_ply, synth_cloud, PointCloud, SynthKind};
use crate::projection::{
    back_project, project, read_atlas, reconstruct, render_ortho, write_atlas, Axis, ProjectionConfig,
    ATLAS_FORMAT_VERSION,
};
use crate::raster::{read_mask_png, read_rgb_png, write_rgb_png};
use crate::training::{evaluate_checkpoint, initial_model, train_phase, PhaseConfig};

fn version() -> &'static str {
    Box::leak(
        format!(
            "{} (atlas format {ATLAS_FORMAT_VERSION}, checkpoint format {CHECKPOINT_FORMAT_VERSION}, corpus generator {GENERATOR_VERSION})",
            env!("CARGO_PKG_VERSION")
        )
        .into_boxed_str(),
    )
}

#[derive(Parser, Debug)]
#[command(name = "pcce", version = version(), about = "Point cloud attribute-map color enhancement")]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output (RUST_LOG overrides).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic voxel cloud.
    Synth(SynthArgs),
    /// Project a cloud into occupancy, geometry and attribute maps.
    Project(ProjectArgs),
    /// Rebuild a cloud from an atlas directory.
    Reconstruct(ReconstructArgs),
    /// Fill the unoccupied pixels of an attribute map.
    Pad(PadArgs),
    /// Run an attribute map through the codec.
    Degrade(DegradeArgs),
    /// Write a training corpus with its manifest.
    BuildDataset(BuildDatasetArgs),
    /// Train one phase.
    Train(TrainArgs),
    /// Enhance an attribute map with a checkpoint.
    Enhance(EnhanceArgs),
    /// Masked Y-PSNR of a checkpoint over a corpus split.
    Evaluate(EvaluateArgs),
    /// 3D color Y-PSNR between two clouds.
    Eval(EvalArgs),
    /// 2D Y-PSNR between two maps.
    #[command(name = "eval-2d")]
    Eval2d(Eval2dArgs),
    /// Print (and optionally write) the results table from JSON rows.
    Report(ReportArgs),
    /// Full project → pad → degrade → enhance → reconstruct → evaluate run.
    Pipeline(PipelineArgs),
    /// Orthographic preview of a cloud.
    Render(RenderArgs),
    /// Parameter counts of a checkpoint or of the reference architectures.
    Params(ParamsArgs),
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Synth(_) => "synth",
            Cmd::Project(_) => "project",
            Cmd::Reconstruct(_) => "reconstruct",
            Cmd::Pad(_) => "pad",
            Cmd::Degrade(_) => "degrade",
            Cmd::BuildDataset(_) => "build-dataset",
            Cmd::Train(_) => "train",
            Cmd::Enhance(_) => "enhance",
            Cmd::Evaluate(_) => "evaluate",
            Cmd::Eval(_) => "eval",
            Cmd::Eval2d(_) => "eval-2d",
            Cmd::Report(_) => "report",
            Cmd::Pipeline(_) => "pipeline",
            Cmd::Render(_) => "render",
            Cmd::Params(_) => "params",
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long, default_value = "cube_shell")]
    kind: String,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    binary: bool,
}

#[derive(Args, Debug, Serialize)]
struct ProjectionFlags {
    #[arg(long)]
    surface_thickness: Option<u32>,
    #[arg(long)]
    max_passes: Option<u32>,
    #[arg(long)]
    block_align: Option<u32>,
    #[arg(long)]
    max_dimension: Option<u32>,
}

impl ProjectionFlags {
    fn apply(&self, c: &mut ProjectionConfig) {
        set(&mut c.surface_thickness, self.surface_thickness);
        set(&mut c.max_passes, self.max_passes);
        set(&mut c.block_align, self.block_align);
        set(&mut c.max_dimension, self.max_dimension);
    }
}

#[derive(Args, Debug, Serialize)]
struct ProjectArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON projection config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    projection: ProjectionFlags,
}

#[derive(Args, Debug, Serialize)]
struct ReconstructArgs {
    #[arg(long)]
    maps: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Attribute map to color from (default: the atlas's own attribute.png).
    #[arg(long)]
    attribute: Option<PathBuf>,
    /// Recolor this cloud instead of rebuilding geometry from the maps.
    #[arg(long)]
    cloud: Option<PathBuf>,
    #[arg(long)]
    binary: bool,
}

#[derive(Args, Debug, Serialize)]
struct RefineFlags {
    /// Stop after push-pull.
    #[arg(long)]
    no_refine: bool,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
}

impl RefineFlags {
    fn apply(&self, refine: &mut bool, o: &mut RefineOptions) {
        if self.no_refine {
            *refine = false;
        }
        set(&mut o.tol, self.tol);
        set(&mut o.max_iter, self.max_iter);
    }
}

#[derive(Args, Debug, Serialize)]
struct PadArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    refine: RefineFlags,
}

#[derive(Args, Debug, Serialize)]
struct CodecFlags {
    #[arg(long)]
    block: Option<usize>,
    #[arg(long)]
    chroma_qp_offset: Option<i32>,
    /// External encoder command template with {input}, {output} and {qp}.
    #[arg(long)]
    external: Option<String>,
}

impl CodecFlags {
    fn apply(&self, c: &mut Codec) {
        set(&mut c.config.block, self.block);
        set(&mut c.config.chroma_qp_offset, self.chroma_qp_offset);
        if self.external.is_some() {
            c.external = self.external.clone();
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct DegradeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    qp: Option<i32>,
    /// JSON codec config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    codec: CodecFlags,
}

#[derive(Args, Debug, Serialize)]
struct BuildDatasetArgs {
    /// portrait, pcmaps or synth.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    out: PathBuf,
    /// Portrait folder (images/ + masks/), or PLY files and folders for pcmaps.
    #[arg(long, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Generated clouds for pcmaps, as kind:size[:seed].
    #[arg(long = "synth-cloud", num_args = 1..)]
    synth_cloud: Vec<String>,
    /// Number of generated portraits (synth).
    #[arg(long)]
    count: Option<usize>,
    /// Side of generated portraits (synth).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    qp: Vec<i32>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// JSON dataset config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    refine: RefineFlags,
    #[command(flatten)]
    codec: CodecFlags,
}

/// Everything `build-dataset` reads from a config file.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
#[serde(default)]
struct DatasetConfig {
    #[serde(flatten)]
    build: BuildOptions,
    projection: ProjectionConfig,
    count: usize,
    size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            build: BuildOptions::default(),
            projection: ProjectionConfig::default(),
            count: 200,
            size: 128,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    phase: u8,
    #[arg(long)]
    corpus: PathBuf,
    /// JSON phase config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Starting checkpoint (required for phase 2).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args, Debug, Serialize)]
struct TileFlags {
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
}

impl TileFlags {
    fn apply(&self, o: &mut EnhanceOptions) {
        set(&mut o.tile, self.tile);
        set(&mut o.overlap, self.overlap);
    }
}

#[derive(Args, Debug, Serialize)]
struct EnhanceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    attribute: PathBuf,
    #[arg(long)]
    occupancy: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    tiles: TileFlags,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// train or val.
    #[arg(long, default_value = "val")]
    split: String,
    #[command(flatten)]
    tiles: TileFlags,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct Eval2dArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    full_frame: bool,
}

#[derive(Args, Debug, Serialize)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Also write results.csv and results.json here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct PipelineArgs {
    /// JSON pipeline config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Generated clouds as kind:size[:seed].
    #[arg(long, num_args = 1..)]
    synth: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    qp: Vec<i32>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to a fresh directory per run.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    full_frame: bool,
    #[arg(long)]
    binary: bool,
    #[command(flatten)]
    projection: ProjectionFlags,
    #[command(flatten)]
    refine: RefineFlags,
    #[command(flatten)]
    codec: CodecFlags,
    #[command(flatten)]
    tiles: TileFlags,
}

#[derive(Args, Debug, Serialize)]
struct RenderArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "z")]
    axis: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ParamsArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Recursive object merge; a tagged object whose `kind` changes is replaced.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) if b.get("kind").is_none() || o.get("kind").is_none() || b.get("kind") == o.get("kind") => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `base` overlaid with the JSON file at `path`, if any.
fn layered<T: Serialize + DeserializeOwned>(base: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(base) };
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let over: Value = serde_json::from_slice(&text)?;
    if !over.is_object() {
        return Err(Error::Config(format!("{}: config must be a JSON object", path.display())));
    }
    let mut v = serde_json::to_value(base)?;
    merge(&mut v, over);
    Ok(serde_json::from_value(v)?)
}

fn dump(cmd: &str, cfg: &impl Serialize) {
    match serde_json::to_string(cfg) {
        Ok(s) => eprintln!("pcce {cmd}: effective config {s}"),
        Err(e) => eprintln!("pcce {cmd}: effective config unavailable: {e}"),
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn collect_plys(paths: &[PathBuf]) -> Result<Vec<(String, PointCloud)>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")))
                .collect();
            inner.sort();
            files.extend(inner);
        } else {
            files.push(p.clone());
        }
    }
    files
        .iter()
        .map(|f| {
            let name = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, load_ply(f)?))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Synth(a) => {
            let seed = seed.unwrap_or(0);
            dump("synth", &serde_json::json!({ "args": &a, "seed": seed }));
            let kind: SynthKind = a.kind.parse()?;
            let pc = synth_cloud(kind, a.size, seed)?;
            save_ply(&pc, &a.out, a.binary)?;
            println!("{} points", pc.len());
        }
        Cmd::Project(a) => {
            let mut cfg = layered(ProjectionConfig::default(), a.config.as_deref())?;
            a.projection.apply(&mut cfg);
            dump("project", &cfg);
            let pc = load_ply(&a.input)?;
            let atlas = project(&pc, &cfg)?;
            write_atlas(&atlas, &a.out_dir)?;
            println!(
                "{}x{} atlas, {} patches, {} leftover points",
                atlas.width,
                atlas.height,
                atlas.placements.len(),
                atlas.leftovers.len()
            );
        }
        Cmd::Reconstruct(a) => {
            dump("reconstruct", &a);
            let atlas = read_atlas(&a.maps)?;
            let attribute = match &a.attribute {
                Some(p) => read_rgb_png(p)?,
                None => atlas.attribute.clone(),
            };
            let pc = match &a.cloud {
                Some(p) => back_project(&load_ply(p)?, &atlas, &attribute)?,
                None => reconstruct(&atlas, &attribute)?,
            };
            save_ply(&pc, &a.out, a.binary)?;
            println!("{} points", pc.len());
        }
        Cmd::Pad(a) => {
            let (mut refine, mut opts) = (true, RefineOptions::default());
            a.refine.apply(&mut refine, &mut opts);
            dump("pad", &serde_json::json!({ "args": &a, "refine": refine, "refine_options": opts }));
            let img = MaskedImage::new(read_rgb_png(&a.image)?, read_mask_png(&a.mask)?)?;
            write_rgb_png(&a.out, &pad(&img, refine, &opts)?)?;
        }
        Cmd::Degrade(a) => {
            let mut codec = layered(Codec::default(), a.config.as_deref())?;
            a.codec.apply(&mut codec);
            set(&mut codec.config.qp, a.qp);
            dump("degrade", &codec);
            let out = codec.apply(&read_rgb_png(&a.input)?, codec.config.qp)?;
            write_rgb_png(&a.out, &out)?;
        }
        Cmd::BuildDataset(a) => build_dataset(a, seed)?,
        Cmd::Train(a) => train(a, seed)?,
        Cmd::Enhance(a) => {
            let mut opts = EnhanceOptions::default();
            a.tiles.apply(&mut opts);
            dump("enhance", &serde_json::json!({ "args": &a, "enhance": opts }));
            let model = ModelHandle::load(&a.checkpoint)?;
            let out = enhance(&model, &read_rgb_png(&a.attribute)?, &read_mask_png(&a.occupancy)?, &opts)?;
            write_rgb_png(&a.out, &out)?;
        }
        Cmd::Evaluate(a) => {
            let mut opts = EnhanceOptions::default();
            a.tiles.apply(&mut opts);
            dump("evaluate", &serde_json::json!({ "args": &a, "enhance": opts }));
            let split = match a.split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                other => return Err(Error::Config(format!("unknown split `{other}`"))),
            };
            let model = ModelHandle::load(&a.checkpoint)?;
            let ev = evaluate_checkpoint(&model, &a.corpus, split, &opts)?;
            for r in &ev.rows {
                println!("{},{},{},{}", r.id, r.qp, fmt_db(r.before), fmt_db(r.after));
            }
            println!("mean {} -> {}", fmt_db(ev.mean_before), fmt_db(ev.mean_after));
        }
        Cmd::Eval(a) => {
            dump("eval", &a);
            println!("{}", fmt_db(psnr_3d_color(&load_ply(&a.reference)?, &load_ply(&a.test)?)?));
        }
        Cmd::Eval2d(a) => {
            dump("eval-2d", &a);
            let (r, t) = (read_rgb_png(&a.reference)?, read_rgb_png(&a.test)?);
            let v = match (&a.mask, a.full_frame) {
                (_, true) => psnr_2d_full_frame(&r, &t)?,
                (Some(m), false) => psnr_2d(&r, &t, &read_mask_png(m)?)?,
                (None, false) => return Err(Error::Config("--mask is required unless --full-frame".into())),
            };
            println!("{}", fmt_db(v));
        }
        Cmd::Report(a) => {
            dump("report", &a);
            let rows = read_rows(&a.input)?;
            let rep = match &a.out_dir {
                Some(d) => write_report(&rows, d)?,
                None => make_report(&rows)?,
            };
            print!("{}", rep.csv);
        }
        Cmd::Pipeline(a) => pipeline(a, seed)?,
        Cmd::Render(a) => {
            dump("render", &a);
            let axis: Axis = a.axis.parse()?;
            render_ortho(&load_ply(&a.input)?, axis, &a.out)?;
        }
        Cmd::Params(a) => {
            dump("params", &a);
            match &a.checkpoint {
                Some(p) => println!("{}", ModelHandle::load(p)?.param_count()),
                None => {
                    let ldc = build_ldc_unet(&LdcUnetConfig::default(), 0)?.param_count();
                    let drunet = build_drunet_baseline(0)?.param_count();
                    println!("ldc_unet {ldc}\ndrunet {drunet}");
                }
            }
        }
    }
    Ok(())
}

fn build_dataset(a: BuildDatasetArgs, seed: Option<u64>) -> Result<()> {
    let kind: CorpusKind = a.kind.parse()?;
    let mut cfg = layered(DatasetConfig::default(), a.config.as_deref())?;
    if !a.qp.is_empty() {
        cfg.build.qps = a.qp.clone();
    }
    set(&mut cfg.build.seed, seed);
    set(&mut cfg.build.val_fraction, a.val_fraction);
    set(&mut cfg.count, a.count);
    set(&mut cfg.size, a.size);
    a.refine.apply(&mut cfg.build.refine, &mut cfg.build.refine_options);
    a.codec.apply(&mut cfg.build.codec);
    dump("build-dataset", &cfg);
    let m = match kind {
        CorpusKind::Synth => synth_portrait_corpus(&a.out, cfg.count, cfg.size, &cfg.build)?,
        CorpusKind::Portrait => {
            let [input] = a.input.as_slice() else {
                return Err(Error::Config("portrait corpus needs exactly one --input folder".into()));
            };
            build_portrait_corpus(&a.out, input, &cfg.build)?
        }
        CorpusKind::Pcmaps => {
            let mut clouds = collect_plys(&a.input)?;
            for s in &a.synth_cloud {
                let spec: SynthSpec = s.parse()?;
                let pc = synth_cloud(spec.kind, spec.size, spec.seed.unwrap_or(cfg.build.seed))?;
                clouds.push((spec.name(cfg.build.seed), pc));
            }
            build_pc_map_corpus(&a.out, &clouds, &cfg.projection, &cfg.build)?
        }
    };
    println!(
        "{} pairs ({} train, {} val), {} skipped",
        m.len(),
        m.split(Split::Train).count(),
        m.split(Split::Val).count(),
        m.skipped.len()
    );
    Ok(())
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = layered(PhaseConfig::for_phase(a.phase)?, a.config.as_deref())?;
    if cfg.phase != a.phase {
        return Err(Error::Config(format!("config file is for phase {}, --phase is {}", cfg.phase, a.phase)));
    }
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.learning_rate, a.lr);
    set(&mut cfg.crop, a.crop);
    set(&mut cfg.seed, seed);
    if a.no_augment {
        cfg.augment = false;
    }
    dump("train", &serde_json::json!({ "phase_config": &cfg, "init": &a.init, "corpus": &a.corpus, "out": &a.out }));
    let model = initial_model(&cfg, a.init.as_deref())?;
    let (_, report) = train_phase(model, &a.corpus, &cfg, Some(&a.out))?;
    println!(
        "noisy {} best {} at epoch {}",
        fmt_db(report.val_psnr_noisy),
        fmt_db(report.best_val_psnr),
        report.best_epoch
    );
    Ok(())
}

fn pipeline(a: PipelineArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = layered(PipelineConfig::default(), a.config.as_deref())?;
    if !a.input.is_empty() {
        cfg.inputs = a.input.clone();
    }
    if !a.synth.is_empty() {
        cfg.synth = a.synth.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    }
    if !a.qp.is_empty() {
        cfg.qps = a.qp.clone();
    }
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint.clone();
    }
    match &a.out_dir {
        Some(d) => cfg.out_dir = d.clone(),
        None if a.config.is_none() => cfg.out_dir = fresh_run_dir(),
        None => {}
    }
    cfg.full_frame |= a.full_frame;
    cfg.binary_ply |= a.binary;
    set(&mut cfg.seed, seed);
    a.projection.apply(&mut cfg.projection);
    a.refine.apply(&mut cfg.refine, &mut cfg.refine_options);
    a.codec.apply(&mut cfg.codec);
    a.tiles.apply(&mut cfg.enhance);
    dump("pipeline", &cfg);
    let rows = run_pipeline(&cfg)?;
    print!("{}", make_report(&rows)?.csv);
    eprintln!("pcce pipeline: artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn fresh_run_dir() -> PathBuf {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    PathBuf::from(format!("pcce-run-{secs}-{}", std::process::id()))
}

fn init_threads() {
    let Ok(v) = std::env::var("PCCE_THREADS") else { return };
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
                log::debug!("thread pool already initialised");
            }
        }
        _ => log::warn!("ignoring PCCE_THREADS={v}: expected a positive integer"),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code: 0 ok, 1 runtime or contract error, 2 usage.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    init_threads();
    let name = cli.cmd.name();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            // nested sources are already part of the message
            eprintln!("pcce {name}: error: {e}");
            1
        }
    }
}
