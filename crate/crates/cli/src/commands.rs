//! One function per subcommand. Each declares its config keys, merges the
//! config file, flags and overrides, echoes the resolved settings into the
//! output directory, then runs.

use std::path::{Path, PathBuf};

use clap::Args;
use log::{info, warn};
use serde_json::{json, Value};

use ulip_core::anchors::{
    image_row_id, load_table, oracle_anchor_gen, save_table, stand_in_text_table, AnchorTable, OracleConfig, PromptSet,
};
use ulip_core::checkpoint::Checkpoint;
use ulip_core::dataset::{stand_in_image_table, write_synthetic, Dataset, Split, SynthConfig};
use ulip_core::encoder::EncoderConfig;
use ulip_core::eval::{
    ablation_csv, data_efficiency_sweep, embed_records, filter_category_set, finetune as run_finetune, modality_ablation,
    random_init_like, retrieve as run_retrieve, stratified_subsample, sweep_csv, zeroshot_eval, CategoryAnchors, EvalConfig,
    FinetuneConfig,
};
use ulip_core::fsutil;
use ulip_core::gradcheck;
use ulip_core::renderer::{export_depth, render_depth, CameraRing, StandInImageEncoder};
use ulip_core::train::{pretrain as run_pretrain, write_trace, Anchors, TrainConfig};

use crate::config::Settings;
use crate::error::CliError;
use crate::Common;

type CliResult<T = ()> = Result<T, CliError>;

/// Root for output directories when neither `--out` nor the `out` key is set.
pub const OUT_ENV: &str = "ULIP_OUT";
const DEFAULT_OUT_ROOT: &str = "ulip-runs";

/// Base keys shared by every subcommand.
fn base() -> Settings {
    Settings::new().declare("seed", Value::from(0)).declare_path("out")
}

/// Merges file, flags and `--override` values in that order of precedence.
fn resolve(settings: Settings, common: &Common, flags: impl FnOnce(&mut Settings) -> CliResult) -> CliResult<Settings> {
    let mut s = settings;
    if let Some(path) = &common.config {
        s.merge_file(path)?;
    }
    flags(&mut s)?;
    s.flag("seed", common.seed)?;
    s.flag("out", common.out.as_ref().map(|p| p.display().to_string()))?;
    for o in &common.overrides {
        s.set_raw(o)?;
    }
    Ok(s)
}

/// Creates the output directory and writes the resolved config into it.
fn prepare_out(s: &Settings, command: &str) -> CliResult<PathBuf> {
    let out = match s.path("out")? {
        Some(p) => p,
        None => std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from).join(command),
    };
    std::fs::create_dir_all(&out).map_err(|e| CliError::Runtime(io_error(&out, e)))?;
    let mut resolved = s.resolved();
    resolved["command"] = Value::from(command);
    resolved["out"] = Value::from(std::path::absolute(&out).unwrap_or(out.clone()).display().to_string());
    fsutil::write_json(&out.join("config.json"), &resolved)?;
    Ok(out)
}

fn io_error(path: &Path, source: std::io::Error) -> ulip_core::Error {
    ulip_core::Error::Io { path: path.to_owned(), source }
}

/// Accepts a manifest file or a directory holding `manifest.json`.
fn load_dataset(path: &Path) -> CliResult<Dataset> {
    let manifest = if path.is_dir() { path.join("manifest.json") } else { path.to_owned() };
    Ok(Dataset::load(&manifest)?)
}

fn comma_list<T: std::str::FromStr>(raw: &Option<String>) -> CliResult<Option<Vec<T>>> {
    raw.as_deref()
        .map(|r| {
            r.split(',')
                .map(|x| x.trim().parse::<T>().map_err(|_| CliError::Usage(format!("cannot parse `{x}` in list `{r}`"))))
                .collect()
        })
        .transpose()
}

fn seed(s: &Settings) -> CliResult<u64> {
    s.get("seed")
}

// ---- gen-synthetic ---------------------------------------------------------

#[derive(Args, Debug)]
pub struct GenSyntheticArgs {
    #[arg(long)]
    categories: Option<usize>,
    /// Training objects per category.
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Points stored per object.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    variation: Option<f64>,
}

pub fn gen_synthetic(a: &GenSyntheticArgs, c: &Common) -> CliResult {
    let s = resolve(base().declare_section("synthetic", &SynthConfig::default()), c, |s| {
        s.flag("synthetic.categories", a.categories)?;
        s.flag("synthetic.per_class", a.per_class)?;
        s.flag("synthetic.test_per_class", a.test_per_class)?;
        s.flag("synthetic.source_points", a.points)?;
        s.flag("synthetic.noise", a.noise)?;
        s.flag("synthetic.variation", a.variation)
    })?;
    let cfg: SynthConfig = s.section("synthetic", Some(seed(&s)?))?;
    cfg.validate()?;
    let out = prepare_out(&s, "gen-synthetic")?;
    let manifest = write_synthetic(&out, &cfg)?;
    info!("wrote {}", manifest.display());
    Ok(())
}

// ---- render ----------------------------------------------------------------

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Dataset manifest, or the directory holding `manifest.json`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of views on the camera ring.
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Render only the first N records.
    #[arg(long)]
    limit: Option<usize>,
}

pub fn render(a: &RenderArgs, c: &Common) -> CliResult {
    let settings = base()
        .declare_path("data")
        .declare_section("ring", &CameraRing::default())
        .declare("resolution", Value::from(64))
        .declare("limit", Value::Null);
    let s = resolve(settings, c, |s| {
        s.flag("data", a.data.as_ref().map(|p| p.display().to_string()))?;
        s.flag("ring.view_count", a.views)?;
        s.flag("ring.step_deg", a.views.map(|v| 360.0 / v as f64))?;
        s.flag("resolution", a.resolution)?;
        s.flag("limit", a.limit)
    })?;
    let data = s.require_path("data")?;
    let ring: CameraRing = s.section("ring", None)?;
    ring.validate()?;
    let res: usize = s.get("resolution")?;
    let limit: Option<usize> = s.get("limit")?;
    let ds = load_dataset(&data)?;
    let out = prepare_out(&s, "render")?;
    let count = limit.unwrap_or(usize::MAX).min(ds.records().len());
    for (i, r) in ds.records().iter().enumerate().take(count) {
        let pc = ulip_core::pointcloud::normalize_unit_sphere(ds.cloud(i));
        for v in 0..ring.view_count {
            let map = render_depth(&pc, &ring, v, res)?;
            export_depth(&map, &out.join("depth").join(&r.id).join(format!("view_{v:02}.pgm")))?;
        }
    }
    info!("rendered {} views for {count} objects", ring.view_count);
    Ok(())
}

// ---- embed-anchors ---------------------------------------------------------

#[derive(Args, Debug)]
pub struct EmbedAnchorsArgs {
    /// `oracle`, `stand-in` or `ingest`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    /// Oracle image noise (per-component standard deviation).
    #[arg(long)]
    image_noise: Option<f64>,
    /// Oracle prompt jitter (per-component standard deviation).
    #[arg(long)]
    prompt_jitter: Option<f64>,
    /// Image rows per object.
    #[arg(long)]
    views: Option<usize>,
    /// Stand-in renderer resolution.
    #[arg(long)]
    resolution: Option<usize>,
    /// Existing text table to ingest.
    #[arg(long)]
    text_table: Option<PathBuf>,
    /// Existing image table to ingest.
    #[arg(long)]
    image_table: Option<PathBuf>,
}

/// Category names plus every other word that appears in a record.
fn vocabulary(ds: &Dataset) -> Vec<String> {
    let mut words = ds.category_names();
    for r in ds.records() {
        for w in &r.words {
            if !words.contains(w) {
                words.push(w.clone());
            }
        }
    }
    words
}

pub fn embed_anchors(a: &EmbedAnchorsArgs, c: &Common) -> CliResult {
    let oracle = OracleConfig::default();
    let settings = base()
        .declare("mode", Value::from("oracle"))
        .declare_path("data")
        .declare("dim", Value::from(512))
        .declare("oracle.image_noise", Value::from(oracle.image_noise))
        .declare("oracle.prompt_jitter", Value::from(oracle.prompt_jitter))
        .declare("views", Value::from(oracle.views))
        .declare("stand_in.resolution", Value::from(64))
        .declare_path("ingest.text")
        .declare_path("ingest.image");
    let s = resolve(settings, c, |s| {
        s.flag("mode", a.mode.clone())?;
        s.flag("data", a.data.as_ref().map(|p| p.display().to_string()))?;
        s.flag("dim", a.dim)?;
        s.flag("oracle.image_noise", a.image_noise)?;
        s.flag("oracle.prompt_jitter", a.prompt_jitter)?;
        s.flag("views", a.views)?;
        s.flag("stand_in.resolution", a.resolution)?;
        s.flag("ingest.text", a.text_table.as_ref().map(|p| p.display().to_string()))?;
        s.flag("ingest.image", a.image_table.as_ref().map(|p| p.display().to_string()))
    })?;
    let mode: String = s.get("mode")?;
    let dim: usize = s.get("dim")?;
    let seed = seed(&s)?;
    let (text, image) = match mode.as_str() {
        "oracle" => {
            let ds = load_dataset(&s.require_path("data")?)?;
            let cfg = OracleConfig {
                dim,
                seed,
                image_noise: s.get("oracle.image_noise")?,
                prompt_jitter: s.get("oracle.prompt_jitter")?,
                views: s.get("views")?,
            };
            let out = prepare_out(&s, "embed-anchors")?;
            let (t, i) = oracle_anchor_gen(&ds.category_names(), &ds.objects(), &PromptSet::shipped(), &cfg)?;
            (Some((t, out.clone())), Some((i, out)))
        }
        "stand-in" => {
            let ds = load_dataset(&s.require_path("data")?)?;
            let views: usize = s.get("views")?;
            let ring = CameraRing { view_count: views, step_deg: 360.0 / views as f64, ..CameraRing::default() };
            ring.validate()?;
            let encoder = StandInImageEncoder::new(s.get("stand_in.resolution")?, dim, seed)?;
            let out = prepare_out(&s, "embed-anchors")?;
            let t = stand_in_text_table(&vocabulary(&ds), &PromptSet::shipped(), dim, seed)?;
            let i = stand_in_image_table(&ds, &ring, &encoder)?;
            (Some((t, out.clone())), Some((i, out)))
        }
        "ingest" => {
            let text = s.path("ingest.text")?;
            let image = s.path("ingest.image")?;
            if text.is_none() && image.is_none() {
                return Err(CliError::Usage("ingest needs --text-table and/or --image-table".into()));
            }
            let out = prepare_out(&s, "embed-anchors")?;
            let load = |p: Option<PathBuf>| -> CliResult<Option<(AnchorTable, PathBuf)>> {
                p.map(|p| {
                    let t = load_table(&p)?;
                    if t.renormalized() > 0 {
                        warn!("{}: renormalized {} rows", p.display(), t.renormalized());
                    }
                    t.expect_dim(dim)?;
                    Ok((t, out.clone()))
                })
                .transpose()
            };
            (load(text)?, load(image)?)
        }
        other => return Err(CliError::Validation(format!("unknown anchor mode `{other}`"))),
    };
    for (name, table) in [("text.emb", text), ("image.emb", image)] {
        if let Some((t, out)) = table {
            save_table(&t, &out.join(name))?;
            info!("wrote {} ({} rows, dim {})", out.join(name).display(), t.len(), t.dim());
        }
    }
    Ok(())
}

// ---- pretrain --------------------------------------------------------------

/// Flags shared by the commands that pre-train.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Points sampled per object each iteration.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated per-point layer widths.
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    embed_dim: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, s: &mut Settings) -> CliResult {
        s.flag("train.epochs", self.epochs)?;
        s.flag("train.batch_size", self.batch_size)?;
        s.flag("train.n_points", self.points)?;
        s.flag("train.optimizer.learning_rate", self.lr)?;
        s.flag("train.encoder.widths", comma_list::<usize>(&self.widths)?)?;
        s.flag("train.encoder.embed_dim", self.embed_dim)
    }
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Text anchor table.
    #[arg(long)]
    text: Option<PathBuf>,
    /// Image anchor table.
    #[arg(long)]
    image: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    /// Image-text term weight.
    #[arg(long)]
    alpha: Option<f32>,
    /// Image-point term weight.
    #[arg(long)]
    beta: Option<f32>,
    /// Point-text term weight.
    #[arg(long)]
    theta: Option<f32>,
}

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn load_anchors(s: &Settings) -> CliResult<Anchors> {
    Ok(Anchors { text: load_table(&s.require_path("text")?)?, image: load_table(&s.require_path("image")?)? })
}

pub fn pretrain(a: &PretrainArgs, c: &Common) -> CliResult {
    let settings = base()
        .declare_path("data")
        .declare_path("text")
        .declare_path("image")
        .declare_section("train", &TrainConfig::default());
    let s = resolve(settings, c, |s| {
        s.flag("data", path_flag(&a.data))?;
        s.flag("text", path_flag(&a.text))?;
        s.flag("image", path_flag(&a.image))?;
        a.train.apply(s)?;
        s.flag("train.coefficients.alpha", a.alpha)?;
        s.flag("train.coefficients.beta", a.beta)?;
        s.flag("train.coefficients.theta", a.theta)
    })?;
    let data = s.require_path("data")?;
    let cfg: TrainConfig = s.section("train", Some(seed(&s)?))?;
    cfg.validate()?;
    let anchors = load_anchors(&s)?;
    let ds = load_dataset(&data)?;
    let out = prepare_out(&s, "pretrain")?;
    let result = run_pretrain(&ds, &anchors, &cfg)?;
    result.checkpoint.save(&out.join("checkpoint.ckpt"))?;
    write_trace(&out.join("trace.csv"), &result.trace)?;
    let report = json!({
        "iterations": result.report.iterations,
        "records_used": result.report.records_used,
        "skipped": result.report.skipped,
        "initial_loss": result.trace.first().map(|r| r.l_final),
        "final_epoch_loss": result.final_epoch_loss(),
        "inv_temperature": result.checkpoint.temperature.inv_tau(),
    });
    fsutil::write_json(&out.join("report.json"), &report)?;
    info!(
        "pretrained {} iterations; final epoch loss {:?}; 1/tau {:.3}",
        result.report.iterations,
        result.final_epoch_loss(),
        result.checkpoint.temperature.inv_tau()
    );
    Ok(())
}

// ---- zeroshot --------------------------------------------------------------

#[derive(Args, Debug)]
pub struct ZeroshotArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Text anchor table. Without one, stand-in text anchors are generated.
    #[arg(long)]
    text: Option<PathBuf>,
    /// `ALL`, `Medium`, `Hard`, or a custom name used with --set-file.
    #[arg(long = "set")]
    category_set: Option<String>,
    /// File of category names, one per line, for a custom set.
    #[arg(long)]
    set_file: Option<PathBuf>,
    /// `train` or `test`.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    points: Option<usize>,
}

/// Loaded text anchors, or stand-in ones for the dataset's categories.
fn text_table_or_stand_in(s: &Settings, ds: &Dataset, dim: usize) -> CliResult<AnchorTable> {
    match s.path("text")? {
        Some(p) => Ok(load_table(&p)?),
        None => {
            warn!("no text table given; using stand-in text anchors");
            Ok(stand_in_text_table(&vocabulary(ds), &PromptSet::shipped(), dim, seed(s)?)?)
        }
    }
}

pub fn zeroshot(a: &ZeroshotArgs, c: &Common) -> CliResult {
    let settings = base()
        .declare_path("checkpoint")
        .declare_path("data")
        .declare_path("text")
        .declare("set", Value::from("ALL"))
        .declare_path("set_file")
        .declare_section("eval", &EvalConfig::default());
    let s = resolve(settings, c, |s| {
        s.flag("checkpoint", path_flag(&a.checkpoint))?;
        s.flag("data", path_flag(&a.data))?;
        s.flag("text", path_flag(&a.text))?;
        s.flag("set", a.category_set.clone())?;
        s.flag("set_file", path_flag(&a.set_file))?;
        s.flag("eval.split", a.split.clone())?;
        s.flag("eval.n_points", a.points)
    })?;
    let ck_path = s.require_path("checkpoint")?;
    let data = s.require_path("data")?;
    let cfg: EvalConfig = s.section("eval", Some(seed(&s)?))?;
    let set: String = s.get("set")?;
    let custom = match s.path("set_file")? {
        Some(p) => Some(
            std::fs::read_to_string(&p)
                .map_err(|e| CliError::Runtime(io_error(&p, e)))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_owned)
                .collect::<Vec<_>>(),
        ),
        None => None,
    };
    let ck = Checkpoint::load(&ck_path)?;
    let ds = load_dataset(&data)?;
    let names = ds.category_names();
    let filter = filter_category_set(&names, &set, custom.as_deref())?;
    let out = prepare_out(&s, "zeroshot")?;
    let text = text_table_or_stand_in(&s, &ds, ck.encoder.embed_dim())?;
    let anchors = CategoryAnchors::from_table(&names, &text)?;
    let report = zeroshot_eval(&ck.encoder, &ds, &anchors, &filter, &cfg)?;
    let mut metrics = serde_json::to_value(&report).expect("report serializes");
    for k in &cfg.k_list {
        metrics[format!("top{k}")] = json!(report.top(*k));
    }
    fsutil::write_json(&out.join("metrics.json"), &metrics)?;
    info!("zero-shot {set}: top1 {:?} over {} samples", report.top(1), report.samples);
    Ok(())
}

// ---- finetune --------------------------------------------------------------

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Pre-trained checkpoint; omit to start from a random encoder.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fraction of each training class to keep.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Train only the classification head.
    #[arg(long)]
    freeze_encoder: bool,
}

fn finetune_settings() -> Settings {
    base().declare_path("checkpoint").declare_path("data").declare_section("finetune", &FinetuneConfig::default())
}

fn apply_finetune_flags(s: &mut Settings, epochs: Option<usize>, batch: Option<usize>, points: Option<usize>, lr: Option<f64>) -> CliResult {
    s.flag("finetune.epochs", epochs)?;
    s.flag("finetune.batch_size", batch)?;
    s.flag("finetune.n_points", points)?;
    s.flag("finetune.optimizer.learning_rate", lr)
}

pub fn finetune(a: &FinetuneArgs, c: &Common) -> CliResult {
    let settings = finetune_settings().declare("fraction", Value::from(1.0)).declare_section("encoder", &EncoderConfig::default());
    let s = resolve(settings, c, |s| {
        s.flag("checkpoint", path_flag(&a.checkpoint))?;
        s.flag("data", path_flag(&a.data))?;
        s.flag("fraction", a.fraction)?;
        apply_finetune_flags(s, a.epochs, a.batch_size, a.points, a.lr)?;
        s.flag("finetune.freeze_encoder", a.freeze_encoder.then_some(true))
    })?;
    let data = s.require_path("data")?;
    let seed = seed(&s)?;
    let cfg: FinetuneConfig = s.section("finetune", Some(seed))?;
    let fraction: f64 = s.get("fraction")?;
    let init = match s.path("checkpoint")? {
        Some(p) => Checkpoint::load(&p)?.encoder,
        None => {
            let enc: EncoderConfig = s.section("encoder", None)?;
            info!("no checkpoint given; starting from a random encoder");
            random_init_like(&enc, seed)?
        }
    };
    let ds = load_dataset(&data)?;
    let train = stratified_subsample(&ds, &ds.indices(Split::Train), fraction, seed)?;
    let out = prepare_out(&s, "finetune")?;
    let (ck, report) = run_finetune(init, &ds, &train, &ds.indices(Split::Test), &cfg)?;
    ck.save(&out.join("checkpoint.ckpt"))?;
    fsutil::write_json(&out.join("metrics.json"), &report)?;
    info!("fine-tuned on {} samples: OA {:.2}, mAcc {:.2}", train.len(), report.overall_accuracy, report.class_mean_accuracy);
    Ok(())
}

// ---- retrieve --------------------------------------------------------------

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset whose objects form the gallery.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Text query: a word with rows in the text table.
    #[arg(long)]
    query_text: Option<String>,
    /// Image query: `OBJECT_ID:VIEW` in the image table.
    #[arg(long)]
    query_image: Option<String>,
    #[arg(long)]
    text: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(short, long)]
    k: Option<usize>,
    /// Restrict the gallery to `train` or `test`.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    points: Option<usize>,
}

pub fn retrieve(a: &RetrieveArgs, c: &Common) -> CliResult {
    let settings = base()
        .declare_path("checkpoint")
        .declare_path("data")
        .declare_path("text")
        .declare_path("image")
        .declare("query_text", Value::Null)
        .declare("query_image", Value::Null)
        .declare("k", Value::from(5))
        .declare("split", Value::Null)
        .declare("n_points", Value::from(1024));
    let s = resolve(settings, c, |s| {
        s.flag("checkpoint", path_flag(&a.checkpoint))?;
        s.flag("data", path_flag(&a.data))?;
        s.flag("text", path_flag(&a.text))?;
        s.flag("image", path_flag(&a.image))?;
        s.flag("query_text", a.query_text.clone())?;
        s.flag("query_image", a.query_image.clone())?;
        s.flag("k", a.k)?;
        s.flag("split", a.split.clone())?;
        s.flag("n_points", a.points)
    })?;
    let ck = Checkpoint::load(&s.require_path("checkpoint")?)?;
    let ds = load_dataset(&s.require_path("data")?)?;
    let query_text: Option<String> = s.get("query_text")?;
    let query_image: Option<String> = s.get("query_image")?;
    let (kind, label, query) = match (query_text, query_image) {
        (Some(word), None) => {
            let table = text_table_or_stand_in(&s, &ds, ck.encoder.embed_dim())?;
            let anchor = table
                .word_anchor(&word)
                .ok_or_else(|| CliError::Validation(format!("no text rows for `{word}`")))??;
            ("text", word, anchor)
        }
        (None, Some(spec)) => {
            let table = load_table(&s.require_path("image")?)?;
            let id = match spec.rsplit_once(':') {
                Some((obj, view)) if view.parse::<usize>().is_ok() => image_row_id(obj, view.parse().expect("checked")),
                _ => spec.clone(),
            };
            let row = table.get(&id).ok_or_else(|| CliError::Validation(format!("no image row `{id}`")))?;
            ("image", spec, row.to_vec())
        }
        _ => return Err(CliError::Usage("give exactly one of --query-text or --query-image".into())),
    };
    let indices = match s.get::<Option<Split>>("split")? {
        Some(split) => ds.indices(split),
        None => (0..ds.records().len()).collect(),
    };
    let out = prepare_out(&s, "retrieve")?;
    let gallery = embed_records(&ck.encoder, &ds, &indices, s.get("n_points")?, seed(&s)?)?;
    let hits = run_retrieve(&query, &gallery, s.get("k")?)?;
    let result = json!({
        "query": { "kind": kind, "value": label },
        "hits": hits.iter().map(|(id, score)| json!({ "id": id, "score": score })).collect::<Vec<_>>(),
    });
    fsutil::write_json(&out.join("retrieval.json"), &result)?;
    for (rank, (id, score)) in hits.iter().enumerate() {
        println!("{}\t{id}\t{score:.6}", rank + 1);
    }
    Ok(())
}

// ---- ablate-modalities -----------------------------------------------------

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    text: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    /// Comma-separated seeds; one pre-training run per seed and configuration.
    #[arg(long)]
    seeds: Option<String>,
    #[command(flatten)]
    train: TrainFlags,
}

pub fn ablate(a: &AblateArgs, c: &Common) -> CliResult {
    let settings = base()
        .declare_path("data")
        .declare_path("text")
        .declare_path("image")
        .declare("seeds", json!([0, 1, 2]))
        .declare_section("train", &TrainConfig::default())
        .declare_section("eval", &EvalConfig::default());
    let s = resolve(settings, c, |s| {
        s.flag("data", path_flag(&a.data))?;
        s.flag("text", path_flag(&a.text))?;
        s.flag("image", path_flag(&a.image))?;
        s.flag("seeds", comma_list::<u64>(&a.seeds)?)?;
        a.train.apply(s)
    })?;
    let data = s.require_path("data")?;
    let seed = seed(&s)?;
    let cfg: TrainConfig = s.section("train", Some(seed))?;
    cfg.validate()?;
    let eval: EvalConfig = s.section("eval", Some(seed))?;
    let seeds: Vec<u64> = s.get("seeds")?;
    if seeds.is_empty() {
        return Err(CliError::Validation("seeds must not be empty".into()));
    }
    let anchors = load_anchors(&s)?;
    let ds = load_dataset(&data)?;
    let out = prepare_out(&s, "ablate-modalities")?;
    let rows = modality_ablation(&ds, &anchors, &cfg, &eval, &seeds)?;
    fsutil::write_atomic(&out.join("ablation.csv"), ablation_csv(&rows).as_bytes())?;
    fsutil::write_json(&out.join("ablation.json"), &rows)?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}

// ---- sweep-data-efficiency -------------------------------------------------

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated training fractions in (0, 1].
    #[arg(long)]
    fractions: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

pub fn sweep(a: &SweepArgs, c: &Common) -> CliResult {
    let settings = finetune_settings().declare("fractions", json!([0.1, 0.25, 0.5, 1.0])).declare("seeds", json!([0, 1, 2]));
    let s = resolve(settings, c, |s| {
        s.flag("checkpoint", path_flag(&a.checkpoint))?;
        s.flag("data", path_flag(&a.data))?;
        s.flag("fractions", comma_list::<f64>(&a.fractions)?)?;
        s.flag("seeds", comma_list::<u64>(&a.seeds)?)?;
        apply_finetune_flags(s, a.epochs, a.batch_size, a.points, a.lr)
    })?;
    let ck = Checkpoint::load(&s.require_path("checkpoint")?)?;
    let ds = load_dataset(&s.require_path("data")?)?;
    let cfg: FinetuneConfig = s.section("finetune", Some(seed(&s)?))?;
    let fractions: Vec<f64> = s.get("fractions")?;
    let seeds: Vec<u64> = s.get("seeds")?;
    let out = prepare_out(&s, "sweep-data-efficiency")?;
    let rows = data_efficiency_sweep(&ck.encoder, &ds, &fractions, &seeds, &cfg)?;
    fsutil::write_atomic(&out.join("sweep.csv"), sweep_csv(&rows).as_bytes())?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}

// ---- gradcheck -------------------------------------------------------------

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
}

pub fn gradcheck(a: &GradcheckArgs, c: &Common) -> CliResult {
    let settings = base().declare("seeds", json!((0..10).collect::<Vec<u64>>()));
    let s = resolve(settings, c, |s| s.flag("seeds", comma_list::<u64>(&a.seeds)?))?;
    let seeds: Vec<u64> = s.get("seeds")?;
    let out = prepare_out(&s, "gradcheck")?;
    let report = gradcheck::run_suite(&seeds)?;
    fsutil::write_json(&out.join("gradcheck.json"), &report)?;
    println!(
        "checked {} gradient entries over {} cases; max relative error {:.3e} (tolerance {:.0e}); skipped {}",
        report.elements(),
        report.cases.len(),
        report.max_rel_error(),
        gradcheck::TOLERANCE,
        report.skipped()
    );
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Runtime(ulip_core::Error::InvalidConfig(format!(
            "gradient check failed: max relative error {:.3e}",
            report.max_rel_error()
        ))))
    }
}
