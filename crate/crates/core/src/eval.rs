//! Downstream protocols: zero-shot classification, fine-tuning, retrieval,
//! the modality ablation and the data-efficiency sweep.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorTable;
use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::dataset::{Dataset, Split};
use crate::encoder::{ClassifierHead, EncoderConfig, EncoderParams, PointEncoder};
use crate::error::{Error, Result};
use crate::pointcloud::{augment, AugmentConfig, PointCloud};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};
use crate::train::{optimizer_step, pretrain, prepare_cloud, AdamState, AdamWConfig, Anchors, LossCoefficients, TrainConfig};

const MEDIUM_LIST: &str = include_str!("../data/modelnet40_medium.txt");
const HARD_LIST: &str = include_str!("../data/modelnet40_hard.txt");
const ALL_LIST: &str = include_str!("../data/modelnet40_all.txt");
/// Encoding chunk size for evaluation passes.
const EVAL_BATCH: usize = 64;

fn lines(s: &str) -> Vec<String> {
    s.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect()
}

/// The shipped ModelNet40 category names.
pub fn modelnet40_all() -> Vec<String> {
    lines(ALL_LIST)
}

/// Ordered category names with one unit text anchor each.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryAnchors {
    names: Vec<String>,
    anchors: Vec<Vec<f32>>,
}

impl CategoryAnchors {
    pub fn new(names: Vec<String>, anchors: Vec<Vec<f32>>) -> Result<Self> {
        if names.len() != anchors.len() {
            return Err(Error::LengthMismatch(names.len(), anchors.len()));
        }
        if names.iter().collect::<HashSet<_>>().len() != names.len() {
            return Err(Error::InvalidConfig("category names must be unique".into()));
        }
        if let Some(first) = anchors.first() {
            let d = first.len();
            for a in &anchors {
                if a.len() != d {
                    return Err(Error::DimMismatch { expected: d, got: a.len() });
                }
            }
        }
        Ok(CategoryAnchors { names, anchors })
    }

    /// Averages each name's per-prompt rows from a text table.
    pub fn from_table(names: &[String], table: &AnchorTable) -> Result<Self> {
        let anchors = names
            .iter()
            .map(|n| {
                table
                    .word_anchor(n)
                    .unwrap_or_else(|| Err(Error::MissingModality(n.clone(), "no text rows for category".into())))
            })
            .collect::<Result<Vec<_>>>()?;
        CategoryAnchors::new(names.to_vec(), anchors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn anchors(&self) -> &[Vec<f32>] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.anchors.first().map_or(0, Vec::len)
    }

    /// The subset of categories named in `keep`, in the original order.
    pub fn restrict(&self, keep: &[String]) -> CategoryAnchors {
        let keep: HashSet<&String> = keep.iter().collect();
        let (names, anchors) = self
            .names
            .iter()
            .zip(&self.anchors)
            .filter(|(n, _)| keep.contains(n))
            .map(|(n, a)| (n.clone(), a.clone()))
            .unzip();
        CategoryAnchors { names, anchors }
    }
}

/// Sorts `(index, score)` by descending score, ties by ascending index.
fn rank_by_score(scores: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    let mut s = scores;
    s.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    s
}

/// Categories ranked by cosine similarity to `embedding`, best first.
pub fn zeroshot_classify(embedding: &[f32], anchors: &CategoryAnchors) -> Result<Vec<(usize, f64)>> {
    if embedding.len() != anchors.dim() {
        return Err(Error::DimMismatch { expected: anchors.dim(), got: embedding.len() });
    }
    Ok(rank_by_score(anchors.anchors.iter().enumerate().map(|(i, a)| (i, tensor::dot(embedding, a))).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCount {
    pub name: String,
    pub total: usize,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent.
    pub overall_accuracy: f64,
    /// Percent; unweighted mean of per-class recall over classes present.
    pub class_mean_accuracy: f64,
    /// Percent keyed `top1`, `top5`, ...
    pub topk_accuracy: BTreeMap<String, f64>,
    pub per_class: Vec<ClassCount>,
    pub samples: usize,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn top(&self, k: usize) -> Option<f64> {
        self.topk_accuracy.get(&format!("top{k}")).copied()
    }
}

/// `rankings[i]` lists class indices best first; its head is the top-1
/// prediction.
pub fn compute_metrics(rankings: &[Vec<usize>], labels: &[usize], k_list: &[usize], class_names: &[String]) -> Result<EvalReport> {
    if rankings.len() != labels.len() {
        return Err(Error::LengthMismatch(rankings.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptySplit);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
        return Err(Error::InvalidConfig(format!("label {bad} outside {} classes", class_names.len())));
    }
    let mut per_class: Vec<ClassCount> =
        class_names.iter().map(|n| ClassCount { name: n.clone(), total: 0, correct: 0 }).collect();
    let mut hits = vec![0usize; k_list.len()];
    for (ranking, &label) in rankings.iter().zip(labels) {
        per_class[label].total += 1;
        if ranking.first() == Some(&label) {
            per_class[label].correct += 1;
        }
        for (h, &k) in hits.iter_mut().zip(k_list) {
            if ranking.iter().take(k).any(|&p| p == label) {
                *h += 1;
            }
        }
    }
    let n = labels.len() as f64;
    let correct: usize = per_class.iter().map(|c| c.correct).sum();
    let present: Vec<&ClassCount> = per_class.iter().filter(|c| c.total > 0).collect();
    let macc = present.iter().map(|c| c.correct as f64 / c.total as f64).sum::<f64>() / present.len() as f64;
    let topk_accuracy = k_list.iter().zip(&hits).map(|(k, &h)| (format!("top{k}"), 100.0 * h as f64 / n)).collect();
    Ok(EvalReport {
        overall_accuracy: 100.0 * correct as f64 / n,
        class_mean_accuracy: 100.0 * macc,
        topk_accuracy,
        per_class,
        samples: labels.len(),
        config: serde_json::Value::Null,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySetFilter {
    pub name: String,
    pub retained: Vec<String>,
}

impl CategorySetFilter {
    pub fn retains(&self, name: &str) -> bool {
        self.retained.iter().any(|r| r == name)
    }
}

/// `ALL` keeps `all_names`; `Medium` and `Hard` return the shipped ModelNet40
/// lists; any other name requires `custom`.
pub fn filter_category_set(all_names: &[String], set_name: &str, custom: Option<&[String]>) -> Result<CategorySetFilter> {
    let retained = match (set_name, custom) {
        ("ALL", _) => all_names.to_vec(),
        ("Medium", _) => lines(MEDIUM_LIST),
        ("Hard", _) => lines(HARD_LIST),
        (_, Some(list)) => list.to_vec(),
        (other, None) => return Err(Error::UnknownSetName(other.to_owned())),
    };
    Ok(CategorySetFilter { name: set_name.to_owned(), retained })
}

/// Deterministic evaluation view of every record in `indices`.
fn eval_clouds(ds: &Dataset, indices: &[usize], n_points: usize, seed: u64) -> Result<Vec<PointCloud>> {
    let root = Rng::new(seed, 2);
    indices
        .iter()
        .map(|&i| prepare_cloud(ds.cloud(i), n_points, &mut root.derive("eval.sample", i as u64)))
        .collect()
}

fn encode_all(encoder: &impl PointEncoder, clouds: &[PointCloud]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(clouds.len());
    for chunk in clouds.chunks(EVAL_BATCH) {
        let t = encoder.encode_batch(chunk)?;
        out.extend(t.rows().map(<[f32]>::to_vec));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_points: usize,
    pub seed: u64,
    pub split: Split,
    pub k_list: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_points: 1024, seed: 0, split: Split::Test, k_list: vec![1, 5] }
    }
}

/// Zero-shot accuracy of `encoder` on one split. Candidates are the anchor
/// categories the filter retains; samples of other categories are skipped.
pub fn zeroshot_eval(
    encoder: &impl PointEncoder,
    ds: &Dataset,
    anchors: &CategoryAnchors,
    filter: &CategorySetFilter,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let candidates = anchors.restrict(&filter.retained);
    let names = ds.category_names();
    let indices: Vec<usize> = ds
        .indices(cfg.split)
        .into_iter()
        .filter(|&i| candidates.names().iter().any(|n| *n == names[ds.records()[i].label]))
        .collect();
    if indices.is_empty() {
        return Err(Error::EmptySplit);
    }
    let labels: Vec<usize> = indices
        .iter()
        .map(|&i| candidates.names().iter().position(|n| *n == names[ds.records()[i].label]).expect("filtered above"))
        .collect();
    let clouds = eval_clouds(ds, &indices, cfg.n_points, cfg.seed)?;
    let embeddings = encode_all(encoder, &clouds)?;
    let rankings = embeddings
        .iter()
        .map(|e| Ok(zeroshot_classify(e, &candidates)?.into_iter().map(|(c, _)| c).collect()))
        .collect::<Result<Vec<Vec<usize>>>>()?;
    let mut report = compute_metrics(&rankings, &labels, &cfg.k_list, candidates.names())?;
    report.config = serde_json::json!({
        "protocol": "zeroshot",
        "set": filter.name,
        "candidates": candidates.len(),
        "split": cfg.split,
        "n_points": cfg.n_points,
        "seed": cfg.seed,
    });
    Ok(report)
}

/// `(record id, embedding)` for every record in `indices`, sampled the same
/// way as in zero-shot evaluation.
pub fn embed_records(
    encoder: &impl PointEncoder,
    ds: &Dataset,
    indices: &[usize],
    n_points: usize,
    seed: u64,
) -> Result<Vec<(String, Vec<f32>)>> {
    let clouds = eval_clouds(ds, indices, n_points, seed)?;
    let embeddings = encode_all(encoder, &clouds)?;
    Ok(indices.iter().map(|&i| ds.records()[i].id.clone()).zip(embeddings).collect())
}

/// Gallery hits, best first.
pub fn retrieve(query: &[f32], gallery: &[(String, Vec<f32>)], k: usize) -> Result<Vec<(String, f64)>> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let mut scored: Vec<(&str, f64)> = gallery
        .iter()
        .map(|(id, e)| {
            if e.len() != query.len() {
                return Err(Error::DimMismatch { expected: query.len(), got: e.len() });
            }
            Ok((id.as_str(), tensor::dot(query, e)))
        })
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(b.0)));
    Ok(scored.into_iter().take(k).map(|(id, s)| (id.to_owned(), s)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub n_points: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Train only the classification head.
    pub freeze_encoder: bool,
    pub augment: AugmentConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 50,
            batch_size: 32,
            n_points: 1024,
            seed: 0,
            optimizer: AdamWConfig::default(),
            freeze_encoder: false,
            augment: AugmentConfig::default(),
        }
    }
}

fn check_contiguous(labels: &[usize], classes: usize) -> Result<()> {
    let present: HashSet<usize> = labels.iter().copied().collect();
    match (0..classes).find(|c| !present.contains(c)) {
        Some(gap) => Err(Error::LabelGap(gap)),
        None => Ok(()),
    }
}

/// Trains a classification head (and by default the encoder) with
/// cross-entropy on `train` record indices, then reports accuracy on
/// `test` indices.
pub fn finetune(
    init: EncoderParams,
    ds: &Dataset,
    train: &[usize],
    test: &[usize],
    cfg: &FinetuneConfig,
) -> Result<(Checkpoint, EvalReport)> {
    cfg.optimizer.validate()?;
    cfg.augment.validate()?;
    if cfg.batch_size == 0 || cfg.n_points == 0 {
        return Err(Error::InvalidConfig("batch_size and n_points must be positive".into()));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptySplit);
    }
    let names = ds.category_names();
    let classes = names.len();
    let train_labels: Vec<usize> = train.iter().map(|&i| ds.records()[i].label).collect();
    check_contiguous(&train_labels, classes)?;

    let mut encoder = init;
    let mut head = ClassifierHead::init(cfg.seed, encoder.embed_dim(), classes)?;
    let mut decay: Vec<bool> = Vec::new();
    if !cfg.freeze_encoder {
        decay.extend(encoder.blocks().iter().map(|(n, _)| n.ends_with("weight")));
    }
    decay.extend([true, false]);
    let mut state = AdamState::default();
    let root = Rng::new(cfg.seed, 3);

    for epoch in 0..cfg.epochs {
        let order = root.derive("finetune.epoch", epoch as u64).permutation(train.len());
        for chunk in order.chunks(cfg.batch_size) {
            let mut clouds = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &t in chunk {
                let mut rng = root.derive("finetune.sample", ((epoch as u64) << 32) | t as u64);
                let pc = prepare_cloud(ds.cloud(train[t]), cfg.n_points, &mut rng)?;
                clouds.push(augment(&pc, &cfg.augment, &mut rng));
                targets.push(train_labels[t]);
            }
            let mut g = Graph::new();
            let vars = encoder.bind(&mut g, !cfg.freeze_encoder);
            let (w, b) = head.bind(&mut g, true);
            let emb = encoder.forward(&mut g, &vars, &clouds)?;
            let z = g.matmul(emb, w)?;
            let logits = g.add_bias(z, b)?;
            let ce = g.cross_entropy(logits, &targets)?;
            let loss = g.scale(ce, 1.0 / targets.len() as f32)?;
            let grads = g.backward(loss)?;
            let mut leaves = if cfg.freeze_encoder { Vec::new() } else { vars.all() };
            leaves.extend([w, b]);
            let grad_tensors: Vec<Tensor> = leaves.iter().map(|&v| grads.get_or_zeros(v, g.value(v).shape())).collect();
            let mut blocks: Vec<&mut Tensor> = if cfg.freeze_encoder { Vec::new() } else { encoder.blocks_mut() };
            blocks.push(&mut head.weight);
            blocks.push(&mut head.bias);
            optimizer_step(&mut blocks, &grad_tensors, &decay, &mut state, &cfg.optimizer, cfg.optimizer.learning_rate)?;
        }
    }

    let report = classification_eval(&encoder, &head, ds, test, cfg)?;
    let metadata = serde_json::json!({
        "kind": "finetune",
        "epochs": cfg.epochs,
        "train_samples": train.len(),
        "freeze_encoder": cfg.freeze_encoder,
        "seed": cfg.seed,
    });
    let checkpoint = Checkpoint { encoder, temperature: Default::default(), head: Some(head), metadata };
    Ok((checkpoint, report))
}

/// Accuracy of an encoder plus head on `test` record indices.
pub fn classification_eval(
    encoder: &EncoderParams,
    head: &ClassifierHead,
    ds: &Dataset,
    test: &[usize],
    cfg: &FinetuneConfig,
) -> Result<EvalReport> {
    let names = ds.category_names();
    let clouds = eval_clouds(ds, test, cfg.n_points, cfg.seed)?;
    let embeddings = encode_all(encoder, &clouds)?;
    let rankings = embeddings
        .iter()
        .map(|e| {
            let logits = crate::encoder::classify(head, e)?;
            Ok(rank_by_score(logits.iter().enumerate().map(|(i, &l)| (i, f64::from(l))).collect())
                .into_iter()
                .map(|(c, _)| c)
                .collect())
        })
        .collect::<Result<Vec<Vec<usize>>>>()?;
    let labels: Vec<usize> = test.iter().map(|&i| ds.records()[i].label).collect();
    let mut report = compute_metrics(&rankings, &labels, &[1, 5], &names)?;
    report.config = serde_json::json!({
        "protocol": "finetune",
        "epochs": cfg.epochs,
        "freeze_encoder": cfg.freeze_encoder,
        "n_points": cfg.n_points,
        "seed": cfg.seed,
    });
    Ok(report)
}

/// Per class, keeps `floor(fraction · count)` of the given records chosen by
/// a seeded shuffle. The kept indices stay in their original order.
pub fn stratified_subsample(ds: &Dataset, indices: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_class.entry(ds.records()[i].label).or_default().push(i);
    }
    let root = Rng::new(seed, 4);
    let mut kept = Vec::new();
    for (&class, members) in &by_class {
        let take = (fraction * members.len() as f64 + 1e-9).floor() as usize;
        if take == 0 {
            return Err(Error::FractionTooSmall { fraction, class });
        }
        let mut shuffled = members.clone();
        root.derive("subsample.class", class as u64).shuffle(&mut shuffled);
        kept.extend_from_slice(&shuffled[..take]);
    }
    kept.sort_unstable();
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub modalities: String,
    pub beta: f32,
    pub theta: f32,
    pub top1: f64,
    pub top5: f64,
    pub per_seed_top1: Vec<f64>,
}

/// The three pre-training configurations compared by the ablation.
pub const ABLATION_CONFIGS: [(&str, f32, f32); 3] = [("P+T", 0.0, 1.0), ("P+I", 1.0, 0.0), ("P+I+T", 1.0, 1.0)];

/// Pre-trains once per configuration and seed, then evaluates zero-shot on
/// the test split against all dataset categories.
pub fn modality_ablation(
    ds: &Dataset,
    anchors: &Anchors,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let names = ds.category_names();
    let cats = CategoryAnchors::from_table(&names, &anchors.text)?;
    let filter = filter_category_set(&names, "ALL", None)?;
    let mut rows = Vec::new();
    for (label, beta, theta) in ABLATION_CONFIGS {
        let mut top1 = Vec::new();
        let mut top5 = Vec::new();
        for &seed in seeds {
            let run_cfg = TrainConfig {
                seed,
                coefficients: LossCoefficients { alpha: 0.0, beta, theta },
                ..cfg.clone()
            };
            let out = pretrain(ds, anchors, &run_cfg)?;
            let report = zeroshot_eval(&out.checkpoint.encoder, ds, &cats, &filter, eval)?;
            top1.push(report.top(1).unwrap_or(0.0));
            top5.push(report.top(5).unwrap_or(0.0));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        rows.push(AblationRow { modalities: label.into(), beta, theta, top1: mean(&top1), top5: mean(&top5), per_seed_top1: top1 });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("modalities,beta,theta,top1,top5\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:.2},{:.2}", r.modalities, r.beta, r.theta, r.top1, r.top5);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub seed: u64,
    /// `pretrained` or `random`.
    pub init: String,
    pub overall_accuracy: f64,
}

/// For each fraction and seed, fine-tunes from `pretrained` and from a
/// random initialization of the same architecture.
pub fn data_efficiency_sweep(
    pretrained: &EncoderParams,
    ds: &Dataset,
    fractions: &[f64],
    seeds: &[u64],
    cfg: &FinetuneConfig,
) -> Result<Vec<SweepRow>> {
    let train = ds.indices(Split::Train);
    let test = ds.indices(Split::Test);
    let mut rows = Vec::new();
    for &fraction in fractions {
        for &seed in seeds {
            let subset = stratified_subsample(ds, &train, fraction, seed)?;
            let run = FinetuneConfig { seed, ..cfg.clone() };
            let random = random_init_like(pretrained.config(), seed)?;
            for (init, params) in [("pretrained", pretrained.clone()), ("random", random)] {
                let (_, report) = finetune(params, ds, &subset, &test, &run)?;
                rows.push(SweepRow { fraction, seed, init: init.into(), overall_accuracy: report.overall_accuracy });
            }
        }
    }
    Ok(rows)
}

/// A freshly initialized encoder with the same architecture.
pub fn random_init_like(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    EncoderParams::from_config(seed, config)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("fraction,seed,init,overall_accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:.4}", r.fraction, r.seed, r.init, r.overall_accuracy);
    }
    out
}
