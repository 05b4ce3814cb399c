//! Tri-modal contrastive pre-training.
//!
//! Each pair of modalities contributes a symmetric InfoNCE term over the
//! similarity matrix scaled by a learnable inverse temperature. Only the
//! point encoder and the temperature are updated; text and image anchors
//! enter the graph as constants.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::{select_view, text_anchor, AnchorTable, ViewCandidateSet};
use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::dataset::{Dataset, Split};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::pointcloud::{augment, normalize_unit_sphere, resample, AugmentConfig, PointCloud};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

/// CLIP's starting point, `1/0.07`.
pub const DEFAULT_INV_TEMPERATURE: f32 = 14.285;
pub const DEFAULT_CLAMP_MAX: f32 = 100.0;
/// Largest tolerated deviation of an input row's norm from 1.
pub const UNIT_ROW_TOLERANCE: f64 = 1e-3;

/// Learnable temperature stored as `s = log(1/τ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    s: f32,
    clamp_max: f32,
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature::new(DEFAULT_INV_TEMPERATURE, DEFAULT_CLAMP_MAX).expect("defaults are valid")
    }
}

impl Temperature {
    pub fn new(inv_tau: f32, clamp_max: f32) -> Result<Self> {
        if !(inv_tau > 0.0 && inv_tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("inverse temperature must be positive, got {inv_tau}")));
        }
        Temperature::from_log(inv_tau.ln(), clamp_max)
    }

    pub fn from_log(s: f32, clamp_max: f32) -> Result<Self> {
        if !(clamp_max > 0.0 && clamp_max.is_finite()) || !s.is_finite() {
            return Err(Error::InvalidConfig(format!("bad temperature state s={s} clamp_max={clamp_max}")));
        }
        let mut t = Temperature { s, clamp_max };
        t.set_log(s);
        Ok(t)
    }

    pub fn s(&self) -> f32 {
        self.s
    }

    pub fn inv_tau(&self) -> f32 {
        self.s.exp()
    }

    pub fn tau(&self) -> f32 {
        (-self.s).exp()
    }

    pub fn clamp_max(&self) -> f32 {
        self.clamp_max
    }

    /// Sets `s`, clamping so that `1/τ` never exceeds the ceiling.
    pub fn set_log(&mut self, s: f32) {
        self.s = s.min(self.clamp_max.ln());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossCoefficients {
    /// Weight of the image-text term.
    pub alpha: f32,
    /// Weight of the image-point term.
    pub beta: f32,
    /// Weight of the point-text term.
    pub theta: f32,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        LossCoefficients { alpha: 0.0, beta: 1.0, theta: 1.0 }
    }
}

impl LossCoefficients {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.theta].iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::InvalidConfig(format!("loss coefficients must be non-negative: {self:?}")));
        }
        Ok(())
    }

    pub fn trains_encoder(&self) -> bool {
        self.beta > 0.0 || self.theta > 0.0
    }

    pub fn uses_images(&self) -> bool {
        self.alpha > 0.0 || self.beta > 0.0
    }

    pub fn uses_text(&self) -> bool {
        self.alpha > 0.0 || self.theta > 0.0
    }
}

/// Errors unless every row of `t` has unit norm within [`UNIT_ROW_TOLERANCE`].
pub fn check_unit_rows(t: &Tensor) -> Result<()> {
    for (row, r) in t.rows().enumerate() {
        let norm = tensor::norm(r);
        if (norm - 1.0).abs() > UNIT_ROW_TOLERANCE {
            return Err(Error::NonUnitRows { row, norm });
        }
    }
    Ok(())
}

/// Symmetric InfoNCE between row sets `ha` and `hb` with positives on the
/// diagonal. `s` is the log inverse temperature. Summed over the batch
/// unless `mean` is set.
pub fn contrastive_loss(g: &mut Graph, ha: Var, hb: Var, s: Var, mean: bool) -> Result<Var> {
    let (n, d) = tensor::matrix_dims(g.value(ha), "contrastive lhs")?;
    if g.value(hb).shape() != [n, d] {
        return Err(Error::ShapeMismatch(format!("contrastive pair {:?} vs {:?}", [n, d], g.value(hb).shape())));
    }
    check_unit_rows(g.value(ha))?;
    check_unit_rows(g.value(hb))?;
    let inv_tau = g.exp(s)?;
    let logits = g.scaled_dot(ha, hb, inv_tau)?;
    info_nce(g, logits, mean)
}

/// Symmetric cross-entropy of a square logit matrix against its diagonal.
pub fn info_nce(g: &mut Graph, logits: Var, mean: bool) -> Result<Var> {
    let (n, m) = tensor::matrix_dims(g.value(logits), "info_nce")?;
    if n != m {
        return Err(Error::ShapeMismatch(format!("logit matrix must be square, got {n}x{m}")));
    }
    let targets: Vec<usize> = (0..n).collect();
    let rows = g.cross_entropy(logits, &targets)?;
    let logits_t = g.transpose(logits)?;
    let cols = g.cross_entropy(logits_t, &targets)?;
    let both = g.add(rows, cols)?;
    g.scale(both, if mean { 0.5 / n as f32 } else { 0.5 })
}

/// Graph-free evaluation of [`contrastive_loss`] in matrix form with every
/// intermediate held in `f64`. The graph version rounds its logits and
/// result to `f32`; this one is the reference for reported loss values.
pub fn contrastive_loss_value(ha: &Tensor, hb: &Tensor, temp: &Temperature, mean: bool) -> Result<f64> {
    let (n, d) = tensor::matrix_dims(ha, "contrastive lhs")?;
    if hb.shape() != [n, d] {
        return Err(Error::ShapeMismatch(format!("contrastive pair {:?} vs {:?}", [n, d], hb.shape())));
    }
    check_unit_rows(ha)?;
    check_unit_rows(hb)?;
    let inv_tau = f64::from(temp.s()).exp();
    let logits: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| inv_tau * tensor::dot(ha.row(i), hb.row(j)))
        .collect();
    let lse = |values: &mut dyn Iterator<Item = f64>| -> f64 {
        let v: Vec<f64> = values.collect();
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
    };
    let mut total = 0.0;
    for i in 0..n {
        let diag = logits[i * n + i];
        let row = lse(&mut (0..n).map(|j| logits[i * n + j]));
        let col = lse(&mut (0..n).map(|j| logits[j * n + i]));
        total += 0.5 * (row - diag) + 0.5 * (col - diag);
    }
    Ok(if mean { total / n as f64 } else { total })
}

/// Handles for the terms of the weighted objective. Terms whose
/// coefficient is zero are not built.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub image_text: Option<Var>,
    pub image_point: Option<Var>,
    pub point_text: Option<Var>,
}

/// `alpha·L(I,S) + beta·L(I,P) + theta·L(P,S)`.
pub fn final_loss(
    g: &mut Graph,
    (hi, hs, hp): (Var, Var, Var),
    coefs: &LossCoefficients,
    s: Var,
    mean: bool,
) -> Result<LossTerms> {
    coefs.validate()?;
    let mut total: Option<Var> = None;
    let mut term = |g: &mut Graph, coef: f32, a: Var, b: Var| -> Result<Option<Var>> {
        if coef == 0.0 {
            return Ok(None);
        }
        let l = contrastive_loss(g, a, b, s, mean)?;
        let weighted = g.scale(l, coef)?;
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
        Ok(Some(l))
    };
    let image_text = term(g, coefs.alpha, hi, hs)?;
    let image_point = term(g, coefs.beta, hi, hp)?;
    let point_text = term(g, coefs.theta, hp, hs)?;
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(LossTerms { total, image_text, image_point, point_text })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moments, one buffer per parameter block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// One AdamW update. `decay[i]` selects which blocks receive decoupled
/// weight decay; `lr` overrides the configured rate for schedules.
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    decay: &[bool],
    state: &mut AdamState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || decay.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} decay flags",
            params.len(),
            grads.len(),
            decay.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
        return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let shrink = if decay[i] { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (x, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = f64::from(g);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            *x = (f64::from(*x) * shrink - lr * update) as f32;
        }
    }
    Ok(())
}

/// Learning rate at `iteration` of `total` under optional cosine decay.
pub fn scheduled_lr(base: f64, iteration: usize, total: usize, cosine: bool) -> f64 {
    if !cosine || total == 0 {
        return base;
    }
    let progress = iteration as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub n_points: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub coefficients: LossCoefficients,
    pub init_inv_temperature: f32,
    pub clamp_max: f32,
    /// Average the loss over the batch instead of summing it.
    pub mean_reduction: bool,
    pub cosine_schedule: bool,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 250,
            n_points: 1024,
            seed: 0,
            optimizer: AdamWConfig::default(),
            coefficients: LossCoefficients::default(),
            init_inv_temperature: DEFAULT_INV_TEMPERATURE,
            clamp_max: DEFAULT_CLAMP_MAX,
            mean_reduction: false,
            cosine_schedule: false,
            augment: AugmentConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_points == 0 {
            return Err(Error::InvalidConfig("batch_size and n_points must be positive".into()));
        }
        self.optimizer.validate()?;
        self.coefficients.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        Temperature::new(self.init_inv_temperature, self.clamp_max)?;
        Ok(())
    }
}

/// Frozen text and image tables used during pre-training.
#[derive(Clone, Debug)]
pub struct Anchors {
    pub text: AnchorTable,
    pub image: AnchorTable,
}

/// One usable training object: its record index, the words that have text
/// rows, and its view candidates.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub record: usize,
    pub words: Vec<String>,
    pub views: Option<ViewCandidateSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub epoch: usize,
    pub l_ip: f32,
    pub l_ps: f32,
    pub l_is: f32,
    pub l_final: f32,
    pub inv_temperature: f32,
}

pub const TRACE_HEADER: &str = "iteration,epoch,L_IP,L_PS,L_IS,L_final,inv_temperature";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iteration, r.epoch, r.l_ip, r.l_ps, r.l_is, r.l_final, r.inv_temperature
        );
    }
    out
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    fsutil::write_atomic(path, trace_csv(rows).as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub iterations: usize,
    pub records_used: usize,
    pub skipped: Vec<SkippedRecord>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
    pub report: RunReport,
}

impl PretrainOutput {
    /// Mean total loss over the last epoch's iterations.
    pub fn final_epoch_loss(&self) -> Option<f32> {
        let last = self.trace.last()?.epoch;
        let tail: Vec<f32> = self.trace.iter().filter(|r| r.epoch == last).map(|r| r.l_final).collect();
        Some(tail.iter().sum::<f32>() / tail.len() as f32)
    }
}

/// Resolves each training record to a triplet, skipping records that lack a
/// modality the objective needs.
pub fn build_triplets(ds: &Dataset, anchors: &Anchors, coefs: &LossCoefficients) -> (Vec<Triplet>, Vec<SkippedRecord>) {
    let mut triplets = Vec::new();
    let mut skipped = Vec::new();
    for i in ds.indices(Split::Train) {
        let r = &ds.records()[i];
        let words: Vec<String> = r.words.iter().filter(|w| !anchors.text.text_rows(w).is_empty()).cloned().collect();
        let views = ViewCandidateSet::from_depth_views(&r.id, anchors.image.image_ids(&r.id)).ok();
        let missing = if coefs.uses_text() && words.is_empty() {
            Some("no word with text anchors")
        } else if coefs.uses_images() && views.is_none() {
            Some("no image view candidates")
        } else {
            None
        };
        match missing {
            Some(reason) => {
                log::warn!("{}", Error::MissingModality(r.id.clone(), reason.into()));
                skipped.push(SkippedRecord { id: r.id.clone(), reason: reason.into() });
            }
            None => triplets.push(Triplet { record: i, words, views }),
        }
    }
    (triplets, skipped)
}

/// The un-augmented evaluation view of a cloud: resample then normalize.
pub fn prepare_cloud(pc: &PointCloud, n_points: usize, rng: &mut Rng) -> Result<PointCloud> {
    Ok(normalize_unit_sphere(&resample(pc, n_points, rng)?))
}

fn diverged(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::DivergedLoss { iteration, detail: format!("non-finite value in {what}") },
        other => other,
    }
}

/// Aligns a freshly initialized point encoder to the frozen anchors.
pub fn pretrain(ds: &Dataset, anchors: &Anchors, cfg: &TrainConfig) -> Result<PretrainOutput> {
    let params = EncoderParams::from_config(cfg.seed, &cfg.encoder)?;
    pretrain_from(ds, anchors, cfg, params)
}

pub fn pretrain_from(ds: &Dataset, anchors: &Anchors, cfg: &TrainConfig, mut params: EncoderParams) -> Result<PretrainOutput> {
    cfg.validate()?;
    let dim = params.embed_dim();
    anchors.text.expect_dim(dim)?;
    anchors.image.expect_dim(dim)?;
    let coefs = cfg.coefficients;
    let (triplets, skipped) = build_triplets(ds, anchors, &coefs);
    if triplets.is_empty() {
        return Err(Error::EmptySplit);
    }

    let mut word_anchors: HashMap<&str, Vec<f32>> = HashMap::new();
    for w in triplets.iter().flat_map(|t| &t.words) {
        if !word_anchors.contains_key(w.as_str()) {
            word_anchors.insert(w, text_anchor(&anchors.text.text_rows(w))?);
        }
    }

    let mut temp = Temperature::new(cfg.init_inv_temperature, cfg.clamp_max)?;
    let decay: Vec<bool> = params.blocks().iter().map(|(name, _)| name.ends_with("weight")).chain([false]).collect();
    let mut state = AdamState::default();
    let root = Rng::new(cfg.seed, 1);
    let per_epoch = triplets.len().div_ceil(cfg.batch_size);
    let total_iters = per_epoch * cfg.epochs;
    let mut trace = Vec::with_capacity(total_iters);
    let mut iteration = 0;

    for epoch in 0..cfg.epochs {
        let order = root.derive("pretrain.epoch", epoch as u64).permutation(triplets.len());
        for chunk in order.chunks(cfg.batch_size) {
            let mut clouds = Vec::with_capacity(chunk.len());
            let mut hs_rows = Vec::with_capacity(chunk.len() * dim);
            let mut hi_rows = Vec::with_capacity(chunk.len() * dim);
            for &t in chunk {
                let trip = &triplets[t];
                let mut rng = root.derive("pretrain.sample", ((epoch as u64) << 32) | t as u64);
                if coefs.uses_text() {
                    let word = &trip.words[rng.below(trip.words.len())];
                    hs_rows.extend_from_slice(&word_anchors[word.as_str()]);
                }
                if let (true, Some(views)) = (coefs.uses_images(), &trip.views) {
                    let id = select_view(views, &mut rng)?;
                    hi_rows.extend_from_slice(anchors.image.get(id).expect("candidate ids come from the table"));
                }
                let pc = prepare_cloud(ds.cloud(trip.record), cfg.n_points, &mut rng)?;
                clouds.push(augment(&pc, &cfg.augment, &mut rng));
            }
            let b = clouds.len();

            let mut g = Graph::new();
            let vars = params.bind(&mut g, true);
            let s = g.parameter(Tensor::scalar(temp.s()));
            let hp = params.forward(&mut g, &vars, &clouds).map_err(diverged(iteration))?;
            let placeholder = |g: &mut Graph, rows: Vec<f32>| -> Result<Var> {
                Ok(if rows.is_empty() { hp } else { g.constant(Tensor::new(vec![b, dim], rows)?) })
            };
            let hs = placeholder(&mut g, hs_rows)?;
            let hi = placeholder(&mut g, hi_rows)?;
            let terms = final_loss(&mut g, (hi, hs, hp), &coefs, s, cfg.mean_reduction).map_err(diverged(iteration))?;
            let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
            let row = TraceRow {
                iteration,
                epoch,
                l_ip: value(terms.image_point),
                l_ps: value(terms.point_text),
                l_is: value(terms.image_text),
                l_final: g.value(terms.total).item(),
                inv_temperature: temp.inv_tau(),
            };
            if !row.l_final.is_finite() {
                return Err(Error::DivergedLoss { iteration, detail: format!("loss is {}", row.l_final) });
            }
            let grads = g.backward(terms.total).map_err(diverged(iteration))?;
            let leaves: Vec<Var> = vars.all().into_iter().chain([s]).collect();
            let grad_tensors: Vec<Tensor> = leaves.iter().map(|&v| grads.get_or_zeros(v, g.value(v).shape())).collect();

            let mut s_tensor = Tensor::scalar(temp.s());
            let mut blocks = params.blocks_mut();
            blocks.push(&mut s_tensor);
            let lr = scheduled_lr(cfg.optimizer.learning_rate, iteration, total_iters, cfg.cosine_schedule);
            optimizer_step(&mut blocks, &grad_tensors, &decay, &mut state, &cfg.optimizer, lr)?;
            if !s_tensor.item().is_finite() || params.blocks().iter().any(|(_, t)| !t.is_finite()) {
                return Err(Error::DivergedLoss { iteration, detail: "parameters became non-finite".into() });
            }
            temp.set_log(s_tensor.item());
            trace.push(row);
            iteration += 1;
        }
        if let Some(last) = trace.last() {
            log::info!("epoch {epoch}: loss {:.4} 1/tau {:.3}", last.l_final, temp.inv_tau());
        }
    }

    let metadata = serde_json::json!({
        "kind": "pretrain",
        "epochs": cfg.epochs,
        "iterations": iteration,
        "seed": cfg.seed,
        "coefficients": coefs,
        "records_used": triplets.len(),
    });
    let report = RunReport { iterations: iteration, records_used: triplets.len(), skipped };
    Ok(PretrainOutput { checkpoint: Checkpoint { encoder: params, temperature: temp, head: None, metadata }, trace, report })
}
