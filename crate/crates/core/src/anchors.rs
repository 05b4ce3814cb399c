//! Frozen text and image anchors.
//!
//! The text and image encoders are never trained, so their outputs are
//! stored once in an [`AnchorTable`] and looked up by row id. Tables come
//! from three places: ingested exports of a real vision-language model,
//! deterministic stand-in encoders, or the pre-aligned oracle generator
//! used by the synthetic benchmark.
//!
//! Row ids follow two schemes: `text:{word}:{template}` for one prompt
//! embedding, and `image:{object}:{view}` for one rendered view.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::rng::{fnv1a, Rng};
use crate::tensor::{self, l2_normalize};

pub const WORD_TOKEN: &str = "[WORD]";
pub const PROMPT_COUNT: usize = 64;
/// Slots per object: one bank for RGB views and one for depth views.
pub const VIEW_CANDIDATES: usize = 60;

const SHIPPED_PROMPTS: &str = include_str!("../data/prompts.txt");
const TABLE_MAGIC: &[u8; 8] = b"ULIPEMB1";
pub const TABLE_HEADER_LEN: usize = 16;
/// Rows within this distance of unit norm are accepted as-is on load.
pub const UNIT_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSet {
    templates: Vec<String>,
}

impl PromptSet {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.len() != PROMPT_COUNT {
            return Err(Error::InvalidConfig(format!(
                "prompt set needs {PROMPT_COUNT} templates, got {}",
                templates.len()
            )));
        }
        if let Some(bad) = templates.iter().find(|t| t.matches(WORD_TOKEN).count() != 1) {
            return Err(Error::InvalidConfig(format!("template {bad:?} must contain {WORD_TOKEN} exactly once")));
        }
        Ok(PromptSet { templates })
    }

    /// The bundled 64 templates, `a point cloud model of [WORD].` first.
    pub fn shipped() -> Self {
        let templates = SHIPPED_PROMPTS.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned).collect();
        PromptSet::new(templates).expect("bundled prompt file is well formed")
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn instantiate_all(&self, word: &str) -> Result<Vec<String>> {
        self.templates.iter().map(|t| instantiate(t, word)).collect()
    }
}

pub fn instantiate(template: &str, word: &str) -> Result<String> {
    if word.trim().is_empty() {
        return Err(Error::EmptyWord);
    }
    Ok(template.replacen(WORD_TOKEN, word, 1))
}

/// All 64 shipped prompts for `word`, in template order.
pub fn build_prompt_set(word: &str) -> Result<Vec<String>> {
    PromptSet::shipped().instantiate_all(word)
}

/// Prompt-ensemble text feature: the mean of unit per-prompt rows,
/// renormalized.
pub fn text_anchor<R: AsRef<[f32]>>(per_prompt: &[R]) -> Result<Vec<f32>> {
    let first = per_prompt.first().ok_or(Error::DegenerateEmbedding(0.0))?;
    let dim = first.as_ref().len();
    let mut sum = vec![0.0f64; dim];
    for row in per_prompt {
        let row = row.as_ref();
        if row.len() != dim {
            return Err(Error::DimMismatch { expected: dim, got: row.len() });
        }
        for (s, &x) in sum.iter_mut().zip(row) {
            *s += f64::from(x);
        }
    }
    let n = per_prompt.len() as f64;
    let norm = sum.iter().map(|s| s * s).sum::<f64>().sqrt() / n;
    if norm <= tensor::MIN_NORM {
        return Err(Error::DegenerateEmbedding(norm));
    }
    let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
    l2_normalize(&mean)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewCandidateSet {
    object_id: String,
    candidates: Vec<String>,
    partial: bool,
}

impl ViewCandidateSet {
    /// `partial` permits fewer than the full 60 candidates.
    pub fn new(object_id: impl Into<String>, candidates: Vec<String>, partial: bool) -> Result<Self> {
        let object_id = object_id.into();
        if candidates.is_empty() {
            return Err(Error::NoCandidates);
        }
        if !partial && candidates.len() != VIEW_CANDIDATES {
            return Err(Error::InvalidConfig(format!(
                "object {object_id} has {} view candidates, expected {VIEW_CANDIDATES} (use partial mode)",
                candidates.len()
            )));
        }
        Ok(ViewCandidateSet { object_id, candidates, partial })
    }

    /// Depth-only candidates: the view ids fill the RGB bank and the depth
    /// bank alike. Thirty views give the full 60 slots.
    pub fn from_depth_views(object_id: impl Into<String>, view_ids: Vec<String>) -> Result<Self> {
        let partial = view_ids.len() * 2 != VIEW_CANDIDATES;
        let mut candidates = view_ids.clone();
        candidates.extend(view_ids);
        ViewCandidateSet::new(object_id, candidates, partial)
    }

    pub fn object_id(&self) -> &str {
        &self.object_id
    }

    pub fn candidates(&self) -> &[String] {
        &self.candidates
    }

    pub fn is_partial(&self) -> bool {
        self.partial
    }
}

pub fn select_view<'a>(set: &'a ViewCandidateSet, rng: &mut Rng) -> Result<&'a str> {
    if set.candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    Ok(&set.candidates[rng.below(set.candidates.len())])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Ingested,
    StandIn,
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Text,
    Image,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub id: String,
    pub kind: RowKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_index: Option<usize>,
}

impl RowMeta {
    pub fn text(word: &str, template_index: usize) -> Self {
        RowMeta {
            id: text_row_id(word, template_index),
            kind: RowKind::Text,
            word: Some(word.to_owned()),
            template_index: Some(template_index),
            object_id: None,
            view_index: None,
        }
    }

    pub fn image(object_id: &str, view_index: usize) -> Self {
        RowMeta {
            id: image_row_id(object_id, view_index),
            kind: RowKind::Image,
            word: None,
            template_index: None,
            object_id: Some(object_id.to_owned()),
            view_index: Some(view_index),
        }
    }
}

pub fn text_row_id(word: &str, template_index: usize) -> String {
    format!("text:{word}:{template_index}")
}

pub fn image_row_id(object_id: &str, view_index: usize) -> String {
    format!("image:{object_id}:{view_index}")
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    provenance: Provenance,
    dim: usize,
    rows: Vec<RowMeta>,
}

/// Frozen id-keyed table of unit-norm rows. There is no mutable access to
/// the rows once a table is built.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTable {
    dim: usize,
    provenance: Provenance,
    data: Vec<f32>,
    meta: Vec<RowMeta>,
    by_id: HashMap<String, usize>,
    /// Rows that were renormalized on construction.
    renormalized: usize,
}

impl AnchorTable {
    /// Builds a table, renormalizing any row whose norm is off by more than
    /// [`UNIT_TOLERANCE`].
    pub fn new(dim: usize, provenance: Provenance, meta: Vec<RowMeta>, mut data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("anchor dimension must be positive".into()));
        }
        if data.len() != meta.len() * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} rows of dim {dim} need {} values, got {}",
                meta.len(),
                meta.len() * dim,
                data.len()
            )));
        }
        let mut by_id = HashMap::with_capacity(meta.len());
        for (i, m) in meta.iter().enumerate() {
            if by_id.insert(m.id.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate anchor id {}", m.id)));
            }
        }
        let mut renormalized = 0;
        for (i, row) in data.chunks_mut(dim).enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("anchor table row"));
            }
            let n = tensor::norm(row);
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                log::warn!("anchor row {} ({}) has norm {n}, renormalizing", i, meta[i].id);
                row.copy_from_slice(&l2_normalize(row)?);
                renormalized += 1;
            }
        }
        Ok(AnchorTable { dim, provenance, data, meta, by_id, renormalized })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn renormalized(&self) -> usize {
        self.renormalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn meta(&self) -> &[RowMeta] {
        &self.meta
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.by_id.get(id).map(|&i| self.row(i))
    }

    pub fn expect_dim(&self, dim: usize) -> Result<()> {
        if self.dim == dim {
            Ok(())
        } else {
            Err(Error::DimMismatch { expected: dim, got: self.dim })
        }
    }

    /// Per-prompt rows for `word` in template order.
    pub fn text_rows(&self, word: &str) -> Vec<&[f32]> {
        let mut rows: Vec<(usize, usize)> = self
            .meta
            .iter()
            .enumerate()
            .filter(|(_, m)| m.kind == RowKind::Text && m.word.as_deref() == Some(word))
            .map(|(i, m)| (m.template_index.unwrap_or(i), i))
            .collect();
        rows.sort_unstable();
        rows.into_iter().map(|(_, i)| self.row(i)).collect()
    }

    /// Every word with at least one text row, in first-seen order.
    pub fn words(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.meta
            .iter()
            .filter_map(|m| m.word.as_deref())
            .filter(|w| seen.insert(*w))
            .collect()
    }

    /// Image row ids for `object_id`, ordered by view index.
    pub fn image_ids(&self, object_id: &str) -> Vec<String> {
        let mut rows: Vec<(usize, &str)> = self
            .meta
            .iter()
            .filter(|m| m.kind == RowKind::Image && m.object_id.as_deref() == Some(object_id))
            .map(|m| (m.view_index.unwrap_or(0), m.id.as_str()))
            .collect();
        rows.sort_unstable();
        rows.into_iter().map(|(_, id)| id.to_owned()).collect()
    }

    /// Text anchor of `word`, averaged over its per-prompt rows.
    pub fn word_anchor(&self, word: &str) -> Option<Result<Vec<f32>>> {
        let rows = self.text_rows(word);
        (!rows.is_empty()).then(|| text_anchor(&rows))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(TABLE_HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(TABLE_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }
}

/// Path of the JSON manifest stored next to a table file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    path.with_file_name(name)
}

pub fn save_table(table: &AnchorTable, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &table.to_bytes())?;
    let sidecar = Sidecar { provenance: table.provenance, dim: table.dim, rows: table.meta.clone() };
    fsutil::write_json(&sidecar_path(path), &sidecar)
}

pub fn load_table(path: &Path) -> Result<AnchorTable> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    if bytes.len() < TABLE_MAGIC.len() || &bytes[..TABLE_MAGIC.len()] != TABLE_MAGIC {
        return Err(Error::BadMagic { path: path.to_owned(), expected: "ULIPEMB1" });
    }
    if bytes.len() < TABLE_HEADER_LEN {
        return Err(Error::TruncatedFile(path.to_owned()));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let expected = TABLE_HEADER_LEN + rows * dim * 4;
    if bytes.len() < expected {
        return Err(Error::TruncatedFile(path.to_owned()));
    }
    if bytes.len() > expected {
        return Err(Error::BadHeader {
            path: path.to_owned(),
            reason: format!("{} trailing bytes after {rows} rows of dim {dim}", bytes.len() - expected),
        });
    }
    let sidecar: Sidecar = fsutil::read_json(&sidecar_path(path))?;
    if sidecar.dim != dim {
        return Err(Error::DimMismatch { expected: sidecar.dim, got: dim });
    }
    if sidecar.rows.len() != rows {
        return Err(Error::BadHeader {
            path: path.to_owned(),
            reason: format!("sidecar lists {} rows, file holds {rows}", sidecar.rows.len()),
        });
    }
    let data = bytes[TABLE_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    AnchorTable::new(dim, sidecar.provenance, sidecar.rows, data)
}

/// Offline text-encoder surrogate: the text hash picks a random stream that
/// emits a Gaussian vector, which is then normalized.
pub fn stand_in_text_embed(text: &str, dim: usize, seed: u64) -> Result<Vec<f32>> {
    if text.trim().is_empty() {
        return Err(Error::EmptyWord);
    }
    if dim == 0 {
        return Err(Error::InvalidConfig("embedding dimension must be positive".into()));
    }
    let mut rng = Rng::new(seed, fnv1a(text.as_bytes()));
    let v: Vec<f32> = (0..dim).map(|_| rng.normal() as f32).collect();
    l2_normalize(&v)
}

/// Stand-in text table: every prompt of every word through
/// [`stand_in_text_embed`].
pub fn stand_in_text_table(words: &[String], prompts: &PromptSet, dim: usize, seed: u64) -> Result<AnchorTable> {
    let mut meta = Vec::new();
    let mut data = Vec::new();
    for word in words {
        for (t, text) in prompts.instantiate_all(word)?.iter().enumerate() {
            meta.push(RowMeta::text(word, t));
            data.extend(stand_in_text_embed(text, dim, seed)?);
        }
    }
    AnchorTable::new(dim, Provenance::StandIn, meta, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub dim: usize,
    pub seed: u64,
    /// Per-component standard deviation of the noise on image rows.
    pub image_noise: f64,
    /// Per-component standard deviation of the jitter on text rows.
    pub prompt_jitter: f64,
    pub views: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { dim: 32, seed: 0, image_noise: 0.1, prompt_jitter: 0.1, views: 30 }
    }
}

/// One unit direction per category. When there are no more categories than
/// dimensions the directions are orthogonalized.
pub fn category_directions(k: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let root = Rng::new(seed, 0);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(k);
    for c in 0..k {
        let mut rng = root.derive("oracle.direction", c as u64);
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if k <= dim {
            for d in &dirs {
                let p: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n <= tensor::MIN_NORM {
            return Err(Error::DegenerateEmbedding(n));
        }
        v.iter_mut().for_each(|x| *x /= n);
        dirs.push(v);
    }
    Ok(dirs)
}

fn noisy_unit_row(dir: &[f64], sigma: f64, rng: &mut Rng) -> Result<Vec<f32>> {
    let v: Vec<f32> = dir.iter().map(|&d| (d + sigma * rng.normal()) as f32).collect();
    l2_normalize(&v)
}

/// Pre-aligned synthetic anchors. `words[c]` names category `c`;
/// `objects` lists `(object id, category)` pairs that receive image rows.
/// Returns the text table and the image table.
pub fn oracle_anchor_gen(
    words: &[String],
    objects: &[(String, usize)],
    prompts: &PromptSet,
    cfg: &OracleConfig,
) -> Result<(AnchorTable, AnchorTable)> {
    if words.len() < 2 {
        return Err(Error::InvalidConfig("oracle anchors need at least two categories".into()));
    }
    if cfg.dim < 2 {
        return Err(Error::InvalidConfig("oracle anchors need dim >= 2".into()));
    }
    if cfg.dim < words.len() {
        log::warn!("oracle anchors: {} categories exceed dim {}, directions will not be orthogonal", words.len(), cfg.dim);
    }
    let dirs = category_directions(words.len(), cfg.dim, cfg.seed)?;
    let root = Rng::new(cfg.seed, 1);

    let mut text_meta = Vec::new();
    let mut text_data = Vec::new();
    for (c, word) in words.iter().enumerate() {
        if word.trim().is_empty() {
            return Err(Error::EmptyWord);
        }
        for t in 0..prompts.templates().len() {
            let mut rng = root.derive(&format!("oracle.text.{word}"), t as u64);
            text_meta.push(RowMeta::text(word, t));
            text_data.extend(noisy_unit_row(&dirs[c], cfg.prompt_jitter, &mut rng)?);
        }
    }

    let mut image_meta = Vec::new();
    let mut image_data = Vec::new();
    for (object, c) in objects {
        let dir = dirs.get(*c).ok_or_else(|| Error::InvalidConfig(format!("object {object} has category {c} out of range")))?;
        for v in 0..cfg.views {
            let mut rng = root.derive(&format!("oracle.image.{object}"), v as u64);
            image_meta.push(RowMeta::image(object, v));
            image_data.extend(noisy_unit_row(dir, cfg.image_noise, &mut rng)?);
        }
    }

    Ok((
        AnchorTable::new(cfg.dim, Provenance::Oracle, text_meta, text_data)?,
        AnchorTable::new(cfg.dim, Provenance::Oracle, image_meta, image_data)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine;

    fn words(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("cat{i}")).collect()
    }

    #[test]
    fn shipped_prompts_are_well_formed() {
        let p = PromptSet::shipped();
        assert_eq!(p.templates().len(), 64);
        assert_eq!(p.templates()[0], "a point cloud model of [WORD].");
        assert!(p.templates().iter().all(|t| t.matches("[WORD]").count() == 1));
    }

    #[test]
    fn chair_prompts() {
        let set = build_prompt_set("chair").unwrap();
        assert_eq!(set.len(), 64);
        assert!(set.iter().all(|s| s.contains("chair") && !s.contains("[WORD]")));
        assert_eq!(set, build_prompt_set("chair").unwrap());
    }

    #[test]
    fn single_substitution() {
        assert_eq!(instantiate("a picture of [WORD]", "lamp").unwrap(), "a picture of lamp");
        assert!(matches!(instantiate("a [WORD]", " "), Err(Error::EmptyWord)));
        assert!(matches!(build_prompt_set(""), Err(Error::EmptyWord)));
    }

    #[test]
    fn prompt_set_validation() {
        assert!(PromptSet::new(vec!["[WORD]".into(); 63]).is_err());
        let mut t = vec!["[WORD]".to_string(); 64];
        t[3] = "no token".into();
        assert!(PromptSet::new(t).is_err());
    }

    #[test]
    fn text_anchor_examples() {
        assert_eq!(text_anchor(&[vec![0.6f32, 0.8]]).unwrap(), vec![0.6, 0.8]);
        let a = text_anchor(&[vec![1.0f32, 0.0], vec![0.0, 1.0]]).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((a[0] - h).abs() < 1e-7 && (a[1] - h).abs() < 1e-7);
        assert!(matches!(text_anchor(&[vec![1.0f32, 0.0], vec![-1.0, 0.0]]), Err(Error::DegenerateEmbedding(_))));
    }

    #[test]
    fn text_anchor_is_order_and_replication_invariant() {
        let rows: Vec<Vec<f32>> = (0..10).map(|i| stand_in_text_embed(&format!("p{i}"), 16, 3).unwrap()).collect();
        let base = text_anchor(&rows).unwrap();
        let mut shuffled = rows.clone();
        Rng::new(1, 0).shuffle(&mut shuffled);
        let doubled: Vec<Vec<f32>> = rows.iter().chain(&rows).cloned().collect();
        for other in [text_anchor(&shuffled).unwrap(), text_anchor(&doubled).unwrap()] {
            for (a, b) in base.iter().zip(&other) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn select_view_examples() {
        let one = ViewCandidateSet::new("o", vec!["v0".into()], true).unwrap();
        assert_eq!(select_view(&one, &mut Rng::new(0, 0)).unwrap(), "v0");
        assert!(matches!(ViewCandidateSet::new("o", vec![], true), Err(Error::NoCandidates)));
        assert!(ViewCandidateSet::new("o", vec!["a".into()], false).is_err());

        let ids: Vec<String> = (0..30).map(|v| image_row_id("o", v)).collect();
        let set = ViewCandidateSet::from_depth_views("o", ids).unwrap();
        assert_eq!(set.candidates().len(), 60);
        assert!(!set.is_partial());
        let a = select_view(&set, &mut Rng::new(9, 4)).unwrap();
        let b = select_view(&set, &mut Rng::new(9, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn select_view_is_uniform_over_slots() {
        let cands: Vec<String> = (0..60).map(|i| format!("c{i}")).collect();
        let set = ViewCandidateSet::new("o", cands.clone(), false).unwrap();
        let mut rng = Rng::new(2024, 0);
        let mut counts = HashMap::new();
        for _ in 0..6000 {
            *counts.entry(select_view(&set, &mut rng).unwrap().to_owned()).or_insert(0usize) += 1;
        }
        for c in &cands {
            let n = counts.get(c).copied().unwrap_or(0);
            assert!((60..=140).contains(&n), "{c}: {n}");
        }
    }

    fn sample_table(rows: usize, dim: usize) -> AnchorTable {
        let meta: Vec<RowMeta> = (0..rows).map(|i| RowMeta::image("obj", i)).collect();
        let data = (0..rows).flat_map(|i| stand_in_text_embed(&format!("r{i}"), dim, 0).unwrap()).collect();
        AnchorTable::new(dim, Provenance::StandIn, meta, data).unwrap()
    }

    #[test]
    fn table_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.emb");
        let table = sample_table(100, 512);
        save_table(&table, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 100 * 512 * 4);
        let loaded = load_table(&path).unwrap();
        assert_eq!(loaded, table);
        save_table(&loaded, &dir.path().join("u.emb")).unwrap();
        assert_eq!(std::fs::read(dir.path().join("u.emb")).unwrap(), bytes);
    }

    #[test]
    fn load_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.emb");
        save_table(&sample_table(3, 8), &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_table(&path), Err(Error::BadMagic { .. })));

        std::fs::write(&path, &good[..good.len() - 4]).unwrap();
        assert!(matches!(load_table(&path), Err(Error::TruncatedFile(_))));

        let mut wrong_dim = good.clone();
        wrong_dim[12..16].copy_from_slice(&4u32.to_le_bytes());
        wrong_dim.truncate(16 + 3 * 4 * 4);
        std::fs::write(&path, &wrong_dim).unwrap();
        assert!(matches!(load_table(&path), Err(Error::DimMismatch { expected: 8, got: 4 })));
    }

    #[test]
    fn non_unit_rows_are_renormalized() {
        let meta = vec![RowMeta::image("o", 0), RowMeta::image("o", 1)];
        let t = AnchorTable::new(2, Provenance::Ingested, meta, vec![3.0, 4.0, 1.0, 0.0]).unwrap();
        assert_eq!(t.renormalized(), 1);
        assert!((t.row(0)[0] - 0.6).abs() < 1e-7);
        assert!(t.expect_dim(3).is_err());
    }

    #[test]
    fn stand_in_text_examples() {
        let a = stand_in_text_embed("a chair", 512, 1).unwrap();
        assert_eq!(a, stand_in_text_embed("a chair", 512, 1).unwrap());
        assert!((tensor::norm(&a) - 1.0).abs() < 1e-6);
        assert!(matches!(stand_in_text_embed("", 8, 1), Err(Error::EmptyWord)));
        let vs: Vec<Vec<f32>> = (0..100).map(|i| stand_in_text_embed(&format!("string {i}"), 512, 1).unwrap()).collect();
        for i in 0..100 {
            for j in i + 1..100 {
                assert!(cosine(&vs[i], &vs[j]).abs() < 0.25);
            }
        }
    }

    #[test]
    fn oracle_without_noise_reproduces_directions() {
        let w = words(4);
        let objects = vec![("o1".to_string(), 2usize)];
        let cfg = OracleConfig { dim: 8, seed: 5, image_noise: 0.0, prompt_jitter: 0.0, views: 3 };
        let (text, image) = oracle_anchor_gen(&w, &objects, &PromptSet::shipped(), &cfg).unwrap();
        let dirs = category_directions(4, 8, 5).unwrap();
        let want: Vec<f32> = l2_normalize(&dirs[2].iter().map(|&x| x as f32).collect::<Vec<_>>()).unwrap();
        assert_eq!(text.text_rows("cat2").len(), 64);
        for row in text.text_rows("cat2") {
            assert_eq!(row, &want[..]);
        }
        for id in image.image_ids("o1") {
            assert_eq!(image.get(&id).unwrap(), &want[..]);
        }
    }

    #[test]
    fn oracle_directions_are_separated() {
        for seed in 0..5 {
            let dirs = category_directions(8, 32, seed).unwrap();
            for i in 0..8 {
                for j in i + 1..8 {
                    let c: f64 = dirs[i].iter().zip(&dirs[j]).map(|(a, b)| a * b).sum();
                    assert!(c.abs() < 0.6);
                }
            }
        }
    }

    #[test]
    fn oracle_within_category_beats_cross_category() {
        let w = words(8);
        let objects: Vec<(String, usize)> = (0..16).map(|i| (format!("o{i}"), i % 8)).collect();
        let cfg = OracleConfig { dim: 32, seed: 11, image_noise: 0.1, prompt_jitter: 0.1, views: 4 };
        let (text, image) = oracle_anchor_gen(&w, &objects, &PromptSet::shipped(), &cfg).unwrap();
        let (mut within, mut nw, mut cross, mut nc) = (0.0, 0, 0.0, 0);
        for (object, c) in &objects {
            for id in image.image_ids(object) {
                let img = image.get(&id).unwrap();
                for (k, word) in w.iter().enumerate() {
                    for t in text.text_rows(word) {
                        if k == *c {
                            within += cosine(img, t);
                            nw += 1;
                        } else {
                            cross += cosine(img, t);
                            nc += 1;
                        }
                    }
                }
            }
        }
        assert!(within / nw as f64 > cross / nc as f64);
    }

    #[test]
    fn words_and_lookup() {
        let w = words(2);
        let t = stand_in_text_table(&w, &PromptSet::shipped(), 8, 0).unwrap();
        assert_eq!(t.words(), vec!["cat0", "cat1"]);
        assert_eq!(t.len(), 128);
        assert!(t.get(&text_row_id("cat1", 63)).is_some());
        assert!(t.word_anchor("dog").is_none());
    }
}
