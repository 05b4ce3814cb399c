//! Finite-difference verification of the autodiff engine.
//!
//! Every case pairs a graph computation with an independent `f64` reference
//! written as plain loops. Analytic gradients come from the graph; numeric
//! ones from central differences of the reference with step [`STEP`].
//! Non-scalar outputs are reduced against fixed random weights so that
//! every Jacobian entry contributes.
//!
//! ReLU and max-pool are only piecewise smooth. The reference reports which
//! piece it evaluated (ReLU signs and pool winners); when a perturbation of
//! `±STEP` switches pieces the coordinate is retried with smaller steps, and
//! if no step stays on one piece it is counted as skipped.

use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::encoder::{EncoderConfig, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::rng::Rng;
use crate::tensor::{self, Tensor};
use crate::train::{contrastive_loss, final_loss, LossCoefficients};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
/// Gradient magnitude below which errors are measured absolutely. The
/// analytic side is computed in `f32`, so entries much smaller than the
/// loss scale carry no meaningful relative precision.
pub const FLOOR: f64 = 1e-3;
const FALLBACK_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];

/// Per-case batch size and embedding width for the loss checks.
pub const BATCH: usize = 4;
pub const DIM: usize = 16;
const POINTS: usize = 16;
const WIDTHS: [usize; 2] = [16, 32];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub seed: u64,
    pub elements: usize,
    pub max_rel_error: f64,
    /// Coordinates checked with a step smaller than [`STEP`].
    pub reduced_step: usize,
    /// Coordinates with no smooth neighbourhood at any step.
    pub skipped: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn skipped(&self) -> usize {
        self.cases.iter().map(|c| c.skipped).sum()
    }

    pub fn elements(&self) -> usize {
        self.cases.iter().map(|c| c.elements).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < TOLERANCE
    }
}

/// Reference output values and the smooth piece they came from.
type RefOutput = (Vec<f64>, Vec<u32>);
type Reference<'a> = dyn Fn(&[Vec<f64>]) -> RefOutput + 'a;
type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn weighted(out: &[f64], weights: &[f64]) -> f64 {
    out.iter().zip(weights).map(|(o, w)| o * w).sum()
}

/// Gradient-checks one case. All `inputs` are trainable leaves.
fn check(name: &str, seed: u64, inputs: Vec<Tensor>, build: &Builder<'_>, reference: &Reference<'_>) -> Result<CaseReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.parameter(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let shape = g.value(out).shape().to_vec();
    let mut wrng = Rng::new(seed, 9).derive("gradcheck.weights", 0);
    let weights: Vec<f64> = (0..g.value(out).len()).map(|_| wrng.uniform_range(-1.0, 1.0)).collect();
    let w = g.constant(Tensor::new(shape, weights.iter().map(|&x| x as f32).collect())?);
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod)?;
    let grads = g.backward(loss)?;

    let base: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().iter().map(|&x| f64::from(x)).collect()).collect();
    let (_, base_pattern) = reference(&base);
    let mut report = CaseReport { name: name.into(), seed, elements: 0, max_rel_error: 0.0, reduced_step: 0, skipped: 0 };
    let mut point = base.clone();
    for (k, (var, t)) in vars.iter().zip(&inputs).enumerate() {
        let analytic = grads.get_or_zeros(*var, t.shape());
        for e in 0..t.len() {
            report.elements += 1;
            let mut numeric = None;
            for (attempt, h) in std::iter::once(STEP).chain(FALLBACK_STEPS).enumerate() {
                point[k][e] = base[k][e] + h;
                let (plus, p_plus) = reference(&point);
                point[k][e] = base[k][e] - h;
                let (minus, p_minus) = reference(&point);
                point[k][e] = base[k][e];
                if p_plus == base_pattern && p_minus == base_pattern {
                    numeric = Some((weighted(&plus, &weights) - weighted(&minus, &weights)) / (2.0 * h));
                    if attempt > 0 {
                        report.reduced_step += 1;
                    }
                    break;
                }
            }
            match numeric {
                Some(n) => {
                    let err = relative_error(f64::from(analytic.data()[e]), n);
                    report.max_rel_error = report.max_rel_error.max(err);
                }
                None => report.skipped += 1,
            }
        }
    }
    Ok(report)
}

fn gaussian(rng: &mut Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape, (0..n).map(|_| (scale * rng.normal()) as f32).collect())
}

fn unit_rows(rng: &mut Rng, n: usize, d: usize) -> Tensor {
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|_| tensor::l2_normalize(&(0..d).map(|_| rng.normal() as f32).collect::<Vec<_>>()).expect("nonzero"))
        .collect();
    Tensor::from_rows(&rows).expect("rectangular")
}

// ---- f64 reference helpers -------------------------------------------------

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

fn lse(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn normalize_rows(x: &[f64], d: usize) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(move |v| v / n)
        })
        .collect()
}

/// Symmetric InfoNCE as a double loop over the similarity definition.
fn info_nce_ref(a: &[f64], b: &[f64], s: f64, n: usize, d: usize) -> f64 {
    let sim = |i: usize, j: usize| s.exp() * (0..d).map(|k| a[i * d + k] * b[j * d + k]).sum::<f64>();
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| sim(i, j)).collect();
        let col: Vec<f64> = (0..n).map(|j| sim(j, i)).collect();
        total += 0.5 * (lse(&row) - sim(i, i)) + 0.5 * (lse(&col) - sim(i, i));
    }
    total
}

/// Per-point MLP, max-pool and normalized projection. `params` holds
/// weight and bias for every layer then the projection.
fn encoder_ref(params: &[Vec<f64>], points: &[f64], clouds: usize, widths: &[usize], dim: usize, pattern: &mut Vec<u32>) -> Vec<f64> {
    let rows = points.len() / 3;
    let mut x = points.to_vec();
    let mut width = 3;
    for (l, &w) in widths.iter().enumerate() {
        let mut h = mm(&x, &params[2 * l], rows, width, w);
        for (i, v) in h.iter_mut().enumerate() {
            *v += params[2 * l + 1][i % w];
            pattern.push(u32::from(*v > 0.0));
            *v = v.max(0.0);
        }
        x = h;
        width = w;
    }
    let per = rows / clouds;
    let mut pooled = vec![f64::NEG_INFINITY; clouds * width];
    for c in 0..clouds {
        for j in 0..width {
            let mut best = 0;
            for r in 0..per {
                let v = x[(c * per + r) * width + j];
                if v > pooled[c * width + j] {
                    pooled[c * width + j] = v;
                    best = r;
                }
            }
            pattern.push(best as u32);
        }
    }
    let l = widths.len();
    let mut z = mm(&pooled, &params[2 * l], clouds, width, dim);
    for (i, v) in z.iter_mut().enumerate() {
        *v += params[2 * l + 1][i % dim];
    }
    normalize_rows(&z, dim)
}

fn bind_vars(vars: &[Var], layers: usize) -> EncoderVars {
    EncoderVars {
        layers: (0..layers).map(|l| (vars[2 * l], vars[2 * l + 1])).collect(),
        projection: (vars[2 * layers], vars[2 * layers + 1]),
    }
}

fn random_clouds(rng: &mut Rng, clouds: usize, points: usize) -> Vec<PointCloud> {
    (0..clouds)
        .map(|_| {
            let pts = (0..points).map(|_| std::array::from_fn(|_| rng.uniform_range(-1.0, 1.0) as f32)).collect();
            PointCloud::new(pts, None).expect("nonempty")
        })
        .collect()
}

fn flat_points(clouds: &[PointCloud]) -> Vec<f64> {
    clouds.iter().flat_map(|c| c.points().iter().flatten().map(|&v| f64::from(v))).collect()
}

// ---- cases -----------------------------------------------------------------

fn primitive_cases(seed: u64) -> Result<Vec<CaseReport>> {
    let mut rng = Rng::new(seed, 8).derive("gradcheck.primitives", 0);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, build: &Builder<'_>, reference: &Reference<'_>| -> Result<()> {
        out.push(check(name, seed, inputs, build, reference)?);
        Ok(())
    };

    let (a, b) = (gaussian(&mut rng, vec![3, 4], 1.0), gaussian(&mut rng, vec![4, 5], 1.0));
    run("matmul", vec![a, b], &|g, v| g.matmul(v[0], v[1]), &|x| (mm(&x[0], &x[1], 3, 4, 5), vec![]))?;

    let (a, b) = (gaussian(&mut rng, vec![3, 4], 1.0), gaussian(&mut rng, vec![5, 4], 1.0));
    run("matmul_nt", vec![a, b], &|g, v| g.matmul_nt(v[0], v[1]), &|x| {
        let bt: Vec<f64> = (0..4).flat_map(|k| (0..5).map(move |j| (j, k))).map(|(j, k)| x[1][j * 4 + k]).collect();
        (mm(&x[0], &bt, 3, 4, 5), vec![])
    })?;

    let (a, b, s) = (gaussian(&mut rng, vec![4, 6], 1.0), gaussian(&mut rng, vec![4, 6], 1.0), gaussian(&mut rng, vec![1], 1.0));
    run("scaled_dot", vec![a, b, s], &|g, v| g.scaled_dot(v[0], v[1], v[2]), &|x| {
        let out = (0..16).map(|ij| x[2][0] * (0..6).map(|k| x[0][(ij / 4) * 6 + k] * x[1][(ij % 4) * 6 + k]).sum::<f64>());
        (out.collect(), vec![])
    })?;

    let a = gaussian(&mut rng, vec![3, 5], 1.0);
    run("transpose", vec![a], &|g, v| g.transpose(v[0]), &|x| {
        ((0..15).map(|ji| x[0][(ji % 3) * 5 + ji / 3]).collect(), vec![])
    })?;

    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let (a, b) = (gaussian(&mut rng, vec![3, 4], 1.0), gaussian(&mut rng, vec![3, 4], 1.0));
        let build = move |g: &mut Graph, v: &[Var]| match op {
            0 => g.add(v[0], v[1]),
            1 => g.sub(v[0], v[1]),
            _ => g.mul(v[0], v[1]),
        };
        let reference = move |x: &[Vec<f64>]| {
            let f = |p: f64, q: f64| match op {
                0 => p + q,
                1 => p - q,
                _ => p * q,
            };
            (x[0].iter().zip(&x[1]).map(|(&p, &q)| f(p, q)).collect(), vec![])
        };
        run(name, vec![a, b], &build, &reference)?;
    }

    let (a, b) = (gaussian(&mut rng, vec![4, 5], 1.0), gaussian(&mut rng, vec![5], 1.0));
    run("add_bias", vec![a, b], &|g, v| g.add_bias(v[0], v[1]), &|x| {
        ((0..20).map(|i| x[0][i] + x[1][i % 5]).collect(), vec![])
    })?;

    let a = gaussian(&mut rng, vec![4, 5], 1.0);
    run("relu", vec![a], &|g, v| g.relu(v[0]), &|x| {
        (x[0].iter().map(|v| v.max(0.0)).collect(), x[0].iter().map(|&v| u32::from(v > 0.0)).collect())
    })?;

    let a = gaussian(&mut rng, vec![3, 4], 1.0);
    run("exp", vec![a], &|g, v| g.exp(v[0]), &|x| (x[0].iter().map(|v| v.exp()).collect(), vec![]))?;

    let a = Tensor::from_parts(vec![3, 4], (0..12).map(|_| rng.uniform_range(0.5, 2.0) as f32).collect());
    run("log", vec![a], &|g, v| g.log(v[0]), &|x| (x[0].iter().map(|v| v.ln()).collect(), vec![]))?;

    let a = gaussian(&mut rng, vec![3, 4], 1.0);
    run("scale", vec![a], &|g, v| g.scale(v[0], -1.7), &|x| {
        (x[0].iter().map(|v| v * f64::from(-1.7f32)).collect(), vec![])
    })?;

    let (a, s) = (gaussian(&mut rng, vec![3, 4], 1.0), gaussian(&mut rng, vec![1], 1.0));
    run("mul_scalar", vec![a, s], &|g, v| g.mul_scalar(v[0], v[1]), &|x| {
        (x[0].iter().map(|v| v * x[1][0]).collect(), vec![])
    })?;

    let a = gaussian(&mut rng, vec![3, 4], 1.0);
    run("sum", vec![a], &|g, v| g.sum(v[0]), &|x| (vec![x[0].iter().sum()], vec![]))?;

    let a = gaussian(&mut rng, vec![3, 4], 1.0);
    run("mean", vec![a], &|g, v| g.mean(v[0]), &|x| (vec![x[0].iter().sum::<f64>() / 12.0], vec![]))?;

    let a = gaussian(&mut rng, vec![8, 3], 1.0);
    run("max_pool", vec![a], &|g, v| g.max_pool(v[0], 2), &|x| {
        let mut out = Vec::new();
        let mut pattern = Vec::new();
        for grp in 0..2 {
            for j in 0..3 {
                let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
                for r in 0..4 {
                    let v = x[0][(grp * 4 + r) * 3 + j];
                    if v > best {
                        best = v;
                        arg = r;
                    }
                }
                out.push(best);
                pattern.push(arg as u32);
            }
        }
        (out, pattern)
    })?;

    let a = gaussian(&mut rng, vec![3, 5], 1.0);
    run("l2_normalize_rows", vec![a], &|g, v| g.l2_normalize_rows(v[0]), &|x| (normalize_rows(&x[0], 5), vec![]))?;

    let a = gaussian(&mut rng, vec![3, 5], 3.0);
    run("logsumexp_rows", vec![a], &|g, v| g.logsumexp_rows(v[0]), &|x| {
        (x[0].chunks(5).map(lse).collect(), vec![])
    })?;

    let a = gaussian(&mut rng, vec![4, 5], 3.0);
    let targets: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
    let t2 = targets.clone();
    run("cross_entropy", vec![a], &move |g, v| g.cross_entropy(v[0], &targets), &move |x| {
        (vec![x[0].chunks(5).zip(&t2).map(|(r, &t)| lse(r) - r[t]).sum()], vec![])
    })?;
    Ok(out)
}

/// Symmetric InfoNCE on a random unit batch with learnable temperature.
fn contrastive_case(seed: u64) -> Result<CaseReport> {
    let mut rng = Rng::new(seed, 8).derive("gradcheck.contrastive", 0);
    let a = unit_rows(&mut rng, BATCH, DIM);
    let b = unit_rows(&mut rng, BATCH, DIM);
    let s = Tensor::scalar(rng.uniform_range(1.0, (1.0f64 / 0.07).ln()) as f32);
    check(
        "contrastive_loss",
        seed,
        vec![a, b, s],
        &|g, v| contrastive_loss(g, v[0], v[1], v[2], false),
        &|x| (vec![info_nce_ref(&x[0], &x[1], x[2][0], BATCH, DIM)], vec![]),
    )
}

/// The weighted tri-modal objective through a small encoder. Anchors are
/// leaves here so that their gradients are checked too.
fn final_loss_case(seed: u64) -> Result<CaseReport> {
    let mut rng = Rng::new(seed, 8).derive("gradcheck.final_loss", 0);
    let config = EncoderConfig { widths: WIDTHS.to_vec(), embed_dim: DIM };
    let params = EncoderParams::from_config(seed, &config)?;
    let clouds = random_clouds(&mut rng, BATCH, POINTS);
    let hi = unit_rows(&mut rng, BATCH, DIM);
    let hs = unit_rows(&mut rng, BATCH, DIM);
    let s = Tensor::scalar(rng.uniform_range(1.0, (1.0f64 / 0.07).ln()) as f32);
    let coefs = LossCoefficients {
        alpha: rng.uniform_range(0.2, 1.5) as f32,
        beta: rng.uniform_range(0.2, 1.5) as f32,
        theta: rng.uniform_range(0.2, 1.5) as f32,
    };
    let blocks = params.blocks().len();
    let mut inputs: Vec<Tensor> = params.blocks().into_iter().map(|(_, t)| t.clone()).collect();
    inputs.extend([hi, hs, s]);
    let layers = WIDTHS.len();
    let points = flat_points(&clouds);

    let build = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let vars = bind_vars(v, layers);
        let hp = params.forward(g, &vars, &clouds)?;
        let terms = final_loss(g, (v[blocks], v[blocks + 1], hp), &coefs, v[blocks + 2], false)?;
        Ok(terms.total)
    };
    let reference = |x: &[Vec<f64>]| -> RefOutput {
        let mut pattern = Vec::new();
        let hp = encoder_ref(&x[..blocks], &points, BATCH, &WIDTHS, DIM, &mut pattern);
        let (hi, hs, s) = (&x[blocks], &x[blocks + 1], x[blocks + 2][0]);
        let total = f64::from(coefs.alpha) * info_nce_ref(hi, hs, s, BATCH, DIM)
            + f64::from(coefs.beta) * info_nce_ref(hi, &hp, s, BATCH, DIM)
            + f64::from(coefs.theta) * info_nce_ref(&hp, hs, s, BATCH, DIM);
        (vec![total], pattern)
    };
    check("final_loss", seed, inputs, &build, &reference)
}

/// Embeddings of one 16-point cloud, contracted against random weights,
/// differentiated with respect to every encoder parameter.
fn encode_case(seed: u64) -> Result<CaseReport> {
    let mut rng = Rng::new(seed, 8).derive("gradcheck.encode", 0);
    let config = EncoderConfig { widths: WIDTHS.to_vec(), embed_dim: DIM };
    let params = EncoderParams::from_config(seed.wrapping_add(1000), &config)?;
    let clouds = random_clouds(&mut rng, 1, POINTS);
    let inputs: Vec<Tensor> = params.blocks().into_iter().map(|(_, t)| t.clone()).collect();
    let points = flat_points(&clouds);
    let build = |g: &mut Graph, v: &[Var]| params.forward(g, &bind_vars(v, WIDTHS.len()), &clouds);
    let reference = |x: &[Vec<f64>]| -> RefOutput {
        let mut pattern = Vec::new();
        let out = encoder_ref(x, &points, 1, &WIDTHS, DIM, &mut pattern);
        (out, pattern)
    };
    check("encode", seed, inputs, &build, &reference)
}

/// Every primitive plus the contrastive, tri-modal and encoder cases, once
/// per seed.
pub fn run_suite(seeds: &[u64]) -> Result<GradcheckReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("gradcheck needs at least one seed".into()));
    }
    let mut report = GradcheckReport::default();
    for &seed in seeds {
        report.cases.extend(primitive_cases(seed)?);
        report.cases.push(contrastive_case(seed)?);
        report.cases.push(final_loss_case(seed)?);
        report.cases.push(encode_case(seed)?);
    }
    Ok(report)
}

/// Only the loss cases: symmetric InfoNCE and the full objective.
pub fn run_loss_cases(seeds: &[u64]) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    for &seed in seeds {
        report.cases.push(contrastive_case(seed)?);
        report.cases.push(final_loss_case(seed)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_the_floor() {
        assert_eq!(relative_error(2.0, 2.0), 0.0);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-12);
        assert!((relative_error(0.0, 1e-6) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn every_primitive_passes_on_ten_seeds() {
        for seed in 0..10 {
            for case in primitive_cases(seed).unwrap() {
                assert!(case.max_rel_error < TOLERANCE, "{case:?}");
                assert_eq!(case.skipped, 0, "{case:?}");
            }
        }
    }

    #[test]
    fn loss_and_encoder_cases_pass_on_ten_seeds() {
        let seeds: Vec<u64> = (0..10).collect();
        let mut report = run_loss_cases(&seeds).unwrap();
        report.cases.extend(seeds.iter().map(|&s| encode_case(s).unwrap()));
        assert!(report.passed(), "max relative error {}", report.max_rel_error());
        assert_eq!(report.skipped(), 0);
    }

    #[test]
    fn wrong_gradients_are_caught() {
        // A reference that disagrees with the graph must fail the check.
        let a = Tensor::matrix(1, 2, vec![0.5, -0.3]).unwrap();
        let r = check("bad", 0, vec![a], &|g, v| g.exp(v[0]), &|x| (x[0].iter().map(|v| 2.0 * v.exp()).collect(), vec![]))
            .unwrap();
        assert!(r.max_rel_error > 0.4);
    }
}
