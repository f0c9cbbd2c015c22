//! Drift diagnostics: neighborhood distributions over a knowledge base,
//! the mismatch (mean KL) between a fresh and a stale base, the total
//! variation / Pinsker bound on the induced knowledge-vector deviation,
//! seeded drift simulations, and raw drift-trace export.

use crate::encoder::ToyEncoder;
use crate::error::{Error, Result};
use crate::math::{dot, kl_divergence, softmax, ProbDist, UnitVector};
use crate::rng::substream;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

/// Softmax over the query's dot products against every base vector.
pub fn neighborhood_dist(
    query: &UnitVector,
    kb_vectors: &[UnitVector],
    temperature: f64,
) -> Result<ProbDist> {
    if kb_vectors.is_empty() {
        return Err(Error::EmptyKB);
    }
    let sims: Vec<f64> = kb_vectors
        .iter()
        .map(|v| dot(query.as_slice(), v.as_slice()))
        .collect();
    softmax(&sims, temperature)
}

/// Per-sample KL between the fresh-base and stale-base neighborhood
/// distributions, plus the dataset mean.
#[derive(Debug, Clone, Serialize)]
pub struct RdmReport {
    pub per_sample_kl: Vec<f64>,
    pub mean: f64,
    pub model_epoch: u64,
    pub kb_epoch: u64,
}

pub fn rdm(
    samples: &[UnitVector],
    kb_current: &[UnitVector],
    kb_stale: &[UnitVector],
    temperature: f64,
    model_epoch: u64,
    kb_epoch: u64,
) -> Result<RdmReport> {
    if kb_current.len() != kb_stale.len() {
        return Err(Error::IndexMisalignment { current: kb_current.len(), stale: kb_stale.len() });
    }
    let mut per_sample_kl = Vec::with_capacity(samples.len());
    for s in samples {
        let ideal = neighborhood_dist(s, kb_current, temperature)?;
        let actual = neighborhood_dist(s, kb_stale, temperature)?;
        per_sample_kl.push(kl_divergence(&ideal, &actual)?);
    }
    let mean = if per_sample_kl.is_empty() {
        0.0
    } else {
        per_sample_kl.iter().sum::<f64>() / per_sample_kl.len() as f64
    };
    Ok(RdmReport { per_sample_kl, mean, model_epoch, kb_epoch })
}

/// The knowledge-vector deviation before the norm: sum over the base of
/// (P_actual(j) - P_ideal(j)) z_j.
pub fn delta_k(
    p_ideal: &ProbDist,
    p_actual: &ProbDist,
    kb_vectors: &[UnitVector],
) -> Result<Vec<f64>> {
    if p_ideal.len() != p_actual.len() || p_ideal.len() != kb_vectors.len() {
        return Err(Error::LengthMismatch { left: p_ideal.len(), right: kb_vectors.len() });
    }
    let d = kb_vectors.first().map_or(0, |v| v.dim());
    let mut out = vec![0.0; d];
    for ((&pi, &pa), z) in p_ideal.as_slice().iter().zip(p_actual.as_slice()).zip(kb_vectors) {
        let w = pa - pi;
        for (o, &zx) in out.iter_mut().zip(z.as_slice()) {
            *o += w * zx;
        }
    }
    Ok(out)
}

/// One instance of the deviation bound: ||delta_k|| against
/// C * sqrt(2 * KL) with C the largest base-vector norm.
#[derive(Debug, Clone, Serialize)]
pub struct BoundCheck {
    pub delta_k_norm: f64,
    pub rdm: f64,
    pub c: f64,
    pub bound: f64,
    pub satisfied: bool,
}

pub fn pinsker_bound_check(
    p_ideal: &ProbDist,
    p_actual: &ProbDist,
    kb_vectors: &[UnitVector],
) -> Result<BoundCheck> {
    let dk = delta_k(p_ideal, p_actual, kb_vectors)?;
    let delta_k_norm = crate::math::norm(&dk);
    let kl = kl_divergence(p_ideal, p_actual)?;
    let c = kb_vectors
        .iter()
        .map(|v| crate::math::norm(v.as_slice()))
        .fold(0.0f64, f64::max);
    let bound = c * (2.0 * kl).sqrt();
    Ok(BoundCheck { delta_k_norm, rdm: kl, c, bound, satisfied: delta_k_norm <= bound + 1e-9 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftModel {
    GaussianWalk,
    RotationFlow,
}

impl std::str::FromStr for DriftModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_walk" => Ok(DriftModel::GaussianWalk),
            "rotation_flow" => Ok(DriftModel::RotationFlow),
            other => Err(Error::Config(format!("unknown drift model '{other}'"))),
        }
    }
}

/// One step of a drift sweep, always measured against the step-0 base.
#[derive(Debug, Clone, Serialize)]
pub struct DriftStepReport {
    pub step: usize,
    pub rdm_mean: f64,
    pub delta_k_mean: f64,
    pub bound_mean: f64,
    #[serde(skip)]
    pub rdm: RdmReport,
}

/// Drifts the encoder away from its initial parameters step by step and
/// measures the mismatch of each step's encodings against the step-0 base.
/// Deterministic per seed.
pub fn drift_simulation(
    initial: &ToyEncoder,
    model: DriftModel,
    steps: usize,
    magnitude: f64,
    corpus: &[Vec<f64>],
    temperature: f64,
    seed: u64,
) -> Result<Vec<DriftStepReport>> {
    if steps == 0 {
        return Err(Error::InvalidCounts("steps must be at least 1".into()));
    }
    if magnitude < 0.0 {
        return Err(Error::NegativeMagnitude(magnitude));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = substream(seed, "drift");
    let d = initial.dim_out();

    // rotation planes: disjoint coordinate pairs from one seeded shuffle
    let mut dims: Vec<usize> = (0..d).collect();
    for i in (1..dims.len()).rev() {
        let j = rng.gen_range(0..=i);
        dims.swap(i, j);
    }
    let planes: Vec<(usize, usize)> = dims.chunks_exact(2).map(|c| (c[0], c[1])).collect();

    let encode_all = |enc: &ToyEncoder| -> Result<Vec<UnitVector>> {
        corpus.iter().map(|x| enc.forward(x)).collect()
    };
    let base = encode_all(initial)?;

    let mut enc = initial.clone();
    let mut out = Vec::with_capacity(steps);
    for step in 1..=steps {
        match model {
            DriftModel::GaussianWalk => {
                for row in enc.weights.iter_mut() {
                    for w in row.iter_mut() {
                        *w += magnitude * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            DriftModel::RotationFlow => {
                let (sin, cos) = magnitude.sin_cos();
                for &(a, b) in &planes {
                    for c in 0..enc.dim_in() {
                        let wa = enc.weights[a][c];
                        let wb = enc.weights[b][c];
                        enc.weights[a][c] = cos * wa - sin * wb;
                        enc.weights[b][c] = sin * wa + cos * wb;
                    }
                }
            }
        }
        let current = encode_all(&enc)?;
        let report = rdm(&current, &current, &base, temperature, step as u64, 0)?;
        let mut dk_sum = 0.0;
        let mut bound_sum = 0.0;
        for (i, q) in current.iter().enumerate() {
            let ideal = neighborhood_dist(q, &current, temperature)?;
            let actual = neighborhood_dist(q, &base, temperature)?;
            let check = pinsker_bound_check(&ideal, &actual, &base)?;
            debug_assert!(check.satisfied, "deviation bound violated at step {step} sample {i}");
            dk_sum += check.delta_k_norm;
            bound_sum += check.bound;
        }
        let n = current.len() as f64;
        out.push(DriftStepReport {
            step,
            rdm_mean: report.mean,
            delta_k_mean: dk_sum / n,
            bound_mean: bound_sum / n,
            rdm: report,
        });
    }
    Ok(out)
}

/// CSV rows {snapshot_epoch, sample_id, dim_0..dim_{d-1}}: the raw
/// coordinates of each sample under each encoder snapshot, for external
/// plotting of the drift.
pub fn drift_trace_export(
    snapshots: &[(u64, ToyEncoder)],
    samples: &[Vec<f64>],
    path: &Path,
) -> Result<()> {
    if snapshots.len() < 2 {
        return Err(Error::TooFewSnapshots(snapshots.len()));
    }
    let d = snapshots[0].1.dim_out();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = ["snapshot_epoch".to_string(), "sample_id".to_string()]
        .into_iter()
        .chain((0..d).map(|i| format!("dim_{i}")))
        .collect();
    writeln!(f, "{}", header.join(","))?;
    for (epoch, enc) in snapshots {
        for (id, x) in samples.iter().enumerate() {
            let u = enc.forward(x)?;
            let coords: Vec<String> = u.as_slice().iter().map(|v| format!("{v}")).collect();
            writeln!(f, "{epoch},{id},{}", coords.join(","))?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |vals: &[f64]| -> Vec<f64> {
        let n = vals.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        let mut ranks = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && vals[order[j + 1]] == vals[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                ranks[idx] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mean) * (b - mean);
        dx += (a - mean) * (a - mean);
        dy += (b - mean) * (b - mean);
    }
    if dx == 0.0 || dy == 0.0 {
        return 0.0;
    }
    num / (dx * dy).sqrt()
}
