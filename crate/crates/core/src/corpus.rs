//! Seeded synthetic paired corpora with long-tail cluster structure.
//!
//! Every item draws a latent shared by both modalities (its cluster center
//! plus a per-item offset), then each modality sees the latent through its
//! own fixed random mixing map plus independent noise. Ground-truth
//! matching is therefore the identity permutation.

use crate::error::{Error, Result};
use crate::rng::substream;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Spread of the per-item latent offset around its cluster center.
const INTRA_CLUSTER_SPREAD: f64 = 0.3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusParams {
    pub n_clusters: usize,
    pub head_size: usize,
    pub tail_size: usize,
    pub n_tail: usize,
    pub d_in: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            n_clusters: 10,
            head_size: 50,
            tail_size: 5,
            n_tail: 5,
            d_in: 32,
            noise_sigma: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
    pub cluster_id: Vec<usize>,
    /// Per cluster: whether it belongs to the tail.
    pub tail_cluster: Vec<bool>,
    pub train_idx: Vec<usize>,
    pub eval_idx: Vec<usize>,
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.pairs.first().map_or(0, |p| p.0.len())
    }

    pub fn split_features(&self, indices: &[usize]) -> Vec<(Vec<f64>, Vec<f64>)> {
        indices.iter().map(|&i| self.pairs[i].clone()).collect()
    }

    /// External corpora carry no cluster structure: one flat cluster, every
    /// item in both splits.
    pub fn from_pairs(pairs: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let n = pairs.len();
        Ok(Self {
            cluster_id: vec![0; n],
            tail_cluster: vec![false],
            train_idx: (0..n).collect(),
            eval_idx: (0..n).collect(),
            pairs,
        })
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize, sigma: f64) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal) * sigma).collect()
}

fn mix(map: &[Vec<f64>], latent: &[f64]) -> Vec<f64> {
    map.iter().map(|row| crate::math::dot(row, latent)).collect()
}

pub fn gen_synthetic_corpus(params: &CorpusParams) -> Result<SyntheticCorpus> {
    let p = params;
    if p.n_clusters == 0 || p.head_size == 0 || p.tail_size == 0 || p.n_tail == 0 || p.d_in == 0 {
        return Err(Error::InvalidCounts("all counts must be at least 1".into()));
    }
    if p.n_tail > p.n_clusters {
        return Err(Error::InvalidCounts(format!(
            "n_tail {} exceeds n_clusters {}",
            p.n_tail, p.n_clusters
        )));
    }
    if p.tail_size >= p.head_size {
        return Err(Error::InvalidCounts(format!(
            "tail clusters must be strictly smaller than head clusters ({} vs {})",
            p.tail_size, p.head_size
        )));
    }
    if p.noise_sigma < 0.0 {
        return Err(Error::InvalidCounts("noise_sigma must be non-negative".into()));
    }

    let mut rng = substream(p.seed, "corpus");
    let latent_dim = p.d_in;
    let map_scale = 1.0 / (latent_dim as f64).sqrt();
    let mix_audio: Vec<Vec<f64>> =
        (0..p.d_in).map(|_| normal_vec(&mut rng, latent_dim, map_scale)).collect();
    let mix_text: Vec<Vec<f64>> =
        (0..p.d_in).map(|_| normal_vec(&mut rng, latent_dim, map_scale)).collect();

    let n_head = p.n_clusters - p.n_tail;
    let mut pairs = Vec::new();
    let mut cluster_id = Vec::new();
    let mut tail_cluster = Vec::with_capacity(p.n_clusters);
    for c in 0..p.n_clusters {
        let is_tail = c >= n_head;
        tail_cluster.push(is_tail);
        let center = normal_vec(&mut rng, latent_dim, 1.0);
        let size = if is_tail { p.tail_size } else { p.head_size };
        for _ in 0..size {
            let offset = normal_vec(&mut rng, latent_dim, INTRA_CLUSTER_SPREAD);
            let latent: Vec<f64> = center.iter().zip(&offset).map(|(a, b)| a + b).collect();
            let noise_a = normal_vec(&mut rng, latent_dim, p.noise_sigma);
            let noise_t = normal_vec(&mut rng, latent_dim, p.noise_sigma);
            let lat_a: Vec<f64> = latent.iter().zip(&noise_a).map(|(a, b)| a + b).collect();
            let lat_t: Vec<f64> = latent.iter().zip(&noise_t).map(|(a, b)| a + b).collect();
            pairs.push((mix(&mix_audio, &lat_a), mix(&mix_text, &lat_t)));
            cluster_id.push(c);
        }
    }

    // stratified split: roughly a fifth of each cluster held out for eval,
    // singleton clusters stay in train
    let mut train_idx = Vec::new();
    let mut eval_idx = Vec::new();
    for c in 0..p.n_clusters {
        let mut members: Vec<usize> =
            (0..pairs.len()).filter(|&i| cluster_id[i] == c).collect();
        let eval_count = if members.len() >= 2 { (members.len() / 5).max(1) } else { 0 };
        for i in (1..members.len()).rev() {
            let j = rng.gen_range(0..=i);
            members.swap(i, j);
        }
        eval_idx.extend(members.iter().take(eval_count));
        train_idx.extend(members.iter().skip(eval_count));
    }
    train_idx.sort_unstable();
    eval_idx.sort_unstable();

    Ok(SyntheticCorpus { pairs, cluster_id, tail_cluster, train_idx, eval_idx })
}
