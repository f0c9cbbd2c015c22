//! The training loop: toy dual encoders over a synthetic corpus, the
//! knowledge-enhanced loss with periodic base refreshing, per-epoch drift
//! and out-of-batch-influence logging, and retrieval evaluation.

use crate::corpus::SyntheticCorpus;
use crate::encoder::{DualEncoder, ToyEncoder};
use crate::error::{Error, Result};
use crate::kb::{build_coarse_kb, build_fine_kb, should_refresh, FineKB, PairEncoder};
use crate::math::UnitVector;
use crate::objective::{
    baseline_loss, grad_embeddings, AskConfig, AskGradients, LossVariant,
};
use crate::rng::substream;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Raw feature dimension; 0 means "take it from the corpus".
    pub d_in: usize,
    pub d: usize,
    pub k: usize,
    pub n_c: usize,
    pub rho: f64,
    pub beta: f64,
    pub lambda_f: f64,
    pub lambda_c: f64,
    /// Epochs between base rebuilds; 0 keeps the base static.
    pub refresh_period: u64,
    pub tau: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub renormalize_enhanced: bool,
    pub self_exclude: bool,
    pub loss_variant: LossVariant,
    /// Divide the learning rate by `lr_decay_factor` every this many
    /// epochs; 0 keeps it constant.
    pub lr_decay_every: u64,
    pub lr_decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d_in: 0,
            d: 16,
            k: 10,
            n_c: 512,
            rho: 0.2,
            beta: 0.2,
            lambda_f: 0.2,
            lambda_c: 0.3,
            refresh_period: 15,
            tau: 0.07,
            epsilon: 0.05,
            learning_rate: 0.5,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            renormalize_enhanced: true,
            self_exclude: true,
            loss_variant: LossVariant::Ask,
            lr_decay_every: 0,
            lr_decay_factor: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn ask_config(&self) -> AskConfig {
        AskConfig {
            k: self.k,
            rho: self.rho,
            beta: self.beta,
            lambda_f: self.lambda_f,
            lambda_c: self.lambda_c,
            tau: self.tau,
            epsilon: self.epsilon,
            renormalize_enhanced: self.renormalize_enhanced,
            ..AskConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::Config("embedding dimension must be at least 2".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.lr_decay_every > 0 && self.lr_decay_factor <= 1.0 {
            return Err(Error::Config("lr_decay_factor must exceed 1".into()));
        }
        self.ask_config().validate()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub loss_total: f64,
    pub loss_t2a: f64,
    pub loss_a2t: f64,
    pub obi: f64,
    pub rdm: f64,
    pub refreshed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RefreshEvent {
    pub epoch: u64,
    pub rdm_before: f64,
    pub rdm_after: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecallTable {
    pub ks: Vec<usize>,
    pub t2a: Vec<f64>,
    pub a2t: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub variant: LossVariant,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub refresh_events: Vec<RefreshEvent>,
    pub recall_split: String,
    pub final_recall: RecallTable,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub encoders: DualEncoder,
}

/// R@k percentages in both directions; ground truth is the identity
/// permutation, ties break toward the lower index.
pub fn recall_at_k(
    audio: &[UnitVector],
    text: &[UnitVector],
    ks: &[usize],
) -> Result<RecallTable> {
    if audio.len() != text.len() {
        return Err(Error::LengthMismatch { left: audio.len(), right: text.len() });
    }
    let n = audio.len();
    for &k in ks {
        if k == 0 || k > n {
            return Err(Error::KExceedsPoolSize { k, pool: n });
        }
    }
    // rank of the true match for every query, in both directions
    let rank = |queries: &[UnitVector], pool: &[UnitVector]| -> Vec<usize> {
        queries
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let own = crate::math::dot(q.as_slice(), pool[i].as_slice());
                let mut better = 0usize;
                for (j, c) in pool.iter().enumerate() {
                    let s = crate::math::dot(q.as_slice(), c.as_slice());
                    if s > own || (s == own && j < i) {
                        better += 1;
                    }
                }
                better + 1
            })
            .collect()
    };
    let t2a_ranks = rank(text, audio);
    let a2t_ranks = rank(audio, text);
    let pct = |ranks: &[usize], k: usize| -> f64 {
        100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64
    };
    Ok(RecallTable {
        ks: ks.to_vec(),
        t2a: ks.iter().map(|&k| pct(&t2a_ranks, k)).collect(),
        a2t: ks.iter().map(|&k| pct(&a2t_ranks, k)).collect(),
    })
}

/// Encodes a feature split with both encoders.
pub fn encode_split(
    enc: &DualEncoder,
    features: &[(Vec<f64>, Vec<f64>)],
) -> Result<(Vec<UnitVector>, Vec<UnitVector>)> {
    let mut audio = Vec::with_capacity(features.len());
    let mut text = Vec::with_capacity(features.len());
    for (a, t) in features {
        audio.push(enc.encode_audio(a)?);
        text.push(enc.encode_text(t)?);
    }
    Ok((audio, text))
}

/// Mean KL between neighborhoods under the current audio encoder and the
/// stored base, over the base corpus itself.
fn measure_rdm(
    enc: &DualEncoder,
    features: &[(Vec<f64>, Vec<f64>)],
    fine: &FineKB,
    model_epoch: u64,
) -> Result<f64> {
    let current: Vec<UnitVector> =
        features.iter().map(|(a, _)| enc.encode_audio(a)).collect::<Result<_>>()?;
    let stale: Vec<UnitVector> = fine.entries.iter().map(|e| e.audio.clone()).collect();
    let report =
        crate::diagnostics::rdm(&current, &current, &stale, 1.0, model_epoch, fine.built_at_epoch)?;
    Ok(report.mean)
}

fn obi_from_grads(grads: &AskGradients, self_ids: &[usize]) -> f64 {
    let in_batch: std::collections::BTreeSet<usize> = self_ids.iter().copied().collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for id in 0..grads.fine_audio.len() {
        if in_batch.contains(&id) {
            continue;
        }
        total += crate::math::norm(&grads.fine_audio[id]) + crate::math::norm(&grads.fine_text[id]);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Runs the full loop: epoch-0 base build, per-step loss and gradient
/// descent, periodic refreshing, per-epoch drift logging, and a final
/// retrieval evaluation. Deterministic for a given config.
pub fn train(config: &TrainConfig, corpus: &SyntheticCorpus) -> Result<TrainOutcome> {
    config.validate()?;
    let train_features = corpus.split_features(&corpus.train_idx);
    let n_train = train_features.len();
    if n_train < config.batch_size {
        return Err(Error::Config(format!(
            "train split has {n_train} pairs, smaller than batch_size {}",
            config.batch_size
        )));
    }
    let usable = n_train - usize::from(config.self_exclude);
    if config.k > usable {
        return Err(Error::KTooLarge { k: config.k, usable });
    }
    let d_in = corpus.d_in();
    if config.d_in != 0 && config.d_in != d_in {
        return Err(Error::Config(format!(
            "configured d_in {} does not match corpus feature dimension {d_in}",
            config.d_in
        )));
    }
    let n_c = if config.n_c > n_train {
        eprintln!(
            "warning: n_c {} exceeds corpus size {n_train}; clamping to {n_train}",
            config.n_c
        );
        n_train
    } else {
        config.n_c
    };

    let mut init_rng = substream(config.seed, "init");
    let mut shuffle_rng = substream(config.seed, "shuffle");
    let mut kmeans_rng = substream(config.seed, "kmeans");
    let mut encoders = DualEncoder::new_random(config.d, d_in, &mut init_rng);
    let ask_cfg = config.ask_config();

    let mut fine = build_fine_kb(&train_features, &encoders, 0)?;
    let mut coarse = build_coarse_kb(&fine, n_c, kmeans_rng.gen::<u64>())?;

    let mut epoch_metrics = Vec::with_capacity(config.epochs as usize);
    let mut refresh_events = Vec::new();
    let mut order: Vec<usize> = (0..n_train).collect();

    for epoch in 1..=config.epochs {
        let mut refreshed = false;
        if config.refresh_period > 0 && should_refresh(epoch, config.refresh_period)? {
            let rdm_before = measure_rdm(&encoders, &train_features, &fine, epoch)?;
            let rebuilt = crate::kb::refresh(
                &fine,
                &train_features,
                &encoders,
                epoch,
                n_c,
                kmeans_rng.gen::<u64>(),
            )?;
            fine = rebuilt.0;
            coarse = rebuilt.1;
            let rdm_after = measure_rdm(&encoders, &train_features, &fine, epoch)?;
            refresh_events.push(RefreshEvent { epoch, rdm_before, rdm_after });
            refreshed = true;
        }

        let lr = if config.lr_decay_every > 0 {
            let drops = (epoch - 1) / config.lr_decay_every;
            config.learning_rate / config.lr_decay_factor.powi(drops as i32)
        } else {
            config.learning_rate
        };

        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut sum_total = 0.0;
        let mut sum_t2a = 0.0;
        let mut sum_a2t = 0.0;
        let mut sum_obi = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let (a, t) = &train_features[idx];
                batch.push((encoders.audio.forward(a)?, encoders.text.forward(t)?));
            }

            let (total, l_t2a, l_a2t, obi, d_audio, d_text) = match config.loss_variant {
                LossVariant::Ask => {
                    let self_ids: Option<Vec<usize>> =
                        config.self_exclude.then(|| chunk.to_vec());
                    let (bd, grads) = grad_embeddings(
                        &batch,
                        &fine,
                        &coarse,
                        &ask_cfg,
                        self_ids.as_deref(),
                    )?;
                    let obi = obi_from_grads(&grads, chunk);
                    (bd.total, bd.l_star_t2a, bd.l_star_a2t, obi, grads.batch_audio, grads.batch_text)
                }
                LossVariant::Baseline => {
                    let base = baseline_loss(&batch, config.tau)?;
                    (base.loss, base.l_t2a, base.l_a2t, 0.0, base.d_audio, base.d_text)
                }
            };

            let mut dw_audio = vec![vec![0.0; d_in]; config.d];
            let mut dw_text = vec![vec![0.0; d_in]; config.d];
            for (pos, &idx) in chunk.iter().enumerate() {
                let (a, t) = &train_features[idx];
                ToyEncoder::accumulate(&mut dw_audio, &encoders.audio.backward(a, &d_audio[pos])?);
                ToyEncoder::accumulate(&mut dw_text, &encoders.text.backward(t, &d_text[pos])?);
            }
            encoders.audio.apply_update(&dw_audio, lr);
            encoders.text.apply_update(&dw_text, lr);

            sum_total += total;
            sum_t2a += l_t2a;
            sum_a2t += l_a2t;
            sum_obi += obi;
            n_batches += 1;
        }

        let nb = n_batches as f64;
        let rdm = measure_rdm(&encoders, &train_features, &fine, epoch)?;
        epoch_metrics.push(EpochMetrics {
            epoch,
            loss_total: sum_total / nb,
            loss_t2a: sum_t2a / nb,
            loss_a2t: sum_a2t / nb,
            obi: sum_obi / nb,
            rdm,
            refreshed,
        });
    }

    let (recall_split, eval_features) = if corpus.eval_idx.is_empty() {
        ("train".to_string(), train_features.clone())
    } else {
        ("eval".to_string(), corpus.split_features(&corpus.eval_idx))
    };
    let (audio, text) = encode_split(&encoders, &eval_features)?;
    let pool = audio.len();
    let ks: Vec<usize> = [1usize, 5, 10].iter().map(|&k| k.min(pool)).collect();
    let final_recall = recall_at_k(&audio, &text, &ks)?;

    Ok(TrainOutcome {
        report: TrainReport {
            variant: config.loss_variant,
            seed: config.seed,
            epochs: epoch_metrics,
            refresh_events,
            recall_split,
            final_recall,
        },
        encoders,
    })
}

/// The per-epoch metrics as CSV, one row per epoch.
pub fn metrics_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,loss_total,loss_t2a,loss_a2t,obi,rdm,refreshed\n");
    for m in &report.epochs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.epoch, m.loss_total, m.loss_t2a, m.loss_a2t, m.obi, m.rdm, m.refreshed
        ));
    }
    out
}
