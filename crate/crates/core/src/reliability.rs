//! Cross-modal consistency scoring, reliability weights, and the four
//! knowledge potentials per sample. Everything here is closed-form: there
//! are no learned parameters.

use crate::error::{Error, Result};
use crate::kb::{top_k, CoarseKB, FineKB, Side, VectorSource};
use crate::math::{dot, softmax, ProbDist, UnitVector};

/// The four reliability-aware potentials of one batch sample.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PotentialSet {
    pub psi_f_t2a: f64,
    pub psi_f_a2t: f64,
    pub psi_c_t2a: f64,
    pub psi_c_a2t: f64,
    pub sample_index: usize,
}

/// Mean agreement of each cross-modal partner with the whole same-side
/// retrieved neighborhood.
pub fn consistency_scores<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    partners: &[A],
    retrieved: &[B],
) -> Result<Vec<f64>> {
    if partners.len() != retrieved.len() || partners.is_empty() {
        return Err(Error::LengthMismatch { left: partners.len(), right: retrieved.len() });
    }
    let k = retrieved.len() as f64;
    partners
        .iter()
        .map(|p| {
            let mut s = 0.0;
            for r in retrieved {
                if p.as_ref().len() != r.as_ref().len() {
                    return Err(Error::DimensionMismatch {
                        left: p.as_ref().len(),
                        right: r.as_ref().len(),
                    });
                }
                s += dot(p.as_ref(), r.as_ref());
            }
            Ok(s / k)
        })
        .collect()
}

/// Softmax of the raw consistency scores at unit temperature.
pub fn reliability_weights(scores: &[f64]) -> Result<ProbDist> {
    softmax(scores, 1.0)
}

/// Reliability-weighted sum of exponentiated anchor-partner similarities;
/// strictly positive.
pub fn knowledge_potential<A: AsRef<[f64]>>(
    anchor: &UnitVector,
    partners: &[A],
    weights: &ProbDist,
) -> Result<f64> {
    if partners.len() != weights.len() {
        return Err(Error::LengthMismatch { left: partners.len(), right: weights.len() });
    }
    let mut psi = 0.0;
    for (p, &w) in partners.iter().zip(weights.as_slice()) {
        psi += w * dot(anchor.as_slice(), p.as_ref()).exp();
    }
    Ok(psi)
}

fn side_vectors<'a>(kb: &'a dyn VectorSource, indices: &[usize], side: Side) -> Vec<&'a [f64]> {
    indices.iter().map(|&i| kb.side_vector(i, side)).collect()
}

/// One direction's potential: partners come from the opposite-side
/// retrieval, the same-side retrieval supplies the consistency reference.
fn directional_potential(
    anchor: &UnitVector,
    kb: &dyn VectorSource,
    partner_indices: &[usize],
    retrieved_indices: &[usize],
    side: Side,
) -> Result<f64> {
    let partners = side_vectors(kb, partner_indices, side);
    let retrieved = side_vectors(kb, retrieved_indices, side);
    let scores = consistency_scores(&partners, &retrieved)?;
    let weights = reliability_weights(&scores)?;
    knowledge_potential(anchor, &partners, &weights)
}

/// Computes all four potentials for every sample. The text-retrieved
/// neighborhood supplies the audio partners for the T->A direction, the
/// audio-retrieved neighborhood supplies the consistency reference, and the
/// A->T direction swaps the modality roles; coarse potentials repeat the
/// procedure on prototype pairs.
pub fn batch_potentials(
    batch: &[(UnitVector, UnitVector)],
    fine: &FineKB,
    coarse: &CoarseKB,
    k: usize,
    self_ids: Option<&[usize]>,
) -> Result<Vec<PotentialSet>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(ids) = self_ids {
        if ids.len() != batch.len() {
            return Err(Error::LengthMismatch { left: ids.len(), right: batch.len() });
        }
    }
    let mut out = Vec::with_capacity(batch.len());
    for (i, (u, v)) in batch.iter().enumerate() {
        let exclude = self_ids.map(|ids| ids[i]);
        let fa = top_k(u, fine, Side::Audio, k, exclude)?;
        let ft = top_k(v, fine, Side::Text, k, exclude)?;
        let ca = top_k(u, coarse, Side::Audio, k, None)?;
        let ct = top_k(v, coarse, Side::Text, k, None)?;
        out.push(PotentialSet {
            psi_f_t2a: directional_potential(u, fine, &ft.indices, &fa.indices, Side::Audio)?,
            psi_f_a2t: directional_potential(v, fine, &fa.indices, &ft.indices, Side::Text)?,
            psi_c_t2a: directional_potential(u, coarse, &ct.indices, &ca.indices, Side::Audio)?,
            psi_c_a2t: directional_potential(v, coarse, &ca.indices, &ct.indices, Side::Text)?,
            sample_index: i,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{build_coarse_kb, build_fine_kb, PairEncoder};
    use crate::math::l2_normalize;

    struct IdentityEncoder;

    impl PairEncoder for IdentityEncoder {
        fn encode_audio(&self, features: &[f64]) -> Result<UnitVector> {
            l2_normalize(features)
        }
        fn encode_text(&self, features: &[f64]) -> Result<UnitVector> {
            l2_normalize(features)
        }
    }

    fn unit(v: &[f64]) -> UnitVector {
        l2_normalize(v).unwrap()
    }

    #[test]
    fn consistency_identical_vectors() {
        let p = vec![unit(&[1.0, 0.0]), unit(&[1.0, 0.0])];
        let scores = consistency_scores(&p, &p).unwrap();
        for s in scores {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn consistency_orthogonal_is_zero() {
        let partners = vec![unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0])];
        let retrieved = vec![unit(&[0.0, 0.0, 1.0]), unit(&[0.0, 0.0, 1.0])];
        let scores = consistency_scores(&partners, &retrieved).unwrap();
        for s in scores {
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn consistency_hand_case() {
        let partners = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        let retrieved = vec![unit(&[1.0, 0.0]), unit(&[1.0, 0.0])];
        let scores = consistency_scores(&partners, &retrieved).unwrap();
        assert!((scores[0] - 1.0).abs() < 1e-12);
        assert!(scores[1].abs() < 1e-12);
    }

    #[test]
    fn weights_uniform_and_closed_form() {
        let w = reliability_weights(&[0.4, 0.4, 0.4]).unwrap();
        for &x in w.as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        let w = reliability_weights(&[2.0f64.ln(), 0.0]).unwrap();
        assert!((w.as_slice()[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn weights_sum_to_one() {
        let w = reliability_weights(&[0.93, -0.2, 0.11, 0.4]).unwrap();
        let total: f64 = w.as_slice().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weights_shift_invariant() {
        let a = reliability_weights(&[0.1, 0.5, -0.3]).unwrap();
        let b = reliability_weights(&[1.1, 1.5, 0.7]).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn potential_extremes() {
        let anchor = unit(&[1.0, 0.0]);
        let w = ProbDist::new(vec![0.5, 0.5]).unwrap();
        let orth = vec![unit(&[0.0, 1.0]), unit(&[0.0, -1.0])];
        assert!((knowledge_potential(&anchor, &orth, &w).unwrap() - 1.0).abs() < 1e-12);
        let same = vec![unit(&[1.0, 0.0]), unit(&[1.0, 0.0])];
        let e = std::f64::consts::E;
        assert!((knowledge_potential(&anchor, &same, &w).unwrap() - e).abs() < 1e-12);
        let mixed = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        assert!((knowledge_potential(&anchor, &mixed, &w).unwrap() - (e + 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn potential_monotone_in_similarity() {
        let w = ProbDist::new(vec![0.5, 0.5]).unwrap();
        let anchor = unit(&[1.0, 0.0]);
        let lo = vec![unit(&[0.6, 0.8]), unit(&[0.0, 1.0])];
        let hi = vec![unit(&[0.8, 0.6]), unit(&[0.0, 1.0])];
        let p_lo = knowledge_potential(&anchor, &lo, &w).unwrap();
        let p_hi = knowledge_potential(&anchor, &hi, &w).unwrap();
        assert!(p_hi > p_lo);
    }

    #[test]
    fn batch_potentials_all_self_pairs_give_e() {
        let features = vec![(vec![1.0, 0.0], vec![0.0, 1.0]); 5];
        let fine = build_fine_kb(&features, &IdentityEncoder, 0).unwrap();
        let coarse = build_coarse_kb(&fine, 3, 0).unwrap();
        let batch = vec![(unit(&[1.0, 0.0]), unit(&[0.0, 1.0]))];
        let psis = batch_potentials(&batch, &fine, &coarse, 3, None).unwrap();
        let e = std::f64::consts::E;
        assert!((psis[0].psi_f_t2a - e).abs() < 1e-9);
        assert!((psis[0].psi_f_a2t - e).abs() < 1e-9);
        assert!((psis[0].psi_c_t2a - e).abs() < 1e-9);
        assert!((psis[0].psi_c_a2t - e).abs() < 1e-9);
    }

    #[test]
    fn batch_potentials_match_composition() {
        use rand::Rng;
        let mut rng = crate::rng::substream(8, "test-pot");
        let d = 5;
        let features: Vec<(Vec<f64>, Vec<f64>)> = (0..50)
            .map(|_| {
                (
                    (0..d).map(|_| rng.gen::<f64>() - 0.5).collect(),
                    (0..d).map(|_| rng.gen::<f64>() - 0.5).collect(),
                )
            })
            .collect();
        let fine = build_fine_kb(&features, &IdentityEncoder, 0).unwrap();
        let coarse = build_coarse_kb(&fine, 8, 0).unwrap();
        let raw_u: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
        let raw_v: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
        let batch = vec![(unit(&raw_u), unit(&raw_v))];
        let k = 4;
        let psis = batch_potentials(&batch, &fine, &coarse, k, None).unwrap();

        let (u, v) = &batch[0];
        let fa = top_k(u, &fine, Side::Audio, k, None).unwrap();
        let ft = top_k(v, &fine, Side::Text, k, None).unwrap();
        let partners: Vec<&[f64]> = ft.indices.iter().map(|&i| fine.audio(i)).collect();
        let retrieved: Vec<&[f64]> = fa.indices.iter().map(|&i| fine.audio(i)).collect();
        let scores = consistency_scores(&partners, &retrieved).unwrap();
        let weights = reliability_weights(&scores).unwrap();
        let expect = knowledge_potential(u, &partners, &weights).unwrap();
        assert!((psis[0].psi_f_t2a - expect).abs() < 1e-12);
    }

    #[test]
    fn batch_potentials_invariant_to_kb_permutation() {
        use rand::Rng;
        let mut rng = crate::rng::substream(9, "test-perm");
        let d = 4;
        let features: Vec<(Vec<f64>, Vec<f64>)> = (0..12)
            .map(|_| {
                (
                    (0..d).map(|_| rng.gen::<f64>() - 0.5).collect(),
                    (0..d).map(|_| rng.gen::<f64>() - 0.5).collect(),
                )
            })
            .collect();
        let mut reversed = features.clone();
        reversed.reverse();
        let fine_a = build_fine_kb(&features, &IdentityEncoder, 0).unwrap();
        let fine_b = build_fine_kb(&reversed, &IdentityEncoder, 0).unwrap();
        let coarse_a = build_coarse_kb(&fine_a, 12, 0).unwrap();
        // permuted base with the same single-point clusters
        let coarse_b = build_coarse_kb(&fine_b, 12, 0).unwrap();
        let batch = vec![(unit(&[1.0, 0.1, -0.2, 0.4]), unit(&[0.2, 0.9, 0.1, -0.3]))];
        let pa = batch_potentials(&batch, &fine_a, &coarse_a, 3, None).unwrap();
        let pb = batch_potentials(&batch, &fine_b, &coarse_b, 3, None).unwrap();
        assert!((pa[0].psi_f_t2a - pb[0].psi_f_t2a).abs() < 1e-9);
        assert!((pa[0].psi_f_a2t - pb[0].psi_f_a2t).abs() < 1e-9);
    }

    #[test]
    fn fine_potentials_bounded_by_e() {
        use rand::Rng;
        let mut rng = crate::rng::substream(10, "test-bound");
        let d = 6;
        let features: Vec<(Vec<f64>, Vec<f64>)> = (0..30)
            .map(|_| {
                (
                    (0..d).map(|_| rng.gen::<f64>() - 0.5).collect(),
                    (0..d).map(|_| rng.gen::<f64>() - 0.5).collect(),
                )
            })
            .collect();
        let fine = build_fine_kb(&features, &IdentityEncoder, 0).unwrap();
        let coarse = build_coarse_kb(&fine, 5, 0).unwrap();
        let batch: Vec<(UnitVector, UnitVector)> = (0..6)
            .map(|_| {
                let a: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
                let t: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
                (unit(&a), unit(&t))
            })
            .collect();
        let psis = batch_potentials(&batch, &fine, &coarse, 5, None).unwrap();
        let e = std::f64::consts::E;
        for p in psis {
            assert!(p.psi_f_t2a > 0.0 && p.psi_f_t2a <= e + 1e-12);
            assert!(p.psi_f_a2t > 0.0 && p.psi_f_a2t <= e + 1e-12);
            assert!(p.psi_c_t2a > 0.0);
            assert!(p.psi_c_a2t > 0.0);
        }
    }
}
