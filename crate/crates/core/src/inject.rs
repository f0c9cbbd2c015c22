//! Knowledge injection: averages a retrieved neighborhood into a knowledge
//! vector and interpolates it with the original embedding, producing the
//! four enhanced views per batch pair.

use crate::error::{Error, Result};
use crate::kb::{top_k, CoarseKB, FineKB, Neighborhood, Side, VectorSource};
use crate::math::{l2_normalize, UnitVector};

/// The four enhanced views of one batch pair, in batch order.
#[derive(Debug, Clone)]
pub struct EnhancedPair {
    pub u_fine: Vec<f64>,
    pub v_fine: Vec<f64>,
    pub u_coarse: Vec<f64>,
    pub v_coarse: Vec<f64>,
    pub source_index: usize,
}

/// Unweighted mean of the retrieved same-side embeddings.
pub fn knowledge_vector(nb: &Neighborhood, kb: &dyn VectorSource) -> Result<Vec<f64>> {
    for &i in &nb.indices {
        if i >= kb.count() {
            return Err(Error::IndexOutOfRange { index: i, size: kb.count() });
        }
    }
    let first = kb.side_vector(nb.indices[0], nb.side);
    let mut mean = vec![0.0; first.len()];
    for &i in &nb.indices {
        for (m, x) in mean.iter_mut().zip(kb.side_vector(i, nb.side)) {
            *m += x;
        }
    }
    let k = nb.indices.len() as f64;
    for m in mean.iter_mut() {
        *m /= k;
    }
    Ok(mean)
}

/// rho * original + (1 - rho) * kvec, optionally re-normalized. rho = 1 is
/// an exact pass-through: the original embedding is returned unchanged so
/// every downstream quantity reduces to the no-injection baseline.
pub fn inject(
    original: &UnitVector,
    kvec: &[f64],
    rho: f64,
    renormalize: bool,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::RhoOutOfRange(rho));
    }
    if original.dim() != kvec.len() {
        return Err(Error::DimensionMismatch { left: original.dim(), right: kvec.len() });
    }
    if rho == 1.0 {
        return Ok(original.as_slice().to_vec());
    }
    let blend: Vec<f64> = original
        .as_slice()
        .iter()
        .zip(kvec)
        .map(|(o, k)| rho * o + (1.0 - rho) * k)
        .collect();
    if renormalize {
        Ok(l2_normalize(&blend)?.into_vec())
    } else {
        Ok(blend)
    }
}

/// Retrieves, averages, and injects for every pair in the batch: the audio
/// side queries the audio side of each base and the text side queries the
/// text side. Output order equals batch order.
pub fn enhance_batch(
    batch: &[(UnitVector, UnitVector)],
    fine: &FineKB,
    coarse: &CoarseKB,
    k: usize,
    rho: f64,
    renormalize: bool,
    self_ids: Option<&[usize]>,
) -> Result<Vec<EnhancedPair>> {
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
        let enhance = |query: &UnitVector, kb: &dyn VectorSource, side, excl| -> Result<Vec<f64>> {
            let nb = top_k(query, kb, side, k, excl)?;
            let kvec = knowledge_vector(&nb, kb)?;
            inject(query, &kvec, rho, renormalize)
        };
        out.push(EnhancedPair {
            u_fine: enhance(u, fine, Side::Audio, exclude)?,
            v_fine: enhance(v, fine, Side::Text, exclude)?,
            u_coarse: enhance(u, coarse, Side::Audio, None)?,
            v_coarse: enhance(v, coarse, Side::Text, None)?,
            source_index: i,
        });
    }
    Ok(out)
}
