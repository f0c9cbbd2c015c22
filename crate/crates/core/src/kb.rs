//! Fine- and coarse-grained knowledge bases: construction from a paired
//! corpus, k-means prototype distillation, exact top-k retrieval, periodic
//! refresh, and a binary snapshot format.

use crate::error::{Error, Result};
use crate::math::{dot, UnitVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Audio,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Fine,
    Coarse,
}

/// One instance-level knowledge pair.
#[derive(Debug, Clone)]
pub struct KBEntry {
    pub id: usize,
    pub audio: UnitVector,
    pub text: UnitVector,
}

/// Instance-level knowledge base: one L2-normalized embedding pair per
/// corpus item, in corpus order.
#[derive(Debug, Clone)]
pub struct FineKB {
    pub entries: Vec<KBEntry>,
    pub built_at_epoch: u64,
}

impl FineKB {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, |e| e.audio.dim())
    }

    pub fn audio(&self, index: usize) -> &[f64] {
        self.entries[index].audio.as_slice()
    }

    pub fn text(&self, index: usize) -> &[f64] {
        self.entries[index].text.as_slice()
    }
}

/// One prototype pair: elementwise max-pool over a cluster's members.
/// Prototypes are deliberately not re-normalized.
#[derive(Debug, Clone)]
pub struct Prototype {
    pub audio: Vec<f64>,
    pub text: Vec<f64>,
}

/// Cluster-level knowledge base of prototype pairs.
#[derive(Debug, Clone)]
pub struct CoarseKB {
    pub prototypes: Vec<Prototype>,
    pub built_at_epoch: u64,
}

impl CoarseKB {
    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, |p| p.audio.len())
    }
}

/// Read access to one side of a knowledge base, shared by retrieval and
/// injection so both granularities go through the same code path.
pub trait VectorSource {
    fn count(&self) -> usize;
    fn side_vector(&self, index: usize, side: Side) -> &[f64];
    fn granularity(&self) -> Granularity;
}

impl VectorSource for FineKB {
    fn count(&self) -> usize {
        self.len()
    }

    fn side_vector(&self, index: usize, side: Side) -> &[f64] {
        match side {
            Side::Audio => self.audio(index),
            Side::Text => self.text(index),
        }
    }

    fn granularity(&self) -> Granularity {
        Granularity::Fine
    }
}

impl VectorSource for CoarseKB {
    fn count(&self) -> usize {
        self.len()
    }

    fn side_vector(&self, index: usize, side: Side) -> &[f64] {
        match side {
            Side::Audio => &self.prototypes[index].audio,
            Side::Text => &self.prototypes[index].text,
        }
    }

    fn granularity(&self) -> Granularity {
        Granularity::Coarse
    }
}

/// Result of a top-k query against one side of a base.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    pub query_id: Option<usize>,
    pub indices: Vec<usize>,
    pub sims: Vec<f64>,
    pub side: Side,
    pub granularity: Granularity,
}

/// Encodes raw paired features into L2-normalized embedding pairs.
pub trait PairEncoder {
    fn encode_audio(&self, features: &[f64]) -> Result<UnitVector>;
    fn encode_text(&self, features: &[f64]) -> Result<UnitVector>;
}

/// Encodes every pair of `features` with the current encoders. Entry order
/// and ids follow corpus order.
pub fn build_fine_kb(
    features: &[(Vec<f64>, Vec<f64>)],
    encoder: &dyn PairEncoder,
    epoch: u64,
) -> Result<FineKB> {
    if features.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut entries = Vec::with_capacity(features.len());
    let mut dim = None;
    for (id, (audio_feat, text_feat)) in features.iter().enumerate() {
        let audio = encoder.encode_audio(audio_feat)?;
        let text = encoder.encode_text(text_feat)?;
        if audio.dim() != text.dim() {
            return Err(Error::EncoderDimensionMismatch { expected: audio.dim(), got: text.dim() });
        }
        match dim {
            None => dim = Some(audio.dim()),
            Some(d) if d != audio.dim() => {
                return Err(Error::EncoderDimensionMismatch { expected: d, got: audio.dim() })
            }
            _ => {}
        }
        entries.push(KBEntry { id, audio, text });
    }
    Ok(FineKB { entries, built_at_epoch: epoch })
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic for a given seed;
/// every cluster is non-empty on return.
pub fn kmeans(
    points: &[Vec<f64>],
    n_clusters: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KMeansResult> {
    if n_clusters == 0 || n_clusters > points.len() {
        return Err(Error::TooManyClusters { requested: n_clusters, points: points.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding: first center uniform, then proportional to squared
    // distance from the nearest chosen center.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(n_clusters);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    let mut best_dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < n_clusters {
        let total: f64 = best_dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = best_dist.len() - 1;
            for (i, &w) in best_dist.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // all remaining points coincide with a chosen center
            rng.gen_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, centroids.last().unwrap());
            if d < best_dist[i] {
                best_dist[i] = d;
            }
        }
    }

    let mut assignments = vec![0usize; points.len()];
    for _ in 0..max_iters {
        let mut next = Vec::with_capacity(points.len());
        for p in points {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (m, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best_d {
                    best_d = d;
                    best = m;
                }
            }
            next.push(best);
        }

        // reseed empty clusters with the point farthest from its centroid,
        // never stealing from a singleton cluster
        let mut counts = vec![0usize; n_clusters];
        for &a in &next {
            counts[a] += 1;
        }
        for m in 0..n_clusters {
            if counts[m] > 0 {
                continue;
            }
            let mut far_idx = None;
            let mut far_d = -1.0;
            for (i, p) in points.iter().enumerate() {
                if counts[next[i]] <= 1 {
                    continue;
                }
                let d = sq_dist(p, &centroids[next[i]]);
                if d > far_d {
                    far_d = d;
                    far_idx = Some(i);
                }
            }
            if let Some(i) = far_idx {
                counts[next[i]] -= 1;
                next[i] = m;
                counts[m] = 1;
                centroids[m] = points[i].clone();
            }
        }

        let converged = next == assignments;
        assignments = next;

        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; n_clusters];
        let mut sizes = vec![0usize; n_clusters];
        for (i, p) in points.iter().enumerate() {
            let a = assignments[i];
            sizes[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for m in 0..n_clusters {
            if sizes[m] > 0 {
                for s in sums[m].iter_mut() {
                    *s /= sizes[m] as f64;
                }
                centroids[m] = std::mem::take(&mut sums[m]);
            }
        }

        if converged {
            break;
        }
    }

    Ok(KMeansResult { assignments, centroids })
}

/// Clusters the fine audio embeddings and max-pools each cluster's audio and
/// text members into a prototype pair. Text prototypes come from the same
/// member pairs as their audio counterparts so the pair correspondence of
/// the fine base carries over.
pub fn build_coarse_kb(fine: &FineKB, n_clusters: usize, seed: u64) -> Result<CoarseKB> {
    let points: Vec<Vec<f64>> = fine.entries.iter().map(|e| e.audio.as_slice().to_vec()).collect();
    let clustering = kmeans(&points, n_clusters, seed, 100)?;
    let d = fine.dim();
    let mut prototypes: Vec<Prototype> = (0..n_clusters)
        .map(|_| Prototype { audio: vec![f64::NEG_INFINITY; d], text: vec![f64::NEG_INFINITY; d] })
        .collect();
    for (i, entry) in fine.entries.iter().enumerate() {
        let proto = &mut prototypes[clustering.assignments[i]];
        for (pa, &x) in proto.audio.iter_mut().zip(entry.audio.as_slice()) {
            *pa = pa.max(x);
        }
        for (pt, &x) in proto.text.iter_mut().zip(entry.text.as_slice()) {
            *pt = pt.max(x);
        }
    }
    Ok(CoarseKB { prototypes, built_at_epoch: fine.built_at_epoch })
}

/// The `k` entries of the chosen side most similar to `query` by dot
/// product. Ties break toward the lower entry index; `exclude_id` never
/// appears in the result.
pub fn top_k(
    query: &UnitVector,
    kb: &dyn VectorSource,
    side: Side,
    k: usize,
    exclude_id: Option<usize>,
) -> Result<Neighborhood> {
    let usable = kb.count() - usize::from(exclude_id.map_or(false, |id| id < kb.count()));
    if k == 0 || k > usable {
        return Err(Error::KTooLarge { k, usable });
    }
    let mut scored: Vec<(usize, f64)> = (0..kb.count())
        .filter(|&i| Some(i) != exclude_id)
        .map(|i| (i, dot(query.as_slice(), kb.side_vector(i, side))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(Neighborhood {
        query_id: exclude_id,
        indices: scored.iter().map(|x| x.0).collect(),
        sims: scored.iter().map(|x| x.1).collect(),
        side,
        granularity: kb.granularity(),
    })
}

/// True exactly on positive multiples of the refresh period; the initial
/// epoch-0 build does not count as a refresh.
pub fn should_refresh(epoch: u64, period: u64) -> Result<bool> {
    if period == 0 {
        return Err(Error::NonPositivePeriod(period as i64));
    }
    Ok(epoch > 0 && epoch % period == 0)
}

/// Rebuilds both bases from the same corpus with the current encoder
/// parameters. Entry count and id mapping are preserved.
pub fn refresh(
    fine: &FineKB,
    features: &[(Vec<f64>, Vec<f64>)],
    encoder: &dyn PairEncoder,
    epoch: u64,
    n_clusters: usize,
    seed: u64,
) -> Result<(FineKB, CoarseKB)> {
    if features.len() != fine.len() {
        return Err(Error::Config(format!(
            "refresh corpus has {} pairs but the base was built from {}",
            features.len(),
            fine.len()
        )));
    }
    let new_fine = build_fine_kb(features, encoder, epoch)?;
    let new_coarse = build_coarse_kb(&new_fine, n_clusters, seed)?;
    Ok((new_fine, new_coarse))
}

pub mod snapshot {
    //! Binary snapshot of a knowledge-base pair.
    //!
    //! Layout: header {magic "ASKB", version u32, d u32, N_k u64, N_c u64,
    //! built_at u64}, then row-major little-endian f32 blocks for fine
    //! audio, fine text, coarse audio, coarse text.

    use super::*;

    pub const MAGIC: [u8; 4] = *b"ASKB";
    pub const VERSION: u32 = 1;

    fn write_block(w: &mut dyn Write, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
        for row in rows {
            for v in row {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn export(fine: &FineKB, coarse: &CoarseKB, w: &mut dyn Write) -> Result<()> {
        if fine.built_at_epoch != coarse.built_at_epoch {
            return Err(Error::Snapshot("fine and coarse bases built at different epochs".into()));
        }
        if !coarse.is_empty() && coarse.dim() != fine.dim() {
            return Err(Error::Snapshot("fine and coarse dimensions disagree".into()));
        }
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(fine.dim() as u32).to_le_bytes())?;
        w.write_all(&(fine.len() as u64).to_le_bytes())?;
        w.write_all(&(coarse.len() as u64).to_le_bytes())?;
        w.write_all(&fine.built_at_epoch.to_le_bytes())?;
        write_block(w, fine.entries.iter().map(|e| e.audio.as_slice().to_vec()))?;
        write_block(w, fine.entries.iter().map(|e| e.text.as_slice().to_vec()))?;
        write_block(w, coarse.prototypes.iter().map(|p| p.audio.clone()))?;
        write_block(w, coarse.prototypes.iter().map(|p| p.text.clone()))?;
        Ok(())
    }

    fn read_exact_u32(r: &mut dyn Read) -> Result<u32> {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn read_exact_u64(r: &mut dyn Read) -> Result<u64> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    fn read_block(r: &mut dyn Read, rows: usize, d: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(rows);
        let mut buf = [0u8; 4];
        for _ in 0..rows {
            let mut row = Vec::with_capacity(d);
            for _ in 0..d {
                r.read_exact(&mut buf)?;
                row.push(f32::from_le_bytes(buf) as f64);
            }
            out.push(row);
        }
        Ok(out)
    }

    pub fn import(r: &mut dyn Read) -> Result<(FineKB, CoarseKB)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::Snapshot("bad magic".into()));
        }
        let version = read_exact_u32(r)?;
        if version != VERSION {
            return Err(Error::Snapshot(format!("unsupported version {version}")));
        }
        let d = read_exact_u32(r)? as usize;
        let n_k = read_exact_u64(r)? as usize;
        let n_c = read_exact_u64(r)? as usize;
        let built_at = read_exact_u64(r)?;
        let fine_audio = read_block(r, n_k, d)?;
        let fine_text = read_block(r, n_k, d)?;
        let coarse_audio = read_block(r, n_c, d)?;
        let coarse_text = read_block(r, n_c, d)?;
        let entries = fine_audio
            .into_iter()
            .zip(fine_text)
            .enumerate()
            .map(|(id, (a, t))| {
                Ok(KBEntry {
                    id,
                    audio: UnitVector::new(a)
                        .map_err(|_| Error::Snapshot(format!("fine audio {id} not unit-norm")))?,
                    text: UnitVector::new(t)
                        .map_err(|_| Error::Snapshot(format!("fine text {id} not unit-norm")))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let prototypes = coarse_audio
            .into_iter()
            .zip(coarse_text)
            .map(|(audio, text)| Prototype { audio, text })
            .collect();
        Ok((
            FineKB { entries, built_at_epoch: built_at },
            CoarseKB { prototypes, built_at_epoch: built_at },
        ))
    }

    pub fn write_file(fine: &FineKB, coarse: &CoarseKB, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            export(fine, coarse, &mut f)?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<(FineKB, CoarseKB)> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        import(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::l2_normalize;
    use proptest::prelude::*;

    /// Normalizes the raw features and uses them as the embedding.
    pub(crate) struct IdentityEncoder;

    impl PairEncoder for IdentityEncoder {
        fn encode_audio(&self, features: &[f64]) -> Result<UnitVector> {
            l2_normalize(features)
        }

        fn encode_text(&self, features: &[f64]) -> Result<UnitVector> {
            l2_normalize(features)
        }
    }

    fn random_features(seed: u64, n: usize, d: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
        use rand::Rng;
        let mut rng = crate::rng::substream(seed, "test-kb");
        (0..n)
            .map(|_| {
                let a: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
                let t: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
                (a, t)
            })
            .collect()
    }

    #[test]
    fn build_fine_single_pair() {
        let features = vec![(vec![3.0, 4.0], vec![0.0, 2.0])];
        let kb = build_fine_kb(&features, &IdentityEncoder, 0).unwrap();
        assert_eq!(kb.len(), 1);
        assert!((crate::math::norm(kb.audio(0)) - 1.0).abs() < 1e-12);
        assert!((crate::math::norm(kb.text(0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn build_fine_identity_on_prenormalized() {
        let features = vec![(vec![0.6, 0.8], vec![1.0, 0.0])];
        let kb = build_fine_kb(&features, &IdentityEncoder, 3).unwrap();
        assert!((kb.audio(0)[0] - 0.6).abs() < 1e-9);
        assert!((kb.audio(0)[1] - 0.8).abs() < 1e-9);
        assert_eq!(kb.built_at_epoch, 3);
    }

    #[test]
    fn build_fine_hundred_pairs() {
        let features = random_features(5, 100, 6);
        let kb = build_fine_kb(&features, &IdentityEncoder, 0).unwrap();
        assert_eq!(kb.len(), 100);
        for (i, e) in kb.entries.iter().enumerate() {
            assert_eq!(e.id, i);
            assert!((crate::math::norm(e.audio.as_slice()) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn build_fine_rejects_empty() {
        assert!(matches!(build_fine_kb(&[], &IdentityEncoder, 0), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn kmeans_each_point_own_cluster() {
        let points = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = kmeans(&points, 3, 9, 100).unwrap();
        let mut seen = r.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 3);
        for (i, &a) in r.assignments.iter().enumerate() {
            assert_eq!(r.centroids[a], points[i]);
        }
    }

    #[test]
    fn kmeans_two_blobs_match_sign_partition() {
        let points: Vec<Vec<f64>> = vec![
            vec![-10.1],
            vec![-9.9],
            vec![-10.05],
            vec![9.9],
            vec![10.1],
            vec![10.02],
        ];
        let r = kmeans(&points, 2, 3, 100).unwrap();
        // brute force over the two candidate sign partitions
        let neg: Vec<usize> = (0..3).map(|i| r.assignments[i]).collect();
        let pos: Vec<usize> = (3..6).map(|i| r.assignments[i]).collect();
        assert!(neg.iter().all(|&a| a == neg[0]));
        assert!(pos.iter().all(|&a| a == pos[0]));
        assert_ne!(neg[0], pos[0]);
    }

    #[test]
    fn kmeans_deterministic_per_seed() {
        let features = random_features(13, 40, 4);
        let points: Vec<Vec<f64>> = features.iter().map(|p| p.0.clone()).collect();
        let a = kmeans(&points, 5, 77, 100).unwrap();
        let b = kmeans(&points, 5, 77, 100).unwrap();
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn kmeans_rejects_too_many_clusters() {
        let points = vec![vec![0.0]];
        assert!(matches!(kmeans(&points, 2, 0, 10), Err(Error::TooManyClusters { .. })));
    }

    #[test]
    fn coarse_identical_points_give_that_point() {
        let features = vec![(vec![0.6, 0.8], vec![1.0, 0.0]), (vec![0.6, 0.8], vec![1.0, 0.0])];
        let fine = build_fine_kb(&features, &IdentityEncoder, 0).unwrap();
        let coarse = build_coarse_kb(&fine, 1, 0).unwrap();
        assert!((coarse.prototypes[0].audio[0] - 0.6).abs() < 1e-9);
        assert!((coarse.prototypes[0].audio[1] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn coarse_elementwise_max_hand_case() {
        let features = vec![(vec![0.6, 0.8], vec![1.0, 0.0]), (vec![0.8, 0.6], vec![0.0, 1.0])];
        let fine = build_fine_kb(&features, &IdentityEncoder, 0).unwrap();
        let coarse = build_coarse_kb(&fine, 1, 0).unwrap();
        assert!((coarse.prototypes[0].audio[0] - 0.8).abs() < 1e-9);
        assert!((coarse.prototypes[0].audio[1] - 0.8).abs() < 1e-9);
        assert!((coarse.prototypes[0].text[0] - 1.0).abs() < 1e-9);
        assert!((coarse.prototypes[0].text[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn coarse_nc_equals_nk_returns_entries() {
        let features = random_features(21, 6, 3);
        let fine = build_fine_kb(&features, &IdentityEncoder, 0).unwrap();
        let coarse = build_coarse_kb(&fine, 6, 4).unwrap();
        assert_eq!(coarse.len(), 6);
        // every prototype must coincide with some entry
        for p in &coarse.prototypes {
            assert!(fine
                .entries
                .iter()
                .any(|e| e.audio.as_slice().iter().zip(&p.audio).all(|(a, b)| (a - b).abs() < 1e-12)));
        }
    }

    #[test]
    fn top_k_full_is_sorted() {
        let features = random_features(31, 5, 4);
        let fine = build_fine_kb(&features, &IdentityEncoder, 0).unwrap();
        let q = l2_normalize(&[1.0, 0.2, -0.4, 0.3]).unwrap();
        let nb = top_k(&q, &fine, Side::Audio, 5, None).unwrap();
        assert_eq!(nb.indices.len(), 5);
        for w in nb.sims.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn top_k_matches_full_sort_oracle() {
        let features = random_features(32, 3, 4);
        let fine = build_fine_kb(&features, &IdentityEncoder, 0).unwrap();
        let q = l2_normalize(&[0.3, -1.0, 0.5, 0.1]).unwrap();
        let nb = top_k(&q, &fine, Side::Text, 2, None).unwrap();
        let mut oracle: Vec<(usize, f64)> =
            (0..3).map(|i| (i, dot(q.as_slice(), fine.text(i)))).collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        assert_eq!(nb.indices, vec![oracle[0].0, oracle[1].0]);
    }

    #[test]
    fn top_k_excludes_self() {
        let features = random_features(33, 9, 4);
        let fine = build_fine_kb(&features, &IdentityEncoder, 0).unwrap();
        let q = UnitVector::new(fine.audio(7).to_vec()).unwrap();
        let nb = top_k(&q, &fine, Side::Audio, 8, Some(7)).unwrap();
        assert!(!nb.indices.contains(&7));
    }

    #[test]
    fn top_k_rejects_oversized_k() {
        let features = random_features(34, 3, 4);
        let fine = build_fine_kb(&features, &IdentityEncoder, 0).unwrap();
        let q = l2_normalize(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(top_k(&q, &fine, Side::Audio, 3, Some(0)), Err(Error::KTooLarge { .. })));
    }

    #[test]
    fn should_refresh_schedule() {
        assert!(should_refresh(15, 15).unwrap());
        assert!(!should_refresh(0, 15).unwrap());
        assert!(!should_refresh(14, 15).unwrap());
        assert!(should_refresh(30, 15).unwrap());
        assert!(matches!(should_refresh(1, 0), Err(Error::NonPositivePeriod(_))));
    }

    #[test]
    fn refresh_with_fixed_encoder_is_identity() {
        let features = random_features(41, 12, 4);
        let fine = build_fine_kb(&features, &IdentityEncoder, 0).unwrap();
        let (fine2, _) = refresh(&fine, &features, &IdentityEncoder, 15, 3, 1).unwrap();
        assert_eq!(fine2.built_at_epoch, 15);
        for (a, b) in fine.entries.iter().zip(&fine2.entries) {
            assert_eq!(a.id, b.id);
            for (x, y) in a.audio.as_slice().iter().zip(b.audio.as_slice()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn refresh_resets_rdm_to_zero() {
        let features = random_features(42, 10, 4);
        let fine = build_fine_kb(&features, &IdentityEncoder, 0).unwrap();
        let (fine2, _) = refresh(&fine, &features, &IdentityEncoder, 15, 2, 1).unwrap();
        let vectors: Vec<UnitVector> =
            fine2.entries.iter().map(|e| e.audio.clone()).collect();
        let report = crate::diagnostics::rdm(&vectors, &vectors, &vectors, 1.0, 15, 15).unwrap();
        assert!(report.mean.abs() < 1e-9);
    }

    #[test]
    fn snapshot_round_trip() {
        let features = random_features(51, 8, 5);
        let fine = build_fine_kb(&features, &IdentityEncoder, 2).unwrap();
        let coarse = build_coarse_kb(&fine, 3, 0).unwrap();
        let mut buf = Vec::new();
        snapshot::export(&fine, &coarse, &mut buf).unwrap();
        let (fine2, coarse2) = snapshot::import(&mut &buf[..]).unwrap();
        assert_eq!(fine2.len(), 8);
        assert_eq!(coarse2.len(), 3);
        assert_eq!(fine2.built_at_epoch, 2);
        for (a, b) in fine.entries.iter().zip(&fine2.entries) {
            for (x, y) in a.audio.as_slice().iter().zip(b.audio.as_slice()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        for (a, b) in coarse.prototypes.iter().zip(&coarse2.prototypes) {
            for (x, y) in a.text.iter().zip(&b.text) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn snapshot_rejects_bad_magic() {
        let buf = b"NOPE".to_vec();
        assert!(matches!(snapshot::import(&mut &buf[..]), Err(Error::Snapshot(_)) | Err(Error::Io(_))));
    }

    proptest! {
        #[test]
        fn maxpool_dominance(seed in 0u64..500, n in 2usize..20, nc in 1usize..5) {
            let nc = nc.min(n);
            let features = random_features(seed, n, 4);
            let fine = build_fine_kb(&features, &IdentityEncoder, 0).unwrap();
            let coarse = build_coarse_kb(&fine, nc, seed).unwrap();
            let points: Vec<Vec<f64>> = fine.entries.iter().map(|e| e.audio.as_slice().to_vec()).collect();
            let clustering = kmeans(&points, nc, seed, 100).unwrap();
            for (i, e) in fine.entries.iter().enumerate() {
                let p = &coarse.prototypes[clustering.assignments[i]];
                for (c, x) in p.audio.iter().zip(e.audio.as_slice()) {
                    prop_assert!(c >= x);
                }
                for (c, x) in p.text.iter().zip(e.text.as_slice()) {
                    prop_assert!(c >= x);
                }
            }
        }

        #[test]
        fn top_k_prefix_stability(seed in 0u64..500, n in 4usize..20) {
            let features = random_features(seed, n, 5);
            let fine = build_fine_kb(&features, &IdentityEncoder, 0).unwrap();
            let q = l2_normalize(&[0.2, -0.7, 0.1, 0.9, -0.3]).unwrap();
            let k1 = n / 2;
            let small = top_k(&q, &fine, Side::Audio, k1, None).unwrap();
            let large = top_k(&q, &fine, Side::Audio, n, None).unwrap();
            prop_assert_eq!(&small.indices[..], &large.indices[..k1]);
        }

        #[test]
        fn kmeans_total_and_nonempty(seed in 0u64..300, n in 3usize..24, nc in 1usize..8) {
            let nc = nc.min(n);
            let features = random_features(seed, n, 3);
            let points: Vec<Vec<f64>> = features.iter().map(|p| p.0.clone()).collect();
            let r = kmeans(&points, nc, seed, 100).unwrap();
            prop_assert_eq!(r.assignments.len(), n);
            let mut counts = vec![0usize; nc];
            for &a in &r.assignments { counts[a] += 1; }
            prop_assert!(counts.iter().all(|&c| c > 0));
        }
    }
}
