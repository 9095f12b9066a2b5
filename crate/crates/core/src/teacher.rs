//! kNN teacher: exact k-nearest-neighbor frame matching against a per-speaker
//! pool, producing pseudo-parallel targets in the pool speaker's timbre.
//!
//! Search is brute force. Scores are computed in blocks of source frames
//! against blocks of pool frames so the pool block stays hot in cache; every
//! source frame then keeps a running top-k list ordered by (score desc,
//! pool index asc). The output frame is the unweighted mean of the k
//! selected pool frames, summed in ascending pool-index order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::format::read_features;

/// Neighbor count used by the teacher at full scale.
pub const DEFAULT_K: usize = 8;

const SOURCE_BLOCK: usize = 16;
const POOL_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Similarity {
    #[default]
    Cosine,
    /// Negative squared Euclidean distance, for ablations.
    NegSquaredEuclidean,
}

#[derive(Debug, Clone)]
struct SpeakerStore {
    frames: FeatureMatrix,
    norms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MatchingPool {
    speakers: BTreeMap<String, SpeakerStore>,
    k: usize,
    similarity: Similarity,
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Builds a pool with cosine similarity. Entries sharing a speaker id are
/// concatenated in the order given.
pub fn build_pool<I, S>(entries: I, k: usize) -> Result<MatchingPool>
where
    I: IntoIterator<Item = (S, FeatureMatrix)>,
    S: Into<String>,
{
    MatchingPool::build(entries, k, Similarity::Cosine)
}

impl MatchingPool {
    pub fn build<I, S>(entries: I, k: usize, similarity: Similarity) -> Result<Self>
    where
        I: IntoIterator<Item = (S, FeatureMatrix)>,
        S: Into<String>,
    {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        let mut grouped: BTreeMap<String, Vec<FeatureMatrix>> = BTreeMap::new();
        let mut dim = None;
        for (id, m) in entries {
            let d = *dim.get_or_insert(m.dim());
            if m.dim() != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    found: m.dim(),
                });
            }
            grouped.entry(id.into()).or_default().push(m);
        }
        if grouped.is_empty() {
            return Err(Error::Empty("matching pool"));
        }
        let mut speakers = BTreeMap::new();
        for (id, parts) in grouped {
            let refs: Vec<&FeatureMatrix> = parts.iter().collect();
            let frames = FeatureMatrix::concat(&refs)?;
            if frames.frames() < k {
                return Err(Error::SpeakerTooSmall {
                    speaker: id,
                    frames: frames.frames(),
                    k,
                });
            }
            let norms: Vec<f64> = frames.rows().map(norm).collect();
            if similarity == Similarity::Cosine {
                if let Some(index) = norms.iter().position(|&n| n == 0.0) {
                    return Err(Error::ZeroNorm { index });
                }
            }
            speakers.insert(id, SpeakerStore { frames, norms });
        }
        Ok(Self {
            speakers,
            k,
            similarity,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn similarity(&self) -> Similarity {
        self.similarity
    }

    pub fn dim(&self) -> usize {
        self.speakers.values().next().unwrap().frames.dim()
    }

    /// Speaker ids in sorted order.
    pub fn speaker_ids(&self) -> impl Iterator<Item = &str> {
        self.speakers.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn speaker_frames(&self, speaker: &str) -> Option<&FeatureMatrix> {
        self.speakers.get(speaker).map(|s| &s.frames)
    }

    /// Uniformly random speaker id (one `random_range` draw).
    pub fn sample_speaker<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&str> {
        if self.speakers.is_empty() {
            return Err(Error::Empty("matching pool"));
        }
        let i = rng.random_range(0..self.speakers.len());
        Ok(self.speakers.keys().nth(i).unwrap())
    }

    /// Replaces every source frame by the mean of its k most similar frames
    /// from `speaker`'s pool.
    pub fn knn_convert(&self, speaker: &str, source: &FeatureMatrix) -> Result<FeatureMatrix> {
        let store = self
            .speakers
            .get(speaker)
            .ok_or_else(|| Error::UnknownSpeaker(speaker.to_string()))?;
        let dim = store.frames.dim();
        if source.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: source.dim(),
            });
        }
        let source_norms: Vec<f64> = source.rows().map(norm).collect();
        if self.similarity == Similarity::Cosine {
            if let Some(index) = source_norms.iter().position(|&n| n == 0.0) {
                return Err(Error::ZeroNorm { index });
            }
        }

        let src = source.as_slice();
        let out: Vec<f32> = src
            .par_chunks(SOURCE_BLOCK * dim)
            .zip(source_norms.par_chunks(SOURCE_BLOCK))
            .flat_map_iter(|(block, norms)| self.convert_block(store, block, norms))
            .collect();
        source.with_data(out)
    }

    fn convert_block(&self, store: &SpeakerStore, block: &[f32], norms: &[f64]) -> Vec<f32> {
        let dim = store.frames.dim();
        let pool = store.frames.as_slice();
        let rows = norms.len();
        let mut tops: Vec<TopK> = (0..rows).map(|_| TopK::new(self.k)).collect();
        let mut scores = vec![0.0f64; rows * POOL_BLOCK];

        for (b, pool_block) in pool.chunks(POOL_BLOCK * dim).enumerate() {
            let base = b * POOL_BLOCK;
            let width = pool_block.len() / dim;
            for (i, x) in block.chunks_exact(dim).enumerate() {
                let row = &mut scores[i * POOL_BLOCK..i * POOL_BLOCK + width];
                for (j, (s, p)) in row.iter_mut().zip(pool_block.chunks_exact(dim)).enumerate() {
                    *s = match self.similarity {
                        Similarity::Cosine => dot(x, p) / (norms[i] * store.norms[base + j]),
                        Similarity::NegSquaredEuclidean => -crate::kmeans::sq_dist(x, p),
                    };
                }
            }
            for (i, top) in tops.iter_mut().enumerate() {
                for (j, &s) in scores[i * POOL_BLOCK..i * POOL_BLOCK + width]
                    .iter()
                    .enumerate()
                {
                    top.offer(s, base + j);
                }
            }
        }

        let mut out = Vec::with_capacity(rows * dim);
        let mut acc = vec![0.0f64; dim];
        for top in tops {
            let mut idx = top.indices();
            idx.sort_unstable();
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &p in &idx {
                for (a, &v) in acc.iter_mut().zip(&pool[p * dim..(p + 1) * dim]) {
                    *a += f64::from(v);
                }
            }
            let inv = 1.0 / idx.len() as f64;
            out.extend(acc.iter().map(|&a| (a * inv) as f32));
        }
        out
    }
}

/// Best-k list kept sorted best-first. Candidates arrive in ascending index
/// order, so an equal score never displaces an existing entry.
struct TopK {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn offer(&mut self, score: f64, index: usize) {
        if self.items.len() == self.k && score <= self.items[self.k - 1].0 {
            return;
        }
        let pos = self.items.partition_point(|&(s, _)| s >= score);
        self.items.insert(pos, (score, index));
        self.items.truncate(self.k);
    }

    fn indices(&self) -> Vec<usize> {
        self.items.iter().map(|&(_, i)| i).collect()
    }
}

/// One `(speaker-id, feature file)` line of a pool manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub speaker: String,
    pub path: PathBuf,
}

/// Parses a pool manifest: one `speaker<TAB>path` pair per line, `#` starts a
/// comment, relative paths resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (speaker, file) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: expected speaker<TAB>path", n + 1),
        })?;
        let file = Path::new(file.trim());
        entries.push(ManifestEntry {
            speaker: speaker.trim().to_string(),
            path: if file.is_absolute() {
                file.to_path_buf()
            } else {
                base.join(file)
            },
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let text: String = entries
        .iter()
        .map(|e| format!("{}\t{}\n", e.speaker, e.path.display()))
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every file named in a manifest and builds a pool from them.
pub fn load_pool(
    manifest: impl AsRef<Path>,
    k: usize,
    similarity: Similarity,
) -> Result<MatchingPool> {
    let entries = read_manifest(manifest)?;
    let loaded = entries
        .into_iter()
        .map(|e| Ok((e.speaker, read_features(&e.path)?)))
        .collect::<Result<Vec<_>>>()?;
    MatchingPool::build(loaded, k, similarity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::DEFAULT_HOP_US;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(r: &[[f32; 2]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(r, DEFAULT_HOP_US).unwrap()
    }

    #[test]
    fn hand_checked_two_neighbors() {
        let pool = build_pool([("a", rows(&[[1.0, 0.1], [0.9, 0.0], [-1.0, 0.0]]))], 2).unwrap();
        let out = pool.knn_convert("a", &rows(&[[1.0, 0.0]])).unwrap();
        assert_eq!(out.row(0), &[0.95, 0.05]);
    }

    #[test]
    fn self_pool_identity_with_k1() {
        let src = rows(&[[1.0, 2.0], [-3.0, 1.0], [0.5, -0.5], [2.0, 2.1]]);
        let pool = build_pool([("s", src.clone())], 1).unwrap();
        assert!(pool.knn_convert("s", &src).unwrap().bit_eq(&src));
    }

    #[test]
    fn build_errors_and_merge() {
        let five = FeatureMatrix::new(5, 2, DEFAULT_HOP_US, vec![1.0; 10]).unwrap();
        assert!(matches!(
            build_pool([("x", five)], 8),
            Err(Error::SpeakerTooSmall {
                frames: 5,
                k: 8,
                ..
            })
        ));
        let hundred = FeatureMatrix::new(100, 2, DEFAULT_HOP_US, vec![1.0; 200]).unwrap();
        let pool = build_pool([("x", hundred.clone()), ("x", hundred)], 8).unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(pool.speaker_frames("x").unwrap().frames(), 200);

        let a = FeatureMatrix::new(10, 2, DEFAULT_HOP_US, vec![1.0; 20]).unwrap();
        let b = FeatureMatrix::new(10, 3, DEFAULT_HOP_US, vec![1.0; 30]).unwrap();
        assert!(matches!(
            build_pool([("a", a), ("b", b)], 1),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn convert_errors() {
        let pool = build_pool([("a", rows(&[[1.0, 0.0], [0.0, 1.0]]))], 1).unwrap();
        assert!(matches!(
            pool.knn_convert("b", &rows(&[[1.0, 0.0]])),
            Err(Error::UnknownSpeaker(_))
        ));
        assert!(matches!(
            pool.knn_convert("a", &rows(&[[1.0, 0.0], [0.0, 0.0]])),
            Err(Error::ZeroNorm { index: 1 })
        ));
    }

    #[test]
    fn ties_prefer_lower_pool_index() {
        // Frames 0 and 2 are parallel to the query and score identically.
        let pool = build_pool([("a", rows(&[[2.0, 0.0], [0.0, 1.0], [1.0, 0.0]]))], 1).unwrap();
        let out = pool.knn_convert("a", &rows(&[[3.0, 0.0]])).unwrap();
        assert_eq!(out.row(0), &[2.0, 0.0]);
    }

    #[test]
    fn euclidean_switch() {
        let pool = MatchingPool::build(
            [("a", rows(&[[10.0, 0.0], [1.1, 0.0]]))],
            1,
            Similarity::NegSquaredEuclidean,
        )
        .unwrap();
        // Cosine would tie and pick frame 0; Euclidean picks the closer one.
        let out = pool.knn_convert("a", &rows(&[[1.0, 0.0]])).unwrap();
        assert_eq!(out.row(0), &[1.1, 0.0]);
    }

    #[test]
    fn sampling_is_uniform_and_deterministic() {
        let m = FeatureMatrix::new(8, 2, DEFAULT_HOP_US, vec![1.0; 16]).unwrap();
        let pool = build_pool(["a", "b", "c", "d"].map(|s| (s, m.clone())), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = BTreeMap::new();
        for _ in 0..10_000 {
            *counts
                .entry(pool.sample_speaker(&mut rng).unwrap())
                .or_insert(0usize) += 1;
        }
        for (&id, &c) in &counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.25).abs() <= 0.02, "{id}: {f}");
        }

        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| pool.sample_speaker(&mut rng).unwrap().to_string())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));

        let single = build_pool([("only", m)], 1).unwrap();
        assert_eq!(single.sample_speaker(&mut rng).unwrap(), "only");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = rows(&[[1.0, 0.0], [0.0, 1.0]]);
        crate::format::write_features(&m, dir.path().join("a.vtf")).unwrap();
        let manifest = dir.path().join("pool.txt");
        fs::write(&manifest, "# pool\nspk-a\ta.vtf\n\nspk-a\ta.vtf\n").unwrap();
        let entries = read_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].path, dir.path().join("a.vtf"));
        let pool = load_pool(&manifest, 3, Similarity::Cosine).unwrap();
        assert_eq!(pool.speaker_frames("spk-a").unwrap().frames(), 4);

        fs::write(&manifest, "no tab here\n").unwrap();
        assert!(matches!(read_manifest(&manifest), Err(Error::Parse { .. })));
    }
}
