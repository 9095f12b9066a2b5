//! Synthetic speaker corpus and feature-space evaluation proxies.
//!
//! Frames are additive, `archetype + speaker offset + noise`, so both the
//! content and the speaker factor are known by construction.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, DEFAULT_HOP_US};
use crate::format::{encode_features, write_features};
use crate::kmeans::Codebook;
use crate::teacher::{write_manifest, ManifestEntry};

/// Content archetypes are held for a run of this many frames (inclusive).
pub const RUN_LENGTH: (usize, usize) = (2, 6);
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpusSpec {
    pub num_speakers: usize,
    pub frames_per_speaker: usize,
    pub dim: usize,
    pub content_archetypes: usize,
    pub speaker_offset_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            num_speakers: 4,
            frames_per_speaker: 500,
            dim: 16,
            content_archetypes: 8,
            speaker_offset_scale: 1.0,
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if [
            self.num_speakers,
            self.frames_per_speaker,
            self.dim,
            self.content_archetypes,
        ]
        .contains(&0)
        {
            return Err(Error::InvalidConfig("corpus counts must be >= 1".into()));
        }
        // zero scales are allowed: they switch a factor off
        for (name, v) in [
            ("speaker_offset_scale", self.speaker_offset_scale),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

pub fn speaker_id(index: usize) -> String {
    format!("spk{index:02}")
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Generates `(speaker id, features)` for each speaker in id order.
///
/// Draw order: all archetypes, then all speaker offsets, then per speaker
/// the frames (a run length and archetype per run, then noise per value).
pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<(String, FeatureMatrix)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let archetypes = normal_vec(&mut rng, spec.content_archetypes * d, 1.0);
    let offsets = normal_vec(&mut rng, spec.num_speakers * d, spec.speaker_offset_scale);

    let mut corpus = Vec::with_capacity(spec.num_speakers);
    for s in 0..spec.num_speakers {
        let offset = &offsets[s * d..(s + 1) * d];
        let mut data = Vec::with_capacity(spec.frames_per_speaker * d);
        while data.len() < spec.frames_per_speaker * d {
            let run = rng.random_range(RUN_LENGTH.0..=RUN_LENGTH.1);
            let a = rng.random_range(0..spec.content_archetypes);
            let arch = &archetypes[a * d..(a + 1) * d];
            for _ in 0..run {
                if data.len() == spec.frames_per_speaker * d {
                    break;
                }
                for j in 0..d {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    data.push((arch[j] + offset[j] + spec.noise_sigma * noise) as f32);
                }
            }
        }
        corpus.push((
            speaker_id(s),
            FeatureMatrix::new(spec.frames_per_speaker, d, DEFAULT_HOP_US, data)?,
        ));
    }
    Ok(corpus)
}

/// SHA-256 over the `VTF1` encodings of the corpus matrices in order, as hex.
pub fn corpus_checksum(corpus: &[(String, FeatureMatrix)]) -> String {
    let mut h = Sha256::new();
    for (_, m) in corpus {
        h.update(encode_features(m));
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes one `<speaker>.vtf` per speaker plus a manifest; returns the
/// manifest path.
pub fn write_corpus(dir: impl AsRef<Path>, corpus: &[(String, FeatureMatrix)]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(corpus.len());
    for (spk, m) in corpus {
        let name = format!("{spk}.vtf");
        write_features(m, dir.join(&name))?;
        entries.push(ManifestEntry {
            speaker: spk.clone(),
            path: PathBuf::from(name),
        });
    }
    let manifest = dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

fn mean_vector(m: &FeatureMatrix) -> Vec<f64> {
    let mut mean = vec![0.0; m.dim()];
    for row in m.rows() {
        for (acc, &v) in mean.iter_mut().zip(row) {
            *acc += f64::from(v);
        }
    }
    let n = m.frames() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    mean
}

/// Cosine similarity of the time-averaged feature vectors: a feature-space
/// stand-in for speaker-embedding similarity.
pub fn speaker_similarity_proxy(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let (ma, mb) = (mean_vector(a), mean_vector(b));
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(&ma), norm(&mb));
    if na == 0.0 {
        return Err(Error::ZeroNorm { index: 0 });
    }
    if nb == 0.0 {
        return Err(Error::ZeroNorm { index: 1 });
    }
    let dot: f64 = ma.iter().zip(&mb).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookStats {
    /// Fraction of centroids assigned at least one frame.
    pub utilization: f64,
    /// `exp` of the assignment-distribution entropy (nats).
    pub perplexity: f64,
    pub counts: Vec<u64>,
}

pub fn codebook_stats(cb: &Codebook, corpus: &[FeatureMatrix]) -> Result<CodebookStats> {
    let mut counts = vec![0u64; cb.len()];
    for m in corpus {
        for id in cb.assign(m)? {
            counts[id as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("corpus"));
    }
    let used = counts.iter().filter(|&&c| c > 0).count();
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    Ok(CodebookStats {
        utilization: used as f64 / cb.len() as f64,
        perplexity: entropy.exp(),
        counts,
    })
}
