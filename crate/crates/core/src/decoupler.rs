//! Residual-enhanced two-stage K-Means content decoupler.
//!
//! Stage one quantizes each frame `x` to its content centroid `c1`. Stage two
//! quantizes the residual `x - c1` with a second codebook whose first
//! centroid starts at the zero vector. The enhanced content frame is the
//! centroid sum `c1 + c2`, so its width stays equal to the input width.
//!
//! Residual centroid 0 is pinned at the zero vector and frozen through Lloyd.
//! Zero is therefore always a candidate for `c2` (and wins ties by index), so
//! `|x - (c1 + c2)| <= |x - c1|` holds frame by frame.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::format::{read_codebook, write_codebook};
use crate::kmeans::{self, sq_dist, Codebook, KMeansConfig};

pub const FULL_SCALE_CONTENT_CENTROIDS: usize = 1024;
pub const FULL_SCALE_RESIDUAL_CENTROIDS: usize = 256;
pub const DEFAULT_CONTENT_CENTROIDS: usize = 64;
pub const DEFAULT_RESIDUAL_CENTROIDS: usize = 16;

pub const CONTENT_FILE: &str = "content.vtc";
pub const RESIDUAL_FILE: &str = "residual.vtc";
pub const METADATA_FILE: &str = "decoupler.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    Sum,
}

impl fmt::Display for CombineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CombineMode::Sum => f.write_str("sum"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecouplerModel {
    content: Codebook,
    residual: Codebook,
    combine: CombineMode,
    seed: u64,
}

/// Output of [`DecouplerModel::encode`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub enhanced: FeatureMatrix,
    pub content_ids: Vec<u32>,
    pub residual_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistortionReport {
    /// Mean of `|x - c1|^2` over frames.
    pub stage1_mse: f64,
    /// Mean of `|x - (c1 + c2)|^2` over frames.
    pub stage2_mse: f64,
    pub content_utilization: f64,
    pub residual_utilization: f64,
}

fn pooled(corpus: &[FeatureMatrix]) -> Result<FeatureMatrix> {
    let parts: Vec<&FeatureMatrix> = corpus.iter().collect();
    FeatureMatrix::concat(&parts).map_err(|e| match e {
        Error::Empty(_) => Error::Empty("decoupler corpus"),
        e => e,
    })
}

/// Fits both stages on the pooled frames of `corpus`.
///
/// The content codebook uses `config.seed`; the residual codebook uses
/// `config.seed + 1` and keeps its first centroid frozen at zero.
pub fn fit_decoupler(
    corpus: &[FeatureMatrix],
    k1: usize,
    k2: usize,
    config: &KMeansConfig,
) -> Result<DecouplerModel> {
    let frames = pooled(corpus)?;
    let content_cfg = KMeansConfig {
        pinned_centroids: Vec::new(),
        ..config.clone()
    };
    let content = kmeans::fit(&frames, k1, &content_cfg)?;

    let residuals = residuals(&content, &frames)?;
    let residual_cfg = KMeansConfig {
        seed: config.seed.wrapping_add(1),
        pinned_centroids: vec![vec![0.0; frames.dim()]],
        freeze_pinned: true,
        ..config.clone()
    };
    let residual = kmeans::fit(&residuals, k2, &residual_cfg)?;

    DecouplerModel::new(content, residual, config.seed)
}

fn residuals(content: &Codebook, frames: &FeatureMatrix) -> Result<FeatureMatrix> {
    let (quantized, _) = content.quantize(frames)?;
    let data = frames
        .as_slice()
        .iter()
        .zip(quantized.as_slice())
        .map(|(x, c)| x - c)
        .collect();
    frames.with_data(data)
}

impl DecouplerModel {
    pub fn new(content: Codebook, residual: Codebook, seed: u64) -> Result<Self> {
        if content.dim() != residual.dim() {
            return Err(Error::DimMismatch {
                expected: content.dim(),
                found: residual.dim(),
            });
        }
        Ok(Self {
            content,
            residual,
            combine: CombineMode::Sum,
            seed,
        })
    }

    pub fn content_codebook(&self) -> &Codebook {
        &self.content
    }

    pub fn residual_codebook(&self) -> &Codebook {
        &self.residual
    }

    pub fn combine_mode(&self) -> CombineMode {
        self.combine
    }

    pub fn dim(&self) -> usize {
        self.content.dim()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// True when the residual codebook still holds an exact zero vector,
    /// which is what the per-frame error bound relies on.
    pub fn has_zero_residual(&self) -> bool {
        (0..self.residual.len()).any(|i| self.residual.centroid(i).iter().all(|&v| v == 0.0))
    }

    pub fn encode(&self, m: &FeatureMatrix) -> Result<Encoded> {
        if m.dim() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                found: m.dim(),
            });
        }
        let dim = self.dim();
        let mut enhanced = Vec::with_capacity(m.as_slice().len());
        let mut content_ids = Vec::with_capacity(m.frames());
        let mut residual_ids = Vec::with_capacity(m.frames());
        let mut r = vec![0.0f32; dim];
        for x in m.rows() {
            let (i1, _) = self.content.nearest(x);
            let c1 = self.content.centroid(i1 as usize);
            for ((r, &x), &c) in r.iter_mut().zip(x).zip(c1) {
                *r = x - c;
            }
            let (i2, _) = self.residual.nearest(&r);
            let c2 = self.residual.centroid(i2 as usize);
            enhanced.extend(c1.iter().zip(c2).map(|(a, b)| a + b));
            content_ids.push(i1);
            residual_ids.push(i2);
        }
        Ok(Encoded {
            enhanced: m.with_data(enhanced)?,
            content_ids,
            residual_ids,
        })
    }

    pub fn distortion_report(&self, corpus: &[FeatureMatrix]) -> Result<DistortionReport> {
        if corpus.is_empty() {
            return Err(Error::Empty("distortion corpus"));
        }
        let mut stage1 = 0.0;
        let mut stage2 = 0.0;
        let mut frames = 0usize;
        let mut used1 = vec![false; self.content.len()];
        let mut used2 = vec![false; self.residual.len()];
        for m in corpus {
            let enc = self.encode(m)?;
            for ((x, e), (&i1, &i2)) in m
                .rows()
                .zip(enc.enhanced.rows())
                .zip(enc.content_ids.iter().zip(&enc.residual_ids))
            {
                stage1 += sq_dist(x, self.content.centroid(i1 as usize));
                stage2 += sq_dist(x, e);
                used1[i1 as usize] = true;
                used2[i2 as usize] = true;
            }
            frames += m.frames();
        }
        let frac = |used: &[bool]| used.iter().filter(|&&u| u).count() as f64 / used.len() as f64;
        Ok(DistortionReport {
            stage1_mse: stage1 / frames as f64,
            stage2_mse: stage2 / frames as f64,
            content_utilization: frac(&used1),
            residual_utilization: frac(&used2),
        })
    }

    /// Writes `content.vtc`, `residual.vtc` and `decoupler.txt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_codebook(&self.content, dir.join(CONTENT_FILE))?;
        write_codebook(&self.residual, dir.join(RESIDUAL_FILE))?;
        let meta = format!(
            "combine_mode={}\nk1={}\nk2={}\nseed={}\n",
            self.combine,
            self.content.len(),
            self.residual.len(),
            self.seed
        );
        let path = dir.join(METADATA_FILE);
        fs::write(&path, meta).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let content = read_codebook(dir.join(CONTENT_FILE))?;
        let residual = read_codebook(dir.join(RESIDUAL_FILE))?;
        let path = dir.join(METADATA_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let parse_err = |message: String| Error::Parse {
            path: path.clone(),
            message,
        };
        let mut seed = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key=value, got {line:?}")))?;
            let expect_count = |n: usize| -> Result<()> {
                match value.parse::<usize>() {
                    Ok(v) if v == n => Ok(()),
                    _ => Err(parse_err(format!(
                        "{key}={value} disagrees with codebook size {n}"
                    ))),
                }
            };
            match key {
                "combine_mode" if value == "sum" => {}
                "combine_mode" => return Err(parse_err(format!("unknown combine mode {value:?}"))),
                "k1" => expect_count(content.len())?,
                "k2" => expect_count(residual.len())?,
                "seed" => {
                    seed = Some(
                        value
                            .parse()
                            .map_err(|_| parse_err(format!("bad seed {value:?}")))?,
                    )
                }
                _ => return Err(parse_err(format!("unknown key {key:?}"))),
            }
        }
        let seed = seed.ok_or_else(|| parse_err("missing seed".into()))?;
        Self::new(content, residual, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::DEFAULT_HOP_US;

    fn exact_cover_corpus() -> Vec<FeatureMatrix> {
        let values: [[f32; 2]; 3] = [[0.0, 0.0], [5.0, 1.0], [-2.0, 4.0]];
        let rows: Vec<[f32; 2]> = (0..30).map(|i| values[i % 3]).collect();
        vec![
            FeatureMatrix::from_rows(&rows[..12], DEFAULT_HOP_US).unwrap(),
            FeatureMatrix::from_rows(&rows[12..], DEFAULT_HOP_US).unwrap(),
        ]
    }

    #[test]
    fn exact_cover_has_zero_distortion() {
        let corpus = exact_cover_corpus();
        let model = fit_decoupler(&corpus, 3, 2, &KMeansConfig::with_seed(4)).unwrap();
        assert_eq!(model.content_codebook().distortion(), 0.0);
        assert_eq!(model.residual_codebook().distortion(), 0.0);
        assert!(model.has_zero_residual());
        let report = model.distortion_report(&corpus).unwrap();
        assert_eq!(report.stage1_mse, 0.0);
        assert_eq!(report.stage2_mse, 0.0);
        for m in &corpus {
            assert!(model.encode(m).unwrap().enhanced.bit_eq(m));
        }
    }

    #[test]
    fn single_centroids_give_mean_and_near_zero_residual() {
        let rows: Vec<[f32; 2]> = vec![[1.0, 0.0], [3.0, 2.0], [2.0, 7.0], [6.0, -1.0]];
        let m = FeatureMatrix::from_rows(&rows, DEFAULT_HOP_US).unwrap();
        let model = fit_decoupler(&[m], 1, 1, &KMeansConfig::default()).unwrap();
        assert_eq!(model.content_codebook().centroid(0), &[3.0, 2.0]);
        assert_eq!(model.residual_codebook().centroid(0), &[0.0, 0.0]);
    }

    #[test]
    fn centroid_frame_is_a_double_fixed_point() {
        let corpus = exact_cover_corpus();
        let model = fit_decoupler(&corpus, 2, 2, &KMeansConfig::with_seed(9)).unwrap();
        let c = model.content_codebook().centroid(1).to_vec();
        let m = FeatureMatrix::from_rows(&[c], DEFAULT_HOP_US).unwrap();
        let enc = model.encode(&m).unwrap();
        assert!(enc.enhanced.bit_eq(&m));
        assert_eq!(enc.residual_ids, vec![0]);
    }

    #[test]
    fn dimension_mismatch() {
        let model = fit_decoupler(&exact_cover_corpus(), 2, 1, &KMeansConfig::default()).unwrap();
        let m = FeatureMatrix::new(1, 3, DEFAULT_HOP_US, vec![0.0; 3]).unwrap();
        assert!(matches!(model.encode(&m), Err(Error::DimMismatch { .. })));
        assert!(model.distortion_report(&[]).is_err());
        assert!(fit_decoupler(&[], 1, 1, &KMeansConfig::default()).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let model =
            fit_decoupler(&exact_cover_corpus(), 3, 2, &KMeansConfig::with_seed(4)).unwrap();
        model.save(dir.path()).unwrap();
        let meta = fs::read_to_string(dir.path().join(METADATA_FILE)).unwrap();
        assert_eq!(meta, "combine_mode=sum\nk1=3\nk2=2\nseed=4\n");
        let back = DecouplerModel::load(dir.path()).unwrap();
        assert_eq!(
            back.content_codebook().centroids(),
            model.content_codebook().centroids()
        );
        assert_eq!(
            back.residual_codebook().centroids(),
            model.residual_codebook().centroids()
        );
        assert_eq!(back.seed(), 4);

        fs::write(
            dir.path().join(METADATA_FILE),
            "combine_mode=concat\nseed=4\n",
        )
        .unwrap();
        assert!(matches!(
            DecouplerModel::load(dir.path()),
            Err(Error::Parse { .. })
        ));
    }
}
