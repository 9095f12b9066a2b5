//! Dual-mode training-pair construction.
//!
//! Each pair is drawn in one of two modes. Reconstruction uses the source
//! itself as the target. Conversion renders the source through the kNN
//! teacher with a randomly chosen pool speaker and uses that pseudo-parallel
//! output as the target. In both modes the speaker prompt is a contiguous
//! slice of the target and is placed in front of the content along time.
//!
//! RNG draw order per pair: mode, then speaker (conversion only), then
//! prompt start (only when more than one start is valid).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::decoupler::DecouplerModel;
use crate::error::{Error, Result};
use crate::features::{prompt_frames, FeatureMatrix, DEFAULT_HOP_US, DEFAULT_PROMPT_SECONDS};
use crate::kmeans::Codebook;
use crate::teacher::MatchingPool;

pub const DEFAULT_P_CONVERSION: f64 = 0.5;
pub const DEFAULT_MIN_FRAMES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Reconstruction,
    Conversion,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Reconstruction => "reconstruction",
            Mode::Conversion => "conversion",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruction" => Ok(Mode::Reconstruction),
            "conversion" => Ok(Mode::Conversion),
            _ => Err(Error::InvalidConfig(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairConfig {
    pub p_conversion: f64,
    pub prompt_frames: usize,
    pub min_frames: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            p_conversion: DEFAULT_P_CONVERSION,
            prompt_frames: prompt_frames(DEFAULT_PROMPT_SECONDS, DEFAULT_HOP_US),
            min_frames: DEFAULT_MIN_FRAMES,
        }
    }
}

impl PairConfig {
    pub fn with_prompt_seconds(seconds: f64, hop_us: u32) -> Self {
        Self {
            prompt_frames: prompt_frames(seconds, hop_us),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_conversion) {
            return Err(Error::InvalidConfig(format!(
                "p_conversion {} outside [0, 1]",
                self.p_conversion
            )));
        }
        if self.prompt_frames == 0 || self.min_frames == 0 {
            return Err(Error::InvalidConfig(
                "prompt_frames and min_frames must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub mode: Mode,
    /// Pool speaker used by the teacher; `None` in reconstruction mode.
    pub speaker: Option<String>,
    /// Enhanced content representation of the source.
    pub content: FeatureMatrix,
    pub prompt: FeatureMatrix,
    /// First target frame covered by the prompt.
    pub prompt_start: usize,
    pub target: FeatureMatrix,
    /// Target token ids for the small, medium and large codebooks.
    pub target_ids: [Vec<u32>; 3],
    /// `prompt` followed by `content` along time.
    pub converter_input: FeatureMatrix,
}

impl TrainingPair {
    pub fn prompt_len(&self) -> usize {
        self.prompt.frames()
    }

    /// Loss mask over converter positions: prompt positions are excluded.
    pub fn loss_mask(&self) -> Vec<bool> {
        let p = self.prompt_len();
        (0..self.converter_input.frames()).map(|i| i >= p).collect()
    }

    /// Target aligned with every converter position. Prompt positions carry
    /// the prompt frames themselves; they are masked out of the losses.
    pub fn aligned_target(&self) -> Result<FeatureMatrix> {
        FeatureMatrix::concat(&[&self.prompt, &self.target])
    }

    /// Target ids aligned with every converter position.
    pub fn aligned_ids(&self) -> [Vec<u32>; 3] {
        let range = self.prompt_start..self.prompt_start + self.prompt_len();
        self.target_ids.clone().map(|ids| {
            let mut out = ids[range.clone()].to_vec();
            out.extend_from_slice(&ids);
            out
        })
    }

    /// Checks the length bookkeeping every pair must satisfy.
    pub fn check_invariants(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidShape(msg));
        if self.target.frames() != self.content.frames() {
            return bad(format!(
                "target has {} frames, content {}",
                self.target.frames(),
                self.content.frames()
            ));
        }
        if self.converter_input.frames() != self.prompt.frames() + self.content.frames() {
            return bad("converter input is not prompt + content".into());
        }
        if self
            .target_ids
            .iter()
            .any(|ids| ids.len() != self.target.frames())
        {
            return bad("target ids do not cover the target".into());
        }
        let expected = self
            .target
            .slice_frames(self.prompt_start, self.prompt.frames())?;
        if !expected.bit_eq(&self.prompt) {
            return bad("prompt is not a slice of the target".into());
        }
        Ok(())
    }
}

/// Everything needed to turn source utterances into training pairs.
pub struct PairSampler<'a> {
    decoupler: &'a DecouplerModel,
    pool: Option<&'a MatchingPool>,
    tokenizers: &'a [Codebook; 3],
    config: PairConfig,
}

impl<'a> PairSampler<'a> {
    /// `pool` may be `None` when `p_conversion` is 0; drawing conversion mode
    /// without a pool is an error.
    pub fn new(
        decoupler: &'a DecouplerModel,
        pool: Option<&'a MatchingPool>,
        tokenizers: &'a [Codebook; 3],
        config: PairConfig,
    ) -> Result<Self> {
        config.validate()?;
        let dim = decoupler.dim();
        for cb in tokenizers {
            if cb.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: cb.dim(),
                });
            }
        }
        if let Some(pool) = pool {
            if pool.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: pool.dim(),
                });
            }
        }
        Ok(Self {
            decoupler,
            pool,
            tokenizers,
            config,
        })
    }

    pub fn config(&self) -> &PairConfig {
        &self.config
    }

    pub fn make_pair<R: Rng + ?Sized>(
        &self,
        source: &FeatureMatrix,
        rng: &mut R,
    ) -> Result<TrainingPair> {
        if source.frames() < self.config.min_frames {
            return Err(Error::UtteranceTooShort {
                frames: source.frames(),
                min: self.config.min_frames,
            });
        }
        if source.dim() != self.decoupler.dim() {
            return Err(Error::DimMismatch {
                expected: self.decoupler.dim(),
                found: source.dim(),
            });
        }

        let u: f64 = rng.random();
        let mode = if u < self.config.p_conversion {
            Mode::Conversion
        } else {
            Mode::Reconstruction
        };

        let (target, speaker) = match mode {
            Mode::Reconstruction => (source.clone(), None),
            Mode::Conversion => {
                let pool = self.pool.ok_or(Error::NoPool)?;
                let speaker = pool.sample_speaker(rng)?.to_string();
                (pool.knn_convert(&speaker, source)?, Some(speaker))
            }
        };

        // Short utterances use the whole target as prompt, never padding.
        let prompt_len = self.config.prompt_frames.min(target.frames());
        let max_start = target.frames() - prompt_len;
        let prompt_start = if max_start == 0 {
            0
        } else {
            rng.random_range(0..=max_start)
        };
        let prompt = target.slice_frames(prompt_start, prompt_len)?;

        let content = self.decoupler.encode(source)?.enhanced;
        let target_ids = [
            self.tokenizers[0].assign(&target)?,
            self.tokenizers[1].assign(&target)?,
            self.tokenizers[2].assign(&target)?,
        ];
        let converter_input = FeatureMatrix::concat(&[&prompt, &content])?;

        Ok(TrainingPair {
            mode,
            speaker,
            content,
            prompt,
            prompt_start,
            target,
            target_ids,
            converter_input,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoupler::fit_decoupler;
    use crate::kmeans::{fit, KMeansConfig};
    use crate::teacher::build_pool;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn noise(frames: usize, dim: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0f32, 1.0).unwrap();
        let data = (0..frames * dim).map(|_| n.sample(&mut rng)).collect();
        FeatureMatrix::new(frames, dim, DEFAULT_HOP_US, data).unwrap()
    }

    struct Fixture {
        source: FeatureMatrix,
        decoupler: DecouplerModel,
        tokenizers: [Codebook; 3],
    }

    fn fixture() -> Fixture {
        let source = noise(80, 3, 1);
        let decoupler = fit_decoupler(
            std::slice::from_ref(&source),
            8,
            4,
            &KMeansConfig::with_seed(1),
        )
        .unwrap();
        let tokenizers = [2, 4, 8].map(|k| fit(&source, k, &KMeansConfig::with_seed(2)).unwrap());
        Fixture {
            source,
            decoupler,
            tokenizers,
        }
    }

    fn config(p: f64, prompt: usize) -> PairConfig {
        PairConfig {
            p_conversion: p,
            prompt_frames: prompt,
            ..PairConfig::default()
        }
    }

    #[test]
    fn default_prompt_is_three_seconds() {
        assert_eq!(PairConfig::default().prompt_frames, 150);
        assert_eq!(PairConfig::default().p_conversion, 0.5);
    }

    #[test]
    fn zero_probability_is_always_reconstruction() {
        let f = fixture();
        let sampler = PairSampler::new(&f.decoupler, None, &f.tokenizers, config(0.0, 20)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let pair = sampler.make_pair(&f.source, &mut rng).unwrap();
            assert_eq!(pair.mode, Mode::Reconstruction);
            assert!(pair.target.bit_eq(&f.source));
            pair.check_invariants().unwrap();
        }
    }

    #[test]
    fn conversion_without_pool_is_an_error() {
        let f = fixture();
        let sampler = PairSampler::new(&f.decoupler, None, &f.tokenizers, config(1.0, 20)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sampler.make_pair(&f.source, &mut rng),
            Err(Error::NoPool)
        ));
    }

    #[test]
    fn self_pool_conversion_matches_reconstruction() {
        let f = fixture();
        let pool = build_pool([("self", f.source.clone())], 1).unwrap();
        let conv =
            PairSampler::new(&f.decoupler, Some(&pool), &f.tokenizers, config(1.0, 20)).unwrap();
        let recon =
            PairSampler::new(&f.decoupler, Some(&pool), &f.tokenizers, config(0.0, 20)).unwrap();
        let a = conv
            .make_pair(&f.source, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        let b = recon
            .make_pair(&f.source, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        assert_eq!(a.mode, Mode::Conversion);
        assert_eq!(b.mode, Mode::Reconstruction);
        assert!(a.target.bit_eq(&b.target));
        assert_eq!(a.target_ids, b.target_ids);
        assert!(a.content.bit_eq(&b.content));
    }

    #[test]
    fn short_utterances() {
        let f = fixture();
        let sampler =
            PairSampler::new(&f.decoupler, None, &f.tokenizers, config(0.0, 150)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Shorter than the prompt: whole target becomes the prompt.
        let pair = sampler.make_pair(&f.source, &mut rng).unwrap();
        assert_eq!(pair.prompt_len(), 80);
        assert_eq!(pair.prompt_start, 0);
        pair.check_invariants().unwrap();

        let tiny = f.source.slice_frames(0, 29).unwrap();
        assert!(matches!(
            sampler.make_pair(&tiny, &mut rng),
            Err(Error::UtteranceTooShort {
                frames: 29,
                min: 30
            })
        ));
    }

    #[test]
    fn aligned_views_cover_every_position() {
        let f = fixture();
        let sampler = PairSampler::new(&f.decoupler, None, &f.tokenizers, config(0.0, 20)).unwrap();
        let pair = sampler
            .make_pair(&f.source, &mut ChaCha8Rng::seed_from_u64(8))
            .unwrap();
        let mask = pair.loss_mask();
        assert_eq!(mask.len(), 100);
        assert_eq!(mask.iter().filter(|&&m| !m).count(), 20);
        let ids = pair.aligned_ids();
        assert_eq!(ids[2].len(), 100);
        assert_eq!(ids[2][20..], pair.target_ids[2][..]);
        assert_eq!(pair.aligned_target().unwrap().frames(), 100);
    }

    #[test]
    fn invalid_configs() {
        let f = fixture();
        assert!(PairSampler::new(&f.decoupler, None, &f.tokenizers, config(1.5, 20)).is_err());
        let other = [2, 3, 4].map(|k| fit(&noise(20, 2, 3), k, &KMeansConfig::default()).unwrap());
        assert!(matches!(
            PairSampler::new(&f.decoupler, None, &other, config(0.5, 20)),
            Err(Error::DimMismatch { .. })
        ));
    }
}
