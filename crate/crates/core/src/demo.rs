//! End-to-end training run on the synthetic speaker corpus: fit the decoupler
//! and tokenizers, build the teacher pool, train the toy converter on
//! dual-mode pairs, then check on held-out frames that conversion moves the
//! speaker factor toward the prompt's speaker.

use rand::Rng;

use crate::converter::{train, window_mean, ConverterConfig, OptimizerConfig, ToyConverter};
use crate::decoupler::{fit_decoupler, DecouplerModel};
use crate::error::{Error, Result};
use crate::evalkit::{generate_corpus, speaker_similarity_proxy, SyntheticCorpusSpec};
use crate::features::FeatureMatrix;
use crate::kmeans::{fit, Codebook, KMeansConfig};
use crate::losses::{LossConfig, LossReport};
use crate::mat::Mat;
use crate::sampler::{PairConfig, PairSampler};
use crate::teacher::{build_pool, MatchingPool};

/// Steps averaged for the smoothed start and end of the loss curve.
pub const SMOOTHING_WINDOW: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub corpus: SyntheticCorpusSpec,
    /// Trailing frames of each speaker kept out of fitting and training.
    pub holdout_frames: usize,
    pub content_centroids: usize,
    pub residual_centroids: usize,
    pub knn_k: usize,
    pub utterance_frames: usize,
    pub prompt_frames: usize,
    pub p_conversion: f64,
    pub converter: ConverterConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
}

impl Default for DemoConfig {
    fn default() -> Self {
        let corpus = SyntheticCorpusSpec {
            frames_per_speaker: 600,
            ..SyntheticCorpusSpec::default()
        };
        let converter = ConverterConfig {
            max_len: 64,
            ..ConverterConfig::new(corpus.dim)
        };
        Self {
            corpus,
            holdout_frames: 100,
            content_centroids: 64,
            residual_centroids: 16,
            knn_k: 8,
            utterance_frames: 48,
            prompt_frames: 16,
            p_conversion: 0.5,
            converter,
            optimizer: OptimizerConfig {
                steps: 2000,
                batch_size: 4,
                seed: 7,
                ..OptimizerConfig::default()
            },
            loss: LossConfig::default(),
        }
    }
}

/// Everything fitted before training.
pub struct DemoAssets {
    pub train: Vec<(String, FeatureMatrix)>,
    pub held_out: Vec<(String, FeatureMatrix)>,
    pub decoupler: DecouplerModel,
    pub tokenizers: [Codebook; 3],
    pub pool: MatchingPool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyEval {
    pub source: String,
    pub target: String,
    pub to_target: f64,
    pub to_source: f64,
}

pub struct DemoOutcome {
    pub history: Vec<LossReport>,
    pub initial_smoothed: f64,
    pub final_smoothed: f64,
    pub evaluations: Vec<ProxyEval>,
    pub model: ToyConverter,
}

impl DemoOutcome {
    pub fn loss_ratio(&self) -> f64 {
        self.final_smoothed / self.initial_smoothed
    }

    pub fn mean_proxies(&self) -> (f64, f64) {
        let n = self.evaluations.len() as f64;
        let t = self.evaluations.iter().map(|e| e.to_target).sum::<f64>() / n;
        let s = self.evaluations.iter().map(|e| e.to_source).sum::<f64>() / n;
        (t, s)
    }

    /// Number of held-out (source, target) pairs where the converted output
    /// is closer to the target speaker than to the source speaker.
    pub fn pairs_won(&self) -> usize {
        self.evaluations
            .iter()
            .filter(|e| e.to_target > e.to_source)
            .count()
    }
}

pub fn prepare(cfg: &DemoConfig) -> Result<DemoAssets> {
    if cfg.holdout_frames + cfg.utterance_frames > cfg.corpus.frames_per_speaker
        || cfg.holdout_frames < cfg.utterance_frames.max(cfg.prompt_frames)
    {
        return Err(Error::InvalidConfig(
            "held-out and training portions must each fit an utterance".into(),
        ));
    }
    if cfg.prompt_frames + cfg.utterance_frames > cfg.converter.max_len {
        return Err(Error::InvalidConfig(
            "prompt + utterance exceeds converter max_len".into(),
        ));
    }
    let corpus = generate_corpus(&cfg.corpus)?;
    let cut = cfg.corpus.frames_per_speaker - cfg.holdout_frames;
    let mut train_part = Vec::new();
    let mut held_out = Vec::new();
    for (spk, m) in corpus {
        train_part.push((spk.clone(), m.slice_frames(0, cut)?));
        held_out.push((spk, m.slice_frames(cut, cfg.holdout_frames)?));
    }

    let seed = cfg.corpus.seed;
    let mats: Vec<FeatureMatrix> = train_part.iter().map(|(_, m)| m.clone()).collect();
    let decoupler = fit_decoupler(
        &mats,
        cfg.content_centroids,
        cfg.residual_centroids,
        &KMeansConfig::with_seed(seed),
    )?;
    let all = FeatureMatrix::concat(&mats.iter().collect::<Vec<_>>())?;
    let v = cfg.converter.vocab_sizes;
    let tokenizers = [
        fit(&all, v[0], &KMeansConfig::with_seed(seed + 2))?,
        fit(&all, v[1], &KMeansConfig::with_seed(seed + 3))?,
        fit(&all, v[2], &KMeansConfig::with_seed(seed + 4))?,
    ];
    let pool = build_pool(
        train_part.iter().map(|(s, m)| (s.clone(), m.clone())),
        cfg.knn_k,
    )?;
    Ok(DemoAssets {
        train: train_part,
        held_out,
        decoupler,
        tokenizers,
        pool,
    })
}

/// Converts `source` with a prompt taken from another speaker; returns only
/// the content positions.
pub fn convert(
    model: &ToyConverter,
    decoupler: &DecouplerModel,
    prompt: &FeatureMatrix,
    source: &FeatureMatrix,
) -> Result<FeatureMatrix> {
    let content = decoupler.encode(source)?.enhanced;
    let input = FeatureMatrix::concat(&[prompt, &content])?;
    let pred = model.predict(&Mat::from_features(&input))?;
    let tail = Mat::from_vec(
        content.frames(),
        pred.cols,
        pred.data[prompt.frames() * pred.cols..].to_vec(),
    )?;
    tail.to_features(source.hop_us())
}

/// Held-out evaluation over every ordered pair of distinct speakers: the
/// source utterance is the start of the source's held-out frames, the prompt
/// the start of the target's; both are compared against full held-out sets.
pub fn evaluate(
    model: &ToyConverter,
    assets: &DemoAssets,
    cfg: &DemoConfig,
) -> Result<Vec<ProxyEval>> {
    let mut out = Vec::new();
    for (src, src_frames) in &assets.held_out {
        let utterance = src_frames.slice_frames(0, cfg.utterance_frames)?;
        for (tgt, tgt_frames) in &assets.held_out {
            if tgt == src {
                continue;
            }
            let prompt = tgt_frames.slice_frames(0, cfg.prompt_frames)?;
            let converted = convert(model, &assets.decoupler, &prompt, &utterance)?;
            out.push(ProxyEval {
                source: src.clone(),
                target: tgt.clone(),
                to_target: speaker_similarity_proxy(&converted, tgt_frames)?,
                to_source: speaker_similarity_proxy(&converted, src_frames)?,
            });
        }
    }
    Ok(out)
}

pub fn run_demo(cfg: &DemoConfig) -> Result<DemoOutcome> {
    let assets = prepare(cfg)?;
    let pair_cfg = PairConfig {
        p_conversion: cfg.p_conversion,
        prompt_frames: cfg.prompt_frames,
        min_frames: cfg.utterance_frames,
    };
    let sampler = PairSampler::new(
        &assets.decoupler,
        Some(&assets.pool),
        &assets.tokenizers,
        pair_cfg,
    )?;
    let model = ToyConverter::new(cfg.converter.clone(), cfg.optimizer.seed)?;
    let len = cfg.utterance_frames;
    let trained = train(
        model,
        |rng| {
            let (_, m) = &assets.train[rng.random_range(0..assets.train.len())];
            let start = rng.random_range(0..=m.frames() - len);
            sampler.make_pair(&m.slice_frames(start, len)?, rng)
        },
        &cfg.optimizer,
        &cfg.loss,
    )?;
    let w = SMOOTHING_WINDOW.min(trained.history.len());
    let initial_smoothed = window_mean(&trained.history[..w]);
    let final_smoothed = window_mean(&trained.history[trained.history.len() - w..]);
    let evaluations = evaluate(&trained.model, &assets, cfg)?;
    Ok(DemoOutcome {
        history: trained.history,
        initial_smoothed,
        final_smoothed,
        evaluations,
        model: trained.model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_run_is_deterministic() {
        let mut cfg = DemoConfig::default();
        cfg.optimizer.steps = 3;
        cfg.optimizer.batch_size = 2;
        let a = run_demo(&cfg).unwrap();
        let b = run_demo(&cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert_eq!(a.evaluations.len(), 12);
    }

    #[test]
    fn rejects_inconsistent_lengths() {
        let cfg = DemoConfig {
            prompt_frames: 40,
            ..DemoConfig::default()
        };
        assert!(prepare(&cfg).is_err());
    }
}
