//! Full-model gradient check: analytic `d l_total / d theta` for every
//! parameter against a five-point finite-difference stencil.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ConverterConfig, ToyConverter};
use crate::error::Result;
use crate::features::{FeatureMatrix, DEFAULT_HOP_US};
use crate::gradcheck::{five_point_at, relative_error};
use crate::losses::{total_loss, LossConfig, SsimConfig};
use crate::mat::Mat;
use crate::sampler::{Mode, TrainingPair};

/// Stencil step. Five-point truncation error is O(h^4), so 1e-3 keeps both
/// truncation and cancellation error near 1e-12.
pub const STENCIL_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSetup {
    pub prompt_frames: usize,
    pub content_frames: usize,
    pub ssim_window: usize,
}

impl Default for GradCheckSetup {
    /// Twelve positions: a four-frame prompt and eight scored frames.
    fn default() -> Self {
        Self {
            prompt_frames: 4,
            content_frames: 8,
            ssim_window: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub num_params: usize,
    pub max_relative_error: f64,
    /// Parameter index where the maximum occurs.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Random reconstruction-mode pair with the given shape and random token ids.
pub fn random_pair(
    config: &ConverterConfig,
    setup: &GradCheckSetup,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingPair> {
    let d = config.input_dim;
    let mut mat = |frames: usize| {
        let data = (0..frames * d)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        FeatureMatrix::new(frames, d, DEFAULT_HOP_US, data)
    };
    let content = mat(setup.content_frames)?;
    let target = mat(setup.content_frames)?;
    let prompt_len = setup.prompt_frames.min(setup.content_frames);
    let prompt = target.slice_frames(0, prompt_len)?;
    let target_ids = config.vocab_sizes.map(|v| {
        (0..setup.content_frames)
            .map(|_| rng.random_range(0..v as u32))
            .collect()
    });
    let converter_input = FeatureMatrix::concat(&[&prompt, &content])?;
    Ok(TrainingPair {
        mode: Mode::Reconstruction,
        speaker: None,
        content,
        prompt,
        prompt_start: 0,
        target,
        target_ids,
        converter_input,
    })
}

/// Checks every parameter of a freshly initialized model on a random pair.
pub fn gradient_check(
    config: &ConverterConfig,
    setup: &GradCheckSetup,
    seed: u64,
) -> Result<GradCheckReport> {
    let model = ToyConverter::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let pair = random_pair(config, setup, &mut rng)?;
    let loss_cfg = LossConfig {
        ssim: SsimConfig {
            window: setup.ssim_window,
            ..SsimConfig::default()
        },
    };
    let input = Mat::from_features(&pair.converter_input);

    let out = model.forward(&input)?;
    let [l0, l1, l2] = &out.logits;
    let scored = total_loss(&pair, &out.pred, [l0, l1, l2], &loss_cfg)?;
    let [a, b, c] = &scored.grad_logits;
    let analytic = model.backward(&out.cache, &scored.grad_pred, [a, b, c])?;

    let mut probe = model.clone();
    let all: Vec<usize> = (0..model.num_params()).collect();
    let mut failed = None;
    let numeric = five_point_at(model.params(), &all, STENCIL_STEP, |theta| {
        probe.params_mut().copy_from_slice(theta);
        let eval = || -> Result<f64> {
            let o = probe.forward(&input)?;
            let [l0, l1, l2] = &o.logits;
            Ok(total_loss(&pair, &o.pred, [l0, l1, l2], &loss_cfg)?
                .report
                .l_total)
        };
        eval().unwrap_or_else(|e| {
            failed.get_or_insert(e);
            f64::NAN
        })
    });
    if let Some(e) = failed {
        return Err(e);
    }

    let (worst_index, max_relative_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold(
            (0, 0.0),
            |best, (i, e)| if e > best.1 { (i, e) } else { best },
        );
    Ok(GradCheckReport {
        num_params: model.num_params(),
        max_relative_error,
        worst_index,
        analytic,
        numeric,
    })
}
