//! Adam and the mini-batch training loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ForwardCache, ToyConverter};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, LossOutput, LossReport};
use crate::mat::Mat;
use crate::sampler::TrainingPair;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Seeds pair sampling and dropout.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            steps: 1000,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.batch_size >= 1;
        if !ok {
            return Err(Error::InvalidConfig(format!("optimizer {self:?}")));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &OptimizerConfig) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Backpropagates one pair's loss and applies a single Adam update.
pub fn backward_and_step(
    model: &mut ToyConverter,
    cache: &ForwardCache,
    loss: &LossOutput,
    adam: &mut Adam,
    cfg: &OptimizerConfig,
) -> Result<()> {
    let [a, b, c] = &loss.grad_logits;
    let grads = model.backward(cache, &loss.grad_pred, [a, b, c])?;
    adam.step(model.params_mut(), &grads, cfg);
    Ok(())
}

impl ToyConverter {
    /// Loss report and parameter gradient for one training pair.
    pub fn pair_gradient(
        &self,
        pair: &TrainingPair,
        loss: &LossConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<(LossReport, Vec<f64>)> {
        let input = Mat::from_features(&pair.converter_input);
        let out = self.forward_train(&input, rng)?;
        let [l0, l1, l2] = &out.logits;
        let scored = total_loss(pair, &out.pred, [l0, l1, l2], loss)?;
        let [a, b, c] = &scored.grad_logits;
        let grads = self.backward(&out.cache, &scored.grad_pred, [a, b, c])?;
        Ok((scored.report, grads))
    }

    /// Converts a feature sequence (typically `prompt ++ content`) without
    /// dropout.
    pub fn predict(&self, input: &Mat) -> Result<Mat> {
        Ok(self.forward(input)?.pred)
    }
}

pub struct TrainOutcome {
    pub model: ToyConverter,
    /// Batch-mean loss report for every step.
    pub history: Vec<LossReport>,
}

/// Trains for `cfg.steps` steps. Each step draws `cfg.batch_size` pairs from
/// `next_pair`, averages their gradients and takes one Adam step. One RNG
/// seeded from `cfg.seed` drives both pair sampling and dropout.
pub fn train(
    mut model: ToyConverter,
    mut next_pair: impl FnMut(&mut ChaCha8Rng) -> Result<TrainingPair>,
    cfg: &OptimizerConfig,
    loss: &LossConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.num_params());
    let mut history = Vec::with_capacity(cfg.steps);
    let mut sum = vec![0.0; model.num_params()];
    let mut reports = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.steps {
        sum.fill(0.0);
        reports.clear();
        for _ in 0..cfg.batch_size {
            let pair = next_pair(&mut rng)?;
            let (report, grads) = model.pair_gradient(&pair, loss, &mut rng)?;
            sum.iter_mut().zip(&grads).for_each(|(s, g)| *s += g);
            reports.push(report);
        }
        let inv = 1.0 / cfg.batch_size as f64;
        sum.iter_mut().for_each(|s| *s *= inv);
        adam.step(model.params_mut(), &sum, cfg);
        history.push(LossReport::mean(&reports).expect("batch_size >= 1"));
    }
    Ok(TrainOutcome { model, history })
}

/// Mean of `l_total` over a window of steps.
pub fn window_mean(history: &[LossReport]) -> f64 {
    history.iter().map(|r| r.l_total).sum::<f64>() / history.len().max(1) as f64
}
