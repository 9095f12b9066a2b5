//! Toy prompt-based converter: a stack of pre-norm single-head transformer
//! blocks over `prompt ++ content`, with linear token heads tapped from
//! intermediate blocks for the progressive constraint.
//!
//! Parameters live in one flat `f64` vector. Their order, which is also the
//! checkpoint payload order, is:
//!
//! ```text
//! in_w [input x hidden], in_b [hidden], pos [max_len x hidden],
//! per block: ln1_g, ln1_b [hidden], wq, wk, wv, wo [hidden x hidden], bo [hidden],
//!            ln2_g, ln2_b [hidden], w1 [hidden x ffn], b1 [ffn], w2 [ffn x hidden], b2 [hidden],
//! per head j: head_w [hidden x vocab_j], head_b [vocab_j],
//! lnf_g, lnf_b [hidden], out_w [hidden x output], out_b [output]
//! ```

pub mod check;
pub mod checkpoint;
mod model;
pub mod train;

pub use check::{gradient_check, GradCheckReport, GradCheckSetup};
pub use model::{ForwardCache, ForwardOutput};
pub use train::{backward_and_step, train, window_mean, Adam, OptimizerConfig, TrainOutcome};

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::DEFAULT_VOCAB_SIZES;

#[derive(Debug, Clone, PartialEq)]
pub struct ConverterConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    /// 1-based block indices feeding the small, medium and large heads.
    pub tap_layers: [usize; 3],
    pub vocab_sizes: [usize; 3],
    /// Longest sequence the learned position bias covers.
    pub max_len: usize,
    /// Ablation switch: without attention no information crosses positions.
    pub attention: bool,
    /// Residual-branch dropout, only applied by [`ToyConverter::forward_train`].
    pub dropout: f64,
}

/// Taps spread evenly over the stack with the last tap on the last block
/// (2/4/6 for six blocks).
pub fn even_taps(num_blocks: usize) -> [usize; 3] {
    [1, 2, 3].map(|j| (j * num_blocks).div_ceil(3).max(1))
}

impl ConverterConfig {
    /// Desk-scale defaults for features of width `feature_dim`.
    pub fn new(feature_dim: usize) -> Self {
        Self {
            input_dim: feature_dim,
            output_dim: feature_dim,
            num_blocks: 4,
            hidden_dim: 32,
            ffn_dim: 64,
            tap_layers: even_taps(4),
            vocab_sizes: DEFAULT_VOCAB_SIZES,
            max_len: 512,
            attention: true,
            dropout: 0.0,
        }
    }

    /// The smallest configuration used for full-model gradient checks.
    pub fn tiny(feature_dim: usize) -> Self {
        Self {
            num_blocks: 2,
            hidden_dim: 8,
            ffn_dim: 16,
            tap_layers: even_taps(2),
            max_len: 16,
            ..Self::new(feature_dim)
        }
    }

    /// Width and depth of the full-size converter (for reference and
    /// validation; far too large to train here).
    pub fn full_scale(feature_dim: usize) -> Self {
        Self {
            num_blocks: 6,
            hidden_dim: 1024,
            ffn_dim: 4096,
            tap_layers: [2, 4, 6],
            vocab_sizes: crate::losses::FULL_SCALE_VOCAB_SIZES,
            ..Self::new(feature_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if [
            self.input_dim,
            self.output_dim,
            self.num_blocks,
            self.hidden_dim,
            self.ffn_dim,
            self.max_len,
        ]
        .contains(&0)
        {
            return bad("dimensions, depth and max_len must be >= 1".into());
        }
        let t = self.tap_layers;
        if !(t[0] <= t[1] && t[1] <= t[2]) || t[0] < 1 || t[2] > self.num_blocks {
            return bad(format!(
                "tap layers {t:?} must be non-decreasing within [1, {}]",
                self.num_blocks
            ));
        }
        let v = self.vocab_sizes;
        if !(v[0] >= 1 && v[0] < v[1] && v[1] < v[2]) {
            return bad(format!("vocab sizes {v:?} must strictly increase"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BlockSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub wq: Slot,
    pub wk: Slot,
    pub wv: Slot,
    pub wo: Slot,
    pub bo: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub in_w: Slot,
    pub in_b: Slot,
    pub pos: Slot,
    pub blocks: Vec<BlockSlots>,
    pub heads: [(Slot, Slot); 3],
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub out_w: Slot,
    pub out_b: Slot,
    pub total: usize,
}

struct Allocator(usize);

impl Allocator {
    fn slot(&mut self, rows: usize, cols: usize) -> Slot {
        let s = Slot {
            offset: self.0,
            rows,
            cols,
        };
        self.0 += rows * cols;
        s
    }
}

impl Layout {
    fn new(c: &ConverterConfig) -> Self {
        let h = c.hidden_dim;
        let mut a = Allocator(0);
        let in_w = a.slot(c.input_dim, h);
        let in_b = a.slot(1, h);
        let pos = a.slot(c.max_len, h);
        let blocks = (0..c.num_blocks)
            .map(|_| BlockSlots {
                ln1_g: a.slot(1, h),
                ln1_b: a.slot(1, h),
                wq: a.slot(h, h),
                wk: a.slot(h, h),
                wv: a.slot(h, h),
                wo: a.slot(h, h),
                bo: a.slot(1, h),
                ln2_g: a.slot(1, h),
                ln2_b: a.slot(1, h),
                w1: a.slot(h, c.ffn_dim),
                b1: a.slot(1, c.ffn_dim),
                w2: a.slot(c.ffn_dim, h),
                b2: a.slot(1, h),
            })
            .collect();
        let heads = c.vocab_sizes.map(|v| (a.slot(h, v), a.slot(1, v)));
        let lnf_g = a.slot(1, h);
        let lnf_b = a.slot(1, h);
        let out_w = a.slot(h, c.output_dim);
        let out_b = a.slot(1, c.output_dim);
        Self {
            in_w,
            in_b,
            pos,
            blocks,
            heads,
            lnf_g,
            lnf_b,
            out_w,
            out_b,
            total: a.0,
        }
    }

    /// `(slot, fan_in)` for every weight or bias initialized uniformly, and
    /// the layer-norm gains set to one. Position biases start at zero.
    fn init_plan(&self) -> (Vec<(Slot, usize)>, Vec<Slot>) {
        let mut uniform = vec![(self.in_w, self.in_w.rows), (self.in_b, self.in_w.rows)];
        let mut ones = Vec::new();
        for b in &self.blocks {
            ones.extend([b.ln1_g, b.ln2_g]);
            for w in [b.wq, b.wk, b.wv, b.wo] {
                uniform.push((w, w.rows));
            }
            uniform.extend([(b.bo, b.wo.rows), (b.w1, b.w1.rows), (b.b1, b.w1.rows)]);
            uniform.extend([(b.w2, b.w2.rows), (b.b2, b.w2.rows)]);
        }
        for (w, bias) in &self.heads {
            uniform.extend([(*w, w.rows), (*bias, w.rows)]);
        }
        ones.push(self.lnf_g);
        uniform.extend([(self.out_w, self.out_w.rows), (self.out_b, self.out_w.rows)]);
        (uniform, ones)
    }
}

/// The trainable converter: configuration plus a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConverter {
    config: ConverterConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl ToyConverter {
    /// Seeded init: weights and biases uniform in `±1/sqrt(fan_in)`, layer-norm
    /// gains one, layer-norm shifts and position biases zero.
    pub fn new(config: ConverterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (uniform, ones) = layout.init_plan();
        for (slot, fan_in) in uniform {
            let a = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[slot.range()] {
                *p = rng.random_range(-a..a);
            }
        }
        for slot in ones {
            params[slot.range()].fill(1.0);
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ConverterConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::InvalidShape(format!(
                "config needs {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ConverterConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Turns the attention sublayers on or off without touching parameters.
    pub fn set_attention(&mut self, enabled: bool) {
        self.config.attention = enabled;
    }
}
