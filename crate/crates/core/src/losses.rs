//! Composite training objective with analytic gradients:
//! `total = mse + ssim + (small + medium + large)`.
//!
//! Every loss takes a per-position mask; masked positions contribute nothing
//! and receive exactly zero gradient. Reductions are means over the unmasked
//! elements.

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::sampler::TrainingPair;

/// Codebook sizes of the three progressive tokenizers at full scale.
pub const FULL_SCALE_VOCAB_SIZES: [usize; 3] = [2048, 4096, 8192];
/// Desk-scale tokenizer sizes.
pub const DEFAULT_VOCAB_SIZES: [usize; 3] = [8, 16, 32];

fn unmasked_count(mask: &[bool]) -> Result<usize> {
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::AllMasked),
        n => Ok(n),
    }
}

fn check_shapes(pred: &Mat, target: &Mat, mask: &[bool]) -> Result<()> {
    if !pred.same_shape(target) || mask.len() != pred.rows {
        return Err(Error::InvalidShape(format!(
            "pred {}x{}, target {}x{}, mask {}",
            pred.rows,
            pred.cols,
            target.rows,
            target.cols,
            mask.len()
        )));
    }
    Ok(())
}

/// Mean squared error over unmasked positions and all channels.
pub fn mse_loss(pred: &Mat, target: &Mat, mask: &[bool]) -> Result<(f64, Mat)> {
    check_shapes(pred, target, mask)?;
    let count = (unmasked_count(mask)? * pred.cols) as f64;
    let mut grad = Mat::zeros(pred.rows, pred.cols);
    let mut total = 0.0;
    for (t, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        for ((g, &p), &y) in grad
            .row_mut(t)
            .iter_mut()
            .zip(pred.row(t))
            .zip(target.row(t))
        {
            let d = p - y;
            total += d * d;
            *g = 2.0 * d / count;
        }
    }
    Ok((total / count, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsimConfig {
    /// Window length in frames.
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 9,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimConfig {
    /// Stabilizers `(c1, c2) = ((k1 R)^2, (k2 R)^2)` where `R` is the value
    /// range of the target over unmasked positions. A constant target falls
    /// back to `R = 1`.
    pub fn constants(&self, target: &Mat, mask: &[bool]) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for &v in target.row(t) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let range = if hi > lo { hi - lo } else { 1.0 };
        ((self.k1 * range).powi(2), (self.k2 * range).powi(2))
    }
}

/// Window start positions whose whole span is unmasked.
fn valid_windows(mask: &[bool], window: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut run = 0;
    for (t, &m) in mask.iter().enumerate() {
        run = if m { run + 1 } else { 0 };
        if run >= window {
            out.push(t + 1 - window);
        }
    }
    out
}

fn longest_run(mask: &[bool]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for &m in mask {
        run = if m { run + 1 } else { 0 };
        best = best.max(run);
    }
    best
}

/// `1 - mean SSIM`, with SSIM computed per channel over sliding time windows
/// with uniform weights.
pub fn ssim_loss(
    pred: &Mat,
    target: &Mat,
    mask: &[bool],
    config: &SsimConfig,
) -> Result<(f64, Mat)> {
    check_shapes(pred, target, mask)?;
    if config.window == 0 {
        return Err(Error::InvalidConfig("SSIM window must be >= 1".into()));
    }
    let starts = valid_windows(mask, config.window);
    if starts.is_empty() {
        return Err(Error::SpanTooShort {
            span: longest_run(mask),
            window: config.window,
        });
    }
    let (c1, c2) = config.constants(target, mask);
    let w = config.window as f64;
    let norm = 1.0 / (starts.len() * pred.cols) as f64;
    let mut grad = Mat::zeros(pred.rows, pred.cols);
    let mut ssim_sum = 0.0;

    for ch in 0..pred.cols {
        for &s in &starts {
            let span = s..s + config.window;
            let (mut mx, mut my) = (0.0, 0.0);
            for t in span.clone() {
                mx += pred.get(t, ch);
                my += target.get(t, ch);
            }
            mx /= w;
            my /= w;
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for t in span.clone() {
                let dx = pred.get(t, ch) - mx;
                let dy = target.get(t, ch) - my;
                vx += dx * dx;
                vy += dy * dy;
                cov += dx * dy;
            }
            vx /= w;
            vy /= w;
            cov /= w;

            let a1 = 2.0 * mx * my + c1;
            let a2 = 2.0 * cov + c2;
            let b1 = mx * mx + my * my + c1;
            let b2 = vx + vy + c2;
            let ssim = (a1 * a2) / (b1 * b2);
            ssim_sum += ssim;

            // d ssim / d x_t, through the window mean, variance and covariance.
            for t in span {
                let dx = pred.get(t, ch) - mx;
                let dy = target.get(t, ch) - my;
                let d_a1 = 2.0 * my / w;
                let d_a2 = 2.0 * dy / w;
                let d_b1 = 2.0 * mx / w;
                let d_b2 = 2.0 * dx / w;
                let d_ssim = (d_a1 * a2 + a1 * d_a2) / (b1 * b2) - ssim * (d_b1 / b1 + d_b2 / b2);
                grad.data[t * pred.cols + ch] -= norm * d_ssim;
            }
        }
    }
    Ok((1.0 - ssim_sum * norm, grad))
}

fn cross_entropy(logits: &Mat, ids: &[u32], mask: &[bool]) -> Result<(f64, Mat)> {
    if ids.len() != logits.rows || mask.len() != logits.rows {
        return Err(Error::InvalidShape(format!(
            "{} logit rows, {} ids, {} mask entries",
            logits.rows,
            ids.len(),
            mask.len()
        )));
    }
    let count = unmasked_count(mask)? as f64;
    let vocab = logits.cols;
    let mut grad = Mat::zeros(logits.rows, vocab);
    let mut total = 0.0;
    for (t, (&id, &keep)) in ids.iter().zip(mask).enumerate() {
        if (id as usize) >= vocab {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        if !keep {
            continue;
        }
        let row = logits.row(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[id as usize];
        for (j, (g, &z)) in grad.row_mut(t).iter_mut().zip(row).enumerate() {
            let p = (z - log_z).exp();
            *g = (p - if j == id as usize { 1.0 } else { 0.0 }) / count;
        }
    }
    Ok((total / count, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProgressiveCe {
    pub small: f64,
    pub medium: f64,
    pub large: f64,
    pub grads: [Mat; 3],
}

impl ProgressiveCe {
    /// `small + medium + large`, always summed in that order.
    pub fn total(&self) -> f64 {
        self.small + self.medium + self.large
    }
}

/// Cross-entropy of each tap head against its tokenizer's target ids, from
/// the coarsest codebook to the finest.
pub fn progressive_ce(logits: [&Mat; 3], ids: [&[u32]; 3], mask: &[bool]) -> Result<ProgressiveCe> {
    if !(logits[0].cols < logits[1].cols && logits[1].cols < logits[2].cols) {
        return Err(Error::InvalidConfig(format!(
            "vocabulary sizes must increase, got {} / {} / {}",
            logits[0].cols, logits[1].cols, logits[2].cols
        )));
    }
    let (small, g0) = cross_entropy(logits[0], ids[0], mask)?;
    let (medium, g1) = cross_entropy(logits[1], ids[1], mask)?;
    let (large, g2) = cross_entropy(logits[2], ids[2], mask)?;
    Ok(ProgressiveCe {
        small,
        medium,
        large,
        grads: [g0, g1, g2],
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossConfig {
    pub ssim: SsimConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub l_mse: f64,
    pub l_ssim: f64,
    pub l_small: f64,
    pub l_medium: f64,
    pub l_large: f64,
    pub l_pro: f64,
    pub l_total: f64,
    /// `true` where a position contributes to the losses. Empty for reports
    /// that average several pairs.
    pub mask: Vec<bool>,
}

impl LossReport {
    pub const TSV_HEADER: &'static str =
        "l_total\tl_mse\tl_ssim\tl_pro\tl_small\tl_medium\tl_large";

    /// Builds a report from the five primitive components, deriving the two
    /// sums in a fixed order.
    pub fn from_components(
        l_mse: f64,
        l_ssim: f64,
        small: f64,
        medium: f64,
        large: f64,
        mask: Vec<bool>,
    ) -> Self {
        let l_pro = small + medium + large;
        Self {
            l_mse,
            l_ssim,
            l_small: small,
            l_medium: medium,
            l_large: large,
            l_pro,
            l_total: l_mse + l_ssim + l_pro,
            mask,
        }
    }

    /// Component-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(Self::from_components(
            avg(|r| r.l_mse),
            avg(|r| r.l_ssim),
            avg(|r| r.l_small),
            avg(|r| r.l_medium),
            avg(|r| r.l_large),
            Vec::new(),
        ))
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.l_total,
            self.l_mse,
            self.l_ssim,
            self.l_pro,
            self.l_small,
            self.l_medium,
            self.l_large
        )
    }
}

/// Loss values and gradients for one pair.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub report: LossReport,
    pub grad_pred: Mat,
    pub grad_logits: [Mat; 3],
}

/// Scores a converter prediction over `pair.converter_input` positions,
/// excluding the prompt.
pub fn total_loss(
    pair: &TrainingPair,
    pred: &Mat,
    head_logits: [&Mat; 3],
    config: &LossConfig,
) -> Result<LossOutput> {
    let len = pair.converter_input.frames();
    if pred.rows != len {
        return Err(Error::InvalidShape(format!(
            "prediction has {} rows, converter input {len}",
            pred.rows
        )));
    }
    let mask = pair.loss_mask();
    let target = Mat::from_features(&pair.aligned_target()?);
    let ids = pair.aligned_ids();

    let (l_mse, g_mse) = mse_loss(pred, &target, &mask)?;
    let (l_ssim, g_ssim) = ssim_loss(pred, &target, &mask, &config.ssim)?;
    let ce = progressive_ce(head_logits, [&ids[0], &ids[1], &ids[2]], &mask)?;

    let mut grad_pred = g_mse;
    for (g, s) in grad_pred.data.iter_mut().zip(&g_ssim.data) {
        *g += s;
    }
    Ok(LossOutput {
        report: LossReport::from_components(l_mse, l_ssim, ce.small, ce.medium, ce.large, mask),
        grad_pred,
        grad_logits: ce.grads,
    })
}
