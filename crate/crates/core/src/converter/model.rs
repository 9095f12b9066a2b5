//! Forward pass with a saved cache, and the hand-derived backward pass.

use rand::Rng;

use super::{BlockSlots, Slot, ToyConverter};
use crate::error::{Error, Result};
use crate::mat::{gemm, gemm_nt, gemm_tn, Mat};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

struct AttnCache {
    a: LnCache,
    a_out: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Mat,
    o: Mat,
    drop: Option<Vec<f64>>,
}

struct BlockCache {
    attn: Option<AttnCache>,
    ln2: LnCache,
    b_out: Mat,
    pre: Mat,
    act: Mat,
    drop: Option<Vec<f64>>,
    /// Hidden state leaving the block.
    out: Mat,
}

/// Everything backward needs from one forward pass.
pub struct ForwardCache {
    input: Mat,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    z: Mat,
}

impl ForwardCache {
    /// Attention weights of a block (`len x len`, rows sum to one), or `None`
    /// when attention is disabled.
    pub fn attention(&self, block: usize) -> Option<&Mat> {
        self.blocks.get(block)?.attn.as_ref().map(|a| &a.probs)
    }

    /// Hidden state after a (0-based) block.
    pub fn hidden(&self, block: usize) -> Option<&Mat> {
        self.blocks.get(block).map(|b| &b.out)
    }
}

pub struct ForwardOutput {
    /// Predicted target features, `len x output_dim`.
    pub pred: Mat,
    /// Small, medium and large head logits, `len x vocab_j`.
    pub logits: [Mat; 3],
    pub cache: ForwardCache,
}

fn slice(p: &[f64], s: Slot) -> &[f64] {
    &p[s.range()]
}

fn linear(x: &Mat, p: &[f64], w: Slot, b: Slot) -> Mat {
    let mut y = Mat::zeros(x.rows, w.cols);
    let bias = slice(p, b);
    for r in 0..x.rows {
        y.row_mut(r).copy_from_slice(bias);
    }
    gemm(&x.data, slice(p, w), &mut y.data, x.rows, w.rows, w.cols);
    y
}

/// Accumulates weight and bias grads and returns `dy * w^T`.
fn linear_backward(x: &Mat, dy: &Mat, p: &[f64], g: &mut [f64], w: Slot, b: Slot) -> Mat {
    gemm_tn(&x.data, &dy.data, &mut g[w.range()], x.rows, w.rows, w.cols);
    let gb = &mut g[b.range()];
    for r in 0..dy.rows {
        for (acc, d) in gb.iter_mut().zip(dy.row(r)) {
            *acc += d;
        }
    }
    let mut dx = Mat::zeros(x.rows, w.rows);
    gemm_nt(&dy.data, slice(p, w), &mut dx.data, dy.rows, w.cols, w.rows);
    dx
}

fn layer_norm(x: &Mat, gain: &[f64], shift: &[f64]) -> (Mat, LnCache) {
    let n = x.cols as f64;
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for c in 0..x.cols {
            let h = (row[c] - mean) * inv;
            xhat.data[r * x.cols + c] = h;
            y.data[r * x.cols + c] = h * gain[c] + shift[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Mat,
    cache: &LnCache,
    p: &[f64],
    g: &mut [f64],
    gain: Slot,
    shift: Slot,
) -> Mat {
    let n = dy.cols as f64;
    let gamma = slice(p, gain);
    let mut dx = Mat::zeros(dy.rows, dy.cols);
    let mut dxhat = vec![0.0; dy.cols];
    for r in 0..dy.rows {
        let xh = cache.xhat.row(r);
        let d = dy.row(r);
        for c in 0..dy.cols {
            g[gain.offset + c] += d[c] * xh[c];
            g[shift.offset + c] += d[c];
            dxhat[c] = d[c] * gamma[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        for c in 0..dy.cols {
            dx.data[r * dy.cols + c] = cache.inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect()
}

fn add_scaled(x: &mut Mat, y: &Mat, mask: Option<&[f64]>) {
    match mask {
        None => x.data.iter_mut().zip(&y.data).for_each(|(a, b)| *a += b),
        Some(m) => x
            .data
            .iter_mut()
            .zip(&y.data)
            .zip(m)
            .for_each(|((a, b), k)| *a += b * k),
    }
}

fn masked(d: &Mat, mask: Option<&[f64]>) -> Mat {
    match mask {
        None => d.clone(),
        Some(m) => Mat {
            rows: d.rows,
            cols: d.cols,
            data: d.data.iter().zip(m).map(|(a, b)| a * b).collect(),
        },
    }
}

impl ToyConverter {
    /// Deterministic forward pass (no dropout).
    pub fn forward(&self, input: &Mat) -> Result<ForwardOutput> {
        self.forward_impl(input, None::<&mut rand::rngs::ThreadRng>)
    }

    /// Forward pass with residual dropout drawn from `rng`.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        input: &Mat,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        self.forward_impl(input, Some(rng))
    }

    fn forward_impl<R: Rng + ?Sized>(
        &self,
        input: &Mat,
        mut rng: Option<&mut R>,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let l = &self.layout;
        let p = &self.params[..];
        if input.cols != c.input_dim {
            return Err(Error::DimMismatch {
                expected: c.input_dim,
                found: input.cols,
            });
        }
        if input.rows == 0 || input.rows > c.max_len {
            return Err(Error::InvalidShape(format!(
                "sequence length {} outside [1, {}]",
                input.rows, c.max_len
            )));
        }
        let len = input.rows;
        let h = c.hidden_dim;
        let rate = if rng.is_some() { c.dropout } else { 0.0 };
        let mut draw = |n: usize| -> Option<Vec<f64>> {
            match rng.as_deref_mut() {
                Some(r) if rate > 0.0 => Some(dropout_mask(n, rate, r)),
                _ => None,
            }
        };

        let mut x = linear(input, p, l.in_w, l.in_b);
        for (a, b) in x
            .data
            .iter_mut()
            .zip(&p[l.pos.offset..l.pos.offset + len * h])
        {
            *a += b;
        }

        let scale = 1.0 / (h as f64).sqrt();
        let mut blocks = Vec::with_capacity(c.num_blocks);
        for bs in &l.blocks {
            let attn = if c.attention {
                let (a_out, a) = layer_norm(&x, slice(p, bs.ln1_g), slice(p, bs.ln1_b));
                let proj = |w: Slot| {
                    let mut y = Mat::zeros(len, h);
                    gemm(&a_out.data, slice(p, w), &mut y.data, len, h, h);
                    y
                };
                let (q, k, v) = (proj(bs.wq), proj(bs.wk), proj(bs.wv));
                let mut probs = Mat::zeros(len, len);
                gemm_nt(&q.data, &k.data, &mut probs.data, len, h, len);
                for r in 0..len {
                    let row = probs.row_mut(r);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) * scale;
                    let mut sum = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s * scale - max).exp();
                        sum += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= sum);
                }
                let mut o = Mat::zeros(len, h);
                gemm(&probs.data, &v.data, &mut o.data, len, len, h);
                let att = linear(&o, p, bs.wo, bs.bo);
                let drop = draw(len * h);
                add_scaled(&mut x, &att, drop.as_deref());
                Some(AttnCache {
                    a,
                    a_out,
                    q,
                    k,
                    v,
                    probs,
                    o,
                    drop,
                })
            } else {
                None
            };

            let (b_out, ln2) = layer_norm(&x, slice(p, bs.ln2_g), slice(p, bs.ln2_b));
            let pre = linear(&b_out, p, bs.w1, bs.b1);
            let act = Mat {
                rows: pre.rows,
                cols: pre.cols,
                data: pre.data.iter().map(|&v| gelu(v)).collect(),
            };
            let f = linear(&act, p, bs.w2, bs.b2);
            let drop = draw(len * h);
            add_scaled(&mut x, &f, drop.as_deref());
            blocks.push(BlockCache {
                attn,
                ln2,
                b_out,
                pre,
                act,
                drop,
                out: x.clone(),
            });
        }

        let logits = [0, 1, 2].map(|j| {
            let (w, b) = l.heads[j];
            linear(&blocks[c.tap_layers[j] - 1].out, p, w, b)
        });
        let (z, lnf) = layer_norm(&x, slice(p, l.lnf_g), slice(p, l.lnf_b));
        let pred = linear(&z, p, l.out_w, l.out_b);
        Ok(ForwardOutput {
            pred,
            logits,
            cache: ForwardCache {
                input: input.clone(),
                blocks,
                lnf,
                z,
            },
        })
    }

    /// Gradient of the loss with respect to every parameter, given the loss
    /// gradients at the prediction and at each head's logits.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_pred: &Mat,
        d_logits: [&Mat; 3],
    ) -> Result<Vec<f64>> {
        let c = &self.config;
        let l = &self.layout;
        let p = &self.params[..];
        let len = cache.input.rows;
        if d_pred.rows != len || d_pred.cols != c.output_dim {
            return Err(Error::InvalidShape("prediction gradient shape".into()));
        }
        for (j, d) in d_logits.iter().enumerate() {
            if d.rows != len || d.cols != c.vocab_sizes[j] {
                return Err(Error::InvalidShape(format!("head {j} gradient shape")));
            }
        }
        let h = c.hidden_dim;
        let mut g = vec![0.0; self.params.len()];

        let dz = linear_backward(&cache.z, d_pred, p, &mut g, l.out_w, l.out_b);
        let mut dx = layer_norm_backward(&dz, &cache.lnf, p, &mut g, l.lnf_g, l.lnf_b);

        let scale = 1.0 / (h as f64).sqrt();
        for (i, (bs, bc)) in l.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            for ((&tap, &(w, b)), d_head) in c.tap_layers.iter().zip(&l.heads).zip(d_logits) {
                if tap == i + 1 {
                    let d = linear_backward(&bc.out, d_head, p, &mut g, w, b);
                    add_scaled(&mut dx, &d, None);
                }
            }
            dx = self.block_backward(bs, bc, dx, &mut g, scale);
        }

        let _ = linear_backward(&cache.input, &dx, p, &mut g, l.in_w, l.in_b);
        for (acc, d) in g[l.pos.offset..l.pos.offset + len * h]
            .iter_mut()
            .zip(&dx.data)
        {
            *acc += d;
        }
        Ok(g)
    }

    /// `dx` is the gradient at the block output; returns the gradient at its
    /// input. The residual stream means both sublayers add onto `dx`.
    fn block_backward(
        &self,
        bs: &BlockSlots,
        bc: &BlockCache,
        mut dx: Mat,
        g: &mut [f64],
        scale: f64,
    ) -> Mat {
        let p = &self.params[..];
        let len = dx.rows;
        let h = dx.cols;

        let df = masked(&dx, bc.drop.as_deref());
        let mut dact = linear_backward(&bc.act, &df, p, g, bs.w2, bs.b2);
        for (d, &x) in dact.data.iter_mut().zip(&bc.pre.data) {
            *d *= gelu_grad(x);
        }
        let db = linear_backward(&bc.b_out, &dact, p, g, bs.w1, bs.b1);
        let d = layer_norm_backward(&db, &bc.ln2, p, g, bs.ln2_g, bs.ln2_b);
        add_scaled(&mut dx, &d, None);

        if let Some(ac) = &bc.attn {
            let datt = masked(&dx, ac.drop.as_deref());
            let d_o = linear_backward(&ac.o, &datt, p, g, bs.wo, bs.bo);
            let mut dprobs = Mat::zeros(len, len);
            gemm_nt(&d_o.data, &ac.v.data, &mut dprobs.data, len, h, len);
            let mut dv = Mat::zeros(len, h);
            gemm_tn(&ac.probs.data, &d_o.data, &mut dv.data, len, len, h);
            // softmax backward, then the 1/sqrt(h) score scale
            let mut ds = dprobs;
            for r in 0..len {
                let pr = ac.probs.row(r);
                let row = ds.row_mut(r);
                let dot: f64 = row.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (d, &pv) in row.iter_mut().zip(pr) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            let mut dq = Mat::zeros(len, h);
            gemm(&ds.data, &ac.k.data, &mut dq.data, len, len, h);
            let mut dk = Mat::zeros(len, h);
            gemm_tn(&ds.data, &ac.q.data, &mut dk.data, len, len, h);

            let mut da = Mat::zeros(len, h);
            for (w, dy) in [(bs.wq, &dq), (bs.wk, &dk), (bs.wv, &dv)] {
                gemm_tn(&ac.a_out.data, &dy.data, &mut g[w.range()], len, h, h);
                gemm_nt(&dy.data, slice(p, w), &mut da.data, len, h, h);
            }
            let d = layer_norm_backward(&da, &ac.a, p, g, bs.ln1_g, bs.ln1_b);
            add_scaled(&mut dx, &d, None);
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::converter::ConverterConfig;
    use crate::gradcheck::{central_difference, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(len: usize, dim: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(len, dim, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn gelu_derivative() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let fd = central_difference(&[x], 1e-5, |v| gelu(v[0]));
            assert!((fd[0] - gelu_grad(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn shapes_and_attention_rows() {
        let m = ToyConverter::new(ConverterConfig::tiny(4), 3).unwrap();
        let out = m.forward(&input(12, 4, 1)).unwrap();
        assert_eq!((out.pred.rows, out.pred.cols), (12, 4));
        assert_eq!(out.logits.map(|l| l.cols), [8, 16, 32]);
        for b in 0..2 {
            let a = out.cache.attention(b).unwrap();
            for r in 0..12 {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_checks() {
        let m = ToyConverter::new(ConverterConfig::tiny(4), 3).unwrap();
        assert!(matches!(
            m.forward(&input(4, 5, 1)),
            Err(Error::DimMismatch { .. })
        ));
        assert!(m.forward(&input(17, 4, 1)).is_err());
    }

    #[test]
    fn no_attention_means_positions_are_independent() {
        let mut m = ToyConverter::new(ConverterConfig::tiny(4), 3).unwrap();
        m.set_attention(false);
        let x = input(6, 4, 2);
        let mut y = x.clone();
        y.row_mut(5).iter_mut().for_each(|v| *v += 1.0);
        let a = m.forward(&x).unwrap().pred;
        let b = m.forward(&y).unwrap().pred;
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(5), b.row(5));
        assert!(m.forward(&x).unwrap().cache.attention(0).is_none());
    }

    #[test]
    fn dropout_only_in_training_forward() {
        let mut cfg = ConverterConfig::tiny(4);
        cfg.dropout = 0.3;
        let m = ToyConverter::new(cfg, 3).unwrap();
        let x = input(6, 4, 2);
        assert_eq!(m.forward(&x).unwrap().pred, m.forward(&x).unwrap().pred);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_ne!(
            m.forward_train(&x, &mut rng).unwrap().pred,
            m.forward(&x).unwrap().pred
        );
    }

    /// Backward for a fixed linear functional of the outputs, against central
    /// differences, on a small sample of parameters from every slot.
    fn check_linear_functional(m: &ToyConverter, x: &Mat, dropout_seed: Option<u64>) {
        let run = |model: &ToyConverter| match dropout_seed {
            Some(s) => model
                .forward_train(x, &mut ChaCha8Rng::seed_from_u64(s))
                .unwrap(),
            None => model.forward(x).unwrap(),
        };
        let out = run(m);
        let w_pred = input(out.pred.rows, out.pred.cols, 10);
        let w_log = [0, 1, 2].map(|j| input(out.logits[j].rows, out.logits[j].cols, 11 + j as u64));
        let objective = |o: &ForwardOutput| {
            let dot =
                |a: &Mat, b: &Mat| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>();
            dot(&o.pred, &w_pred) + (0..3).map(|j| dot(&o.logits[j], &w_log[j])).sum::<f64>()
        };
        let g = m
            .backward(&out.cache, &w_pred, [&w_log[0], &w_log[1], &w_log[2]])
            .unwrap();
        let idx: Vec<usize> = (0..m.num_params()).step_by(7).collect();
        let mut probe = m.clone();
        let fd: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let orig = probe.params[i];
                probe.params[i] = orig + 1e-5;
                let up = objective(&run(&probe));
                probe.params[i] = orig - 1e-5;
                let down = objective(&run(&probe));
                probe.params[i] = orig;
                (up - down) / 2e-5
            })
            .collect();
        let an: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
        let err = max_relative_error(&an, &fd);
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = ToyConverter::new(ConverterConfig::tiny(4), 5).unwrap();
        check_linear_functional(&m, &input(7, 4, 3), None);
    }

    #[test]
    fn backward_with_dropout_and_without_attention() {
        let mut cfg = ConverterConfig::tiny(4);
        cfg.dropout = 0.25;
        let m = ToyConverter::new(cfg.clone(), 5).unwrap();
        check_linear_functional(&m, &input(7, 4, 3), Some(9));
        cfg.attention = false;
        let m = ToyConverter::new(cfg, 5).unwrap();
        check_linear_functional(&m, &input(7, 4, 3), None);
    }
}
