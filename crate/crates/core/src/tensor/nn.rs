//! Transformer building blocks on top of the tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Bound, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Tensor with i.i.d. `N(0, std²)` entries.
pub fn init_normal<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches generated data")
}

/// `y = x W + b` with `W: [in × out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            init_normal(rng, vec![in_dim, out_dim], (1.0 / in_dim as f64).sqrt()),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x: [r × in] → [r × out]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound[self.weight])?;
        tape.add_bias(y, bound[self.bias])
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormLayer {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gamma = params.add(
            format!("{name}.gamma"),
            Tensor::new(vec![dim], vec![1.0; dim]).expect("valid shape"),
        );
        let beta = params.add(format!("{name}.beta"), Tensor::zeros(vec![dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound[self.gamma], bound[self.beta], LN_EPS)
    }
}

/// Tape handles of the four `d × d` attention projections.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
}

/// Scaled dot-product self-attention over the rows of `x: [k × d]`.
///
/// Each head sees a contiguous `d / heads` column block of the projected
/// queries, keys and values and uses the scale `1/√(d/heads)`.
pub fn multi_head_self_attention(
    tape: &mut Tape,
    x: Var,
    params: &AttentionParams,
    heads: usize,
) -> Result<Var> {
    let d = match *tape.shape(x) {
        [_, d] => d,
        ref s => {
            return Err(Error::Dimension(format!(
                "attention expects [tokens × width], found {s:?}"
            )))
        }
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "width {d} is not divisible by {heads} heads"
        )));
    }
    for (name, p) in [
        ("query", params.query),
        ("key", params.key),
        ("value", params.value),
        ("output", params.output),
    ] {
        if tape.shape(p) != [d, d] {
            return Err(Error::Dimension(format!(
                "{name} projection has shape {:?}, expected [{d}, {d}]",
                tape.shape(p)
            )));
        }
    }
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let q = tape.matmul(x, params.query)?;
    let k = tape.matmul(x, params.key)?;
    let v = tape.matmul(x, params.value)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let start = h * head_dim;
        let qh = tape.slice_last(q, start, head_dim)?;
        let kh = tape.slice_last(k, start, head_dim)?;
        let vh = tape.slice_last(v, start, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    let merged = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_last(&outs)?
    };
    tape.matmul(merged, params.output)
}

/// Arithmetic mean over the token axis: `[k × d] → [d]`.
pub fn mean_pool_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.mean_rows(x)
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / width as f64).sqrt();
        let mut proj =
            |suffix: &str, rng: &mut R| params.add(format!("{name}.{suffix}"), init_normal(rng, vec![width, width], std));
        let query = proj("query", rng);
        let key = proj("key", rng);
        let value = proj("value", rng);
        let output = proj("output", rng);
        Self {
            query,
            key,
            value,
            output,
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let p = AttentionParams {
            query: bound[self.query],
            key: bound[self.key],
            value: bound[self.value],
            output: bound[self.output],
        };
        multi_head_self_attention(tape, x, &p, self.heads)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNormLayer,
    pub attention: SelfAttention,
    pub norm2: LayerNormLayer,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let norm1 = LayerNormLayer::new(params, &format!("{name}.norm1"), width);
        let attention = SelfAttention::new(params, &format!("{name}.attn"), width, heads, rng);
        let norm2 = LayerNormLayer::new(params, &format!("{name}.norm2"), width);
        let ff_in = Linear::new(params, &format!("{name}.ff_in"), width, 4 * width, rng);
        let ff_out = Linear::new(params, &format!("{name}.ff_out"), 4 * width, width, rng);
        Self {
            norm1,
            attention,
            norm2,
            ff_in,
            ff_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, bound, x)?;
        let h = self.attention.forward(tape, bound, h)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, bound, x)?;
        let h = self.ff_in.forward(tape, bound, h)?;
        let h = tape.gelu(h);
        let h = self.ff_out.forward(tape, bound, h)?;
        tape.add(x, h)
    }
}

/// Stack of encoder blocks with a final layer norm.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNormLayer,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        width: usize,
        layers: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..layers)
            .map(|i| EncoderBlock::new(params, &format!("{name}.block{i}"), width, heads, rng))
            .collect();
        let final_norm = LayerNormLayer::new(params, &format!("{name}.norm"), width);
        Self { blocks, final_norm }
    }

    /// `x: [k × d] → [k × d]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, mut x: Var) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(tape, bound, x)?;
        }
        self.final_norm.forward(tape, bound, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attn_params(tape: &mut Tape, wq: &[f64], wk: &[f64], wv: &[f64], wo: &[f64]) -> AttentionParams {
        let d = (wq.len() as f64).sqrt() as usize;
        let mut m = |w: &[f64]| tape.constant(vec![d, d], w.to_vec()).unwrap();
        AttentionParams {
            query: m(wq),
            key: m(wk),
            value: m(wv),
            output: m(wo),
        }
    }

    #[test]
    fn single_token_attention_is_projection_chain() {
        let mut t = Tape::new();
        let wq = [0.3, -0.2, 0.5, 0.1];
        let wk = [1.0, 0.4, -0.7, 0.2];
        let wv = [0.5, 1.5, -1.0, 2.0];
        let wo = [2.0, 0.0, 1.0, -1.0];
        let p = attn_params(&mut t, &wq, &wk, &wv, &wo);
        let x = t.constant(vec![1, 2], vec![0.7, -1.3]).unwrap();
        let y = multi_head_self_attention(&mut t, x, &p, 2).unwrap();
        // v = x Wv, out = v Wo
        let v = [0.7 * 0.5 + -1.3 * -1.0, 0.7 * 1.5 + -1.3 * 2.0];
        let expected = [v[0] * 2.0 + v[1] * 1.0, v[0] * 0.0 + v[1] * -1.0];
        for (a, b) in t.value(y).iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn two_token_attention_by_hand() {
        // Identity projections: q = k = v = x, scale 1/sqrt(2).
        let id = [1.0, 0.0, 0.0, 1.0];
        let mut t = Tape::new();
        let p = attn_params(&mut t, &id, &id, &id, &id);
        let x = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let y = multi_head_self_attention(&mut t, x, &p, 1).unwrap();
        let s = 1.0 / 2f64.sqrt();
        // scores: row0 = [1, 0]·s, row1 = [0, 4]·s
        let a0 = [1.0 / (1.0 + (-s).exp()), 0.0];
        let a0 = [a0[0], 1.0 - a0[0]];
        let e = (4.0 * s).exp();
        let a1 = [1.0 / (1.0 + e), e / (1.0 + e)];
        let expected = [a0[0] * 1.0, a0[1] * 2.0, a1[0] * 1.0, a1[1] * 2.0];
        for (a, b) in t.value(y).iter().zip(expected) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let id = [1.0, 0.0, 0.0, 1.0];
        let mut t = Tape::new();
        let p = attn_params(&mut t, &id, &id, &id, &id);
        let x = t.constant(vec![2, 2], vec![1.0; 4]).unwrap();
        assert!(matches!(
            multi_head_self_attention(&mut t, x, &p, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mean_pool_examples() {
        let mut t = Tape::new();
        let x = t.constant(vec![2, 2], vec![1.0, 3.0, 3.0, 5.0]).unwrap();
        let y = mean_pool_tokens(&mut t, x).unwrap();
        assert_eq!(t.value(y), &[2.0, 4.0]);
        let single = t.constant(vec![1, 3], vec![4.0, 5.0, 6.0]).unwrap();
        let y = mean_pool_tokens(&mut t, single).unwrap();
        assert_eq!(t.value(y), &[4.0, 5.0, 6.0]);
        let same = t.constant(vec![4, 2], [1.5, -2.0].repeat(4)).unwrap();
        let y = mean_pool_tokens(&mut t, same).unwrap();
        assert_eq!(t.value(y), &[1.5, -2.0]);
    }
}
