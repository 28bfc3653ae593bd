//! Layer parameter groups and their forward passes on a [`Tape`].

use super::kernels::SeqLayout;
use super::rng::Rng;
use super::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::Result;

/// `y = x W (+ b)`, `W: in × out`. Weights uniform in `±sqrt(1/in)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = (1.0 / fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), rng.uniform_tensor(&[fan_in, fan_out], bound))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), rng.uniform_tensor(&[fan_out], bound))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

/// Learnable Fourier encoding of a scalar feature into `2F` values.
/// Frequencies start normal(0, 1), phases at 0.
#[derive(Clone, Debug)]
pub struct FourierLayer {
    pub freqs: ParamId,
    pub phases: ParamId,
}

impl FourierLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, f: usize) -> Result<Self> {
        Ok(Self {
            freqs: store.add(format!("{name}.freqs"), rng.normal_tensor(&[f], 1.0))?,
            phases: store.add(format!("{name}.phases"), Tensor::zeros([f]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, x: Var) -> Result<Var> {
        tape.fourier(x, tape.param(self.freqs), tape.param(self.phases))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full([d], T::one()))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([d]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, x: Var) -> Result<Var> {
        tape.layernorm(x, tape.param(self.gain), tape.param(self.bias))
    }
}

/// Index-fetch embedding table, initialized normal(0, 0.02).
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, rows: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: store.add(format!("{name}.table"), rng.normal_tensor(&[rows, dim], 0.02))?,
            rows,
            dim,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, indices: &[usize]) -> Result<Var> {
        tape.gather(self.table, indices)
    }
}

/// Full (non-causal) multi-head self-attention with input and output
/// projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(crate::Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d, true)?,
            k: Linear::new(store, rng, &format!("{name}.k"), d, d, true)?,
            v: Linear::new(store, rng, &format!("{name}.v"), d, d, true)?,
            out: Linear::new(store, rng, &format!("{name}.out"), d, d, true)?,
            heads,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, x: Var, layout: &SeqLayout) -> Result<Var> {
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, x)?;
        let v = self.v.forward(tape, x)?;
        let o = tape.attention(q, k, v, self.heads, layout)?;
        self.out.forward(tape, o)
    }
}

/// Pre-norm Transformer encoder layer: attention and a GELU feed-forward
/// sublayer, each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        d: usize,
        heads: usize,
        ff: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), d, ff, true)?,
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), ff, d, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, x: Var, layout: &SeqLayout) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let h = self.attn.forward(tape, h, layout)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, x)?;
        let h = tape.gelu(self.ff1.forward(tape, h)?);
        let h = self.ff2.forward(tape, h)?;
        tape.add(x, h)
    }
}

/// Sinusoidal absolute positional table, `n × d`.
pub fn sinusoidal_positions<T: Scalar>(n: usize, d: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); n * d];
    for pos in 0..n {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = T::of(angle.sin());
            data[pos * d + 2 * i + 1] = T::of(angle.cos());
        }
        if d % 2 == 1 {
            data[pos * d + d - 1] = T::of((pos as f64).sin());
        }
    }
    Tensor::new([n, d], data).expect("shape")
}

/// Tensor-level helpers mirroring the tape operations, for callers that do
/// not need gradients.
pub mod functional {
    use super::super::kernels::{self, SeqLayout};
    use super::super::{Scalar, Tape, Tensor};
    use crate::error::Result;

    fn eval<T: Scalar>(f: impl FnOnce(&Tape<'_, T>) -> Result<super::Var>) -> Result<Tensor<T>> {
        let tape = Tape::standalone();
        let v = f(&tape)?;
        Ok(tape.tensor(v))
    }

    pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        eval(|t| {
            let xv = t.constant(x.clone());
            let wv = t.constant(w.clone());
            let bv = bias.map(|b| t.constant(b.clone()));
            t.linear(xv, wv, bv)
        })
    }

    pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
        let d = x.data().iter().map(|&v| kernels::silu(v)).collect();
        Tensor::new(x.shape().to_vec(), d).expect("shape")
    }

    pub fn softplus<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
        let d = x.data().iter().map(|&v| kernels::softplus(v)).collect();
        Tensor::new(x.shape().to_vec(), d).expect("shape")
    }

    pub fn causal_conv1d<T: Scalar>(x: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x.rows();
        eval(|t| t.causal_conv(t.constant(x.clone()), t.constant(kernels.clone()), n))
    }

    pub fn fourier_encode<T: Scalar>(x: &Tensor<T>, freqs: &Tensor<T>, phases: &Tensor<T>) -> Result<Tensor<T>> {
        eval(|t| t.fourier(t.constant(x.clone()), t.constant(freqs.clone()), t.constant(phases.clone())))
    }

    pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>) -> Result<Tensor<T>> {
        eval(|t| t.rmsnorm(t.constant(x.clone()), t.constant(gain.clone())))
    }

    /// Attention weights of one sequence, `heads × n × n`, for inspection.
    pub fn attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, heads: usize) -> Tensor<T> {
        let n = q.rows();
        let (_, p) = kernels::attention(q.data(), k.data(), q.data(), q.cols(), heads, &SeqLayout::single(n));
        Tensor::new([heads, n, n], p).expect("shape")
    }
}
