use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Matrix `[in, out]` drawn from U(-1/sqrt(in), 1/sqrt(in)).
pub(crate) fn uniform_matrix<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| T::lit(rng.random_range(-bound..bound)))
}

/// Affine map `x W + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.register(format!("{name}.weight"), uniform_matrix(rng, fan_in, fan_out))?,
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    fn register<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.register(format!("{name}.gamma"), Tensor::ones(&[width]))?,
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[width]))?,
        })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, eps: f64) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, eps)
    }
}

/// Static shape of a transformer layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerShape {
    pub width: usize,
    pub heads: usize,
    pub ff: usize,
    pub eps: f64,
}

/// Optional dropout source for training-mode forwards.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// One pre-norm transformer encoder layer:
/// `x + Attn(LN(x))`, then `x + FFN(LN(x))` with a GELU feed-forward.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransformerLayer {
    pub norm1: LayerNormParams,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm2: LayerNormParams,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerLayer {
    pub(crate) fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        shape: LayerShape,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = shape.width;
        Ok(Self {
            norm1: LayerNormParams::register(store, &format!("{name}.norm1"), w)?,
            query: Linear::register(store, &format!("{name}.attn.query"), w, w, rng)?,
            key: Linear::register(store, &format!("{name}.attn.key"), w, w, rng)?,
            value: Linear::register(store, &format!("{name}.attn.value"), w, w, rng)?,
            output: Linear::register(store, &format!("{name}.attn.output"), w, w, rng)?,
            norm2: LayerNormParams::register(store, &format!("{name}.norm2"), w)?,
            ff_in: Linear::register(store, &format!("{name}.ff.in"), w, shape.ff, rng)?,
            ff_out: Linear::register(store, &format!("{name}.ff.out"), shape.ff, w, rng)?,
        })
    }

    /// `x: [B, L, W]`, `mask: [B * L]` (true = real token).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mask: &[bool],
        shape: LayerShape,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x, shape.eps)?;
        let q = self.query.forward(tape, store, h)?;
        let k = self.key.forward(tape, store, h)?;
        let v = self.value.forward(tape, store, h)?;
        let a = tape.attention(q, k, v, shape.heads, mask)?;
        let mut a = self.output.forward(tape, store, a)?;
        if let Some(d) = dropout.as_mut() {
            a = tape.dropout(a, d.rate, d.rng)?;
        }
        let x = tape.add(x, a)?;

        let h = self.norm2.forward(tape, store, x, shape.eps)?;
        let f = self.ff_in.forward(tape, store, h)?;
        let f = tape.gelu(f)?;
        let mut f = self.ff_out.forward(tape, store, f)?;
        if let Some(d) = dropout.as_mut() {
            f = tape.dropout(f, d.rate, d.rng)?;
        }
        tape.add(x, f)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.norm1.gamma, self.norm1.beta];
        for l in [&self.query, &self.key, &self.value, &self.output] {
            ids.extend(l.ids());
        }
        ids.extend([self.norm2.gamma, self.norm2.beta]);
        ids.extend(self.ff_in.ids());
        ids.extend(self.ff_out.ids());
        ids
    }
}
