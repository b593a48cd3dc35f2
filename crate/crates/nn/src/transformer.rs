//! Pre-norm Transformer encoder over channel tokens with a learnable CLS
//! token and no positional encoding, so the CLS readout is invariant to the
//! order of the input tokens.

use rand::Rng;

use crate::error::NnError;
use crate::layers::{LayerNorm, Linear, Session};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerSpec {
    pub embedding_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub dropout: f64,
    pub mlp_hidden: usize,
}

impl TransformerSpec {
    /// Heads fixed at one per eight embedding dimensions, feed-forward at 4×.
    pub fn new(embedding_dim: usize, num_layers: usize, dropout: f64) -> Self {
        Self {
            embedding_dim,
            num_layers,
            num_heads: (embedding_dim / 8).max(1),
            dropout,
            mlp_hidden: 4 * embedding_dim,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.embedding_dim == 0 || self.embedding_dim % 8 != 0 {
            return Err(NnError::Shape(format!(
                "embedding_dim {} must be a positive multiple of 8",
                self.embedding_dim
            )));
        }
        if self.num_heads == 0 || self.embedding_dim % self.num_heads != 0 {
            return Err(NnError::Shape(format!(
                "{} heads do not divide embedding_dim {}",
                self.num_heads, self.embedding_dim
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(NnError::Shape("mlp_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embedding_dim / self.num_heads
    }
}

/// `softmax(q kᵀ / sqrt(d)) v` for `q [N, d]`, `k [M, d]`, `v [M, e]`.
pub fn scaled_dot_attention<T: Scalar>(s: &mut Session<'_, T>, q: Var, k: Var, v: Var) -> Result<Var, NnError> {
    let d = s.tape.value(q).shape()[1];
    let scores = s.tape.matmul_t(q, k)?;
    let scores = s.tape.scale(scores, T::one() / T::of(d as f64).sqrt());
    let weights = s.tape.softmax_rows(scores)?;
    s.tape.matmul(weights, v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    norm1: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    heads: usize,
    dropout: f64,
}

impl EncoderLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: &TransformerSpec,
        rng: &mut R,
    ) -> Self {
        let d = spec.embedding_dim;
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, rng),
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            attn_out: Linear::new(store, &format!("{name}.attn_out"), d, d, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, rng),
            ff1: Linear::new(store, &format!("{name}.ff1"), d, spec.mlp_hidden, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), spec.mlp_hidden, d, rng),
            heads: spec.num_heads,
            dropout: spec.dropout,
        }
    }

    pub fn param_count(spec: &TransformerSpec) -> usize {
        let d = spec.embedding_dim;
        2 * 2 * d + 4 * Linear::param_count(d, d) + Linear::param_count(d, spec.mlp_hidden)
            + Linear::param_count(spec.mlp_hidden, d)
    }

    /// `x [N, d] → [N, d]`
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, NnError> {
        let d = s.tape.value(x).shape()[1];
        let dh = d / self.heads;
        let h = self.norm1.forward(s, x)?;
        let q = self.query.forward(s, h)?;
        let k = self.key.forward(s, h)?;
        let v = self.value.forward(s, h)?;
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let qh = s.tape.slice_cols(q, i * dh, dh)?;
            let kh = s.tape.slice_cols(k, i * dh, dh)?;
            let vh = s.tape.slice_cols(v, i * dh, dh)?;
            heads.push(scaled_dot_attention(s, qh, kh, vh)?);
        }
        let a = if heads.len() == 1 { heads[0] } else { s.tape.concat_cols(&heads)? };
        let a = self.attn_out.forward(s, a)?;
        let a = s.dropout(a, self.dropout)?;
        let x = s.tape.add(x, a)?;

        let h = self.norm2.forward(s, x)?;
        let f = self.ff1.forward(s, h)?;
        let f = s.tape.gelu(f);
        let f = s.dropout(f, self.dropout)?;
        let f = self.ff2.forward(s, f)?;
        let f = s.dropout(f, self.dropout)?;
        s.tape.add(x, f)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub spec: TransformerSpec,
    pub cls: ParamId,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: &TransformerSpec,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        spec.validate()?;
        let cls = store.register(
            format!("{name}.cls"),
            &[1, spec.embedding_dim],
            Init::Normal { sd: 0.02 },
            rng,
        );
        let layers = (0..spec.num_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), spec, rng))
            .collect();
        let final_norm = LayerNorm::new(store, &format!("{name}.final_norm"), spec.embedding_dim, rng);
        Ok(Self {
            spec: spec.clone(),
            cls,
            layers,
            final_norm,
        })
    }

    pub fn param_count(spec: &TransformerSpec) -> usize {
        let d = spec.embedding_dim;
        d + spec.num_layers * EncoderLayer::param_count(spec) + 2 * d
    }

    pub fn layer(&self, i: usize) -> &EncoderLayer {
        &self.layers[i]
    }

    /// Prepends the CLS token to `tokens [C, d]`, runs every layer and
    /// returns the final CLS representation `[1, d]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, tokens: Var) -> Result<Var, NnError> {
        let shape = s.tape.value(tokens).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.spec.embedding_dim || shape[0] == 0 {
            return Err(NnError::Shape(format!(
                "encoder expects [C ≥ 1, {}] tokens, got {shape:?}",
                self.spec.embedding_dim
            )));
        }
        let cls = s.param(self.cls);
        let mut x = s.tape.concat_rows(&[cls, tokens])?;
        for layer in &self.layers {
            x = layer.forward(s, x)?;
        }
        let x = self.final_norm.forward(s, x)?;
        s.tape.slice_rows(x, 0, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn head_count_is_one_per_eight_dims() {
        assert_eq!(TransformerSpec::new(16, 2, 0.46).num_heads, 2);
        assert_eq!(TransformerSpec::new(64, 1, 0.0).num_heads, 8);
        assert!(TransformerSpec::new(12, 1, 0.0).validate().is_err());
    }

    #[test]
    fn attention_matches_hand_computation() {
        // q = k = v rows chosen so the arithmetic is easy to follow
        let q = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let k = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let ps = ParamStore::<f64>::new();
        let mut s = Session::eval(&ps);
        let qv = s.tape.constant(Tensor::from_vec(&[3, 2], q.to_vec()).unwrap());
        let kv = s.tape.constant(Tensor::from_vec(&[3, 2], k.to_vec()).unwrap());
        let vv = s.tape.constant(Tensor::from_vec(&[3, 2], v.to_vec()).unwrap());
        let out = scaled_dot_attention(&mut s, qv, kv, vv).unwrap();
        let got = s.tape.value(out).data().to_vec();

        let scale = 1.0 / 2f64.sqrt();
        let mut expected = vec![0.0; 6];
        for i in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|j| (q[2 * i] * k[2 * j] + q[2 * i + 1] * k[2 * j + 1]) * scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..2 {
                expected[2 * i + c] = (0..3).map(|j| e[j] / z * v[2 * j + c]).sum();
            }
        }
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{got:?} vs {expected:?}");
        }
    }

    #[test]
    fn encoder_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = TransformerSpec::new(16, 2, 0.0);
        let mut ps = ParamStore::<f32>::new();
        Encoder::new(&mut ps, "enc", &spec, &mut rng).unwrap();
        // cls 16; per layer: 2 norms (64) + 4·(16·16+16) + (16·64+64) + (64·16+16)
        let per_layer = 64 + 4 * 272 + 1088 + 1040;
        assert_eq!(ps.len(), 16 + 2 * per_layer + 32);
        assert_eq!(ps.len(), Encoder::param_count(&spec));
    }

    #[test]
    fn reversed_tokens_give_the_same_cls() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = TransformerSpec::new(16, 2, 0.0);
        let mut ps = ParamStore::<f32>::new();
        let enc = Encoder::new(&mut ps, "enc", &spec, &mut rng).unwrap();
        let c = 7;
        let data: Vec<f32> = (0..c * 16).map(|i| ((i * 37 % 11) as f32 - 5.0) / 3.0).collect();
        let fwd = Tensor::from_vec(&[c, 16], data).unwrap();
        let rev_idx: Vec<usize> = (0..c).rev().collect();
        let rev = fwd.select_rows(&rev_idx);
        let run = |t: Tensor<f32>| {
            let mut s = Session::eval(&ps);
            let x = s.tape.constant(t);
            let y = enc.forward(&mut s, x).unwrap();
            s.tape.value(y).data().to_vec()
        };
        let (a, b) = (run(fwd), run(rev));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
        }
    }

    #[test]
    fn single_token_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = TransformerSpec::new(8, 1, 0.0);
        let mut ps = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut ps, "enc", &spec, &mut rng).unwrap();
        let mut s = Session::eval(&ps);
        let x = s.tape.constant(Tensor::full(&[1, 8], 0.3));
        let y = enc.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.value(y).shape(), &[1, 8]);
        assert!(s.tape.value(y).is_finite());
    }
}
