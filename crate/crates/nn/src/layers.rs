use rand::{Rng, RngCore};

use crate::error::NnError;
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// One forward pass: the tape being recorded, the parameters it reads, and
/// an RNG when running in training mode (dropout active).
pub struct Session<'a, T> {
    pub tape: Tape<T>,
    pub params: &'a ParamStore<T>,
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn eval(params: &'a ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            rng: None,
        }
    }

    pub fn train(params: &'a ParamStore<T>, rng: &'a mut dyn RngCore) -> Self {
        Self {
            tape: Tape::new(),
            params,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var, NnError> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let n = self.tape.value(x).len();
        let keep = 1.0 - p;
        let scale = T::of(1.0 / keep);
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect();
        self.tape.mul_const(x, mask)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.register(
            format!("{name}.weight"),
            &[out_dim, in_dim],
            Init::FanInUniform { fan_in: in_dim },
            rng,
        );
        let bias = store.register(format!("{name}.bias"), &[out_dim], Init::Zeros, rng);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    /// `[N, in] → [N, out]`
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, NnError> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.tape.linear(x, w)?;
        s.tape.bias_rows(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.register(
            format!("{name}.weight"),
            &[cout, cin, kernel],
            Init::FanInUniform { fan_in: cin * kernel },
            rng,
        );
        let bias = store.register(format!("{name}.bias"), &[cout], Init::Zeros, rng);
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn param_count(cin: usize, cout: usize, kernel: usize) -> usize {
        cout * cin * kernel + cout
    }

    /// `[B, Cin, L] → [B, Cout, L']`
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, NnError> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.tape.conv1d(x, w, self.stride, self.pad)?;
        s.tape.bias_channels(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Self {
        let gamma = store.register(format!("{name}.gamma"), &[dim], Init::Ones, rng);
        let beta = store.register(format!("{name}.beta"), &[dim], Init::Zeros, rng);
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, NnError> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.tape.layer_norm(x, g, b, T::of(Self::EPS))
    }
}

/// Classification head: `Linear(d→d) → ReLU → Dropout → Linear(d→1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead {
    pub hidden: Linear,
    pub out: Linear,
    pub dropout: f64,
}

impl MlpHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, 1, rng),
            dropout,
        }
    }

    pub fn param_count(dim: usize) -> usize {
        Linear::param_count(dim, dim) + Linear::param_count(dim, 1)
    }

    /// `[1, d] → [1, 1]` logit.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, NnError> {
        let h = self.hidden.forward(s, x)?;
        let h = s.tape.relu(h);
        let h = s.dropout(h, self.dropout)?;
        self.out.forward(s, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_matches_hand_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f64>::new();
        let head = MlpHead::new(&mut ps, "head", 2, 0.0, &mut rng);
        ps.slice_mut(head.hidden.weight).copy_from_slice(&[1.0, -2.0, 0.5, 3.0]);
        ps.slice_mut(head.hidden.bias).copy_from_slice(&[0.1, -10.0]);
        ps.slice_mut(head.out.weight).copy_from_slice(&[2.0, 4.0]);
        ps.slice_mut(head.out.bias).copy_from_slice(&[-0.5]);
        let mut s = Session::eval(&ps);
        let x = s.tape.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.25]).unwrap());
        let z = head.forward(&mut s, x).unwrap();
        // hidden = [1 - 0.5 + 0.1, 0.5 + 0.75 - 10] = [0.6, -8.75] → relu [0.6, 0]
        // out = 2·0.6 + 0 − 0.5 = 0.7
        assert!((s.tape.value(z).data()[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn zero_initialised_head_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::<f32>::new();
        let head = MlpHead::new(&mut ps, "head", 4, 0.3, &mut rng);
        ps.slice_mut(head.out.weight).fill(0.0);
        let mut s = Session::eval(&ps);
        let x = s.tape.constant(Tensor::from_vec(&[1, 4], vec![0.3, -1.0, 2.0, 5.0]).unwrap());
        let z = head.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.value(z).data(), &[0.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval_and_active_in_train() {
        let ps = ParamStore::<f32>::new();
        let x = Tensor::full(&[1, 64], 1.0f32);
        let mut s = Session::eval(&ps);
        let v = s.tape.constant(x.clone());
        let y = s.dropout(v, 0.5).unwrap();
        assert_eq!(s.tape.value(y), &x);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = Session::train(&ps, &mut rng);
        let v = s.tape.constant(x.clone());
        let y = s.dropout(v, 0.5).unwrap();
        let out = s.tape.value(y).data();
        assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(out.iter().any(|&v| v == 0.0));
    }
}
