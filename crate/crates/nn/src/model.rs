use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::NnError;
use crate::layers::{MlpHead, Session};
use crate::loss::sigmoid;
use crate::msresnet::{MsResNet, MsResNetSpec};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::transformer::{Encoder, TransformerSpec};

/// Architecture of a classifier; everything needed to rebuild its layout.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    /// Multi-scale ResNet over a fixed stack of `in_channels` rows, then an
    /// MLP head with `fc_dropout`.
    Cnn { resnet: MsResNetSpec },
    /// Per-channel ResNet embedder (one input row each), cross-channel
    /// encoder with a CLS token, MLP head on the CLS representation.
    Transformer { embedder: MsResNetSpec, encoder: TransformerSpec },
}

impl ModelSpec {
    pub fn cnn(in_channels: usize, base_width: usize, embedding_dim: usize, dropout: f64) -> Self {
        let mut resnet = MsResNetSpec::new(in_channels, embedding_dim);
        resnet.base_width = base_width;
        resnet.fc_dropout = dropout;
        ModelSpec::Cnn { resnet }
    }

    pub fn transformer(base_width: usize, embedding_dim: usize, num_layers: usize, dropout: f64) -> Self {
        let mut embedder = MsResNetSpec::new(1, embedding_dim);
        embedder.base_width = base_width;
        embedder.fc_dropout = dropout;
        ModelSpec::Transformer {
            embedder,
            encoder: TransformerSpec::new(embedding_dim, num_layers, dropout),
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        match self {
            ModelSpec::Cnn { resnet } => resnet.validate(),
            ModelSpec::Transformer { embedder, encoder } => {
                embedder.validate()?;
                encoder.validate()?;
                if embedder.in_channels != 1 || embedder.embedding_dim != encoder.embedding_dim {
                    return Err(NnError::Shape(
                        "transformer embedder must map one channel to the encoder width".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self {
            ModelSpec::Cnn { resnet } => resnet.embedding_dim,
            ModelSpec::Transformer { encoder, .. } => encoder.embedding_dim,
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        match self {
            ModelSpec::Cnn { resnet } => MsResNet::param_count(resnet) + MlpHead::param_count(resnet.embedding_dim),
            ModelSpec::Transformer { embedder, encoder } => {
                MsResNet::param_count(embedder)
                    + Encoder::param_count(encoder)
                    + MlpHead::param_count(encoder.embedding_dim)
            }
        }
    }

    /// Fixed input row count, `None` when any count is accepted.
    pub fn input_channels(&self) -> Option<usize> {
        match self {
            ModelSpec::Cnn { resnet } => Some(resnet.in_channels),
            ModelSpec::Transformer { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Net {
    Cnn { resnet: MsResNet, head: MlpHead },
    Transformer { embedder: MsResNet, encoder: Encoder, head: MlpHead, dropout: f64 },
}

/// A classifier: layer structure plus its flat parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    net: Net,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self, NnError> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let net = match spec {
            ModelSpec::Cnn { resnet } => {
                let r = MsResNet::new(&mut params, "resnet", resnet, rng)?;
                let head = MlpHead::new(&mut params, "head", resnet.embedding_dim, resnet.fc_dropout, rng);
                Net::Cnn { resnet: r, head }
            }
            ModelSpec::Transformer { embedder, encoder } => {
                let e = MsResNet::new(&mut params, "embedder", embedder, rng)?;
                let enc = Encoder::new(&mut params, "encoder", encoder, rng)?;
                let head = MlpHead::new(&mut params, "head", encoder.embedding_dim, encoder.dropout, rng);
                Net::Transformer {
                    embedder: e,
                    encoder: enc,
                    head,
                    dropout: encoder.dropout,
                }
            }
        };
        Ok(Self {
            spec: spec.clone(),
            net,
            params,
        })
    }

    /// Rebuilds the layout for `spec` and installs `flat` as its parameters.
    pub fn from_params(spec: &ModelSpec, flat: Vec<T>) -> Result<Self, NnError> {
        let mut m = Self::new(spec, &mut StdRng::seed_from_u64(0))?;
        m.params.set_flat(flat)?;
        Ok(m)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    pub fn resnet(&self) -> &MsResNet {
        match &self.net {
            Net::Cnn { resnet, .. } => resnet,
            Net::Transformer { embedder, .. } => embedder,
        }
    }

    pub fn encoder(&self) -> Option<&Encoder> {
        match &self.net {
            Net::Transformer { encoder, .. } => Some(encoder),
            Net::Cnn { .. } => None,
        }
    }

    pub fn head(&self) -> &MlpHead {
        match &self.net {
            Net::Cnn { head, .. } | Net::Transformer { head, .. } => head,
        }
    }

    /// Records the forward pass for one sample `[C, T]` and returns its
    /// `[1, 1]` logit.
    pub fn logit(&self, s: &mut Session<'_, T>, sample: &Tensor<T>) -> Result<Var, NnError> {
        let shape = sample.shape();
        if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
            return Err(NnError::Shape(format!("sample must be [C ≥ 1, T ≥ 1], got {shape:?}")));
        }
        let (c, t) = (shape[0], shape[1]);
        match &self.net {
            Net::Cnn { resnet, head } => {
                if c != resnet.spec.in_channels {
                    return Err(NnError::Shape(format!(
                        "CNN expects {} channels, sample has {c}",
                        resnet.spec.in_channels
                    )));
                }
                let x = s.tape.constant(sample.clone().reshaped(&[1, c, t])?);
                let e = resnet.forward(s, x)?;
                head.forward(s, e)
            }
            Net::Transformer {
                embedder,
                encoder,
                head,
                dropout,
            } => {
                let x = s.tape.constant(sample.clone().reshaped(&[c, 1, t])?);
                let tokens = embedder.forward(s, x)?;
                let tokens = s.dropout(tokens, *dropout)?;
                let cls = encoder.forward(s, tokens)?;
                head.forward(s, cls)
            }
        }
    }

    /// Forward + weighted BCE, returning the loss node.
    pub fn loss(&self, s: &mut Session<'_, T>, sample: &Tensor<T>, label: bool, pos_weight: T) -> Result<Var, NnError> {
        let z = self.logit(s, sample)?;
        s.tape.weighted_bce(z, label, pos_weight)
    }

    /// Eval-mode logit.
    pub fn predict_logit(&self, sample: &Tensor<T>) -> Result<T, NnError> {
        let mut s = Session::eval(&self.params);
        let z = self.logit(&mut s, sample)?;
        Ok(s.tape.value(z).data()[0])
    }

    /// Eval-mode SOZ probability `σ(logit)`.
    pub fn predict(&self, sample: &Tensor<T>) -> Result<T, NnError> {
        Ok(sigmoid(self.predict_logit(sample)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn sample(c: usize, t: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * t).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
        Tensor::from_vec(&[c, t], data).unwrap()
    }

    #[test]
    fn layout_matches_closed_form_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for spec in [ModelSpec::cnn(37, 8, 16, 0.44), ModelSpec::transformer(8, 16, 2, 0.46)] {
            let m = Model::<f32>::new(&spec, &mut rng).unwrap();
            assert_eq!(m.params.len(), spec.param_count());
        }
    }

    #[test]
    fn cnn_rejects_wrong_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::<f32>::new(&ModelSpec::cnn(5, 4, 8, 0.0), &mut rng).unwrap();
        assert!(m.predict(&sample(5, 64, 1)).is_ok());
        assert!(matches!(m.predict(&sample(4, 64, 1)), Err(NnError::Shape(_))));
    }

    #[test]
    fn eval_mode_is_deterministic_and_train_mode_uses_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Model::<f32>::new(&ModelSpec::transformer(4, 8, 1, 0.5), &mut rng).unwrap();
        let x = sample(6, 80, 2);
        assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
        let p = m.predict(&x).unwrap();
        assert!(p > 0.0 && p < 1.0);

        let mut drng = ChaCha8Rng::seed_from_u64(4);
        let mut s = Session::train(&m.params, &mut drng);
        let z = m.logit(&mut s, &x).unwrap();
        let train_logit = s.tape.value(z).data()[0];
        assert_ne!(train_logit, m.predict_logit(&x).unwrap());
    }

    #[test]
    fn same_seed_same_model() {
        let spec = ModelSpec::transformer(4, 8, 1, 0.1);
        let a = Model::<f32>::new(&spec, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = Model::<f32>::new(&spec, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a.params.flat(), b.params.flat());
        let x = sample(3, 50, 0);
        assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
    }

    #[test]
    fn transformer_accepts_any_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = Model::<f32>::new(&ModelSpec::transformer(2, 8, 1, 0.0), &mut rng).unwrap();
        for c in [1, 2, 17, 512] {
            let p = m.predict(&sample(c, 24, c as u64)).unwrap();
            assert!(p.is_finite());
        }
    }
}
