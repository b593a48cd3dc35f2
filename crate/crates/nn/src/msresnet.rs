//! Multi-scale 1D ResNet embedder.
//!
//! ```text
//! x [B, C, T]
//!   └─ stem: conv k7 s2 (C→w) → ReLU → maxpool k3 s2
//!        ├─ branch k=3: blocks_per_branch × BasicBlock(w, k, stride 2) → mean over time
//!        ├─ branch k=5: ...
//!        └─ branch k=7: ...
//!   concat [B, branches·w] → Linear → [B, embedding_dim]
//! ```
//!
//! A basic block is `conv(k, s2) → ReLU → conv(k, s1)` added to a 1×1 stride-2
//! projection of its input, followed by ReLU. There is no batch norm.

use rand::Rng;

use crate::error::NnError;
use crate::layers::{Conv1d, Linear, Session};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::Var;

pub const STEM_KERNEL: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct MsResNetSpec {
    pub in_channels: usize,
    pub branch_kernel_sizes: Vec<usize>,
    pub blocks_per_branch: usize,
    pub base_width: usize,
    pub embedding_dim: usize,
    pub fc_dropout: f64,
}

impl MsResNetSpec {
    pub fn new(in_channels: usize, embedding_dim: usize) -> Self {
        Self {
            in_channels,
            branch_kernel_sizes: vec![3, 5, 7],
            blocks_per_branch: 2,
            base_width: 32,
            embedding_dim,
            fc_dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Shape(format!("invalid ResNet spec: {m}")));
        if self.in_channels == 0 {
            return bad("in_channels must be positive");
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive");
        }
        if self.base_width == 0 || self.blocks_per_branch == 0 {
            return bad("width and block count must be positive");
        }
        if self.branch_kernel_sizes.is_empty() || self.branch_kernel_sizes.iter().any(|k| k % 2 == 0) {
            return bad("kernel sizes must be odd and non-empty");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BasicBlock {
    conv1: Conv1d,
    conv2: Conv1d,
    shortcut: Conv1d,
}

impl BasicBlock {
    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, NnError> {
        let h = self.conv1.forward(s, x)?;
        let h = s.tape.relu(h);
        let h = self.conv2.forward(s, h)?;
        let r = self.shortcut.forward(s, x)?;
        let y = s.tape.add(h, r)?;
        Ok(s.tape.relu(y))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsResNet {
    pub spec: MsResNetSpec,
    stem: Conv1d,
    branches: Vec<Vec<BasicBlock>>,
    pub projection: Linear,
}

impl MsResNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: &MsResNetSpec,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        spec.validate()?;
        let w = spec.base_width;
        let stem = Conv1d::new(
            store,
            &format!("{name}.stem"),
            spec.in_channels,
            w,
            STEM_KERNEL,
            2,
            STEM_KERNEL / 2,
            rng,
        );
        let mut branches = Vec::new();
        for &k in &spec.branch_kernel_sizes {
            let mut blocks = Vec::new();
            for b in 0..spec.blocks_per_branch {
                let p = format!("{name}.k{k}.block{b}");
                blocks.push(BasicBlock {
                    conv1: Conv1d::new(store, &format!("{p}.conv1"), w, w, k, 2, k / 2, rng),
                    conv2: Conv1d::new(store, &format!("{p}.conv2"), w, w, k, 1, k / 2, rng),
                    shortcut: Conv1d::new(store, &format!("{p}.shortcut"), w, w, 1, 2, 0, rng),
                });
            }
            branches.push(blocks);
        }
        let projection = Linear::new(
            store,
            &format!("{name}.projection"),
            w * spec.branch_kernel_sizes.len(),
            spec.embedding_dim,
            rng,
        );
        Ok(Self {
            spec: spec.clone(),
            stem,
            branches,
            projection,
        })
    }

    pub fn param_count(spec: &MsResNetSpec) -> usize {
        let w = spec.base_width;
        let stem = Conv1d::param_count(spec.in_channels, w, STEM_KERNEL);
        let branches: usize = spec
            .branch_kernel_sizes
            .iter()
            .map(|&k| {
                spec.blocks_per_branch
                    * (2 * Conv1d::param_count(w, w, k) + Conv1d::param_count(w, w, 1))
            })
            .sum();
        stem + branches + Linear::param_count(w * spec.branch_kernel_sizes.len(), spec.embedding_dim)
    }

    /// `x [B, in_channels, T] → [B, embedding_dim]`
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, NnError> {
        let shape = s.tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.spec.in_channels {
            return Err(NnError::Shape(format!(
                "ResNet expects [B, {}, T], got {shape:?}",
                self.spec.in_channels
            )));
        }
        let h = self.stem.forward(s, x)?;
        let h = s.tape.relu(h);
        let h = if s.tape.value(h).shape()[2] >= 2 {
            s.tape.max_pool1d(h, 3, 2, 1)?
        } else {
            h
        };
        let mut pooled = Vec::with_capacity(self.branches.len());
        for blocks in &self.branches {
            let mut b = h;
            for block in blocks {
                b = block.forward(s, b)?;
            }
            pooled.push(s.tape.mean_last(b)?);
        }
        let feats = s.tape.concat_cols(&pooled)?;
        self.projection.forward(s, feats)
    }

    /// Runs only the stem and the first branch; exposed for gradient checks.
    pub fn forward_first_branch<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, NnError> {
        let h = self.stem.forward(s, x)?;
        let mut b = s.tape.relu(h);
        for block in &self.branches[0] {
            b = block.forward(s, b)?;
        }
        s.tape.mean_last(b)
    }
}
