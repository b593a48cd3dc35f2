//! Checkpoint file: a UTF-8 `key=value` header terminated by `end_header\n`,
//! followed by little-endian `f32` blocks (parameters, then the optimizer's
//! first and second moments when present).
//!
//! ```text
//! SPES-CHECKPOINT
//! format_version=1
//! model=transformer
//! ...
//! n_params=12345
//! optimizer_step=400
//! meta.fold=2
//! end_header
//! <n_params × f32><n_params × f32 m><n_params × f32 v>
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::NnError;
use crate::model::{Model, ModelSpec};
use crate::msresnet::MsResNetSpec;
use crate::optim::AdamWState;
use crate::transformer::TransformerSpec;

pub const MAGIC: &str = "SPES-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Vec<f32>,
    pub optimizer: Option<AdamWState<f32>>,
    pub metadata: BTreeMap<String, String>,
}

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>) -> Self {
        Self {
            spec: model.spec().clone(),
            params: model.params.flat().to_vec(),
            optimizer: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn model(&self) -> Result<Model<f32>, NnError> {
        Model::from_params(&self.spec, self.params.clone())
    }

    pub fn validate(&self) -> Result<(), NnError> {
        self.spec.validate()?;
        let n = self.spec.param_count();
        if self.params.len() != n {
            return Err(bad(format!("{} parameters stored, spec needs {n}", self.params.len())));
        }
        if let Some(o) = &self.optimizer {
            if o.m.len() != n || o.v.len() != n {
                return Err(bad("optimizer state length mismatch"));
            }
        }
        Ok(())
    }

    fn header(&self) -> String {
        let mut h = vec![MAGIC.to_string(), format!("format_version={FORMAT_VERSION}")];
        let resnet_lines = |h: &mut Vec<String>, prefix: &str, r: &MsResNetSpec| {
            let ks: Vec<String> = r.branch_kernel_sizes.iter().map(|k| k.to_string()).collect();
            h.push(format!("{prefix}.in_channels={}", r.in_channels));
            h.push(format!("{prefix}.branch_kernel_sizes={}", ks.join(",")));
            h.push(format!("{prefix}.blocks_per_branch={}", r.blocks_per_branch));
            h.push(format!("{prefix}.base_width={}", r.base_width));
            h.push(format!("{prefix}.embedding_dim={}", r.embedding_dim));
            h.push(format!("{prefix}.fc_dropout={}", r.fc_dropout));
        };
        match &self.spec {
            ModelSpec::Cnn { resnet } => {
                h.push("model=cnn".into());
                resnet_lines(&mut h, "resnet", resnet);
            }
            ModelSpec::Transformer { embedder, encoder } => {
                h.push("model=transformer".into());
                resnet_lines(&mut h, "embedder", embedder);
                h.push(format!("encoder.embedding_dim={}", encoder.embedding_dim));
                h.push(format!("encoder.num_layers={}", encoder.num_layers));
                h.push(format!("encoder.num_heads={}", encoder.num_heads));
                h.push(format!("encoder.dropout={}", encoder.dropout));
                h.push(format!("encoder.mlp_hidden={}", encoder.mlp_hidden));
            }
        }
        h.push(format!("n_params={}", self.params.len()));
        if let Some(o) = &self.optimizer {
            h.push(format!("optimizer_step={}", o.step));
        }
        for (k, v) in &self.metadata {
            assert!(!k.contains(['=', '\n']) && !v.contains('\n'), "metadata must be single-line");
            h.push(format!("meta.{k}={v}"));
        }
        h.push("end_header".into());
        h.join("\n") + "\n"
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), NnError> {
        self.validate()?;
        w.write_all(self.header().as_bytes())?;
        let mut write_block = |xs: &[f32]| -> std::io::Result<()> {
            let mut buf = Vec::with_capacity(xs.len() * 4);
            for x in xs {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)
        };
        write_block(&self.params)?;
        if let Some(o) = &self.optimizer {
            write_block(&o.m)?;
            write_block(&o.v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, NnError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let marker = b"end_header\n";
        let end = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| bad("missing end_header"))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
        let body = &bytes[end + marker.len()..];

        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("not a checkpoint file"));
        }
        let mut kv = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        for line in lines {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed header line {line:?}")))?;
            if let Some(mk) = k.strip_prefix("meta.") {
                metadata.insert(mk.to_string(), v.to_string());
            } else {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| bad(format!("missing header key {k}")));
        let num = |k: &str| -> Result<usize, NnError> { get(k)?.parse().map_err(|_| bad(format!("bad integer for {k}"))) };
        let float = |k: &str| -> Result<f64, NnError> { get(k)?.parse().map_err(|_| bad(format!("bad float for {k}"))) };

        let version: u32 = get("format_version")?.parse().map_err(|_| bad("bad format_version"))?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format_version {version}")));
        }
        let resnet = |prefix: &str| -> Result<MsResNetSpec, NnError> {
            let ks = get(&format!("{prefix}.branch_kernel_sizes"))?
                .split(',')
                .map(|s| s.parse().map_err(|_| bad("bad kernel size")))
                .collect::<Result<Vec<usize>, _>>()?;
            Ok(MsResNetSpec {
                in_channels: num(&format!("{prefix}.in_channels"))?,
                branch_kernel_sizes: ks,
                blocks_per_branch: num(&format!("{prefix}.blocks_per_branch"))?,
                base_width: num(&format!("{prefix}.base_width"))?,
                embedding_dim: num(&format!("{prefix}.embedding_dim"))?,
                fc_dropout: float(&format!("{prefix}.fc_dropout"))?,
            })
        };
        let spec = match get("model")?.as_str() {
            "cnn" => ModelSpec::Cnn { resnet: resnet("resnet")? },
            "transformer" => ModelSpec::Transformer {
                embedder: resnet("embedder")?,
                encoder: TransformerSpec {
                    embedding_dim: num("encoder.embedding_dim")?,
                    num_layers: num("encoder.num_layers")?,
                    num_heads: num("encoder.num_heads")?,
                    dropout: float("encoder.dropout")?,
                    mlp_hidden: num("encoder.mlp_hidden")?,
                },
            },
            other => return Err(bad(format!("unknown model family {other:?}"))),
        };
        let n = num("n_params")?;
        let step = kv.get("optimizer_step").map(|s| s.parse::<u64>()).transpose().map_err(|_| bad("bad optimizer_step"))?;
        let blocks = if step.is_some() { 3 } else { 1 };
        if body.len() != blocks * n * 4 {
            return Err(bad(format!("body has {} bytes, expected {}", body.len(), blocks * n * 4)));
        }
        let floats: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let params = floats[..n].to_vec();
        let optimizer = step.map(|step| AdamWState {
            m: floats[n..2 * n].to_vec(),
            v: floats[2 * n..].to_vec(),
            step,
        });
        let ck = Self {
            spec,
            params,
            optimizer,
            metadata,
        };
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(&tmp, buf)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
