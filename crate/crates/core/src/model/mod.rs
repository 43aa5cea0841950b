//! Classifier: backbone, optional attention block, global average pool, MLP
//! head producing one logit per class.

pub mod backbone;
pub mod cbam;
pub mod layers;

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use backbone::{Backbone, BackboneFamily, BackboneSpec};
pub use cbam::{apply_cbam, channel_attention, spatial_attention, Cbam, CbamConfig};
pub use layers::{copy_params, Param, Parameterized};

use crate::error::{Error, Result};
use crate::rng::derive_seed_tagged;
use crate::tensor::{FeatureMap, Real};
use layers::{
    dropout, global_avg_pool, global_avg_pool_backward, relu, relu_backward, Init, Linear,
};

pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_DROPOUT: f32 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub use_cbam: bool,
    #[serde(default)]
    pub cbam: CbamConfig,
    /// Hidden widths followed by the class count.
    pub head: Vec<usize>,
    pub dropout: f32,
}

impl ModelConfig {
    /// One hidden layer of 256 units, dropout 0.3.
    pub fn new(family: BackboneFamily, use_cbam: bool, class_count: usize) -> Self {
        Self {
            backbone: BackboneSpec::of_family(family),
            use_cbam,
            cbam: CbamConfig::default(),
            head: vec![DEFAULT_HIDDEN, class_count],
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        self.backbone.validate()?;
        match self.head.last() {
            Some(&c) if c == class_count => {}
            Some(&c) => {
                return Err(Error::Config(format!(
                    "head ends in {c} logits but the catalog has {class_count} classes"
                )))
            }
            None => return Err(Error::Config("head needs at least the output layer".into())),
        }
        if self.head.contains(&0) {
            return Err(Error::Config("head widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.use_cbam {
            self.cbam.validate(self.backbone.out_channels)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub class_count: usize,
    pub seed: u64,
    backbone: Backbone<T>,
    cbam: Option<Cbam<T>>,
    head: Vec<Linear<T>>,
}

/// Intermediate values kept by a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    backbone: backbone::BackboneTrace<T>,
    cbam: Option<cbam::CbamTrace<T>>,
    attended: FeatureMap<T>,
    head_inputs: Vec<FeatureMap<T>>,
    hidden: Vec<FeatureMap<T>>,
    masks: Vec<Vec<T>>,
}

/// Single-precision model, the one used for training.
pub fn build_model(config: &ModelConfig, class_count: usize, seed: u64) -> Result<Model> {
    Model::build(config, class_count, seed)
}

impl<T: Real> Model<T> {
    pub fn build(config: &ModelConfig, class_count: usize, seed: u64) -> Result<Self> {
        config.validate(class_count)?;
        let backbone = Backbone::<T>::new(&config.backbone, seed)?;
        let probe = backbone.forward(&FeatureMap::zeros(1, 3, 16, 16))?;
        if probe.channels != config.backbone.out_channels {
            return Err(Error::Config(format!(
                "backbone declares {} output channels but produces {}",
                config.backbone.out_channels, probe.channels
            )));
        }
        let cbam = if config.use_cbam {
            Some(Cbam::new(
                "cbam",
                config.backbone.out_channels,
                config.cbam,
                seed,
            )?)
        } else {
            None
        };
        let mut head = Vec::with_capacity(config.head.len());
        let mut width = config.backbone.out_channels;
        for (i, &out) in config.head.iter().enumerate() {
            let init = if i + 1 == config.head.len() {
                Init::Linear
            } else {
                Init::Relu
            };
            head.push(Linear::new(&format!("head.{i}"), width, out, init, seed));
            width = out;
        }
        Ok(Model {
            config: config.clone(),
            class_count,
            seed,
            backbone,
            cbam,
            head,
        })
    }

    pub fn cbam(&self) -> Option<&Cbam<T>> {
        self.cbam.as_ref()
    }

    pub fn backbone(&self) -> &Backbone<T> {
        &self.backbone
    }

    /// Same architecture and parameter values in another precision.
    pub fn convert<U: Real>(&self) -> Model<U> {
        let mut out = Model::<U>::build(&self.config, self.class_count, self.seed)
            .expect("config already validated");
        layers::copy_params(self, &mut out);
        out
    }

    /// Training-mode forward. Dropout is active only when a seed is given.
    pub fn forward_traced(
        &self,
        x: &FeatureMap<T>,
        dropout_seed: Option<u64>,
    ) -> Result<(FeatureMap<T>, ForwardTrace<T>)> {
        let (features, backbone) = self.backbone.forward_traced(x)?;
        let (attended, cbam) = match &self.cbam {
            Some(block) => {
                let (out, t) = block.forward_traced(&features)?;
                if !out.is_finite() {
                    return Err(Error::Numeric {
                        layer: "cbam".into(),
                    });
                }
                (out, Some(t))
            }
            None => (features, None),
        };
        let mut cur = global_avg_pool(&attended);
        let mut head_inputs = Vec::with_capacity(self.head.len());
        let mut hidden = Vec::new();
        let mut masks = Vec::new();
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter().enumerate() {
            let z = layer.forward(&cur);
            head_inputs.push(cur);
            if i == last {
                cur = z;
                break;
            }
            let a = relu(&z);
            let (d, mask) = match dropout_seed {
                Some(s) => dropout(
                    &a,
                    self.config.dropout,
                    derive_seed_tagged(s, &format!("head.{i}.dropout")),
                ),
                None => (a.clone(), vec![T::one(); a.len()]),
            };
            hidden.push(a);
            masks.push(mask);
            cur = d;
        }
        if !cur.is_finite() {
            return Err(Error::Numeric {
                layer: "head".into(),
            });
        }
        Ok((
            cur,
            ForwardTrace {
                backbone,
                cbam,
                attended,
                head_inputs,
                hidden,
                masks,
            },
        ))
    }

    /// Evaluation-mode logits, shape (batch, classes, 1, 1).
    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(self.forward_traced(x, None)?.0)
    }

    /// Accumulate parameter gradients for `d_logits`; returns dL/dx when asked.
    pub fn backward(
        &mut self,
        trace: &ForwardTrace<T>,
        d_logits: &FeatureMap<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let mut d = d_logits.clone();
        for (i, layer) in self.head.iter_mut().enumerate().rev() {
            if i < trace.hidden.len() {
                for (g, &m) in d.data.iter_mut().zip(&trace.masks[i]) {
                    *g *= m;
                }
                d = relu_backward(&trace.hidden[i], &d);
            }
            d = layer.backward(&trace.head_inputs[i], &d);
        }
        let mut d_feat = global_avg_pool_backward(&trace.attended, &d);
        if let (Some(block), Some(t)) = (self.cbam.as_mut(), trace.cbam.as_ref()) {
            d_feat = block.backward(t, &d_feat);
        }
        self.backbone
            .backward(&trace.backbone, &d_feat, need_input_grad)
    }

    /// Hex SHA-256 over every parameter's name, shape and values (as
    /// little-endian f64).
    pub fn param_checksum(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |p| {
            h.update(p.name.as_bytes());
            for &d in &p.shape {
                h.update((d as u64).to_le_bytes());
            }
            for v in &p.value {
                h.update(v.as_f64().to_le_bytes());
            }
        });
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn snapshot(&self) -> Vec<Vec<T>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p.value.clone()));
        out
    }

    pub fn restore(&mut self, snapshot: &[Vec<T>]) {
        let mut it = snapshot.iter();
        self.visit_mut(&mut |p| {
            p.value
                .clone_from(it.next().expect("snapshot from this model"))
        });
    }
}

impl Model<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        self.visit(&mut |p| {
            let bytes = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
            buffers.push((p.name.clone(), p.shape.clone(), bytes));
        });
        let views = buffers
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert(
            "model_config".to_string(),
            serde_json::to_string(&self.config)?,
        );
        meta.insert("class_count".to_string(), self.class_count.to_string());
        meta.insert("seed".to_string(), self.seed.to_string());
        let bytes = safetensors::serialize(views, &Some(meta))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let bad =
            |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(bad)?;
        let meta = header
            .metadata()
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("missing metadata header".into()))?;
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{k}` in header")))
        };
        let config: ModelConfig = serde_json::from_str(field("model_config")?)?;
        let parse = |k: &str| -> Result<u64> {
            field(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("`{k}` is not an integer")))
        };
        let class_count = parse("class_count")? as usize;
        let seed = parse("seed")?;
        let mut model = build_model(&config, class_count, seed)?;
        let tensors = SafeTensors::deserialize(&bytes).map_err(bad)?;
        let mut failure = None;
        model.visit_mut(&mut |p| {
            if failure.is_some() {
                return;
            }
            match tensors.tensor(&p.name) {
                Ok(t) if t.dtype() == Dtype::F32 && t.shape() == p.shape.as_slice() => {
                    for (v, chunk) in p.value.iter_mut().zip(t.data().chunks_exact(4)) {
                        *v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
                    }
                }
                Ok(_) => {
                    failure = Some(format!("tensor `{}` has the wrong dtype or shape", p.name))
                }
                Err(_) => failure = Some(format!("tensor `{}` missing", p.name)),
            }
        });
        match failure {
            Some(msg) => Err(Error::Checkpoint(msg)),
            None => Ok(model),
        }
    }
}

impl<T: Real> Parameterized<T> for Model<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.backbone.visit(f);
        if let Some(c) = &self.cbam {
            c.visit(f);
        }
        self.head.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.backbone.visit_mut(f);
        if let Some(c) = &mut self.cbam {
            c.visit_mut(f);
        }
        self.head.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

pub fn forward<T: Real>(model: &Model<T>, batch: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    model.forward(batch)
}

pub fn count_params<T: Real>(model: &Model<T>) -> usize {
    model.param_count()
}
