//! Desk-scale convolutional backbones.
//!
//! `dense-small`: stem, then per stage a dense block (each layer's output is
//! concatenated onto its input) followed by a 1x1 transition; transitions
//! between stages halve the resolution.
//!
//! `residual-small`: stem, then per stage a run of basic blocks
//! `relu(conv(relu(conv(x))) + skip(x))`; the first block of every stage
//! after the first downsamples by stride 2 and projects the skip with 1x1.
//!
//! Neither family uses batch normalization.

use serde::{Deserialize, Serialize};

use super::layers::{
    avg_pool2, avg_pool2_backward, relu, relu_backward, Conv2d, Init, Param, Parameterized,
};
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneFamily {
    #[serde(rename = "dense-small")]
    DenseSmall,
    #[serde(rename = "residual-small")]
    ResidualSmall,
}

impl BackboneFamily {
    pub fn name(self) -> &'static str {
        match self {
            BackboneFamily::DenseSmall => "dense-small",
            BackboneFamily::ResidualSmall => "residual-small",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: BackboneFamily,
    pub stem_channels: usize,
    /// Dense: transition output width per stage. Residual: block width per stage.
    pub stage_widths: Vec<usize>,
    /// Dense: layers per dense block. Residual: basic blocks per stage.
    pub blocks_per_stage: Vec<usize>,
    /// Channels added by each dense layer; ignored by the residual family.
    pub growth_rate: usize,
    pub out_channels: usize,
}

impl BackboneSpec {
    pub fn dense_small() -> Self {
        Self {
            family: BackboneFamily::DenseSmall,
            stem_channels: 16,
            stage_widths: vec![32, 64],
            blocks_per_stage: vec![3, 4],
            growth_rate: 12,
            out_channels: 64,
        }
    }

    pub fn residual_small() -> Self {
        Self {
            family: BackboneFamily::ResidualSmall,
            stem_channels: 16,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: vec![1, 1, 1],
            growth_rate: 0,
            out_channels: 64,
        }
    }

    pub fn of_family(family: BackboneFamily) -> Self {
        match family {
            BackboneFamily::DenseSmall => Self::dense_small(),
            BackboneFamily::ResidualSmall => Self::residual_small(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.stage_widths.is_empty() || self.stage_widths.contains(&0)
        {
            return Err(Error::Config(
                "backbone widths must be positive and non-empty".into(),
            ));
        }
        if self.stage_widths.len() != self.blocks_per_stage.len() {
            return Err(Error::Config(format!(
                "{} stage widths but {} block counts",
                self.stage_widths.len(),
                self.blocks_per_stage.len()
            )));
        }
        if self.family == BackboneFamily::DenseSmall && self.growth_rate == 0 {
            return Err(Error::Config(
                "dense backbone needs a positive growth rate".into(),
            ));
        }
        if self.family == BackboneFamily::ResidualSmall && self.blocks_per_stage.contains(&0) {
            return Err(Error::Config(
                "every residual stage needs at least one block".into(),
            ));
        }
        let last = *self.stage_widths.last().expect("non-empty");
        if last != self.out_channels {
            return Err(Error::Config(format!(
                "declared {} output channels but the last stage produces {last}",
                self.out_channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DenseStage<T> {
    layers: Vec<Conv2d<T>>,
    transition: Conv2d<T>,
    pool: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct ResidualBlock<T> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    projection: Option<Conv2d<T>>,
}

#[derive(Debug, Clone, PartialEq)]
enum Body<T> {
    Dense(Vec<DenseStage<T>>),
    Residual(Vec<ResidualBlock<T>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T = f32> {
    pub spec: BackboneSpec,
    stem: Conv2d<T>,
    body: Body<T>,
}

#[derive(Debug, Clone)]
struct DenseStageTrace<T> {
    layer_inputs: Vec<FeatureMap<T>>,
    layer_outputs: Vec<FeatureMap<T>>,
    block_out: FeatureMap<T>,
    transition_out: FeatureMap<T>,
}

#[derive(Debug, Clone)]
struct ResidualTrace<T> {
    input: FeatureMap<T>,
    hidden: FeatureMap<T>,
    output: FeatureMap<T>,
}

#[derive(Debug, Clone)]
enum BodyTrace<T> {
    Dense(Vec<DenseStageTrace<T>>),
    Residual(Vec<ResidualTrace<T>>),
}

#[derive(Debug, Clone)]
pub struct BackboneTrace<T> {
    input: FeatureMap<T>,
    stem_out: FeatureMap<T>,
    body: BodyTrace<T>,
}

fn finite<T: Real>(x: FeatureMap<T>, layer: impl FnOnce() -> String) -> Result<FeatureMap<T>> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Numeric { layer: layer() })
    }
}

impl<T: Real> Backbone<T> {
    pub fn new(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let stem = Conv2d::new(
            "backbone.stem",
            3,
            spec.stem_channels,
            3,
            2,
            1,
            Init::Relu,
            seed,
        );
        let mut ch = spec.stem_channels;
        let stages = spec.stage_widths.len();
        let body = match spec.family {
            BackboneFamily::DenseSmall => {
                let mut out = Vec::with_capacity(stages);
                for (s, (&width, &layers)) in spec
                    .stage_widths
                    .iter()
                    .zip(&spec.blocks_per_stage)
                    .enumerate()
                {
                    let mut convs = Vec::with_capacity(layers);
                    for l in 0..layers {
                        let name = format!("backbone.dense{s}.layer{l}");
                        convs.push(Conv2d::new(
                            &name,
                            ch,
                            spec.growth_rate,
                            3,
                            1,
                            1,
                            Init::Relu,
                            seed,
                        ));
                        ch += spec.growth_rate;
                    }
                    let name = format!("backbone.dense{s}.transition");
                    let transition = Conv2d::new(&name, ch, width, 1, 1, 0, Init::Relu, seed);
                    ch = width;
                    out.push(DenseStage {
                        layers: convs,
                        transition,
                        pool: s + 1 < stages,
                    });
                }
                Body::Dense(out)
            }
            BackboneFamily::ResidualSmall => {
                let mut out = Vec::new();
                for (s, (&width, &blocks)) in spec
                    .stage_widths
                    .iter()
                    .zip(&spec.blocks_per_stage)
                    .enumerate()
                {
                    for b in 0..blocks {
                        let stride = if s > 0 && b == 0 { 2 } else { 1 };
                        let name = format!("backbone.stage{s}.block{b}");
                        let projection = (stride != 1 || ch != width).then(|| {
                            Conv2d::new(
                                &format!("{name}.skip"),
                                ch,
                                width,
                                1,
                                stride,
                                0,
                                Init::Linear,
                                seed,
                            )
                        });
                        out.push(ResidualBlock {
                            conv1: Conv2d::new(
                                &format!("{name}.conv1"),
                                ch,
                                width,
                                3,
                                stride,
                                1,
                                Init::Relu,
                                seed,
                            ),
                            conv2: Conv2d::new(
                                &format!("{name}.conv2"),
                                width,
                                width,
                                3,
                                1,
                                1,
                                Init::Linear,
                                seed,
                            ),
                            projection,
                        });
                        ch = width;
                    }
                }
                Body::Residual(out)
            }
        };
        Ok(Self {
            spec: spec.clone(),
            stem,
            body,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.spec.out_channels
    }

    pub fn forward_traced(&self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, BackboneTrace<T>)> {
        if x.channels != 3 {
            return Err(Error::Config(format!(
                "expected 3 input channels, got {}",
                x.channels
            )));
        }
        let stem_out = finite(relu(&self.stem.forward(x)), || "backbone.stem".into())?;
        let mut cur = avg_pool2(&stem_out);
        let body = match &self.body {
            Body::Dense(stages) => {
                let mut traces = Vec::with_capacity(stages.len());
                for (s, stage) in stages.iter().enumerate() {
                    let mut pieces = vec![cur.clone()];
                    let mut layer_inputs = Vec::with_capacity(stage.layers.len());
                    let mut layer_outputs = Vec::with_capacity(stage.layers.len());
                    for (l, conv) in stage.layers.iter().enumerate() {
                        let input =
                            FeatureMap::concat_channels(&pieces.iter().collect::<Vec<_>>())?;
                        let y = finite(relu(&conv.forward(&input)), || {
                            format!("backbone.dense{s}.layer{l}")
                        })?;
                        pieces.push(y.clone());
                        layer_inputs.push(input);
                        layer_outputs.push(y);
                    }
                    let block_out =
                        FeatureMap::concat_channels(&pieces.iter().collect::<Vec<_>>())?;
                    let transition_out =
                        finite(relu(&stage.transition.forward(&block_out)), || {
                            format!("backbone.dense{s}.transition")
                        })?;
                    cur = if stage.pool {
                        avg_pool2(&transition_out)
                    } else {
                        transition_out.clone()
                    };
                    traces.push(DenseStageTrace {
                        layer_inputs,
                        layer_outputs,
                        block_out,
                        transition_out,
                    });
                }
                BodyTrace::Dense(traces)
            }
            Body::Residual(blocks) => {
                let mut traces = Vec::with_capacity(blocks.len());
                for (i, block) in blocks.iter().enumerate() {
                    let hidden = relu(&block.conv1.forward(&cur));
                    let mut sum = block.conv2.forward(&hidden);
                    match &block.projection {
                        Some(p) => sum.add_assign(&p.forward(&cur)),
                        None => sum.add_assign(&cur),
                    }
                    let output = finite(relu(&sum), || format!("backbone.block{i}"))?;
                    traces.push(ResidualTrace {
                        input: cur,
                        hidden,
                        output: output.clone(),
                    });
                    cur = output;
                }
                BodyTrace::Residual(traces)
            }
        };
        Ok((
            cur,
            BackboneTrace {
                input: x.clone(),
                stem_out,
                body,
            },
        ))
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(self.forward_traced(x)?.0)
    }

    /// Accumulate parameter gradients. The input gradient is only formed
    /// when `need_input_grad` is set.
    pub fn backward(
        &mut self,
        trace: &BackboneTrace<T>,
        d_out: &FeatureMap<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let mut d = d_out.clone();
        match (&mut self.body, &trace.body) {
            (Body::Dense(stages), BodyTrace::Dense(traces)) => {
                for (stage, t) in stages.iter_mut().zip(traces).rev() {
                    let d_trans = if stage.pool {
                        avg_pool2_backward(&t.transition_out, &d)
                    } else {
                        d
                    };
                    let dz = relu_backward(&t.transition_out, &d_trans);
                    let d_block = stage
                        .transition
                        .backward(&t.block_out, &dz, true)
                        .expect("input gradient requested");
                    let in_ch = t.block_out.channels - stage.layers.len() * self.spec.growth_rate;
                    let mut widths = vec![in_ch];
                    widths
                        .extend(std::iter::repeat_n(self.spec.growth_rate, stage.layers.len()));
                    let mut grads = d_block.split_channels(&widths);
                    for (l, conv) in stage.layers.iter_mut().enumerate().rev() {
                        let dz = relu_backward(&t.layer_outputs[l], &grads[l + 1]);
                        let d_in = conv
                            .backward(&t.layer_inputs[l], &dz, true)
                            .expect("input gradient requested");
                        for (g, part) in grads.iter_mut().zip(d_in.split_channels(&widths[..=l])) {
                            g.add_assign(&part);
                        }
                    }
                    d = grads.swap_remove(0);
                }
            }
            (Body::Residual(blocks), BodyTrace::Residual(traces)) => {
                for (block, t) in blocks.iter_mut().zip(traces).rev() {
                    let dsum = relu_backward(&t.output, &d);
                    let d_hidden = block
                        .conv2
                        .backward(&t.hidden, &dsum, true)
                        .expect("input gradient requested");
                    let dz1 = relu_backward(&t.hidden, &d_hidden);
                    let mut dx = block
                        .conv1
                        .backward(&t.input, &dz1, true)
                        .expect("input gradient requested");
                    match &mut block.projection {
                        Some(p) => dx.add_assign(
                            &p.backward(&t.input, &dsum, true)
                                .expect("input gradient requested"),
                        ),
                        None => dx.add_assign(&dsum),
                    }
                    d = dx;
                }
            }
            _ => unreachable!("trace produced by a different backbone"),
        }
        let d_stem = relu_backward(&trace.stem_out, &avg_pool2_backward(&trace.stem_out, &d));
        self.stem.backward(&trace.input, &d_stem, need_input_grad)
    }
}

impl<T: Real> Parameterized<T> for Backbone<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.stem.visit(f);
        match &self.body {
            Body::Dense(stages) => {
                for s in stages {
                    s.layers.iter().for_each(|c| c.visit(f));
                    s.transition.visit(f);
                }
            }
            Body::Residual(blocks) => {
                for b in blocks {
                    b.conv1.visit(f);
                    b.conv2.visit(f);
                    if let Some(p) = &b.projection {
                        p.visit(f);
                    }
                }
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit_mut(f);
        match &mut self.body {
            Body::Dense(stages) => {
                for s in stages {
                    s.layers.iter_mut().for_each(|c| c.visit_mut(f));
                    s.transition.visit_mut(f);
                }
            }
            Body::Residual(blocks) => {
                for b in blocks {
                    b.conv1.visit_mut(f);
                    b.conv2.visit_mut(f);
                    if let Some(p) = &mut b.projection {
                        p.visit_mut(f);
                    }
                }
            }
        }
    }
}
