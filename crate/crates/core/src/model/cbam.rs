//! Convolutional block attention: channel gating from pooled descriptors
//! through a shared MLP, then spatial gating from a convolution over the
//! channel-wise mean and max maps.
//!
//! Parameter convention: both MLP layers and the spatial convolution carry a
//! bias, so the block holds `C*C/r + C/r + C/r*C + C + 2*k*k + 1` scalars.

use serde::{Deserialize, Serialize};

use super::layers::{
    global_avg_pool, global_max_pool, relu, relu_backward, sigmoid, Conv2d, Init, Linear, Param,
    Parameterized,
};
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CbamConfig {
    pub reduction_ratio: usize,
    pub kernel_size: usize,
}

impl Default for CbamConfig {
    fn default() -> Self {
        Self {
            reduction_ratio: 16,
            kernel_size: 7,
        }
    }
}

impl CbamConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.reduction_ratio == 0
            || !channels.is_multiple_of(self.reduction_ratio)
            || channels < self.reduction_ratio
        {
            return Err(Error::Config(format!(
                "{channels} channels are not divisible by reduction ratio {}",
                self.reduction_ratio
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "spatial kernel {} must be odd",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn hidden_width(&self, channels: usize) -> usize {
        channels / self.reduction_ratio
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cbam<T = f32> {
    pub config: CbamConfig,
    pub channels: usize,
    pub mlp_in: Linear<T>,
    pub mlp_out: Linear<T>,
    pub spatial: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct ChannelTrace<T> {
    avg: FeatureMap<T>,
    max: FeatureMap<T>,
    argmax: Vec<usize>,
    hidden_avg: FeatureMap<T>,
    hidden_max: FeatureMap<T>,
    gate: FeatureMap<T>,
}

#[derive(Debug, Clone)]
pub struct SpatialTrace<T> {
    pooled: FeatureMap<T>,
    argmax: Vec<usize>,
    gate: FeatureMap<T>,
}

#[derive(Debug, Clone)]
pub struct CbamTrace<T> {
    input: FeatureMap<T>,
    channel: ChannelTrace<T>,
    refined: FeatureMap<T>,
    spatial: SpatialTrace<T>,
}

impl<T: Real> Cbam<T> {
    pub fn new(name: &str, channels: usize, config: CbamConfig, seed: u64) -> Result<Self> {
        config.validate(channels)?;
        let hidden = config.hidden_width(channels);
        let k = config.kernel_size;
        Ok(Self {
            config,
            channels,
            mlp_in: Linear::new(&format!("{name}.mlp.0"), channels, hidden, Init::Relu, seed),
            mlp_out: Linear::new(
                &format!("{name}.mlp.2"),
                hidden,
                channels,
                Init::Linear,
                seed,
            ),
            spatial: Conv2d::new(
                &format!("{name}.spatial"),
                2,
                1,
                k,
                1,
                k / 2,
                Init::Linear,
                seed,
            ),
        })
    }

    fn check_input(&self, f: &FeatureMap<T>) -> Result<()> {
        if f.channels != self.channels {
            return Err(Error::Config(format!(
                "attention block built for {} channels, got {}",
                self.channels, f.channels
            )));
        }
        Ok(())
    }

    fn shared_mlp(&self, v: &FeatureMap<T>) -> (FeatureMap<T>, FeatureMap<T>) {
        let hidden = relu(&self.mlp_in.forward(v));
        let out = self.mlp_out.forward(&hidden);
        (hidden, out)
    }

    pub fn channel_attention_traced(
        &self,
        f: &FeatureMap<T>,
    ) -> Result<(FeatureMap<T>, ChannelTrace<T>)> {
        self.check_input(f)?;
        let avg = global_avg_pool(f);
        let (max, argmax) = global_max_pool(f);
        let (hidden_avg, out_avg) = self.shared_mlp(&avg);
        let (hidden_max, out_max) = self.shared_mlp(&max);
        let mut gate = FeatureMap::zeros(f.batch, f.channels, 1, 1);
        for ((g, a), m) in gate.data.iter_mut().zip(&out_avg.data).zip(&out_max.data) {
            *g = sigmoid(*a + *m);
        }
        let trace = ChannelTrace {
            avg,
            max,
            argmax,
            hidden_avg,
            hidden_max,
            gate: gate.clone(),
        };
        Ok((gate, trace))
    }

    /// Gate of shape (batch, channels, 1, 1), entries in (0, 1).
    pub fn channel_attention(&self, f: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(self.channel_attention_traced(f)?.0)
    }

    /// Gradient of the channel gate with respect to `f`; accumulates MLP grads.
    pub fn channel_attention_backward(
        &mut self,
        f: &FeatureMap<T>,
        trace: &ChannelTrace<T>,
        d_gate: &FeatureMap<T>,
    ) -> FeatureMap<T> {
        let mut d_logit = d_gate.clone();
        for (d, g) in d_logit.data.iter_mut().zip(&trace.gate.data) {
            *d *= *g * (T::one() - *g);
        }
        let d_hidden_avg = relu_backward(
            &trace.hidden_avg,
            &self.mlp_out.backward(&trace.hidden_avg, &d_logit),
        );
        let d_avg = self.mlp_in.backward(&trace.avg, &d_hidden_avg);
        let d_hidden_max = relu_backward(
            &trace.hidden_max,
            &self.mlp_out.backward(&trace.hidden_max, &d_logit),
        );
        let d_max = self.mlp_in.backward(&trace.max, &d_hidden_max);

        let plane = f.plane();
        let inv = T::one() / T::lit(plane as f64);
        let mut df = FeatureMap::zeros(f.batch, f.channels, f.height, f.width);
        for (i, chunk) in df.data.chunks_mut(plane).enumerate() {
            let g = d_avg.data[i] * inv;
            chunk.iter_mut().for_each(|v| *v = g);
            chunk[trace.argmax[i]] += d_max.data[i];
        }
        df
    }

    pub fn spatial_attention_traced(
        &self,
        f: &FeatureMap<T>,
    ) -> Result<(FeatureMap<T>, SpatialTrace<T>)> {
        let (n, c, plane) = (f.batch, f.channels, f.plane());
        let mut pooled = FeatureMap::zeros(n, 2, f.height, f.width);
        let mut argmax = vec![0; n * plane];
        let inv = T::one() / T::lit(c as f64);
        for b in 0..n {
            let item = f.item(b);
            let out = pooled.item_mut(b);
            for p in 0..plane {
                let mut sum = T::zero();
                let mut best = (0, T::neg_infinity());
                for ch in 0..c {
                    let v = item[ch * plane + p];
                    sum += v;
                    if v > best.1 {
                        best = (ch, v);
                    }
                }
                out[p] = sum * inv;
                out[plane + p] = best.1;
                argmax[b * plane + p] = best.0;
            }
        }
        let gate = self.spatial.forward(&pooled).map(sigmoid);
        Ok((
            gate.clone(),
            SpatialTrace {
                pooled,
                argmax,
                gate,
            },
        ))
    }

    /// Gate of shape (batch, 1, height, width), entries in (0, 1).
    pub fn spatial_attention(&self, f: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(self.spatial_attention_traced(f)?.0)
    }

    pub fn spatial_attention_backward(
        &mut self,
        f: &FeatureMap<T>,
        trace: &SpatialTrace<T>,
        d_gate: &FeatureMap<T>,
    ) -> FeatureMap<T> {
        let mut d_logit = d_gate.clone();
        for (d, g) in d_logit.data.iter_mut().zip(&trace.gate.data) {
            *d *= *g * (T::one() - *g);
        }
        let d_pooled = self
            .spatial
            .backward(&trace.pooled, &d_logit, true)
            .expect("input gradient requested");
        let (c, plane) = (f.channels, f.plane());
        let inv = T::one() / T::lit(c as f64);
        let mut df = FeatureMap::zeros(f.batch, c, f.height, f.width);
        for b in 0..f.batch {
            let dp = d_pooled.item(b);
            let out = df.item_mut(b);
            for p in 0..plane {
                let g = dp[p] * inv;
                for ch in 0..c {
                    out[ch * plane + p] = g;
                }
                out[trace.argmax[b * plane + p] * plane + p] += dp[plane + p];
            }
        }
        df
    }

    pub fn forward_traced(&self, f: &FeatureMap<T>) -> Result<(FeatureMap<T>, CbamTrace<T>)> {
        let (cgate, channel) = self.channel_attention_traced(f)?;
        let plane = f.plane();
        let mut refined = f.clone();
        for (chunk, &g) in refined.data.chunks_mut(plane).zip(&cgate.data) {
            chunk.iter_mut().for_each(|v| *v *= g);
        }
        let (sgate, spatial) = self.spatial_attention_traced(&refined)?;
        let mut out = refined.clone();
        for b in 0..f.batch {
            let gate = sgate.item(b);
            for chunk in out.item_mut(b).chunks_mut(plane) {
                for (v, &g) in chunk.iter_mut().zip(gate) {
                    *v *= g;
                }
            }
        }
        Ok((
            out,
            CbamTrace {
                input: f.clone(),
                channel,
                refined,
                spatial,
            },
        ))
    }

    /// `f ⊗ channel_gate`, then `⊗ spatial_gate`. Shape preserving.
    pub fn apply(&self, f: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(self.forward_traced(f)?.0)
    }

    pub fn backward(&mut self, trace: &CbamTrace<T>, d_out: &FeatureMap<T>) -> FeatureMap<T> {
        let f = &trace.input;
        let refined = &trace.refined;
        let (n, c, plane) = (f.batch, f.channels, f.plane());

        // out = refined * sgate
        let sgate = &trace.spatial.gate;
        let mut d_refined = d_out.clone();
        let mut d_sgate = FeatureMap::zeros(n, 1, f.height, f.width);
        for b in 0..n {
            let g = sgate.item(b);
            let ds = d_sgate.item_mut(b);
            let r = refined.item(b);
            let dr = d_refined.item_mut(b);
            for ch in 0..c {
                for p in 0..plane {
                    let i = ch * plane + p;
                    ds[p] += dr[i] * r[i];
                    dr[i] *= g[p];
                }
            }
        }
        let via_spatial = self.spatial_attention_backward(refined, &trace.spatial, &d_sgate);
        d_refined.add_assign(&via_spatial);

        // refined = f * cgate
        let cgate = &trace.channel.gate;
        let mut df = d_refined.clone();
        let mut d_cgate = FeatureMap::zeros(n, c, 1, 1);
        for (i, (chunk, fx)) in df
            .data
            .chunks_mut(plane)
            .zip(f.data.chunks(plane))
            .enumerate()
        {
            d_cgate.data[i] = chunk.iter().zip(fx).map(|(&d, &x)| d * x).sum();
            chunk.iter_mut().for_each(|v| *v *= cgate.data[i]);
        }
        let via_channel = self.channel_attention_backward(f, &trace.channel, &d_cgate);
        df.add_assign(&via_channel);
        df
    }
}

impl<T: Real> Parameterized<T> for Cbam<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.mlp_in.visit(f);
        self.mlp_out.visit(f);
        self.spatial.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.mlp_in.visit_mut(f);
        self.mlp_out.visit_mut(f);
        self.spatial.visit_mut(f);
    }
}

/// Free-function form of the full block.
pub fn apply_cbam<T: Real>(f: &FeatureMap<T>, block: &Cbam<T>) -> Result<FeatureMap<T>> {
    block.apply(f)
}

pub fn channel_attention<T: Real>(f: &FeatureMap<T>, block: &Cbam<T>) -> Result<FeatureMap<T>> {
    block.channel_attention(f)
}

pub fn spatial_attention<T: Real>(f: &FeatureMap<T>, block: &Cbam<T>) -> Result<FeatureMap<T>> {
    block.spatial_attention(f)
}
