use serde::{Deserialize, Serialize};

use super::layers::{relu_backward, relu_inplace, BatchNorm1d, Conv1d, ConvSpec, Linear, MaxPool1d, PoolToVector};
use super::tensor::{join, Module, Param, Tensor};
use crate::error::{invalid, Error, Result};

/// Channels produced per link by the shallow encoder.
pub const CHANNELS_PER_LINK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub links: usize,
    pub subcarriers: usize,
    pub packets: usize,
}

impl Geometry {
    pub fn new(links: usize, subcarriers: usize, packets: usize) -> Self {
        Geometry {
            links,
            subcarriers,
            packets,
        }
    }

    pub fn channels(&self) -> usize {
        CHANNELS_PER_LINK * self.links
    }

    pub fn input_channels(&self) -> usize {
        self.links * self.subcarriers
    }

    pub fn validate(&self) -> Result<()> {
        if self.links == 0 || self.subcarriers == 0 || self.packets == 0 {
            return Err(invalid(format!("geometry must be positive: {self:?}")));
        }
        if self.packets % 4 != 0 {
            return Err(invalid(format!("P = {} is not divisible by 4", self.packets)));
        }
        Ok(())
    }
}

impl std::fmt::Display for Geometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.links, self.subcarriers, self.packets)
    }
}

/// Analytic cost of one block at a given input length, per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Cost {
    pub params: usize,
    pub multiadds: u64,
    pub out_len: usize,
}

fn conv_bn_cost(spec: &ConvSpec, len: usize) -> Result<Cost> {
    Ok(Cost {
        params: spec.param_count() + BatchNorm1d::param_count(spec.out_channels),
        multiadds: spec.multiadds(len)?,
        out_len: spec.out_len(len)?,
    })
}

#[derive(Debug, Clone)]
pub struct ShallowEncoder {
    pub geometry: Geometry,
    pub conv: Conv1d,
    pub bn: BatchNorm1d,
    pool: MaxPool1d,
    relu_out: Option<Tensor>,
}

impl ShallowEncoder {
    pub fn new(geometry: Geometry, seed: u64, name: &str) -> Result<Self> {
        let spec = ConvSpec::new(geometry.input_channels(), geometry.channels(), 7, 2, 3).groups(geometry.links);
        Ok(ShallowEncoder {
            geometry,
            conv: Conv1d::new(spec, seed, &join(name, "conv"))?,
            bn: BatchNorm1d::new(geometry.channels()),
            pool: MaxPool1d::default(),
            relu_out: None,
        })
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let g = &self.geometry;
        if x.channels() != g.input_channels() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} = L·S input channels", g.input_channels()),
                actual: format!("{}", x.channels()),
            });
        }
        if x.len() % 4 != 0 {
            return Err(invalid(format!("P = {} is not divisible by 4", x.len())));
        }
        Ok(())
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut h = self.bn.forward_eval(&self.conv.forward_eval(x)?);
        relu_inplace(&mut h);
        Ok(self.pool.forward_eval(&h))
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let c = self.conv.forward_train(x)?;
        let mut h = self.bn.forward_train(&c);
        relu_inplace(&mut h);
        let y = self.pool.forward_train(&h);
        self.relu_out = Some(h);
        Ok(y)
    }

    /// The encoder is always the first stage, so no input gradient is formed.
    pub fn backward(&mut self, dy: &Tensor) {
        let mut d = self.pool.backward(dy);
        relu_backward(&mut d, &self.relu_out.take().expect("forward_train first"));
        let d = self.bn.backward(&d);
        self.conv.backward(&d, false);
    }

    pub fn cost(&self, len: usize) -> Result<Cost> {
        let c = conv_bn_cost(&self.conv.spec, len)?;
        Ok(Cost {
            out_len: MaxPool1d::out_len(c.out_len),
            ..c
        })
    }
}

impl Module for ShallowEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Two 3-tap convolutions with a skip connection; ResNet v1 ordering.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub conv1: Conv1d,
    pub bn1: BatchNorm1d,
    pub conv2: Conv1d,
    pub bn2: BatchNorm1d,
    /// 1×1 strided projection on downsampling blocks.
    pub proj: Option<(Conv1d, BatchNorm1d)>,
    cache: Option<(Tensor, Tensor)>,
}

impl BasicBlock {
    pub fn new(channels: usize, stride: usize, seed: u64, name: &str) -> Result<Self> {
        let proj = if stride != 1 {
            Some((
                Conv1d::new(ConvSpec::new(channels, channels, 1, stride, 0), seed, &join(name, "proj.conv"))?,
                BatchNorm1d::new(channels),
            ))
        } else {
            None
        };
        Ok(BasicBlock {
            conv1: Conv1d::new(ConvSpec::new(channels, channels, 3, stride, 1), seed, &join(name, "conv1"))?,
            bn1: BatchNorm1d::new(channels),
            conv2: Conv1d::new(ConvSpec::new(channels, channels, 3, 1, 1), seed, &join(name, "conv2"))?,
            bn2: BatchNorm1d::new(channels),
            proj,
            cache: None,
        })
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.bn1.forward_eval(&self.conv1.forward_eval(x)?);
        relu_inplace(&mut h);
        let mut out = self.bn2.forward_eval(&self.conv2.forward_eval(&h)?);
        match &self.proj {
            Some((c, bn)) => out.add_assign(&bn.forward_eval(&c.forward_eval(x)?)),
            None => out.add_assign(x),
        }
        relu_inplace(&mut out);
        Ok(out)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let c1 = self.conv1.forward_train(x)?;
        let mut h = self.bn1.forward_train(&c1);
        relu_inplace(&mut h);
        let c2 = self.conv2.forward_train(&h)?;
        let mut out = self.bn2.forward_train(&c2);
        match &mut self.proj {
            Some((c, bn)) => {
                let p = c.forward_train(x)?;
                out.add_assign(&bn.forward_train(&p));
            }
            None => out.add_assign(x),
        }
        relu_inplace(&mut out);
        self.cache = Some((h, out.clone()));
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (h, out) = self.cache.take().expect("forward_train first");
        let mut d = dy.clone();
        relu_backward(&mut d, &out);
        let d2 = self.bn2.backward(&d);
        let mut dh = self.conv2.backward(&d2, true).unwrap();
        relu_backward(&mut dh, &h);
        let d1 = self.bn1.backward(&dh);
        let mut dx = self.conv1.backward(&d1, true).unwrap();
        match &mut self.proj {
            Some((c, bn)) => {
                let dp = bn.backward(&d);
                dx.add_assign(&c.backward(&dp, true).unwrap());
            }
            None => dx.add_assign(&d),
        }
        dx
    }

    pub fn cost(&self, len: usize) -> Result<Cost> {
        let a = conv_bn_cost(&self.conv1.spec, len)?;
        let b = conv_bn_cost(&self.conv2.spec, a.out_len)?;
        let p = match &self.proj {
            Some((c, _)) => conv_bn_cost(&c.spec, len)?,
            None => Cost::default(),
        };
        Ok(Cost {
            params: a.params + b.params + p.params,
            multiadds: a.multiadds + b.multiadds + p.multiadds,
            out_len: b.out_len,
        })
    }
}

impl Module for BasicBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some((c, bn)) = &self.proj {
            c.visit(&join(prefix, "proj.conv"), f);
            bn.visit(&join(prefix, "proj.bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        if let Some((c, bn)) = &mut self.proj {
            c.visit_mut(&join(prefix, "proj.conv"), f);
            bn.visit_mut(&join(prefix, "proj.bn"), f);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DepthProfile {
    /// Single-task trunk: five blocks, output length P/16.
    Sts,
    /// Shared multi-task trunk: three blocks, output length P/8.
    Mts,
}

impl DepthProfile {
    /// Stride of the first convolution of each block.
    pub fn strides(self) -> &'static [usize] {
        match self {
            DepthProfile::Sts => &[1, 2, 1, 2, 1],
            DepthProfile::Mts => &[1, 2, 1],
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeepEncoder {
    pub profile: DepthProfile,
    pub blocks: Vec<BasicBlock>,
}

impl DeepEncoder {
    pub fn new(channels: usize, profile: DepthProfile, seed: u64, name: &str) -> Result<Self> {
        let blocks = profile
            .strides()
            .iter()
            .enumerate()
            .map(|(i, &s)| BasicBlock::new(channels, s, seed, &join(name, &format!("block{i}"))))
            .collect::<Result<_>>()?;
        Ok(DeepEncoder { profile, blocks })
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.blocks[0].forward_eval(x)?;
        for b in &self.blocks[1..] {
            h = b.forward_eval(&h)?;
        }
        Ok(h)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.blocks[0].forward_train(x)?;
        for b in &mut self.blocks[1..] {
            h = b.forward_train(&h)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut d = dy.clone();
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d);
        }
        d
    }

    pub fn cost(&self, len: usize) -> Result<Cost> {
        let mut total = Cost {
            out_len: len,
            ..Cost::default()
        };
        for b in &self.blocks {
            let c = b.cost(total.out_len)?;
            total.params += c.params;
            total.multiadds += c.multiadds;
            total.out_len = c.out_len;
        }
        Ok(total)
    }
}

impl Module for DeepEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

/// Task-specific compensation branch off the shallow features.
#[derive(Debug, Clone)]
pub struct ResidualAdaptor {
    pub conv: Conv1d,
    pub bn: BatchNorm1d,
    out: Option<Tensor>,
}

impl ResidualAdaptor {
    pub fn new(channels: usize, seed: u64, name: &str) -> Result<Self> {
        Ok(ResidualAdaptor {
            conv: Conv1d::new(ConvSpec::new(channels, channels, 3, 2, 1), seed, &join(name, "conv"))?,
            bn: BatchNorm1d::new(channels),
            out: None,
        })
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.bn.forward_eval(&self.conv.forward_eval(x)?);
        relu_inplace(&mut h);
        Ok(h)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let c = self.conv.forward_train(x)?;
        let mut h = self.bn.forward_train(&c);
        relu_inplace(&mut h);
        self.out = Some(h.clone());
        Ok(h)
    }

    pub fn backward(&mut self, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let mut d = dy.clone();
        relu_backward(&mut d, &self.out.take().expect("forward_train first"));
        let d = self.bn.backward(&d);
        self.conv.backward(&d, need_dx)
    }

    pub fn cost(&self, len: usize) -> Result<Cost> {
        conv_bn_cost(&self.conv.spec, len)
    }
}

impl Module for ResidualAdaptor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Unpadded 3-tap convolution to `2C` channels, global pooling, linear head.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub num_classes: usize,
    pub conv: Conv1d,
    pub bn: BatchNorm1d,
    pool: PoolToVector,
    pub linear: Linear,
    relu_out: Option<Tensor>,
}

impl Classifier {
    pub const CONV_KERNEL: usize = 3;

    pub fn new(channels: usize, num_classes: usize, seed: u64, name: &str) -> Result<Self> {
        if num_classes < 2 {
            return Err(invalid(format!("classifier needs M >= 2, got {num_classes}")));
        }
        Ok(Classifier {
            num_classes,
            conv: Conv1d::new(
                ConvSpec::new(channels, 2 * channels, Self::CONV_KERNEL, 1, 0),
                seed,
                &join(name, "conv"),
            )?,
            bn: BatchNorm1d::new(2 * channels),
            pool: PoolToVector::default(),
            linear: Linear::new(2 * channels, num_classes, seed, &join(name, "linear")),
            relu_out: None,
        })
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.len() < Self::CONV_KERNEL {
            return Err(invalid(format!(
                "classifier input length {} is below {}",
                x.len(),
                Self::CONV_KERNEL
            )));
        }
        Ok(())
    }

    /// Logits as `[B, M, 1]`.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut h = self.bn.forward_eval(&self.conv.forward_eval(x)?);
        relu_inplace(&mut h);
        Ok(self.linear.forward_eval(&self.pool.forward_eval(&h)))
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let c = self.conv.forward_train(x)?;
        let mut h = self.bn.forward_train(&c);
        relu_inplace(&mut h);
        let v = self.pool.forward_train(&h);
        self.relu_out = Some(h);
        Ok(self.linear.forward_train(&v))
    }

    pub fn backward(&mut self, dlogits: &Tensor, need_dx: bool) -> Option<Tensor> {
        let dv = self.linear.backward(dlogits);
        let mut dh = self.pool.backward(&dv);
        relu_backward(&mut dh, &self.relu_out.take().expect("forward_train first"));
        let dc = self.bn.backward(&dh);
        self.conv.backward(&dc, need_dx)
    }

    pub fn cost(&self, len: usize) -> Result<Cost> {
        let c = conv_bn_cost(&self.conv.spec, len)?;
        Ok(Cost {
            params: c.params + Linear::param_count(self.linear.in_features, self.num_classes),
            multiadds: c.multiadds + (self.linear.in_features * self.num_classes) as u64,
            out_len: 1,
        })
    }
}

impl Module for Classifier {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        self.linear.visit(&join(prefix, "linear"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
        self.linear.visit_mut(&join(prefix, "linear"), f);
    }
}
