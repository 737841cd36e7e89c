use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{BatchNormState, ConvSpec, RunningStats};
use crate::tensor::{Scalar, Tensor};

/// Rational factor applied to every hidden channel count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WidthMultiplier {
    pub num: u32,
    pub den: u32,
}

impl WidthMultiplier {
    pub const FULL: WidthMultiplier = WidthMultiplier { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::invalid("width_multiplier", "numerator and denominator must be positive"));
        }
        let wm = WidthMultiplier { num, den };
        wm.scale(64)?;
        Ok(wm)
    }

    /// `base * num / den`, which must be a positive integer.
    pub fn scale(&self, base: usize) -> Result<usize> {
        let prod = base * self.num as usize;
        if !prod.is_multiple_of(self.den as usize) || prod == 0 {
            return Err(Error::invalid(
                "width_multiplier",
                format!("{base} * {self} is not a positive integer channel count"),
            ));
        }
        Ok(prod / self.den as usize)
    }
}

impl fmt::Display for WidthMultiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for WidthMultiplier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid("width_multiplier", format!("cannot parse {s:?}; expected N or N/D"));
        let (n, d) = match s.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        let num = n.parse().map_err(|_| bad())?;
        let den = d.parse().map_err(|_| bad())?;
        WidthMultiplier::new(num, den)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    /// Stride-2 upsampling; weights use the transposed layout.
    ConvTranspose,
}

/// One convolution unit: optional pre-activation ReLU, convolution, optional batchnorm.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub name: &'static str,
    pub kind: LayerKind,
    pub spec: ConvSpec,
    pub pre_relu: bool,
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub bn: Option<BatchNormState<T>>,
}

/// Layer names in storage order.
pub const LAYER_NAMES: [&str; 31] = [
    "A0_1", "C1_1", "C1_2", "C1_3", "C1_4", "C2_1", "C2_2", "C2_3", "C2_4", "C3_1", "C3_2", "C3_3",
    "C3_4", "C4_1", "B4_2", "C4_3", "C4_4", "C4_5", "C5_1", "B5_2", "C5_3", "C5_4", "C5_5", "C6_1",
    "B6_2", "C6_3", "C6_4", "C6_5", "C7_1", "C7_2", "OUT",
];

pub(crate) mod idx {
    pub const A0_1: usize = 0;
    pub const C1: usize = 1; // C1_1..C1_4
    pub const C2: usize = 5; // C2_1..C2_4
    pub const C3: usize = 9; // C3_1..C3_4
    pub const C4_1: usize = 13;
    pub const B4_2: usize = 14;
    pub const C4_3: usize = 15;
    pub const C5_1: usize = 18;
    pub const B5_2: usize = 19;
    pub const C5_3: usize = 20;
    pub const C6_1: usize = 23;
    pub const B6_2: usize = 24;
    pub const C6_3: usize = 25;
    pub const C7_1: usize = 28;
    pub const C7_2: usize = 29;
    pub const OUT: usize = 30;
}

/// Weights of one deblur block, shared by every recurrent step.
#[derive(Clone, Debug, PartialEq)]
pub struct RdnParams<T> {
    pub width: WidthMultiplier,
    pub layers: Vec<Layer<T>>,
}

struct LayerDef {
    kind: LayerKind,
    k: usize,
    c_in: usize,
    c_out: usize,
    stride: usize,
    pre_relu: bool,
    bn: bool,
}

fn layer_defs(wm: WidthMultiplier) -> Result<Vec<LayerDef>> {
    let f1 = wm.scale(64)?;
    let f2 = wm.scale(128)?;
    let f3 = wm.scale(256)?;
    let conv = |k, c_in, c_out, stride| LayerDef {
        kind: LayerKind::Conv,
        k,
        c_in,
        c_out,
        stride,
        pre_relu: true,
        bn: true,
    };
    let up = |c_in, c_out| LayerDef {
        kind: LayerKind::ConvTranspose,
        ..conv(4, c_in, c_out, 2)
    };
    let blend = |c| LayerDef {
        pre_relu: false,
        bn: false,
        ..conv(1, 2 * c, c, 1)
    };
    let mut defs = vec![LayerDef {
        pre_relu: false,
        ..conv(3, 6, f1, 1)
    }];
    defs.push(conv(3, f1, f1, 2));
    defs.extend((0..3).map(|_| conv(3, f1, f1, 1)));
    defs.extend((0..4).map(|_| conv(3, f1, f1, 1)));
    defs.push(conv(3, f1, f2, 2));
    defs.extend((0..3).map(|_| conv(3, f2, f2, 1)));
    defs.push(conv(3, f2, f3, 2));
    defs.push(blend(f3));
    defs.extend((0..3).map(|_| conv(3, f3, f3, 1)));
    defs.push(up(f3, f2));
    defs.push(blend(f2));
    defs.extend((0..3).map(|_| conv(3, f2, f2, 1)));
    defs.push(up(f2, f1));
    defs.push(blend(f1));
    defs.extend((0..3).map(|_| conv(3, f1, f1, 1)));
    defs.push(up(f1, f1));
    defs.push(conv(4, f1, 6, 1));
    defs.push(LayerDef {
        bn: false,
        ..conv(3, 6, 3, 1)
    });
    debug_assert_eq!(defs.len(), LAYER_NAMES.len());
    Ok(defs)
}

impl<T: Scalar> RdnParams<T> {
    /// Zero weights with the layer table of `width`.
    pub fn zeros(width: WidthMultiplier) -> Result<Self> {
        let layers = layer_defs(width)?
            .into_iter()
            .zip(LAYER_NAMES)
            .map(|(d, name)| {
                let spec = ConvSpec::new(d.k, d.c_in, d.c_out, d.stride);
                let shape = match d.kind {
                    LayerKind::Conv => spec.weight_shape(),
                    LayerKind::ConvTranspose => spec.transposed_weight_shape(),
                };
                Layer {
                    name,
                    kind: d.kind,
                    spec,
                    pre_relu: d.pre_relu,
                    weight: Tensor::zeros(shape),
                    bias: (!d.bn).then(|| vec![T::zero(); d.c_out]),
                    bn: d.bn.then(|| BatchNormState::new(d.c_out)),
                }
            })
            .collect();
        Ok(RdnParams { width, layers })
    }

    pub fn layer(&self, name: &str) -> Option<&Layer<T>> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer<T>> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.groups().iter().map(|g| g.len()).sum()
    }

    /// Trainable buffers in a fixed order: per layer weight, bias, gamma, beta.
    pub fn groups(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.data());
            if let Some(b) = &l.bias {
                out.push(b.as_slice());
            }
            if let Some(bn) = &l.bn {
                out.push(bn.gamma.as_slice());
                out.push(bn.beta.as_slice());
            }
        }
        out
    }

    pub fn groups_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.data_mut());
            if let Some(b) = &mut l.bias {
                out.push(b.as_mut_slice());
            }
            if let Some(bn) = &mut l.bn {
                out.push(bn.gamma.as_mut_slice());
                out.push(bn.beta.as_mut_slice());
            }
        }
        out
    }

    pub fn group_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(format!("{}.weight", l.name));
            if l.bias.is_some() {
                out.push(format!("{}.bias", l.name));
            }
            if l.bn.is_some() {
                out.push(format!("{}.bn.gamma", l.name));
                out.push(format!("{}.bn.beta", l.name));
            }
        }
        out
    }

    /// Number of per-step batchnorm statistic sets (the same for every layer).
    pub fn bn_steps(&self) -> usize {
        self.layers.iter().find_map(|l| l.bn.as_ref()).map_or(1, |bn| bn.running.len())
    }

    /// Gives every batchnorm layer `steps` statistic sets; new sets copy the last one.
    pub fn set_bn_steps(&mut self, steps: usize) {
        for bn in self.layers.iter_mut().filter_map(|l| l.bn.as_mut()) {
            bn.resize_steps(steps);
        }
    }

    pub fn cast<U: Scalar>(&self) -> RdnParams<U> {
        let v = |x: &Vec<T>| x.iter().map(|&a| U::from_f64(a.f64()).unwrap_or_else(U::nan)).collect::<Vec<U>>();
        RdnParams {
            width: self.width,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    name: l.name,
                    kind: l.kind,
                    spec: l.spec,
                    pre_relu: l.pre_relu,
                    weight: l.weight.cast(),
                    bias: l.bias.as_ref().map(v),
                    bn: l.bn.as_ref().map(|bn| BatchNormState {
                        gamma: v(&bn.gamma),
                        beta: v(&bn.beta),
                        running: bn
                            .running
                            .iter()
                            .map(|r| RunningStats {
                                mean: v(&r.mean),
                                var: v(&r.var),
                            })
                            .collect(),
                        momentum: U::from_f64(bn.momentum.f64()).unwrap_or_else(U::nan),
                        eps: U::from_f64(bn.eps.f64()).unwrap_or_else(U::nan),
                    }),
                })
                .collect(),
        }
    }

    /// Sets every blending layer to pass the current features through and
    /// ignore the propagated ones.
    pub fn set_blend_identity(&mut self) {
        for l in self.layers.iter_mut().filter(|l| l.name.starts_with('B')) {
            let c = l.spec.c_out;
            let w = l.weight.data_mut();
            w.iter_mut().for_each(|v| *v = T::zero());
            for o in 0..c {
                w[o * 2 * c + o] = T::one();
            }
            if let Some(b) = &mut l.bias {
                b.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

/// He-style initialisation. Blending layers start as the identity on the
/// current features; the output layer is scaled down so the first prediction
/// stays close to its input.
pub fn init_params<T: Scalar>(width: WidthMultiplier, seed: u64) -> Result<RdnParams<T>> {
    let mut p = RdnParams::zeros(width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in &mut p.layers {
        if l.name.starts_with('B') {
            continue;
        }
        let taps = l.spec.kh * l.spec.kw;
        let fan_in = match l.kind {
            LayerKind::Conv => l.spec.c_in * taps,
            LayerKind::ConvTranspose => (l.spec.c_in * taps / (l.spec.stride * l.spec.stride)).max(1),
        };
        let mut std = (2.0 / fan_in as f64).sqrt();
        if l.name == "OUT" {
            std *= 0.1;
        }
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in l.weight.data_mut() {
            *w = T::lit(normal.sample(&mut rng));
        }
    }
    p.set_blend_identity();
    Ok(p)
}

/// Gradients mirroring [`RdnParams`] layer by layer.
#[derive(Clone, Debug)]
pub struct LayerGrads<T> {
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
    pub gamma: Option<Vec<T>>,
    pub beta: Option<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct RdnGrads<T> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Scalar> RdnGrads<T> {
    pub fn zeros_like(p: &RdnParams<T>) -> Self {
        RdnGrads {
            layers: p
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: vec![T::zero(); l.weight.len()],
                    bias: l.bias.as_ref().map(|b| vec![T::zero(); b.len()]),
                    gamma: l.bn.as_ref().map(|b| vec![T::zero(); b.channels()]),
                    beta: l.bn.as_ref().map(|b| vec![T::zero(); b.channels()]),
                })
                .collect(),
        }
    }

    /// Same order as [`RdnParams::groups`].
    pub fn groups(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice());
            for g in [&l.bias, &l.gamma, &l.beta].into_iter().flatten() {
                out.push(g.as_slice());
            }
        }
        out
    }

    pub fn scale(&mut self, s: T) {
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|v| *v *= s);
            for g in [&mut l.bias, &mut l.gamma, &mut l.beta].into_iter().flatten() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

pub(crate) fn accumulate<T: Scalar>(acc: &mut [T], add: &[T]) {
    acc.iter_mut().zip(add).for_each(|(a, &b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_width_matches_table() {
        let p = RdnParams::<f32>::zeros(WidthMultiplier::FULL).unwrap();
        let c41 = p.layer("C4_1").unwrap();
        assert_eq!(c41.weight.shape(), [256, 128, 3, 3]);
        assert_eq!(p.layer("A0_1").unwrap().weight.shape(), [64, 6, 3, 3]);
        assert_eq!(p.layer("C5_1").unwrap().weight.shape(), [256, 128, 4, 4]);
        assert_eq!(p.layer("B4_2").unwrap().weight.shape(), [256, 512, 1, 1]);
        assert_eq!(p.layer("C7_2").unwrap().weight.shape(), [6, 64, 4, 4]);
        assert_eq!(p.layer("OUT").unwrap().weight.shape(), [3, 6, 3, 3]);
    }

    #[test]
    fn eighth_width_scales_linearly() {
        let p = init_params::<f32>("1/8".parse().unwrap(), 0).unwrap();
        assert_eq!(p.layer("C4_1").unwrap().weight.shape(), [32, 16, 3, 3]);
    }

    #[test]
    fn non_integer_channels_rejected() {
        assert!("1/3".parse::<WidthMultiplier>().is_err());
        assert!("0/2".parse::<WidthMultiplier>().is_err());
        assert!("x".parse::<WidthMultiplier>().is_err());
        assert_eq!("1/16".parse::<WidthMultiplier>().unwrap().scale(256).unwrap(), 16);
    }

    #[test]
    fn init_is_deterministic() {
        let wm = "1/8".parse().unwrap();
        let a = init_params::<f32>(wm, 42).unwrap();
        let b = init_params::<f32>(wm, 42).unwrap();
        let c = init_params::<f32>(wm, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bn = a.layer("C3_2").unwrap().bn.as_ref().unwrap();
        assert!(bn.gamma.iter().all(|&g| g == 1.0) && bn.beta.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn groups_and_names_align() {
        let p = init_params::<f64>("1/16".parse().unwrap(), 1).unwrap();
        let g = RdnGrads::zeros_like(&p);
        assert_eq!(p.groups().len(), p.group_names().len());
        let lens: Vec<usize> = p.groups().iter().map(|x| x.len()).collect();
        let glens: Vec<usize> = g.groups().iter().map(|x| x.len()).collect();
        assert_eq!(lens, glens);
    }
}
