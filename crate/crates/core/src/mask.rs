//! Seeded random masks realizing a [`SparsityPlan`].

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alloc::SparsityPlan;
use crate::arch::NetworkSpec;
use crate::rng;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("plan has {plan} layers but network has {net} prunable layers")]
    LayerCount { plan: usize, net: usize },
    #[error("plan layer `{plan}` does not match network layer `{net}`")]
    LayerName { plan: String, net: String },
    #[error("plan layer `{layer}` expects {plan} weights, network has {net}")]
    LayerSize { layer: String, plan: usize, net: usize },
    #[error("mask does not match network: {0}")]
    Shape(String),
    #[error("malformed mask file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Exactly `retained` positions per layer, chosen without replacement.
    #[default]
    Exact,
    /// Each position kept independently with probability `density`.
    Bernoulli,
}

impl MaskMode {
    fn code(self) -> u8 {
        match self {
            MaskMode::Exact => 0,
            MaskMode::Bernoulli => 1,
        }
    }
}

impl FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(MaskMode::Exact),
            "bernoulli" => Ok(MaskMode::Bernoulli),
            other => Err(format!("unknown mask mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    pub name: String,
    pub shape: [usize; 4],
    pub prunable: bool,
    pub bits: Vec<bool>,
}

impl LayerMask {
    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// One binary tensor per network layer (dense layers are all ones).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub seed: u64,
    pub mode: MaskMode,
    pub layers: Vec<LayerMask>,
}

impl Mask {
    pub fn all_ones(net: &NetworkSpec) -> Mask {
        Mask {
            seed: 0,
            mode: MaskMode::Exact,
            layers: net
                .layers()
                .iter()
                .map(|l| LayerMask { name: l.name.clone(), shape: l.weight_shape(), prunable: l.prunable, bits: vec![true; l.param_count()] })
                .collect(),
        }
    }

    /// Mask with the given positions cleared; `zeros[i]` lists offsets in layer `i`.
    pub fn with_zeros(net: &NetworkSpec, zeros: &[Vec<usize>]) -> Mask {
        let mut m = Mask::all_ones(net);
        for (layer, offs) in m.layers.iter_mut().zip(zeros) {
            for &o in offs {
                layer.bits[o] = false;
            }
        }
        m
    }

    pub fn check_against(&self, net: &NetworkSpec) -> Result<(), MaskError> {
        if self.layers.len() != net.layers().len() {
            return Err(MaskError::Shape(format!("{} mask layers for {} network layers", self.layers.len(), net.layers().len())));
        }
        for (m, l) in self.layers.iter().zip(net.layers()) {
            if m.shape != l.weight_shape() || m.bits.len() != l.param_count() {
                return Err(MaskError::Shape(format!("layer `{}` shape {:?} vs {:?}", l.name, m.shape, l.weight_shape())));
            }
        }
        Ok(())
    }

    /// Human-readable per-layer summary.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "mode {}", if self.mode == MaskMode::Exact { "exact" } else { "bernoulli" });
        for l in &self.layers {
            let kept = l.popcount();
            let _ = writeln!(
                out,
                "layer {} shape {}x{}x{}x{} kept {} of {} density {:.6}{}",
                l.name,
                l.shape[0],
                l.shape[1],
                l.shape[2],
                l.shape[3],
                kept,
                l.len(),
                kept as f64 / l.len().max(1) as f64,
                if l.prunable { "" } else { " dense" }
            );
        }
        let _ = writeln!(out, "total_kept {}", sparse_param_count(self));
        out
    }

    const MAGIC: &'static [u8; 4] = b"RPMK";
    const VERSION: u16 = 1;

    /// Binary layout (little endian): magic `RPMK`, u16 version, u8 mode,
    /// u8 reserved, u64 seed, u32 layer count; then per layer u16 name length,
    /// name bytes, u8 prunable, 4 × u32 shape, u64 popcount and the bitset
    /// packed LSB-first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.push(self.mode.code());
        out.push(0);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            let name = l.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(u8::from(l.prunable));
            for d in l.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&(l.popcount() as u64).to_le_bytes());
            let mut packed = vec![0u8; l.bits.len().div_ceil(8)];
            for (i, &b) in l.bits.iter().enumerate() {
                if b {
                    packed[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend_from_slice(&packed);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Mask, MaskError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != Self::MAGIC {
            return Err(MaskError::Format("bad magic".into()));
        }
        let version = r.u16()?;
        if version != Self::VERSION {
            return Err(MaskError::Format(format!("unsupported version {version}")));
        }
        let mode = match r.u8()? {
            0 => MaskMode::Exact,
            1 => MaskMode::Bernoulli,
            m => return Err(MaskError::Format(format!("unknown mode {m}"))),
        };
        r.u8()?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| MaskError::Format("layer name is not utf-8".into()))?;
            let prunable = r.u8()? != 0;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u32()? as usize;
            }
            let popcount = r.u64()? as usize;
            let n: usize = shape.iter().product();
            let packed = r.take(n.div_ceil(8))?;
            let bits: Vec<bool> = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
            if n % 8 != 0 && packed[n / 8] >> (n % 8) != 0 {
                return Err(MaskError::Format(format!("layer `{name}` has stray padding bits")));
            }
            let layer = LayerMask { name, shape, prunable, bits };
            if layer.popcount() != popcount {
                return Err(MaskError::Format(format!("layer `{}` popcount header {popcount} disagrees with bitset", layer.name)));
            }
            layers.push(layer);
        }
        if r.pos != bytes.len() {
            return Err(MaskError::Format("trailing bytes".into()));
        }
        Ok(Mask { seed, mode, layers })
    }
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], MaskError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| MaskError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    pub(crate) fn u8(&mut self) -> Result<u8, MaskError> {
        Ok(self.take(1)?[0])
    }
    pub(crate) fn u16(&mut self) -> Result<u16, MaskError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub(crate) fn u32(&mut self) -> Result<u32, MaskError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub(crate) fn u64(&mut self) -> Result<u64, MaskError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn f64(&mut self) -> Result<f64, MaskError> {
        Ok(f64::from_bits(self.u64()?))
    }
}

/// Samples a mask for `net` following `plan`. Layer `i` draws from stream
/// `(seed, i)`, so layers are independent and the result depends only on
/// `(plan, seed, mode)`.
pub fn sample_mask(plan: &SparsityPlan, net: &NetworkSpec, seed: u64, mode: MaskMode) -> Result<Mask, MaskError> {
    let prunable = net.prunable_indices();
    if plan.layers.len() != prunable.len() {
        return Err(MaskError::LayerCount { plan: plan.layers.len(), net: prunable.len() });
    }
    let mut mask = Mask::all_ones(net);
    mask.seed = seed;
    mask.mode = mode;
    for (lp, &idx) in plan.layers.iter().zip(&prunable) {
        let spec = &net.layers()[idx];
        if lp.name != spec.name {
            return Err(MaskError::LayerName { plan: lp.name.clone(), net: spec.name.clone() });
        }
        if lp.total != spec.param_count() {
            return Err(MaskError::LayerSize { layer: spec.name.clone(), plan: lp.total, net: spec.param_count() });
        }
        let mut rng = rng::stream(seed, idx as u64);
        let bits = &mut mask.layers[idx].bits;
        match mode {
            MaskMode::Exact => {
                let mut order: Vec<usize> = (0..bits.len()).collect();
                let (chosen, _) = order.partial_shuffle(&mut rng, lp.retained);
                bits.iter_mut().for_each(|b| *b = false);
                for &i in chosen.iter() {
                    bits[i] = true;
                }
            }
            MaskMode::Bernoulli => {
                for b in bits.iter_mut() {
                    *b = rng.random::<f64>() < lp.density;
                }
            }
        }
    }
    Ok(mask)
}

/// Kept weights over prunable layers.
pub fn sparse_param_count(mask: &Mask) -> usize {
    mask.layers.iter().filter(|l| l.prunable).map(LayerMask::popcount).sum()
}

pub fn sparse_flops(mask: &Mask, net: &NetworkSpec) -> u64 {
    mask.layers
        .iter()
        .zip(net.layers())
        .filter(|(m, _)| m.prunable)
        .map(|(m, l)| 2 * m.popcount() as u64 * l.out_positions as u64)
        .sum()
}
