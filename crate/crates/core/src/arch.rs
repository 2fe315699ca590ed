//! Sequential conv/pool/fc network descriptions with dense parameter and
//! FLOP accounting.
//!
//! Every conv layer is stride 1 with "same" zero padding, so it keeps the
//! spatial size of its input. Pooling is attached to the layer it follows and
//! a conv→fc transition flattens implicitly (`fan_in` of the fc layer must
//! equal `channels × height × width` at that point).
//!
//! # Document grammar
//!
//! One statement per line, `#` starts a comment:
//!
//! ```text
//! input 1x8x8            # channels x height x width (or `input 64`)
//! classes 10
//! conv 1->8 k3x3 pos64 name=c1
//! maxpool 2
//! fc 128->10 k1x1 pos1 dense
//! ```
//!
//! Layer lines are `<conv|fc> <fan_in>-><fan_out>` followed by optional
//! `k<w>x<h>` (or `k<n>`), `pos<out_positions>`, `dense` (not prunable),
//! `nobias` and `name=<id>`. A declared `pos` must agree with the inferred
//! spatial size. Pool lines are `maxpool <k>`, `avgpool <k>` and `gap`
//! (global average pool). Any other token is rejected.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArchError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("layer `{layer}`: {message}")]
    Dimension { layer: String, message: String },
    #[error("layer `{layer}`: {message}")]
    InvalidSize { layer: String, message: String },
    #[error("network: {0}")]
    Structure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Fc,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Fc => "fc",
        }
    }
}

/// Spatial reduction applied after a layer's activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pool {
    None,
    Max(usize),
    Avg(usize),
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub fan_in_channels: usize,
    pub fan_out_channels: usize,
    pub kernel_w: usize,
    pub kernel_h: usize,
    /// Spatial output locations; filled in by [`NetworkSpec::new`].
    pub out_positions: usize,
    pub prunable: bool,
    pub has_bias: bool,
    pub pool: Pool,
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, fan_in: usize, fan_out: usize, kernel_w: usize, kernel_h: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Conv,
            fan_in_channels: fan_in,
            fan_out_channels: fan_out,
            kernel_w,
            kernel_h,
            out_positions: 1,
            prunable: true,
            has_bias: true,
            pool: Pool::None,
        }
    }

    pub fn fc(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Fc,
            fan_in_channels: fan_in,
            fan_out_channels: fan_out,
            kernel_w: 1,
            kernel_h: 1,
            out_positions: 1,
            prunable: true,
            has_bias: true,
            pool: Pool::None,
        }
    }

    pub fn with_pool(mut self, pool: Pool) -> Self {
        self.pool = pool;
        self
    }

    pub fn dense(mut self) -> Self {
        self.prunable = false;
        self
    }

    /// Weight count; biases are tracked separately and never pruned.
    pub fn param_count(&self) -> usize {
        self.fan_in_channels * self.fan_out_channels * self.kernel_w * self.kernel_h
    }

    /// Weight tensor shape `[out, in, kernel_h, kernel_w]`.
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.fan_out_channels, self.fan_in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn bias_len(&self) -> usize {
        if self.has_bias {
            self.fan_out_channels
        } else {
            0
        }
    }

    pub fn dense_flops(&self) -> u64 {
        2 * self.param_count() as u64 * self.out_positions as u64
    }
}

/// Activation shape `(channels, height, width)`.
pub type Shape3 = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
    input_shape: Shape3,
    class_count: usize,
}

impl NetworkSpec {
    /// Validates dimensions and fills in every layer's `out_positions`.
    pub fn new(input_shape: Shape3, class_count: usize, mut layers: Vec<LayerSpec>) -> Result<Self, ArchError> {
        let (c, h, w) = input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(ArchError::Structure(format!("input shape {c}x{h}x{w} must be positive")));
        }
        if class_count == 0 {
            return Err(ArchError::Structure("class count must be positive".into()));
        }
        if layers.is_empty() {
            return Err(ArchError::Structure("network has no layers".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut shape = input_shape;
        let last = layers.len() - 1;
        for (idx, layer) in layers.iter_mut().enumerate() {
            if !seen.insert(layer.name.clone()) {
                return Err(ArchError::Structure(format!("duplicate layer name `{}`", layer.name)));
            }
            let size_err = |message: String| ArchError::InvalidSize { layer: layer.name.clone(), message };
            if layer.fan_in_channels == 0 || layer.fan_out_channels == 0 {
                return Err(size_err("channel counts must be positive".into()));
            }
            if layer.kernel_w == 0 || layer.kernel_h == 0 {
                return Err(size_err("kernel sizes must be positive".into()));
            }
            shape = match layer.kind {
                LayerKind::Conv => {
                    if layer.kernel_w % 2 == 0 || layer.kernel_h % 2 == 0 {
                        return Err(size_err(format!(
                            "conv kernel {}x{} must be odd for same padding",
                            layer.kernel_w, layer.kernel_h
                        )));
                    }
                    if shape.0 != layer.fan_in_channels {
                        return Err(ArchError::Dimension {
                            layer: layer.name.clone(),
                            message: format!("expects {} input channels, previous stage yields {}", layer.fan_in_channels, shape.0),
                        });
                    }
                    (layer.fan_out_channels, shape.1, shape.2)
                }
                LayerKind::Fc => {
                    if layer.kernel_w != 1 || layer.kernel_h != 1 {
                        return Err(size_err("fc layers have a 1x1 kernel".into()));
                    }
                    let flat = shape.0 * shape.1 * shape.2;
                    if flat != layer.fan_in_channels {
                        return Err(ArchError::Dimension {
                            layer: layer.name.clone(),
                            message: format!(
                                "expects {} inputs, previous stage yields {} ({}x{}x{})",
                                layer.fan_in_channels, flat, shape.0, shape.1, shape.2
                            ),
                        });
                    }
                    (layer.fan_out_channels, 1, 1)
                }
            };
            layer.out_positions = shape.1 * shape.2;
            shape = match layer.pool {
                Pool::None => shape,
                Pool::Global => (shape.0, 1, 1),
                Pool::Max(k) | Pool::Avg(k) => {
                    if k == 0 || shape.1 % k != 0 || shape.2 % k != 0 {
                        return Err(ArchError::Dimension {
                            layer: layer.name.clone(),
                            message: format!("pool size {k} does not divide {}x{}", shape.1, shape.2),
                        });
                    }
                    (shape.0, shape.1 / k, shape.2 / k)
                }
            };
            if idx == last {
                if layer.kind != LayerKind::Fc {
                    return Err(ArchError::Structure(format!("last layer `{}` must be fc", layer.name)));
                }
                if layer.pool != Pool::None {
                    return Err(ArchError::Structure(format!("last layer `{}` cannot be pooled", layer.name)));
                }
                if layer.fan_out_channels != class_count {
                    return Err(ArchError::Dimension {
                        layer: layer.name.clone(),
                        message: format!("fan_out {} differs from class count {class_count}", layer.fan_out_channels),
                    });
                }
            }
        }
        Ok(NetworkSpec { layers, input_shape, class_count })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.0 * self.input_shape.1 * self.input_shape.2
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Indices of the prunable layers, in network order.
    pub fn prunable_indices(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| l.prunable).map(|(i, _)| i).collect()
    }

    /// Shape entering each layer: `input_shapes()[i]` feeds `layers()[i]`.
    pub fn input_shapes(&self) -> Vec<Shape3> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut shape = self.input_shape;
        for layer in &self.layers {
            out.push(shape);
            shape = match layer.kind {
                LayerKind::Conv => (layer.fan_out_channels, shape.1, shape.2),
                LayerKind::Fc => (layer.fan_out_channels, 1, 1),
            };
            shape = match layer.pool {
                Pool::None => shape,
                Pool::Global => (shape.0, 1, 1),
                Pool::Max(k) | Pool::Avg(k) => (shape.0, shape.1 / k, shape.2 / k),
            };
        }
        out
    }

    pub fn to_document(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (c, h, w) = self.input_shape;
        writeln!(f, "input {c}x{h}x{w}")?;
        writeln!(f, "classes {}", self.class_count)?;
        for l in &self.layers {
            write!(
                f,
                "{} {}->{} k{}x{} pos{}",
                l.kind.as_str(),
                l.fan_in_channels,
                l.fan_out_channels,
                l.kernel_w,
                l.kernel_h,
                l.out_positions
            )?;
            if !l.prunable {
                write!(f, " dense")?;
            }
            if !l.has_bias {
                write!(f, " nobias")?;
            }
            writeln!(f, " name={}", l.name)?;
            match l.pool {
                Pool::None => {}
                Pool::Max(k) => writeln!(f, "maxpool {k}")?,
                Pool::Avg(k) => writeln!(f, "avgpool {k}")?,
                Pool::Global => writeln!(f, "gap")?,
            }
        }
        Ok(())
    }
}

/// Sum of weights over prunable layers.
pub fn param_count(net: &NetworkSpec) -> usize {
    net.layers.iter().filter(|l| l.prunable).map(LayerSpec::param_count).sum()
}

/// Forward FLOPs of the prunable layers, one multiply-accumulate = 2 FLOPs.
pub fn dense_flops(net: &NetworkSpec) -> u64 {
    net.layers.iter().filter(|l| l.prunable).map(LayerSpec::dense_flops).sum()
}

fn parse_usize(tok: &str, line: usize, what: &str) -> Result<usize, ArchError> {
    tok.parse::<usize>().map_err(|_| ArchError::Syntax { line, message: format!("invalid {what} `{tok}`") })
}

pub fn parse_network(text: &str) -> Result<NetworkSpec, ArchError> {
    let mut input: Option<Shape3> = None;
    let mut classes: Option<usize> = None;
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut declared_pos: Vec<Option<usize>> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let toks: Vec<&str> = content.split_whitespace().collect();
        let syntax = |message: String| ArchError::Syntax { line, message };
        match toks[0] {
            "input" => {
                if toks.len() != 2 {
                    return Err(syntax("expected `input <C>x<H>x<W>`".into()));
                }
                let dims: Vec<&str> = toks[1].split('x').collect();
                let shape = match dims.as_slice() {
                    [d] => (parse_usize(d, line, "input size")?, 1, 1),
                    [c, h, w] => (
                        parse_usize(c, line, "channels")?,
                        parse_usize(h, line, "height")?,
                        parse_usize(w, line, "width")?,
                    ),
                    _ => return Err(syntax(format!("invalid input shape `{}`", toks[1]))),
                };
                input = Some(shape);
            }
            "classes" => {
                if toks.len() != 2 {
                    return Err(syntax("expected `classes <K>`".into()));
                }
                classes = Some(parse_usize(toks[1], line, "class count")?);
            }
            "maxpool" | "avgpool" | "gap" => {
                let pool = match (toks[0], toks.len()) {
                    ("gap", 1) => Pool::Global,
                    ("maxpool", 2) => Pool::Max(parse_usize(toks[1], line, "pool size")?),
                    ("avgpool", 2) => Pool::Avg(parse_usize(toks[1], line, "pool size")?),
                    _ => return Err(syntax(format!("malformed pool statement `{content}`"))),
                };
                let Some(prev) = layers.last_mut() else {
                    return Err(syntax("pooling before any layer".into()));
                };
                if prev.pool != Pool::None {
                    return Err(syntax(format!("layer `{}` already pooled", prev.name)));
                }
                prev.pool = pool;
            }
            kind @ ("conv" | "fc") => {
                let Some(dims) = toks.get(1) else {
                    return Err(syntax(format!("{kind} layer needs `<fan_in>-><fan_out>`")));
                };
                let Some((fi, fo)) = dims.split_once("->") else {
                    return Err(syntax(format!("expected `<fan_in>-><fan_out>`, got `{dims}`")));
                };
                let fan_in = parse_usize(fi, line, "fan_in")?;
                let fan_out = parse_usize(fo, line, "fan_out")?;
                let index = layers.len() + 1;
                let mut layer = if kind == "conv" {
                    LayerSpec::conv(format!("conv{index}"), fan_in, fan_out, 1, 1)
                } else {
                    LayerSpec::fc(format!("fc{index}"), fan_in, fan_out)
                };
                let mut kernel_seen = false;
                let mut pos = None;
                for tok in &toks[2..] {
                    if let Some(name) = tok.strip_prefix("name=") {
                        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.') {
                            return Err(syntax(format!("invalid layer name `{name}`")));
                        }
                        layer.name = name.to_string();
                    } else if let Some(p) = tok.strip_prefix("pos") {
                        pos = Some(parse_usize(p, line, "out_positions")?);
                    } else if let Some(k) = tok.strip_prefix('k') {
                        let (kw, kh) = match k.split_once('x') {
                            Some((a, b)) => (parse_usize(a, line, "kernel width")?, parse_usize(b, line, "kernel height")?),
                            None => {
                                let n = parse_usize(k, line, "kernel size")?;
                                (n, n)
                            }
                        };
                        layer.kernel_w = kw;
                        layer.kernel_h = kh;
                        kernel_seen = true;
                    } else if *tok == "dense" {
                        layer.prunable = false;
                    } else if *tok == "nobias" {
                        layer.has_bias = false;
                    } else {
                        return Err(syntax(format!("unknown token `{tok}`")));
                    }
                }
                if kind == "conv" && !kernel_seen {
                    return Err(syntax(format!("conv layer `{}` needs a kernel size", layer.name)));
                }
                if fan_in == 0 || fan_out == 0 || layer.kernel_w == 0 || layer.kernel_h == 0 {
                    return Err(ArchError::InvalidSize { layer: layer.name, message: "sizes must be positive".into() });
                }
                if pos == Some(0) {
                    return Err(ArchError::InvalidSize { layer: layer.name, message: "out_positions must be positive".into() });
                }
                layers.push(layer);
                declared_pos.push(pos);
            }
            other => return Err(syntax(format!("unknown statement `{other}`"))),
        }
    }

    let input = input.ok_or_else(|| ArchError::Structure("missing `input` header".into()))?;
    let classes = classes.ok_or_else(|| ArchError::Structure("missing `classes` header".into()))?;
    let net = NetworkSpec::new(input, classes, layers)?;
    for (layer, declared) in net.layers.iter().zip(declared_pos) {
        if let Some(p) = declared {
            if p != layer.out_positions {
                return Err(ArchError::Dimension {
                    layer: layer.name.clone(),
                    message: format!("declared pos{p} but layer produces {} output positions", layer.out_positions),
                });
            }
        }
    }
    Ok(net)
}

impl std::str::FromStr for NetworkSpec {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_network(s)
    }
}

/// Plain MLP: `input_dim → width × depth → classes`.
pub fn mlp(input_dim: usize, width: usize, depth: usize, classes: usize) -> Result<NetworkSpec, ArchError> {
    let mut layers = Vec::with_capacity(depth + 1);
    let mut fan_in = input_dim;
    for i in 0..depth {
        layers.push(LayerSpec::fc(format!("fc{}", i + 1), fan_in, width));
        fan_in = width;
    }
    layers.push(LayerSpec::fc(format!("fc{}", depth + 1), fan_in, classes));
    NetworkSpec::new((input_dim, 1, 1), classes, layers)
}

/// Small VGG-style conv net: `depth` 3x3 conv layers of `width` channels,
/// a 2x2 max pool after every second conv (while the image allows it),
/// global average pool, then the classifier.
pub fn convnet(input: Shape3, width: usize, depth: usize, classes: usize) -> Result<NetworkSpec, ArchError> {
    if depth == 0 {
        return Err(ArchError::Structure("convnet needs at least one conv layer".into()));
    }
    let mut layers = Vec::with_capacity(depth + 1);
    let (mut channels, mut h, mut w) = input;
    for i in 0..depth {
        let mut layer = LayerSpec::conv(format!("conv{}", i + 1), channels, width, 3, 3);
        if i % 2 == 1 && i + 1 < depth && h % 2 == 0 && w % 2 == 0 && h > 2 {
            layer.pool = Pool::Max(2);
            h /= 2;
            w /= 2;
        }
        if i + 1 == depth {
            layer.pool = Pool::Global;
        }
        channels = width;
        layers.push(layer);
    }
    layers.push(LayerSpec::fc(format!("fc{}", depth + 1), width, classes));
    NetworkSpec::new(input, classes, layers)
}
