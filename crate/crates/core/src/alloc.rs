//! Layer-wise density plans.
//!
//! All schemes work on prunable weights only and target a real-valued global
//! budget `(1 − S) × total`. Retained counts are `round_half_up(d × p)`
//! clamped to `[1, p]`, so the realized total can drift from the budget by at
//! most one weight per layer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{LayerKind, LayerSpec, NetworkSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocError {
    #[error("global sparsity {0} outside [0, 1)")]
    Domain(f64),
    #[error("network has no prunable layers")]
    NoPrunableLayers,
    #[error("infeasible budget at layer `{layer}`: {message}")]
    Infeasible { layer: String, message: String },
    #[error("expected {expected} densities, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("density {density} for layer `{layer}` outside (0, 1]")]
    DensityRange { layer: String, density: f64 },
    #[error("plan layer `{found}` does not match network layer `{expected}`")]
    LayerMismatch { expected: String, found: String },
    #[error("plan document line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Uniform,
    UniformPlus,
    Er,
    Erk,
    ErkPlus,
    External,
}

impl Method {
    pub const ALL_PREDEFINED: [Method; 5] = [Method::Uniform, Method::UniformPlus, Method::Er, Method::Erk, Method::ErkPlus];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Uniform => "uniform",
            Method::UniformPlus => "uniform_plus",
            Method::Er => "er",
            Method::Erk => "erk",
            Method::ErkPlus => "erk_plus",
            Method::External => "external",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "uniform" => Method::Uniform,
            "uniform_plus" | "uniform+" => Method::UniformPlus,
            "er" => Method::Er,
            "erk" => Method::Erk,
            "erk_plus" | "erk+" => Method::ErkPlus,
            "external" => Method::External,
            other => return Err(format!("unknown ratio method `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub name: String,
    pub density: f64,
    pub retained: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    pub method: Method,
    /// Where external ratios came from (`snip`, `grasp`, a file name).
    pub source: Option<String>,
    pub global_sparsity: f64,
    /// Budget scale found by the capped solver, when the scheme has one and
    /// at least one layer stayed uncapped.
    pub scale: Option<f64>,
    pub layers: Vec<LayerPlan>,
}

impl SparsityPlan {
    pub fn densities(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.density).collect()
    }

    pub fn retained_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.retained).collect()
    }

    pub fn total_retained(&self) -> usize {
        self.layers.iter().map(|l| l.retained).sum()
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.total).sum()
    }

    /// Real-valued budget `(1 − S) × total`.
    pub fn budget(&self) -> f64 {
        (1.0 - self.global_sparsity) * self.total_params() as f64
    }

    /// Sparsity realized by the integer retained counts.
    pub fn realized_sparsity(&self) -> f64 {
        1.0 - self.total_retained() as f64 / self.total_params() as f64
    }

    pub fn to_document(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for SparsityPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "method {}", self.method)?;
        if let Some(src) = &self.source {
            writeln!(f, "source {src}")?;
        }
        writeln!(f, "sparsity {}", self.global_sparsity)?;
        if let Some(scale) = self.scale {
            writeln!(f, "scale {scale}")?;
        }
        for l in &self.layers {
            writeln!(f, "layer {} density {} retained {} total {}", l.name, l.density, l.retained, l.total)?;
        }
        Ok(())
    }
}

/// Parses the key-value plan document written by [`SparsityPlan::to_document`].
pub fn parse_plan(text: &str) -> Result<SparsityPlan, AllocError> {
    let mut method = None;
    let mut source = None;
    let mut sparsity = None;
    let mut scale = None;
    let mut layers = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| AllocError::Parse { line, message };
        let toks: Vec<&str> = content.split_whitespace().collect();
        let real = |tok: &str| tok.parse::<f64>().map_err(|_| err(format!("invalid number `{tok}`")));
        let int = |tok: &str| tok.parse::<usize>().map_err(|_| err(format!("invalid count `{tok}`")));
        match toks.as_slice() {
            ["method", m] => method = Some(m.parse::<Method>().map_err(err)?),
            ["source", s] => source = Some(s.to_string()),
            ["sparsity", s] => sparsity = Some(real(s)?),
            ["scale", s] => scale = Some(real(s)?),
            ["layer", name, "density", d, "retained", r, "total", t] => layers.push(LayerPlan {
                name: name.to_string(),
                density: real(d)?,
                retained: int(r)?,
                total: int(t)?,
            }),
            ["layer", name, "density", d] => layers.push(LayerPlan { name: name.to_string(), density: real(d)?, retained: 0, total: 0 }),
            _ => return Err(err(format!("unrecognized line `{content}`"))),
        }
    }
    let method = method.ok_or(AllocError::Parse { line: 0, message: "missing `method`".into() })?;
    let global_sparsity = match sparsity {
        Some(s) => s,
        None => {
            let total: usize = layers.iter().map(|l| l.total).sum();
            if total == 0 {
                return Err(AllocError::Parse { line: 0, message: "missing `sparsity`".into() });
            }
            1.0 - layers.iter().map(|l| l.density * l.total as f64).sum::<f64>() / total as f64
        }
    };
    Ok(SparsityPlan { method, source, global_sparsity, scale, layers })
}

fn check_sparsity(s: f64) -> Result<(), AllocError> {
    if !(0.0..1.0).contains(&s) {
        return Err(AllocError::Domain(s));
    }
    Ok(())
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// `round_half_up(d × p)` clamped to `[1, p]`.
pub fn retained_count(density: f64, params: usize) -> usize {
    round_half_up(density * params as f64).clamp(1, params.max(1))
}

fn prunable_layers(net: &NetworkSpec) -> Result<Vec<&LayerSpec>, AllocError> {
    let layers: Vec<&LayerSpec> = net.layers().iter().filter(|l| l.prunable).collect();
    if layers.is_empty() {
        return Err(AllocError::NoPrunableLayers);
    }
    Ok(layers)
}

fn total_of(layers: &[&LayerSpec]) -> usize {
    layers.iter().map(|l| l.param_count()).sum()
}

fn build(method: Method, s: f64, scale: Option<f64>, layers: &[&LayerSpec], densities: &[f64]) -> SparsityPlan {
    SparsityPlan {
        method,
        source: None,
        global_sparsity: s,
        scale,
        layers: layers
            .iter()
            .zip(densities)
            .map(|(l, &d)| LayerPlan {
                name: l.name.clone(),
                density: d,
                retained: retained_count(d, l.param_count()),
                total: l.param_count(),
            })
            .collect(),
    }
}

/// Erdős–Rényi raw density `(n_in + n_out) / (n_in · n_out)`.
pub fn er_raw(layer: &LayerSpec) -> f64 {
    let (a, b) = (layer.fan_in_channels as f64, layer.fan_out_channels as f64);
    (a + b) / (a * b)
}

/// Erdős–Rényi-Kernel raw density: the sum of the weight tensor's dimensions
/// over their product. For fc layers the tensor has no kernel dimensions and
/// this is exactly [`er_raw`].
pub fn erk_raw(layer: &LayerSpec) -> f64 {
    match layer.kind {
        LayerKind::Fc => er_raw(layer),
        LayerKind::Conv => {
            let dims = [layer.fan_in_channels, layer.fan_out_channels, layer.kernel_w, layer.kernel_h].map(|d| d as f64);
            dims.iter().sum::<f64>() / dims.iter().product::<f64>()
        }
    }
}

/// Result of the capped-scaling solve.
#[derive(Debug, Clone, PartialEq)]
pub struct CappedSolution {
    pub densities: Vec<f64>,
    pub scale: Option<f64>,
    pub capped: Vec<bool>,
}

/// Finds `ε` with `Σ_capped p + ε Σ_uncapped r·p = budget`, repeatedly moving
/// every layer with `ε·r > 1` into the capped (dense) set until no layer
/// moves. `forced` layers start capped.
///
/// Each pass can only raise `ε`, so a capped layer never needs uncapping and
/// the loop ends after at most `layers` passes.
pub fn solve_capped_scale(raw: &[f64], params: &[usize], forced: &[bool], budget: f64) -> CappedSolution {
    debug_assert_eq!(raw.len(), params.len());
    let mut capped = forced.to_vec();
    let scale = loop {
        let dense: f64 = params.iter().zip(&capped).filter(|(_, &c)| c).map(|(&p, _)| p as f64).sum();
        let weighted: f64 = raw.iter().zip(params).zip(&capped).filter(|(_, &c)| !c).map(|((&r, &p), _)| r * p as f64).sum();
        if weighted <= 0.0 {
            break None;
        }
        let eps = (budget - dense) / weighted;
        let mut changed = false;
        for (c, &r) in capped.iter_mut().zip(raw) {
            if !*c && eps * r > 1.0 {
                *c = true;
                changed = true;
            }
        }
        if !changed {
            break Some(eps);
        }
    };
    let densities = raw
        .iter()
        .zip(&capped)
        .map(|(&r, &c)| if c { 1.0 } else { scale.map_or(1.0, |e| e * r) })
        .collect();
    CappedSolution { densities, scale, capped }
}

pub fn plan_uniform(net: &NetworkSpec, s: f64) -> Result<SparsityPlan, AllocError> {
    check_sparsity(s)?;
    let layers = prunable_layers(net)?;
    let densities = vec![1.0 - s; layers.len()];
    Ok(build(Method::Uniform, s, None, &layers, &densities))
}

/// Uniform+: the first layer stays dense when it is a conv, the last fc layer
/// keeps a hard floor of 20%, and every other layer shares one density that
/// absorbs the rest of the budget. If the shared density would exceed 1 the
/// middle layers go dense and the last fc layer absorbs the surplus.
pub fn plan_uniform_plus(net: &NetworkSpec, s: f64) -> Result<SparsityPlan, AllocError> {
    const LAST_FC_FLOOR: f64 = 0.2;
    check_sparsity(s)?;
    let layers = prunable_layers(net)?;
    let total = total_of(&layers) as f64;
    let budget = (1.0 - s) * total;
    let n = layers.len();

    let first_dense = layers[0].kind == LayerKind::Conv;
    let last_idx = (layers[n - 1].kind == LayerKind::Fc && !(first_dense && n == 1)).then_some(n - 1);
    let mut densities = vec![0.0; n];
    let mut remaining = budget;
    if first_dense {
        densities[0] = 1.0;
        remaining -= layers[0].param_count() as f64;
        if remaining < 0.0 {
            return Err(AllocError::Infeasible {
                layer: layers[0].name.clone(),
                message: format!("dense first conv needs {} weights, budget is {budget}", layers[0].param_count()),
            });
        }
    }
    let floor_need = last_idx.map_or(0.0, |i| LAST_FC_FLOOR * layers[i].param_count() as f64);
    if floor_need > remaining {
        let binding = last_idx.map(|i| layers[i].name.clone()).unwrap_or_default();
        return Err(AllocError::Infeasible {
            layer: binding,
            message: format!("20% floor needs {floor_need} weights but only {remaining} remain after dense layers (budget {budget})"),
        });
    }
    let middle: Vec<usize> = (0..n).filter(|&i| !(first_dense && i == 0) && Some(i) != last_idx).collect();
    let middle_params: f64 = middle.iter().map(|&i| layers[i].param_count() as f64).sum();

    match last_idx {
        Some(li) => {
            let last_p = layers[li].param_count() as f64;
            if middle.is_empty() {
                densities[li] = (remaining / last_p).clamp(LAST_FC_FLOOR, 1.0);
            } else {
                let shared = (remaining - floor_need) / middle_params;
                if shared <= 1.0 {
                    for &i in &middle {
                        densities[i] = shared;
                    }
                    densities[li] = LAST_FC_FLOOR;
                } else {
                    for &i in &middle {
                        densities[i] = 1.0;
                    }
                    densities[li] = ((remaining - middle_params) / last_p).clamp(LAST_FC_FLOOR, 1.0);
                }
            }
        }
        None => {
            if middle.is_empty() {
                // A lone dense first conv; nothing else to distribute.
            } else {
                let shared = (remaining / middle_params).min(1.0);
                for &i in &middle {
                    densities[i] = shared;
                }
            }
        }
    }
    for (l, &d) in layers.iter().zip(&densities) {
        if d <= 0.0 {
            return Err(AllocError::Infeasible { layer: l.name.clone(), message: "no budget left for this layer".into() });
        }
    }
    Ok(build(Method::UniformPlus, s, None, &layers, &densities))
}

fn plan_scaled(net: &NetworkSpec, s: f64, method: Method, raw_fn: fn(&LayerSpec) -> f64, force_last: bool) -> Result<SparsityPlan, AllocError> {
    check_sparsity(s)?;
    let layers = prunable_layers(net)?;
    let params: Vec<usize> = layers.iter().map(|l| l.param_count()).collect();
    let total = params.iter().sum::<usize>() as f64;
    let budget = (1.0 - s) * total;
    if budget < layers.len() as f64 {
        return Err(AllocError::Infeasible {
            layer: layers[0].name.clone(),
            message: format!("budget {budget} cannot keep one weight in each of {} layers", layers.len()),
        });
    }
    let raw: Vec<f64> = layers.iter().map(|l| raw_fn(l)).collect();
    let mut forced = vec![false; layers.len()];
    if force_last {
        // The last network layer is the classifier; only force it when prunable.
        let last = net.layers().last().expect("validated network");
        if last.prunable {
            let li = layers.len() - 1;
            let rest = budget - params[li] as f64;
            if rest < 0.0 {
                return Err(AllocError::Infeasible {
                    layer: last.name.clone(),
                    message: format!("dense last fc needs {} weights, budget is {budget}", params[li]),
                });
            }
            if rest < li as f64 {
                return Err(AllocError::Infeasible {
                    layer: last.name.clone(),
                    message: format!("after a dense last fc, {rest} weights cannot cover {li} other layers"),
                });
            }
            forced[li] = true;
        }
    }
    let sol = solve_capped_scale(&raw, &params, &forced, budget);
    Ok(build(method, s, sol.scale, &layers, &sol.densities))
}

pub fn plan_er(net: &NetworkSpec, s: f64) -> Result<SparsityPlan, AllocError> {
    plan_scaled(net, s, Method::Er, er_raw, false)
}

pub fn plan_erk(net: &NetworkSpec, s: f64) -> Result<SparsityPlan, AllocError> {
    plan_scaled(net, s, Method::Erk, erk_raw, false)
}

/// ERK with the classifier forced dense before scaling the rest.
pub fn plan_erk_plus(net: &NetworkSpec, s: f64) -> Result<SparsityPlan, AllocError> {
    plan_scaled(net, s, Method::ErkPlus, erk_raw, true)
}

/// Wraps externally obtained per-layer densities (SNIP/GraSP ratios, files).
pub fn plan_from_ratios(net: &NetworkSpec, ratios: &[f64]) -> Result<SparsityPlan, AllocError> {
    let layers = prunable_layers(net)?;
    if ratios.len() != layers.len() {
        return Err(AllocError::LengthMismatch { expected: layers.len(), got: ratios.len() });
    }
    for (l, &d) in layers.iter().zip(ratios) {
        if !(d > 0.0 && d <= 1.0) {
            return Err(AllocError::DensityRange { layer: l.name.clone(), density: d });
        }
    }
    let total = total_of(&layers) as f64;
    let kept: f64 = layers.iter().zip(ratios).map(|(l, &d)| d * l.param_count() as f64).sum();
    let s = (1.0 - kept / total).max(0.0);
    Ok(build(Method::External, s, None, &layers, ratios))
}

/// Rebuilds a plan for `net` from a parsed plan document, checking layer
/// names and taking its densities verbatim.
pub fn plan_from_document(net: &NetworkSpec, doc: &SparsityPlan) -> Result<SparsityPlan, AllocError> {
    let layers = prunable_layers(net)?;
    if doc.layers.len() != layers.len() {
        return Err(AllocError::LengthMismatch { expected: layers.len(), got: doc.layers.len() });
    }
    for (l, d) in layers.iter().zip(&doc.layers) {
        if l.name != d.name {
            return Err(AllocError::LayerMismatch { expected: l.name.clone(), found: d.name.clone() });
        }
    }
    let mut plan = plan_from_ratios(net, &doc.densities())?;
    plan.source = doc.source.clone().or_else(|| (doc.method != Method::External).then(|| doc.method.to_string()));
    Ok(plan)
}

pub fn plan(net: &NetworkSpec, method: Method, s: f64) -> Result<SparsityPlan, AllocError> {
    match method {
        Method::Uniform => plan_uniform(net, s),
        Method::UniformPlus => plan_uniform_plus(net, s),
        Method::Er => plan_er(net, s),
        Method::Erk => plan_erk(net, s),
        Method::ErkPlus => plan_erk_plus(net, s),
        Method::External => Err(AllocError::Parse { line: 0, message: "external plans need a ratio list".into() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::parse_network;

    fn net76() -> NetworkSpec {
        parse_network("input 1x1x1\nclasses 10\nconv 1->4 k3\nfc 4->10").unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn uniform_half() {
        let p = plan_uniform(&net76(), 0.5).unwrap();
        assert_eq!(p.densities(), vec![0.5, 0.5]);
        assert_eq!(p.retained_counts(), vec![18, 20]);
        assert!(plan_uniform(&net76(), 0.0).unwrap().densities().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn uniform_rounding_floor() {
        let p = plan_uniform(&net76(), 0.9).unwrap();
        assert_eq!(p.layers[0].retained, 4);
    }

    #[test]
    fn uniform_domain_errors() {
        assert!(matches!(plan_uniform(&net76(), 1.0), Err(AllocError::Domain(_))));
        assert!(matches!(plan_uniform(&net76(), -0.1), Err(AllocError::Domain(_))));
        assert!(matches!(plan_uniform(&net76(), f64::NAN), Err(AllocError::Domain(_))));
    }

    #[test]
    fn uniform_plus_infeasible_two_layer() {
        let err = plan_uniform_plus(&net76(), 0.5).unwrap_err();
        match err {
            AllocError::Infeasible { layer, .. } => assert_eq!(layer, "fc2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn uniform_plus_three_layer() {
        let net = parse_network("input 1x5x5\nclasses 40\nconv 1->4 k3\nfc 100->1\nfc 1->40").unwrap();
        let counts: Vec<usize> = net.layers().iter().map(|l| l.param_count()).collect();
        assert_eq!(counts, vec![36, 100, 40]);
        let p = plan_uniform_plus(&net, 0.5).unwrap();
        let d = p.densities();
        assert_eq!(d[0], 1.0);
        assert_eq!(d[2], 0.2);
        assert!(close(d[1], 0.44, 1e-12));
        assert_eq!(p.retained_counts(), vec![36, 44, 8]);
    }

    #[test]
    fn uniform_plus_dense_at_zero() {
        let p = plan_uniform_plus(&net76(), 0.0).unwrap();
        assert!(p.densities().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn er_two_fc() {
        let net = parse_network("input 4\nclasses 10\nfc 4->10\nfc 10->10").unwrap();
        let p = plan_er(&net, 0.5).unwrap();
        let eps = 70.0 / 34.0;
        assert!(close(p.scale.unwrap(), eps, 1e-12));
        assert!(close(p.densities()[0], 0.35 * eps, 1e-12));
        assert!(close(p.densities()[0], 0.7206, 1e-4));
        assert!(close(p.densities()[1], 0.4118, 1e-4));
        assert_eq!(p.densities(), plan_erk(&net, 0.5).unwrap().densities());
    }

    #[test]
    fn er_single_layer() {
        let net = parse_network("input 7\nclasses 3\nfc 7->3").unwrap();
        let p = plan_er(&net, 0.3).unwrap();
        assert!(close(p.densities()[0], 0.7, 1e-12));
    }

    #[test]
    fn erk_one_pass() {
        let p = plan_erk(&net76(), 0.5).unwrap();
        assert!(close(p.scale.unwrap(), 1.52, 1e-12));
        assert!(close(p.densities()[0], 0.4644, 1e-4));
        assert!(close(p.densities()[1], 0.5320, 1e-4));
        assert_eq!(p.retained_counts(), vec![17, 21]);
        assert_eq!(p.total_retained(), 38);
    }

    #[test]
    fn erk_capped_trace() {
        let p = plan_erk(&net76(), 0.05).unwrap();
        assert!(close(p.scale.unwrap(), 32.2 / 11.0, 1e-12));
        assert_eq!(p.densities()[1], 1.0);
        assert!(close(p.densities()[0], 0.8944, 1e-4));
        assert_eq!(p.retained_counts(), vec![32, 40]);
        assert_eq!(p.total_retained(), 72);
    }

    #[test]
    fn erk_dense_at_zero() {
        let p = plan_erk(&net76(), 0.0).unwrap();
        assert!(p.densities().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn erk_infeasible_budget() {
        let net = parse_network("input 2\nclasses 2\nfc 2->2\nfc 2->2\nfc 2->2").unwrap();
        assert!(matches!(plan_erk(&net, 0.9), Err(AllocError::Infeasible { .. })));
    }

    #[test]
    fn erk_plus_forced_last() {
        let p = plan_erk_plus(&net76(), 0.4).unwrap();
        assert_eq!(p.densities()[1], 1.0);
        assert!(close(p.densities()[0], 5.6 / 36.0, 1e-12));
        assert_eq!(p.retained_counts(), vec![6, 40]);
        assert!(matches!(plan_erk_plus(&net76(), 0.5), Err(AllocError::Infeasible { .. })));
    }

    #[test]
    fn erk_plus_matches_erk_when_last_dense() {
        let erk = plan_erk(&net76(), 0.05).unwrap();
        let plus = plan_erk_plus(&net76(), 0.05).unwrap();
        assert_eq!(erk.retained_counts(), plus.retained_counts());
        for (a, b) in erk.densities().iter().zip(plus.densities()) {
            assert!(close(*a, b, 1e-12));
        }
    }

    #[test]
    fn ratios_round_trip_sparsity() {
        let p = plan_from_ratios(&net76(), &[0.4644, 0.5320]).unwrap();
        assert!(close(p.global_sparsity, 0.5, 1e-3));
        assert_eq!(p.method, Method::External);
        assert_eq!(plan_from_ratios(&net76(), &[1.0, 1.0]).unwrap().global_sparsity, 0.0);
        assert!(matches!(plan_from_ratios(&net76(), &[0.5]), Err(AllocError::LengthMismatch { .. })));
        assert!(matches!(plan_from_ratios(&net76(), &[0.0, 0.5]), Err(AllocError::DensityRange { .. })));
    }

    #[test]
    fn plan_document_round_trip() {
        let p = plan_erk(&net76(), 0.5).unwrap();
        let parsed = parse_plan(&p.to_document()).unwrap();
        assert_eq!(parsed, p);
        let again = plan_from_document(&net76(), &parsed).unwrap();
        assert_eq!(again.densities(), p.densities());
        assert_eq!(again.source.as_deref(), Some("erk"));
    }

    #[test]
    fn dense_layers_are_excluded() {
        let net = parse_network("input 1x1x1\nclasses 10\nconv 1->4 k3 dense\nfc 4->10").unwrap();
        let p = plan_erk(&net, 0.5).unwrap();
        assert_eq!(p.layers.len(), 1);
        assert_eq!(p.layers[0].retained, 20);
    }
}
