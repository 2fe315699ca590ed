//! WebAssembly bindings for the browser demo. Every export takes plain
//! strings/numbers and returns a JSON string; failures come back as
//! `{"error": "..."}` so the page never has to catch exceptions.

use randprune::alloc::{self, Method};
use randprune::arch::parse_network;
use randprune::mask::{sample_mask, MaskMode};
use randprune::{NetworkSpec, SparsityPlan};
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn error(e: impl std::fmt::Display) -> String {
    json!({ "error": e.to_string() }).to_string()
}

fn setup(network: &str, method: &str) -> Result<(NetworkSpec, Method), String> {
    let net = parse_network(network).map_err(|e| e.to_string())?;
    let method: Method = method.parse()?;
    if method == Method::External {
        return Err("pick a predefined method".into());
    }
    Ok((net, method))
}

#[derive(Serialize)]
struct PlanView<'a> {
    method: &'a str,
    scale: Option<f64>,
    realized_sparsity: f64,
    retained: usize,
    total: usize,
    layers: &'a [alloc::LayerPlan],
}

fn plan_json(plan: &SparsityPlan) -> String {
    serde_json::to_string(&PlanView {
        method: plan.method.as_str(),
        scale: plan.scale,
        realized_sparsity: plan.realized_sparsity(),
        retained: plan.total_retained(),
        total: plan.total_params(),
        layers: &plan.layers,
    })
    .expect("plan serializes")
}

/// Layer densities and retained counts for a network document.
#[wasm_bindgen]
pub fn plan_densities(network: &str, method: &str, sparsity: f64) -> String {
    match setup(network, method).and_then(|(net, m)| alloc::plan(&net, m, sparsity).map_err(|e| e.to_string())) {
        Ok(plan) => plan_json(&plan),
        Err(e) => error(e),
    }
}

/// Bitmap of one prunable layer's sampled mask: `rows` output units by
/// `cols` fan-in entries, `bits` as a '0'/'1' string in row-major order.
#[wasm_bindgen]
pub fn mask_bitmap(network: &str, method: &str, sparsity: f64, seed: u32, layer: usize, bernoulli: bool) -> String {
    let run = || -> Result<String, String> {
        let (net, m) = setup(network, method)?;
        let plan = alloc::plan(&net, m, sparsity).map_err(|e| e.to_string())?;
        let mode = if bernoulli { MaskMode::Bernoulli } else { MaskMode::Exact };
        let mask = sample_mask(&plan, &net, u64::from(seed), mode).map_err(|e| e.to_string())?;
        let prunable: Vec<_> = mask.layers.iter().filter(|l| l.prunable).collect();
        let l = prunable.get(layer).ok_or_else(|| format!("layer index {layer} out of range ({} prunable layers)", prunable.len()))?;
        let [out, fan_in, kh, kw] = l.shape;
        let bits: String = l.bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
        Ok(json!({
            "name": l.name,
            "rows": out,
            "cols": fan_in * kh * kw,
            "kept": l.popcount(),
            "bits": bits,
        })
        .to_string())
    };
    run().unwrap_or_else(error)
}

/// Per-layer density as global sparsity sweeps `[0, max_sparsity]` in
/// `steps` points; infeasible points are `null`.
#[wasm_bindgen]
pub fn density_curve(network: &str, method: &str, max_sparsity: f64, steps: usize) -> String {
    let (net, m) = match setup(network, method) {
        Ok(v) => v,
        Err(e) => return error(e),
    };
    if steps < 2 || !(0.0..1.0).contains(&max_sparsity) {
        return error("need steps >= 2 and max_sparsity in [0, 1)");
    }
    let names: Vec<&str> = net.layers().iter().filter(|l| l.prunable).map(|l| l.name.as_str()).collect();
    let mut xs = Vec::with_capacity(steps);
    let mut series: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(steps); names.len()];
    for i in 0..steps {
        let s = max_sparsity * i as f64 / (steps - 1) as f64;
        xs.push(s);
        let densities = alloc::plan(&net, m, s).ok().map(|p| p.densities());
        for (l, col) in series.iter_mut().enumerate() {
            col.push(densities.as_ref().map(|d| d[l]));
        }
    }
    let layers: Vec<_> = names.iter().zip(&series).map(|(n, d)| json!({ "name": n, "density": d })).collect();
    json!({ "sparsity": xs, "layers": layers }).to_string()
}
