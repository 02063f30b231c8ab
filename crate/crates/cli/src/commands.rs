use std::fs;
use std::path::Path;

use conv_compress::container::{
    get_batch, get_gates, get_kernel, get_layer, get_plan, layer_names, put_batch, put_gates, put_kernel, put_layer,
    put_plan, read_container, write_container, Container, EntryKind,
};
use conv_compress::data_opt::{
    asym3d, asym_data_svd, data_svd, patch_outputs, relu_asym, sample_patches, spatial_refine, MapPair, PatchBatch,
    ReluAsymOptions,
};
use conv_compress::decomp::{cp_als, spatial_svd, tt_svd, tucker_hooi, weight_svd, CpOptions};
use conv_compress::gates::{prune_by_gates, train_toy_gated, GateKind, ToyTask};
use conv_compress::pruning::{channel_major, channel_prune, magnitude_prune};
use conv_compress::rank_select::{equal_acc_select, greedy_energy_select, ranks_from_ratio, AccTable, EnergyLayer};
use conv_compress::{mac_cost, DecomposedLayer, FeatureMap, Kernel4D, LayerCost, LayerShape, Method};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::*;

const TUCKER_ITERS: usize = 100;
const TUCKER_TOL: f64 = 1e-10;

pub(crate) fn dispatch(cmd: Command) -> Result<Value, Failure> {
    match cmd {
        Command::Init(a) => init(a),
        Command::Sample(a) => sample(a),
        Command::Compress(a) => compress(a),
        Command::Dataopt(a) => dataopt(a),
        Command::Prune(a) => prune(a),
        Command::Gates(a) => gates(a),
        Command::RankSelect(a) => rank_select(a),
        Command::Report(a) => report(a),
        Command::Reconstruct(a) => reconstruct_cmd(a),
    }
}

fn load(path: &Path) -> Result<Container, Failure> {
    Ok(read_container(path)?)
}

fn save(c: &Container, path: &Path) -> Result<(), Failure> {
    Ok(write_container(c, path)?)
}

/// Explicit flag, then the size recorded with the kernel, then 1×1.
fn kernel_hw(c: &Container, kernel: &str, flag: Option<Hw>) -> (usize, usize) {
    if let Some(Hw(h, w)) = flag {
        return (h, w);
    }
    c.get(kernel)
        .and_then(|e| Some((e.metadata.get("h")?.parse().ok()?, e.metadata.get("w")?.parse().ok()?)))
        .unwrap_or((1, 1))
}

fn put_sized_kernel(c: &mut Container, name: &str, kernel: &Kernel4D, (h, w): (usize, usize)) -> Result<(), Failure> {
    put_kernel(c, name, kernel)?;
    c.set_metadata(name, "h", h.to_string())?;
    c.set_metadata(name, "w", w.to_string())?;
    Ok(())
}

fn cost_json(c: &LayerCost) -> Value {
    let retained = c.macs_compressed as f64 / c.macs_original as f64;
    json!({
        "method": c.method.name(),
        "ranks": c.ranks,
        "macs_before": c.macs_original,
        "macs_after": c.macs_compressed,
        "params_before": c.params_original,
        "params_after": c.params_compressed,
        "ratio": retained,
        "ratio_convention": "retained",
        "ratio_removed": c.ratio,
    })
}

fn merge(mut base: Value, extra: Value) -> Value {
    if let (Value::Object(b), Value::Object(e)) = (&mut base, extra) {
        b.extend(e);
    }
    base
}

fn shape_json(s: LayerShape) -> Value {
    json!({"s": s.s, "t": s.t, "k": s.k, "h": s.h, "w": s.w})
}

fn random_kernel(rng: &mut ChaCha8Rng, t: usize, s: usize, k: usize, bias: bool) -> Result<Kernel4D, Failure> {
    let kernel = Kernel4D::from_fn(t, s, k, |_, _, _, _| rng.random_range(-1.0f32..1.0) as f64)?;
    Ok(if bias {
        let b = (0..t).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect();
        kernel.with_bias(b)?
    } else {
        kernel
    })
}

fn init(a: InitArgs) -> Result<Value, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut c = Container::new();
    let mut kernels = Vec::new();
    for spec in &a.layers {
        let kernel = random_kernel(&mut rng, spec.t, spec.s, spec.k, a.bias)?;
        put_sized_kernel(&mut c, &spec.name, &kernel, (a.hw.0, a.hw.1))?;
        let shape = LayerShape::new(spec.s, spec.t, spec.k, a.hw.0, a.hw.1);
        kernels.push(json!({"name": spec.name, "shape": shape_json(shape), "macs": shape.original_macs()}));
    }
    save(&c, &a.out)?;
    Ok(json!({"command": "init", "seed": a.seed, "kernels": kernels}))
}

fn sample(a: SampleArgs) -> Result<Value, Failure> {
    let c = load(&a.input)?;
    let kernel = get_kernel(&c, &a.layer)?;
    let (h, w) = kernel_hw(&c, &a.layer, a.hw);
    let s = kernel.s();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut pairs = Vec::with_capacity(a.images);
    for _ in 0..a.images {
        let reference = FeatureMap::from_fn(s, h, w, |_, _, _| rng.random_range(-1.0f32..1.0) as f64)?;
        let shifted: Vec<f64> = reference
            .data()
            .iter()
            .map(|v| v + a.noise * rng.random_range(-1.0..1.0))
            .collect();
        let current = FeatureMap::new(s, h, w, shifted)?;
        pairs.push(MapPair { reference, current });
    }
    let batch = sample_patches(&pairs, a.per_image, kernel.k(), rng.random())?.with_outputs(&kernel)?;
    let mut out = Container::new();
    put_batch(&mut out, &a.name, &batch)?;
    out.set_metadata(&format!("{}/inputs", a.name), "source", a.layer.clone())?;
    save(&out, &a.out)?;
    Ok(json!({
        "command": "sample",
        "layer": a.layer,
        "name": a.name,
        "samples": batch.len(),
        "k": batch.k,
        "channels": batch.channels,
        "outputs": batch.ref_outputs.cols(),
        "noise": a.noise,
        "seed": a.seed,
    }))
}

fn core_method(m: MethodArg) -> Method {
    match m {
        MethodArg::WeightSvd => Method::WeightSvd,
        MethodArg::SpatialSvd => Method::SpatialSvd,
        MethodArg::Cp => Method::Cp,
        MethodArg::Tucker => Method::Tucker,
        MethodArg::Tt => Method::Tt,
    }
}

fn check_arity(ranks: &Ranks, want: usize, what: &str) -> Result<(), Failure> {
    if ranks.0.len() != want {
        return Err(Failure::Usage(format!(
            "--rank expects {want} value(s) for {what}, got '{}'",
            ranks.0.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",")
        )));
    }
    Ok(())
}

fn factorize(kernel: &Kernel4D, method: Method, ranks: &[usize], seed: u64) -> Result<DecomposedLayer, Failure> {
    Ok(match method {
        Method::WeightSvd => weight_svd(kernel, ranks[0])?,
        Method::SpatialSvd => spatial_svd(kernel, ranks[0])?,
        Method::Cp => cp_als(
            kernel,
            ranks[0],
            CpOptions {
                seed,
                ..CpOptions::default()
            },
        )?,
        Method::Tucker => tucker_hooi(kernel, ranks[0], ranks[1], TUCKER_ITERS, TUCKER_TOL)?,
        Method::Tt => tt_svd(kernel, ranks[0], ranks[1], ranks[2])?,
        other => unreachable!("{other} is not offered by compress"),
    })
}

fn error_json(kernel: &Kernel4D, layer: &DecomposedLayer) -> Value {
    let err = kernel.distance(&layer.reconstruct());
    let norm = kernel.frobenius_norm();
    json!({
        "recon_error": err,
        "recon_error_rel": if norm > 0.0 { err / norm } else { 0.0 },
    })
}

fn tag_layer(layer: &mut DecomposedLayer, source: &str, (h, w): (usize, usize)) {
    layer.metadata.insert("source".into(), source.into());
    layer.metadata.insert("h".into(), h.to_string());
    layer.metadata.insert("w".into(), w.to_string());
}

fn compress(a: CompressArgs) -> Result<Value, Failure> {
    let mut c = load(&a.input)?;
    let kernel = get_kernel(&c, &a.layer)?;
    let (t, s, k) = kernel.dims();
    let hw = kernel_hw(&c, &a.layer, a.hw);
    let shape = LayerShape::new(s, t, k, hw.0, hw.1);
    let method = core_method(a.method);
    let ranks = match (&a.rank, a.ratio) {
        (Some(r), _) => {
            check_arity(r, method.rank_arity(), method.name())?;
            r.0.clone()
        }
        (None, Some(alpha)) => ranks_from_ratio(method, shape, alpha)?,
        (None, None) => unreachable!("clap requires --rank or --ratio"),
    };
    let mut layer = factorize(&kernel, method, &ranks, a.seed)?;
    let errors = error_json(&kernel, &layer);
    tag_layer(&mut layer, &a.layer, hw);
    let name = a.name.unwrap_or_else(|| format!("{}.{}", a.layer, method.name()));
    put_layer(&mut c, &name, &layer)?;
    save(&c, &a.out)?;
    let cost = mac_cost(shape, method, &layer.ranks)?;
    let head = json!({
        "command": "compress",
        "layer": a.layer,
        "stored_as": name,
        "shape": shape_json(shape),
        "requested_ratio": a.ratio,
        "seed": a.seed,
    });
    Ok(merge(merge(head, cost_json(&cost)), errors))
}

/// The batch named explicitly, or the only one in the container.
fn load_batch(path: &Path, name: Option<&str>) -> Result<PatchBatch, Failure> {
    let c = load(path)?;
    let name = match name {
        Some(n) => n.to_string(),
        None => {
            let names: Vec<String> = c
                .entries()
                .iter()
                .filter(|e| e.kind == EntryKind::Patchbatch)
                .filter_map(|e| e.name.strip_suffix("/inputs").map(str::to_string))
                .collect();
            match names.as_slice() {
                [one] => one.clone(),
                [] => return Err(Failure::Compute(format!("{} holds no patch batch", path.display()))),
                _ => {
                    return Err(Failure::Usage(format!(
                        "{} holds several batches ({}); pass --batch-name",
                        path.display(),
                        names.join(", ")
                    )))
                }
            }
        }
    };
    Ok(get_batch(&c, &name)?)
}

fn check_batch(batch: &PatchBatch, kernel: &Kernel4D) -> Result<(), Failure> {
    let (t, s, k) = kernel.dims();
    if batch.k != k || batch.channels != s {
        return Err(Failure::Compute(format!(
            "batch patches are {}x{} over {} channels, kernel needs {k}x{k} over {s}",
            batch.k, batch.k, batch.channels
        )));
    }
    if batch.ref_outputs.cols() != 0 && batch.ref_outputs.cols() != t {
        return Err(Failure::Compute(format!(
            "batch responses have {} channels, kernel has {t} outputs",
            batch.ref_outputs.cols()
        )));
    }
    Ok(())
}

fn dataopt(a: DataoptArgs) -> Result<Value, Failure> {
    let mut c = load(&a.input)?;
    let kernel = get_kernel(&c, &a.layer)?;
    let (t, s, k) = kernel.dims();
    let hw = kernel_hw(&c, &a.layer, a.hw);
    let shape = LayerShape::new(s, t, k, hw.0, hw.1);
    let mut batch = load_batch(&a.batch, a.batch_name.as_deref())?;
    check_batch(&batch, &kernel)?;
    if batch.ref_outputs.cols() == 0 {
        batch = batch.with_outputs(&kernel)?;
    }
    let arity = if a.mode == DataoptMode::Asym3d { 2 } else { 1 };
    check_arity(&a.rank, arity, "this mode")?;
    let r = a.rank.0[0];
    let mut extra = Map::new();
    let (mode_name, mut layer) = match a.mode {
        DataoptMode::DataSvd => ("data-svd", data_svd(&kernel, &batch.ref_outputs, r)?.to_layer()?),
        DataoptMode::Asym => ("asym", asym_data_svd(&batch, &kernel, r)?.to_layer()?),
        DataoptMode::Asym3d => ("asym3d", asym3d(&kernel, &batch, r, a.rank.0[1])?),
        DataoptMode::SpatialRefine => {
            let res = spatial_refine(&spatial_svd(&kernel, r)?, &batch)?;
            extra.insert("applied".into(), json!(res.applied));
            extra.insert("residual_before".into(), json!(res.residual_before));
            ("spatial-refine", res.refined.to_layer()?)
        }
        DataoptMode::ReluAsym => {
            let res = relu_asym(&batch, &kernel, r, &ReluAsymOptions::default())?;
            extra.insert("initial_objective".into(), json!(res.initial_objective));
            extra.insert("final_objective".into(), json!(res.final_objective));
            ("relu-asym", res.layer.to_layer()?)
        }
    };
    // Compressed layer fed the prefix patches, scored against the reference.
    let fitted = patch_outputs(&layer.reconstruct(), &batch.cur_inputs)?;
    extra.insert("fit_residual".into(), json!(batch.ref_outputs.sub(&fitted).frobenius_norm()));
    let errors = error_json(&kernel, &layer);
    tag_layer(&mut layer, &a.layer, hw);
    layer.metadata.insert("dataopt".into(), mode_name.into());
    let name = a.name.unwrap_or_else(|| format!("{}.{mode_name}", a.layer));
    put_layer(&mut c, &name, &layer)?;
    save(&c, &a.out)?;
    let cost = mac_cost(shape, layer.method(), &layer.ranks)?;
    let head = json!({
        "command": "dataopt",
        "mode": mode_name,
        "layer": a.layer,
        "stored_as": name,
        "samples": batch.len(),
        "shape": shape_json(shape),
    });
    Ok(merge(merge(merge(head, cost_json(&cost)), errors), Value::Object(extra)))
}

fn prune(a: PruneArgs) -> Result<Value, Failure> {
    let mut c = load(&a.input)?;
    let kernel = get_kernel(&c, &a.layer)?;
    let (t, s, k) = kernel.dims();
    let hw = kernel_hw(&c, &a.layer, a.hw);
    let result = match a.mode {
        PruneMode::Magnitude => magnitude_prune(&kernel, a.keep)?,
        PruneMode::Lasso => {
            let path = a
                .batch
                .as_ref()
                .ok_or_else(|| Failure::Usage("--mode lasso needs --batch".into()))?;
            let batch = load_batch(path, a.batch_name.as_deref())?;
            check_batch(&batch, &kernel)?;
            let mut unbiased = kernel.clone();
            unbiased.bias = None;
            let y = patch_outputs(&unbiased, &batch.inputs)?;
            let x = channel_major(&batch.inputs, s, k)?;
            channel_prune(&kernel, &x, &y, a.keep, a.lambda_init)?
        }
    };
    let mode_name = match a.mode {
        PruneMode::Lasso => "lasso",
        PruneMode::Magnitude => "magnitude",
    };
    let name = a.name.unwrap_or_else(|| format!("{}.pruned", a.layer));
    put_sized_kernel(&mut c, &name, &result.refit_kernel, hw)?;
    let kept = result.kept.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    c.set_metadata(&name, "kept_inputs", kept)?;
    c.set_metadata(&name, "source", a.layer.clone())?;
    save(&c, &a.out)?;
    let mut cost = mac_cost(LayerShape::new(result.kept.len(), t, k, hw.0, hw.1), Method::Original, &[])?;
    let full = LayerShape::new(s, t, k, hw.0, hw.1);
    cost.macs_original = full.original_macs();
    cost.params_original = (k * k * s * t) as u64;
    cost.ratio = 1.0 - cost.macs_compressed as f64 / cost.macs_original as f64;
    let head = json!({
        "command": "prune",
        "mode": mode_name,
        "layer": a.layer,
        "stored_as": name,
        "kept": result.kept,
        "lambda": result.lambda,
        "recon_error": result.residual,
        "residual_before_refit": result.residual_before_refit,
        "shape": shape_json(full),
    });
    let mut out = merge(head, cost_json(&cost));
    out["method"] = json!("channel-prune");
    Ok(out)
}

fn gates(a: GatesArgs) -> Result<Value, Failure> {
    let mut c = match &a.input {
        Some(p) => load(p)?,
        None => Container::new(),
    };
    let kernel = match &a.layer {
        Some(l) => Some(get_kernel(&c, l)?),
        None => None,
    };
    let features = match (&kernel, a.features) {
        (Some(kern), Some(f)) if f != kern.t() => {
            return Err(Failure::Usage(format!(
                "--features {f} does not match the {} output channels of --layer",
                kern.t()
            )))
        }
        (Some(kern), _) => kern.t(),
        (None, Some(f)) => f,
        (None, None) => 8,
    };
    let task = ToyTask {
        samples: a.samples,
        features,
        informative: a.informative,
        noise_std: a.noise_std,
    };
    let kind = match a.kind {
        GateKindArg::L0 => GateKind::L0,
        GateKindArg::Vib => GateKind::Vib,
    };
    let trained = train_toy_gated(&task, kind, a.lambda, a.steps, a.lr, a.seed)?;
    let criteria = trained.gates.criteria();
    let open: Vec<usize> = (0..criteria.len()).filter(|&i| criteria[i] >= a.threshold).collect();
    let mut report = json!({
        "command": "gates",
        "kind": kind.name(),
        "lambda": a.lambda,
        "steps": a.steps,
        "lr": a.lr,
        "seed": a.seed,
        "threshold": a.threshold,
        "criteria": criteria,
        "open": open,
        "informative": (0..a.informative).collect::<Vec<_>>(),
        "final_loss": trained.loss_trace.last().copied(),
    });
    let base = a.layer.clone().unwrap_or_else(|| "toy".into());
    let gate_name = a.name.clone().unwrap_or_else(|| format!("{base}.gates"));
    put_gates(&mut c, &gate_name, &trained.gates)?;
    report["stored_as"] = json!(gate_name);
    if let (Some(layer), Some(kernel)) = (&a.layer, &kernel) {
        let hw = kernel_hw(&c, layer, a.hw);
        let pruned = prune_by_gates(&trained.gates, kernel, a.threshold, hw.0, hw.1)?;
        let pname = format!("{layer}.gated");
        put_sized_kernel(&mut c, &pname, &pruned.kernel, hw)?;
        let kept = pruned.kept.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
        c.set_metadata(&pname, "kept_outputs", kept)?;
        c.set_metadata(&pname, "source", layer.clone())?;
        report = merge(report, cost_json(&pruned.cost));
        report["method"] = json!("gate-prune");
        report["layer"] = json!(layer);
        report["pruned_as"] = json!(pname);
    }
    if let Some(out) = &a.out {
        save(&c, out)?;
    }
    Ok(report)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Compute(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Compute(format!("cannot parse {}: {e}", path.display())))
}

fn rank_select(a: RankSelectArgs) -> Result<Value, Failure> {
    let plan = match a.strategy {
        StrategyArg::EqualAcc => {
            let path = a
                .acc_table
                .as_ref()
                .ok_or_else(|| Failure::Usage("--strategy equal-acc needs --acc-table".into()))?;
            equal_acc_select(&read_json::<AccTable>(path)?, a.ratio)?
        }
        StrategyArg::GreedyEnergy => {
            let path = a
                .sv_table
                .as_ref()
                .ok_or_else(|| Failure::Usage("--strategy greedy-energy needs --sv-table".into()))?;
            greedy_energy_select(&read_json::<Vec<EnergyLayer>>(path)?, a.ratio)?
        }
    };
    if let Some(out) = &a.out {
        let mut c = match &a.input {
            Some(p) => load(p)?,
            None => Container::new(),
        };
        put_plan(&mut c, &a.name, &plan)?;
        save(&c, out)?;
    }
    let retained = plan.achieved_macs as f64 / plan.original_macs as f64;
    Ok(json!({
        "command": "rank-select",
        "method": "rank-select",
        "strategy": plan.strategy,
        "ranks": plan.ranks,
        "tau": plan.tau,
        "budget": a.ratio,
        "macs_before": plan.original_macs,
        "macs_after": plan.achieved_macs,
        "ratio": retained,
        "ratio_convention": "retained",
        "ratio_removed": 1.0 - retained,
        "stored_as": a.out.as_ref().map(|_| a.name.clone()),
    }))
}

fn report(a: ReportArgs) -> Result<Value, Failure> {
    let c = load(&a.input)?;
    let mut kernels = Vec::new();
    let mut total = (0u64, 0u64);
    for e in c.entries() {
        if e.kind != EntryKind::Kernel || e.shape.len() != 4 {
            continue;
        }
        let kernel = get_kernel(&c, &e.name)?;
        let (t, s, k) = kernel.dims();
        let (h, w) = kernel_hw(&c, &e.name, a.hw);
        let cost = mac_cost(LayerShape::new(s, t, k, h, w), Method::Original, &[])?;
        kernels.push(merge(
            json!({"name": e.name, "shape": shape_json(LayerShape::new(s, t, k, h, w))}),
            cost_json(&cost),
        ));
    }
    let mut layers = Vec::new();
    for name in layer_names(&c) {
        let layer = get_layer(&c, &name)?;
        let source = layer.metadata.get("source").cloned();
        let (h, w) = match (a.hw, layer.metadata.get("h"), layer.metadata.get("w")) {
            (Some(Hw(h, w)), _, _) => (h, w),
            (None, Some(h), Some(w)) => (h.parse().unwrap_or(1), w.parse().unwrap_or(1)),
            _ => source.as_deref().map_or((1, 1), |s| kernel_hw(&c, s, None)),
        };
        let cost = layer.cost(h, w)?;
        total.0 += cost.macs_original;
        total.1 += cost.macs_compressed;
        let (t, s, k) = layer.source_dims;
        layers.push(merge(
            json!({"name": name, "source": source, "shape": shape_json(LayerShape::new(s, t, k, h, w))}),
            cost_json(&cost),
        ));
    }
    let prefixes = |kind: EntryKind| -> Vec<String> {
        c.entries()
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.name.clone())
            .collect()
    };
    let batches: Vec<Value> = prefixes(EntryKind::Patchbatch)
        .iter()
        .filter_map(|n| n.strip_suffix("/inputs"))
        .map(|n| get_batch(&c, n).map(|b| json!({"name": n, "samples": b.len(), "k": b.k, "channels": b.channels})))
        .collect::<Result<_, _>>()?;
    let gates: Vec<Value> = prefixes(EntryKind::Gates)
        .iter()
        .map(|n| {
            get_gates(&c, n).map(|g| {
                let crit = g.criteria();
                json!({"name": n, "count": g.len(), "lambda": g.lambda_reg, "criteria": crit})
            })
        })
        .collect::<Result<_, _>>()?;
    let plans: Vec<Value> = prefixes(EntryKind::Plan)
        .iter()
        .map(|n| get_plan(&c, n).map(|p| json!({"name": n, "ranks": p.ranks, "macs_after": p.achieved_macs, "macs_before": p.original_macs})))
        .collect::<Result<_, _>>()?;
    let total_ratio = if total.0 > 0 { total.1 as f64 / total.0 as f64 } else { 1.0 };
    Ok(json!({
        "command": "report",
        "kernels": kernels,
        "layers": layers,
        "batches": batches,
        "gates": gates,
        "plans": plans,
        "layers_total": {
            "macs_before": total.0,
            "macs_after": total.1,
            "ratio": total_ratio,
            "ratio_convention": "retained",
            "ratio_removed": 1.0 - total_ratio,
        },
    }))
}

fn reconstruct_cmd(a: ReconstructArgs) -> Result<Value, Failure> {
    let c = load(&a.input)?;
    let layer = get_layer(&c, &a.layer)?;
    let source = a
        .source
        .clone()
        .or_else(|| layer.metadata.get("source").cloned())
        .ok_or_else(|| Failure::Usage(format!("layer '{}' records no source kernel; pass --source", a.layer)))?;
    let kernel = get_kernel(&c, &source)?;
    if kernel.dims() != layer.source_dims {
        return Err(Failure::Compute(format!(
            "kernel '{source}' is {:?}, layer was built from {:?}",
            kernel.dims(),
            layer.source_dims
        )));
    }
    let hw = match (a.hw, layer.metadata.get("h"), layer.metadata.get("w")) {
        (Some(Hw(h, w)), _, _) => (h, w),
        (None, Some(h), Some(w)) => (h.parse().unwrap_or(1), w.parse().unwrap_or(1)),
        _ => kernel_hw(&c, &source, None),
    };
    let cost = layer.cost(hw.0, hw.1)?;
    let rebuilt = layer.reconstruct();
    let tail: Option<f64> = layer.metadata.get("tail_energy").and_then(|v| v.parse().ok());
    if let Some(out) = &a.out {
        let mut c2 = c.clone();
        put_sized_kernel(&mut c2, &format!("{}.full", a.layer), &rebuilt, hw)?;
        save(&c2, out)?;
    }
    let head = json!({
        "command": "reconstruct",
        "layer": a.layer,
        "source": source,
        "tail_energy": tail,
    });
    Ok(merge(merge(head, cost_json(&cost)), error_json(&kernel, &layer)))
}
