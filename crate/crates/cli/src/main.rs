mod cli;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::Parser;
use deltaforge::calibration::{
    drift_experiment, fisher_diag, gram, write_drift_csv, Setup, SetupConfig, ToyTask,
};
use deltaforge::checkpoint::{cast_map, load_tensor_map_with, LoadOptions};
use deltaforge::delta::{dare_applicability, render_table, write_stats_csv, StatsOptions};
use deltaforge::merge::recipe::{load_inputs, merge_inputs, MergeRecipe, RunOptions};
use deltaforge::sparsify::{
    drop_delta, drop_finetuned, generate_mask, magnitude_prune, zero_counts, zero_fraction,
    DropConfig, DropVariant, NameFilter, PruneConfig, Scheme,
};
use deltaforge::sweep::{default_probe, run_sweep, write_sweep_csv, SweepOptions, SweepSpec};
use deltaforge::{
    apply_delta, compute_delta, delta_stats, save_tensor_map, upcast, DType, DeltaMap, TensorMap,
};

use cli::{Cli, Command, Emit, Global, SparsifyInput, Target};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.global.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.global.threads)
            .build_global()
        {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render_error(&e));
            ExitCode::FAILURE
        }
    }
}

/// Join the error chain, skipping causes already spelled out by their parent.
fn render_error(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if prev.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
        prev = msg;
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Delta { sft, pre, out } => cmd_delta(g, &sft, &pre, &out),
        Command::Apply {
            pre,
            delta,
            out,
            out_dtype,
        } => cmd_apply(g, &pre, &delta, &out, out_dtype),
        Command::Stats {
            delta,
            sample,
            threshold,
            csv,
            bins,
            json,
        } => cmd_stats(g, &delta, sample, threshold, csv.as_deref(), bins, json),
        Command::Dare {
            input,
            drop_rate,
            variant,
            mask_out,
        } => cmd_dare(g, &input, drop_rate, variant, mask_out.as_deref()),
        Command::Prune {
            input,
            drop_rate,
            rescale,
        } => cmd_prune(g, &input, drop_rate, rescale),
        Command::Merge { recipe, out } => cmd_merge(g, &recipe, out),
        Command::Sweep {
            recipe,
            out,
            drop_rates,
            variants,
            lambdas,
            seeds,
            probe,
            no_timing,
            save_models,
        } => {
            let grid = Grid {
                drop_rates,
                variants,
                lambdas,
                seeds,
            };
            cmd_sweep(
                g,
                &recipe,
                &out,
                grid,
                probe.as_deref(),
                !no_timing,
                save_models,
            )
        }
        Command::Inspect { file, json } => cmd_inspect(g, &file, json),
        Command::Calibrate {
            out_dir,
            tasks,
            dim,
            classes,
            drift_csv,
            drift_rates,
            drift_seeds,
        } => {
            let cfg = SetupConfig {
                seed: g.seed,
                tasks,
                dim,
                classes,
                ..SetupConfig::default()
            };
            cmd_calibrate(
                &cfg,
                &out_dir,
                drift_csv.as_deref(),
                &drift_rates,
                drift_seeds,
            )
        }
    }
}

fn load_opts(g: &Global) -> LoadOptions {
    LoadOptions {
        allow_nonfinite: g.allow_nonfinite,
    }
}

fn load(g: &Global, path: &Path) -> Result<TensorMap> {
    load_tensor_map_with(path, load_opts(g)).with_context(|| format!("loading {}", path.display()))
}

/// Save, then read the file back and check it holds exactly `tm`.
fn write_checked(tm: &TensorMap, path: &Path) -> Result<()> {
    save_tensor_map(tm, path).with_context(|| format!("writing {}", path.display()))?;
    let back = deltaforge::checkpoint::load_tensor_map_with(
        path,
        LoadOptions {
            allow_nonfinite: true,
        },
    )
    .with_context(|| format!("re-reading {}", path.display()))?;
    if !back.bitwise_eq(tm) {
        bail!("{} does not read back identically", path.display());
    }
    Ok(())
}

fn maybe_upcast(g: &Global, tm: TensorMap) -> Result<TensorMap> {
    Ok(match g.dtype {
        Some(dt) => upcast(&tm, dt)?,
        None => tm,
    })
}

fn model_dtype(tm: &TensorMap) -> DType {
    tm.leading_dtype().unwrap_or(DType::F32)
}

fn cmd_delta(g: &Global, sft: &Path, pre: &Path, out: &Path) -> Result<()> {
    let sft = maybe_upcast(g, load(g, sft)?)?;
    let pre = maybe_upcast(g, load(g, pre)?)?;
    let (delta, alignment) = compute_delta(&sft, &pre, g.on_mismatch)?;
    for entry in &alignment.report {
        eprintln!("mismatch: {entry}");
    }
    write_checked(&delta.to_tensor_map(), out)?;
    println!(
        "wrote {} tensors ({} skipped) to {}",
        delta.tensors().len(),
        alignment.report.len(),
        out.display()
    );
    Ok(())
}

fn cmd_apply(
    g: &Global,
    pre: &Path,
    delta: &Path,
    out: &Path,
    out_dtype: Option<DType>,
) -> Result<()> {
    let pre = maybe_upcast(g, load(g, pre)?)?;
    let target = out_dtype.unwrap_or_else(|| model_dtype(&pre));
    let delta = DeltaMap::from_tensor_map(maybe_upcast(g, load(g, delta)?)?);
    let model = cast_map(&apply_delta(&pre, &delta)?, target)?;
    write_checked(&model, out)?;
    println!("wrote {} tensors to {}", model.len(), out.display());
    Ok(())
}

fn cmd_stats(
    g: &Global,
    path: &Path,
    sample: f64,
    threshold: f64,
    csv: Option<&Path>,
    bins: usize,
    json: bool,
) -> Result<()> {
    let delta = DeltaMap::from_tensor_map(load(g, path)?);
    let stats = delta_stats(
        &delta,
        StatsOptions {
            sample_fraction: sample,
            seed: g.seed,
            bins,
        },
    )?;
    let verdict = dare_applicability(&stats, threshold);
    if json {
        let value = serde_json::json!({ "stats": stats, "applicability": verdict });
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        print!("{}", render_table(&stats));
        println!(
            "verdict: {} (max |delta| = {:.6e}, threshold = {})",
            verdict.verdict, verdict.max_abs, verdict.threshold
        );
    }
    if let Some(p) = csv {
        let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
        write_stats_csv(&stats, BufWriter::new(f))?;
    }
    Ok(())
}

/// Inputs of dare/prune: the delta, plus the models it came from when known.
struct Sources {
    delta: Option<DeltaMap>,
    sft: Option<TensorMap>,
    pre: Option<TensorMap>,
}

fn load_sources(g: &Global, input: &SparsifyInput) -> Result<Sources> {
    let pre = input.pre.as_deref().map(|p| load(g, p)).transpose()?;
    let pre = pre.map(|p| maybe_upcast(g, p)).transpose()?;
    if let Some(d) = &input.delta {
        if input.on == Target::Finetuned {
            bail!("--on finetuned needs --sft instead of --delta");
        }
        let delta = DeltaMap::from_tensor_map(maybe_upcast(g, load(g, d)?)?);
        return Ok(Sources {
            delta: Some(delta),
            sft: None,
            pre,
        });
    }
    let sft_path = input
        .sft
        .as_deref()
        .ok_or_else(|| anyhow!("give either --delta or --sft (with --pre)"))?;
    let sft = maybe_upcast(g, load(g, sft_path)?)?;
    let delta = match &pre {
        Some(p) => {
            let (d, alignment) = compute_delta(&sft, p, g.on_mismatch)?;
            for entry in &alignment.report {
                eprintln!("mismatch: {entry}");
            }
            Some(d)
        }
        None if input.on == Target::Delta => bail!("--sft needs --pre to form a delta"),
        None => None,
    };
    Ok(Sources {
        delta,
        sft: Some(sft),
        pre,
    })
}

fn exclude_filter(input: &SparsifyInput) -> Result<NameFilter> {
    Ok(match &input.exclude {
        Some(p) => NameFilter::new(p)?,
        None => NameFilter::none(),
    })
}

fn print_sparsity(tm: &TensorMap) {
    for (name, zeros, n) in zero_counts(tm) {
        println!(
            "{name}: kept {} of {n} ({:.4} zero)",
            n - zeros,
            zeros as f64 / n.max(1) as f64
        );
    }
    println!("total zero fraction: {:.6}", zero_fraction(tm));
}

/// Write a sparsified delta (or model) according to `--emit`.
fn emit(
    input: &SparsifyInput,
    src: &Sources,
    delta: Option<DeltaMap>,
    model: Option<TensorMap>,
) -> Result<()> {
    let out_dtype = |fallback: &TensorMap| input.out_dtype.unwrap_or_else(|| model_dtype(fallback));
    let written = match input.emit {
        Emit::Delta => {
            let delta = match (delta, &model, &src.pre) {
                (Some(d), _, _) => d,
                (None, Some(m), Some(pre)) => {
                    compute_delta(m, pre, deltaforge::MismatchPolicy::Skip)?.0
                }
                _ => bail!("--emit delta after --on finetuned needs --pre"),
            };
            print_sparsity(delta.tensors());
            delta.to_tensor_map()
        }
        Emit::Model => {
            let reference = src
                .sft
                .as_ref()
                .or(src.pre.as_ref())
                .expect("sources checked");
            let model = match (model, delta) {
                (Some(m), _) => m,
                (None, Some(d)) => {
                    print_sparsity(d.tensors());
                    let pre = src
                        .pre
                        .as_ref()
                        .ok_or_else(|| anyhow!("--emit model needs --pre"))?;
                    apply_delta(pre, &d)?
                }
                (None, None) => unreachable!("no output"),
            };
            cast_map(&model, out_dtype(reference))?
        }
    };
    write_checked(&written, &input.out)?;
    println!("wrote {}", input.out.display());
    Ok(())
}

fn cmd_dare(
    g: &Global,
    input: &SparsifyInput,
    drop_rate: f64,
    variant: DropVariant,
    mask_out: Option<&Path>,
) -> Result<()> {
    let src = load_sources(g, input)?;
    let cfg = DropConfig {
        drop_rate,
        seed: g.seed,
        variant,
        exclude: exclude_filter(input)?,
    };
    cfg.validate()?;
    match input.on {
        Target::Delta => {
            let delta = src.delta.as_ref().expect("delta target has a delta");
            if let Some(p) = mask_out {
                write_checked(&generate_mask(delta, &cfg)?.to_tensor_map()?, p)?;
            }
            if drop_rate == 0.0 && input.emit == Emit::Model {
                // keep the input bits exactly
                if let Some(sft) = &src.sft {
                    let model = sft.restrict(delta.tensors().names());
                    let mut full = src.pre.clone().unwrap_or_default();
                    for (n, t) in model.iter() {
                        full.insert(n, t.clone())?;
                    }
                    *full.metadata_mut() = sft.metadata().clone();
                    return emit(input, &src, None, Some(full));
                }
            }
            let dropped = drop_delta(delta, &cfg)?;
            emit(input, &src, Some(dropped), None)
        }
        Target::Finetuned => {
            if mask_out.is_some() {
                bail!("--mask-out is only supported with --on delta");
            }
            let sft = src.sft.as_ref().expect("finetuned target has a model");
            let model = drop_finetuned(sft, &Scheme::Drop(cfg))?;
            print_sparsity(&model);
            emit(input, &src, None, Some(model))
        }
    }
}

fn cmd_prune(g: &Global, input: &SparsifyInput, drop_rate: f64, rescale: bool) -> Result<()> {
    let src = load_sources(g, input)?;
    let cfg = PruneConfig {
        drop_rate,
        rescale_after: rescale,
        exclude: exclude_filter(input)?,
    };
    cfg.validate()?;
    match input.on {
        Target::Delta => {
            let delta = src.delta.as_ref().expect("delta target has a delta");
            let pruned = magnitude_prune(delta, &cfg)?;
            emit(input, &src, Some(pruned), None)
        }
        Target::Finetuned => {
            let sft = src.sft.as_ref().expect("finetuned target has a model");
            let model = drop_finetuned(sft, &Scheme::Prune(cfg))?;
            print_sparsity(&model);
            emit(input, &src, None, Some(model))
        }
    }
}

fn run_options(g: &Global) -> RunOptions {
    RunOptions {
        policy: g.on_mismatch,
        compute: g.dtype,
        load: load_opts(g),
    }
}

fn report_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".report.json");
    PathBuf::from(s)
}

fn cmd_merge(g: &Global, recipe_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let recipe = MergeRecipe::load(recipe_path)
        .with_context(|| format!("recipe {}", recipe_path.display()))?;
    let out = out
        .or_else(|| recipe.output.path.as_ref().map(|p| recipe.resolve(p)))
        .ok_or_else(|| anyhow!("no output path: pass --out or set output.path in the recipe"))?;
    let job = recipe.job()?;
    let inputs = load_inputs(&recipe, &run_options(g))?;
    let outcome = merge_inputs(&job, &inputs)?;
    write_checked(&outcome.merged, &out)?;
    let report = report_path(&out);
    std::fs::write(
        &report,
        serde_json::to_string_pretty(&outcome.report)? + "\n",
    )
    .with_context(|| format!("writing {}", report.display()))?;
    for line in &inputs.alignment {
        eprintln!("mismatch: {line}");
    }
    println!(
        "merged {} models with {} into {} ({} tensors); report in {}",
        outcome.report.models,
        outcome.report.method,
        out.display(),
        outcome.merged.len(),
        report.display()
    );
    Ok(())
}

struct Grid {
    drop_rates: Vec<f64>,
    variants: Vec<DropVariant>,
    lambdas: Vec<f64>,
    seeds: Vec<u64>,
}

fn cmd_sweep(
    g: &Global,
    recipe_path: &Path,
    out: &Path,
    grid: Grid,
    probe: Option<&Path>,
    timing: bool,
    save_models: Option<PathBuf>,
) -> Result<()> {
    let recipe = MergeRecipe::load(recipe_path)
        .with_context(|| format!("recipe {}", recipe_path.display()))?;
    let job = recipe.job()?;
    let spec = SweepSpec {
        drop_rates: grid.drop_rates,
        variants: grid.variants,
        lambdas: if grid.lambdas.is_empty() {
            vec![recipe.lambda]
        } else {
            grid.lambdas
        },
        seeds: if grid.seeds.is_empty() {
            vec![g.seed]
        } else {
            grid.seeds
        },
    };
    spec.validate()?;
    let inputs = load_inputs(&recipe, &run_options(g))?;
    let weight = inputs.models[0]
        .get(deltaforge::calibration::WEIGHT)
        .filter(|w| w.shape().len() == 2)
        .ok_or_else(|| {
            anyhow!("sweeps evaluate linear-softmax checkpoints with a 2-D tensor 'W'")
        })?;
    let (classes, dim) = (weight.shape()[0], weight.shape()[1]);
    let probe = match probe {
        Some(p) => ToyTask::from_tensor_map(&load(g, p)?, classes)?,
        None => default_probe(classes, dim, g.seed)?,
    };
    let opts = SweepOptions {
        timing,
        save_models,
    };
    let rows = run_sweep(&job, &inputs, &spec, &probe, &opts)?;
    let f = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_sweep_csv(&rows, BufWriter::new(f))?;
    let failed: Vec<_> = rows
        .iter()
        .filter_map(|r| r.outcome.as_ref().err())
        .collect();
    println!(
        "wrote {} rows to {} ({} failed)",
        rows.len(),
        out.display(),
        failed.len()
    );
    if !rows.is_empty() && failed.len() == rows.len() {
        bail!("every sweep cell failed; first error: {}", failed[0]);
    }
    Ok(())
}

fn cmd_inspect(g: &Global, file: &Path, json: bool) -> Result<()> {
    let tm = load(g, file)?;
    if json {
        let tensors: Vec<_> = tm
            .iter()
            .map(|(n, t)| serde_json::json!({ "name": n, "dtype": t.dtype(), "shape": t.shape() }))
            .collect();
        let value = serde_json::json!({ "tensors": tensors, "metadata": tm.metadata(), "numel": tm.numel() });
        println!("{}", serde_json::to_string_pretty(&value)?);
        return Ok(());
    }
    let width = tm.names().map(str::len).max().unwrap_or(4).max(4);
    println!("{:<width$}  {:<5}  shape", "name", "dtype");
    for (name, t) in tm.iter() {
        println!(
            "{name:<width$}  {:<5}  {:?}",
            t.dtype().to_string(),
            t.shape()
        );
    }
    for (k, v) in tm.metadata() {
        println!("metadata {k} = {v}");
    }
    println!("{} tensors, {} elements", tm.len(), tm.numel());
    Ok(())
}

fn cmd_calibrate(
    cfg: &SetupConfig,
    dir: &Path,
    drift_csv: Option<&Path>,
    rates: &[f64],
    drift_seeds: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let setup = Setup::build(cfg)?;
    let save = |tm: &TensorMap, name: String| write_checked(tm, &dir.join(name));
    save(
        &setup.pretrained.to_tensor_map(),
        "pretrained.safetensors".into(),
    )?;
    for (k, (model, train)) in setup.finetuned.iter().zip(&setup.train).enumerate() {
        save(&model.to_tensor_map(), format!("finetuned_{k}.safetensors"))?;
        save(
            &fisher_diag(model, train)?,
            format!("fisher_{k}.safetensors"),
        )?;
        save(&gram(train)?, format!("gram_{k}.safetensors"))?;
        save(
            &setup.probes[k].to_tensor_map(),
            format!("probe_{k}.safetensors"),
        )?;
        println!(
            "task {k}: probe accuracy pretrained {:.4}, fine-tuned {:.4}",
            setup.pretrained.accuracy(&setup.probes[k])?,
            model.accuracy(&setup.probes[k])?
        );
    }
    save(
        &setup.pooled_probe()?.to_tensor_map(),
        "probe.safetensors".into(),
    )?;
    if let Some(path) = drift_csv {
        let seeds: Vec<u64> = (0..drift_seeds).collect();
        let rows = drift_experiment(
            &setup.pretrained,
            &setup.finetuned[0],
            &setup.probes[0],
            rates,
            &[DropVariant::Dare, DropVariant::DropOnly],
            &seeds,
        )?;
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_drift_csv(&rows, BufWriter::new(f))?;
        println!("wrote {} drift rows to {}", rows.len(), path.display());
    }
    println!("wrote calibration setup to {}", dir.display());
    Ok(())
}
