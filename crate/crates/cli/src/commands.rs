use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use spectral_core::analysis::{
    estimate_core_size, histogram, path_spectrum, path_tensor, prune_curve, prune_to_core, relevance,
    spectrum_distance, Histogram,
};
use spectral_core::convspec::{
    conv_filter_relevance, direct_conv2d, duplicated_form, equivalence_errors, random_spec, toeplitz_matrix,
    ConvSpec, EquivalenceErrors,
};
use spectral_core::experiment::{
    build_teacher, gradient_probe, run_sweep, test_set, Parametrization, SweepData, TrialKey, TrialOutcome,
};
use spectral_core::layers::spectral_forward;
use spectral_core::numerics::sample_standard_gaussian;
use spectral_core::training::{self, grad_check_against, loss_and_gradients, RegularizationConfig};
use spectral_core::{Matrix, Network, SeededRng};

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::manifest::{write_file, Recorder};
use crate::model_file::{self, Origin};
use crate::tables::{self, HistogramRow, HistoryRow, PathRow, PruneRow, SummaryRow};

const CONV_TOLERANCE: f64 = 1e-12;
const PARTIAL_DIR: &str = ".partial";

pub fn gen_teacher(cfg: &Config, out: &Path) -> CliResult<()> {
    let spec = cfg.teacher_spec()?;
    let mut rec = Recorder::new(out, "gen-teacher", cfg)?;
    let teacher = rec.time("build", || build_teacher(&spec))?;
    let path = rec.output("teacher.model.json");
    model_file::save(&path, &teacher, None)?;
    rec.result("dims", teacher.dims());
    println!("teacher {:?} ({}) -> {}", teacher.dims(), teacher.activation, path.display());
    rec.finish()?;
    Ok(())
}

fn trial_stem(key: &TrialKey) -> String {
    format!("h{}_{}_t{}", key.h, key.parametrization.name(), key.trial)
}

fn summary_row(key: &TrialKey, train_mse: f64, test_mse: f64, core_size: usize) -> SummaryRow {
    SummaryRow {
        h: key.h,
        parametrization: key.parametrization.name(),
        trial: key.trial,
        train_mse,
        test_mse,
        core_size,
    }
}

/// Writes one finished trial's files: model, history and its summary row in
/// a private temporary file.
fn write_trial(out: &Path, cfg_seed: u64, outcome: &TrialOutcome) -> CliResult<()> {
    let Ok(r) = &outcome.result else {
        return Ok(());
    };
    let stem = trial_stem(&outcome.key);
    let origin = Origin::from_key(&outcome.key, cfg_seed + outcome.key.trial as u64);
    let model_path = out.join("models").join(format!("{stem}.model.json"));
    write_file(
        &model_path,
        model_file::ModelFile::from_network(&r.model, Some(origin)).to_json()?.as_bytes(),
    )?;

    let tests: BTreeMap<usize, f64> = r.history.test_mse.iter().copied().collect();
    let history: Vec<HistoryRow> = r
        .history
        .train_loss
        .iter()
        .enumerate()
        .map(|(i, &loss)| HistoryRow {
            epoch: i + 1,
            train_loss: loss,
            test_mse: tests.get(&(i + 1)).copied(),
        })
        .collect();
    tables::write(
        &out.join("history").join(format!("{stem}.csv")),
        &[],
        tables::HISTORY_HEADER,
        &history,
    )?;

    let row = summary_row(&outcome.key, r.train_mse, r.test_mse, r.core_size);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.serialize(&row)
        .map_err(|e| CliError::Validation(format!("csv: {e}")))?;
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Validation(format!("csv: {e}")))?;
    write_file(&out.join(PARTIAL_DIR).join(format!("{stem}.csv")), &bytes)
}

pub fn sweep(cfg: &Config, out: &Path) -> CliResult<()> {
    let sweep_cfg = cfg.sweep_config()?;
    let mut rec = Recorder::new(out, "sweep", cfg)?;
    let data = rec.time("data", || SweepData::generate(&sweep_cfg))?;
    let teacher_path = rec.output("teacher.model.json");
    model_file::save(&teacher_path, &data.teacher, None)?;

    let partial = out.join(PARTIAL_DIR);
    if partial.exists() {
        std::fs::remove_dir_all(&partial).map_err(|e| CliError::io(&partial, e))?;
    }
    let keys = sweep_cfg.keys();
    eprintln!(
        "sweep: {} trials ({} widths x {} parametrizations x {} trials), {} epochs",
        keys.len(),
        sweep_cfg.h_values.len(),
        sweep_cfg.parametrizations.len(),
        sweep_cfg.trials_per_h,
        sweep_cfg.train.epochs
    );
    let write_errors: Mutex<Vec<CliError>> = Mutex::new(Vec::new());
    let outcomes = rec.time("train", || {
        run_sweep(&sweep_cfg, &data, |o| {
            match &o.result {
                Ok(r) => eprintln!(
                    "  done h={} {} trial={}: test_mse={:.4e} core={}",
                    o.key.h, o.key.parametrization, o.key.trial, r.test_mse, r.core_size
                ),
                Err(e) => eprintln!(
                    "  FAILED h={} {} trial={}: {e}",
                    o.key.h, o.key.parametrization, o.key.trial
                ),
            }
            if let Err(e) = write_trial(out, sweep_cfg.base_seed, o) {
                write_errors.lock().expect("error list lock").push(e);
            }
        })
    })?;
    if let Some(e) = write_errors.into_inner().expect("error list lock").into_iter().next() {
        return Err(e);
    }

    // Merge per-trial rows in key order.
    let mut summary = tables::render::<SummaryRow>(&[], tables::SUMMARY_HEADER, &[])?;
    let mut hists: BTreeMap<(usize, Parametrization), Histogram> = BTreeMap::new();
    let mut failures = Vec::new();
    for o in &outcomes {
        match &o.result {
            Ok(r) => {
                let stem = trial_stem(&o.key);
                let p = partial.join(format!("{stem}.csv"));
                summary.extend(std::fs::read(&p).map_err(|e| CliError::io(&p, e))?);
                rec.output(format!("models/{stem}.model.json"));
                rec.output(format!("history/{stem}.csv"));
                hists
                    .entry((o.key.h, o.key.parametrization))
                    .or_insert_with(Histogram::empty)
                    .merge(&histogram(&r.relevance));
            }
            Err(e) => failures.push((o.key, e.clone())),
        }
    }
    let summary_path = rec.output("sweep_summary.csv");
    write_file(&summary_path, &summary)?;
    if partial.exists() {
        std::fs::remove_dir_all(&partial).map_err(|e| CliError::io(&partial, e))?;
    }

    let mut hist_rows = Vec::new();
    for ((h, p), hist) in &hists {
        for (b, &count) in hist.counts.iter().enumerate() {
            hist_rows.push(HistogramRow {
                h: *h,
                parametrization: p.name(),
                bin_lo: hist.bin_edges[b],
                bin_hi: hist.bin_edges[b + 1],
                count,
            });
        }
    }
    tables::write(&rec.output("histograms.csv"), &[], tables::HISTOGRAM_HEADER, &hist_rows)?;

    let mut means = BTreeMap::new();
    for (h, p) in hists.keys() {
        let rs: Vec<_> = outcomes
            .iter()
            .filter(|o| o.key.h == *h && o.key.parametrization == *p)
            .filter_map(|o| o.result.as_ref().ok())
            .collect();
        let n = rs.len() as f64;
        let mse = rs.iter().map(|r| r.test_mse).sum::<f64>() / n;
        let core = rs.iter().map(|r| r.core_size as f64).sum::<f64>() / n;
        println!("h={h:<5} {p:<9} trials={:<3} mean test_mse={mse:.4e} mean core_size={core:.1}", rs.len());
        means.insert(format!("h{h}_{p}"), serde_json::json!({"mean_test_mse": mse, "mean_core_size": core}));
    }
    rec.result("means", means);
    rec.result("failed_trials", failures.len());
    println!("wrote {}", summary_path.display());
    rec.finish()?;

    if failures.is_empty() {
        return Ok(());
    }
    let numerical = failures.iter().any(|(_, e)| e.is_numerical());
    let msg = format!(
        "{} of {} trials failed; first: h={} {} trial={}: {}",
        failures.len(),
        outcomes.len(),
        failures[0].0.h,
        failures[0].0.parametrization,
        failures[0].0.trial,
        failures[0].1
    );
    Err(if numerical {
        CliError::Numerical(msg)
    } else {
        CliError::Validation(msg)
    })
}

fn load_teacher(cfg: &Config, teacher: Option<&Path>) -> CliResult<Network> {
    match teacher {
        Some(p) => Ok(model_file::load(p)?.0),
        None => Ok(build_teacher(&cfg.teacher_spec()?)?),
    }
}

pub fn prune(cfg: &Config, out: &Path, models: &[PathBuf], teacher: Option<&Path>, write_pruned: bool) -> CliResult<()> {
    let sweep_cfg = cfg.sweep_config()?;
    let n_teacher = cfg.n_teacher();
    let tau = sweep_cfg.tau;
    let mut rec = Recorder::new(out, "prune", cfg)?;
    let teacher = load_teacher(cfg, teacher)?;
    let test = rec.time("data", || test_set(&teacher, &sweep_cfg))?;

    let mut rows = Vec::new();
    let mut comments = Vec::new();
    let mut cores = BTreeMap::new();
    for path in models {
        let (net, origin) = model_file::load(path)?;
        if net.input_dim() != test.dim() || net.output_dim() != 1 {
            return Err(CliError::Validation(format!(
                "{}: model maps {} -> {} but the test set has {} inputs and scalar targets",
                path.display(),
                net.input_dim(),
                net.output_dim(),
                test.dim()
            )));
        }
        let rel = relevance(&net.layers[0]);
        let core = estimate_core_size(&rel, tau)?;
        let curve = rec.time("prune", || prune_curve(&net, &rel, &test, n_teacher))?;
        let h = net.layers[0].n_out();
        let trial = origin.as_ref().map_or(0, |o| o.trial);
        comments.push(format!(
            "model={} h={h} trial={trial} core_size={core} tau={tau} n_teacher={n_teacher} full_mse={}",
            path.display(),
            curve.full_mse
        ));
        println!(
            "{}: h={h} core_size={core} (tau={tau}) full test_mse={:.4e}",
            path.display(),
            curve.full_mse
        );
        rows.extend(curve.points.iter().map(|p| PruneRow {
            h,
            trial,
            n_lambda: p.n_lambda,
            n_teacher,
            delta_mse: p.delta_mse,
        }));
        cores.insert(path.display().to_string(), core);
        if write_pruned {
            let pruned = prune_to_core(&net, &rel, tau)?;
            let stem = path
                .file_name()
                .map(|s| s.to_string_lossy().trim_end_matches(".model.json").to_string())
                .unwrap_or_else(|| "model".into());
            let dest = rec.output(format!("pruned/{stem}.model.json"));
            model_file::save(&dest, &pruned, origin)?;
            println!("  pruned to {} nodes -> {}", pruned.layers[0].n_out(), dest.display());
        }
    }
    tables::write(&rec.output("prune_curve.csv"), &comments, tables::PRUNE_HEADER, &rows)?;
    rec.result("core_size", cores);
    rec.finish()?;
    Ok(())
}

pub fn paths(cfg: &Config, out: &Path, a: &Path, b: &Path, prune_a: bool, prune_b: bool) -> CliResult<()> {
    let tau = cfg.prune.tau;
    let mut rec = Recorder::new(out, "paths", cfg)?;
    let mut spectra = Vec::new();
    for (id, path, prune) in [("a", a, prune_a), ("b", b, prune_b)] {
        let (mut net, _) = model_file::load(path)?;
        if net.layers.len() < 2 {
            return Err(CliError::Validation(format!(
                "{}: path spectra need at least two linear transfers, model has {}",
                path.display(),
                net.layers.len()
            )));
        }
        if prune {
            let rel = relevance(&net.layers[0]);
            net = prune_to_core(&net, &rel, tau)?;
        }
        let spectrum = path_spectrum(&path_tensor(&net)?)?;
        println!(
            "{id}: {} ({} paths{})",
            path.display(),
            spectrum.len(),
            if prune {
                format!(", pruned to {} nodes", net.layers[0].n_out())
            } else {
                String::new()
            }
        );
        spectra.push((id, spectrum));
    }
    let distance = spectrum_distance(&spectra[0].1, &spectra[1].1)?;
    let rows: Vec<PathRow> = spectra
        .iter()
        .flat_map(|(id, s)| {
            s.frac_index.iter().zip(&s.sorted_values).map(|(&f, &g)| PathRow {
                network_id: id.to_string(),
                frac_index: f,
                gamma_value: g,
            })
        })
        .collect();
    tables::write(&rec.output("paths.csv"), &[], tables::PATH_HEADER, &rows)?;
    println!("spectrum_distance = {distance:e}");
    rec.result("spectrum_distance", distance);
    rec.finish()?;
    Ok(())
}

pub fn grad_check(cfg: &Config, out: &Path, corrupt: bool) -> CliResult<()> {
    let g = &cfg.grad_check;
    let activations = cfg.grad_check_activations()?;
    let reg = RegularizationConfig {
        alpha_w: cfg.reg.alpha_w,
        alpha_lambda: cfg.reg.alpha_lambda,
        alpha_phi: cfg.reg.alpha_phi,
    };
    reg.validate()?;
    if g.seeds == 0 || g.step.is_nan() || g.step <= 0.0 {
        return Err(CliError::Validation("grad_check needs seeds >= 1 and a positive step".into()));
    }
    let mut rec = Recorder::new(out, "grad-check", cfg)?;
    // (activation, parametrization, layer kind) -> max relative error
    let mut worst: BTreeMap<(String, &'static str, &'static str), f64> = BTreeMap::new();
    let mut frozen_violations = 0;
    let mut overall: f64 = 0.0;
    rec.time("check", || -> CliResult<()> {
        for &act in &activations {
            for p in Parametrization::BOTH {
                for s in 0..g.seeds {
                    let (net, batch) = gradient_probe(p, act, &g.dims, g.batch_size, cfg.seed + s as u64)?;
                    let report = if corrupt {
                        let (_, mut grads) = loss_and_gradients(&net, &batch, &reg)?;
                        grads.blocks_mut()[0][0] += 1e-2;
                        grad_check_against(&net, &batch, &reg, g.step, &grads)?
                    } else {
                        training::grad_check(&net, &batch, &reg, g.step)?
                    };
                    frozen_violations += report.nonzero_frozen;
                    overall = overall.max(report.max_rel_error);
                    for b in &report.blocks {
                        let kind = net.layers[b.layer].kind_name();
                        let e = worst.entry((act.name().to_string(), p.name(), kind)).or_insert(0.0);
                        *e = e.max(b.max_rel_error);
                    }
                }
            }
        }
        Ok(())
    })?;

    println!("{:<10} {:<14} {:<10} max_rel_error", "activation", "parametrization", "layer");
    let mut table = BTreeMap::new();
    for ((act, p, kind), e) in &worst {
        let flag = if *e > g.tolerance { "  FAIL" } else { "" };
        println!("{act:<10} {p:<14} {kind:<10} {e:.3e}{flag}");
        table.insert(format!("{act}/{p}/{kind}"), *e);
    }
    println!(
        "max relative error {overall:.3e} over {} seeds (step {}, tolerance {})",
        g.seeds, g.step, g.tolerance
    );
    rec.result("max_rel_error", overall);
    rec.result("per_case", table);
    rec.result("nonzero_frozen_gradients", frozen_violations);
    rec.finish()?;

    if frozen_violations > 0 {
        return Err(CliError::Numerical(format!(
            "{frozen_violations} untrainable blocks reported nonzero gradients"
        )));
    }
    if overall > g.tolerance {
        return Err(CliError::Numerical(format!(
            "gradient check failed: max relative error {overall:.3e} > {}",
            g.tolerance
        )));
    }
    Ok(())
}

fn fmt_matrix(m: &Matrix) -> String {
    let mut s = String::new();
    for r in 0..m.rows() {
        for v in m.row(r) {
            let _ = write!(s, "{v:>8.3}");
        }
        s.push('\n');
    }
    s
}

pub fn conv_demo(cfg: &Config, out: &Path, toeplitz_csv: bool) -> CliResult<()> {
    let c = &cfg.conv;
    let mut rng = SeededRng::new(cfg.seed);
    let filter = Matrix::from_fn(c.filter_size, c.filter_size, |_, _| rng.standard_normal());
    let spec = ConvSpec::new(c.input_height, c.input_width, filter)
        .with_stride(c.stride, c.stride)
        .with_padding(c.pad, c.pad);
    let (oh, ow) = spec
        .output_dims()
        .map_err(|e| CliError::Validation(format!("conv: {e}")))?;
    if !c.relevance.is_finite() {
        return Err(CliError::Validation("conv.relevance must be finite".into()));
    }
    let mut rec = Recorder::new(out, "conv-demo", cfg)?;

    let x = sample_standard_gaussian(&mut rng, c.input_width, c.input_height)?;
    let toeplitz = toeplitz_matrix(&spec)?;
    let form = duplicated_form(&spec)?;
    println!(
        "input {}x{}, filter {}x{}, stride {}, pad {} -> output {oh}x{ow}",
        c.input_height, c.input_width, c.filter_size, c.filter_size, c.stride, c.pad
    );
    print!("filter:\n{}", fmt_matrix(&spec.filter));
    print!(
        "Toeplitz operator ({}x{}):\n{}",
        toeplitz.matrix.rows(),
        toeplitz.matrix.cols(),
        fmt_matrix(&toeplitz.matrix)
    );
    println!(
        "duplicated input ({} entries), source pixel per entry: {:?}",
        form.expanded_len(),
        form.duplication_map
    );
    println!(
        "binary phi ({}x{}), output row per column: {:?}",
        form.binary_phi.rows(),
        form.binary_phi.cols(),
        (0..form.binary_phi.cols())
            .map(|e| form.binary_phi.column(e).iter().position(|&v| v == 1.0).unwrap_or(usize::MAX))
            .collect::<Vec<_>>()
    );
    println!(
        "lambda_in (filter taps per column): {:?}",
        form.lambda_in.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()
    );

    let shown = equivalence_errors(&spec, &x)?;
    let reference = direct_conv2d(&x, &spec)?;
    let scaled = spectral_forward(&conv_filter_relevance(&spec, c.relevance)?, x.as_slice())?;
    let relevance_err = scaled
        .iter()
        .zip(reference.as_slice())
        .fold(0.0_f64, |m, (s, r)| m.max((s - c.relevance * r).abs()));
    print_errors("displayed case", &shown);
    println!("relevance {} form vs relevance x conv: {relevance_err:.3e}", c.relevance);

    let mut worst = EquivalenceErrors::default();
    rec.time("random_cases", || -> CliResult<()> {
        for _ in 0..c.cases {
            let s = random_spec(&mut rng, c.max_input, c.max_filter)?;
            let xi = sample_standard_gaussian(&mut rng, s.input_width, s.input_height)?;
            worst = worst.worst(equivalence_errors(&s, &xi)?);
        }
        Ok(())
    })?;
    print_errors(&format!("{} random cases", c.cases), &worst);

    if toeplitz_csv {
        let header: Vec<String> = (0..toeplitz.matrix.cols()).map(|j| format!("x{j}")).collect();
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<f64>> = (0..toeplitz.matrix.rows())
            .map(|r| toeplitz.matrix.row(r).to_vec())
            .collect();
        let path = rec.output("toeplitz.csv");
        tables::write(&path, &[], &header_refs, &rows)?;
        println!("wrote {}", path.display());
    }

    let max_err = shown.max().max(worst.max()).max(relevance_err);
    rec.result("max_error", max_err);
    rec.result("relevance_error", relevance_err);
    rec.finish()?;
    println!("max equivalence error {max_err:.3e}");
    if max_err > CONV_TOLERANCE {
        return Err(CliError::Numerical(format!(
            "convolution forms disagree: max error {max_err:.3e} > {CONV_TOLERANCE:e}"
        )));
    }
    Ok(())
}

fn print_errors(label: &str, e: &EquivalenceErrors) {
    println!(
        "{label}: max |form - direct| toeplitz {:.3e}, duplicated {:.3e}, lambda_in {:.3e}, relevance=1 {:.3e}",
        e.toeplitz, e.duplicated, e.lambda_in, e.relevance_one
    );
}
