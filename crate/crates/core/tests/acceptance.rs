//! Acceptance run. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any fails. Criteria 5 to 9 share one training sweep, which takes about
//! forty minutes on a single core.

use std::fmt::Write as _;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use spectral_core::analysis::{
    histogram, path_spectrum, path_tensor, prune_curve, prune_to_core, spectrum_distance, PathSpectrum,
};
use spectral_core::convspec::{
    conv_as_lambda_in, conv_filter_relevance, direct_conv2d, duplicated_form, random_spec, toeplitz_matrix,
    ConvSpec,
};
use spectral_core::experiment::{
    build_student_pair, gradient_probe, run_sweep, Parametrization, StudentSpec, SweepConfig, SweepData,
    TrialResult,
};
use spectral_core::layers::{build_full_phi, phi_inverse, spectral_compose, spectral_forward};
use spectral_core::numerics::sample_standard_gaussian;
use spectral_core::training::{forward, grad_check, RegularizationConfig};
use spectral_core::{Activation, Matrix, SeededRng, SpectralLayer};

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(v: &Verdict) {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {} ({}): {}", v.id, v.name, v.detail);
}

fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum()
    })
}

fn max_abs(a: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn random_layer(rng: &mut SeededRng, n_in: usize, n_out: usize) -> SpectralLayer {
    let phi = Matrix::from_fn(n_out, n_in, |_, _| rng.standard_normal());
    let lambda_in = (0..n_in).map(|_| rng.standard_normal()).collect();
    let lambda_out = (0..n_out).map(|_| rng.standard_normal()).collect();
    SpectralLayer::with_eigenvalues(phi, lambda_in, lambda_out, true, true).unwrap()
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = SeededRng::new(1);
    let (mut inv_err, mut block_err) = (0.0_f64, 0.0_f64);
    for _ in 0..1000 {
        let n_in = rng.random_range(1..=64);
        let n_out = rng.random_range(1..=64);
        let layer = random_layer(&mut rng, n_in, n_out);
        let phi = build_full_phi(&layer);
        let inv = phi_inverse(&phi).unwrap();
        let n = n_in + n_out;
        let prod = naive_matmul(&phi, &inv);
        inv_err = inv_err.max(max_abs(
            (0..n * n).map(|k| prod[(k / n, k % n)] - if k / n == k % n { 1.0 } else { 0.0 }),
        ));
        let composed = spectral_compose(&layer);
        block_err = block_err.max(max_abs((0..n_out * n_in).map(|k| {
            let (i, j) = (k / n_in, k % n_in);
            let expect = (layer.lambda_in[j] - layer.lambda_out[i]) * layer.phi[(i, j)];
            composed[(n_in + i, j)] - expect
        })));
    }
    let elapsed = start.elapsed();
    Verdict {
        id: 1,
        name: "spectral composition",
        pass: inv_err <= 1e-12 && block_err <= 1e-12 && elapsed < Duration::from_secs(10),
        detail: format!(
            "1000 layers up to 64x64, max |Phi(2I-Phi) - I| = {inv_err:.2e}, max block error = {block_err:.2e}, {:.2} s",
            elapsed.as_secs_f64()
        ),
    }
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let reg = RegularizationConfig::default();
    let mut worst = 0.0_f64;
    let mut frozen = 0;
    let mut checks = 0;
    for act in Activation::ALL {
        for p in Parametrization::BOTH {
            for seed in 0..20 {
                let (net, batch) = gradient_probe(p, act, &[10, 8, 5, 1], 16, seed).unwrap();
                let r = grad_check(&net, &batch, &reg, 1e-5).unwrap();
                worst = worst.max(r.max_rel_error);
                frozen += r.nonzero_frozen;
                checks += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    Verdict {
        id: 2,
        name: "gradient check",
        pass: worst < 1e-6 && frozen == 0 && elapsed < Duration::from_secs(60),
        detail: format!(
            "{checks} nets 10-8-5-1, max relative error {worst:.2e}, {frozen} frozen blocks with gradient, {:.1} s",
            elapsed.as_secs_f64()
        ),
    }
}

fn criterion_3() -> Verdict {
    let mut worst = 0.0_f64;
    for (k, h) in [10, 100, 1000].into_iter().enumerate() {
        let spec = StudentSpec::new(h, Parametrization::Spectral, 7 + k as u64);
        let (standard, spectral) = build_student_pair(&spec).unwrap();
        let x = sample_standard_gaussian(&mut SeededRng::new(100 + k as u64), 10, 100).unwrap();
        for i in 0..100 {
            let a = forward(&standard, x.row(i)).unwrap();
            let b = forward(&spectral, x.row(i)).unwrap();
            worst = worst.max((a - b).abs());
        }
    }
    Verdict {
        id: 3,
        name: "paired initialization",
        pass: worst <= 1e-12,
        detail: format!("h in {{10, 100, 1000}}, 100 inputs each, max output gap {worst:.2e}"),
    }
}

/// Cross-correlation over an explicitly zero-padded copy of the image.
fn oracle_conv(x: &Matrix, spec: &ConvSpec) -> Vec<f64> {
    let (h, w) = (spec.input_height + 2 * spec.pad_y, spec.input_width + 2 * spec.pad_x);
    let mut padded = vec![vec![0.0; w]; h];
    for r in 0..spec.input_height {
        for c in 0..spec.input_width {
            padded[r + spec.pad_y][c + spec.pad_x] = x[(r, c)];
        }
    }
    let (fh, fw) = spec.filter.shape();
    let mut out = Vec::new();
    let mut r = 0;
    while r + fh <= h {
        let mut c = 0;
        while c + fw <= w {
            let mut s = 0.0;
            for a in 0..fh {
                for b in 0..fw {
                    s += spec.filter[(a, b)] * padded[r + a][c + b];
                }
            }
            out.push(s);
            c += spec.stride_x;
        }
        r += spec.stride_y;
    }
    out
}

fn criterion_4() -> Verdict {
    let mut rng = SeededRng::new(4);
    let mut worst = [0.0_f64; 5];
    for _ in 0..50 {
        let spec = random_spec(&mut rng, 8, 3).unwrap();
        let x = Matrix::from_fn(spec.input_height, spec.input_width, |_, _| rng.standard_normal());
        let want = oracle_conv(&x, &spec);
        let gap = |got: &[f64]| {
            assert_eq!(got.len(), want.len());
            max_abs(got.iter().zip(&want).map(|(a, b)| a - b))
        };
        let form = duplicated_form(&spec).unwrap();
        let errs = [
            gap(direct_conv2d(&x, &spec).unwrap().as_slice()),
            gap(&toeplitz_matrix(&spec).unwrap().apply(&x).unwrap()),
            gap(&form.apply(&x).unwrap()),
            gap(&spectral_forward(&conv_as_lambda_in(&spec).unwrap(), &form.duplicate(&x)).unwrap()),
            gap(&spectral_forward(&conv_filter_relevance(&spec, 1.0).unwrap(), x.as_slice()).unwrap()),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    Verdict {
        id: 4,
        name: "convolution forms",
        pass: worst.iter().all(|&e| e <= 1e-12),
        detail: format!(
            "50 random specs, max error direct {:.1e}, toeplitz {:.1e}, duplicated {:.1e}, lambda_in {:.1e}, relevance=1 {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    }
}

/// Trials of one `(h, parametrization)` cell.
fn cell(results: &[TrialResult], h: usize, p: Parametrization) -> Vec<&TrialResult> {
    results
        .iter()
        .filter(|r| r.key.h == h && r.key.parametrization == p)
        .collect()
}

fn run(cfg: &SweepConfig, data: &SweepData) -> Result<Vec<TrialResult>, String> {
    let outcomes = run_sweep(cfg, data, |o| {
        let status = match &o.result {
            Ok(r) => format!("test mse {:.3e}, core {}", r.test_mse, r.core_size),
            Err(e) => format!("failed: {e}"),
        };
        eprintln!("  trained h={} {} trial {}: {status}", o.key.h, o.key.parametrization, o.key.trial);
    })
    .map_err(|e| e.to_string())?;
    outcomes
        .into_iter()
        .map(|o| o.result.map_err(|e| format!("h={} {} trial {}: {e}", o.key.h, o.key.parametrization, o.key.trial)))
        .collect()
}

fn sweep_criteria() -> Vec<Verdict> {
    use Parametrization::{Spectral, Standard};
    let base = SweepConfig {
        trials_per_h: 5,
        ..SweepConfig::default()
    };
    let data = SweepData::generate(&base).unwrap();
    let n_teacher = base.teacher.first_hidden();

    let desk_start = Instant::now();
    let desk = run(&SweepConfig { h_values: vec![40, 100], ..base.clone() }, &data);
    let desk_time = desk_start.elapsed();
    let wide = run(&SweepConfig { h_values: vec![200], ..base.clone() }, &data);
    let narrow = run(
        &SweepConfig {
            h_values: vec![10],
            trials_per_h: 3,
            parametrizations: vec![Spectral],
            ..base.clone()
        },
        &data,
    );
    let (desk, wide, narrow) = match (desk, wide, narrow) {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        (a, b, c) => {
            let why = [a.err(), b.err(), c.err()].into_iter().flatten().collect::<Vec<_>>().join("; ");
            return [(5, "desk sweep"), (6, "core size"), (7, "pruning knee"), (8, "relevance histogram"), (9, "path spectra")]
                .into_iter()
                .map(|(id, name)| Verdict {
                    id,
                    name,
                    pass: false,
                    detail: format!("training failed: {why}"),
                })
                .collect();
        }
    };

    let mut out = Vec::new();

    // 5: accuracy parity on the desk grid.
    let mut pass = desk_time <= Duration::from_secs(30 * 60);
    let mut detail = String::new();
    for h in [40, 100] {
        let s = mean(&cell(&desk, h, Spectral).iter().map(|r| r.test_mse).collect::<Vec<_>>());
        let c = mean(&cell(&desk, h, Standard).iter().map(|r| r.test_mse).collect::<Vec<_>>());
        let ratio = s.max(c) / s.min(c);
        pass &= ratio <= 3.0 && s < 5e-2 && c < 5e-2;
        write!(detail, "h={h} spectral {s:.2e} standard {c:.2e} ratio {ratio:.2}; ").unwrap();
    }
    write!(detail, "{:.1} min", desk_time.as_secs_f64() / 60.0).unwrap();
    out.push(Verdict {
        id: 5,
        name: "desk sweep",
        pass,
        detail,
    });

    // 6: core size estimate.
    let mut pass = true;
    let mut detail = String::new();
    let mut means = Vec::new();
    for h in [40, 100] {
        let cores: Vec<f64> = cell(&desk, h, Spectral).iter().map(|r| r.core_size as f64).collect();
        let m = mean(&cores);
        means.push(m);
        pass &= (15.0..=30.0).contains(&m);
        let standard_min = cell(&desk, h, Standard).iter().map(|r| r.core_size).min().unwrap();
        pass &= standard_min as f64 > 0.8 * h as f64;
        write!(detail, "h={h} spectral mean core {m:.1}, standard min above tau {standard_min}; ").unwrap();
    }
    let gap = (means[0] - means[1]).abs();
    pass &= gap <= 5.0;
    write!(detail, "mean gap {gap:.1}").unwrap();
    out.push(Verdict {
        id: 6,
        name: "core size",
        pass,
        detail,
    });

    // 7: pruning curve knee around the teacher width.
    let mut below = Vec::new();
    let mut above = Vec::new();
    for r in cell(&desk, 100, Spectral) {
        let curve = prune_curve(&r.model, &r.relevance, &data.test, n_teacher).unwrap();
        below.push(curve.delta_at(n_teacher - 10).unwrap());
        above.push(curve.delta_at(n_teacher + 10).unwrap());
    }
    let (mb, ma) = (median(&below), median(&above));
    out.push(Verdict {
        id: 7,
        name: "pruning knee",
        pass: ma <= 0.1 * mb,
        detail: format!(
            "h=100 spectral median delta MSE {ma:.3e} at {} nodes vs {mb:.3e} at {} nodes",
            n_teacher + 10,
            n_teacher - 10
        ),
    });

    // 8: relevance histogram shape.
    let first_bins: Vec<f64> = cell(&wide, 200, Spectral)
        .iter()
        .take(3)
        .map(|r| histogram(&r.relevance).first_bin_fraction())
        .collect();
    let narrow_first: Vec<u64> = narrow.iter().map(|r| histogram(&r.relevance).counts[0]).collect();
    out.push(Verdict {
        id: 8,
        name: "relevance histogram",
        pass: first_bins.iter().all(|&f| f >= 0.8) && narrow_first.iter().all(|&c| c == 0),
        detail: format!("h=200 first-bin fractions {first_bins:.3?}, h=10 first-bin counts {narrow_first:?}"),
    });

    // 9: path spectra against the teacher.
    let teacher: PathSpectrum = path_spectrum(&path_tensor(&data.teacher).unwrap()).unwrap();
    let spectral = cell(&wide, 200, Spectral);
    let standard = cell(&wide, 200, Standard);
    let mut wins = 0;
    let mut detail = String::new();
    for (s, c) in spectral.iter().zip(&standard) {
        let pruned = prune_to_core(&s.model, &s.relevance, base.tau).unwrap();
        let ds = spectrum_distance(&path_spectrum(&path_tensor(&pruned).unwrap()).unwrap(), &teacher).unwrap();
        let dc = spectrum_distance(&path_spectrum(&path_tensor(&c.model).unwrap()).unwrap(), &teacher).unwrap();
        if ds < dc {
            wins += 1;
        }
        write!(detail, "({ds:.3e} vs {dc:.3e}) ").unwrap();
    }
    out.push(Verdict {
        id: 9,
        name: "path spectra",
        pass: wins >= 4,
        detail: format!("pruned spectral closer in {wins}/{} trials: {}", spectral.len(), detail.trim_end()),
    });
    out
}

fn main() -> ExitCode {
    let mut verdicts = Vec::new();
    for f in [criterion_1, criterion_2, criterion_3, criterion_4] {
        let v = f();
        report(&v);
        verdicts.push(v);
    }
    for v in sweep_criteria() {
        report(&v);
        verdicts.push(v);
    }
    let failed: Vec<u32> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", verdicts.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
