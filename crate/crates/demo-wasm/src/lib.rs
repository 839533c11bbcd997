//! WebAssembly bindings behind `www/index.html`.
//!
//! Every exported function takes plain numbers and returns a JSON string; the
//! `*_report` functions hold the logic and run natively as well.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use spectral_core::analysis::{
    estimate_core_size, histogram, prune_curve, relevance, Histogram,
};
use spectral_core::convspec::{
    conv_filter_relevance, direct_conv2d, duplicated_form, equivalence_errors, toeplitz_matrix, ConvSpec,
};
use spectral_core::experiment::{
    build_student_pair, build_teacher, generate_dataset, Parametrization, StudentSpec, TeacherSpec,
};
use spectral_core::layers::{
    build_full_lambda, build_full_phi, effective_weights, phi_inverse, spectral_compose, spectral_forward,
};
use spectral_core::numerics::sample_standard_gaussian;
use spectral_core::training::{mse, train, RegularizationConfig, TrainConfig};
use spectral_core::{Matrix, SeededRng, SpectralLayer};

/// Largest layer the composition view will build.
pub const MAX_COMPOSE: usize = 12;
pub const MAX_CONV_INPUT: usize = 10;
pub const MAX_CONV_FILTER: usize = 4;
pub const MAX_DEMO_WIDTH: usize = 200;
pub const MAX_DEMO_EPOCHS: usize = 2000;

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn max_gap(a: &Matrix, b: &Matrix) -> f64 {
    a.max_abs_diff(b).unwrap_or(f64::NAN)
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("report serializes")
}

fn check_range(name: &str, v: usize, lo: usize, hi: usize) -> Result<(), String> {
    if v < lo || v > hi {
        return Err(format!("{name} must lie in {lo}..={hi}, got {v}"));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ComposeReport {
    pub n_in: usize,
    pub n_out: usize,
    pub phi: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub phi_inverse: Vec<Vec<f64>>,
    pub adjacency: Vec<Vec<f64>>,
    pub effective_weights: Vec<Vec<f64>>,
    /// `max |Φ(2I − Φ) − I|`.
    pub inverse_error: f64,
    /// Largest gap between the lower-left block of `ΦΛΦ⁻¹` and the effective weights.
    pub block_error: f64,
}

/// A random spectral layer written out in full: eigenvectors, eigenvalues,
/// the inverse and the composed adjacency matrix.
pub fn compose_report(n_in: usize, n_out: usize, seed: u64) -> Result<ComposeReport, String> {
    check_range("n_in", n_in, 1, MAX_COMPOSE)?;
    check_range("n_out", n_out, 1, MAX_COMPOSE)?;
    let mut rng = SeededRng::new(seed);
    let phi = sample_standard_gaussian(&mut rng, n_in, n_out).map_err(|e| e.to_string())?;
    let lambda_in = (0..n_in).map(|_| rng.standard_normal()).collect();
    let lambda_out = (0..n_out).map(|_| rng.standard_normal()).collect();
    let layer =
        SpectralLayer::with_eigenvalues(phi, lambda_in, lambda_out, true, true).map_err(|e| e.to_string())?;
    let full_phi = build_full_phi(&layer);
    let inv = phi_inverse(&full_phi).map_err(|e| e.to_string())?;
    let n = n_in + n_out;
    let product = Matrix::from_fn(n, n, |i, j| (0..n).map(|k| full_phi[(i, k)] * inv[(k, j)]).sum());
    let adjacency = spectral_compose(&layer);
    let w = effective_weights(&layer);
    let lambda = build_full_lambda(&layer);
    Ok(ComposeReport {
        n_in,
        n_out,
        inverse_error: max_gap(&product, &Matrix::identity(n)),
        block_error: max_gap(&adjacency.block(n_in, 0, n_out, n_in), &w),
        phi: rows(&full_phi),
        lambda: (0..n).map(|k| lambda[(k, k)]).collect(),
        phi_inverse: rows(&inv),
        adjacency: rows(&adjacency),
        effective_weights: rows(&w),
    })
}

#[derive(Debug, Serialize)]
pub struct ConvReport {
    pub input: Vec<Vec<f64>>,
    pub filter: Vec<Vec<f64>>,
    pub output_dims: (usize, usize),
    pub direct: Vec<f64>,
    pub toeplitz: Vec<Vec<f64>>,
    pub duplication_map: Vec<usize>,
    pub multiplicity: Vec<usize>,
    pub lambda_in: Vec<f64>,
    pub relevance: f64,
    /// Output of the relevance-scaled spectral layer.
    pub scaled: Vec<f64>,
    pub errors: ConvErrors,
}

#[derive(Debug, Serialize)]
pub struct ConvErrors {
    pub toeplitz: f64,
    pub duplicated: f64,
    pub lambda_in: f64,
    pub relevance_one: f64,
    /// Largest gap between the scaled output and `relevance × direct`.
    pub scaled: f64,
}

/// One convolution in all of its linear and spectral forms.
pub fn conv_report(
    size: usize,
    filter: usize,
    stride: usize,
    pad: usize,
    relevance: f64,
    seed: u64,
) -> Result<ConvReport, String> {
    check_range("input size", size, 1, MAX_CONV_INPUT)?;
    check_range("filter size", filter, 1, MAX_CONV_FILTER)?;
    check_range("stride", stride, 1, 3)?;
    check_range("padding", pad, 0, 2)?;
    if !relevance.is_finite() {
        return Err(format!("relevance must be finite, got {relevance}"));
    }
    let mut rng = SeededRng::new(seed);
    let f = sample_standard_gaussian(&mut rng, filter, filter).map_err(|e| e.to_string())?;
    let x = sample_standard_gaussian(&mut rng, size, size).map_err(|e| e.to_string())?;
    let spec = ConvSpec::new(size, size, f)
        .with_stride(stride, stride)
        .with_padding(pad, pad);
    let output_dims = spec.output_dims().map_err(|e| e.to_string())?;
    let direct = direct_conv2d(&x, &spec).map_err(|e| e.to_string())?.into_vec();
    let op = toeplitz_matrix(&spec).map_err(|e| e.to_string())?;
    let form = duplicated_form(&spec).map_err(|e| e.to_string())?;
    let errs = equivalence_errors(&spec, &x).map_err(|e| e.to_string())?;
    let layer = conv_filter_relevance(&spec, relevance).map_err(|e| e.to_string())?;
    let scaled = spectral_forward(&layer, x.as_slice()).map_err(|e| e.to_string())?;
    let scaled_gap = scaled
        .iter()
        .zip(&direct)
        .fold(0.0_f64, |m, (s, d)| m.max((s - relevance * d).abs()));
    Ok(ConvReport {
        input: rows(&x),
        filter: rows(&spec.filter),
        output_dims,
        direct,
        toeplitz: rows(&op.matrix),
        multiplicity: form.multiplicity(spec.input_len()),
        duplication_map: form.duplication_map,
        lambda_in: form.lambda_in,
        relevance,
        scaled,
        errors: ConvErrors {
            toeplitz: errs.toeplitz,
            duplicated: errs.duplicated,
            lambda_in: errs.lambda_in,
            relevance_one: errs.relevance_one,
            scaled: scaled_gap,
        },
    })
}

#[derive(Debug, Serialize)]
pub struct StudentSummary {
    pub parametrization: &'static str,
    pub train_mse: f64,
    pub test_mse: f64,
    pub core_size: usize,
    pub histogram: Vec<u64>,
    /// Normalized relevance per node, in node order.
    pub relevance: Vec<f64>,
    /// `(nodes kept, test MSE increase)`, from `h − 1` nodes down to 1.
    pub prune_curve: Vec<(usize, f64)>,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct TrainingReport {
    pub h: usize,
    pub epochs: usize,
    pub teacher_width: usize,
    pub tau: f64,
    pub bin_edges: Vec<f64>,
    pub students: Vec<StudentSummary>,
}

/// Trains a standard and a spectral student of width `h` against a small
/// 10-20-20-1 teacher and summarizes their first-layer relevance.
pub fn training_report(
    h: usize,
    epochs: usize,
    samples: usize,
    alpha_lambda: f64,
    seed: u64,
) -> Result<TrainingReport, String> {
    check_range("h", h, 1, MAX_DEMO_WIDTH)?;
    check_range("epochs", epochs, 1, MAX_DEMO_EPOCHS)?;
    check_range("samples", samples, 100, 20_000)?;
    let tau = spectral_core::analysis::DEFAULT_TAU;
    let teacher_spec = TeacherSpec {
        seed,
        ..TeacherSpec::default()
    };
    let teacher = build_teacher(&teacher_spec).map_err(|e| e.to_string())?;
    let mut rng = SeededRng::new(seed.wrapping_add(1));
    let train_set = generate_dataset(&teacher, samples, &mut rng).map_err(|e| e.to_string())?;
    let test_set = generate_dataset(&teacher, 500, &mut rng).map_err(|e| e.to_string())?;
    let reg = RegularizationConfig {
        alpha_lambda,
        ..RegularizationConfig::default()
    };
    reg.validate().map_err(|e| e.to_string())?;
    let (standard, spectral) =
        build_student_pair(&StudentSpec::new(h, Parametrization::Spectral, seed)).map_err(|e| e.to_string())?;

    let mut students = Vec::new();
    for (p, net) in [(Parametrization::Standard, standard), (Parametrization::Spectral, spectral)] {
        let cfg = TrainConfig {
            epochs,
            batch_size: match p {
                Parametrization::Standard => 500,
                Parametrization::Spectral => 300,
            }
            .min(samples),
            seed,
            reg,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let (model, history) = train(net, &train_set, None, &cfg).map_err(|e| e.to_string())?;
        let rel = relevance(&model.layers[0]);
        let curve = prune_curve(&model, &rel, &test_set, teacher_spec.first_hidden()).map_err(|e| e.to_string())?;
        students.push(StudentSummary {
            parametrization: p.name(),
            train_mse: mse(&model, &train_set).map_err(|e| e.to_string())?,
            test_mse: curve.full_mse,
            core_size: estimate_core_size(&rel, tau).map_err(|e| e.to_string())?,
            histogram: histogram(&rel).counts,
            relevance: rel.normalized.clone(),
            prune_curve: curve.points.iter().map(|p| (p.n_lambda, p.delta_mse)).collect(),
            loss_history: history.train_loss,
        });
    }
    Ok(TrainingReport {
        h,
        epochs,
        teacher_width: teacher_spec.first_hidden(),
        tau,
        bin_edges: Histogram::empty().bin_edges,
        students,
    })
}

/// JSON [`ComposeReport`].
#[wasm_bindgen]
pub fn compose(n_in: usize, n_out: usize, seed: u32) -> Result<String, JsError> {
    compose_report(n_in, n_out, seed as u64)
        .map(|r| to_json(&r))
        .map_err(|e| JsError::new(&e))
}

/// JSON [`ConvReport`].
#[wasm_bindgen]
pub fn convolution(
    size: usize,
    filter: usize,
    stride: usize,
    pad: usize,
    relevance: f64,
    seed: u32,
) -> Result<String, JsError> {
    conv_report(size, filter, stride, pad, relevance, seed as u64)
        .map(|r| to_json(&r))
        .map_err(|e| JsError::new(&e))
}

/// JSON [`TrainingReport`].
#[wasm_bindgen]
pub fn train_pair(h: usize, epochs: usize, samples: usize, alpha_lambda: f64, seed: u32) -> Result<String, JsError> {
    training_report(h, epochs, samples, alpha_lambda, seed as u64)
        .map(|r| to_json(&r))
        .map_err(|e| JsError::new(&e))
}
