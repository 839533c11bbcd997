//! Single-channel, single-filter 2-D convolution viewed as a linear layer.
//!
//! Images are vectorized row-major: pixel `(r, c)` of an `H × W` image sits at
//! index `r * W + c`. Convolution here is cross-correlation (no kernel flip)
//! with zero padding.
//!
//! Two spectral readings of the same operator are built:
//!
//! * after duplicating each input pixel once per window that reads it, the
//!   operator has one nonzero per column; with a binary `phi`, `lambda_out = 0`
//!   and `lambda_in` set to the filter tap of each column, the spectral layer
//!   is exactly the convolution;
//! * with `lambda_in = 1`, `phi` holding the Toeplitz operator and a uniform
//!   `lambda_out = 1 - r`, the layer computes `r` times the convolution, so
//!   `r` acts as a filter relevance.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{spectral_forward, SpectralLayer};
use crate::numerics::{matvec, Matrix, SeededRng, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub input_height: usize,
    pub input_width: usize,
    pub filter: Matrix,
    pub stride_x: usize,
    pub stride_y: usize,
    pub pad_x: usize,
    pub pad_y: usize,
}

impl ConvSpec {
    /// Stride 1 in both directions, no padding.
    pub fn new(input_height: usize, input_width: usize, filter: Matrix) -> Self {
        ConvSpec {
            input_height,
            input_width,
            filter,
            stride_x: 1,
            stride_y: 1,
            pad_x: 0,
            pad_y: 0,
        }
    }

    pub fn with_stride(mut self, stride_x: usize, stride_y: usize) -> Self {
        self.stride_x = stride_x;
        self.stride_y = stride_y;
        self
    }

    pub fn with_padding(mut self, pad_x: usize, pad_y: usize) -> Self {
        self.pad_x = pad_x;
        self.pad_y = pad_y;
        self
    }

    pub fn filter_height(&self) -> usize {
        self.filter.rows()
    }

    pub fn filter_width(&self) -> usize {
        self.filter.cols()
    }

    /// `(out_h, out_w)`, or an error when no full window fits.
    pub fn output_dims(&self) -> Result<(usize, usize)> {
        let (fh, fw) = self.filter.shape();
        if self.stride_x == 0 || self.stride_y == 0 {
            return Err(Error::InvalidArgument("strides must be >= 1".into()));
        }
        if fh == 0 || fw == 0 || self.input_height == 0 || self.input_width == 0 {
            return Err(Error::InvalidArgument("input and filter must be non-empty".into()));
        }
        let ph = self.input_height + 2 * self.pad_y;
        let pw = self.input_width + 2 * self.pad_x;
        if ph < fh || pw < fw {
            return Err(Error::InvalidArgument(format!(
                "{fh}x{fw} filter does not fit a padded {ph}x{pw} input"
            )));
        }
        Ok(((ph - fh) / self.stride_y + 1, (pw - fw) / self.stride_x + 1))
    }

    pub fn input_len(&self) -> usize {
        self.input_height * self.input_width
    }

    /// Input pixel read by tap `(a, b)` of window `(r, c)`, `None` in padding.
    fn source(&self, r: usize, c: usize, a: usize, b: usize) -> Option<usize> {
        let y = (r * self.stride_y + a).checked_sub(self.pad_y)?;
        let x = (c * self.stride_x + b).checked_sub(self.pad_x)?;
        (y < self.input_height && x < self.input_width).then(|| y * self.input_width + x)
    }

    /// Every `(output index, tap (a, b), input index)` triple with the input
    /// inside the image, in output-major, tap-row-major order.
    fn taps(&self) -> Result<Vec<(usize, usize, usize, usize)>> {
        let (oh, ow) = self.output_dims()?;
        let mut out = Vec::new();
        for r in 0..oh {
            for c in 0..ow {
                for a in 0..self.filter_height() {
                    for b in 0..self.filter_width() {
                        if let Some(src) = self.source(r, c, a, b) {
                            out.push((r * ow + c, a, b, src));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Sliding-window reference implementation.
pub fn direct_conv2d(x: &Matrix, spec: &ConvSpec) -> Result<Matrix> {
    if x.shape() != (spec.input_height, spec.input_width) {
        return Err(Error::shape(
            "direct_conv2d",
            format!("{}x{} input", spec.input_height, spec.input_width),
            format!("{}x{}", x.rows(), x.cols()),
        ));
    }
    let (oh, ow) = spec.output_dims()?;
    let mut out = Matrix::zeros(oh, ow);
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for a in 0..spec.filter_height() {
                for b in 0..spec.filter_width() {
                    let y = (r * spec.stride_y + a) as isize - spec.pad_y as isize;
                    let xx = (c * spec.stride_x + b) as isize - spec.pad_x as isize;
                    if y >= 0
                        && xx >= 0
                        && (y as usize) < spec.input_height
                        && (xx as usize) < spec.input_width
                    {
                        acc += spec.filter[(a, b)] * x[(y as usize, xx as usize)];
                    }
                }
            }
            out[(r, c)] = acc;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToeplitzOperator {
    /// `(out_h·out_w) × (in_h·in_w)`.
    pub matrix: Matrix,
    pub spec: ConvSpec,
}

impl ToeplitzOperator {
    pub fn apply(&self, x: &Matrix) -> Result<Vector> {
        matvec(&self.matrix, x.as_slice())
    }
}

pub fn toeplitz_matrix(spec: &ConvSpec) -> Result<ToeplitzOperator> {
    let (oh, ow) = spec.output_dims()?;
    let mut m = Matrix::zeros(oh * ow, spec.input_len());
    for (o, a, b, src) in spec.taps()? {
        m[(o, src)] = spec.filter[(a, b)];
    }
    Ok(ToeplitzOperator {
        matrix: m,
        spec: spec.clone(),
    })
}

/// Convolution after input duplication: column `e` of the expanded operator
/// reads input pixel `duplication_map[e]` and carries the single filter tap
/// `lambda_in[e]` into output row `binary_phi`'s nonzero of that column.
#[derive(Debug, Clone, PartialEq)]
pub struct DuplicatedForm {
    pub duplication_map: Vec<usize>,
    /// `(out_h·out_w) × expanded`, exactly one 1 per column.
    pub binary_phi: Matrix,
    pub lambda_in: Vector,
    /// Filter tap `(a, b)` behind each expanded column.
    pub taps: Vec<(usize, usize)>,
}

impl DuplicatedForm {
    pub fn expanded_len(&self) -> usize {
        self.duplication_map.len()
    }

    /// `x[duplication_map[e]]` for every expanded column `e`.
    pub fn duplicate(&self, x: &Matrix) -> Vector {
        let flat = x.as_slice();
        self.duplication_map.iter().map(|&i| flat[i]).collect()
    }

    /// Binary structure scaled column-wise by the filter taps.
    pub fn expanded_operator(&self) -> Matrix {
        Matrix::from_fn(self.binary_phi.rows(), self.binary_phi.cols(), |r, c| {
            self.binary_phi[(r, c)] * self.lambda_in[c]
        })
    }

    pub fn apply(&self, x: &Matrix) -> Result<Vector> {
        matvec(&self.expanded_operator(), &self.duplicate(x))
    }

    /// How many times each input pixel is copied.
    pub fn multiplicity(&self, input_len: usize) -> Vec<usize> {
        let mut counts = vec![0; input_len];
        for &i in &self.duplication_map {
            counts[i] += 1;
        }
        counts
    }
}

pub fn duplicated_form(spec: &ConvSpec) -> Result<DuplicatedForm> {
    let (oh, ow) = spec.output_dims()?;
    let taps = spec.taps()?;
    let mut binary_phi = Matrix::zeros(oh * ow, taps.len());
    let mut duplication_map = Vec::with_capacity(taps.len());
    let mut lambda_in = Vec::with_capacity(taps.len());
    let mut tap_ids = Vec::with_capacity(taps.len());
    for (e, &(o, a, b, src)) in taps.iter().enumerate() {
        binary_phi[(o, e)] = 1.0;
        duplication_map.push(src);
        lambda_in.push(spec.filter[(a, b)]);
        tap_ids.push((a, b));
    }
    Ok(DuplicatedForm {
        duplication_map,
        binary_phi,
        lambda_in,
        taps: tap_ids,
    })
}

/// Spectral layer over the duplicated input whose incoming eigenvalues are
/// the filter weights: `phi` binary, `lambda_out = 0`, `lambda_in` trainable.
pub fn conv_as_lambda_in(spec: &ConvSpec) -> Result<SpectralLayer> {
    let form = duplicated_form(spec)?;
    let n_out = form.binary_phi.rows();
    SpectralLayer::with_eigenvalues(form.binary_phi, form.lambda_in, vec![0.0; n_out], true, false)
}

/// Spectral layer over the plain input computing `relevance × conv`:
/// `lambda_in = 1`, `phi` = Toeplitz operator, uniform `lambda_out = 1 - relevance`.
/// A relevance of 0 yields the zero operator.
pub fn conv_filter_relevance(spec: &ConvSpec, relevance: f64) -> Result<SpectralLayer> {
    if !relevance.is_finite() {
        return Err(Error::InvalidArgument(format!("relevance must be finite, got {relevance}")));
    }
    let op = toeplitz_matrix(spec)?;
    let (n_out, n_in) = op.matrix.shape();
    SpectralLayer::with_eigenvalues(
        op.matrix,
        vec![1.0; n_in],
        vec![1.0 - relevance; n_out],
        false,
        true,
    )
}

/// Random spec with an `H × W` input (`1..=max_input` each), a square or
/// rectangular filter (`1..=max_filter` per side, never larger than the padded
/// input), stride in {1, 2} and padding in {0, 1}, plus Gaussian filter taps.
pub fn random_spec(rng: &mut SeededRng, max_input: usize, max_filter: usize) -> Result<ConvSpec> {
    if max_input == 0 || max_filter == 0 {
        return Err(Error::InvalidArgument("random_spec bounds must be positive".into()));
    }
    let h = rng.random_range(1..=max_input);
    let w = rng.random_range(1..=max_input);
    let pad_y = rng.random_range(0..=1);
    let pad_x = rng.random_range(0..=1);
    let fh = rng.random_range(1..=max_filter.min(h + 2 * pad_y));
    let fw = rng.random_range(1..=max_filter.min(w + 2 * pad_x));
    let stride_y = rng.random_range(1..=2);
    let stride_x = rng.random_range(1..=2);
    let filter = Matrix::from_fn(fh, fw, |_, _| rng.standard_normal());
    Ok(ConvSpec::new(h, w, filter)
        .with_stride(stride_x, stride_y)
        .with_padding(pad_x, pad_y))
}

/// Largest deviation of each linear form from [`direct_conv2d`] on one input.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EquivalenceErrors {
    pub toeplitz: f64,
    pub duplicated: f64,
    pub lambda_in: f64,
    pub relevance_one: f64,
}

impl EquivalenceErrors {
    pub fn max(&self) -> f64 {
        self.toeplitz
            .max(self.duplicated)
            .max(self.lambda_in)
            .max(self.relevance_one)
    }

    pub fn worst(self, other: EquivalenceErrors) -> EquivalenceErrors {
        EquivalenceErrors {
            toeplitz: self.toeplitz.max(other.toeplitz),
            duplicated: self.duplicated.max(other.duplicated),
            lambda_in: self.lambda_in.max(other.lambda_in),
            relevance_one: self.relevance_one.max(other.relevance_one),
        }
    }
}

pub fn equivalence_errors(spec: &ConvSpec, x: &Matrix) -> Result<EquivalenceErrors> {
    let reference = direct_conv2d(x, spec)?;
    let want = reference.as_slice();
    let err = |got: &[f64]| got.iter().zip(want).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    let form = duplicated_form(spec)?;
    let expanded = form.duplicate(x);
    Ok(EquivalenceErrors {
        toeplitz: err(&toeplitz_matrix(spec)?.apply(x)?),
        duplicated: err(&form.apply(x)?),
        lambda_in: err(&spectral_forward(&conv_as_lambda_in(spec)?, &expanded)?),
        relevance_one: err(&spectral_forward(&conv_filter_relevance(spec, 1.0)?, x.as_slice())?),
    })
}
