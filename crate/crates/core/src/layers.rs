//! Dense and spectral linear transfers.
//!
//! A spectral layer stores the lower-left eigenvector block `phi` of the
//! layer's bipartite adjacency matrix together with the eigenvalues attached
//! to the incoming (`lambda_in`) and outgoing (`lambda_out`) nodes. The weight
//! it realizes is
//!
//! ```text
//! w̃[i][j] = (lambda_in[j] - lambda_out[i]) * phi[i][j]
//! ```
//!
//! which is also the lower-left block of `Φ Λ Φ⁻¹`, where `Φ` is the unit
//! lower-triangular eigenvector matrix and `Λ = diag(lambda_in, lambda_out)`.
//! No layer carries a bias.

use std::borrow::Cow;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{hadamard, matmul, matmul_tn, matvec, Matrix, Vector};

/// Elementwise nonlinearity applied after every hidden transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Activation {
    #[default]
    Tanh,
    /// `erf(x / √2)`, the soft committee machine unit.
    Erf,
    /// Derivative at 0 is taken to be 0.
    Relu,
    Identity,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Tanh,
        Activation::Erf,
        Activation::Relu,
        Activation::Identity,
    ];

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => tanh(z),
            Activation::Erf => libm::erf(z * FRAC_1_SQRT_2),
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        self.derivative_given(z, self.apply(z))
    }

    /// Derivative at `z` when `a = apply(z)` is already known.
    #[inline]
    pub fn derivative_given(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Erf => (2.0 / PI).sqrt() * (-0.5 * z * z).exp(),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Erf => "erf",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "erf" | "erf-scaled" => Ok(Activation::Erf),
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

/// Conventional weight matrix, `n_out × n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
}

impl DenseLayer {
    pub fn new(weights: Matrix) -> Self {
        DenseLayer { weights }
    }

    pub fn n_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn n_out(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralLayer {
    /// `n_out × n_in` eigenvector block.
    pub phi: Matrix,
    pub lambda_in: Vector,
    pub lambda_out: Vector,
    pub lambda_in_trainable: bool,
    pub lambda_out_trainable: bool,
}

impl SpectralLayer {
    /// Layer in the default training regime: `lambda_in` fixed at zero,
    /// `lambda_out` trainable.
    pub fn new(phi: Matrix, lambda_out: Vector) -> Result<Self> {
        let lambda_in = vec![0.0; phi.cols()];
        Self::with_eigenvalues(phi, lambda_in, lambda_out, false, true)
    }

    pub fn with_eigenvalues(
        phi: Matrix,
        lambda_in: Vector,
        lambda_out: Vector,
        lambda_in_trainable: bool,
        lambda_out_trainable: bool,
    ) -> Result<Self> {
        if lambda_in.len() != phi.cols() {
            return Err(Error::shape("SpectralLayer", phi.cols(), lambda_in.len()));
        }
        if lambda_out.len() != phi.rows() {
            return Err(Error::shape("SpectralLayer", phi.rows(), lambda_out.len()));
        }
        Ok(SpectralLayer {
            phi,
            lambda_in,
            lambda_out,
            lambda_in_trainable,
            lambda_out_trainable,
        })
    }

    /// Spectral layer whose effective weights equal `weights`:
    /// `lambda_out = 1`, `lambda_in = 0`, `phi = -weights`.
    pub fn from_dense(weights: &Matrix) -> Self {
        SpectralLayer {
            phi: weights.scale(-1.0),
            lambda_in: vec![0.0; weights.cols()],
            lambda_out: vec![1.0; weights.rows()],
            lambda_in_trainable: false,
            lambda_out_trainable: true,
        }
    }

    pub fn n_in(&self) -> usize {
        self.phi.cols()
    }

    pub fn n_out(&self) -> usize {
        self.phi.rows()
    }
}

pub fn effective_weights(layer: &SpectralLayer) -> Matrix {
    Matrix::from_fn(layer.n_out(), layer.n_in(), |i, j| {
        (layer.lambda_in[j] - layer.lambda_out[i]) * layer.phi[(i, j)]
    })
}

pub fn dense_forward(layer: &DenseLayer, x: &[f64]) -> Result<Vector> {
    matvec(&layer.weights, x)
}

/// `z = phi · (lambda_in ⊙ x) − lambda_out ⊙ (phi · x)`.
pub fn spectral_forward(layer: &SpectralLayer, x: &[f64]) -> Result<Vector> {
    let scaled = hadamard(&layer.lambda_in, x)?;
    let incoming = matvec(&layer.phi, &scaled)?;
    let projected = matvec(&layer.phi, x)?;
    let outgoing = hadamard(&layer.lambda_out, &projected)?;
    Ok(incoming.iter().zip(&outgoing).map(|(a, b)| a - b).collect())
}

/// Unit-diagonal eigenvector matrix with `phi` in its lower-left block.
pub fn build_full_phi(layer: &SpectralLayer) -> Matrix {
    let (n_in, n_out) = (layer.n_in(), layer.n_out());
    let mut full = Matrix::identity(n_in + n_out);
    for i in 0..n_out {
        for j in 0..n_in {
            full[(n_in + i, j)] = layer.phi[(i, j)];
        }
    }
    full
}

/// `diag(lambda_in, lambda_out)`.
pub fn build_full_lambda(layer: &SpectralLayer) -> Matrix {
    let n = layer.n_in() + layer.n_out();
    let mut full = Matrix::zeros(n, n);
    for (k, &l) in layer.lambda_in.iter().chain(&layer.lambda_out).enumerate() {
        full[(k, k)] = l;
    }
    full
}

/// Analytic inverse `2I − Φ` of a structured eigenvector matrix.
///
/// The input must be square with unit diagonal and all off-diagonal nonzeros
/// inside a single lower-left block `[n_in.., ..n_in]`; the split `n_in` is
/// inferred from the nonzero pattern.
pub fn phi_inverse(full_phi: &Matrix) -> Result<Matrix> {
    let (n, cols) = full_phi.shape();
    if n != cols {
        return Err(Error::InvalidStructure(format!(
            "eigenvector matrix must be square, got {n}x{cols}"
        )));
    }
    let mut max_col = None::<usize>;
    let mut min_row = None::<usize>;
    for r in 0..n {
        for c in 0..n {
            let v = full_phi[(r, c)];
            if r == c {
                if v != 1.0 {
                    return Err(Error::InvalidStructure(format!(
                        "diagonal entry ({r},{c}) is {v}, expected 1"
                    )));
                }
            } else if v != 0.0 {
                if c > r {
                    return Err(Error::InvalidStructure(format!(
                        "upper-triangular entry ({r},{c}) is nonzero"
                    )));
                }
                max_col = Some(max_col.map_or(c, |m| m.max(c)));
                min_row = Some(min_row.map_or(r, |m| m.min(r)));
            }
        }
    }
    if let (Some(c), Some(r)) = (max_col, min_row) {
        // Every nonzero must sit left of the split and below it.
        if c >= r {
            return Err(Error::InvalidStructure(format!(
                "off-diagonal nonzeros do not form a lower-left block (column {c} reaches row {r})"
            )));
        }
    }
    Ok(Matrix::from_fn(n, n, |r, c| {
        let id = if r == c { 2.0 } else { 0.0 };
        id - full_phi[(r, c)]
    }))
}

/// Spectral adjacency matrix `Ã = Φ Λ Φ⁻¹`.
pub fn spectral_compose(layer: &SpectralLayer) -> Matrix {
    let phi = build_full_phi(layer);
    let lambda = build_full_lambda(layer);
    let inv = phi_inverse(&phi).expect("build_full_phi always yields the block structure");
    let left = matmul(&phi, &lambda).expect("square factors");
    matmul(&left, &inv).expect("square factors")
}

/// `Ã · (x, 0)`, the full action of the adjacency matrix on activity localized
/// on the input nodes. Its first `n_in` entries are `lambda_in ⊙ x`; the last
/// `n_out` entries are the transferred pre-activations.
pub fn adjacency_action(layer: &SpectralLayer, x: &[f64]) -> Result<Vector> {
    if x.len() != layer.n_in() {
        return Err(Error::shape("adjacency_action", layer.n_in(), x.len()));
    }
    let mut v = x.to_vec();
    v.resize(layer.n_in() + layer.n_out(), 0.0);
    matvec(&spectral_compose(layer), &v)
}

/// Transfer through the adjacency picture: embed `x` on the input nodes, apply
/// `Ã`, and keep the output-node components. The diagonal contribution on the
/// input nodes is discarded, so only the lower-left block acts.
pub fn embed_and_transfer(layer: &SpectralLayer, x: &[f64]) -> Result<Vector> {
    let full = adjacency_action(layer, x)?;
    Ok(full[layer.n_in()..].to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamGradients {
    Dense {
        d_weights: Matrix,
    },
    Spectral {
        d_phi: Matrix,
        d_lambda_in: Vector,
        d_lambda_out: Vector,
    },
}

impl ParamGradients {
    /// Flat gradient blocks, ordered like [`Layer::param_blocks_mut`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        match self {
            ParamGradients::Dense { d_weights } => vec![d_weights.as_slice()],
            ParamGradients::Spectral {
                d_phi,
                d_lambda_in,
                d_lambda_out,
            } => vec![d_phi.as_slice(), d_lambda_in, d_lambda_out],
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            ParamGradients::Dense { d_weights } => vec![d_weights.as_mut_slice()],
            ParamGradients::Spectral {
                d_phi,
                d_lambda_in,
                d_lambda_out,
            } => vec![d_phi.as_mut_slice(), d_lambda_in, d_lambda_out],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub params: ParamGradients,
    /// `batch × n_in` gradient with respect to the layer input.
    pub d_input: Matrix,
}

/// `tanh` from a single `exp`. Absolute error stays within a few ulps of 1;
/// relative accuracy degrades for tiny `|z|`, which training does not need,
/// and the platform `tanh` (through `expm1`) is several times slower.
#[inline]
pub fn tanh(z: f64) -> f64 {
    let e = (-2.0 * z.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(z)
}

fn check_batch(op: &'static str, n_in: usize, n_out: usize, x: &Matrix, up: &Matrix) -> Result<()> {
    if x.cols() != n_in {
        return Err(Error::shape(op, format!("{n_in} input columns"), x.cols()));
    }
    if up.cols() != n_out {
        return Err(Error::shape(op, format!("{n_out} upstream columns"), up.cols()));
    }
    if x.rows() != up.rows() {
        return Err(Error::shape(op, format!("{} upstream rows", x.rows()), up.rows()));
    }
    Ok(())
}

/// Reverse pass of `z = W x` summed over the batch rows of `x_batch`.
pub fn dense_backward(layer: &DenseLayer, x_batch: &Matrix, upstream: &Matrix) -> Result<LayerGradients> {
    check_batch("dense_backward", layer.n_in(), layer.n_out(), x_batch, upstream)?;
    Ok(LayerGradients {
        params: ParamGradients::Dense {
            d_weights: matmul_tn(upstream, x_batch)?,
        },
        d_input: matmul(upstream, &layer.weights)?,
    })
}

/// Reverse pass of the spectral transfer. Untrainable eigenvalues get zero
/// gradients.
pub fn spectral_backward(
    layer: &SpectralLayer,
    x_batch: &Matrix,
    upstream: &Matrix,
) -> Result<LayerGradients> {
    check_batch("spectral_backward", layer.n_in(), layer.n_out(), x_batch, upstream)?;
    spectral_backward_with(layer, &effective_weights(layer), x_batch, upstream, true)
}

fn spectral_backward_with(
    layer: &SpectralLayer,
    effective: &Matrix,
    x_batch: &Matrix,
    upstream: &Matrix,
    need_input: bool,
) -> Result<LayerGradients> {
    let (n_out, n_in) = (layer.n_out(), layer.n_in());
    // outer[i][j] = Σ_b upstream[b][i] · x[b][j]
    let outer = matmul_tn(upstream, x_batch)?;
    let mut d_phi = Matrix::zeros(n_out, n_in);
    let mut d_lambda_in = vec![0.0; n_in];
    let mut d_lambda_out = vec![0.0; n_out];
    for i in 0..n_out {
        let lo = layer.lambda_out[i];
        let mut acc_out = 0.0;
        for j in 0..n_in {
            let g = outer[(i, j)];
            let phi = layer.phi[(i, j)];
            d_phi[(i, j)] = (layer.lambda_in[j] - lo) * g;
            acc_out -= phi * g;
            d_lambda_in[j] += phi * g;
        }
        d_lambda_out[i] = acc_out;
    }
    if !layer.lambda_in_trainable {
        d_lambda_in.iter_mut().for_each(|v| *v = 0.0);
    }
    if !layer.lambda_out_trainable {
        d_lambda_out.iter_mut().for_each(|v| *v = 0.0);
    }
    let d_input = if need_input {
        matmul(upstream, effective)?
    } else {
        Matrix::zeros(x_batch.rows(), n_in)
    };
    Ok(LayerGradients {
        params: ParamGradients::Spectral {
            d_phi,
            d_lambda_in,
            d_lambda_out,
        },
        d_input,
    })
}

/// Mutable view of one parameter block.
pub struct ParamBlock<'a> {
    pub values: &'a mut [f64],
    pub trainable: bool,
}

/// One linear transfer in a network.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Spectral(SpectralLayer),
}

impl Layer {
    pub fn n_in(&self) -> usize {
        match self {
            Layer::Dense(l) => l.n_in(),
            Layer::Spectral(l) => l.n_in(),
        }
    }

    pub fn n_out(&self) -> usize {
        match self {
            Layer::Dense(l) => l.n_out(),
            Layer::Spectral(l) => l.n_out(),
        }
    }

    pub fn is_spectral(&self) -> bool {
        matches!(self, Layer::Spectral(_))
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Spectral(_) => "spectral",
        }
    }

    pub fn effective_weights(&self) -> Cow<'_, Matrix> {
        match self {
            Layer::Dense(l) => Cow::Borrowed(&l.weights),
            Layer::Spectral(l) => Cow::Owned(effective_weights(l)),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vector> {
        match self {
            Layer::Dense(l) => dense_forward(l, x),
            Layer::Spectral(l) => matvec(&effective_weights(l), x),
        }
    }

    /// Batched transfer `Z = X · W̃ᵀ`, rows are samples.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        matmul(x, &self.effective_weights().transpose())
    }

    pub fn backward(&self, x_batch: &Matrix, upstream: &Matrix) -> Result<LayerGradients> {
        self.backward_inner(x_batch, upstream, true)
    }

    /// Same as [`Layer::backward`] but skips the input gradient when the
    /// caller does not need it (first layer of a network).
    pub(crate) fn backward_inner(
        &self,
        x_batch: &Matrix,
        upstream: &Matrix,
        need_input: bool,
    ) -> Result<LayerGradients> {
        match self {
            Layer::Dense(l) => {
                if need_input {
                    dense_backward(l, x_batch, upstream)
                } else {
                    check_batch("dense_backward", l.n_in(), l.n_out(), x_batch, upstream)?;
                    Ok(LayerGradients {
                        params: ParamGradients::Dense {
                            d_weights: matmul_tn(upstream, x_batch)?,
                        },
                        d_input: Matrix::zeros(x_batch.rows(), l.n_in()),
                    })
                }
            }
            Layer::Spectral(l) => {
                check_batch("spectral_backward", l.n_in(), l.n_out(), x_batch, upstream)?;
                let eff = if need_input {
                    effective_weights(l)
                } else {
                    Matrix::zeros(0, 0)
                };
                spectral_backward_with(l, &eff, x_batch, upstream, need_input)
            }
        }
    }

    /// Parameter blocks in a fixed order: dense `[weights]`, spectral
    /// `[phi, lambda_in, lambda_out]`.
    pub fn param_blocks_mut(&mut self) -> Vec<ParamBlock<'_>> {
        match self {
            Layer::Dense(l) => vec![ParamBlock {
                values: l.weights.as_mut_slice(),
                trainable: true,
            }],
            Layer::Spectral(l) => vec![
                ParamBlock {
                    values: l.phi.as_mut_slice(),
                    trainable: true,
                },
                ParamBlock {
                    values: &mut l.lambda_in,
                    trainable: l.lambda_in_trainable,
                },
                ParamBlock {
                    values: &mut l.lambda_out,
                    trainable: l.lambda_out_trainable,
                },
            ],
        }
    }

    pub fn zero_gradients(&self) -> ParamGradients {
        match self {
            Layer::Dense(l) => ParamGradients::Dense {
                d_weights: Matrix::zeros(l.n_out(), l.n_in()),
            },
            Layer::Spectral(l) => ParamGradients::Spectral {
                d_phi: Matrix::zeros(l.n_out(), l.n_in()),
                d_lambda_in: vec![0.0; l.n_in()],
                d_lambda_out: vec![0.0; l.n_out()],
            },
        }
    }
}
