//! Node relevance, histograms, core size, structural pruning and path spectra.

use crate::error::{Error, Result};
use crate::layers::{DenseLayer, Layer, SpectralLayer};
use crate::training::{mse, Dataset, Network};

/// Number of uniform bins used for normalized relevance histograms.
pub const HISTOGRAM_BINS: usize = 50;

/// Default zero threshold on normalized relevance: the width of one bin.
pub const DEFAULT_TAU: f64 = 1.0 / HISTOGRAM_BINS as f64;

/// Grid size used when resampling path spectra for comparison.
pub const SPECTRUM_GRID: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceVector {
    /// One nonnegative score per node.
    pub scores: Vec<f64>,
    /// `scores / max(scores)`, all zero when every score is zero.
    pub normalized: Vec<f64>,
}

impl RelevanceVector {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let max = scores.iter().cloned().fold(0.0, f64::max);
        let normalized = if max > 0.0 {
            scores.iter().map(|s| s / max).collect()
        } else {
            vec![0.0; scores.len()]
        };
        RelevanceVector { scores, normalized }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().fold(0.0, |a, v| a + v * v).sqrt()
}

/// Norm of each node's incoming weight row.
pub fn relevance_standard(layer: &DenseLayer) -> RelevanceVector {
    RelevanceVector::from_scores(
        (0..layer.n_out())
            .map(|i| row_norm(layer.weights.row(i)))
            .collect(),
    )
}

/// `|lambda_out[i]|` times the norm of eigenvector row `i`. Only meaningful
/// while `lambda_in` is zero.
pub fn relevance_spectral(layer: &SpectralLayer) -> Result<RelevanceVector> {
    if layer.lambda_in.iter().any(|&l| l != 0.0) {
        return Err(Error::InvalidArgument(
            "spectral relevance requires lambda_in = 0".into(),
        ));
    }
    Ok(RelevanceVector::from_scores(
        (0..layer.n_out())
            .map(|i| layer.lambda_out[i].abs() * row_norm(layer.phi.row(i)))
            .collect(),
    ))
}

/// Relevance of the nodes fed by `layer`. Spectral layers with nonzero
/// `lambda_in` fall back to the norm of their effective weights.
pub fn relevance(layer: &Layer) -> RelevanceVector {
    match layer {
        Layer::Dense(d) => relevance_standard(d),
        Layer::Spectral(s) => relevance_spectral(s)
            .unwrap_or_else(|_| relevance_standard(&DenseLayer::new(layer.effective_weights().into_owned()))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn empty() -> Self {
        Histogram {
            bin_edges: (0..=HISTOGRAM_BINS)
                .map(|k| k as f64 / HISTOGRAM_BINS as f64)
                .collect(),
            counts: vec![0; HISTOGRAM_BINS],
        }
    }

    /// Adds values in `[0, 1]`; 1.0 lands in the last bin.
    pub fn add(&mut self, values: &[f64]) {
        for &v in values {
            let bin = ((v * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
            self.counts[bin] += 1;
        }
    }

    pub fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Share of the samples in the first bin.
    pub fn first_bin_fraction(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.counts[0] as f64 / total as f64
        }
    }
}

/// 50-bin histogram of the normalized scores.
pub fn histogram(scores: &RelevanceVector) -> Histogram {
    let mut h = Histogram::empty();
    h.add(&scores.normalized);
    h
}

/// Nodes whose normalized relevance reaches `tau`.
pub fn estimate_core_size(scores: &RelevanceVector, tau: f64) -> Result<usize> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")));
    }
    Ok(scores.normalized.iter().filter(|&&v| v >= tau).count())
}

/// Nodes at or above `tau`, ascending.
pub fn core_nodes(scores: &RelevanceVector, tau: f64) -> Result<Vec<usize>> {
    estimate_core_size(scores, tau)?;
    Ok((0..scores.len()).filter(|&i| scores.normalized[i] >= tau).collect())
}

fn keep_layer_rows(layer: &Layer, keep: &[usize]) -> Layer {
    match layer {
        Layer::Dense(d) => Layer::Dense(DenseLayer::new(d.weights.select_rows(keep))),
        Layer::Spectral(s) => Layer::Spectral(SpectralLayer {
            phi: s.phi.select_rows(keep),
            lambda_in: s.lambda_in.clone(),
            lambda_out: keep.iter().map(|&i| s.lambda_out[i]).collect(),
            lambda_in_trainable: s.lambda_in_trainable,
            lambda_out_trainable: s.lambda_out_trainable,
        }),
    }
}

fn keep_layer_cols(layer: &Layer, keep: &[usize]) -> Layer {
    match layer {
        Layer::Dense(d) => Layer::Dense(DenseLayer::new(d.weights.select_cols(keep))),
        Layer::Spectral(s) => Layer::Spectral(SpectralLayer {
            phi: s.phi.select_cols(keep),
            lambda_in: keep.iter().map(|&j| s.lambda_in[j]).collect(),
            lambda_out: s.lambda_out.clone(),
            lambda_in_trainable: s.lambda_in_trainable,
            lambda_out_trainable: s.lambda_out_trainable,
        }),
    }
}

/// Removes every first-hidden-layer node not listed in `keep`: its incoming
/// row in layer 1 and its outgoing column in layer 2.
pub fn prune_to(net: &Network, keep: &[usize]) -> Result<Network> {
    if net.layers.len() < 2 {
        return Err(Error::InvalidArgument(
            "pruning needs at least two linear transfers".into(),
        ));
    }
    let mut keep = keep.to_vec();
    keep.sort_unstable();
    keep.dedup();
    if keep.is_empty() {
        return Err(Error::InvalidArgument("keep set is empty".into()));
    }
    let h = net.layers[0].n_out();
    if let Some(&bad) = keep.iter().find(|&&i| i >= h) {
        return Err(Error::InvalidArgument(format!(
            "node index {bad} out of range for hidden width {h}"
        )));
    }
    let mut layers = net.layers.clone();
    layers[0] = keep_layer_rows(&net.layers[0], &keep);
    layers[1] = keep_layer_cols(&net.layers[1], &keep);
    Network::new(layers, net.activation)
}

/// Nodes by ascending relevance, ties broken by lower index.
pub fn removal_order(relevance: &RelevanceVector) -> Vec<usize> {
    let mut order: Vec<usize> = (0..relevance.len()).collect();
    order.sort_by(|&a, &b| {
        relevance.scores[a]
            .total_cmp(&relevance.scores[b])
            .then(a.cmp(&b))
    });
    order
}

/// Keeps only the nodes at or above `tau`.
pub fn prune_to_core(net: &Network, relevance: &RelevanceVector, tau: f64) -> Result<Network> {
    prune_to(net, &core_nodes(relevance, tau)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrunePoint {
    /// Nodes left in the first hidden layer.
    pub n_lambda: usize,
    /// Pruned test MSE minus the unpruned test MSE.
    pub delta_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneCurve {
    pub points: Vec<PrunePoint>,
    pub n_teacher: usize,
    pub full_mse: f64,
}

impl PruneCurve {
    pub fn delta_at(&self, n_lambda: usize) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.n_lambda == n_lambda)
            .map(|p| p.delta_mse)
    }
}

/// Removes first-layer nodes one at a time, least relevant first, down to a
/// single node, recording the test MSE deviation after each removal.
pub fn prune_curve(
    net: &Network,
    relevance: &RelevanceVector,
    test: &Dataset,
    n_teacher: usize,
) -> Result<PruneCurve> {
    let h = net.layers[0].n_out();
    if relevance.len() != h {
        return Err(Error::shape("prune_curve", h, relevance.len()));
    }
    let full_mse = mse(net, test)?;
    let order = removal_order(relevance);
    let mut alive = vec![true; h];
    let mut points = Vec::with_capacity(h.saturating_sub(1));
    for &node in order.iter().take(h.saturating_sub(1)) {
        alive[node] = false;
        let keep: Vec<usize> = (0..h).filter(|&i| alive[i]).collect();
        let pruned = prune_to(net, &keep)?;
        points.push(PrunePoint {
            n_lambda: keep.len(),
            delta_mse: mse(&pruned, test)? - full_mse,
        });
    }
    Ok(PruneCurve {
        points,
        n_teacher,
        full_mse,
    })
}

/// Products of consecutive effective weights along input → first hidden →
/// second hidden paths. Indexed `[i0][i1][i2]`, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTensor {
    pub n0: usize,
    pub n1: usize,
    pub n2: usize,
    pub values: Vec<f64>,
}

impl PathTensor {
    pub fn get(&self, i0: usize, i1: usize, i2: usize) -> f64 {
        self.values[(i0 * self.n1 + i1) * self.n2 + i2]
    }
}

pub fn path_tensor(net: &Network) -> Result<PathTensor> {
    if net.layers.len() < 2 {
        return Err(Error::InvalidArgument(
            "path magnitudes need at least two linear transfers".into(),
        ));
    }
    let w1 = net.layers[0].effective_weights();
    let w2 = net.layers[1].effective_weights();
    let (n1, n0) = w1.shape();
    let n2 = w2.rows();
    let mut values = Vec::with_capacity(n0 * n1 * n2);
    for i0 in 0..n0 {
        for i1 in 0..n1 {
            let a = w1[(i1, i0)];
            for i2 in 0..n2 {
                values.push(a * w2[(i2, i1)]);
            }
        }
    }
    Ok(PathTensor { n0, n1, n2, values })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSpectrum {
    pub sorted_values: Vec<f64>,
    /// Sorted rank mapped onto `[0, 1]`.
    pub frac_index: Vec<f64>,
}

impl PathSpectrum {
    pub fn from_values(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty path tensor".into()));
        }
        values.sort_by(f64::total_cmp);
        let last = (values.len() - 1).max(1) as f64;
        let frac_index = (0..values.len()).map(|i| i as f64 / last).collect();
        Ok(PathSpectrum {
            sorted_values: values,
            frac_index,
        })
    }

    pub fn len(&self) -> usize {
        self.sorted_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted_values.is_empty()
    }

    /// Linear interpolation of the sorted curve at fraction `t`.
    pub fn value_at(&self, t: f64) -> f64 {
        let n = self.sorted_values.len();
        if n == 1 {
            return self.sorted_values[0];
        }
        let pos = t.clamp(0.0, 1.0) * (n - 1) as f64;
        let lo = (pos.floor() as usize).min(n - 2);
        let frac = pos - lo as f64;
        let (a, b) = (self.sorted_values[lo], self.sorted_values[lo + 1]);
        a + (b - a) * frac
    }
}

/// Sorted flattening of every entry of the path tensor.
pub fn path_spectrum(gamma: &PathTensor) -> Result<PathSpectrum> {
    PathSpectrum::from_values(gamma.values.clone())
}

/// Root-mean-square gap between two spectra resampled on a common uniform
/// grid of [`SPECTRUM_GRID`] points.
pub fn spectrum_distance(a: &PathSpectrum, b: &PathSpectrum) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("empty path spectrum".into()));
    }
    let last = (SPECTRUM_GRID - 1) as f64;
    let sum = (0..SPECTRUM_GRID).fold(0.0, |acc, k| {
        let t = k as f64 / last;
        let d = a.value_at(t) - b.value_at(t);
        acc + d * d
    });
    Ok((sum / SPECTRUM_GRID as f64).sqrt())
}
