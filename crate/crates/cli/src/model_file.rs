//! JSON model files. Floats are written in shortest round-trip form and read
//! back with correctly rounded parsing, so a saved network reproduces its
//! outputs bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use spectral_core::experiment::TrialKey;
use spectral_core::{DenseLayer, Layer, Matrix, Network, SpectralLayer};

use crate::error::{CliError, CliResult};
use crate::manifest::write_file;

pub const FORMAT: &str = "spectral-core-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub activation: String,
    /// Layer widths from input to output.
    pub dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<Origin>,
    pub layers: Vec<LayerRecord>,
}

/// Where a model came from, when it was produced by a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Origin {
    pub h: usize,
    pub parametrization: String,
    pub trial: usize,
    pub seed: u64,
}

impl Origin {
    pub fn from_key(key: &TrialKey, seed: u64) -> Self {
        Origin {
            h: key.h,
            parametrization: key.parametrization.name().to_string(),
            trial: key.trial,
            seed,
        }
    }
}

/// Matrices are stored row-major with explicit `rows × cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerRecord {
    Dense {
        rows: usize,
        cols: usize,
        weights: Vec<f64>,
    },
    Spectral {
        rows: usize,
        cols: usize,
        phi: Vec<f64>,
        lambda_in: Vec<f64>,
        lambda_out: Vec<f64>,
        lambda_in_trainable: bool,
        lambda_out_trainable: bool,
    },
}

impl ModelFile {
    pub fn from_network(net: &Network, origin: Option<Origin>) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => LayerRecord::Dense {
                    rows: d.weights.rows(),
                    cols: d.weights.cols(),
                    weights: d.weights.as_slice().to_vec(),
                },
                Layer::Spectral(s) => LayerRecord::Spectral {
                    rows: s.phi.rows(),
                    cols: s.phi.cols(),
                    phi: s.phi.as_slice().to_vec(),
                    lambda_in: s.lambda_in.clone(),
                    lambda_out: s.lambda_out.clone(),
                    lambda_in_trainable: s.lambda_in_trainable,
                    lambda_out_trainable: s.lambda_out_trainable,
                },
            })
            .collect();
        ModelFile {
            format: FORMAT.to_string(),
            version: FORMAT_VERSION,
            activation: net.activation.name().to_string(),
            dims: net.dims(),
            origin,
            layers,
        }
    }

    pub fn to_network(&self) -> CliResult<Network> {
        if self.format != FORMAT || self.version != FORMAT_VERSION {
            return Err(CliError::Validation(format!(
                "unsupported model format {:?} version {}",
                self.format, self.version
            )));
        }
        let activation = self
            .activation
            .parse()
            .map_err(|e: spectral_core::Error| CliError::Validation(format!("model activation: {e}")))?;
        let layers = self
            .layers
            .iter()
            .map(|rec| -> CliResult<Layer> {
                Ok(match rec {
                    LayerRecord::Dense { rows, cols, weights } => {
                        Layer::Dense(DenseLayer::new(Matrix::from_vec(*rows, *cols, weights.clone())?))
                    }
                    LayerRecord::Spectral {
                        rows,
                        cols,
                        phi,
                        lambda_in,
                        lambda_out,
                        lambda_in_trainable,
                        lambda_out_trainable,
                    } => Layer::Spectral(SpectralLayer::with_eigenvalues(
                        Matrix::from_vec(*rows, *cols, phi.clone())?,
                        lambda_in.clone(),
                        lambda_out.clone(),
                        *lambda_in_trainable,
                        *lambda_out_trainable,
                    )?),
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let net = Network::new(layers, activation)?;
        if net.dims() != self.dims {
            return Err(CliError::Validation(format!(
                "model dims {:?} disagree with its layers {:?}",
                self.dims,
                net.dims()
            )));
        }
        Ok(net)
    }

    pub fn to_json(&self) -> CliResult<String> {
        let finite = self.layers.iter().all(|l| match l {
            LayerRecord::Dense { weights, .. } => weights.iter().all(|v| v.is_finite()),
            LayerRecord::Spectral {
                phi,
                lambda_in,
                lambda_out,
                ..
            } => phi.iter().chain(lambda_in).chain(lambda_out).all(|v| v.is_finite()),
        });
        if !finite {
            return Err(CliError::Numerical("refusing to save a model with non-finite parameters".into()));
        }
        let mut s = serde_json::to_string_pretty(self).expect("model records serialize");
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("model file: {e}")))
    }
}

pub fn save(path: &Path, net: &Network, origin: Option<Origin>) -> CliResult<()> {
    let text = ModelFile::from_network(net, origin).to_json()?;
    write_file(path, text.as_bytes())
}

pub fn load(path: &Path) -> CliResult<(Network, Option<Origin>)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let file = ModelFile::from_json(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok((file.to_network()?, file.origin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use spectral_core::experiment::{build_student_pair, Parametrization, StudentSpec};
    use spectral_core::numerics::sample_standard_gaussian;
    use spectral_core::training::forward;
    use spectral_core::SeededRng;

    #[test]
    fn round_trip_preserves_every_bit() {
        let (standard, spectral) = build_student_pair(&StudentSpec::new(7, Parametrization::Spectral, 3)).unwrap();
        for net in [standard, spectral] {
            let text = ModelFile::from_network(&net, None).to_json().unwrap();
            let back = ModelFile::from_json(&text).unwrap().to_network().unwrap();
            assert_eq!(back, net);
            let x = sample_standard_gaussian(&mut SeededRng::new(8), 10, 100).unwrap();
            for i in 0..100 {
                let (a, b) = (forward(&net, x.row(i)).unwrap(), forward(&back, x.row(i)).unwrap());
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn awkward_floats_survive() {
        let w = Matrix::from_rows(&[[0.1 + 0.2, f64::MIN_POSITIVE, -5e-324, 1.0 / 3.0]]);
        let net = Network::new(vec![Layer::Dense(DenseLayer::new(w))], spectral_core::Activation::Erf).unwrap();
        let text = ModelFile::from_network(&net, None).to_json().unwrap();
        let back = ModelFile::from_json(&text).unwrap().to_network().unwrap();
        for (a, b) in back.layers[0]
            .effective_weights()
            .as_slice()
            .iter()
            .zip(net.layers[0].effective_weights().as_slice())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_bad_files() {
        assert!(ModelFile::from_json("{}").is_err());
        let w = Matrix::from_rows(&[[1.0, 2.0]]);
        let net = Network::new(vec![Layer::Dense(DenseLayer::new(w))], spectral_core::Activation::Tanh).unwrap();
        let mut file = ModelFile::from_network(&net, None);
        file.dims = vec![3, 1];
        assert!(file.to_network().is_err());
        if let LayerRecord::Dense { weights, .. } = &mut file.layers[0] {
            weights[0] = f64::NAN;
        }
        assert!(file.to_json().is_err());
    }
}
