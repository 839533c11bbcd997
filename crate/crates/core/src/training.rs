//! Networks, regularized squared-error losses, Adam and gradient checking.

use crate::error::{Error, Result};
use crate::layers::{Activation, Layer, ParamBlock, ParamGradients};
use crate::numerics::{Matrix, SeededRng, Vector};

use rand::seq::SliceRandom;

/// RNG stream used for epoch shuffling, kept apart from initialization streams.
pub const SHUFFLE_STREAM: u64 = 1;

/// Rows evaluated at once when scoring a whole dataset.
const EVAL_CHUNK: usize = 1024;

/// Ordered stack of linear transfers. The activation follows every layer but
/// the last, so the output is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl Network {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].n_out() != pair[1].n_in() {
                return Err(Error::shape(
                    "Network::new",
                    format!("layer {} input of {}", k + 1, pair[0].n_out()),
                    pair[1].n_in(),
                ));
            }
        }
        Ok(Network { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out()
    }

    /// Layer widths, input first: a 10-20-20-1 network gives `[10, 20, 20, 1]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::n_out))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => d.weights.as_slice().len(),
                Layer::Spectral(s) => s.phi.as_slice().len() + s.n_in() + s.n_out(),
            })
            .sum()
    }

    pub fn forward_vector(&self, x: &[f64]) -> Result<Vector> {
        let last = self.layers.len() - 1;
        let mut a = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&a)?;
            a = if k == last {
                z
            } else {
                z.into_iter().map(|v| self.activation.apply(v)).collect()
            };
        }
        Ok(a)
    }

    /// Outputs for every row of `x`, one row per sample.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        let last = self.layers.len() - 1;
        let mut a = self.layers[0].forward_batch(x)?;
        if last > 0 {
            self.activate(&mut a);
        }
        for (k, layer) in self.layers.iter().enumerate().skip(1) {
            a = layer.forward_batch(&a)?;
            if k != last {
                self.activate(&mut a);
            }
        }
        Ok(a)
    }

    fn activate(&self, z: &mut Matrix) {
        let act = self.activation;
        z.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
    }

    pub fn param_blocks_mut(&mut self) -> Vec<ParamBlock<'_>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.param_blocks_mut())
            .collect()
    }
}

/// Scalar network output.
pub fn forward(net: &Network, x: &[f64]) -> Result<f64> {
    if net.output_dim() != 1 {
        return Err(Error::shape("forward", "scalar output", net.output_dim()));
    }
    Ok(net.forward_vector(x)?[0])
}

/// Inputs (one sample per row) with scalar targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Vector,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Vector) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::shape("Dataset::new", inputs.rows(), targets.len()));
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

fn check_data(net: &Network, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.dim() != net.input_dim() {
        return Err(Error::shape("dataset", net.input_dim(), data.dim()));
    }
    if net.output_dim() != 1 {
        return Err(Error::shape("dataset targets", "scalar output", net.output_dim()));
    }
    Ok(())
}

/// Mean squared residual over the dataset.
pub fn mse(net: &Network, data: &Dataset) -> Result<f64> {
    check_data(net, data)?;
    let n = data.len();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let out = net.forward_batch(&data.inputs.select_rows(&idx))?;
        for (k, i) in (start..end).enumerate() {
            let r = data.targets[i] - out[(k, 0)];
            total += r * r;
        }
        start = end;
    }
    Ok(total / n as f64)
}

/// L2 coefficients. Penalties are plain sums of squares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizationConfig {
    pub alpha_w: f64,
    pub alpha_lambda: f64,
    pub alpha_phi: f64,
}

/// Defaults were tuned once on the h = 40 and h = 100 sweep (5 trials, 2000
/// epochs) and then frozen.
impl Default for RegularizationConfig {
    fn default() -> Self {
        RegularizationConfig {
            alpha_w: 2e-5,
            alpha_lambda: 1e-4,
            alpha_phi: 1e-4,
        }
    }
}

impl RegularizationConfig {
    pub const NONE: RegularizationConfig = RegularizationConfig {
        alpha_w: 0.0,
        alpha_lambda: 0.0,
        alpha_phi: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_w", self.alpha_w),
            ("alpha_lambda", self.alpha_lambda),
            ("alpha_phi", self.alpha_phi),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Penalty over every layer except the output layer: dense layers pay
/// `alpha_w Σw²`, spectral layers `alpha_lambda Σλ_out² + alpha_phi Σφ²`.
pub fn regularization_penalty(net: &Network, reg: &RegularizationConfig) -> f64 {
    let hidden = net.layers.len() - 1;
    net.layers[..hidden]
        .iter()
        .map(|l| match l {
            Layer::Dense(d) => reg.alpha_w * d.weights.sum_of_squares(),
            Layer::Spectral(s) => {
                let lam = s.lambda_out.iter().fold(0.0, |a, v| a + v * v);
                reg.alpha_lambda * lam + reg.alpha_phi * s.phi.sum_of_squares()
            }
        })
        .sum()
}

/// Mean squared error plus the regularization penalty.
pub fn total_loss(net: &Network, batch: &Dataset, reg: &RegularizationConfig) -> Result<f64> {
    Ok(mse(net, batch)? + regularization_penalty(net, reg))
}

/// Loss of the conventionally parametrized student: both hidden transfers
/// must be dense.
pub fn loss_standard(net: &Network, batch: &Dataset, reg: &RegularizationConfig) -> Result<f64> {
    if net.layers.len() < 3 || net.layers[..2].iter().any(Layer::is_spectral) {
        return Err(Error::InvalidArgument(
            "loss_standard expects dense first and second hidden layers".into(),
        ));
    }
    total_loss(net, batch, reg)
}

/// Loss of the spectral student: spectral first hidden layer, dense second.
pub fn loss_spectral(net: &Network, batch: &Dataset, reg: &RegularizationConfig) -> Result<f64> {
    if net.layers.len() < 3 || !net.layers[0].is_spectral() || net.layers[1].is_spectral() {
        return Err(Error::InvalidArgument(
            "loss_spectral expects a spectral first and dense second hidden layer".into(),
        ));
    }
    total_loss(net, batch, reg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGradients {
    pub layers: Vec<ParamGradients>,
}

impl NetworkGradients {
    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(ParamGradients::blocks).collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(ParamGradients::blocks_mut)
            .collect()
    }
}

/// Total regularized loss on `batch` and its gradient with respect to every
/// parameter. Untrainable blocks report zero.
pub fn loss_and_gradients(
    net: &Network,
    batch: &Dataset,
    reg: &RegularizationConfig,
) -> Result<(f64, NetworkGradients)> {
    check_data(net, batch)?;
    let n_layers = net.layers.len();
    let act = net.activation;
    let b = batch.len();

    // inputs[k] feeds layer k; pre[k] is its pre-activation.
    let mut inputs: Vec<Matrix> = Vec::with_capacity(n_layers);
    let mut pre: Vec<Matrix> = Vec::with_capacity(n_layers);
    inputs.push(batch.inputs.clone());
    for (k, layer) in net.layers.iter().enumerate() {
        let z = layer.forward_batch(&inputs[k])?;
        if k + 1 < n_layers {
            inputs.push(z.map(|v| act.apply(v)));
        }
        pre.push(z);
    }
    let out = &pre[n_layers - 1];

    let mut sq = 0.0;
    let mut upstream = Matrix::zeros(b, 1);
    let scale = 2.0 / b as f64;
    for i in 0..b {
        let r = out[(i, 0)] - batch.targets[i];
        sq += r * r;
        upstream[(i, 0)] = scale * r;
    }
    let loss = sq / b as f64 + regularization_penalty(net, reg);

    let mut grads = Vec::with_capacity(n_layers);
    for k in (0..n_layers).rev() {
        let g = net.layers[k].backward_inner(&inputs[k], &upstream, k > 0)?;
        grads.push(g.params);
        if k > 0 {
            let mut d = g.d_input;
            let z = &pre[k - 1];
            let a = &inputs[k];
            for ((dv, &zv), &av) in d
                .as_mut_slice()
                .iter_mut()
                .zip(z.as_slice())
                .zip(a.as_slice())
            {
                *dv *= act.derivative_given(zv, av);
            }
            upstream = d;
        }
    }
    grads.reverse();

    for (layer, g) in net.layers[..n_layers - 1].iter().zip(grads.iter_mut()) {
        match (layer, g) {
            (Layer::Dense(d), ParamGradients::Dense { d_weights }) => {
                let c = 2.0 * reg.alpha_w;
                for (gv, &w) in d_weights.as_mut_slice().iter_mut().zip(d.weights.as_slice()) {
                    *gv += c * w;
                }
            }
            (
                Layer::Spectral(s),
                ParamGradients::Spectral {
                    d_phi, d_lambda_out, ..
                },
            ) => {
                let c = 2.0 * reg.alpha_phi;
                for (gv, &p) in d_phi.as_mut_slice().iter_mut().zip(s.phi.as_slice()) {
                    *gv += c * p;
                }
                if s.lambda_out_trainable {
                    let c = 2.0 * reg.alpha_lambda;
                    for (gv, &l) in d_lambda_out.iter_mut().zip(&s.lambda_out) {
                        *gv += c * l;
                    }
                }
            }
            _ => unreachable!("gradient kind mirrors layer kind"),
        }
    }
    Ok((loss, NetworkGradients { layers: grads }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment buffers, one per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(net: &mut Network) -> Self {
        let sizes: Vec<usize> = net.param_blocks_mut().iter().map(|b| b.values.len()).collect();
        AdamState {
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update. Untrainable blocks are left untouched.
/// Parameters and moments smaller than this are set to zero after each Adam
/// step. Regularized weights of pruned-away nodes otherwise shrink
/// geometrically into the subnormal range, where arithmetic becomes an order
/// of magnitude slower, while contributing nothing to the output.
pub const FLUSH_BELOW: f64 = 1e-30;

#[inline]
fn flush_tiny(x: &mut f64) {
    if x.abs() < FLUSH_BELOW {
        *x = 0.0;
    }
}

pub fn adam_step(
    net: &mut Network,
    grads: &NetworkGradients,
    state: &mut AdamState,
    params: &AdamParams,
) -> Result<()> {
    let grad_blocks = grads.blocks();
    let mut blocks = net.param_blocks_mut();
    if blocks.len() != grad_blocks.len() || blocks.len() != state.first_moment.len() {
        return Err(Error::shape("adam_step", blocks.len(), grad_blocks.len()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - params.beta1.powi(t);
    let c2 = 1.0 - params.beta2.powi(t);
    for (((block, g), m), v) in blocks
        .iter_mut()
        .zip(&grad_blocks)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        if block.values.len() != g.len() || m.len() != g.len() {
            return Err(Error::shape("adam_step block", block.values.len(), g.len()));
        }
        if !block.trainable {
            continue;
        }
        for k in 0..g.len() {
            m[k] = params.beta1 * m[k] + (1.0 - params.beta1) * g[k];
            v[k] = params.beta2 * v[k] + (1.0 - params.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            block.values[k] -= params.learning_rate * m_hat / (v_hat.sqrt() + params.epsilon);
            flush_tiny(&mut block.values[k]);
            flush_tiny(&mut m[k]);
            flush_tiny(&mut v[k]);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub seed: u64,
    pub reg: RegularizationConfig,
    /// Test MSE is recorded every this many epochs (and after the last one);
    /// 0 disables it.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            batch_size: 300,
            adam: AdamParams::default(),
            seed: 0,
            reg: RegularizationConfig::default(),
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        let a = &self.adam;
        if !(a.beta1 > 0.0 && a.beta1 < 1.0 && a.beta2 > 0.0 && a.beta2 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "Adam betas must lie in (0, 1), got {} and {}",
                a.beta1, a.beta2
            )));
        }
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                a.learning_rate
            )));
        }
        if a.epsilon.is_nan() || a.epsilon < 0.0 {
            return Err(Error::InvalidArgument("Adam epsilon must be >= 0".into()));
        }
        if self.batch_size == 0 || self.batch_size > dataset_len {
            return Err(Error::InvalidArgument(format!(
                "batch size {} must lie in 1..={dataset_len}",
                self.batch_size
            )));
        }
        self.reg.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    /// Per epoch, the sample-weighted mean of the regularized batch losses.
    pub train_loss: Vec<f64>,
    /// `(epoch, test MSE)`, epochs counted from 1.
    pub test_mse: Vec<(usize, f64)>,
}

/// Minibatch Adam. Each epoch reshuffles the samples with the configured seed
/// and walks them in batches of `batch_size`; a short final batch is kept.
pub fn train(
    mut net: Network,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Network, TrainHistory)> {
    check_data(&net, data)?;
    if let Some(t) = test {
        check_data(&net, t)?;
    }
    cfg.validate(data.len())?;

    let mut rng = SeededRng::with_stream(cfg.seed, SHUFFLE_STREAM);
    let mut state = AdamState::new(&mut net);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.subset(chunk);
            let (loss, grads) = loss_and_gradients(&net, &batch, &cfg.reg)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: bi,
                    loss,
                });
            }
            epoch_loss += loss * chunk.len() as f64;
            adam_step(&mut net, &grads, &mut state, &cfg.adam)?;
        }
        history.train_loss.push(epoch_loss / data.len() as f64);

        let done = epoch + 1;
        if let Some(t) = test {
            if cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.epochs) {
                history.test_mse.push((done, mse(&net, t)?));
            }
        }
    }
    Ok((net, history))
}

/// Denominator floor of the relative error, so that gradient entries within
/// roundoff of zero are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub layer: usize,
    pub block: &'static str,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries_checked: usize,
    pub blocks: Vec<BlockCheck>,
    /// Untrainable blocks whose analytic gradient is not exactly zero.
    pub nonzero_frozen: usize,
}

fn block_names(layer: &Layer) -> &'static [&'static str] {
    match layer {
        Layer::Dense(_) => &["weights"],
        Layer::Spectral(_) => &["phi", "lambda_in", "lambda_out"],
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares the analytic gradient of the full regularized loss against central
/// differences with the given step, entry by entry.
pub fn grad_check(
    net: &Network,
    batch: &Dataset,
    reg: &RegularizationConfig,
    step: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_gradients(net, batch, reg)?;
    grad_check_against(net, batch, reg, step, &grads)
}

/// [`grad_check`] against caller-supplied gradients (negative controls).
pub fn grad_check_against(
    net: &Network,
    batch: &Dataset,
    reg: &RegularizationConfig,
    step: f64,
    grads: &NetworkGradients,
) -> Result<GradCheckReport> {
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        entries_checked: 0,
        blocks: Vec::new(),
        nonzero_frozen: 0,
    };
    let names: Vec<(usize, &'static str)> = net
        .layers
        .iter()
        .enumerate()
        .flat_map(|(k, l)| block_names(l).iter().map(move |&n| (k, n)))
        .collect();
    let analytic = grads.blocks();

    for (bi, &(layer, name)) in names.iter().enumerate() {
        let (len, trainable) = {
            let blocks = probe.param_blocks_mut();
            (blocks[bi].values.len(), blocks[bi].trainable)
        };
        if !trainable {
            if analytic[bi].iter().any(|&g| g != 0.0) {
                report.nonzero_frozen += 1;
            }
            continue;
        }
        let mut check = BlockCheck {
            layer,
            block: name,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for (k, &a) in analytic[bi].iter().enumerate().take(len) {
            let orig = probe.param_blocks_mut()[bi].values[k];
            let (up, down) = (orig + step, orig - step);
            probe.param_blocks_mut()[bi].values[k] = up;
            let plus = loss_compensated(&probe, batch, reg);
            probe.param_blocks_mut()[bi].values[k] = down;
            let minus = loss_compensated(&probe, batch, reg);
            probe.param_blocks_mut()[bi].values[k] = orig;
            // The realized step, not the requested one: orig ± step rounds.
            let numeric = plus.sub(minus).hi / (up - down);
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
            report.entries_checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.blocks.push(check);
    }
    Ok(report)
}

/// Double-double number `hi + lo`, used so that the finite-difference
/// oracle's loss carries about 30 significant digits and the difference of
/// two nearby losses is not swamped by roundoff.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    fn from(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    fn renorm(hi: f64, lo: f64) -> Dd {
        let s = hi + lo;
        Dd {
            hi: s,
            lo: lo - (s - hi),
        }
    }

    fn add(self, o: Dd) -> Dd {
        let s = self.hi + o.hi;
        let bb = s - self.hi;
        let e = (self.hi - (s - bb)) + (o.hi - bb);
        Dd::renorm(s, e + self.lo + o.lo)
    }

    fn sub(self, o: Dd) -> Dd {
        self.add(Dd { hi: -o.hi, lo: -o.lo })
    }

    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        Dd::renorm(p, e + self.hi * o.lo + self.lo * o.hi)
    }

    fn div_f64(self, d: f64) -> Dd {
        let q = self.hi / d;
        let p = Dd::from(q).mul(Dd::from(d));
        let r = self.sub(p);
        Dd::renorm(q, (r.hi + r.lo) / d)
    }
}

fn activate_compensated(act: Activation, z: Dd) -> Dd {
    match act {
        Activation::Identity => z,
        Activation::Relu => {
            if z.hi > 0.0 {
                z
            } else {
                Dd::ZERO
            }
        }
        _ => Dd::from(act.apply(z.hi + z.lo)),
    }
}

fn sum_squares_compensated(values: &[f64]) -> Dd {
    values
        .iter()
        .fold(Dd::ZERO, |acc, &v| acc.add(Dd::from(v).mul(Dd::from(v))))
}

/// [`total_loss`] evaluated independently in double-double arithmetic.
/// Smooth activations other than the identity are still evaluated in `f64`.
fn loss_compensated(net: &Network, batch: &Dataset, reg: &RegularizationConfig) -> Dd {
    let n_layers = net.layers.len();
    let mut sq = Dd::ZERO;
    for b in 0..batch.len() {
        let mut x: Vec<Dd> = batch.inputs.row(b).iter().map(|&v| Dd::from(v)).collect();
        for (k, layer) in net.layers.iter().enumerate() {
            let z: Vec<Dd> = match layer {
                Layer::Dense(d) => (0..d.n_out())
                    .map(|i| {
                        d.weights
                            .row(i)
                            .iter()
                            .zip(&x)
                            .fold(Dd::ZERO, |acc, (&w, &xv)| acc.add(Dd::from(w).mul(xv)))
                    })
                    .collect(),
                Layer::Spectral(s) => (0..s.n_out())
                    .map(|i| {
                        let lo = Dd::from(s.lambda_out[i]);
                        (0..s.n_in()).fold(Dd::ZERO, |acc, j| {
                            let w = Dd::from(s.lambda_in[j]).sub(lo).mul(Dd::from(s.phi[(i, j)]));
                            acc.add(w.mul(x[j]))
                        })
                    })
                    .collect(),
            };
            x = if k + 1 < n_layers {
                z.into_iter().map(|v| activate_compensated(net.activation, v)).collect()
            } else {
                z
            };
        }
        let r = x[0].sub(Dd::from(batch.targets[b]));
        sq = sq.add(r.mul(r));
    }
    let mut loss = sq.div_f64(batch.len() as f64);
    for layer in &net.layers[..n_layers - 1] {
        let pen = match layer {
            Layer::Dense(d) => Dd::from(reg.alpha_w).mul(sum_squares_compensated(d.weights.as_slice())),
            Layer::Spectral(s) => Dd::from(reg.alpha_lambda)
                .mul(sum_squares_compensated(&s.lambda_out))
                .add(Dd::from(reg.alpha_phi).mul(sum_squares_compensated(s.phi.as_slice()))),
        };
        loss = loss.add(pen);
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{DenseLayer, SpectralLayer};
    use crate::numerics::{glorot_uniform, sample_standard_gaussian};

    fn dense(rows: &[&[f64]]) -> Layer {
        Layer::Dense(DenseLayer::new(Matrix::from_rows(rows)))
    }

    fn small_net(seed: u64, spectral: bool, act: Activation, dims: &[usize]) -> Network {
        let mut rng = SeededRng::new(seed);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, d)| {
                let w = glorot_uniform(&mut rng, d[0], d[1]).unwrap();
                if k == 0 && spectral {
                    let mut s = SpectralLayer::from_dense(&w);
                    for l in s.lambda_out.iter_mut() {
                        *l += 0.3 * rng.standard_normal();
                    }
                    Layer::Spectral(s)
                } else {
                    Layer::Dense(DenseLayer::new(w))
                }
            })
            .collect();
        Network::new(layers, act).unwrap()
    }

    fn data_for(net: &Network, seed: u64, n: usize) -> Dataset {
        let mut rng = SeededRng::new(seed);
        let x = sample_standard_gaussian(&mut rng, net.input_dim(), n).unwrap();
        let y = (0..n).map(|_| rng.standard_normal()).collect();
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn chain_validation() {
        let bad = Network::new(vec![dense(&[&[1.0, 1.0]]), dense(&[&[1.0, 1.0]])], Activation::Tanh);
        assert!(bad.is_err());
        assert!(Network::new(vec![], Activation::Tanh).is_err());
    }

    #[test]
    fn forward_examples() {
        let net = Network::new(vec![dense(&[&[1.0, 1.0]])], Activation::Identity).unwrap();
        assert_eq!(forward(&net, &[2.0, 3.0]).unwrap(), 5.0);

        for act in Activation::ALL {
            let zero = Network::new(
                vec![dense(&[&[0.0, 0.0], &[0.0, 0.0]]), dense(&[&[0.0, 0.0]])],
                act,
            )
            .unwrap();
            assert_eq!(forward(&zero, &[4.0, -1.0]).unwrap(), 0.0);
        }

        // All-ones output layer sums the last hidden activations.
        let net = Network::new(
            vec![dense(&[&[1.0], &[-2.0], &[0.5]]), dense(&[&[1.0, 1.0, 1.0]])],
            Activation::Tanh,
        )
        .unwrap();
        let expect = 0.7f64.tanh() + (-1.4f64).tanh() + 0.35f64.tanh();
        assert!((forward(&net, &[0.7]).unwrap() - expect).abs() < 1e-15);
        assert!(forward(&net, &[0.7, 1.0]).is_err());
    }

    #[test]
    fn mse_examples() {
        let zero = Network::new(vec![dense(&[&[0.0]])], Activation::Identity).unwrap();
        let ones = Dataset::new(Matrix::from_rows(&[[1.0], [2.0], [3.0]]), vec![1.0; 3]).unwrap();
        assert_eq!(mse(&zero, &ones).unwrap(), 1.0);

        let id = Network::new(vec![dense(&[&[1.0]])], Activation::Identity).unwrap();
        // residuals 1 and -2
        let d = Dataset::new(Matrix::from_rows(&[[0.0], [3.0]]), vec![1.0, 1.0]).unwrap();
        assert_eq!(mse(&id, &d).unwrap(), 2.5);

        let empty = Dataset::new(Matrix::zeros(0, 1), vec![]).unwrap();
        assert_eq!(mse(&id, &empty), Err(Error::EmptyDataset));

        let net = small_net(3, false, Activation::Tanh, &[4, 6, 5, 1]);
        let x = sample_standard_gaussian(&mut SeededRng::new(1), 4, 50).unwrap();
        let y = (0..50).map(|i| forward(&net, x.row(i)).unwrap()).collect();
        assert_eq!(mse(&net, &Dataset::new(x, y).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn batch_forward_matches_per_sample_bitwise() {
        let net = small_net(8, true, Activation::Erf, &[10, 7, 5, 1]);
        let x = sample_standard_gaussian(&mut SeededRng::new(2), 10, 30).unwrap();
        let out = net.forward_batch(&x).unwrap();
        for i in 0..30 {
            assert_eq!(out[(i, 0)], forward(&net, x.row(i)).unwrap());
        }
    }

    #[test]
    fn loss_examples() {
        let std_net = Network::new(
            vec![dense(&[&[1.0, 2.0]]), dense(&[&[0.0]]), dense(&[&[1.0]])],
            Activation::Identity,
        )
        .unwrap();
        let data = Dataset::new(Matrix::from_rows(&[[0.3, -0.1]]), vec![0.0]).unwrap();
        let reg = RegularizationConfig {
            alpha_w: 0.1,
            ..RegularizationConfig::NONE
        };
        assert!((loss_standard(&std_net, &data, &reg).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(
            loss_standard(&std_net, &data, &RegularizationConfig::NONE).unwrap(),
            mse(&std_net, &data).unwrap()
        );
        assert!(loss_spectral(&std_net, &data, &reg).is_err());

        let spec = SpectralLayer::new(Matrix::zeros(2, 2), vec![1.0, 1.0]).unwrap();
        let net = Network::new(
            vec![Layer::Spectral(spec), dense(&[&[1.0, 1.0]]), dense(&[&[1.0]])],
            Activation::Tanh,
        )
        .unwrap();
        let data = Dataset::new(Matrix::from_rows(&[[0.3, -0.1]]), vec![0.4]).unwrap();
        let reg = RegularizationConfig {
            alpha_lambda: 0.5,
            ..RegularizationConfig::NONE
        };
        let l = loss_spectral(&net, &data, &reg).unwrap();
        assert!((l - (mse(&net, &data).unwrap() + 1.0)).abs() < 1e-15);
        assert!(loss_standard(&net, &data, &reg).is_err());
    }

    #[test]
    fn adam_examples() {
        let mut net = Network::new(vec![dense(&[&[0.5]])], Activation::Identity).unwrap();
        let mut state = AdamState::new(&mut net);
        let zero = NetworkGradients {
            layers: vec![ParamGradients::Dense {
                d_weights: Matrix::zeros(1, 1),
            }],
        };
        adam_step(&mut net, &zero, &mut state, &AdamParams::default()).unwrap();
        assert_eq!(state.step_count, 1);
        let Layer::Dense(d) = &net.layers[0] else { unreachable!() };
        assert_eq!(d.weights[(0, 0)], 0.5);

        let mut net = Network::new(vec![dense(&[&[0.5]])], Activation::Identity).unwrap();
        let mut state = AdamState::new(&mut net);
        let one = NetworkGradients {
            layers: vec![ParamGradients::Dense {
                d_weights: Matrix::from_rows(&[[1.0]]),
            }],
        };
        let p = AdamParams::default();
        let mut twin = (net.clone(), state.clone());
        adam_step(&mut net, &one, &mut state, &p).unwrap();
        adam_step(&mut twin.0, &one, &mut twin.1, &p).unwrap();
        assert_eq!(net, twin.0);
        assert_eq!(state, twin.1);
        let Layer::Dense(d) = &net.layers[0] else { unreachable!() };
        assert!((d.weights[(0, 0)] - (0.5 - p.learning_rate)).abs() < 1e-10);
    }

    #[test]
    fn adam_skips_frozen_blocks() {
        let mut net = small_net(4, true, Activation::Tanh, &[3, 4, 2, 1]);
        let data = data_for(&net, 9, 6);
        let (_, mut grads) = loss_and_gradients(&net, &data, &RegularizationConfig::default()).unwrap();
        // Force a nonzero lambda_in gradient; it must still be ignored.
        grads.blocks_mut()[1].iter_mut().for_each(|g| *g = 1.0);
        let before = net.clone();
        let mut state = AdamState::new(&mut net);
        adam_step(&mut net, &grads, &mut state, &AdamParams::default()).unwrap();
        let (Layer::Spectral(a), Layer::Spectral(b)) = (&before.layers[0], &net.layers[0]) else {
            unreachable!()
        };
        assert_eq!(a.lambda_in, b.lambda_in);
        assert_ne!(a.phi, b.phi);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let reg = RegularizationConfig {
            alpha_w: 1e-2,
            alpha_lambda: 3e-2,
            alpha_phi: 2e-2,
        };
        for act in Activation::ALL {
            for spectral in [false, true] {
                let net = small_net(17, spectral, act, &[10, 8, 5, 1]);
                let data = data_for(&net, 5, 12);
                let report = grad_check(&net, &data, &reg, 1e-5).unwrap();
                assert!(report.max_rel_error < 1e-6, "{act} spectral={spectral}: {report:?}");
                assert_eq!(report.nonzero_frozen, 0);
            }
        }
    }

    #[test]
    fn linear_grad_check_is_tight() {
        let net = small_net(2, true, Activation::Identity, &[3, 2, 2, 1]);
        let data = data_for(&net, 1, 5);
        let report = grad_check(&net, &data, &RegularizationConfig::default(), 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn compensated_loss_agrees_with_plain_loss() {
        let reg = RegularizationConfig {
            alpha_w: 0.1,
            alpha_lambda: 0.2,
            alpha_phi: 0.3,
        };
        for act in Activation::ALL {
            for spectral in [false, true] {
                let net = small_net(4, spectral, act, &[5, 4, 3, 1]);
                let data = data_for(&net, 7, 12);
                let plain = total_loss(&net, &data, &reg).unwrap();
                let dd = loss_compensated(&net, &data, &reg);
                assert!((dd.hi + dd.lo - plain).abs() <= 1e-14 * plain.abs(), "{act}: {dd:?} vs {plain}");
            }
        }
        // The low word carries what f64 drops.
        let x = Dd::from(1.0).add(Dd::from(1e-20));
        assert_eq!((x.hi, x.lo), (1.0, 1e-20));
        assert_eq!(x.sub(Dd::from(1.0)).hi, 1e-20);
        let third = Dd::from(1.0).div_f64(3.0);
        assert!((third.mul(Dd::from(3.0)).sub(Dd::from(1.0)).hi).abs() < 1e-30);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let net = small_net(6, true, Activation::Tanh, &[4, 3, 2, 1]);
        let data = data_for(&net, 2, 8);
        let reg = RegularizationConfig::default();
        let (_, mut grads) = loss_and_gradients(&net, &data, &reg).unwrap();
        grads.blocks_mut()[0][0] += 0.05;
        let report = grad_check_against(&net, &data, &reg, 1e-5, &grads).unwrap();
        assert!(report.max_rel_error > 1e-6);
    }

    #[test]
    fn train_zero_epochs_is_identity() {
        let net = small_net(1, true, Activation::Tanh, &[4, 6, 3, 1]);
        let data = data_for(&net, 3, 40);
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let (out, hist) = train(net.clone(), &data, None, &cfg).unwrap();
        assert_eq!(out, net);
        assert!(hist.train_loss.is_empty());
    }

    #[test]
    fn train_is_deterministic_and_reduces_loss() {
        let teacher = small_net(10, false, Activation::Tanh, &[4, 5, 3, 1]);
        let x = sample_standard_gaussian(&mut SeededRng::new(4), 4, 200).unwrap();
        let y = (0..200).map(|i| forward(&teacher, x.row(i)).unwrap()).collect();
        let data = Dataset::new(x, y).unwrap();
        let student = small_net(11, true, Activation::Tanh, &[4, 8, 3, 1]);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 32,
            seed: 5,
            eval_every: 10,
            ..TrainConfig::default()
        };
        let before = mse(&student, &data).unwrap();
        let (a, ha) = train(student.clone(), &data, Some(&data), &cfg).unwrap();
        let (b, hb) = train(student, &data, Some(&data), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(ha.train_loss.len(), 30);
        assert_eq!(ha.test_mse.iter().map(|p| p.0).collect::<Vec<_>>(), vec![10, 20, 30]);
        assert!(mse(&a, &data).unwrap() < before);
    }

    #[test]
    fn divergence_is_reported() {
        let net = small_net(1, false, Activation::Identity, &[3, 4, 2, 1]);
        let data = data_for(&net, 3, 20);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 5,
            adam: AdamParams {
                learning_rate: 1e300,
                ..AdamParams::default()
            },
            ..TrainConfig::default()
        };
        let err = train(net, &data, None, &cfg).unwrap_err();
        assert!(err.is_numerical(), "{err:?}");
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig {
            batch_size: 50,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(20).is_err());
        assert!(cfg.validate(50).is_ok());
        let bad = TrainConfig {
            adam: AdamParams {
                beta1: 1.0,
                ..AdamParams::default()
            },
            ..TrainConfig::default()
        };
        assert!(bad.validate(1000).is_err());
        let neg = RegularizationConfig {
            alpha_w: -1.0,
            ..RegularizationConfig::NONE
        };
        assert!(neg.validate().is_err());
    }
}
