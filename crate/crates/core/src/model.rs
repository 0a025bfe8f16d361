//! Learnable Koopman system: MLP encoder and decoder, Koopman matrix `K`
//! and change of basis `S`, with the rollout and the three training losses.
//!
//! Lifted states evolve as `psi+ = S^-1 K S psi`. The losses over a window
//! `x_0..x_H` are
//!
//! * prediction: `sum_{k=1..H} ||x_k - dec(K'^k enc(x_0))||^2`
//! * linearity: `sum_{k=1..H} ||enc(x_k) - K'^k enc(x_0)||^2`
//! * reconstruction: `sum_{k=0..H} ||x_k - dec(enc(x_k))||^2`
//!
//! with `K' = S^-1 K S` and squared Euclidean norms throughout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// One affine layer, `weight` is `out x in`, `bias` is `out x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
}

/// Fully connected network; the activation follows every layer but the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
}

impl Mlp {
    /// Glorot-uniform weights and zero biases.
    pub fn random(sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Contract(format!(
                "layer sizes must list at least input and output widths, all positive: {sizes:?}"
            )));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Layer {
                    weight: DenseMatrix::from_raw(fan_out, fan_in, data),
                    bias: DenseMatrix::zeros(fan_out, 1),
                }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weight: DenseMatrix::zeros(w[1], w[0]),
                bias: DenseMatrix::zeros(w[1], 1),
            })
            .collect();
        Self::from_layers(layers, activation)
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("an MLP needs at least one layer".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.shape() != (l.weight.rows(), 1) {
                return Err(Error::dim(
                    "Mlp::from_layers",
                    format!(
                        "layer {k}: bias {:?} for weight {:?}",
                        l.bias.shape(),
                        l.weight.shape()
                    ),
                ));
            }
            if k > 0 && layers[k - 1].weight.rows() != l.weight.cols() {
                return Err(Error::dim(
                    "Mlp::from_layers",
                    format!(
                        "layer {k} expects {} inputs, previous layer yields {}",
                        l.weight.cols(),
                        layers[k - 1].weight.rows()
                    ),
                ));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Widths from input to output.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].weight.cols()];
        s.extend(self.layers.iter().map(|l| l.weight.rows()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
            activation: self.activation,
            input_dim: self.input_dim(),
        }
    }

    /// Forward pass on the columns of `x`.
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = vars.forward(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }
}

/// Tape handles of an [`Mlp`]'s parameters.
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
    activation: Activation,
    input_dim: usize,
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let rows = tape.value(x).rows();
        if rows != self.input_dim {
            return Err(Error::dim(
                "mlp forward",
                format!("input has {rows} rows, network expects {}", self.input_dim),
            ));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (k, (w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(*w, h)?;
            h = tape.add_column(z, *b)?;
            if k < last {
                h = tape.activate(h, self.activation);
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|(w, b)| [*w, *b])
    }
}

/// How `K` is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KInit {
    /// `c * I`. `c = 0.99` is certified from the first step; `c > 1`
    /// starts outside the feasible set.
    ScaledIdentity(f64),
}

impl Default for KInit {
    fn default() -> Self {
        KInit::ScaledIdentity(0.99)
    }
}

/// Architecture and initialization of a [`KoopmanModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub lifted_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub k_init: KInit,
    /// Half-width of the uniform noise added to `S = I` at initialization.
    pub s_noise: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            state_dim: 2,
            lifted_dim: 20,
            hidden: vec![50, 50, 50],
            activation: Activation::Tanh,
            k_init: KInit::default(),
            s_noise: 1e-3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn encoder_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.state_dim];
        s.extend(&self.hidden);
        s.push(self.lifted_dim);
        s
    }

    pub fn decoder_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.lifted_dim];
        s.extend(self.hidden.iter().rev());
        s.push(self.state_dim);
        s
    }
}

/// Encoder, decoder, Koopman matrix `K` and change of basis `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct KoopmanModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub k: DenseMatrix,
    pub s: DenseMatrix,
}

impl KoopmanModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = Mlp::random(&config.encoder_sizes(), config.activation, &mut rng)?;
        let decoder = Mlp::random(&config.decoder_sizes(), config.activation, &mut rng)?;
        let d = config.lifted_dim;
        let k = match config.k_init {
            KInit::ScaledIdentity(c) => DenseMatrix::identity(d).scale(c),
        };
        let mut s = DenseMatrix::identity(d);
        if config.s_noise > 0.0 {
            for v in s.data_mut() {
                *v += rng.random_range(-config.s_noise..config.s_noise);
            }
        }
        Self::from_parts(encoder, decoder, k, s)
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp, k: DenseMatrix, s: DenseMatrix) -> Result<Self> {
        let d = encoder.output_dim();
        if decoder.input_dim() != d || decoder.output_dim() != encoder.input_dim() {
            return Err(Error::dim(
                "KoopmanModel",
                format!(
                    "encoder {:?} and decoder {:?} do not chain",
                    encoder.sizes(),
                    decoder.sizes()
                ),
            ));
        }
        if k.shape() != (d, d) || s.shape() != (d, d) {
            return Err(Error::dim(
                "KoopmanModel",
                format!(
                    "K {:?} and S {:?} for lifted dimension {d}",
                    k.shape(),
                    s.shape()
                ),
            ));
        }
        Ok(Self {
            encoder,
            decoder,
            k,
            s,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn lifted_dim(&self) -> usize {
        self.k.rows()
    }

    /// Parameter groups in a fixed order: encoder layers (weight, bias),
    /// decoder layers, then `K` and `S`.
    pub fn parameters(&self) -> Vec<&DenseMatrix> {
        let mut out = Vec::new();
        for l in self.encoder.layers.iter().chain(&self.decoder.layers) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.k);
        out.push(&self.s);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out = Vec::new();
        for l in self
            .encoder
            .layers
            .iter_mut()
            .chain(self.decoder.layers.iter_mut())
        {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.k);
        out.push(&mut self.s);
        out
    }

    /// Index of `K` within [`KoopmanModel::parameters`].
    pub fn k_index(&self) -> usize {
        2 * (self.encoder.layers.len() + self.decoder.layers.len())
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            encoder: self.encoder.bind(tape),
            decoder: self.decoder.bind(tape),
            k: tape.leaf(self.k.clone()),
            s: tape.leaf(self.s.clone()),
            state_dim: self.state_dim(),
            lifted_dim: self.lifted_dim(),
        }
    }

    /// Lifts the columns of `states` (`n x T`).
    pub fn encode_states(&self, states: &DenseMatrix) -> Result<DenseMatrix> {
        self.encoder.forward(states)
    }

    pub fn decode_lifted(&self, lifted: &DenseMatrix) -> Result<DenseMatrix> {
        self.decoder.forward(lifted)
    }

    /// `S^-1 K S` as a plain matrix.
    pub fn effective_matrix_value(&self) -> Result<DenseMatrix> {
        let mut tape = Tape::new();
        let m = self.bind(&mut tape);
        let e = effective_matrix(&mut tape, &m)?;
        Ok(tape.value(e).clone())
    }

    /// Decoded free rollout from `x0`: column `k` is
    /// `dec(K'^k enc(x0))` for `k = 0..=steps`.
    pub fn predict(&self, x0: &[f64], steps: usize) -> Result<DenseMatrix> {
        if x0.len() != self.state_dim() {
            return Err(Error::dim(
                "predict",
                format!(
                    "initial state of length {}, model expects {}",
                    x0.len(),
                    self.state_dim()
                ),
            ));
        }
        let k_eff = self.effective_matrix_value()?;
        let mut psi = self.encode_states(&DenseMatrix::column(x0))?;
        let mut lifted = vec![psi.clone()];
        for _ in 0..steps {
            psi = k_eff.matmul(&psi)?;
            lifted.push(psi.clone());
        }
        let all = DenseMatrix::hcat(&lifted.iter().collect::<Vec<_>>())?;
        self.decode_lifted(&all)
    }
}

/// Tape handles of a [`KoopmanModel`]'s parameters.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoder: MlpVars,
    pub decoder: MlpVars,
    pub k: Var,
    pub s: Var,
    state_dim: usize,
    lifted_dim: usize,
}

impl BoundModel {
    /// Handles in the order of [`KoopmanModel::parameters`].
    pub fn parameter_vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.encoder.vars().chain(self.decoder.vars()).collect();
        v.push(self.k);
        v.push(self.s);
        v
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn lifted_dim(&self) -> usize {
        self.lifted_dim
    }
}

/// Loss weights and horizon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub pred: f64,
    pub lin: f64,
    pub rec: f64,
    pub horizon: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pred: 1.0,
            lin: 0.1,
            rec: 1.0,
            horizon: 10,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.pred, self.lin, self.rec];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Contract(format!(
                "loss weights must be non-negative: {w:?}"
            )));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Contract(
                "at least one loss weight must be positive".into(),
            ));
        }
        if self.horizon == 0 {
            return Err(Error::Contract("loss horizon must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn encode(tape: &mut Tape, model: &BoundModel, x: Var) -> Result<Var> {
    model.encoder.forward(tape, x)
}

pub fn decode(tape: &mut Tape, model: &BoundModel, psi: Var) -> Result<Var> {
    model.decoder.forward(tape, psi)
}

/// Differentiable `S^-1 K S`.
pub fn effective_matrix(tape: &mut Tape, model: &BoundModel) -> Result<Var> {
    let s_inv = tape.matinv(model.s)?;
    let ks = tape.matmul(model.k, model.s)?;
    tape.matmul(s_inv, ks)
}

/// `[K' psi0, K'^2 psi0, ..., K'^H psi0]` by repeated products.
pub fn rollout(tape: &mut Tape, k_eff: Var, psi0: Var, horizon: usize) -> Result<Vec<Var>> {
    if horizon == 0 {
        return Err(Error::Contract("rollout horizon must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(horizon);
    let mut cur = psi0;
    for _ in 0..horizon {
        cur = tape.matmul(k_eff, cur)?;
        out.push(cur);
    }
    Ok(out)
}

fn check_window(model: &BoundModel, window: &DenseMatrix, horizon: usize) -> Result<()> {
    if window.rows() != model.state_dim {
        return Err(Error::dim(
            "loss",
            format!(
                "states of dimension {}, model expects {}",
                window.rows(),
                model.state_dim
            ),
        ));
    }
    if horizon == 0 {
        return Err(Error::Contract("loss horizon must be at least 1".into()));
    }
    if window.cols() < horizon + 1 {
        return Err(Error::Data(format!(
            "trajectory of {} samples is shorter than horizon {} + 1",
            window.cols(),
            horizon
        )));
    }
    Ok(())
}

/// Decoded multi-step prediction error from the window's first sample.
pub fn loss_pred(
    tape: &mut Tape,
    model: &BoundModel,
    window: &DenseMatrix,
    horizon: usize,
) -> Result<Var> {
    check_window(model, window, horizon)?;
    let k_eff = effective_matrix(tape, model)?;
    let x0 = tape.leaf(DenseMatrix::column(&window.col(0)));
    let psi0 = encode(tape, model, x0)?;
    let steps = rollout(tape, k_eff, psi0, horizon)?;
    let mut terms = Vec::with_capacity(horizon);
    for (k, psi) in steps.into_iter().enumerate() {
        let xk = tape.leaf(DenseMatrix::column(&window.col(k + 1)));
        let xhat = decode(tape, model, psi)?;
        let diff = tape.sub(xk, xhat)?;
        terms.push(tape.sum_sq_norm(diff));
    }
    tape.sum_scalars(&terms)
}

/// Lifted-space multi-step error from the window's first sample.
pub fn loss_lin(
    tape: &mut Tape,
    model: &BoundModel,
    window: &DenseMatrix,
    horizon: usize,
) -> Result<Var> {
    check_window(model, window, horizon)?;
    let k_eff = effective_matrix(tape, model)?;
    let x0 = tape.leaf(DenseMatrix::column(&window.col(0)));
    let psi0 = encode(tape, model, x0)?;
    let steps = rollout(tape, k_eff, psi0, horizon)?;
    let mut terms = Vec::with_capacity(horizon);
    for (k, psi) in steps.into_iter().enumerate() {
        let xk = tape.leaf(DenseMatrix::column(&window.col(k + 1)));
        let target = encode(tape, model, xk)?;
        let diff = tape.sub(target, psi)?;
        terms.push(tape.sum_sq_norm(diff));
    }
    tape.sum_scalars(&terms)
}

/// Autoencoder reconstruction error summed over every sample.
pub fn loss_rec(tape: &mut Tape, model: &BoundModel, states: &DenseMatrix) -> Result<Var> {
    if states.rows() != model.state_dim {
        return Err(Error::dim(
            "loss_rec",
            format!(
                "states of dimension {}, model expects {}",
                states.rows(),
                model.state_dim
            ),
        ));
    }
    if states.cols() == 0 {
        return Err(Error::Data("empty trajectory".into()));
    }
    let x = tape.leaf(states.clone());
    let psi = encode(tape, model, x)?;
    let xhat = decode(tape, model, psi)?;
    let diff = tape.sub(x, xhat)?;
    Ok(tape.sum_sq_norm(diff))
}

/// Weighted loss averaged over a batch of windows. Each window contributes
/// its first `H + 1` samples.
pub fn total_loss(
    tape: &mut Tape,
    model: &BoundModel,
    batch: &[DenseMatrix],
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let h = weights.horizon;
    let mut per_window = Vec::with_capacity(batch.len());
    for w in batch {
        check_window(model, w, h)?;
        let head = w.select_cols(&(0..=h).collect::<Vec<_>>());
        let p = loss_pred(tape, model, &head, h)?;
        let l = loss_lin(tape, model, &head, h)?;
        let r = loss_rec(tape, model, &head)?;
        let p = tape.scale(p, weights.pred);
        let l = tape.scale(l, weights.lin);
        let r = tape.scale(r, weights.rec);
        per_window.push(tape.sum_scalars(&[p, l, r])?);
    }
    let sum = tape.sum_scalars(&per_window)?;
    Ok(tape.scale(sum, 1.0 / batch.len() as f64))
}

/// Result of [`windowed_loss`]: the differentiable total and the unweighted
/// per-window means of each component.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub pred: f64,
    pub lin: f64,
    pub rec: f64,
    pub windows: usize,
}

/// Same value as [`total_loss`] applied to every stride-1 window of length
/// `H + 1` of every trajectory, evaluated in one batched pass: each distinct
/// sample is encoded once and all windows roll out together.
pub fn windowed_loss(
    tape: &mut Tape,
    model: &BoundModel,
    trajectories: &[&DenseMatrix],
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let h = weights.horizon;
    if trajectories.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut starts = Vec::new();
    let mut rec_weights = Vec::new();
    let mut offset = 0;
    for t in trajectories {
        check_window(model, t, h)?;
        let len = t.cols();
        let windows = len - h;
        starts.extend((0..windows).map(|s| offset + s));
        // sample j lies in windows max(0, j-h) ..= min(j, windows-1)
        rec_weights.extend((0..len).map(|j| {
            let lo = j.saturating_sub(h);
            let hi = j.min(windows - 1);
            (hi + 1 - lo) as f64
        }));
        offset += len;
    }
    let n_windows = starts.len();
    let all = DenseMatrix::hcat(trajectories)?;

    let x = tape.leaf(all.clone());
    let z = encode(tape, model, x)?;
    let k_eff = effective_matrix(tape, model)?;
    let z0 = tape.select_cols(z, starts.clone())?;
    let steps = rollout(tape, k_eff, z0, h)?;
    let predicted = tape.hcat(&steps)?;
    let target_idx: Vec<usize> = (1..=h)
        .flat_map(|k| starts.iter().map(move |s| s + k))
        .collect();

    let lifted_target = tape.select_cols(z, target_idx.clone())?;
    let lin_diff = tape.sub(lifted_target, predicted)?;
    let lin = tape.sum_sq_norm(lin_diff);

    let decoded = decode(tape, model, predicted)?;
    let state_target = tape.leaf(all.select_cols(&target_idx));
    let pred_diff = tape.sub(state_target, decoded)?;
    let pred = tape.sum_sq_norm(pred_diff);

    let recon = decode(tape, model, z)?;
    let rec_diff = tape.sub(x, recon)?;
    let rec = tape.weighted_col_sum_sq(rec_diff, rec_weights)?;

    let scale = 1.0 / n_windows as f64;
    let terms = [
        tape.scale(pred, weights.pred * scale),
        tape.scale(lin, weights.lin * scale),
        tape.scale(rec, weights.rec * scale),
    ];
    let total = tape.sum_scalars(&terms)?;
    Ok(LossTerms {
        total,
        pred: tape.scalar(pred) * scale,
        lin: tape.scalar(lin) * scale,
        rec: tape.scalar(rec) * scale,
        windows: n_windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tests::{finite_diff, rel_err};
    use crate::stability::{certify_stable, eigenvalues};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            state_dim: 2,
            lifted_dim: 4,
            hidden: vec![6, 5],
            s_noise: 0.1,
            seed,
            ..ModelConfig::default()
        }
    }

    /// Small model with a generic `K`, so that `S` actually matters.
    fn small_model(seed: u64) -> KoopmanModel {
        let mut m = KoopmanModel::new(&small_config(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        m.k =
            DenseMatrix::new(4, 4, (0..16).map(|_| rng.random_range(-0.4..0.4)).collect()).unwrap();
        m
    }

    fn spiral_states(len: usize, x0: [f64; 2]) -> DenseMatrix {
        let th: f64 = 0.3;
        let a = DenseMatrix::from_rows(&[[th.cos(), -th.sin()], [th.sin(), th.cos()]])
            .unwrap()
            .scale(0.9);
        let mut cols = vec![x0.to_vec()];
        for _ in 1..len {
            let next = a.mul_vec(cols.last().unwrap()).unwrap();
            cols.push(next);
        }
        DenseMatrix::from_columns(&cols).unwrap()
    }

    #[test]
    fn zero_network_outputs_final_bias() {
        let mut enc = Mlp::zeros(&[2, 3, 4], Activation::Tanh).unwrap();
        enc.layers[1].bias = DenseMatrix::column(&[1.0, 2.0, 3.0, 4.0]);
        let out = enc.forward(&DenseMatrix::column(&[0.3, -0.7])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn full_scale_architecture_is_accepted() {
        let model = KoopmanModel::new(&ModelConfig::default()).unwrap();
        assert_eq!(model.encoder.sizes(), vec![2, 50, 50, 50, 20]);
        assert_eq!(model.decoder.sizes(), vec![20, 50, 50, 50, 2]);
        let psi = model
            .encode_states(&DenseMatrix::column(&[0.1, 0.2]))
            .unwrap();
        assert_eq!(psi.shape(), (20, 1));
        let x = model.decode_lifted(&psi).unwrap();
        assert_eq!(x.shape(), (2, 1));
        assert!(certify_stable(&model.k, 0.0).unwrap().is_certified());
        assert!(model.encode_states(&DenseMatrix::column(&[0.1])).is_err());
        assert!(model.decode_lifted(&DenseMatrix::column(&[0.1])).is_err());
    }

    #[test]
    fn effective_matrix_identity_basis() {
        let mut model = KoopmanModel::new(&small_config(1)).unwrap();
        model.s = DenseMatrix::identity(4);
        model.k = DenseMatrix::from_rows(&[
            [0.1, 0.2, 0.0, 0.0],
            [0.0, 0.5, 0.1, 0.0],
            [0.3, 0.0, -0.2, 0.1],
            [0.0, 0.0, 0.0, 0.4],
        ])
        .unwrap();
        assert_eq!(model.effective_matrix_value().unwrap(), model.k);
        model.s = DenseMatrix::from_rows(&[
            [1.0, 1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0],
            [0.0; 4],
            [0.0; 4],
        ])
        .unwrap();
        assert!(matches!(
            model.effective_matrix_value(),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn effective_matrix_preserves_spectrum() {
        for seed in 0..20 {
            let model = KoopmanModel::new(&small_config(seed)).unwrap();
            let mut m = model.clone();
            m.k = DenseMatrix::new(
                4,
                4,
                (0..16)
                    .map(|i| ((i * 7 + seed as usize) % 11) as f64 / 11.0 - 0.5)
                    .collect(),
            )
            .unwrap();
            let a = eigenvalues(&m.k).unwrap();
            let b = eigenvalues(&m.effective_matrix_value().unwrap()).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x.0 - y.0).abs() < 1e-8 && (x.1 - y.1).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn rollout_basics() {
        let mut tape = Tape::new();
        let psi = tape.leaf(DenseMatrix::column(&[1.0, -2.0]));
        let zero = tape.leaf(DenseMatrix::zeros(2, 2));
        for v in rollout(&mut tape, zero, psi, 3).unwrap() {
            assert_eq!(tape.value(v), &DenseMatrix::zeros(2, 1));
        }
        let eye = tape.leaf(DenseMatrix::identity(2));
        for v in rollout(&mut tape, eye, psi, 3).unwrap() {
            assert_eq!(tape.value(v).data(), &[1.0, -2.0]);
        }
        assert!(rollout(&mut tape, eye, psi, 0).is_err());
    }

    #[test]
    fn certified_rollouts_do_not_grow() {
        let k = DenseMatrix::from_rows(&[[0.5, -0.3, 0.1], [0.1, 0.7, -0.1], [-0.3, 0.0, 0.6]])
            .unwrap();
        assert!(certify_stable(&k, 0.0).unwrap().is_certified());
        let mut tape = Tape::new();
        let kv = tape.leaf(k);
        let psi = tape.leaf(DenseMatrix::column(&[0.7, -1.3, 2.0]));
        let seq = rollout(&mut tape, kv, psi, 200).unwrap();
        let mut prev = tape.value(psi).max_abs();
        for v in seq {
            let cur = tape.value(v).max_abs();
            assert!(cur <= prev * (1.0 + 1e-12));
            prev = cur;
        }
    }

    #[test]
    fn losses_vanish_on_consistent_models() {
        // linear identity-like lifting where the model is exact
        let enc = Mlp::from_layers(
            vec![Layer {
                weight: DenseMatrix::identity(2),
                bias: DenseMatrix::zeros(2, 1),
            }],
            Activation::Identity,
        )
        .unwrap();
        let dec = enc.clone();
        let th: f64 = 0.3;
        let a = DenseMatrix::from_rows(&[[th.cos(), -th.sin()], [th.sin(), th.cos()]])
            .unwrap()
            .scale(0.9);
        let model = KoopmanModel::from_parts(enc, dec, a, DenseMatrix::identity(2)).unwrap();
        let states = spiral_states(6, [1.0, 0.5]);
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let p = loss_pred(&mut tape, &b, &states, 5).unwrap();
        let l = loss_lin(&mut tape, &b, &states, 5).unwrap();
        let r = loss_rec(&mut tape, &b, &states).unwrap();
        assert!(tape.scalar(p) < 1e-25);
        assert!(tape.scalar(l) < 1e-25);
        assert!(tape.scalar(r) < 1e-25);
        let single = DenseMatrix::column(&[0.4, 0.2]);
        let r1 = loss_rec(&mut tape, &b, &single).unwrap();
        assert!(tape.scalar(r1) < 1e-25);
        assert!(matches!(
            loss_pred(&mut tape, &b, &states, 6),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn horizon_one_is_one_step_error() {
        let model = KoopmanModel::new(&small_config(3)).unwrap();
        let states = spiral_states(4, [0.8, -0.2]);
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let p = loss_pred(&mut tape, &b, &states, 1).unwrap();
        let k_eff = model.effective_matrix_value().unwrap();
        let psi1 = k_eff
            .matmul(
                &model
                    .encode_states(&DenseMatrix::column(&states.col(0)))
                    .unwrap(),
            )
            .unwrap();
        let x1 = model.decode_lifted(&psi1).unwrap();
        let expected: f64 = x1
            .data()
            .iter()
            .zip(states.col(1))
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert!((tape.scalar(p) - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighting() {
        let model = KoopmanModel::new(&small_config(4)).unwrap();
        let batch = vec![spiral_states(5, [1.0, 0.0]), spiral_states(5, [0.3, 0.9])];
        let w = LossWeights {
            pred: 1.0,
            lin: 0.0,
            rec: 0.0,
            horizon: 3,
        };
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let total = total_loss(&mut tape, &b, &batch, &w).unwrap();
        let p0 = loss_pred(&mut tape, &b, &batch[0].select_cols(&[0, 1, 2, 3]), 3).unwrap();
        let p1 = loss_pred(&mut tape, &b, &batch[1].select_cols(&[0, 1, 2, 3]), 3).unwrap();
        let mean = (tape.scalar(p0) + tape.scalar(p1)) / 2.0;
        assert!((tape.scalar(total) - mean).abs() < 1e-14);

        let w1 = LossWeights::default();
        let w2 = LossWeights {
            pred: 2.0,
            lin: 0.2,
            rec: 2.0,
            horizon: 3,
        };
        let w1 = LossWeights { horizon: 3, ..w1 };
        let a = total_loss(&mut tape, &b, &batch, &w1).unwrap();
        let c = total_loss(&mut tape, &b, &batch, &w2).unwrap();
        assert!((2.0 * tape.scalar(a) - tape.scalar(c)).abs() < 1e-12);

        let reversed: Vec<DenseMatrix> = batch.iter().rev().cloned().collect();
        let r = total_loss(&mut tape, &b, &reversed, &w1).unwrap();
        assert!((tape.scalar(r) - tape.scalar(a)).abs() < 1e-14);
        assert!(total_loss(&mut tape, &b, &[], &w1).is_err());
        let bad = LossWeights { pred: -1.0, ..w1 };
        assert!(total_loss(&mut tape, &b, &batch, &bad).is_err());
    }

    #[test]
    fn windowed_loss_matches_per_window_definition() {
        let model = small_model(5);
        let trajs = [spiral_states(9, [1.0, 0.0]), spiral_states(6, [-0.5, 0.7])];
        let weights = LossWeights {
            pred: 1.0,
            lin: 0.1,
            rec: 1.0,
            horizon: 3,
        };
        let mut windows = Vec::new();
        for t in &trajs {
            for s in 0..t.cols() - 3 {
                windows.push(t.select_cols(&(s..s + 4).collect::<Vec<_>>()));
            }
        }
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let naive = total_loss(&mut tape, &b, &windows, &weights).unwrap();
        let refs: Vec<&DenseMatrix> = trajs.iter().collect();
        let fast = windowed_loss(&mut tape, &b, &refs, &weights).unwrap();
        assert_eq!(fast.windows, windows.len());
        let (a, c) = (tape.scalar(naive), tape.scalar(fast.total));
        assert!((a - c).abs() <= 1e-12 * a.abs());
        let recombined = fast.pred + 0.1 * fast.lin + fast.rec;
        assert!((recombined - c).abs() <= 1e-12 * c.abs());

        tape.backward(naive).unwrap();
        let g_naive: Vec<DenseMatrix> = b.parameter_vars().iter().map(|v| tape.grad(*v)).collect();
        tape.zero_grad();
        tape.backward(fast.total).unwrap();
        for (v, gn) in b.parameter_vars().iter().zip(&g_naive) {
            assert!(rel_err(&tape.grad(*v), gn) < 1e-10);
        }
    }

    /// Finite-difference check of a loss against one parameter group.
    fn check_group(
        model: &KoopmanModel,
        group: usize,
        loss: &dyn Fn(&mut Tape, &BoundModel) -> Var,
    ) -> f64 {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let l = loss(&mut tape, &b);
        tape.backward(l).unwrap();
        let g = tape.grad(b.parameter_vars()[group]);
        let base = model.parameters()[group].clone();
        let eval = |p: &DenseMatrix| {
            let mut m = model.clone();
            *m.parameters_mut()[group] = p.clone();
            let mut t = Tape::new();
            let bb = m.bind(&mut t);
            let l = loss(&mut t, &bb);
            t.scalar(l)
        };
        rel_err(&g, &finite_diff(&eval, &base, 1e-5))
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let states = spiral_states(7, [0.9, -0.4]);
        for seed in 0..5 {
            let model = small_model(seed);
            let groups = model.parameters().len();
            type LossFn<'a> = dyn Fn(&mut Tape, &BoundModel) -> Var + 'a;
            let losses: [&LossFn<'_>; 3] = [
                &|t, b| loss_pred(t, b, &states, 4).unwrap(),
                &|t, b| loss_lin(t, b, &states, 4).unwrap(),
                &|t, b| loss_rec(t, b, &states).unwrap(),
            ];
            for loss in losses {
                for g in 0..groups {
                    let e = check_group(&model, g, loss);
                    // reconstruction does not touch K or S
                    assert!(e < 1e-4, "seed {seed} group {g}: {e:e}");
                }
            }
        }
    }

    #[test]
    fn predict_starts_with_reconstruction() {
        let model = KoopmanModel::new(&small_config(6)).unwrap();
        let p = model.predict(&[0.3, 0.1], 5).unwrap();
        assert_eq!(p.shape(), (2, 6));
        let rec = model
            .decode_lifted(
                &model
                    .encode_states(&DenseMatrix::column(&[0.3, 0.1]))
                    .unwrap(),
            )
            .unwrap();
        assert_eq!(p.col(0), rec.col(0));
        assert!(model.predict(&[0.3], 5).is_err());
    }
}
