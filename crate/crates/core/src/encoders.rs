//! Per-modality feature encoders, Gaussian feature heads, and the input and
//! temporal uncertainty scores derived from them.

use crate::datasim::{ModalityKind, ModalitySpec};
use crate::nn::{Activation, Conv1d, Gru, Linear, Mlp};
use crate::numerics::{Graph, NumericsError, ParamStore, Var};

type Result<T> = std::result::Result<T, NumericsError>;

/// Mean and strictly positive variance of a feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGaussian {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl FeatureGaussian {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> std::result::Result<Self, String> {
        if mean.len() != variance.len() {
            return Err(format!("mean has {} entries but variance has {}", mean.len(), variance.len()));
        }
        if let Some(v) = variance.iter().find(|v| !(**v > 0.0)) {
            return Err(format!("variance entry {v} is not positive"));
        }
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// L2 norm of the variance vector.
    pub fn uncertainty(&self) -> f64 {
        input_uncertainty(&self.variance)
    }
}

/// L2 norm of a variance vector.
pub fn input_uncertainty(variance: &[f64]) -> f64 {
    variance.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Everything the model derives for one modality of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeatures {
    pub z: Vec<f64>,
    pub gaussian: FeatureGaussian,
    pub temporal: FeatureGaussian,
    /// Input uncertainty, the norm of `gaussian.variance`.
    pub r: f64,
    /// Fluctuation uncertainty, the norm of `temporal.variance`.
    pub s: f64,
}

/// Maps a `[B, len, ch]` window batch to `[B, D]` features.
#[derive(Debug, Clone)]
pub enum ModalityEncoder {
    /// Strided 1-D convolutions, flattened into a linear projection.
    Conv { convs: Vec<Conv1d>, proj: Linear, window_len: usize, channels: usize },
    /// Two-layer perceptron over the flattened window.
    Dense { mlp: Mlp, window_len: usize, channels: usize },
}

impl ModalityEncoder {
    pub fn new(store: &mut ParamStore, name: &str, spec: &ModalitySpec, d_model: usize, conv_channels: &[usize], kernel: usize, visual_hidden: usize) -> Self {
        match spec.kind {
            ModalityKind::Visual => {
                let flat = spec.window_len * spec.channels;
                let mlp = Mlp::new(store, &format!("{name}.mlp"), &[flat, visual_hidden, d_model], Activation::Relu);
                ModalityEncoder::Dense { mlp, window_len: spec.window_len, channels: spec.channels }
            }
            ModalityKind::Physio | ModalityKind::Inertial => {
                let mut convs = Vec::new();
                let mut len = spec.window_len;
                let mut ch = spec.channels;
                for (i, &out) in conv_channels.iter().enumerate() {
                    // Short windows fall back to unit stride and a kernel that fits.
                    let k = kernel.min(len);
                    let stride = if len >= 2 * k { 2 } else { 1 };
                    let conv = Conv1d::new(store, &format!("{name}.conv{i}"), ch, out, k, stride, 0);
                    len = conv.out_len(len);
                    ch = out;
                    convs.push(conv);
                }
                let proj = Linear::new(store, &format!("{name}.proj"), len * ch, d_model);
                ModalityEncoder::Conv { convs, proj, window_len: spec.window_len, channels: spec.channels }
            }
        }
    }

    pub fn input_shape(&self) -> (usize, usize) {
        match self {
            ModalityEncoder::Conv { window_len, channels, .. } | ModalityEncoder::Dense { window_len, channels, .. } => (*window_len, *channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (len, ch) = self.input_shape();
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != len || shape[2] != ch {
            return Err(NumericsError::Shape(format!("encoder expects [B, {len}, {ch}] windows, got {shape:?}")));
        }
        let batch = shape[0];
        match self {
            ModalityEncoder::Dense { mlp, .. } => {
                let flat = g.reshape(x, &[batch, len * ch])?;
                mlp.forward(g, store, flat)
            }
            ModalityEncoder::Conv { convs, proj, .. } => {
                let mut h = x;
                let mut cur_len = len;
                for conv in convs {
                    let rows = conv.forward(g, store, h, cur_len)?;
                    let act = g.relu(rows);
                    cur_len = conv.out_len(cur_len);
                    h = g.reshape(act, &[batch, cur_len, conv.out_ch])?;
                }
                let out_ch = g.shape(h)[2];
                let flat = g.reshape(h, &[batch, cur_len * out_ch])?;
                proj.forward(g, store, flat)
            }
        }
    }
}

/// Adds the variance floor after a softplus so every entry is at least `floor`.
fn positive(g: &mut Graph, x: Var, floor: f64) -> Var {
    let sp = g.softplus(x);
    g.add_scalar(sp, floor)
}

/// Two-layer mean and variance heads over encoder features.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub mean: Mlp,
    pub var: Mlp,
    pub floor: f64,
}

impl GaussianHead {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, floor: f64) -> Self {
        Self {
            mean: Mlp::new(store, &format!("{name}.mean"), &[d_model, d_model, d_model], Activation::Relu),
            var: Mlp::new(store, &format!("{name}.var"), &[d_model, d_model, d_model], Activation::Relu),
            floor,
        }
    }

    /// Returns `(mean, variance)`, both `[B, D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<(Var, Var)> {
        let mean = self.mean.forward(g, store, z)?;
        let var = self.variance(g, store, z)?;
        Ok((mean, var))
    }

    pub fn variance(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let pre = self.var.forward(g, store, z)?;
        Ok(positive(g, pre, self.floor))
    }
}

/// GRU over a feature history followed by a variance head.
///
/// The final hidden state is the temporal mean.
#[derive(Debug, Clone)]
pub struct TemporalHead {
    pub gru: Gru,
    pub var: Mlp,
    pub floor: f64,
}

impl TemporalHead {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, floor: f64) -> Self {
        Self {
            gru: Gru::new(store, &format!("{name}.gru"), d_model, d_model),
            var: Mlp::new(store, &format!("{name}.var"), &[d_model, d_model, d_model], Activation::Relu),
            floor,
        }
    }

    /// `steps` are `[B, D]` features, oldest first, ending at the current
    /// sample. Returns `(mean, variance)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, steps: &[Var]) -> Result<(Var, Var)> {
        if steps.is_empty() {
            return Err(NumericsError::Shape("temporal head needs a non-empty history".into()));
        }
        let h = self.gru.forward(g, store, steps)?;
        let pre = self.var.forward(g, store, h)?;
        Ok((h, positive(g, pre, self.floor)))
    }
}

/// `[B]` uncertainty scores from a `[B, D]` variance.
pub fn uncertainty_scores(g: &mut Graph, variance: Var) -> Var {
    g.l2_norm(variance)
}
