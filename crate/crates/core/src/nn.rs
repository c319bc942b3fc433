//! Small layer library over [`Graph`](crate::numerics::Graph).

use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Var};

type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in);
        let b = store.uniform(format!("{name}.b"), &[fan_out], fan_in);
        Self { w, b, fan_in, fan_out }
    }

    /// `x: [R, fan_in] -> [R, fan_out]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Stack of linear layers with a hidden activation and none after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], act: Activation) -> Self {
        let layers = dims.windows(2).enumerate().map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), d[0], d[1])).collect();
        Self { layers, act }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, store, x)?;
            if i < last {
                x = self.act.apply(g, x);
            }
        }
        Ok(x)
    }
}

/// Layer normalization over the last axis with learned gain and offset.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self { gain: store.constant(format!("{name}.gain"), &[dim], 1.0), bias: store.constant(format!("{name}.bias"), &[dim], 0.0) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, Self::EPS);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_last(n, gain)?;
        g.add_bias(y, bias)
    }
}

/// 1-D convolution over time-major `[B, len, ch]` input.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub proj: Linear,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { proj: Linear::new(store, name, kernel * in_ch, out_ch), in_ch, out_ch, kernel, stride, pad }
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Returns `[B * len_out, out_ch]` (time-major rows).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, len: usize) -> Result<Var> {
        let patches = g.unfold1d(x, len, self.in_ch, self.kernel, self.stride, self.pad)?;
        self.proj.forward(g, store, patches)
    }
}

/// Stride-1 transposed convolution.
///
/// With unit stride, a transposed convolution with padding `p` equals an
/// ordinary convolution with padding `kernel - 1 - p` and a flipped kernel;
/// the flip is absorbed into the learned weight layout.
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    pub conv: Conv1d,
}

impl ConvTranspose1d {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize, pad: usize) -> Self {
        assert!(pad < kernel, "transposed conv padding must be below kernel size");
        Self { conv: Conv1d::new(store, name, in_ch, out_ch, kernel, 1, kernel - 1 - pad) }
    }

    pub fn out_len(&self, len: usize) -> usize {
        self.conv.out_len(len)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, len: usize) -> Result<Var> {
        self.conv.forward(g, store, x, len)
    }
}

/// Single-layer gated recurrent unit.
#[derive(Debug, Clone)]
pub struct Gru {
    /// Input projection for the reset, update and candidate gates, `[in, 3H]`.
    pub wx: Linear,
    /// Hidden projection, `[H, 3H]`.
    pub wh: Linear,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Self {
        Self { wx: Linear::new(store, &format!("{name}.x"), input, 3 * hidden), wh: Linear::new(store, &format!("{name}.h"), hidden, 3 * hidden), hidden }
    }

    /// Runs over `steps` (each `[B, in]`, oldest first) from a zero state and
    /// returns the final hidden state `[B, H]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, steps: &[Var]) -> Result<Var> {
        let hsz = self.hidden;
        let batch = g.shape(steps[0])[0];
        // One projection for all timesteps.
        let stacked = if steps.len() == 1 { steps[0] } else { g.concat(steps, 0)? };
        let xp = self.wx.forward(g, store, stacked)?;
        let mut h = g.constant(crate::numerics::Tensor::zeros(&[batch, hsz]));
        for t in 0..steps.len() {
            let xt = g.slice(xp, 0, t * batch, (t + 1) * batch)?;
            let hp = self.wh.forward(g, store, h)?;
            let xr = g.slice(xt, 1, 0, hsz)?;
            let xu = g.slice(xt, 1, hsz, 2 * hsz)?;
            let xn = g.slice(xt, 1, 2 * hsz, 3 * hsz)?;
            let hr = g.slice(hp, 1, 0, hsz)?;
            let hu = g.slice(hp, 1, hsz, 2 * hsz)?;
            let hn = g.slice(hp, 1, 2 * hsz, 3 * hsz)?;
            let r_pre = g.add(xr, hr)?;
            let r = g.sigmoid(r_pre);
            let u_pre = g.add(xu, hu)?;
            let u = g.sigmoid(u_pre);
            let gated = g.mul(r, hn)?;
            let n_pre = g.add(xn, gated)?;
            let n = g.tanh(n_pre);
            // h' = n + u * (h - n)
            let diff = g.sub(h, n)?;
            let keep = g.mul(u, diff)?;
            h = g.add(n, keep)?;
        }
        Ok(h)
    }
}
