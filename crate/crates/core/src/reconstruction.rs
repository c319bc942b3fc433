//! Missing-modality feature recovery from a common standardized code.

use crate::nn::ConvTranspose1d;
use crate::numerics::{Graph, NumericsError, ParamStore, Tensor, Var};

type Result<T> = std::result::Result<T, NumericsError>;

/// Elementwise `(z - mean) / sqrt(variance)`.
pub fn normalize_available(z: &[f64], mean: &[f64], variance: &[f64], floor: f64) -> std::result::Result<Vec<f64>, String> {
    if z.len() != mean.len() || z.len() != variance.len() {
        return Err(format!("length mismatch: z {}, mean {}, variance {}", z.len(), mean.len(), variance.len()));
    }
    if let Some(v) = variance.iter().find(|v| !(**v >= floor)) {
        return Err(format!("variance entry {v} is below the floor {floor}"));
    }
    Ok(z.iter().zip(mean).zip(variance).map(|((z, m), v)| (z - m) / v.sqrt()).collect())
}

/// Graph form of [`normalize_available`] on `[B, D]` operands.
pub fn normalize_graph(g: &mut Graph, z: Var, mean: Var, variance: Var) -> Result<Var> {
    let centered = g.sub(z, mean)?;
    let sd = g.sqrt(variance);
    let inv = g.recip(sd);
    g.mul(centered, inv)
}

/// Squared L2 distance between `zhat` and `z`, summed over rows.
pub fn recover_loss(zhat: &[Vec<f64>], z: &[Vec<f64>]) -> f64 {
    zhat.iter().zip(z).map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).sum()
}

/// Graph form of [`recover_loss`]; `rows` (a `[B]` 0/1 vector) selects which
/// rows contribute.
pub fn recover_loss_graph(g: &mut Graph, zhat: Var, z: Var, rows: Option<Var>) -> Result<Var> {
    let diff = g.sub(zhat, z)?;
    let sq = g.square(diff);
    let sel = match rows {
        Some(r) => g.scale_rows(sq, r)?,
        None => sq,
    };
    Ok(g.sum(sel))
}

/// Sum (or mean) of the standardized features of present modalities.
///
/// `parts` pairs each `[B, D]` standardized feature with its `[B]` presence
/// mask. Rows whose mask is zero contribute nothing.
pub fn common_code(g: &mut Graph, parts: &[(Var, Var)], average: bool) -> Result<Var> {
    let (first, rest) = parts.split_first().ok_or_else(|| NumericsError::Shape("common code needs at least one modality".into()))?;
    let mut u = g.scale_rows(first.0, first.1)?;
    for (x, mask) in rest {
        let masked = g.scale_rows(*x, *mask)?;
        u = g.add(u, masked)?;
    }
    if average {
        // Mask vectors are constants, so their sum is a plain count.
        let batch = g.shape(u)[0];
        let mut counts = vec![0.0; batch];
        for (_, mask) in parts {
            for (c, m) in counts.iter_mut().zip(g.value(*mask).data()) {
                *c += m;
            }
        }
        let inv = g.constant(Tensor::from_vec(counts.iter().map(|c| 1.0 / c.max(1.0)).collect()));
        u = g.scale_rows(u, inv)?;
    }
    Ok(u)
}

/// Per-modality decoder: the code is laid out as `width` time steps of
/// `D / width` channels and passed through transposed-convolution blocks.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub blocks: Vec<ConvTranspose1d>,
    pub width: usize,
    pub d_model: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, width: usize, hidden: usize, blocks: usize) -> Self {
        let io_ch = d_model / width;
        let chans: Vec<usize> = (0..=blocks).map(|i| if i == 0 || i == blocks { io_ch } else { hidden }).collect();
        let blocks = chans.windows(2).enumerate().map(|(i, c)| ConvTranspose1d::new(store, &format!("{name}.block{i}"), c[0], c[1], 3, 1)).collect();
        Self { blocks, width, d_model }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, u: Var) -> Result<Var> {
        let batch = g.shape(u)[0];
        let io_ch = self.d_model / self.width;
        let mut h = g.reshape(u, &[batch, self.width, io_ch])?;
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            let rows = block.forward(g, store, h, self.width)?;
            let act = if i < last { g.tanh(rows) } else { rows };
            h = g.reshape(act, &[batch, self.width, block.conv.out_ch])?;
        }
        g.reshape(h, &[batch, self.d_model])
    }
}
