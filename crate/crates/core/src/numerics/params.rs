use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use super::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    pub trainable: bool,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Owns every learnable tensor plus its gradient and optimizer moments.
///
/// Initialization draws from a single seeded stream in registration order, so
/// two stores built by the same code path with the same seed are identical.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Vec<Param>,
    rng: ChaCha8Rng,
    step: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { params: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed), step: 0 }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let n = value.len();
        self.params.push(Param { name: name.into(), value, grad: None, trainable: true, m: vec![0.0; n], v: vec![0.0; n] });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("param shape");
        self.add(name, t)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.params[id.0].grad.as_deref()
    }

    pub fn add_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => p.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over `ids`. Every listed trainable
    /// parameter must carry a gradient.
    pub fn adam_step(&mut self, ids: &[ParamId], opt: &Adam) -> Result<(), NumericsError> {
        if let Some(missing) = ids.iter().find(|id| self.params[id.0].trainable && self.params[id.0].grad.is_none()) {
            return Err(NumericsError::MissingGrad(self.params[missing.0].name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - opt.beta1.powi(t);
        let c2 = 1.0 - opt.beta2.powi(t);
        for id in ids {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            let g = p.grad.as_ref().expect("checked above");
            let data = p.value.data_mut();
            for i in 0..data.len() {
                p.m[i] = opt.beta1 * p.m[i] + (1.0 - opt.beta1) * g[i];
                p.v[i] = opt.beta2 * p.v[i] + (1.0 - opt.beta2) * g[i] * g[i];
                let mh = p.m[i] / c1;
                let vh = p.v[i] / c2;
                data[i] -= opt.lr * mh / (vh.sqrt() + opt.eps);
            }
        }
        Ok(())
    }

    /// Adam over every trainable parameter; parameters without a gradient
    /// are treated as having a zero gradient.
    pub fn adam_step_all(&mut self, opt: &Adam) {
        for p in &mut self.params {
            if p.trainable && p.grad.is_none() {
                p.grad = Some(vec![0.0; p.value.len()]);
            }
        }
        let ids: Vec<ParamId> = self.ids().collect();
        self.adam_step(&ids, opt).expect("all grads present");
    }
}
