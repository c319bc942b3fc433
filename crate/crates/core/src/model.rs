//! The full network: encoders, uncertainty heads, reconstruction decoders,
//! fusion stack, and classifiers, evaluated on sample batches.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::config::{Ablation, FusionKind, ModelConfig};
use crate::datasim::{Corpus, CorpusSpec, ModalitySpec, MultimodalSample};
use crate::encoders::{uncertainty_scores, FeatureGaussian, GaussianHead, ModalityEncoder, ModalityFeatures, TemporalHead};
use crate::fusion::{tokenize_and_weight, uniform_weights, weight_column, weights_graph, AttentionTrace, FusionStack};
use crate::nn::{Activation, Linear, Mlp};
use crate::numerics::{load_into, read_checkpoint, write_checkpoint, Graph, NumericsError, ParamStore, Tensor, Var};
use crate::reconstruction::{common_code, normalize_graph, recover_loss_graph, Decoder};

type Result<T> = std::result::Result<T, NumericsError>;

/// Architecture description stored in checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Layout {
    model: ModelConfig,
    ablation: Ablation,
    modalities: Vec<ModalitySpec>,
    classes: usize,
    history: usize,
}

#[derive(Debug, Clone)]
pub struct DualModel {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub modalities: Vec<ModalitySpec>,
    pub classes: usize,
    pub history: usize,
    pub store: ParamStore,
    pub encoders: Vec<ModalityEncoder>,
    pub heads: Vec<GaussianHead>,
    pub temporal: Vec<TemporalHead>,
    pub decoders: Vec<Decoder>,
    pub unimodal: Vec<Linear>,
    pub fusion: FusionStack,
    pub task_head: Mlp,
}

/// Inputs for one forward pass over `B` samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    /// Per modality, `[B, len, ch]`.
    pub windows: Vec<Tensor>,
    /// `[m][b]`: the window is visible to the model.
    pub present: Vec<Vec<bool>>,
    /// `[m][b]`: the window was hidden for training and its encoding is the
    /// reconstruction target.
    pub supervised: Vec<Vec<bool>>,
    /// Per modality, `[T*B, D]` history features, oldest step first.
    pub history: Vec<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Per-sample cached features used as temporal history.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    modalities: usize,
    d_model: usize,
    data: Vec<f64>,
}

impl FeatureCache {
    pub fn get(&self, sample: usize, modality: usize) -> &[f64] {
        let start = (sample * self.modalities + modality) * self.d_model;
        &self.data[start..start + self.d_model]
    }
}

/// Stage-one outputs: encoded and effective (reconstructed where absent) features.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub z_encoded: Vec<Var>,
    /// Encoder output where present, decoder output (or zeros with
    /// reconstruction off) where absent.
    pub z: Vec<Var>,
    /// Decoder outputs for modalities that needed one.
    pub z_recovered: Vec<Option<Var>>,
    /// Summed squared reconstruction error over supervised rows.
    pub recover: Option<Var>,
    pub present_masks: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub encoded: Encoded,
    pub mean: Vec<Var>,
    pub variance: Vec<Var>,
    pub temporal_mean: Vec<Var>,
    pub temporal_variance: Vec<Var>,
    /// `[B]` input uncertainty per modality.
    pub r: Vec<Var>,
    /// `[B]` fluctuation uncertainty per modality.
    pub s: Vec<Var>,
    /// `[B, M]` fusion weights.
    pub w: Var,
    pub tokens: Var,
    pub hidden: Var,
    pub traces: Vec<AttentionTrace>,
    pub logits: Var,
    pub unimodal_logits: Vec<Var>,
}

fn mask_tensor(mask: &[bool]) -> Tensor {
    Tensor::from_vec(mask.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect())
}

impl DualModel {
    pub fn new(config: &ModelConfig, ablation: &Ablation, corpus: &CorpusSpec, seed: u64) -> Self {
        let d = config.d_model;
        let m = corpus.num_modalities();
        let floor = config.variance_floor;
        let mut store = ParamStore::new(seed);
        let encoders = corpus
            .modalities
            .iter()
            .enumerate()
            .map(|(i, spec)| ModalityEncoder::new(&mut store, &format!("enc{i}"), spec, d, &config.conv_channels, config.conv_kernel, config.visual_hidden))
            .collect();
        let heads = (0..m).map(|i| GaussianHead::new(&mut store, &format!("gauss{i}"), d, floor)).collect();
        let temporal = (0..m).map(|i| TemporalHead::new(&mut store, &format!("temporal{i}"), d, floor)).collect();
        let decoders =
            (0..m).map(|i| Decoder::new(&mut store, &format!("dec{i}"), d, config.decoder_width, config.decoder_channels, config.decoder_blocks)).collect();
        let unimodal = (0..m).map(|i| Linear::new(&mut store, &format!("uni{i}"), d, corpus.classes)).collect();
        let fusion = FusionStack::new(&mut store, config, m, ablation.tied_projections);
        let width = d / config.tokens_per_modality;
        let mut dims = vec![width];
        dims.extend(std::iter::repeat_n(d, config.task_head_layers - 1));
        dims.push(corpus.classes);
        let task_head = Mlp::new(&mut store, "task", &dims, Activation::Relu);
        Self {
            config: config.clone(),
            ablation: ablation.clone(),
            modalities: corpus.modalities.clone(),
            classes: corpus.classes,
            history: corpus.history,
            store,
            encoders,
            heads,
            temporal,
            decoders,
            unimodal,
            fusion,
            task_head,
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    /// Writes a checkpoint whose metadata is enough to rebuild the model;
    /// `extra` is stored alongside under `"extra"`.
    pub fn save<W: Write>(&self, w: W, extra: serde_json::Value) -> Result<()> {
        let layout = Layout {
            model: self.config.clone(),
            ablation: self.ablation.clone(),
            modalities: self.modalities.clone(),
            classes: self.classes,
            history: self.history,
        };
        let meta = serde_json::json!({ "layout": layout, "extra": extra });
        write_checkpoint(w, &self.store, meta)
    }

    /// Rebuilds a model from [`DualModel::save`] output, returning the stored
    /// `extra` metadata.
    pub fn load<R: Read>(r: R) -> Result<(Self, serde_json::Value)> {
        let (manifest, tensors) = read_checkpoint(r)?;
        let layout: Layout = serde_json::from_value(manifest.meta["layout"].clone())?;
        let spec = CorpusSpec { modalities: layout.modalities, classes: layout.classes, history: layout.history, ..CorpusSpec::default() };
        let mut model = Self::new(&layout.model, &layout.ablation, &spec, 0);
        load_into(&mut model.store, &tensors)?;
        Ok((model, manifest.meta["extra"].clone()))
    }

    /// Checks that a corpus matches the model's modality layout and classes.
    pub fn check_compatible(&self, spec: &CorpusSpec) -> std::result::Result<(), String> {
        if spec.num_modalities() != self.num_modalities() {
            return Err(format!("model has {} modalities, corpus has {}", self.num_modalities(), spec.num_modalities()));
        }
        for (i, (a, b)) in self.modalities.iter().zip(&spec.modalities).enumerate() {
            if a.window_len != b.window_len || a.channels != b.channels || a.kind != b.kind {
                return Err(format!(
                    "modality {i}: model expects {:?} {}x{}, corpus has {:?} {}x{}",
                    a.kind, a.window_len, a.channels, b.kind, b.window_len, b.channels
                ));
            }
        }
        if spec.classes != self.classes {
            return Err(format!("model has {} classes, corpus has {}", self.classes, spec.classes));
        }
        if spec.history != self.history {
            return Err(format!("model uses history {}, corpus has {}", self.history, spec.history));
        }
        Ok(())
    }

    fn static_weights(&self) -> bool {
        self.ablation.static_weights || self.config.fusion == FusionKind::Vanilla
    }

    /// Builds a batch from corpus samples. `hidden[m][b]` hides an otherwise
    /// present window and marks it as a reconstruction target.
    pub fn make_batch(&self, corpus: &Corpus, ids: &[usize], cache: &FeatureCache, hidden: Option<&[Vec<bool>]>) -> Batch {
        self.build_batch(corpus, ids, Some(cache), hidden)
    }

    fn build_batch(&self, corpus: &Corpus, ids: &[usize], cache: Option<&FeatureCache>, hidden: Option<&[Vec<bool>]>) -> Batch {
        let m_count = self.num_modalities();
        let b = ids.len();
        let d = self.config.d_model;
        let samples: Vec<&MultimodalSample> = ids.iter().map(|&i| &corpus.samples[i]).collect();
        let mut windows = Vec::with_capacity(m_count);
        let mut present = Vec::with_capacity(m_count);
        let mut supervised = Vec::with_capacity(m_count);
        let mut history = Vec::with_capacity(m_count);
        for m in 0..m_count {
            let spec = &self.modalities[m];
            let mut data = Vec::with_capacity(b * spec.window_len * spec.channels);
            let mut pres = Vec::with_capacity(b);
            let mut sup = Vec::with_capacity(b);
            for (j, s) in samples.iter().enumerate() {
                let win = &s.windows[m];
                data.extend_from_slice(&win.samples);
                let hide = hidden.map(|h| h[m][j]).unwrap_or(false) && win.present;
                pres.push(win.present && !hide);
                sup.push(hide);
            }
            windows.push(Tensor::new(vec![b, spec.window_len, spec.channels], data).expect("window layout"));
            present.push(pres);
            supervised.push(sup);
            history.push(match cache {
                Some(cache) if self.history > 0 => {
                    let mut hist = Vec::with_capacity(self.history * b * d);
                    for t in 0..self.history {
                        for s in &samples {
                            hist.extend_from_slice(cache.get(s.history[t], m));
                        }
                    }
                    Tensor::new(vec![self.history * b, d], hist).expect("history layout")
                }
                _ => Tensor::zeros(&[1]),
            });
        }
        Batch { ids: ids.to_vec(), labels: samples.iter().map(|s| s.label).collect(), windows, present, supervised, history }
    }

    /// Encodes every window and fills absent ones from the other modalities.
    pub fn encode(&self, g: &mut Graph, batch: &Batch) -> Result<Encoded> {
        let m_count = self.num_modalities();
        let b = batch.len();
        if let Some(row) = (0..b).find(|&j| (0..m_count).all(|m| !batch.present[m][j])) {
            return Err(NumericsError::Index(format!("sample {} has no present modality", batch.ids[row])));
        }
        let st = &self.store;
        let mut z_encoded = Vec::with_capacity(m_count);
        for (m, enc) in self.encoders.iter().enumerate() {
            let x = g.constant(batch.windows[m].clone());
            z_encoded.push(enc.forward(g, st, x)?);
        }
        let present_masks: Vec<Var> = batch.present.iter().map(|p| g.constant(mask_tensor(p))).collect();
        let any_absent: Vec<bool> = batch.present.iter().map(|p| p.iter().any(|x| !x)).collect();

        let recon = !self.ablation.reconstruction_off;
        // Standardized features of each modality, needed only if some other
        // modality has to be reconstructed.
        let mut standardized: Vec<Option<Var>> = vec![None; m_count];
        if recon && any_absent.iter().any(|&a| a) {
            for m in 0..m_count {
                if !any_absent.iter().enumerate().any(|(k, &a)| a && k != m) {
                    continue;
                }
                standardized[m] = Some(if self.ablation.normalization_off {
                    z_encoded[m]
                } else {
                    let (mean, var) = self.heads[m].forward(g, st, z_encoded[m])?;
                    normalize_graph(g, z_encoded[m], mean, var)?
                });
            }
        }

        let mut z = Vec::with_capacity(m_count);
        let mut z_recovered = vec![None; m_count];
        let mut recover: Option<Var> = None;
        for m in 0..m_count {
            if !any_absent[m] {
                z.push(z_encoded[m]);
                continue;
            }
            let kept = g.scale_rows(z_encoded[m], present_masks[m])?;
            if !recon {
                z.push(kept);
                continue;
            }
            let parts: Vec<(Var, Var)> = (0..m_count).filter(|&k| k != m).map(|k| (standardized[k].expect("standardized"), present_masks[k])).collect();
            let u = common_code(g, &parts, self.config.average_common_code)?;
            let zhat = self.decoders[m].forward(g, st, u)?;
            let absent = g.constant(mask_tensor(&batch.present[m].iter().map(|p| !p).collect::<Vec<_>>()));
            let filled = g.scale_rows(zhat, absent)?;
            z.push(g.add(kept, filled)?);
            z_recovered[m] = Some(zhat);
            if batch.supervised[m].iter().any(|&s| s) {
                let target = g.detach(z_encoded[m]);
                let rows = g.constant(mask_tensor(&batch.supervised[m]));
                let err = recover_loss_graph(g, zhat, target, Some(rows))?;
                recover = Some(match recover {
                    None => err,
                    Some(acc) => g.add(acc, err)?,
                });
            }
        }
        Ok(Encoded { z_encoded, z, z_recovered, recover, present_masks })
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<Forward> {
        let encoded = self.encode(g, batch)?;
        self.forward_encoded(g, batch, encoded)
    }

    pub fn forward_encoded(&self, g: &mut Graph, batch: &Batch, encoded: Encoded) -> Result<Forward> {
        let m_count = self.num_modalities();
        let b = batch.len();
        let st = &self.store;
        let mut mean = Vec::with_capacity(m_count);
        let mut variance = Vec::with_capacity(m_count);
        let mut temporal_mean = Vec::with_capacity(m_count);
        let mut temporal_variance = Vec::with_capacity(m_count);
        let mut r = Vec::with_capacity(m_count);
        let mut s = Vec::with_capacity(m_count);
        for m in 0..m_count {
            let zm = encoded.z[m];
            let (mu, var) = self.heads[m].forward(g, st, zm)?;
            r.push(uncertainty_scores(g, var));
            mean.push(mu);
            variance.push(var);
            let mut steps = Vec::with_capacity(self.history + 1);
            if self.history > 0 {
                let hist = g.constant(batch.history[m].clone());
                for t in 0..self.history {
                    steps.push(g.slice(hist, 0, t * b, (t + 1) * b)?);
                }
            }
            steps.push(zm);
            let (tmu, tvar) = self.temporal[m].forward(g, st, &steps)?;
            s.push(uncertainty_scores(g, tvar));
            temporal_mean.push(tmu);
            temporal_variance.push(tvar);
        }

        let w = if self.static_weights() {
            uniform_weights(g, b, m_count)
        } else {
            let ri: Vec<Option<Var>> = r.iter().map(|&v| (!self.ablation.uncertainty_off).then_some(v)).collect();
            let si: Vec<Option<Var>> = s.iter().map(|&v| (!self.ablation.fluctuation_off).then_some(v)).collect();
            if ri.iter().chain(&si).all(Option::is_none) {
                uniform_weights(g, b, m_count)
            } else {
                weights_graph(g, &ri, &si)?
            }
        };
        let cols: Vec<Var> = (0..m_count).map(|m| weight_column(g, w, m)).collect::<Result<_>>()?;
        let scale = (!self.ablation.input_scaling_off).then_some(cols.as_slice());
        let tokens = tokenize_and_weight(g, &encoded.z, scale, self.config.tokens_per_modality)?;
        let (hidden, traces) = self.fusion.forward(g, st, tokens, &cols)?;
        let pooled = g.mean_axis(hidden, 1)?;
        let logits = self.task_head.forward(g, st, pooled)?;
        let unimodal_logits = self.unimodal.iter().zip(&encoded.z).map(|(head, &zm)| head.forward(g, st, zm)).collect::<Result<_>>()?;
        Ok(Forward { encoded, mean, variance, temporal_mean, temporal_variance, r, s, w, tokens, hidden, traces, logits, unimodal_logits })
    }

    /// Effective features for every sample, used as temporal history.
    pub fn feature_cache(&self, corpus: &Corpus, batch_size: usize) -> Result<FeatureCache> {
        let m_count = self.num_modalities();
        let d = self.config.d_model;
        let mut data = vec![0.0; corpus.len() * m_count * d];
        let ids: Vec<usize> = (0..corpus.len()).collect();
        for chunk in ids.chunks(batch_size.max(1)) {
            // The encoding stage never reads history.
            let batch = self.build_batch(corpus, chunk, None, None);
            let mut g = Graph::inference();
            let enc = self.encode(&mut g, &batch)?;
            for (m, &zm) in enc.z.iter().enumerate() {
                let vals = g.value(zm).data();
                for (j, &id) in chunk.iter().enumerate() {
                    let dst = (id * m_count + m) * d;
                    data[dst..dst + d].copy_from_slice(&vals[j * d..(j + 1) * d]);
                }
            }
        }
        Ok(FeatureCache { modalities: m_count, d_model: d, data })
    }

    /// Value-level per-modality features for a single sample.
    pub fn sample_features(&self, corpus: &Corpus, cache: &FeatureCache, id: usize) -> Result<Vec<ModalityFeatures>> {
        let batch = self.make_batch(corpus, &[id], cache, None);
        let mut g = Graph::inference();
        let f = self.forward(&mut g, &batch)?;
        let row = |v: Var, g: &Graph| g.value(v).data().to_vec();
        (0..self.num_modalities())
            .map(|m| {
                let gaussian = FeatureGaussian::new(row(f.mean[m], &g), row(f.variance[m], &g)).map_err(NumericsError::Shape)?;
                let temporal = FeatureGaussian::new(row(f.temporal_mean[m], &g), row(f.temporal_variance[m], &g)).map_err(NumericsError::Shape)?;
                Ok(ModalityFeatures { z: row(f.encoded.z[m], &g), r: g.value(f.r[m]).data()[0], s: g.value(f.s[m]).data()[0], gaussian, temporal })
            })
            .collect()
    }
}
