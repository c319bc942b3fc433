//! Joint objective, optimization loop, evaluation, and calibration diagnostics.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{CalibrationTarget, Divergence, ExperimentConfig, LossConfig};
use crate::datasim::{Corpus, Split};
use crate::metrics::{pearson, spearman};
use crate::model::{Batch, DualModel, FeatureCache, Forward};
use crate::numerics::{Adam, Graph, NumericsError, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite {component} loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, component: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("incompatible corpus: {0}")]
    Incompatible(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, TrainError>;

/// Scalar values of every objective term.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub modal: Vec<f64>,
    pub cali: f64,
    pub recover: f64,
    pub dyn_loss: f64,
    pub total: f64,
    pub lambda_modal: f64,
    pub lambda_cali: f64,
}

impl LossBreakdown {
    /// Largest deviation of `dyn_loss` and `total` from their recomputation.
    pub fn recomposition_error(&self) -> f64 {
        let dyn_loss = self.cls + self.lambda_modal * self.modal.iter().sum::<f64>() + self.lambda_cali * self.cali;
        let total = dyn_loss + self.recover;
        (self.dyn_loss - dyn_loss).abs().max((self.total - total).abs())
    }
}

/// Softmax cross-entropy of one logit row.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(TrainError::LabelRange { label, classes: logits.len() });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Target distribution over modalities built from unimodal losses.
pub fn calibration_target(losses: &[f64], target: CalibrationTarget, delta: f64) -> Vec<f64> {
    let raw: Vec<f64> = match target {
        CalibrationTarget::InverseLoss => losses.iter().map(|l| 1.0 / l.max(delta)).collect(),
        CalibrationTarget::NegLossSoftmax => {
            let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
            losses.iter().map(|l| (min - l).exp()).collect()
        }
        CalibrationTarget::LossShare => losses.iter().map(|l| l.max(0.0)).collect(),
    };
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return vec![1.0 / losses.len() as f64; losses.len()];
    }
    raw.iter().map(|v| (v / total).max(delta)).collect()
}

/// Divergence between the weight distribution `p_d` and the target `p_l`.
pub fn calibration_loss(p_d: &[f64], p_l: &[f64], divergence: Divergence, delta: f64) -> Result<f64> {
    if p_d.len() != p_l.len() {
        return Err(TrainError::Invalid(format!("P_D has {} entries, P_L has {}", p_d.len(), p_l.len())));
    }
    if p_d.iter().chain(p_l).any(|v| !v.is_finite()) {
        return Err(TrainError::Invalid("non-finite calibration input".into()));
    }
    let kl = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * (x.ln() - y.ln())).sum::<f64>();
    let p: Vec<f64> = p_d.iter().map(|v| v.max(delta)).collect();
    let q: Vec<f64> = p_l.iter().map(|v| v.max(delta)).collect();
    Ok(match divergence {
        Divergence::SymmetricKl => 0.5 * (kl(&p, &q) + kl(&q, &p)),
        Divergence::JensenShannon => {
            let mid: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
            0.5 * (kl(&p, &mid) + kl(&q, &mid))
        }
    })
}

/// Batch-mean divergence between rows of `p_d: [B, M]` and constant `p_l`.
pub fn calibration_graph(g: &mut Graph, p_d: Var, p_l: &Tensor, divergence: Divergence, delta: f64) -> Result<Var> {
    let batch = g.shape(p_d)[0] as f64;
    let p = g.clamp_min(p_d, delta);
    let q = g.constant(p_l.map(|v| v.max(delta)));
    let ln_p = g.ln(p);
    let ln_q = g.ln(q);
    let per_entry = match divergence {
        Divergence::SymmetricKl => {
            // ½ Σ (p - q)(ln p - ln q)
            let dp = g.sub(p, q)?;
            let dl = g.sub(ln_p, ln_q)?;
            let prod = g.mul(dp, dl)?;
            g.scale(prod, 0.5)
        }
        Divergence::JensenShannon => {
            let sum = g.add(p, q)?;
            let mid = g.scale(sum, 0.5);
            let ln_mid = g.ln(mid);
            let a = g.sub(ln_p, ln_mid)?;
            let b = g.sub(ln_q, ln_mid)?;
            let pa = g.mul(p, a)?;
            let qb = g.mul(q, b)?;
            let s = g.add(pa, qb)?;
            g.scale(s, 0.5)
        }
    };
    let total = g.sum(per_entry);
    Ok(g.scale(total, 1.0 / batch))
}

/// Graph handles for every objective term of one batch.
#[derive(Debug, Clone)]
pub struct Objective {
    pub cls: Var,
    pub modal: Vec<Var>,
    pub cali: Var,
    pub recover: Var,
    pub dyn_loss: Var,
    pub total: Var,
    /// Calibration target rows, `[B, M]`.
    pub p_l: Tensor,
    /// `[B]` unimodal losses per modality.
    pub modal_rows: Vec<Var>,
}

impl Objective {
    pub fn breakdown(&self, g: &Graph, lambda_modal: f64, lambda_cali: f64) -> LossBreakdown {
        let v = |x: Var| g.value(x).item();
        LossBreakdown {
            cls: v(self.cls),
            modal: self.modal.iter().map(|&m| v(m)).collect(),
            cali: v(self.cali),
            recover: v(self.recover),
            dyn_loss: v(self.dyn_loss),
            total: v(self.total),
            lambda_modal,
            lambda_cali,
        }
    }
}

/// Builds `total = cls + λ_a Σ modal + λ_c cali + recover` on the graph.
pub fn objective(g: &mut Graph, fwd: &Forward, labels: &[usize], loss: &LossConfig, lambda_cali: f64) -> Result<Objective> {
    let batch = labels.len();
    let m_count = fwd.unimodal_logits.len();
    let classes = g.shape(fwd.logits)[1];
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(TrainError::LabelRange { label, classes });
    }
    let cls = g.cross_entropy(fwd.logits, labels)?;
    let mut modal = Vec::with_capacity(m_count);
    let mut modal_rows = Vec::with_capacity(m_count);
    for &logits in &fwd.unimodal_logits {
        let rows = g.cross_entropy_rows(logits, labels)?;
        modal.push(g.mean(rows));
        modal_rows.push(rows);
    }
    // The target is read off the current unimodal losses and held constant.
    let mut p_l = Vec::with_capacity(batch * m_count);
    for b in 0..batch {
        let losses: Vec<f64> = modal_rows.iter().map(|&r| g.value(r).data()[b]).collect();
        p_l.extend(calibration_target(&losses, loss.calibration_target, loss.delta));
    }
    let p_l = Tensor::new(vec![batch, m_count], p_l)?;
    let cali = calibration_graph(g, fwd.w, &p_l, loss.divergence, loss.delta)?;
    let recover = match fwd.encoded.recover {
        Some(r) => g.scale(r, 1.0 / batch as f64),
        None => g.constant(Tensor::scalar(0.0)),
    };
    let mut modal_sum = modal[0];
    for &m in &modal[1..] {
        modal_sum = g.add(modal_sum, m)?;
    }
    let weighted_modal = g.scale(modal_sum, loss.lambda_modal);
    let weighted_cali = g.scale(cali, lambda_cali);
    let partial = g.add(cls, weighted_modal)?;
    let dyn_loss = g.add(partial, weighted_cali)?;
    let total = g.add(dyn_loss, recover)?;
    Ok(Objective { cls, modal, cali, recover, dyn_loss, total, p_l, modal_rows })
}

/// Per-epoch training record, one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub cls: f64,
    pub modal: Vec<f64>,
    pub cali: f64,
    pub recover: f64,
    pub total: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DualModel,
    pub epochs: Vec<EpochLog>,
    /// Breakdown of every optimizer step.
    pub steps: Vec<LossBreakdown>,
    /// Feature cache under the final parameters.
    pub cache: FeatureCache,
}

/// Windows to hide for reconstruction supervision: each present window with
/// probability `p`, keeping at least one modality visible per sample.
fn draw_hidden(corpus: &Corpus, ids: &[usize], m_count: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    let mut hidden = vec![vec![false; ids.len()]; m_count];
    for (j, &id) in ids.iter().enumerate() {
        let present: Vec<usize> = (0..m_count).filter(|&m| corpus.samples[id].windows[m].present).collect();
        let mut picks: Vec<usize> = present.iter().copied().filter(|_| rng.gen_bool(p)).collect();
        if picks.len() >= present.len() {
            let keep = rng.gen_range(0..present.len());
            picks.retain(|&m| m != present[keep]);
        }
        for m in picks {
            hidden[m][j] = true;
        }
    }
    hidden
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

fn check_finite(bd: &LossBreakdown, epoch: usize, batch: usize) -> Result<()> {
    let mut named: Vec<(String, f64)> = vec![("cls".into(), bd.cls), ("cali".into(), bd.cali), ("recover".into(), bd.recover)];
    named.extend(bd.modal.iter().enumerate().map(|(m, &v)| (format!("modal_{}", m + 1), v)));
    named.push(("total".into(), bd.total));
    match named.into_iter().find(|(_, v)| !v.is_finite()) {
        Some((component, _)) => Err(TrainError::NonFinite { epoch, batch, component }),
        None => Ok(()),
    }
}

/// Trains a fresh model on the corpus's train split.
pub fn train(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    train_with(cfg, corpus, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(cfg: &ExperimentConfig, corpus: &Corpus, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate().map_err(|e| TrainError::Invalid(e.to_string()))?;
    let mut model = DualModel::new(&cfg.model, &cfg.ablation, &corpus.spec, cfg.seed);
    model.check_compatible(&corpus.spec).map_err(TrainError::Incompatible)?;
    let m_count = model.num_modalities();
    let opt = Adam { lr: cfg.train.lr, beta1: cfg.train.beta1, beta2: cfg.train.beta2, eps: cfg.train.eps };
    let lambda_cali = cfg.lambda_cali();
    let mask_prob = if cfg.ablation.reconstruction_off { 0.0 } else { cfg.train.mask_prob };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7452_4149_4e00_0000);
    let mut train_ids = corpus.ids(Split::Train);
    let test_ids = corpus.ids(Split::Test);
    if train_ids.is_empty() {
        return Err(TrainError::Invalid("corpus has no training samples".into()));
    }
    let bs = cfg.train.batch_size;
    let mut cache = model.feature_cache(corpus, 128)?;
    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    let mut steps = Vec::new();
    for epoch in 1..=cfg.train.epochs {
        train_ids.shuffle(&mut rng);
        let mut sums = LossBreakdown {
            cls: 0.0,
            modal: vec![0.0; m_count],
            cali: 0.0,
            recover: 0.0,
            dyn_loss: 0.0,
            total: 0.0,
            lambda_modal: cfg.loss.lambda_modal,
            lambda_cali,
        };
        let mut correct = 0usize;
        for (bi, chunk) in train_ids.chunks(bs).enumerate() {
            let hidden = draw_hidden(corpus, chunk, m_count, mask_prob, &mut rng);
            let batch = model.make_batch(corpus, chunk, &cache, Some(&hidden));
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &batch)?;
            let obj = objective(&mut g, &fwd, &batch.labels, &cfg.loss, lambda_cali)?;
            let bd = obj.breakdown(&g, cfg.loss.lambda_modal, lambda_cali);
            check_finite(&bd, epoch, bi)?;
            g.backward(obj.total)?;
            model.store.zero_grad();
            g.accumulate_param_grads(&mut model.store);
            model.store.adam_step_all(&opt);

            let logits = g.value(fwd.logits);
            correct += (0..batch.len()).filter(|&j| argmax(logits.row(j)) == batch.labels[j]).count();
            let k = batch.len() as f64;
            sums.cls += bd.cls * k;
            for (s, v) in sums.modal.iter_mut().zip(&bd.modal) {
                *s += v * k;
            }
            sums.cali += bd.cali * k;
            sums.recover += bd.recover * k;
            sums.dyn_loss += bd.dyn_loss * k;
            sums.total += bd.total * k;
            steps.push(bd);
        }
        cache = model.feature_cache(corpus, 128)?;
        let n = train_ids.len() as f64;
        let test_acc = if test_ids.is_empty() { f64::NAN } else { accuracy(&model, corpus, &test_ids, &cache, bs)? };
        let log = EpochLog {
            epoch,
            cls: sums.cls / n,
            modal: sums.modal.iter().map(|v| v / n).collect(),
            cali: sums.cali / n,
            recover: sums.recover / n,
            total: sums.total / n,
            train_acc: correct as f64 / n,
            test_acc,
        };
        on_epoch(&log);
        epochs.push(log);
    }
    model.store.zero_grad();
    Ok(TrainOutcome { model, epochs, steps, cache })
}

/// Fraction of `ids` classified correctly.
pub fn accuracy(model: &DualModel, corpus: &Corpus, ids: &[usize], cache: &FeatureCache, batch_size: usize) -> Result<f64> {
    let mut correct = 0;
    for chunk in ids.chunks(batch_size.max(1)) {
        let batch = model.make_batch(corpus, chunk, cache, None);
        let mut g = Graph::inference();
        let fwd = model.forward(&mut g, &batch)?;
        let logits = g.value(fwd.logits);
        correct += (0..batch.len()).filter(|&j| argmax(logits.row(j)) == batch.labels[j]).count();
    }
    Ok(correct as f64 / ids.len().max(1) as f64)
}

/// Per-sample, per-modality uncertainty record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintyRow {
    pub id: usize,
    pub modality: usize,
    pub r: f64,
    pub s: f64,
    /// Fusion weight, which is also this modality's `P_D` entry.
    pub w: f64,
    pub unimodal_loss: f64,
    pub p_l: f64,
    pub present: bool,
    pub noise_level: f64,
    pub fluctuation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintyReport {
    pub modalities: usize,
    /// Sample-major, modality-minor.
    pub rows: Vec<UncertaintyRow>,
}

impl UncertaintyReport {
    pub fn modality(&self, m: usize) -> impl Iterator<Item = &UncertaintyRow> {
        self.rows.iter().filter(move |r| r.modality == m)
    }

    /// `(P_D, P_L)` of the `k`-th sample in the report.
    pub fn distributions(&self, k: usize) -> (Vec<f64>, Vec<f64>) {
        let rows = &self.rows[k * self.modalities..(k + 1) * self.modalities];
        (rows.iter().map(|r| r.w).collect(), rows.iter().map(|r| r.p_l).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
    pub report: UncertaintyReport,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        let correct = self.predictions.iter().zip(&self.labels).filter(|(p, y)| p == y).count();
        correct as f64 / self.labels.len().max(1) as f64
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Predictions and uncertainty records for `ids`.
pub fn evaluate(model: &DualModel, corpus: &Corpus, ids: &[usize], cache: &FeatureCache, loss: &LossConfig) -> Result<Evaluation> {
    model.check_compatible(&corpus.spec).map_err(TrainError::Incompatible)?;
    let m_count = model.num_modalities();
    let mut out = Evaluation {
        ids: ids.to_vec(),
        labels: Vec::with_capacity(ids.len()),
        predictions: Vec::with_capacity(ids.len()),
        probs: Vec::with_capacity(ids.len()),
        report: UncertaintyReport { modalities: m_count, rows: Vec::with_capacity(ids.len() * m_count) },
    };
    for chunk in ids.chunks(64) {
        let batch: Batch = model.make_batch(corpus, chunk, cache, None);
        let mut g = Graph::inference();
        let fwd = model.forward(&mut g, &batch)?;
        let logits = g.value(fwd.logits).clone();
        let w = g.value(fwd.w).clone();
        for (j, &id) in chunk.iter().enumerate() {
            let label = batch.labels[j];
            out.labels.push(label);
            out.predictions.push(argmax(logits.row(j)));
            out.probs.push(softmax_row(logits.row(j)));
            let losses: Vec<f64> = fwd.unimodal_logits.iter().map(|&u| cross_entropy(g.value(u).row(j), label)).collect::<Result<_>>()?;
            let p_l = calibration_target(&losses, loss.calibration_target, loss.delta);
            for m in 0..m_count {
                let win = &corpus.samples[id].windows[m];
                out.report.rows.push(UncertaintyRow {
                    id,
                    modality: m,
                    r: g.value(fwd.r[m]).data()[j],
                    s: g.value(fwd.s[m]).data()[j],
                    w: w.row(j)[m],
                    unimodal_loss: losses[m],
                    p_l: p_l[m],
                    present: win.present,
                    noise_level: win.noise_level,
                    fluctuation: win.fluctuation,
                });
            }
        }
    }
    Ok(out)
}

/// Mean squared error per feature between reconstructions of `modality`
/// (hidden on complete samples) and its actual encoding.
pub fn recovery_mse(model: &DualModel, corpus: &Corpus, ids: &[usize], cache: &FeatureCache, modality: usize) -> Result<f64> {
    let m_count = model.num_modalities();
    let complete: Vec<usize> = ids.iter().copied().filter(|&i| corpus.samples[i].windows.iter().all(|w| w.present)).collect();
    if complete.is_empty() {
        return Err(TrainError::Invalid("no complete samples to score reconstruction".into()));
    }
    let mut sum = 0.0;
    for chunk in complete.chunks(64) {
        let mut hidden = vec![vec![false; chunk.len()]; m_count];
        hidden[modality] = vec![true; chunk.len()];
        let batch = model.make_batch(corpus, chunk, cache, Some(&hidden));
        let mut g = Graph::inference();
        let enc = model.encode(&mut g, &batch)?;
        if let Some(r) = enc.recover {
            sum += g.value(r).item();
        }
    }
    Ok(sum / (complete.len() * model.config.d_model) as f64)
}

/// Scatter data and correlations for one modality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalityCalibration {
    pub modality: usize,
    /// `(r * s, unimodal loss)` per sample.
    pub points: Vec<(f64, f64)>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    /// Spearman correlation between the fusion weight and the negated
    /// unimodal loss.
    pub weight_spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub modalities: Vec<ModalityCalibration>,
}

impl CalibrationReport {
    pub fn rows(&self) -> usize {
        self.modalities.iter().map(|m| m.points.len()).sum()
    }

    /// Mean of the defined weight correlations.
    pub fn mean_weight_spearman(&self) -> Option<f64> {
        let v: Vec<f64> = self.modalities.iter().filter_map(|m| m.weight_spearman).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Correlations between uncertainty and unimodal loss from a report.
pub fn calibration_from_report(report: &UncertaintyReport) -> CalibrationReport {
    let modalities = (0..report.modalities)
        .map(|m| {
            let rows: Vec<&UncertaintyRow> = report.modality(m).collect();
            let unc: Vec<f64> = rows.iter().map(|r| r.r * r.s).collect();
            let loss: Vec<f64> = rows.iter().map(|r| r.unimodal_loss).collect();
            let w: Vec<f64> = rows.iter().map(|r| r.w).collect();
            let neg: Vec<f64> = loss.iter().map(|l| -l).collect();
            ModalityCalibration {
                modality: m,
                points: unc.iter().copied().zip(loss.iter().copied()).collect(),
                pearson: pearson(&unc, &loss),
                spearman: spearman(&unc, &loss),
                weight_spearman: spearman(&w, &neg),
            }
        })
        .collect();
    CalibrationReport { modalities }
}

/// Evaluates every sample of the corpus and correlates uncertainty with loss.
pub fn calibration_diagnostic(model: &DualModel, corpus: &Corpus, loss: &LossConfig) -> Result<CalibrationReport> {
    let cache = model.feature_cache(corpus, 128)?;
    let ids: Vec<usize> = (0..corpus.len()).collect();
    let eval = evaluate(model, corpus, &ids, &cache, loss)?;
    Ok(calibration_from_report(&eval.report))
}
