//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each, and
//! exits nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --release --test acceptance -- 1 8`.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dualfuse::config::{Ablation, Cell, ExperimentConfig, FusionKind, LossConfig, ModelConfig, Switch};
use dualfuse::datasim::{generate, Corpus, CorpusSpec, Split};
use dualfuse::experiment::{run_cell, standard_variants, variant_config};
use dualfuse::fusion::modality_weights;
use dualfuse::metrics::{auroc, classification_metrics, spearman};
use dualfuse::model::{Batch, DualModel};
use dualfuse::numerics::gradcheck::{check_all, OP_TOLERANCE};
use dualfuse::numerics::{rel_err, Graph, Tensor};
use dualfuse::training::{calibration_graph, evaluate, objective, train};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TRIALS: usize = 100;
const END_TO_END_TOLERANCE: f64 = 1e-3;
const END_TO_END_FRACTION: f64 = 0.01;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const SIMPLEX_TOLERANCE: f64 = 1e-9;
const LEARNABILITY_FLOOR: f64 = 0.90;
const LEARNABILITY_EPOCHS: usize = 30;
const LEARNABILITY_BUDGET: Duration = Duration::from_secs(15 * 60);
const NOISE_RANK_FLOOR: f64 = 0.3;
/// Windows at or above this magnitude count as heavily noised.
const HEAVY_NOISE: f64 = 2.0;
const ABLATION_GAP: f64 = 0.01;
const NORMALIZATION_GAP: f64 = 0.02;
const SEEDS: [u64; 3] = [0, 1, 2];
const METRIC_INSTANCES: usize = 1000;

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        layers: 1,
        task_head_layers: 2,
        conv_channels: vec![4, 4],
        visual_hidden: 8,
        decoder_channels: 4,
        decoder_width: 4,
        ..ModelConfig::default()
    }
}

fn small_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        corpus: CorpusSpec { samples: 120, history: 2, episode_len: 4, test_fraction: 0.3, missing_rate: 0.3, ..CorpusSpec::default() },
        model: ModelConfig { layers: 2, ..small_model() },
        seed,
        ..ExperimentConfig::default()
    };
    cfg.train.epochs = 3;
    cfg.train.batch_size = 16;
    cfg
}

/// Reduced-width setting used where a criterion needs many training runs.
fn reduced_config(noise_rate: f64, missing_rate: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.corpus.samples = 1500;
    cfg.corpus.test_fraction = 0.3;
    cfg.corpus.noise_rate = noise_rate;
    cfg.corpus.missing_rate = missing_rate;
    cfg.corpus.noise_min = 2.0;
    cfg.corpus.noise_max = 5.0;
    cfg.model.d_model = 32;
    cfg.model.visual_hidden = 32;
    cfg.train.epochs = 15;
    cfg
}

// ---- 1. gradient correctness ------------------------------------------------

/// Batch where each modality is hidden in one row, so every decoder runs.
fn mixed_batch(model: &DualModel, corpus: &Corpus) -> Batch {
    let cache = model.feature_cache(corpus, 64).unwrap();
    let ids: Vec<usize> = (0..6).collect();
    let mut hidden = vec![vec![false; ids.len()]; 3];
    for (m, row) in hidden.iter_mut().enumerate() {
        row[m] = true;
    }
    model.make_batch(corpus, &ids, &cache, Some(&hidden))
}

/// `(dyn, total)` with the calibration target held at `p_l`.
fn pinned_losses(model: &DualModel, batch: &Batch, loss: &LossConfig, p_l: &Tensor) -> (f64, f64) {
    let mut g = Graph::inference();
    let fwd = model.forward(&mut g, batch).unwrap();
    let obj = objective(&mut g, &fwd, &batch.labels, loss, loss.lambda_cali).unwrap();
    let cali = calibration_graph(&mut g, fwd.w, p_l, loss.divergence, loss.delta).unwrap();
    let modal: f64 = obj.modal.iter().map(|&m| g.value(m).item()).sum();
    let dyn_loss = g.value(obj.cls).item() + loss.lambda_modal * modal + loss.lambda_cali * g.value(cali).item();
    (dyn_loss, dyn_loss + g.value(obj.recover).item())
}

fn end_to_end_gradcheck() -> (usize, usize, f64) {
    let corpus = generate(&CorpusSpec { samples: 24, history: 2, episode_len: 4, ..CorpusSpec::default() }).unwrap();
    let loss = LossConfig { lambda_cali: 0.5, ..LossConfig::default() };
    let mut model = DualModel::new(&small_model(), &Ablation::default(), &corpus.spec, 2);
    let batch = mixed_batch(&model, &corpus);
    let mut grads = Vec::new();
    let mut p_l = None;
    for use_total in [false, true] {
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &batch).unwrap();
        let obj = objective(&mut g, &fwd, &batch.labels, &loss, loss.lambda_cali).unwrap();
        g.backward(if use_total { obj.total } else { obj.dyn_loss }).unwrap();
        model.store.zero_grad();
        g.accumulate_param_grads(&mut model.store);
        let ids: Vec<_> = model.store.ids().collect();
        grads.push(ids.iter().map(|&id| model.store.grad(id).map(<[f64]>::to_vec).unwrap_or_default()).collect::<Vec<_>>());
        p_l = Some(obj.p_l);
    }
    let p_l = p_l.unwrap();
    let slots: Vec<(_, usize)> = model.store.ids().flat_map(|id| (0..model.store.value(id).len()).map(move |i| (id, i))).collect();
    let count = ((slots.len() as f64 * END_TO_END_FRACTION).ceil() as usize).max(20);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let h = 1e-5;
    for k in sample(&mut rng, slots.len(), count) {
        let (id, i) = slots[k];
        // The reconstruction target is a stop-gradient copy of an encoder
        // output, so encoder entries are checked against the dynamic loss.
        let encoder = model.store.name(id).starts_with("enc");
        let analytic = grads[usize::from(!encoder)][id.index()][i];
        let pick = |l: (f64, f64)| if encoder { l.0 } else { l.1 };
        let orig = model.store.value(id).data()[i];
        model.store.value_mut(id).data_mut()[i] = orig + h;
        let up = pick(pinned_losses(&model, &batch, &loss, &p_l));
        model.store.value_mut(id).data_mut()[i] = orig - h;
        let down = pick(pinned_losses(&model, &batch, &loss, &p_l));
        model.store.value_mut(id).data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic, (up - down) / (2.0 * h)));
    }
    (count, slots.len(), worst)
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let reports = check_all(GRAD_TRIALS, 11).unwrap();
    let worst_op = reports.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    let ops_ok = reports.iter().all(|r| r.passed(OP_TOLERANCE));
    let (checked, total, e2e) = end_to_end_gradcheck();
    let elapsed = start.elapsed();
    Verdict::new(
        ops_ok && e2e < END_TO_END_TOLERANCE && elapsed < GRAD_BUDGET,
        format!(
            "{} ops x {GRAD_TRIALS} trials, worst {} {:.1e} (tol {OP_TOLERANCE:.0e}); end-to-end {checked}/{total} scalars worst {e2e:.1e} (tol {END_TO_END_TOLERANCE:.0e}); {:.1}s",
            reports.len(),
            worst_op.name,
            worst_op.max_rel_err,
            elapsed.as_secs_f64()
        ),
    )
}

// ---- 2. algebraic invariants ------------------------------------------------

fn algebraic_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst_sum = 0.0f64;
    let mut worst_ratio = 0.0f64;
    let mut worst_uniform = 0.0f64;
    for _ in 0..1000 {
        let m = rng.gen_range(2..=6);
        let r: Vec<f64> = (0..m).map(|_| rng.gen_range(-6.0f64..6.0).exp()).collect();
        let s: Vec<f64> = (0..m).map(|_| rng.gen_range(-6.0f64..6.0).exp()).collect();
        let w = modality_weights(&r, &s, 1e-6).unwrap();
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        let c = rng.gen_range(-4.0f64..4.0).exp();
        let scaled = modality_weights(&r.iter().map(|v| v * c).collect::<Vec<_>>(), &s, 1e-6).unwrap();
        worst_ratio = worst_ratio.max(w.iter().zip(&scaled).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let u = modality_weights(&vec![r[0]; m], &vec![s[0]; m], 1e-6).unwrap();
        worst_uniform = worst_uniform.max(u.iter().map(|v| (v - 1.0 / m as f64).abs()).fold(0.0, f64::max));
    }

    let cfg = small_config(4);
    let corpus = generate(&cfg.corpus).unwrap();
    let out = train(&cfg, &corpus).unwrap();
    let recomposition = out.steps.iter().map(|s| s.recomposition_error()).fold(0.0, f64::max);
    let ids = corpus.ids(Split::Test);
    let batch = out.model.make_batch(&corpus, &ids, &out.cache, None);
    let mut g = Graph::inference();
    let fwd = out.model.forward(&mut g, &batch).unwrap();
    let mut worst_row = 0.0f64;
    for trace in &fwd.traces {
        let n = *g.shape(trace.probs).last().unwrap();
        for row in g.value(trace.probs).data().chunks(n) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let passed = worst_sum <= SIMPLEX_TOLERANCE && worst_ratio <= 1e-12 && worst_uniform <= 1e-15 && worst_row <= 1e-12 && recomposition <= 1e-12;
    Verdict::new(
        passed,
        format!(
            "simplex {worst_sum:.1e}, ratio drift {worst_ratio:.1e}, uniform offset {worst_uniform:.1e}, attention rows {worst_row:.1e}, recomposition over {} steps {recomposition:.1e}",
            out.steps.len()
        ),
    )
}

// ---- 3. baseline reduction --------------------------------------------------

fn baseline_reduction() -> Verdict {
    let mut cfg = small_config(5);
    for sw in [Switch::TiedProjections, Switch::StaticWeights, Switch::ReconstructionOff] {
        cfg.ablation.set(sw);
    }
    cfg.loss.lambda_modal = 0.0;
    cfg.loss.lambda_cali = 0.0;
    let mut vanilla = cfg.clone();
    vanilla.model.fusion = FusionKind::Vanilla;
    let corpus = generate(&cfg.corpus).unwrap();
    let a = train(&cfg, &corpus).unwrap();
    let b = train(&vanilla, &corpus).unwrap();
    let bits = |o: &dualfuse::training::TrainOutcome| {
        let ids = corpus.ids(Split::Test);
        let batch = o.model.make_batch(&corpus, &ids, &o.cache, None);
        let mut g = Graph::inference();
        let f = o.model.forward(&mut g, &batch).unwrap();
        let mut v: Vec<u64> = o.steps.iter().map(|s| s.total.to_bits()).collect();
        v.extend(g.value(f.logits).data().iter().map(|x| x.to_bits()));
        v
    };
    let same = bits(&a) == bits(&b) && a.epochs == b.epochs;
    Verdict::new(same, format!("{} steps and test logits {}", a.steps.len(), if same { "bit-identical" } else { "differ" }))
}

// ---- 4. learnability --------------------------------------------------------

fn learnability() -> Verdict {
    let mut cfg = ExperimentConfig::default();
    cfg.corpus.noise_rate = 0.0;
    cfg.corpus.missing_rate = 0.0;
    cfg.train.epochs = LEARNABILITY_EPOCHS;
    let corpus = generate(&cfg.corpus).unwrap();
    let start = Instant::now();
    let out = train(&cfg, &corpus).unwrap();
    let elapsed = start.elapsed();
    let acc = out.epochs.last().unwrap().test_acc;
    Verdict::new(
        acc >= LEARNABILITY_FLOOR && elapsed < LEARNABILITY_BUDGET,
        format!("test accuracy {acc:.4} after {LEARNABILITY_EPOCHS} epochs (floor {LEARNABILITY_FLOOR}), {:.0}s", elapsed.as_secs_f64()),
    )
}

// ---- 5. uncertainty tracks noise --------------------------------------------

fn noise_tracking() -> Verdict {
    let cfg = ExperimentConfig::default();
    let corpus = generate(&cfg.corpus).unwrap();
    let out = train(&cfg, &corpus).unwrap();
    let ids = corpus.ids(Split::Test);
    let eval = evaluate(&out.model, &corpus, &ids, &out.cache, &cfg.loss).unwrap();
    let mut passed = true;
    let mut parts = Vec::new();
    for m in 0..eval.report.modalities {
        let rows: Vec<_> = eval.report.modality(m).filter(|r| r.present).collect();
        let noise: Vec<f64> = rows.iter().map(|r| r.noise_level).collect();
        let r: Vec<f64> = rows.iter().map(|r| r.r).collect();
        let rho = spearman(&noise, &r).unwrap_or(f64::NAN);
        let heavy: Vec<f64> = rows.iter().filter(|r| r.noise_level >= HEAVY_NOISE).map(|r| r.w).collect();
        let clean: Vec<f64> = rows.iter().filter(|r| r.noise_level == 0.0).map(|r| r.w).collect();
        let (wh, wc) = (mean(&heavy), mean(&clean));
        passed &= rho > NOISE_RANK_FLOOR && !heavy.is_empty() && wh < wc;
        parts.push(format!("m{m} rho(noise,r) {rho:+.3} w heavy {wh:.3} vs clean {wc:.3}"));
    }
    Verdict::new(passed, parts.join("; "))
}

// ---- 6. ablation orderings --------------------------------------------------

fn ablation_orderings() -> Verdict {
    let base = reduced_config(0.5, 0.5);
    let cell = Cell { noise_rate: 0.5, missing_rate: 0.5, missing_modality: base.corpus.missing_modalities[0] };
    let mut acc = Vec::new();
    let mut mse = Vec::new();
    let variants = standard_variants();
    for v in &variants {
        let (mut a, mut e) = (Vec::new(), Vec::new());
        for &seed in &SEEDS {
            let (_, r) = run_cell(&variant_config(&base, &v.ablation, seed), &cell).unwrap();
            a.push(r.metrics.accuracy);
            e.push(r.recovery_mse.unwrap_or(f64::NAN));
        }
        acc.push(mean(&a));
        mse.push(mean(&e));
    }
    let name = |i: usize| variants[i].name;
    let ladder_ok = (0..3).all(|i| acc[i] - acc[i + 1] >= ABLATION_GAP);
    let full = 0;
    let norm_off = variants.iter().position(|v| v.name == "normalization-off").unwrap();
    let recon_ok = mse[full] < mse[norm_off] && acc[full] - acc[norm_off] >= NORMALIZATION_GAP;
    let ladder: Vec<String> = (0..4).map(|i| format!("{} {:.4}", name(i), acc[i])).collect();
    Verdict::new(
        ladder_ok && recon_ok,
        format!(
            "{}; normalized recon acc {:.4} mse {:.4} vs bypassed acc {:.4} mse {:.4}",
            ladder.join(" >= "),
            acc[full],
            mse[full],
            acc[norm_off],
            mse[norm_off]
        ),
    )
}

// ---- 7. robustness slope ----------------------------------------------------

fn robustness_slope() -> Verdict {
    let mut drops = [Vec::new(), Vec::new()];
    let static_weights = Ablation { static_weights: true, ..Ablation::default() };
    for (k, ablation) in [Ablation::default(), static_weights].iter().enumerate() {
        for &seed in &SEEDS {
            let at = |noise: f64| {
                let cfg = variant_config(&reduced_config(noise, 0.0), ablation, seed);
                let cell = Cell { noise_rate: noise, missing_rate: 0.0, missing_modality: cfg.corpus.missing_modalities[0] };
                run_cell(&cfg, &cell).unwrap().1.metrics.accuracy
            };
            drops[k].push(at(0.0) - at(1.0));
        }
    }
    let (full, stat) = (mean(&drops[0]), mean(&drops[1]));
    Verdict::new(full < stat, format!("accuracy drop 0%->100% noise: full {full:.4}, static weights {stat:.4}"))
}

// ---- 8. metric oracles ------------------------------------------------------

fn brute_metrics(pred: &[usize], truth: &[usize], k: usize) -> [f64; 4] {
    let n = pred.len() as f64;
    let acc = pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / n;
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let count = |f: &dyn Fn(usize, usize) -> bool| pred.iter().zip(truth).filter(|(&p, &t)| f(p, t)).count() as f64;
        let tp = count(&|p, t| p == c && t == c);
        let fp = count(&|p, t| p == c && t != c);
        let fn_ = count(&|p, t| p != c && t == c);
        let safe = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        p_sum += safe(tp, tp + fp);
        r_sum += safe(tp, tp + fn_);
        f_sum += safe(2.0 * tp, 2.0 * tp + fp + fn_);
    }
    let k = k as f64;
    [acc, p_sum / k, r_sum / k, f_sum / k]
}

fn pair_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut metric_bad = 0;
    let mut auroc_bad = 0;
    for _ in 0..METRIC_INSTANCES {
        let k = rng.gen_range(2..=4);
        let n = rng.gen_range(1..=30);
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let m = classification_metrics(&pred, &truth, k).unwrap();
        let b = brute_metrics(&pred, &truth, k);
        let got = [m.accuracy, m.precision, m.recall, m.f1];
        if got.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-12) {
            metric_bad += 1;
        }

        let n = rng.gen_range(2..=30);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..6)) / 5.0).collect();
        if auroc(&scores, &labels).unwrap() != pair_auroc(&scores, &labels) {
            auroc_bad += 1;
        }
    }
    Verdict::new(
        metric_bad == 0 && auroc_bad == 0,
        format!("{METRIC_INSTANCES} instances: {metric_bad} metric mismatches, {auroc_bad} AUROC mismatches against pair counting"),
    )
}

// ---- 9. determinism ---------------------------------------------------------

fn cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_dualfuse")).args(args).output().map(|o| o.status.success()).unwrap_or(false)
}

fn determinism() -> Verdict {
    let dir = tempfile::TempDir::new().unwrap();
    let mut cfg = small_config(9);
    cfg.sweep.noise_rates = vec![0.0, 0.5, 1.0];
    cfg.sweep.missing_rates = vec![0.0, 0.5];
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let mut logs = Vec::new();
    let mut sweeps = Vec::new();
    for run in ["a", "b"] {
        let train_dir = dir.path().join(format!("train_{run}"));
        let sweep_dir = dir.path().join(format!("sweep_{run}"));
        if !cli(&["train", "--config", &p(&cfg_path), "--out", &p(&train_dir)]) || !cli(&["sweep", "--config", &p(&cfg_path), "--out", &p(&sweep_dir)]) {
            return Verdict::new(false, "a CLI run failed");
        }
        logs.push(fs::read(train_dir.join("train_log.csv")).unwrap());
        let mut cells: Vec<_> =
            fs::read_dir(sweep_dir.join("cells")).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "csv")).collect();
        cells.sort();
        let mut bytes = fs::read(sweep_dir.join("sweep.csv")).unwrap();
        for c in cells {
            bytes.extend(fs::read(c).unwrap());
        }
        sweeps.push(bytes);
    }
    let same_log = logs[0] == logs[1];
    let same_sweep = sweeps[0] == sweeps[1];
    Verdict::new(same_log && same_sweep, format!("training log identical: {same_log}; sweep table and cell logs identical: {same_sweep}"))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("gradient correctness", gradient_correctness),
        ("algebraic invariants", algebraic_invariants),
        ("baseline reduction", baseline_reduction),
        ("learnability floor", learnability),
        ("uncertainty tracks noise", noise_tracking),
        ("ablation orderings", ablation_orderings),
        ("robustness slope", robustness_slope),
        ("metric oracles", metric_oracles),
        ("determinism", determinism),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        failed += usize::from(!v.passed);
        println!("{} [{n}] {name}: {} ({:.0}s)", if v.passed { "PASS" } else { "FAIL" }, v.detail, start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
