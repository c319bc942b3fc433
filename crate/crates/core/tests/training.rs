use dualfuse::config::{Ablation, ExperimentConfig, FusionKind, ModelConfig, Switch};
use dualfuse::datasim::{generate, Corpus, CorpusSpec, Split};
use dualfuse::numerics::Graph;
use dualfuse::training::{evaluate, train};

fn tiny(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        corpus: CorpusSpec { samples: 72, history: 2, episode_len: 6, missing_rate: 0.3, ..CorpusSpec::default() },
        model: ModelConfig {
            d_model: 8,
            layers: 2,
            task_head_layers: 2,
            conv_channels: vec![4, 4],
            visual_hidden: 8,
            decoder_channels: 4,
            decoder_width: 4,
            ..ModelConfig::default()
        },
        seed,
        ..ExperimentConfig::default()
    };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 16;
    cfg
}

fn corpus(cfg: &ExperimentConfig) -> Corpus {
    generate(&cfg.corpus).unwrap()
}

#[test]
fn breakdown_recomposes_at_every_step() {
    let cfg = tiny(1);
    let out = train(&cfg, &corpus(&cfg)).unwrap();
    assert_eq!(out.steps.len() as u64, out.model.store.steps_taken());
    for (i, step) in out.steps.iter().enumerate() {
        assert!(step.recomposition_error() < 1e-12, "step {i}: {step:?}");
        assert!(step.total.is_finite());
    }
}

#[test]
fn same_seed_same_run() {
    let cfg = tiny(2);
    let data = corpus(&cfg);
    let a = train(&cfg, &data).unwrap();
    let b = train(&cfg, &data).unwrap();
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.steps, b.steps);
    let c = train(&tiny(3), &data).unwrap();
    assert_ne!(a.epochs, c.epochs);
}

/// The reduced method: shared projections, uniform weights, no auxiliary
/// losses, no reconstruction.
fn reduced(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.ablation = Ablation::default();
    for sw in [Switch::TiedProjections, Switch::StaticWeights, Switch::ReconstructionOff] {
        cfg.ablation.set(sw);
    }
    cfg.loss.lambda_modal = 0.0;
    cfg.loss.lambda_cali = 0.0;
    cfg
}

#[test]
fn reduced_method_is_bit_identical_to_vanilla_fusion() {
    let cfg = reduced(tiny(4));
    let mut vanilla = cfg.clone();
    vanilla.model.fusion = FusionKind::Vanilla;
    let data = corpus(&cfg);
    let a = train(&cfg, &data).unwrap();
    let b = train(&vanilla, &data).unwrap();
    assert_eq!(a.epochs, b.epochs);
    let bits = |s: &[dualfuse::training::LossBreakdown]| s.iter().map(|x| x.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.steps), bits(&b.steps));
    let ids = data.ids(Split::Test);
    let batch_a = a.model.make_batch(&data, &ids, &a.cache, None);
    let batch_b = b.model.make_batch(&data, &ids, &b.cache, None);
    let (mut ga, mut gb) = (Graph::inference(), Graph::inference());
    let fa = a.model.forward(&mut ga, &batch_a).unwrap();
    let fb = b.model.forward(&mut gb, &batch_b).unwrap();
    let to_bits = |g: &Graph, v| g.value(v).data().iter().map(|x: &f64| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(to_bits(&ga, fa.logits), to_bits(&gb, fb.logits));
}

#[test]
fn evaluation_rows_cover_the_test_split() {
    let cfg = tiny(5);
    let data = corpus(&cfg);
    let out = train(&cfg, &data).unwrap();
    let ids = data.ids(Split::Test);
    let eval = evaluate(&out.model, &data, &ids, &out.cache, &cfg.loss).unwrap();
    assert_eq!(eval.report.rows.len(), 3 * ids.len());
    for k in 0..ids.len() {
        let (p_d, p_l) = eval.report.distributions(k);
        assert!((p_d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((p_l.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert!((0.0..=1.0).contains(&eval.accuracy()));
}

#[test]
fn training_lowers_the_loss() {
    let mut cfg = tiny(6);
    cfg.train.epochs = 6;
    let out = train(&cfg, &corpus(&cfg)).unwrap();
    let first = &out.epochs[0];
    let last = out.epochs.last().unwrap();
    assert!(last.cls < first.cls, "{} -> {}", first.cls, last.cls);
}
