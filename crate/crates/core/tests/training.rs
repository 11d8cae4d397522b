use turbogan::oracles::mrw;
use turbogan::training::{
    load_generator, train, train_baseline, CriticBatch, CurveSource, DSchedule, LossWeights, TrainConfig, Trainer, Variant,
    FINAL_CHECKPOINT, LOSS_CSV,
};
use turbogan::nn::Checkpoint;
use turbogan::{Error, FieldEnsemble};

const N: usize = 1024;

fn data() -> FieldEnsemble {
    mrw(8, N, 1.0 / 3.0, 0.05, N / 8, 11).unwrap()
}

fn tiny(variant: Variant) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        samples: N,
        preset: "desk".into(),
        width_multiplier: Some(0.125),
        variant,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn d_step_leaves_generator_untouched_and_g_step_leaves_critics() {
    let mut t = Trainer::new(&data(), tiny(Variant::Multicriteria)).unwrap();
    let f0 = t.fingerprints();
    assert_eq!(f0.len(), 5);
    t.d_step(0, 0).unwrap();
    let f1 = t.fingerprints();
    assert_eq!(f0[0], f1[0]);
    for k in 1..5 {
        assert_ne!(f0[k], f1[k], "critic {k} did not move");
    }
    t.g_step(0).unwrap();
    let f2 = t.fingerprints();
    assert_ne!(f1[0], f2[0]);
    assert_eq!(&f1[1..], &f2[1..]);
}

#[test]
fn zero_weight_terms_contribute_no_gradient() {
    let mut c = tiny(Variant::Multicriteria);
    c.weights = LossWeights {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
        lambda: 0.0,
    };
    let t = Trainer::new(&data(), c).unwrap();
    let norms = t.generator_term_grad_norms().unwrap();
    assert!(norms[0] > 0.0);
    assert_eq!(&norms[1..], &[0.0, 0.0, 0.0]);

    let t = Trainer::new(&data(), tiny(Variant::Multicriteria)).unwrap();
    let norms = t.generator_term_grad_norms().unwrap();
    assert!(norms.iter().all(|&n| n > 0.0), "{norms:?}");
}

#[test]
fn history_total_matches_weighted_terms() {
    let mut t = Trainer::new(&data(), tiny(Variant::Multicriteria)).unwrap();
    t.train_step().unwrap();
    let h = t.history();
    let r = &h.rows[0];
    let w = LossWeights::default().as_array();
    let total = (1..5).map(|j| w[j - 1] * r[j]).sum::<f64>();
    assert!((total - r[5]).abs() < 1e-5 * total.abs().max(1.0));
    assert_eq!(r.len(), h.columns.len());
}

#[test]
fn resume_is_bit_exact() {
    let ds = data();
    let full = train(&ds, tiny(Variant::Multicriteria), None, None).unwrap().trainer;

    let mut half = tiny(Variant::Multicriteria);
    half.epochs = 1;
    let first = train(&ds, half, None, None).unwrap().trainer;
    let bytes = first.checkpoint().to_bytes();
    let ck = Checkpoint::from_bytes(&bytes, std::path::Path::new("memory")).unwrap();
    let resumed = train(&ds, tiny(Variant::Multicriteria), None, Some(&ck)).unwrap().trainer;

    assert_eq!(full.history(), resumed.history());
    assert_eq!(full.fingerprints(), resumed.fingerprints());
}

#[test]
fn resume_rejects_other_configuration() {
    let ds = data();
    let t = Trainer::new(&ds, tiny(Variant::Multicriteria)).unwrap();
    let ck = t.checkpoint();
    let mut other = tiny(Variant::Multicriteria);
    other.lr = 2e-3;
    assert!(matches!(Trainer::resume(&ds, other, &ck), Err(Error::InvalidArgument(_))));
}

#[test]
fn runs_are_deterministic() {
    let ds = data();
    let a = train(&ds, tiny(Variant::Multicriteria), None, None).unwrap().trainer;
    let b = train(&ds, tiny(Variant::Multicriteria), None, None).unwrap().trainer;
    assert_eq!(a.history(), b.history());
}

#[test]
fn divergence_is_reported() {
    let mut c = tiny(Variant::Multicriteria);
    c.lr = 1e30;
    c.epochs = 20;
    let dir = tempfile::tempdir().unwrap();
    match train(&data(), c, Some(dir.path()), None) {
        Err(Error::Divergence { step, .. }) => assert!(step >= 1),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training with a huge learning rate did not diverge"),
    }
    assert!(dir.path().join(LOSS_CSV).exists());
}

#[test]
fn outputs_and_generator_reload() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(Variant::Multicriteria);
    c.checkpoint_every = 1;
    let out = train(&data(), c, Some(dir.path()), None).unwrap();
    assert_eq!(out.checkpoints.len(), 2);
    let csv = std::fs::read_to_string(dir.path().join(LOSS_CSV)).unwrap();
    assert!(csv.starts_with("step,l_si,l_s2,l_skew,l_flat,total,d_si,d_s2,d_skew,d_flat,"));
    assert_eq!(csv.lines().count(), 1 + 2 * out.trainer.steps_per_epoch());

    let ck = Checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    let (g, store) = load_generator(&ck).unwrap();
    let (g0, s0) = out.trainer.generator();
    assert_eq!(g.config, g0.config);
    assert_eq!(store.fingerprint(), s0.fingerprint());

    // eval statistics are stored separately and are required to reload
    assert!(ck.arrays.iter().any(|a| a.name.starts_with("gen_eval/")));
    let mut stripped = ck.clone();
    stripped.arrays.retain(|a| !a.name.starts_with("gen_eval/"));
    assert!(load_generator(&stripped).is_err());
}

#[test]
fn baselines_train() {
    for v in [Variant::Gan, Variant::Wgan] {
        let dir = tempfile::tempdir().unwrap();
        let out = train_baseline(&data(), tiny(v), Some(dir.path())).unwrap();
        let h = out.trainer.history();
        assert_eq!(h.rows.len(), 2 * out.trainer.steps_per_epoch());
        assert!(h.rows.iter().flatten().all(|x| x.is_finite()));
        assert_eq!(out.trainer.fingerprints().len(), 2);
    }
    assert!(train_baseline(&data(), tiny(Variant::Multicriteria), None).is_err());
}

#[test]
fn gan_critic_starts_near_log2_per_side() {
    let mut t = Trainer::new(&data(), tiny(Variant::Gan)).unwrap();
    let d = t.d_step(0, 0).unwrap();
    for side in d {
        assert!((side - 2f64.ln()).abs() < 0.2, "{side}");
    }
}

#[test]
fn switches_train() {
    let mut c = tiny(Variant::Multicriteria);
    c.d_schedule = DSchedule::PerEpoch;
    c.curve_source = CurveSource::EnsembleMean;
    c.critic_batch = CriticBatch::Paired;
    let out = train(&data(), c, None, None).unwrap();
    assert!(out.trainer.history().rows.iter().all(|r| r[1..6].iter().all(|x| x.is_finite())));
}

#[test]
fn invalid_setups_are_rejected() {
    let mut c = tiny(Variant::Multicriteria);
    c.samples = 2048;
    assert!(Trainer::new(&data(), c).is_err());
    let mut c = tiny(Variant::Multicriteria);
    c.batch_size = 9;
    assert!(Trainer::new(&data(), c).is_err());
}
