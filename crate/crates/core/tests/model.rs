mod common;

use are_core::alignment::{apply_alignment, fit_alignment};
use are_core::data::{generate_synthetic, SynthSpec};
use are_core::model::{
    cross_entropy, forward, init_params, load_checkpoint, predict_logits, save_checkpoint, Checkpoint, Classifier,
    Mode, Model, ModelConfig, ParamSlot,
};
use are_core::numerics::Tensor;
use are_core::{Error, FormatError};
use common::{oracle, rand_vec, rng, tensor, to64};

fn small_set() -> are_core::data::TrialSet {
    generate_synthetic(&SynthSpec {
        n_users: 1,
        trials_per_class_per_user: 3,
        ..SynthSpec::desk(4)
    })
    .unwrap()
}

#[test]
fn checkpoint_file_round_trip_is_byte_identical() {
    let ts = small_set();
    let cfg = ModelConfig::desk(8, 512, 4);
    let ck = Checkpoint::new(cfg.clone(), init_params(&cfg, 3).unwrap()).with_alignment(fit_alignment(&ts).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.eegm"), dir.path().join("b.eegm"));
    save_checkpoint(&ck, &a).unwrap();
    let back = load_checkpoint(&a).unwrap();
    assert_eq!(back, ck);
    save_checkpoint(&back, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn checkpoint_alone_reproduces_inference() {
    let ts = small_set();
    let cfg = ModelConfig::desk(8, 512, 4);
    let state = fit_alignment(&ts).unwrap();
    let model = Model::new(cfg.clone(), init_params(&cfg, 5).unwrap());
    let (x, _) = apply_alignment(&state, &ts).unwrap().full_batch().unwrap();
    let direct = model.predict(&x).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.eegm");
    save_checkpoint(&Checkpoint::new(cfg, model.params.clone()).with_alignment(state), &path).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let aligned = apply_alignment(ck.alignment.as_ref().unwrap(), &ts).unwrap();
    let (x2, _) = aligned.full_batch().unwrap();
    assert_eq!(Model::new(ck.config, ck.params).predict(&x2).unwrap(), direct);
}

#[test]
fn checkpoint_corruption_errors() {
    let cfg = ModelConfig::desk(4, 32, 2);
    let bytes = Checkpoint::new(cfg.clone(), init_params(&cfg, 1).unwrap()).to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(FormatError::BadMagic { .. }))));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 4]),
        Err(Error::Format(FormatError::Truncated(_)))
    ));
    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 4]);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format(FormatError::ShapeMismatch(_)))));
}

#[test]
fn cross_entropy_matches_f64_oracle() {
    let mut r = rng(8);
    let (b, k) = (6, 4);
    let logits = rand_vec(&mut r, b * k, 4.0);
    let labels: Vec<u16> = (0..b).map(|i| (i % k + 1) as u16).collect();
    let targets: Vec<usize> = labels.iter().map(|&l| usize::from(l) - 1).collect();
    let got = cross_entropy(&tensor(&[b, k], &logits), &labels).unwrap();
    let want = oracle::softmax_ce(&to64(&tensor(&[b, k], &logits)), k, &targets);
    assert!((got - want).abs() < 1e-5);
    assert!((cross_entropy(&Tensor::zeros(&[1, 4]), &[2]).unwrap() - 4f64.ln()).abs() < 1e-6);
    assert!(matches!(cross_entropy(&Tensor::zeros(&[1, 4]), &[5]), Err(Error::Validation(_))));
}

#[test]
fn train_mode_batch_norm_absorbs_input_scale() {
    let cfg = ModelConfig {
        dropout_rate: 0.0,
        ..ModelConfig::desk(4, 32, 2)
    };
    let params = init_params(&cfg, 2).unwrap();
    let mut r = rng(2);
    let x = rand_vec(&mut r, 5 * 4 * 32, 1.0);
    let scaled: Vec<f64> = x.iter().map(|v| 7.5 * v).collect();
    let mode = Mode::Train { dropout_seed: 0 };
    let (a, _) = forward(&params, &cfg, &tensor(&[5, 4, 32], &x), mode).unwrap();
    let (b, _) = forward(&params, &cfg, &tensor(&[5, 4, 32], &scaled), mode).unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() < 1e-4, "{p} vs {q}");
    }
}

#[test]
fn eval_forward_is_bit_identical_across_calls() {
    let cfg = ModelConfig::desk(8, 512, 4);
    let params = init_params(&cfg, 6).unwrap();
    let (x, _) = small_set().full_batch().unwrap();
    let a = predict_logits(&params, &cfg, &x).unwrap();
    let b = predict_logits(&params, &cfg, &x).unwrap();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn init_is_deterministic_and_within_fan_in_bound() {
    let cfg = ModelConfig::desk(8, 512, 4);
    let a = init_params(&cfg, 1).unwrap();
    assert_eq!(a, init_params(&cfg, 1).unwrap());
    assert_ne!(a, init_params(&cfg, 2).unwrap());
    let fan_in = cfg.temporal_kernel_len as f32;
    let bound = (6.0 / fan_in).sqrt();
    assert!(a.slot(ParamSlot::TemporalConv).data().iter().all(|v| v.abs() <= bound));
    assert!(a.slot(ParamSlot::Bn1Var).data().iter().all(|&v| v == 1.0));
}
