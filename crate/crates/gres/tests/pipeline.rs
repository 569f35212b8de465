use gres::evaluate::{evaluate, Predictor};
use gres::train::{epoch_order, train_until, LogEvent, TrainState};
use gres::{Error, RunConfig};
use gres_core::model::Model;
use gres_core::synth::{generate_dataset, SampleRecord, Split};
use proptest::prelude::*;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.image_size = 32;
    cfg.model.channels = 8;
    cfg.model.lang_channels = 8;
    cfg.model.decoder_layers = 1;
    cfg.model.blocks_per_layer = 1;
    cfg.model.main_depth = 1;
    cfg.model.nt_depth = 1;
    cfg.model.nt_hidden = 8;
    cfg.data.train_count = 8;
    cfg.data.val_count = 20;
    cfg.train.epochs = 1;
    cfg.train.batch_size = 4;
    cfg
}

fn val(cfg: &RunConfig) -> Vec<SampleRecord> {
    generate_dataset(&cfg.dataset_spec(), cfg.data.val_count, cfg.data.seed, Split::Val).unwrap()
}

#[test]
fn ground_truth_predictor_scores_perfectly() {
    let r = evaluate(Predictor::GroundTruth, &val(&tiny())).unwrap();
    assert_eq!((r.giou, r.ciou), (1.0, 1.0));
    assert_eq!((r.pr07, r.pr08, r.pr09), (Some(1.0), Some(1.0), Some(1.0)));
    assert_eq!((r.n_acc, r.t_acc), (Some(1.0), Some(1.0)));
}

#[test]
fn empty_predictor_conventions() {
    let samples = val(&tiny());
    let nt = samples.iter().filter(|s| s.nt_flag).count();
    assert!(nt > 0 && nt < samples.len());
    let r = evaluate(Predictor::Empty, &samples).unwrap();
    assert!((r.giou - nt as f64 / samples.len() as f64).abs() < 1e-12);
    assert_eq!(r.ciou, 0.0);
    assert_eq!((r.n_acc, r.t_acc), (Some(1.0), Some(0.0)));
    assert_eq!(r.pr07, Some(0.0));
    assert_eq!(r.n_no_target, nt as u64);
}

#[test]
fn image_size_mismatch_is_an_error() {
    let mut cfg = tiny();
    let model = Model::<f32>::new(cfg.model.clone()).unwrap();
    cfg.model.image_size = 64;
    assert!(matches!(evaluate(Predictor::Model(&model), &val(&cfg)), Err(Error::Invalid(_))));
}

#[test]
fn one_small_step_reduces_the_sample_loss() {
    let cfg = tiny();
    let s = &val(&cfg).into_iter().find(|s| !s.nt_flag).unwrap();
    let mut model = Model::<f64>::new(cfg.model.clone()).unwrap();
    let img = s.image_floats::<f64>();
    let before = model.sample_loss(&img, &s.tokens, &s.gt_mask, s.nt_flag).unwrap().total;
    let mut grads = model.store.zeros_like();
    model.accumulate_gradient(&img, &s.tokens, &s.gt_mask, s.nt_flag, &mut grads, 1.0).unwrap();
    for (p, g) in model.store.iter_mut().zip(grads.iter()) {
        for (v, d) in p.value.data_mut().iter_mut().zip(g.value.data()) {
            *v -= 1e-4 * d;
        }
    }
    let after = model.sample_loss(&img, &s.tokens, &s.gt_mask, s.nt_flag).unwrap().total;
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn non_finite_parameters_abort_with_the_sample_id() {
    let cfg = tiny();
    let train = generate_dataset(&cfg.dataset_spec(), cfg.data.train_count, cfg.data.seed, Split::Train).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    state.model.store.iter_mut().next().unwrap().value.data_mut()[0] = f32::NAN;
    let err = train_until(&mut state, &cfg, &train, None, u64::MAX, &mut |_| {}).unwrap_err();
    match err {
        Error::NonFiniteLoss { step, sample_id, .. } => {
            assert_eq!(step, 0);
            assert!(train.iter().any(|s| s.id == sample_id));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn log_records_follow_the_schedule() {
    let mut cfg = tiny();
    cfg.train.epochs = 2;
    cfg.train.log_every = 1;
    cfg.train.eval_every = 1;
    let train = generate_dataset(&cfg.dataset_spec(), cfg.data.train_count, cfg.data.seed, Split::Train).unwrap();
    let v = val(&cfg);
    let mut state = TrainState::new(&cfg).unwrap();
    let mut events = Vec::new();
    train_until(&mut state, &cfg, &train, Some(&v), u64::MAX, &mut |e| events.push(e.clone())).unwrap();
    let steps: Vec<u64> = events.iter().filter_map(|e| if let LogEvent::Step { step, .. } = e { Some(*step) } else { None }).collect();
    assert_eq!(steps, vec![0, 1, 2, 3]);
    let evals = events.iter().filter(|e| matches!(e, LogEvent::Eval { .. })).count();
    assert_eq!(evals, 2);
    assert_eq!(state.step, 4);
}

proptest! {
    #[test]
    fn epoch_order_is_a_permutation(seed in any::<u64>(), epoch in 0u64..100, n in 0usize..200) {
        let mut order = epoch_order(seed, epoch, n);
        order.sort_unstable();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
    }
}
