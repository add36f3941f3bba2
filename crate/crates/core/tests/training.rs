use diffmoe::harness::{load_checkpoint, save_checkpoint, synth_generate, train, RunConfig};
use diffmoe::{Error, Tensor};

fn smoke_config() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.n_samples = 8;
    cfg.train_steps = 50;
    cfg
}

#[test]
fn fifty_steps_lower_the_loss() {
    let cfg = smoke_config();
    assert_eq!((cfg.width, cfg.depth, cfg.head_experts), (16, 1, 4));
    let data = synth_generate(&cfg.synthetic()).unwrap();
    let out = train(&cfg, &data, None).unwrap();
    assert_eq!(out.losses.len(), 50);
    assert!(out.losses[49].1 < out.losses[0].1, "{:?}", out.losses);
}

#[test]
fn same_seed_same_curve() {
    let mut cfg = smoke_config();
    cfg.train_steps = 15;
    let data = synth_generate(&cfg.synthetic()).unwrap();
    let a = train(&cfg, &data, None).unwrap();
    let b = train(&cfg, &data, None).unwrap();
    assert_eq!(a.loss_csv(), b.loss_csv());
    assert_eq!(a.params, b.params);
    cfg.seed += 1;
    assert_ne!(train(&cfg, &data, None).unwrap().losses, a.losses);
}

#[test]
fn resume_continues_an_unbroken_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config();
    cfg.train_steps = 12;
    let data = synth_generate(&cfg.synthetic()).unwrap();
    let whole = train(&cfg, &data, None).unwrap();

    cfg.train_steps = 5;
    let first = train(&cfg, &data, None).unwrap();
    let path = dir.path().join("half.ckp");
    save_checkpoint(&first.params, &first.optimizer, &path).unwrap();
    cfg.train_steps = 12;
    let (params, optim) = load_checkpoint(&cfg, &path).unwrap();
    let rest = train(&cfg, &data, Some((params, optim.unwrap()))).unwrap();

    let joined: Vec<(usize, f64)> = first.losses.iter().chain(&rest.losses).copied().collect();
    assert_eq!(joined, whole.losses);
    assert_eq!(rest.params, whole.params);
}

#[test]
fn nan_loss_aborts_with_the_step() {
    let cfg = smoke_config();
    let mut data = synth_generate(&cfg.synthetic()).unwrap();
    data.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
    match train(&cfg, &data, None) {
        Err(Error::NonFiniteLoss { step }) => assert_eq!(step, 1),
        other => panic!("expected a non-finite loss error, got {:?}", other.map(|o| o.losses)),
    }

    let mut cfg = smoke_config();
    cfg.learning_rate = 1e12;
    cfg.momentum = 0.0;
    let data = synth_generate(&cfg.synthetic()).unwrap();
    match train(&cfg, &data, None) {
        Err(e @ Error::NonFiniteLoss { step }) => {
            assert!(step > 1 && e.is_numeric());
            assert!(e.to_string().contains(&step.to_string()), "{e}");
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.losses.len())),
    }
}

#[test]
fn checkpoint_from_another_shape_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let data = synth_generate(&cfg.synthetic()).unwrap();
    let mut short = cfg.clone();
    short.train_steps = 1;
    let out = train(&short, &data, None).unwrap();
    let path = dir.path().join("m.ckp");
    save_checkpoint(&out.params, &out.optimizer, &path).unwrap();

    let mut wider = cfg.clone();
    wider.width = 18;
    let err = load_checkpoint(&wider, &path).unwrap_err();
    assert!(!err.is_numeric());
    assert!(err.to_string().contains("lift_xt.weight"), "{err}");

    let wrong_channels = Tensor::zeros(&[4, 2, 256]);
    assert!(train(&cfg, &wrong_channels, None).is_err());
}
