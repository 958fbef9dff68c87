mod common;

use std::fs;
use std::path::Path;

use awae::baselines::{train_mult_dae, train_mult_vae, VaeConfig};
use awae::checkpoint::{self, Checkpoint, ModelKind};
use awae::data::{ClickMatrix, SplitConfig, SynthConfig};
use awae::metrics::rank_top;
use awae::nn::{backward, forward, EncodeOptions};
use awae::objective::{total_loss, CostKind, LossInputs, ObjectiveConfig};
use awae::optim::Adam;
use awae::trainer::{train, AwaeLearner, Learner, StepLoss, TrainConfig, TrainRngs};
use awae::Error;
use common::{grad_instance, instance_loss, synthetic_split, toy_config};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn tiny_step_does_not_increase_batch_loss() {
    for kind in [CostKind::Multinomial, CostKind::MultinomialNonclick, CostKind::Mil] {
        for seed in 0..10 {
            let inst = grad_instance(kind, seed);
            let before = instance_loss(&inst, &inst.params);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let tape = forward(&inst.params, &inst.x, &EncodeOptions::eval(), &mut rng).unwrap();
            let loss = total_loss(
                &LossInputs {
                    x: &inst.x,
                    tape: &tape,
                    codes: Some((&inst.s, &inst.a)),
                    prior: Some(&inst.prior),
                },
                &inst.cfg,
            )
            .unwrap();
            let grads = backward(&inst.params, &tape, &loss.d_output, &loss.d_z).unwrap();
            let mut params = inst.params.clone();
            Adam::new(1e-6, (0.9, 0.999), 1e-8).step(&mut params.tensors_mut(), &grads.tensors());
            let after = instance_loss(&inst, &params);
            assert!(after <= before + 1e-8, "{kind} seed {seed}: {before} -> {after}");
        }
    }
}

#[test]
fn plain_autoencoder_memorizes_three_users() {
    let x = ClickMatrix::from_rows(4, &[vec![0u32, 1], vec![2], vec![1, 3]]).unwrap();
    let cfg = TrainConfig {
        batch_size: 3,
        latent_dim: 2,
        hidden_dim: 8,
        objective: ObjectiveConfig::default().unregularized(),
        input_dropout: 0.0,
        noise_std: 0.0,
        seed: 5,
        ..Default::default()
    };
    let mut learner = AwaeLearner::new(4, &cfg).unwrap();
    let mut rngs = TrainRngs::new(cfg.seed);
    let dense = x.dense_rows(&[0, 1, 2]);
    let mut reached = None;
    for epoch in 1..=500 {
        learner.train_step(&dense, epoch, &mut rngs).unwrap();
        let scores = learner.params.predict_proba(&dense).unwrap();
        let all_hit = (0..3).all(|u| {
            let row: Vec<f64> = scores.row(u).iter().copied().collect();
            x.contains(u, rank_top(&row, &[], 1)[0])
        });
        if all_hit {
            reached = Some(epoch);
            break;
        }
    }
    assert!(reached.is_some(), "train Recall@1 never reached 1.0");
}

fn epoch_means(steps: &[awae::trainer::StepRecord], epochs: usize) -> Vec<f64> {
    (1..=epochs)
        .map(|e| {
            let v: Vec<f64> = steps.iter().filter(|s| s.epoch == e).map(|s| s.loss.total()).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect()
}

#[test]
fn loss_decreases_over_first_epochs() {
    let sp = synthetic_split(0);
    let cfg = TrainConfig {
        batch_size: 40,
        max_epochs: 5,
        patience: 100,
        ..toy_config(sp.train.n_users(), 0)
    };
    let (_, _, log) = train(&sp.train, &sp.val, &cfg, None).unwrap();
    let means = epoch_means(&log.steps, 5);
    assert!(means.windows(2).all(|w| w[1] < w[0]), "epoch mean losses {means:?}");
    // rows ordered by (epoch, step)
    assert!(log.steps.windows(2).all(|w| (w[0].epoch, w[0].step) < (w[1].epoch, w[1].step)));
    assert!(log.steps.iter().all(|s| s.admm_s.is_some() && s.admm_a.is_some()));
}

fn files_under(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn identical_seeds_write_identical_runs() {
    let syn = awae::data::synthesize(&SynthConfig {
        n_users: 60,
        n_items: 30,
        n_clusters: 3,
        clicks_per_user: 8,
        seed: 2,
    })
    .unwrap();
    let sp = awae::data::split(&syn.matrix, &SplitConfig::default()).unwrap();
    let cfg = TrainConfig {
        batch_size: 16,
        latent_dim: 4,
        hidden_dim: 12,
        max_epochs: 6,
        seed: 8,
        ..Default::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(&sp.train, &sp.val, &cfg, Some(a.path())).unwrap();
    train(&sp.train, &sp.val, &cfg, Some(b.path())).unwrap();
    let files = files_under(a.path());
    assert_eq!(files, files_under(b.path()));
    assert!(files.contains(&"log.csv".to_string()) && files.contains(&"best".to_string()));
    for f in files.iter().filter(|f| f.as_str() != "timing.csv") {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let Checkpoint::Mlp { kind, dictionary, .. } = checkpoint::load(a.path()).unwrap() else {
        panic!("expected an MLP checkpoint");
    };
    assert_eq!(kind, ModelKind::Awae);
    assert_eq!(dictionary.unwrap().shape(), (2, 4));
}

#[test]
fn run_log_matches_returned_log() {
    let sp = synthetic_split(4);
    let cfg = TrainConfig {
        max_epochs: 3,
        ..toy_config(sp.train.n_users(), 4)
    };
    let dir = tempfile::tempdir().unwrap();
    let (_, _, log) = train(&sp.train, &sp.val, &cfg, Some(dir.path())).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join("log.csv")).unwrap(), log.steps_csv());
    assert_eq!(fs::read_to_string(dir.path().join("admm.csv")).unwrap(), log.admm_csv());
    assert_eq!(fs::read_to_string(dir.path().join("val.csv")).unwrap(), log.validation_csv());
}

#[test]
fn zero_weight_awae_is_mult_dae() {
    let sp = synthetic_split(6);
    let base = TrainConfig {
        max_epochs: 4,
        ..toy_config(sp.train.n_users(), 6)
    };
    let zero = TrainConfig {
        objective: base.objective.unregularized(),
        ..base.clone()
    };
    let (p_awae, _, log_awae) = train(&sp.train, &sp.val, &zero, None).unwrap();
    let (p_dae, log_dae) = train_mult_dae(&sp.train, &sp.val, &base, None).unwrap();
    let bits = |l: &awae::trainer::TrainLog| l.step_totals().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&log_awae), bits(&log_dae));
    assert_eq!(p_awae, p_dae);
}

#[test]
fn vae_trains_and_anneals() {
    let sp = synthetic_split(2);
    let cfg = VaeConfig {
        train: TrainConfig {
            batch_size: 40,
            max_epochs: 3,
            ..toy_config(sp.train.n_users(), 2)
        },
        anneal_steps: 8,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (params, log) = train_mult_vae(&sp.train, &sp.val, &cfg, Some(dir.path())).unwrap();
    let betas: Vec<f64> = log
        .steps
        .iter()
        .map(|s| match s.loss {
            StepLoss::Vae { beta, .. } => beta,
            StepLoss::Awae(_) => panic!("VAE logged aWAE losses"),
        })
        .collect();
    assert_eq!(betas[0], 0.0);
    assert!(betas.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(*betas.last().unwrap(), 0.2);
    assert!(fs::read_to_string(dir.path().join("log.csv")).unwrap().starts_with("epoch,step,reconstruction,kl,beta,total\n"));
    let loaded = checkpoint::load(dir.path()).unwrap();
    assert_eq!(loaded.kind(), ModelKind::Vae);
    if log.best_epoch == Some(log.epochs.len()) {
        assert_eq!(loaded, Checkpoint::Vae(params));
    }
}

#[test]
fn runaway_learning_rate_is_reported() {
    let sp = synthetic_split(1);
    let cfg = TrainConfig {
        lr: 1e300,
        max_epochs: 20,
        ..toy_config(sp.train.n_users(), 1)
    };
    let err = train(&sp.train, &sp.val, &cfg, None).unwrap_err();
    assert!(err.is_data_error(), "{err}");
    assert!(matches!(err, Error::Diverged { .. } | Error::NonFinite(_)), "{err:?}");
}
