mod common;

use common::{pairs, tiny_codec, tiny_model};
use sotsep::error::Error;
use sotsep::model::{ArModel, Ctx, NarModel};
use sotsep::numcore::Graph;
use sotsep::synth::Split;
use sotsep::trainer::{
    resume, train_ar, train_nar, TrainConfig, TrainState, TrainTarget, LOSS_FILE, STATE_FILE,
};

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        base_lr: 3e-3,
        batch_size: 2,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn fixed_seed_gives_identical_loss_curves() {
    let codec = tiny_codec();
    let data = pairs(&codec, 6, Split::Train);
    let run = || {
        let mut m = ArModel::new(tiny_model(&codec)).unwrap();
        train_ar(&mut m, &data, &[], &cfg(2), None).unwrap().losses()
    };
    let a = run();
    assert_eq!(a.len(), 6);
    assert_eq!(a, run());
}

#[test]
fn lr_trajectory_follows_schedule() {
    let codec = tiny_codec();
    let data = pairs(&codec, 4, Split::Train);
    let c = cfg(3);
    let mut m = NarModel::new(tiny_model(&codec)).unwrap();
    let rep = train_nar(&mut m, &data, &[], &c, None).unwrap();
    let sched = c.schedule(data.len()).unwrap();
    for row in &rep.log {
        assert_eq!(row.lr, sched.lr_at(row.step));
    }
}

#[test]
fn resumed_run_replays_uninterrupted_losses() {
    let codec = tiny_codec();
    let data = pairs(&codec, 6, Split::Train);
    let eval = pairs(&codec, 2, Split::Eval);
    let dir = tempfile::tempdir().unwrap();
    let full = {
        let mut m = NarModel::new(tiny_model(&codec)).unwrap();
        train_nar(&mut m, &data, &eval, &cfg(5), None).unwrap()
    };
    let first = TrainConfig {
        stop_after: Some(4),
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..cfg(5)
    };
    let mut m = NarModel::new(tiny_model(&codec)).unwrap();
    train_nar(&mut m, &data, &eval, &first, None).unwrap();
    assert!(dir.path().join(LOSS_FILE).exists());

    let state = resume(dir.path()).unwrap();
    assert_eq!(state.global_step, 4);
    let mut fresh = NarModel::new(tiny_model(&codec)).unwrap();
    let second = TrainConfig {
        stop_after: Some(14),
        ..first
    };
    let rep = train_nar(&mut fresh, &data, &eval, &second, Some(state)).unwrap();
    assert_eq!(rep.log, full.log[..14].to_vec());
}

#[test]
fn resume_errors() {
    let missing = resume(std::path::Path::new("/nonexistent/ckpt"));
    assert!(matches!(missing, Err(Error::Missing(_))));

    let codec = tiny_codec();
    let data = pairs(&codec, 2, Split::Train);
    let dir = tempfile::tempdir().unwrap();
    let c = TrainConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..cfg(1)
    };
    let mut m = ArModel::new(tiny_model(&codec)).unwrap();
    train_ar(&mut m, &data, &[], &c, None).unwrap();
    let path = dir.path().join(STATE_FILE);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(TrainState::load(&path).is_err());

    // a state of the wrong kind is refused
    std::fs::write(&path, &bytes).unwrap();
    let st = resume(dir.path()).unwrap();
    let mut nar = NarModel::new(tiny_model(&codec)).unwrap();
    assert!(train_nar(&mut nar, &data, &[], &cfg(1), Some(st)).is_err());
}

#[test]
fn nar_loss_ignores_special_positions() {
    let codec = tiny_codec();
    let mut data = pairs(&codec, 1, Split::Train);
    let m = NarModel::new(tiny_model(&codec)).unwrap();
    let vocab = m.config.vocab();
    let loss = |pairs: &[sotsep::trainer::TrainPair]| {
        let mut g = Graph::inference(&m.store);
        let (l, n) = m.pair_loss(&mut g, &pairs[0], 2, &mut Ctx::inference()).unwrap();
        (g.value(l).item(), n)
    };
    let before = loss(&data);
    let specials: Vec<usize> = data[0].sot.orders[0]
        .iter()
        .enumerate()
        .filter(|(_, &c)| vocab.is_special(c))
        .map(|(t, _)| t)
        .collect();
    assert_eq!(specials.len(), 3);
    for &t in &specials {
        data[0].sot.orders[2][t] = 1;
    }
    assert_eq!(loss(&data), before);
}

#[test]
fn every_nar_table_gets_gradient_in_first_epoch() {
    let codec = tiny_codec();
    let data = pairs(&codec, 8, Split::Train);
    let mut m = NarModel::new(tiny_model(&codec)).unwrap();
    let c = TrainConfig { batch_size: 1, ..cfg(1) };
    let rep = train_nar(&mut m, &data, &[], &c, None).unwrap();
    for j in 0..m.config.num_orders - 1 {
        let name = format!("nar.theta{j}");
        let (_, norm) = rep.first_epoch_grad_norms.iter().find(|(n, _)| *n == name).unwrap();
        assert!(*norm > 0.0, "{name}");
    }
}

fn dataset_loss<M: TrainTarget>(m: &M, data: &[sotsep::trainer::TrainPair], order: usize) -> f64 {
    let (mut total, mut count) = (0.0, 0);
    for p in data {
        let mut g = Graph::inference(m.store());
        let (l, n) = m.pair_loss(&mut g, p, order, &mut Ctx::inference()).unwrap();
        total += g.value(l).item() * n as f64;
        count += n;
    }
    total / count as f64
}

#[test]
fn each_early_epoch_reduces_loss() {
    let codec = tiny_codec();
    let data = pairs(&codec, 8, Split::Train);
    let mut m = ArModel::new(tiny_model(&codec)).unwrap();
    let spe = 4;
    let mut state = None;
    let mut prev = dataset_loss(&m, &data, 0);
    for e in 1..=3 {
        let c = TrainConfig {
            stop_after: Some(spe * e),
            ..cfg(10)
        };
        state = Some(train_ar(&mut m, &data, &[], &c, state).unwrap().state);
        let now = dataset_loss(&m, &data, 0);
        assert!(now < prev, "epoch {e}: {prev} -> {now}");
        prev = now;
    }
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let codec = tiny_codec();
    let data = pairs(&codec, 2, Split::Train);
    let mut m = ArModel::new(tiny_model(&codec)).unwrap();
    let id = m.store.id("dec.out_proj.b").unwrap();
    m.store.get_mut(id).data_mut()[0] = f64::NAN;
    let err = train_ar(&mut m, &data, &[], &cfg(1), None).unwrap_err();
    assert!(err.to_string().contains("step 0"), "{err}");
}
