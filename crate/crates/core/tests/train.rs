mod common;

use gnnd_core::autodiff::{gradient_check, Tape};
use gnnd_core::graph::{Batch, BatchLimits, Graph};
use gnnd_core::models::{Arch, Heads, Model, ModelConfig};
use gnnd_core::nn::Ctx;
use gnnd_core::noise::{NoiseKind, NoiseSpec};
use gnnd_core::params::{Bound, ParamStore};
use gnnd_core::train::{
    checkpoint_load, checkpoint_save, evaluate, fit_atomref, lr_schedule, train_step, Normalizer, ScheduleSpec, Task,
    TrainConfig, TrainState,
};
use gnnd_core::{Error, Tensor};

use common::{point_cloud, rng};

fn small_gns() -> ModelConfig {
    let mut c = ModelConfig::new(Arch::Gns);
    c.num_layers = 2;
    c.group_size = Some(1);
    c.latent_dim = 8;
    c.mlp_hidden = 8;
    c.featurize.embed_dim = 4;
    c.featurize.num_rbf = 4;
    c
}

fn dataset(n: usize, seed: u64) -> Vec<Graph> {
    (0..n).map(|i| point_cloud(seed + i as u64, 4 + i % 3, 4)).collect()
}

fn cfg(lambda: f64, sigma: f64) -> TrainConfig {
    TrainConfig {
        schedule: ScheduleSpec::constant(1e-3, 100),
        noise: NoiseSpec {
            kind: if sigma > 0.0 {
                NoiseKind::GaussianPositions
            } else {
                NoiseKind::None
            },
            sigma,
            lambda,
            predict_differences: true,
            ..NoiseSpec::default()
        },
        cutoff: Some(2.5),
        ..TrainConfig::default()
    }
}

fn with_counts(counts: &[usize], target: f64) -> Graph {
    let mut types = Vec::new();
    for (t, &c) in counts.iter().enumerate() {
        types.extend(std::iter::repeat_n(t as f64, c));
    }
    let n = types.len();
    let mut g = point_cloud(0, n, 1);
    g.node_features = Tensor::new([n, 1], types).unwrap();
    g.graph_target = Some(vec![target]);
    g
}

#[test]
fn atomref_exact_fit_and_round_trip() {
    let coeffs = [1.5, -0.25, 3.0];
    let rows = [[1, 0, 2], [2, 1, 0], [0, 3, 1], [1, 1, 1], [4, 0, 1]];
    let graphs: Vec<Graph> = rows
        .iter()
        .map(|r| {
            let y = r.iter().zip(&coeffs).map(|(c, w)| *c as f64 * w).sum();
            with_counts(r, y)
        })
        .collect();
    let w = fit_atomref(&graphs, 0, 3).unwrap();
    for (a, b) in w.iter().zip(&coeffs) {
        assert!((a - b).abs() < 1e-9);
    }
    for g in &graphs {
        let reference = gnnd_core::train::reference_value(g, &w).unwrap();
        let resid = g.graph_target.as_ref().unwrap()[0] - reference;
        assert!(resid.abs() < 1e-9);
        assert!((resid + reference - g.graph_target.as_ref().unwrap()[0]).abs() < 1e-9);
    }
}

#[test]
fn atomref_single_type() {
    let graphs: Vec<Graph> = (1..5).map(|c| with_counts(&[c], 2.0 * c as f64)).collect();
    let w = fit_atomref(&graphs, 0, 1).unwrap();
    assert!((w[0] - 2.0).abs() < 1e-12);
}

#[test]
fn atomref_rank_deficiency() {
    let graphs = vec![
        with_counts(&[1, 1], 1.0),
        with_counts(&[2, 2], 2.0),
        with_counts(&[3, 3], 3.0),
    ];
    assert!(matches!(fit_atomref(&graphs, 0, 2), Err(Error::Fit(_))));
    assert!(matches!(fit_atomref(&graphs[..1], 0, 2), Err(Error::Fit(_))));
}

fn reference_model() -> (Model, ParamStore) {
    let mut c = small_gns();
    c.reference_energy = true;
    let mut store = ParamStore::new();
    let m = Model::build(&c, &mut store, &mut rng(3)).unwrap();
    (m, store)
}

fn reference_of(model: &Model, store: &ParamStore, g: &Graph) -> f64 {
    let Model::Gns(m) = model else { unreachable!() };
    let tape = Tape::new();
    let cx = Ctx::new(&tape, store, false);
    m.reference(&cx, &Batch::from_graphs(std::slice::from_ref(g)).unwrap())
        .unwrap()
        .unwrap()
        .item()
}

#[test]
fn reference_energy_properties() {
    let (model, mut store) = reference_model();
    let g = with_counts(&[2, 1, 0, 1], 0.0);
    let gg = with_counts(&[4, 2, 0, 2], 0.0);
    let a = reference_of(&model, &store, &g);
    let b = reference_of(&model, &store, &gg);
    assert!((b - 2.0 * a).abs() < 1e-12);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with("gns/reference"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    assert_eq!(reference_of(&model, &store, &g), 0.0);
}

#[test]
fn reference_energy_gradient() {
    let (model, store) = reference_model();
    let Model::Gns(m) = &model else { unreachable!() };
    let batch = Batch::from_graphs(&[with_counts(&[2, 1, 1, 1], 0.0), with_counts(&[1, 0, 3, 0], 0.0)]).unwrap();
    let err = gradient_check(
        |tape, vars| {
            let cx = Ctx::with_bound(tape, Bound::from_vars(vars.to_vec()), false);
            m.reference(&cx, &batch)?.unwrap().square()?.sum()
        },
        &store.tensors(),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn plain_step_has_zero_aux_and_matches_independent_mse() {
    let data = dataset(6, 10);
    let c = cfg(0.0, 0.0);
    let mut mc = small_gns();
    mc.heads = Heads::GraphScalar;
    let (model, mut state) = TrainState::init(&mc, &c, 1, &data).unwrap();
    let before = state.params.clone();
    let rec = train_step(&model, &mut state, &data, &c).unwrap();
    assert_eq!(rec.aux, 0.0);
    assert_eq!(state.step, 1);

    let batch = Batch::from_graphs(&data).unwrap();
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &before, true);
    let out = model.forward(&cx, &batch).unwrap().graph().unwrap().value();
    let mut sq = 0.0;
    for (i, g) in data.iter().enumerate() {
        let z = state.normalizer.normalize(g.graph_target.as_ref().unwrap())[0];
        sq += (out.get2(i, 0) - z).powi(2);
    }
    assert!((rec.primary - sq / data.len() as f64).abs() < 1e-12);
}

#[test]
fn steps_with_aux_loss_decrease_training_loss() {
    let data = dataset(4, 20);
    let c = cfg(0.1, 0.0);
    let (model, mut state) = TrainState::init(&small_gns(), &c, 2, &data).unwrap();
    let l0 = train_step(&model, &mut state, &data, &c).unwrap().total;
    let l1 = train_step(&model, &mut state, &data, &c).unwrap().total;
    let l2 = train_step(&model, &mut state, &data, &c).unwrap().total;
    assert!(l1 < l0 && l2 < l1, "{l0} {l1} {l2}");
}

/// Reference: gradients from the tape, Adam written out directly.
#[test]
fn plain_step_matches_reference_adam() {
    let data = dataset(3, 30);
    let mut c = cfg(0.0, 0.0);
    c.intermediate_losses = false;
    c.schedule = ScheduleSpec {
        warmup_steps: 2,
        warmup_start_lr: 1e-4,
        max_lr: 2e-3,
        cosine_cycle_length: 10,
    };
    let (model, mut state) = TrainState::init(&small_gns(), &c, 4, &data).unwrap();
    let mut w: Vec<Vec<f64>> = state.params.tensors().iter().map(|t| t.data().to_vec()).collect();
    let mut m: Vec<Vec<f64>> = w.iter().map(|x| vec![0.0; x.len()]).collect();
    let mut v = m.clone();
    let batch = Batch::from_graphs(&data).unwrap();
    let targets: Vec<Vec<f64>> = data
        .iter()
        .map(|g| state.normalizer.normalize(g.graph_target.as_ref().unwrap()))
        .collect();
    let target = Tensor::from_rows(&targets);
    for t in 1..=3u64 {
        let mut store = state.params.clone();
        let ids: Vec<_> = store.ids().collect();
        for id in &ids {
            store.get_mut(*id).data_mut().copy_from_slice(&w[id.index()]);
        }
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, true);
        let out = model.forward(&cx, &batch).unwrap().graph().unwrap();
        let loss = out
            .sub(tape.constant(target.clone()))
            .unwrap()
            .square()
            .unwrap()
            .mean()
            .unwrap();
        let grads = tape.backward(loss).unwrap().into_params(store.len());
        let lr = lr_schedule(t - 1, &c.schedule);
        for (i, g) in grads.iter().enumerate() {
            let g = g.as_ref().map(|g| g.data().to_vec()).unwrap_or(vec![0.0; w[i].len()]);
            for k in 0..w[i].len() {
                m[i][k] = 0.9 * m[i][k] + 0.1 * g[k];
                v[i][k] = 0.95 * v[i][k] + 0.05 * g[k] * g[k];
                let mh = m[i][k] / (1.0 - 0.9f64.powi(t as i32));
                let vh = v[i][k] / (1.0 - 0.95f64.powi(t as i32));
                w[i][k] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        train_step(&model, &mut state, &data, &c).unwrap();
    }
    for (a, b) in state.params.tensors().iter().zip(&w) {
        for (x, y) in a.data().iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

fn run_steps(seed: u64, steps: usize) -> TrainState {
    let data = dataset(5, 40);
    let c = cfg(0.1, 0.05);
    let (model, mut state) = TrainState::init(&small_gns(), &c, seed, &data).unwrap();
    for _ in 0..steps {
        train_step(&model, &mut state, &data, &c).unwrap();
    }
    state
}

#[test]
fn training_is_deterministic() {
    assert_eq!(run_steps(7, 3), run_steps(7, 3));
    assert_ne!(run_steps(7, 3).params, run_steps(8, 3).params);
}

#[test]
fn evaluation_properties() {
    let data = dataset(5, 50);
    let c = cfg(0.1, 0.05);
    let (model, mut state) = TrainState::init(&small_gns(), &c, 9, &data).unwrap();
    for _ in 0..4 {
        train_step(&model, &mut state, &data, &c).unwrap();
    }
    let limits = BatchLimits::default();
    let a = evaluate(&model, &state, &data, &c, limits, true).unwrap();
    let b = evaluate(&model, &state, &data, &c, limits, true).unwrap();
    assert_eq!(a, b);
    let raw = evaluate(&model, &state, &data, &c, limits, false).unwrap();
    assert_ne!(a.get("mae"), raw.get("mae"));
    for key in [
        "loss", "mae", "ewt", "std_mae", "log_mae", "node_mae", "adwt", "aux_loss",
    ] {
        assert!(a.get(key).is_some(), "missing {key}");
    }
    assert!(evaluate(&model, &state, &[], &c, limits, true).is_err());
}

#[test]
fn perfect_prediction_has_zero_mae() {
    let mut data = dataset(4, 60);
    for g in &mut data {
        g.graph_target = Some(vec![1.25]);
    }
    let c = cfg(0.0, 0.0);
    let mut mc = small_gns();
    mc.heads = Heads::GraphScalar;
    let (model, mut state) = TrainState::init(&mc, &c, 1, &data).unwrap();
    let ids: Vec<_> = state
        .params
        .iter()
        .filter(|(_, p)| p.name.contains("_linear"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        state.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let r = evaluate(&model, &state, &data, &c, BatchLimits::default(), false).unwrap();
    assert_eq!(r.get("mae"), Some(0.0));
    assert_eq!(r.get("ewt"), Some(1.0));
}

#[test]
fn normalization_round_trip() {
    let data = dataset(6, 70);
    let n = Normalizer::fit(&data, Task::GraphRegression, 1, None, &NoiseSpec::default()).unwrap();
    for g in &data {
        let y = g.graph_target.as_ref().unwrap();
        let back = n.denormalize(&n.normalize(y));
        assert!((back[0] - y[0]).abs() < 1e-12);
    }
    // raw-scale MAE is the normalized MAE times the target std
    let z: Vec<f64> = data
        .iter()
        .map(|g| n.normalize(g.graph_target.as_ref().unwrap())[0] + 0.1)
        .collect();
    let raw_mae: f64 = data
        .iter()
        .zip(&z)
        .map(|(g, zi)| (n.denormalize(&[*zi])[0] - g.graph_target.as_ref().unwrap()[0]).abs())
        .sum::<f64>()
        / data.len() as f64;
    assert!((raw_mae - 0.1 * n.graph_std[0]).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(5, 80);
    let mut c = cfg(0.1, 0.05);
    c.use_atomref = false;
    let (model, mut state) = TrainState::init(&small_gns(), &c, 11, &data).unwrap();
    for _ in 0..2 {
        train_step(&model, &mut state, &data, &c).unwrap();
    }
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    checkpoint_save(&state, &p1).unwrap();
    let loaded = checkpoint_load(&p1, &state).unwrap();
    assert_eq!(loaded, state);
    checkpoint_save(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let mut resumed = loaded;
    let mut straight = state.clone();
    for _ in 0..3 {
        let a = train_step(&model, &mut resumed, &data, &c).unwrap();
        let b = train_step(&model, &mut straight, &data, &c).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(resumed, straight);
}

#[test]
fn checkpoint_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(3, 90);
    let c = cfg(0.0, 0.0);
    let (_, state) = TrainState::init(&small_gns(), &c, 1, &data).unwrap();
    let p = dir.path().join("s.ckpt");
    checkpoint_save(&state, &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(checkpoint_load(&p, &state), Err(Error::Checkpoint(_))));
    let mut wrong = bytes.clone();
    wrong[4] = 99;
    std::fs::write(&p, &wrong).unwrap();
    assert!(matches!(checkpoint_load(&p, &state), Err(Error::Checkpoint(m)) if m.contains("version")));
    let mut bad_magic = bytes;
    bad_magic[0] = b'X';
    std::fs::write(&p, &bad_magic).unwrap();
    assert!(matches!(checkpoint_load(&p, &state), Err(Error::Checkpoint(_))));
}

#[test]
fn config_errors_are_collected() {
    let data = dataset(3, 95);
    let mut c = cfg(0.1, -1.0);
    c.noise.kind = NoiseKind::GaussianPositions;
    c.ema_decay = 1.5;
    let mut mc = small_gns();
    mc.heads = Heads::GraphScalar;
    match TrainState::init(&mc, &c, 0, &data) {
        Err(Error::Config(bad)) => assert!(bad.len() >= 3, "{bad:?}"),
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
}
