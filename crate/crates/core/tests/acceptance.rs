//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `GNND_ACCEPTANCE_ONLY=1,4,5` runs a subset. The process exits 0 unless
//! `GNND_ACCEPTANCE_STRICT=1` is set, in which case any failure exits 1.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use gnnd_core::autodiff::{gradient_check, Tape};
use gnnd_core::featurize::{bessel_rbf, cell_invariants, CellBasis};
use gnnd_core::graph::{batch_indices, Batch, Graph};
use gnnd_core::harness::{run_experiment, setup_run, ExperimentConfig, RunSummary, METRICS_FILE};
use gnnd_core::metrics::{log_mae, mad, std_mae};
use gnnd_core::models::{Arch, Heads, Model, ModelConfig};
use gnnd_core::nn::Ctx;
use gnnd_core::noise::adjust_target;
use gnnd_core::params::{Bound, ParamStore};
use gnnd_core::synthetic::{generate_equilibrium_dataset, morse_energy, MorseParams, SyntheticSpec, SyntheticTask};
use gnnd_core::train::{checkpoint_load, checkpoint_save, ema_decay, lr_schedule, train_step, ScheduleSpec};
use gnnd_core::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde_json::{json, Value};

use common::{categorical, path_pairs, point_cloud, rng};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_err(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0);
    (var / xs.len() as f64).sqrt()
}

fn fmt_list(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

// ---------------------------------------------------------------- models

fn build(config: &ModelConfig, seed: u64) -> (Model, ParamStore) {
    let mut store = ParamStore::new();
    let model = Model::build(config, &mut store, &mut rng(seed)).unwrap();
    (model, store)
}

fn gns(layers: usize, group: usize) -> ModelConfig {
    let mut c = ModelConfig::new(Arch::Gns);
    c.num_layers = layers;
    c.group_size = Some(group);
    c.latent_dim = 8;
    c.mlp_hidden = 8;
    c.featurize.embed_dim = 4;
    c.featurize.num_rbf = 4;
    c
}

fn mpnn(layers: usize) -> ModelConfig {
    let mut c = ModelConfig::new(Arch::MpnnVn);
    c.num_layers = layers;
    c.latent_dim = 6;
    c.mlp_hidden = 6;
    c.node_vocab = 3;
    c.edge_vocab = 2;
    c.node_out = 3;
    c
}

fn gcn(layers: usize) -> ModelConfig {
    let mut c = ModelConfig::new(Arch::Gcn);
    c.num_layers = layers;
    c.latent_dim = 6;
    c.mlp_hidden = 6;
    c.node_vocab = 4;
    c
}

struct Out {
    graph: Tensor,
    nodes: Tensor,
    snapshots: Vec<Tensor>,
}

fn forward(model: &Model, store: &ParamStore, graphs: &[Graph]) -> Out {
    let batch = Batch::from_graphs(graphs).unwrap();
    let tape = Tape::new();
    let cx = Ctx::new(&tape, store, false);
    let out = model.forward(&cx, &batch).unwrap();
    Out {
        graph: out.graph().unwrap().value(),
        nodes: out.nodes().unwrap().value(),
        snapshots: out.latent.snapshots.iter().map(|v| v.value()).collect(),
    }
}

fn grad_error(config: ModelConfig, graphs: Vec<Graph>) -> Result<f64> {
    let (model, store) = build(&config, 21);
    let batch = Batch::from_graphs(&graphs)?;
    let n = batch.n_nodes() * config.node_out;
    let node_target = Tensor::new(
        [batch.n_nodes(), config.node_out],
        (0..n).map(|i| (i as f64 * 0.37).sin()).collect(),
    )?;
    gradient_check(
        |tape, vars| {
            let cx = Ctx::with_bound(tape, Bound::from_vars(vars.to_vec()), false);
            let out = model.forward(&cx, &batch)?;
            let mut loss = out.graph().unwrap().square()?.sum()?;
            let t = tape.constant(node_target.clone());
            loss = loss.add(out.nodes().unwrap().sub(t)?.square()?.mean()?)?;
            if let Some(e) = out.edges() {
                loss = loss.add(e.cross_entropy(&vec![0; e.rows()].into())?)?;
            }
            Ok(loss)
        },
        &store.tensors(),
        1e-5,
    )
}

fn criterion_1() -> Result<Verdict> {
    let mut g = gns(2, 1);
    g.heads = Heads::Both;
    let ring: Vec<(usize, usize)> = (0..6).map(|i| (i, (i + 1) % 6)).collect();
    let errs = [
        ("gns", grad_error(g, vec![point_cloud(31, 6, 4)])?),
        (
            "mpnn_vn",
            grad_error(mpnn(2), vec![categorical(32, 7, 3, 2, &path_pairs(7))])?,
        ),
        ("gcn", grad_error(gcn(2), vec![categorical(33, 6, 4, 1, &ring)])?),
    ];
    let pass = errs.iter().all(|(_, e)| *e < 1e-4);
    let detail = errs
        .iter()
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(Verdict::new(pass, format!("max relative error {detail} (tol 1e-4)")))
}

// ---------------------------------------------------------------- criterion 2

/// Random spanning tree plus `extra` distinct chords.
fn connected_pairs(seed: u64, n: usize, extra: usize) -> Vec<(usize, usize)> {
    let mut r = rng(seed);
    let mut pairs: Vec<(usize, usize)> = (1..n).map(|i| (r.random_range(0..i), i)).collect();
    while pairs.len() < n - 1 + extra {
        let (a, b) = (r.random_range(0..n), r.random_range(0..n));
        if a != b && !pairs.contains(&(a.min(b), a.max(b))) {
            pairs.push((a.min(b), a.max(b)));
        }
    }
    pairs
}

fn mpnn_run(seed: u64, noisy: bool, dir: &Path) -> Result<RunSummary> {
    let noise = if noisy {
        json!({"kind": "category_flip", "flip_rate": 0.05, "lambda": 0.1})
    } else {
        json!({"kind": "none"})
    };
    let v = json!({
        "seed": seed,
        "dataset": {"synthetic": {"task": "categorical", "num_graphs": MPNN_GRAPHS}, "seed": 100},
        "model": {
            "arch": "mpnn_vn", "num_layers": 16, "latent_dim": MPNN_LATENT, "mlp_hidden": MPNN_LATENT,
            "activation": "relu", "node_vocab": 3, "edge_vocab": 3, "graph_out": 2, "node_out": 3
        },
        "train": {
            "task": "graph_classification",
            "schedule": {"warmup_steps": 50, "warmup_start_lr": 1e-4, "max_lr": 1e-3, "cosine_cycle_length": MPNN_STEPS},
            "noise": noise
        },
        "batch": {"max_nodes": 1024, "max_edges": 4096, "max_graphs": 16},
        "max_steps": MPNN_STEPS,
        "eval_interval": 500,
        "probe_graphs": 16
    });
    run_experiment(&ExperimentConfig::from_json(&v.to_string(), Path::new("."))?, dir)
}

const MPNN_GRAPHS: usize = 500;
const MPNN_LATENT: usize = 16;
const MPNN_STEPS: u64 = 2000;

fn criterion_2(tmp: &Path) -> Result<Verdict> {
    let mut c = gcn(10);
    c.residual = false;
    c.latent_dim = 16;
    c.mlp_hidden = 16;
    let (model, store) = build(&c, 40);
    let g = categorical(41, 20, 4, 1, &connected_pairs(41, 20, 10));
    let snaps = forward(&model, &store, &[g]).snapshots;
    let ratio = mad(&snaps[10])? / mad(&snaps[1])?;

    let mut decreasing = Vec::new();
    let mut wins = 0;
    let mut finals = Vec::new();
    for seed in SEEDS {
        let base = mpnn_run(seed, false, &tmp.join(format!("mpnn_base_{seed}")))?;
        let nn = mpnn_run(seed, true, &tmp.join(format!("mpnn_nn_{seed}")))?;
        decreasing.push(base.mad.residuals.sorted().strictly_decreasing());
        let last = |s: &RunSummary| s.mad.residuals.values.last().copied().flatten().unwrap_or(f64::NAN);
        let (b, n) = (last(&base), last(&nn));
        if n > b {
            wins += 1;
        }
        finals.push(format!("{b:.4}/{n:.4}"));
    }
    let all_decreasing = decreasing.iter().all(|&d| d);
    Ok(Verdict::new(
        ratio < 0.1 && all_decreasing && wins >= 4,
        format!(
            "gcn MAD ratio {ratio:.3e} (< 0.1); baseline sorted residual MAD strictly decreasing {decreasing:?}; \
             final-layer residual MAD base/nn {} -> nn higher in {wins}/5 (>= 4)",
            finals.join(" ")
        ),
    ))
}

// ---------------------------------------------------------------- criteria 3 and 10

const RELAX_GRAPHS: usize = 2000;
const RELAX_STEPS: u64 = 3000;
const RELAX_SIGMA: f64 = 0.1;
const RELAX_LAMBDA: f64 = 0.02;

#[derive(Clone, Copy)]
struct Arm {
    name: &'static str,
    lambda: f64,
    sigma: f64,
    drop_edge: f64,
    drop_node: f64,
}

const NONE: Arm = Arm {
    name: "none",
    lambda: 0.0,
    sigma: 0.0,
    drop_edge: 0.0,
    drop_node: 0.0,
};
const NODE: Arm = Arm {
    name: "node_loss",
    lambda: RELAX_LAMBDA,
    ..NONE
};
const NOISY: Arm = Arm {
    name: "noisy_nodes",
    lambda: RELAX_LAMBDA,
    sigma: RELAX_SIGMA,
    ..NONE
};
const NOISE_ONLY: Arm = Arm {
    name: "noise_only",
    sigma: RELAX_SIGMA,
    ..NONE
};
const DROP_EDGE: Arm = Arm {
    name: "drop_edge",
    drop_edge: 0.1,
    ..NONE
};
const DROP_NODE: Arm = Arm {
    name: "drop_node",
    drop_node: 0.1,
    ..NONE
};
const NN_DROP_EDGE: Arm = Arm {
    name: "nn_drop_edge",
    drop_edge: 0.1,
    ..NOISY
};
const NN_DROP_NODE: Arm = Arm {
    name: "nn_drop_node",
    drop_node: 0.1,
    ..NOISY
};

fn relaxation_config(seed: u64, arm: Arm) -> Value {
    let kind = if arm.sigma > 0.0 { "gaussian_positions" } else { "none" };
    json!({
        "seed": seed,
        "dataset": {"synthetic": {"task": "relaxation", "num_graphs": RELAX_GRAPHS, "min_nodes": 10, "max_nodes": 20}, "seed": 1000},
        "model": {
            "arch": "gns", "num_layers": 3, "latent_dim": 32, "mlp_hidden": 32, "node_vocab": 3,
            "featurize": {"num_rbf": 8, "embed_dim": 16, "rbf_cutoff": 2.0}
        },
        "train": {
            "use_atomref": true,
            "schedule": {"warmup_steps": 50, "warmup_start_lr": 1e-4, "max_lr": 2e-3, "cosine_cycle_length": RELAX_STEPS},
            "noise": {
                "kind": kind, "sigma": arm.sigma, "lambda": arm.lambda, "predict_differences": true,
                "drop_edge_rate": arm.drop_edge, "drop_node_rate": arm.drop_node
            }
        },
        "batch": {"max_nodes": 1024, "max_edges": 12800, "max_graphs": 10},
        "max_steps": RELAX_STEPS,
        "eval_interval": 250,
        "patience": 100
    })
}

/// Best validation MAE of `arm` for every seed.
fn relaxation_arm(tmp: &Path, arm: Arm) -> Result<Vec<f64>> {
    SEEDS
        .iter()
        .map(|&seed| {
            let cfg = ExperimentConfig::from_json(&relaxation_config(seed, arm).to_string(), Path::new("."))?;
            let s = run_experiment(&cfg, &tmp.join(format!("{}_{seed}", arm.name)))?;
            Ok(s.best_metric)
        })
        .collect()
}

fn criterion_3(tmp: &Path, noisy: &mut Option<Vec<f64>>) -> Result<Verdict> {
    let a = relaxation_arm(tmp, NONE)?;
    let b = relaxation_arm(tmp, NODE)?;
    let c = relaxation_arm(tmp, NOISY)?;
    let d = relaxation_arm(tmp, NOISE_ONLY)?;
    let (ma, mb, mc, md) = (mean(&a), mean(&b), mean(&c), mean(&d));
    let full = ma - mc;
    let partial = ma - md;
    let ordered = mc < mb && mb < ma;
    let small = full > 0.0 && partial < 0.2 * full;
    *noisy = Some(c.clone());
    Ok(Verdict::new(
        ordered && small,
        format!(
            "mean val MAE: noisy nodes {mc:.4} < node loss {mb:.4} < none {ma:.4} [{ordered}]; \
             noise-only gain {partial:.4} < 0.2 x full gain {full:.4} [{small}]; \
             per seed none {} node {} noisy {} noise-only {}",
            fmt_list(&a),
            fmt_list(&b),
            fmt_list(&c),
            fmt_list(&d)
        ),
    ))
}

fn criterion_10(tmp: &Path, noisy: Option<Vec<f64>>) -> Result<Verdict> {
    let nn = match noisy {
        Some(v) => v,
        None => relaxation_arm(tmp, NOISY)?,
    };
    let (m_nn, se) = (mean(&nn), std_err(&nn));
    let mut parts = vec![format!("noisy nodes {m_nn:.4} +- {se:.4}")];
    let mut pass = true;
    for arm in [DROP_EDGE, DROP_NODE] {
        let m = mean(&relaxation_arm(tmp, arm)?);
        let ok = m >= m_nn;
        pass &= ok;
        parts.push(format!("{} {m:.4} >= {m_nn:.4} [{ok}]", arm.name));
    }
    for arm in [NN_DROP_EDGE, NN_DROP_NODE] {
        let m = mean(&relaxation_arm(tmp, arm)?);
        let ok = m <= m_nn + se;
        pass &= ok;
        parts.push(format!("{} {m:.4} <= {:.4} [{ok}]", arm.name, m_nn + se));
    }
    Ok(Verdict::new(
        pass,
        format!("mean val MAE over 5 seeds: {}", parts.join("; ")),
    ))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Result<Verdict> {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for _ in 0..100_000 {
        let n = r.random_range(1..6);
        let init: Vec<f64> = (0..3 * n).map(|_| r.random_range(-5.0..5.0)).collect();
        let fin: Vec<f64> = (0..3 * n).map(|_| r.random_range(-5.0..5.0)).collect();
        let noise: Vec<f64> = (0..3 * n).map(|_| r.random_range(-1.0..1.0)).collect();
        let delta: Vec<f64> = fin.iter().zip(&init).map(|(f, i)| f - i).collect();
        let corrected = adjust_target(&Tensor::new([n, 3], delta)?, &Tensor::new([n, 3], noise.clone())?)?;
        // the noisy input plus the corrected target lands on the relaxed structure
        for k in 0..3 * n {
            let landed = (init[k] + noise[k]) + corrected.data()[k];
            worst = worst.max((landed - fin[k]).abs());
        }
    }
    Ok(Verdict::new(
        worst <= 1e-12,
        format!("max |v~ + (delta - sigma) - v_final| = {worst:.2e} over 1e5 instances (tol 1e-12)"),
    ))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Result<Verdict> {
    let mut r = rng(5);
    let pi = std::f64::consts::PI;
    let (mut e_rbf, mut e_cell, mut e_std, mut e_log, mut e_lr, mut e_ema) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let cutoff: f64 = r.random_range(1.0..10.0);
        let d: f64 = r.random_range(1e-3..cutoff);
        let c = r.random_range(1..16usize);
        let oracle = (2.0 / cutoff).sqrt() * (c as f64 * pi * d / cutoff).sin() / d;
        e_rbf = e_rbf.max(relative(bessel_rbf(d, c, cutoff)?, oracle));

        let v = |r: &mut rand_chacha::ChaCha8Rng| -> [f64; 3] { std::array::from_fn(|_| r.random_range(-3.0..3.0)) };
        let (a, b, g) = (v(&mut r), v(&mut r), v(&mut r));
        if let Ok(cell) = CellBasis::new(a, b, g) {
            let dot = |x: [f64; 3], y: [f64; 3]| x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
            let want = [
                dot(a, b),
                dot(b, g),
                dot(a, g),
                dot(a, a).sqrt(),
                dot(b, b).sqrt(),
                dot(g, g).sqrt(),
            ];
            for (x, y) in cell_invariants(&cell).iter().zip(want) {
                e_cell = e_cell.max(relative(*x, y));
            }
        }

        let m = r.random_range(1..20usize);
        let maes: Vec<f64> = (0..m).map(|_| r.random_range(1e-3..5.0)).collect();
        let stds: Vec<f64> = (0..m).map(|_| r.random_range(1e-2..5.0)).collect();
        let want_std = maes.iter().zip(&stds).map(|(a, s)| a / s).sum::<f64>() / m as f64;
        let want_log = maes.iter().zip(&stds).map(|(a, s)| (a / s).ln()).sum::<f64>() / m as f64;
        e_std = e_std.max(relative(std_mae(&maes, &stds)?, want_std));
        e_log = e_log.max(relative(log_mae(&maes, &stds)?, want_log));

        let warmup = r.random_range(1..500u64);
        let spec = ScheduleSpec {
            warmup_steps: warmup,
            warmup_start_lr: r.random_range(1e-6..1e-4),
            max_lr: r.random_range(1e-4..1e-2),
            cosine_cycle_length: warmup + r.random_range(1..5000u64),
        };
        let step = r.random_range(0..spec.cosine_cycle_length + 100);
        let want = if step < warmup {
            spec.warmup_start_lr + (spec.max_lr - spec.warmup_start_lr) * step as f64 / warmup as f64
        } else {
            let t = ((step - warmup) as f64 / (spec.cosine_cycle_length - warmup) as f64).min(1.0);
            0.5 * spec.max_lr * (1.0 + (pi * t).cos())
        };
        e_lr = e_lr.max((lr_schedule(step, &spec) - want).abs() / spec.max_lr);

        let base: f64 = r.random_range(0.9..0.99999);
        let s = r.random_range(0..100_000u64);
        let want = base.min((1.0 + s as f64) / (10.0 + s as f64));
        e_ema = e_ema.max((ema_decay(s, base) - want).abs());
    }
    let d0 = ema_decay(0, 0.9999);
    let d90 = ema_decay(90, 0.9999);
    let anchors = (d0 - 0.1).abs() < 1e-10 && (d90 - 0.91).abs() < 1e-10;
    let errs = [e_rbf, e_cell, e_std, e_log, e_lr, e_ema];
    Ok(Verdict::new(
        anchors && errs.iter().all(|e| *e < 1e-10),
        format!(
            "max error bessel_rbf {e_rbf:.1e}, cell_invariants {e_cell:.1e}, std_mae {e_std:.1e}, log_mae {e_log:.1e}, \
             lr_schedule {e_lr:.1e}, ema {e_ema:.1e} (tol 1e-10); ema(0) = {d0}, ema(90) = {d90}"
        ),
    ))
}

// ---------------------------------------------------------------- criterion 6

fn random_rotation(r: &mut rand_chacha::ChaCha8Rng) -> [[f64; 3]; 3] {
    // normalized Gaussian quaternion
    let mut q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(r));
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    q.iter_mut().for_each(|x| *x /= n);
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn map_positions(g: &Graph, f: impl Fn([f64; 3]) -> [f64; 3]) -> Graph {
    let mut out = g.clone();
    let p = out.positions.as_mut().unwrap();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let v = f([row[0], row[1], row[2]]);
        row.copy_from_slice(&v);
    }
    out
}

fn permute(g: &Graph, perm: &[usize]) -> Graph {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let rows = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&o| t.row(o).to_vec()).collect::<Vec<_>>());
    let mut out = g.clone();
    out.node_features = rows(&g.node_features);
    out.positions = g.positions.as_ref().map(rows);
    out.node_targets = g.node_targets.as_ref().map(rows);
    for e in &mut out.edges {
        e.sender = inv[e.sender];
        e.receiver = inv[e.receiver];
    }
    out
}

fn criterion_6() -> Result<Verdict> {
    let mut r = rng(6);
    let (model, store) = build(&gns(3, 1), 60);
    let mut e_trans = 0.0f64;
    for seed in 0..10 {
        let g = point_cloud(600 + seed, 8, 4);
        let shift: [f64; 3] = std::array::from_fn(|_| r.random_range(-50.0..50.0));
        let moved = map_positions(&g, |v| std::array::from_fn(|k| v[k] + shift[k]));
        let (a, b) = (forward(&model, &store, &[g]), forward(&model, &store, &[moved]));
        e_trans = e_trans
            .max(a.graph.max_abs_diff(&b.graph))
            .max(a.nodes.max_abs_diff(&b.nodes));
    }

    let mut frac = gns(3, 1);
    frac.featurize.use_fractional = true;
    let (model, store) = build(&frac, 61);
    let cell = CellBasis::new([3.0, 0.2, 0.0], [0.4, 2.8, 0.1], [0.0, 0.3, 3.3])?;
    let mut g = point_cloud(62, 8, 4);
    g.cell = Some(cell);
    let reference = forward(&model, &store, &[g.clone()]);
    let mut e_rot = 0.0f64;
    for _ in 0..100 {
        let rot = random_rotation(&mut r);
        let apply = |v: [f64; 3]| -> [f64; 3] { std::array::from_fn(|k| (0..3).map(|j| rot[k][j] * v[j]).sum()) };
        let mut turned = map_positions(&g, apply);
        turned.cell = Some(cell.transformed(&rot));
        let out = forward(&model, &store, &[turned]);
        e_rot = e_rot
            .max(out.graph.max_abs_diff(&reference.graph))
            .max(out.nodes.max_abs_diff(&reference.nodes));
    }

    let mut e_perm = 0.0f64;
    let cloud = point_cloud(63, 8, 3);
    let pairs = connected_pairs(64, 8, 3);
    let typed = categorical(64, 8, 3, 2, &pairs);
    let plain = categorical(65, 8, 4, 1, &pairs);
    for (config, g) in [(gns(2, 2), &cloud), (mpnn(2), &typed), (gcn(2), &plain)] {
        let (model, store) = build(&config, 65);
        for _ in 0..10 {
            let mut perm: Vec<usize> = (0..g.num_nodes()).collect();
            perm.shuffle(&mut r);
            let a = forward(&model, &store, std::slice::from_ref(g));
            let b = forward(&model, &store, &[permute(g, &perm)]);
            e_perm = e_perm.max(a.graph.max_abs_diff(&b.graph));
            for (new, &old) in perm.iter().enumerate() {
                for k in 0..a.nodes.cols() {
                    e_perm = e_perm.max((a.nodes.get2(old, k) - b.nodes.get2(new, k)).abs());
                }
            }
        }
    }
    Ok(Verdict::new(
        e_trans <= 1e-9 && e_rot <= 1e-8 && e_perm <= 1e-9,
        format!(
            "translation {e_trans:.1e} (tol 1e-9), rotation of fractional variant over 100 rotations {e_rot:.1e} (tol 1e-8), \
             permutation gns/mpnn_vn/gcn {e_perm:.1e} (tol 1e-9)"
        ),
    ))
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Result<Verdict> {
    let count = |layers, group| build(&gns(layers, group), 0).1.num_scalars_with_prefix("gns/proc/");
    let shared: Vec<usize> = [1, 5, 10, 20].iter().map(|&l| count(l, 1)).collect();
    let independent = shared.windows(2).all(|w| w[0] == w[1]);
    let (g10, g20) = (count(10, 10), count(20, 10));
    let doubled = g20 == 2 * g10;
    Ok(Verdict::new(
        independent && doubled,
        format!(
            "GNS-Shared processor params at 1/5/10/20 layers {shared:?} [independent {independent}]; \
             GNS-10 at 10 layers {g10}, at 20 layers {g20}, ratio {:.2} (want exactly 2) [{doubled}]",
            g20 as f64 / g10 as f64
        ),
    ))
}

// ---------------------------------------------------------------- criterion 8

fn small_run() -> Value {
    json!({
        "seed": 8,
        "dataset": {"synthetic": {"task": "relaxation", "num_graphs": 60, "min_nodes": 6, "max_nodes": 10}},
        "model": {
            "arch": "gns", "num_layers": 2, "group_size": 1, "latent_dim": 12, "mlp_hidden": 12, "node_vocab": 3,
            "featurize": {"num_rbf": 4, "embed_dim": 4}
        },
        "train": {
            "use_atomref": true,
            "schedule": {"warmup_steps": 10, "warmup_start_lr": 1e-4, "max_lr": 1e-3, "cosine_cycle_length": 100},
            "noise": {"kind": "gaussian_positions", "sigma": 0.05, "lambda": 0.1, "predict_differences": true}
        },
        "batch": {"max_nodes": 256, "max_edges": 4096, "max_graphs": 8},
        "max_steps": 100,
        "eval_interval": 10,
        "probe_graphs": 4
    })
}

fn criterion_8(tmp: &Path) -> Result<Verdict> {
    let cfg = ExperimentConfig::from_json(&small_run().to_string(), Path::new("."))?;
    run_experiment(&cfg, &tmp.join("det_a"))?;
    run_experiment(&cfg, &tmp.join("det_b"))?;
    let a = std::fs::read(tmp.join("det_a").join(METRICS_FILE))?;
    let b = std::fs::read(tmp.join("det_b").join(METRICS_FILE))?;
    let identical = a == b;

    let setup = setup_run(&cfg)?;
    let batches: Vec<Vec<Graph>> = batch_indices(&setup.train, cfg.batch)?
        .into_iter()
        .map(|idx| idx.iter().map(|&i| setup.train[i].clone()).collect())
        .collect();
    let batch = |s: u64| &batches[s as usize % batches.len()];
    let mut straight = setup.state.clone();
    let mut straight_losses = Vec::new();
    for s in 0..100 {
        straight_losses.push(train_step(&setup.model, &mut straight, batch(s), &cfg.train)?);
    }
    let mut first = setup.state.clone();
    let mut resumed_losses = Vec::new();
    for s in 0..50 {
        resumed_losses.push(train_step(&setup.model, &mut first, batch(s), &cfg.train)?);
    }
    let path = tmp.join("resume.ckpt");
    checkpoint_save(&first, &path)?;
    let mut resumed = checkpoint_load(&path, &setup.state)?;
    drop(first);
    for s in 50..100 {
        resumed_losses.push(train_step(&setup.model, &mut resumed, batch(s), &cfg.train)?);
    }
    let bitwise = resumed == straight && resumed_losses == straight_losses;
    Ok(Verdict::new(
        identical && bitwise,
        format!(
            "rerun metric CSVs byte-identical [{identical}] ({} bytes); resume at step 50 matches 100 uninterrupted steps bitwise [{bitwise}]",
            a.len()
        ),
    ))
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9() -> Result<Verdict> {
    let spec = SyntheticSpec::new(SyntheticTask::EquilibriumDenoise, 1000);
    let params = MorseParams::for_types(spec.num_types);
    let graphs = generate_equilibrium_dataset(&spec, 9)?;
    let normal = Normal::new(0.0, 0.1).unwrap();
    let mut r = rng(9);
    let mut raised = 0;
    let mut smallest = f64::INFINITY;
    for g in &graphs {
        let types = g.node_types(0);
        let pos = g.positions_ref()?;
        let e0 = morse_energy(pos, &types, &params)?;
        let noisy = Tensor::new(
            pos.shape().to_vec(),
            pos.data().iter().map(|x| x + normal.sample(&mut r)).collect(),
        )?;
        let e1 = morse_energy(&noisy, &types, &params)?;
        if e1 > e0 {
            raised += 1;
        }
        smallest = smallest.min(e1 - e0);
    }
    Ok(Verdict::new(
        raised == graphs.len(),
        format!(
            "energy raised in {raised}/{} perturbed minima (sigma 0.1), smallest increase {smallest:.3e}",
            graphs.len()
        ),
    ))
}

// ---------------------------------------------------------------- driver

fn main() {
    let only: Option<Vec<u32>> = std::env::var("GNND_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let strict = std::env::var("GNND_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let wanted = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));
    let tmp = tempfile::tempdir().expect("temporary directory");
    let dir = tmp.path();
    let mut noisy = None;

    let mut passed = 0;
    let mut ran = 0;
    let mut check = |id: u32, name: &str, budget_s: u64, f: &mut dyn FnMut() -> Result<Verdict>| {
        if !wanted(id) {
            return;
        }
        let start = Instant::now();
        let verdict = f().unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
        let elapsed = start.elapsed();
        let budget = Duration::from_secs(budget_s);
        let in_time = elapsed <= budget;
        let pass = verdict.pass && in_time;
        ran += 1;
        if pass {
            passed += 1;
        }
        println!(
            "{} criterion {id:>2} {name}: {} | {:.1}s of {budget_s}s{}",
            if pass { "PASS" } else { "FAIL" },
            verdict.detail,
            elapsed.as_secs_f64(),
            if in_time { "" } else { " (over budget)" }
        );
    };

    check(1, "autodiff", 10, &mut criterion_1);
    check(2, "oversmoothing", 1800, &mut || criterion_2(dir));
    check(3, "noisy nodes efficacy", 7200, &mut || criterion_3(dir, &mut noisy));
    check(4, "target correction", 1, &mut criterion_4);
    check(5, "formula fidelity", 10, &mut criterion_5);
    check(6, "symmetry", 300, &mut criterion_6);
    check(7, "grouped weights", 1, &mut criterion_7);
    check(8, "determinism and persistence", 300, &mut || criterion_8(dir));
    check(9, "energy premise", 60, &mut criterion_9);
    check(10, "baseline regularizers", 7200, &mut || {
        criterion_10(dir, noisy.take())
    });

    println!("acceptance: {passed}/{ran} criteria passed");
    if strict && passed < ran {
        std::process::exit(1);
    }
}
