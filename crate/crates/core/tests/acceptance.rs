//! Acceptance gate. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero when any criterion fails. Pass a substring as the first
//! argument to run only matching criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2, Array3};
use rand::Rng as _;

use ntsimpute::baselines::{mean_impute, mf_impute, MfConfig};
use ntsimpute::data::{observed_view, NtsDataset, Split, HELD_OUT, OBSERVED};
use ntsimpute::eval::evaluate_range;
use ntsimpute::model::{self, Dims, ModelConfig, Sampling, WindowInput};
use ntsimpute::nn::blocks;
use ntsimpute::nn::gradcheck::check_gradients;
use ntsimpute::nn::{ParameterStore, Tape};
use ntsimpute::rng::{self, Rng};
use ntsimpute::rwr::{self, RwrConfig};
use ntsimpute::synth::{generate, GenConfig};
use ntsimpute::train::{total_loss, Setup, TrainConfig, Trainer, LOSS_TERMS};

const RWR_TOL: f64 = 1e-8;
const RWR_BUDGET: Duration = Duration::from_secs(5);
const SIMPLEX_SUM_TOL: f64 = 1e-8;
const SIMPLEX_NEG_TOL: f64 = 1e-12;
const BLOCK_RTOL: f64 = 1e-4;
const E2E_GRAD_RTOL: f64 = 1e-3;
const GRAD_ATOL: f64 = 1e-8;
const TIME_ENC_TOL: f64 = 1e-12;
const LOSS_TOL: f64 = 1e-12;
const E2E_SEEDS: u64 = 5;
const E2E_MIN_IMPROVEMENT: f64 = 0.15;
const E2E_BUDGET: Duration = Duration::from_secs(15 * 60);
const MF_RMSE_TOL: f64 = 1e-6;

/// Training setup of the end-to-end and link criteria, frozen after tuning
/// on the baseline runs.
fn e2e_configs(seed: u64) -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        hidden: 16,
        num_anchors: Some(16),
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        lr0: 3e-3,
        epochs: 90,
        batch_size: 8,
        beta: 0.05,
        gamma_link: 1.0,
        patience: 90,
        mask_link_loss: true,
        remask_prob: 0.4,
        seed: Some(seed),
        ..TrainConfig::default()
    };
    (model, train)
}

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- rwr

/// Random symmetric weighted graph; some nodes may end up isolated.
fn random_graph(r: &mut Rng, n: usize) -> Array2<f64> {
    let density = r.random_range(0.1..0.9);
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            if r.random_bool(density) {
                let w = r.random_range(0.05..2.0);
                a[[i, j]] = w;
                a[[j, i]] = w;
            }
        }
    }
    a
}

fn rwr_oracle() -> Outcome {
    let clock = Instant::now();
    let mut r = rng::stream(2024, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = r.random_range(1..=20);
        let a = random_graph(&mut r, n);
        let c = 0.15;
        // column-stochastic transition; isolated nodes keep their walker
        let mut p = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let deg: f64 = a.row(i).sum();
            for j in 0..n {
                p[(j, i)] = if deg > 0.0 { a[[i, j]] / deg } else if i == j { 1.0 } else { 0.0 };
            }
        }
        let system = DMatrix::<f64>::identity(n, n) - p * (1.0 - c);
        let lu = system.lu();
        let hat = rwr::normalize_adjacency(&a.view()).map_err(|e| e.to_string())?;
        let cfg = RwrConfig::for_nodes(n);
        for i in 0..n {
            let e = DVector::<f64>::from_fn(n, |k, _| if k == i { c } else { 0.0 });
            let want = lu.solve(&e).ok_or("singular oracle system")?;
            let got = rwr::rwr_scores(&hat.view(), i, &cfg).map_err(|e| e.to_string())?;
            for k in 0..n {
                worst = worst.max((got[k] - want[k]).abs());
            }
        }
    }
    let took = clock.elapsed();
    check(
        worst <= RWR_TOL && took < RWR_BUDGET,
        format!("max inf-norm error {worst:.2e} (tol {RWR_TOL:.0e}), {:.2}s", took.as_secs_f64()),
    )
}

fn rwr_simplex() -> Outcome {
    let ds = generate(&GenConfig {
        num_nodes: 16,
        num_steps: 100,
        seed: 5,
        ..GenConfig::default()
    })
    .map_err(|e| e.to_string())?
    .dataset;
    let view = observed_view(&ds);
    let anchors: Vec<usize> = (0..16).collect();
    let mut worst_sum: f64 = 0.0;
    let mut min_entry = f64::INFINITY;
    for adj in [&ds.adjacency, &view.obs_adjacency] {
        let pos = rwr::position_tensor(adj, &RwrConfig::for_nodes(16), &anchors).map_err(|e| e.to_string())?;
        let (t, _, l) = pos.scores.dim();
        for ti in 0..t {
            for li in 0..l {
                let col = pos.scores.slice(s![ti, .., li]);
                worst_sum = worst_sum.max((col.sum() - 1.0).abs());
                min_entry = col.iter().fold(min_entry, |m, &v| m.min(v));
            }
        }
    }
    check(
        worst_sum <= SIMPLEX_SUM_TOL && min_entry >= -SIMPLEX_NEG_TOL,
        format!("max |sum-1| {worst_sum:.2e}, min entry {min_entry:.2e} over T=100, N=16"),
    )
}

// ---------------------------------------------------------------- gradients

fn jitter_biases(store: &mut ParameterStore, r: &mut Rng) {
    for (name, p) in store.iter_mut() {
        if name.ends_with("bias") || name.contains(".b_") {
            let shape = p.values.dim();
            let noise = Array2::from_shape_fn(shape, |_| r.random_range(-0.3..0.3));
            p.values += &noise;
        }
    }
}

fn rand_mat(r: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

fn max_abs_err(report: &ntsimpute::nn::gradcheck::GradReport) -> f64 {
    report.entries.iter().map(|e| e.abs_err()).fold(0.0, f64::max)
}

fn block_case(
    name: &str,
    store: &ParameterStore,
    f: impl Fn(&mut Tape) -> ntsimpute::Result<ntsimpute::nn::Var>,
) -> Result<(String, f64), String> {
    let report = check_gradients(store, None, f).map_err(|e| format!("{name}: {e}"))?;
    let fails = report.failures(BLOCK_RTOL, GRAD_ATOL).len();
    if fails > 0 {
        return Err(format!("{name}: {fails} of {} entries fail", report.entries.len()));
    }
    Ok((name.to_string(), max_abs_err(&report)))
}

fn gradient_contract() -> Outcome {
    let mut r = rng::stream(77, 3);
    let (n, a, h) = (4, 3, 5);
    let x = rand_mat(&mut r, n, a);
    let proj = rand_mat(&mut r, n, h);
    let mut results = Vec::new();

    let mut st = ParameterStore::new(1);
    blocks::init_linear(&mut st, "lin", a, h);
    jitter_biases(&mut st, &mut r);
    results.push(block_case("linear", &st, |t| {
        let xv = t.constant(x.clone());
        let y = blocks::linear(t, "lin", xv)?;
        ntsimpute::nn::gradcheck::random_projection_loss(t, y, &proj)
    })?);

    let mut st = ParameterStore::new(2);
    blocks::init_mlp2(&mut st, "mlp", a, 6, h);
    jitter_biases(&mut st, &mut r);
    results.push(block_case("mlp2", &st, |t| {
        let xv = t.constant(x.clone());
        let y = blocks::mlp2(t, "mlp", xv)?;
        ntsimpute::nn::gradcheck::random_projection_loss(t, y, &proj)
    })?);

    let h_prev = rand_mat(&mut r, n, h);
    let mut st = ParameterStore::new(3);
    blocks::init_gru_cell(&mut st, "gru", a, h);
    jitter_biases(&mut st, &mut r);
    results.push(block_case("gru_cell", &st, |t| {
        let xv = t.constant(x.clone());
        let hv = t.constant(h_prev.clone());
        let y = blocks::gru_cell(t, "gru", xv, hv)?;
        ntsimpute::nn::gradcheck::random_projection_loss(t, y, &proj)
    })?);

    let seq: Vec<Array2<f64>> = (0..3).map(|_| rand_mat(&mut r, n, a)).collect();
    let mut st = ParameterStore::new(4);
    blocks::init_gru_encoder(&mut st, "enc", a, h);
    jitter_biases(&mut st, &mut r);
    results.push(block_case("gru_encoder", &st, |t| {
        let xs: Vec<_> = seq.iter().map(|m| t.constant(m.clone())).collect();
        let hs = blocks::gru_encoder(t, "enc", &xs, h)?;
        let last = *hs.last().expect("non-empty sequence");
        ntsimpute::nn::gradcheck::random_projection_loss(t, last, &proj)
    })?);

    let mut st = ParameterStore::new(5);
    blocks::init_self_attention(&mut st, "att", a, 4, h);
    results.push(block_case("self_attention", &st, |t| {
        let xv = t.constant(x.clone());
        let y = blocks::self_attention(t, "att", xv)?;
        ntsimpute::nn::gradcheck::random_projection_loss(t, y, &proj)
    })?);

    let u = rand_mat(&mut r, n, h);
    let adj = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 0.3 + 0.1 * ((i + j) % 3) as f64 });
    let mut st = ParameterStore::new(6);
    blocks::init_mpnn_two_layer(&mut st, "mp", h);
    jitter_biases(&mut st, &mut r);
    results.push(block_case("mpnn_two_layer", &st, |t| {
        let uv = t.constant(u.clone());
        let av = t.constant(adj.clone());
        let y = blocks::mpnn_two_layer(t, "mp", uv, av)?;
        ntsimpute::nn::gradcheck::random_projection_loss(t, y, &proj)
    })?);

    let tproj = rand_mat(&mut r, 1, 6);
    let mut st = ParameterStore::new(7);
    blocks::init_time_encoding(&mut st, "time", 3, 24.0).map_err(|e| e.to_string())?;
    results.push(block_case("time_encoding", &st, |t| {
        let y = blocks::time_encoding(t, "time", 5.0)?;
        ntsimpute::nn::gradcheck::random_projection_loss(t, y, &tproj)
    })?);

    let eps = blocks::standard_normal(&mut r, n, h);
    let mut st = ParameterStore::new(8);
    st.insert("mu", rand_mat(&mut r, n, h));
    st.insert("logvar", rand_mat(&mut r, n, h));
    results.push(block_case("reparameterize", &st, |t| {
        let mu = t.param("mu")?;
        let lv = t.param("logvar")?;
        let z = blocks::reparameterize(t, mu, lv, eps.clone())?;
        ntsimpute::nn::gradcheck::random_projection_loss(t, z, &proj)
    })?);
    results.push(block_case("kl_gaussian", &st, |t| {
        let mu = t.param("mu")?;
        let lv = t.param("logvar")?;
        blocks::kl_gaussian(t, mu, lv)
    })?);

    // end to end through the full multi-task loss
    let dims = tiny_dims(3, 1, 3);
    let mut params = model::build_params(&dims, 11).map_err(|e| e.to_string())?;
    let mut r2 = rng::stream(11, 1);
    // zero biases can leave an edge embedding row exactly 0, on the relu kink
    for (name, p) in params.iter_mut() {
        if name.ends_with("bias") {
            let jitter = blocks::standard_normal(&mut r2, 1, p.values.ncols());
            p.values.scaled_add(0.1, &jitter);
        }
    }
    let input = random_input(&mut r2, 3, 3, 1, dims.num_anchors);
    let cfg = TrainConfig::default();
    let report = check_gradients(&params, None, |tape| {
        let mut noise = rng::stream(11, 2);
        let fv = model::forward(tape, &input, &dims, Sampling::Stochastic, &mut noise)?;
        Ok(total_loss(tape, &fv, &input, &cfg)?.total)
    })
    .map_err(|e| e.to_string())?;
    let fails = report.failures(E2E_GRAD_RTOL, GRAD_ATOL).len();
    let block_worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    check(
        fails == 0,
        format!(
            "{} blocks within rel {BLOCK_RTOL:.0e}, max abs err {block_worst:.1e}; end-to-end {} entries, {fails} outside rel {E2E_GRAD_RTOL:.0e}, max abs err {:.1e}, max rel err above abs {GRAD_ATOL:.0e}: {:.1e}",
            results.len(),
            report.entries.len(),
            max_abs_err(&report),
            report.max_rel_err(GRAD_ATOL)
        ),
    )
}

fn time_encoding_norm() -> Outcome {
    let mut r = rng::stream(31, 4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = r.random_range(1..=16);
        let mut st = ParameterStore::new(0);
        st.insert("te.freq", Array2::from_shape_fn((1, k), |_| r.random_range(-10.0..10.0)));
        let t_val = r.random_range(-1e3..1e3);
        let mut tape = Tape::new(&st);
        let v = blocks::time_encoding(&mut tape, "te", t_val).map_err(|e| e.to_string())?;
        let norm = tape.value(v).iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max((norm - 1.0).abs());
    }
    check(worst <= TIME_ENC_TOL, format!("max |norm-1| {worst:.2e} over 100 draws"))
}

// ---------------------------------------------------------------- model structure

fn tiny_dims(n: usize, d: usize, window: usize) -> Dims {
    let mut cfg = ModelConfig {
        hidden: 4,
        time_pairs: 2,
        num_anchors: Some(2.min(n)),
        ..ModelConfig::default()
    };
    cfg.resolve(n, d, window).expect("valid tiny config")
}

fn random_input(r: &mut Rng, len: usize, n: usize, d: usize, l: usize) -> WindowInput {
    let mask = Array3::from_shape_fn((len, n, d), |_| if r.random_bool(0.65) { 1.0 } else { 0.0 });
    let obs = Array3::from_shape_fn((len, n, d), |_| r.random_range(-1.0..1.0)) * &mask;
    let mut adj = Array3::zeros((len, n, n));
    let mut edge_mask = Array3::zeros((len, n, n));
    for t in 0..len {
        for i in 0..n {
            for j in (i + 1)..n {
                let m = if r.random_bool(0.7) { 1.0 } else { 0.0 };
                let w = if r.random_bool(0.6) { r.random_range(0.1..1.0) } else { 0.0 };
                for (a, b) in [(i, j), (j, i)] {
                    edge_mask[[t, a, b]] = m;
                    adj[[t, a, b]] = w * m;
                }
            }
        }
    }
    let positions = Array3::from_shape_fn((len, n, l), |_| r.random_range(0.0..1.0));
    WindowInput {
        obs,
        mask,
        adj,
        edge_mask,
        positions,
    }
}

fn small_dataset(seed: u64) -> Result<NtsDataset, String> {
    generate(&GenConfig {
        num_nodes: 6,
        num_steps: 60,
        window: 8,
        seed,
        ..GenConfig::default()
    })
    .map(|g| g.dataset)
    .map_err(|e| e.to_string())
}

fn structural_invariants() -> Outcome {
    let mut checked_steps = 0;
    for seed in 0..4u64 {
        let mut r = rng::stream(seed, 50);
        let (n, d, len) = (5, 2, 6);
        let dims = tiny_dims(n, d, len);
        let params = model::build_params(&dims, seed).map_err(|e| e.to_string())?;
        let input = random_input(&mut r, len, n, d, dims.num_anchors);
        for sampling in [Sampling::Stochastic, Sampling::Mean] {
            let imp = model::bidirectional_impute(&params, &input, &dims, sampling, &mut r).map_err(|e| e.to_string())?;
            for (t, (sf, sb)) in imp.trace_f.iter().zip(&imp.trace_b).enumerate() {
                for st in [sf, sb] {
                    let a = &st.a_out;
                    for i in 0..n {
                        if a[[i, i]] != 0.0 {
                            return Err(format!("nonzero diagonal at t={t}"));
                        }
                        for j in 0..n {
                            if a[[i, j]] != a[[j, i]] || a[[i, j]] < 0.0 {
                                return Err(format!("A_out not symmetric/nonnegative at t={t}"));
                            }
                        }
                        for k in 0..d {
                            let m = input.mask[[t, i, k]];
                            let o = input.obs[[t, i, k]];
                            let fill = |pred: f64| if m == 1.0 { o } else { pred };
                            if st.o[[i, k]] != fill(st.y1[[i, k]]) || st.x_out[[i, k]] != fill(st.y2[[i, k]]) {
                                return Err(format!("decoder filler broken at t={t}"));
                            }
                        }
                    }
                    checked_steps += 1;
                }
                for i in 0..n {
                    for k in 0..d {
                        let m = input.mask[[t, i, k]];
                        let want = if m == 1.0 { input.obs[[t, i, k]] } else { imp.y_hat[[t, i, k]] };
                        if imp.features[[t, i, k]] != want {
                            return Err(format!("output filler broken at t={t}"));
                        }
                    }
                    for j in 0..n {
                        if input.edge_mask[[t, i, j]] == 1.0 && imp.adjacency[[t, i, j]] != input.adj[[t, i, j]] {
                            return Err(format!("observed edge changed at t={t}"));
                        }
                    }
                }
            }
        }
    }
    let leak = no_leak()?;
    Ok(format!("{checked_steps} decoder steps checked; {leak}"))
}

/// Perturbs every held-out truth value and checks that the observed view,
/// imputation outputs and trained parameters are bit-identical.
fn no_leak() -> Result<String, String> {
    let base = small_dataset(3)?;
    let mut moved = base.clone();
    let mut r = rng::stream(3, 60);
    let mut count = 0;
    for (v, &m) in moved.features.iter_mut().zip(base.feature_mask.iter()) {
        if m == HELD_OUT {
            *v += r.random_range(1.0..5.0);
            count += 1;
        }
    }
    let (t, n, _) = base.adjacency.dim();
    for ti in 0..t {
        for i in 0..n {
            for j in (i + 1)..n {
                if base.edge_mask[[ti, i, j]] == HELD_OUT {
                    let w = base.adjacency[[ti, i, j]] + r.random_range(0.5..2.0);
                    moved.adjacency[[ti, i, j]] = w;
                    moved.adjacency[[ti, j, i]] = w;
                    count += 1;
                }
            }
        }
    }
    moved.validate().map_err(|e| e.to_string())?;
    if observed_view(&base) != observed_view(&moved) {
        return Err("observed view depends on held-out truth".into());
    }
    let model_cfg = ModelConfig {
        hidden: 4,
        time_pairs: 2,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: Some(9),
        ..TrainConfig::default()
    };
    let run = |ds: &NtsDataset| -> Result<(ParameterStore, Array3<f64>, Array3<f64>), String> {
        let setup = Setup::new(ds, &model_cfg, &train_cfg).map_err(|e| e.to_string())?;
        let mut tr = Trainer::new(ds, setup).map_err(|e| e.to_string())?;
        tr.fit(|_, _| Ok(())).map_err(|e| e.to_string())?;
        let view = observed_view(ds);
        let range = 0..ds.num_steps();
        let p = model::impute_range(&tr.state.params, &tr.setup.dims, &view, &tr.setup.positions, range, tr.setup.window)
            .map_err(|e| e.to_string())?;
        Ok((tr.state.params.clone(), p.features, p.adjacency))
    };
    let (pa, fa, aa) = run(&base)?;
    let (pb, fb, ab) = run(&moved)?;
    let same_bits = |x: &Array3<f64>, y: &Array3<f64>| x.iter().zip(y.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    if pa != pb || !same_bits(&fa, &fb) || !same_bits(&aa, &ab) {
        return Err("model output changed when held-out truth was perturbed".into());
    }
    Ok(format!("no-leak holds for {count} perturbed held-out slots"))
}

// ---------------------------------------------------------------- loss

/// The nine loss terms recomputed from plain arrays.
fn oracle_loss(imp: &model::Imputation, input: &WindowInput, cfg: &TrainConfig) -> [f64; 9] {
    let (len, n, d) = input.obs.dim();
    let count: f64 = input.mask.iter().sum::<f64>().max(1.0);
    let mae = |pred: &dyn Fn(usize, usize, usize) -> f64| {
        let mut s = 0.0;
        for t in 0..len {
            for i in 0..n {
                for k in 0..d {
                    s += input.mask[[t, i, k]] * (input.obs[[t, i, k]] - pred(t, i, k)).abs();
                }
            }
        }
        s / count
    };
    let kl = |l: &model::LatentState| {
        let mut s = 0.0;
        for (&m, &lv) in l.mu.iter().zip(l.logvar.iter()) {
            s += m * m + lv.exp() - lv - 1.0;
        }
        0.5 * s / l.mu.nrows() as f64
    };
    let frob = |a: &dyn Fn(usize, usize, usize) -> f64| {
        let mut s = 0.0;
        for t in 0..len {
            for i in 0..n {
                for j in 0..n {
                    let w = if cfg.mask_link_loss { input.edge_mask[[t, i, j]] } else { 1.0 };
                    s += w * (input.adj[[t, i, j]] - a(t, i, j)).powi(2);
                }
            }
        }
        s.sqrt()
    };
    let (f, b) = (&imp.trace_f, &imp.trace_b);
    [
        mae(&|t, i, k| imp.y_hat[[t, i, k]]),
        cfg.beta * kl(&imp.latent_f),
        cfg.beta * kl(&imp.latent_b),
        mae(&|t, i, k| f[t].y1[[i, k]]),
        mae(&|t, i, k| b[t].y1[[i, k]]),
        cfg.gamma_link * frob(&|t, i, j| f[t].a_out[[i, j]]),
        cfg.gamma_link * frob(&|t, i, j| b[t].a_out[[i, j]]),
        mae(&|t, i, k| f[t].y2[[i, k]]),
        mae(&|t, i, k| b[t].y2[[i, k]]),
    ]
}

fn loss_fidelity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for seed in 0..10u64 {
        let mut r = rng::stream(seed, 70);
        let (n, d, len) = (r.random_range(2..6), r.random_range(1..3), r.random_range(2..6));
        let dims = tiny_dims(n, d, len);
        let params = model::build_params(&dims, seed).map_err(|e| e.to_string())?;
        let input = random_input(&mut r, len, n, d, dims.num_anchors);
        let cfg = TrainConfig {
            mask_link_loss: seed % 2 == 1,
            beta: r.random_range(0.0..1.0),
            gamma_link: r.random_range(0.0..1.0),
            ..TrainConfig::default()
        };
        let mut tape = Tape::new(&params);
        let mut noise = rng::stream(seed, 71);
        let fv = model::forward(&mut tape, &input, &dims, Sampling::Stochastic, &mut noise).map_err(|e| e.to_string())?;
        let b = total_loss(&mut tape, &fv, &input, &cfg).map_err(|e| e.to_string())?.breakdown(&tape);
        let imp = model::assemble(&tape, &fv, &input);
        let want = oracle_loss(&imp, &input, &cfg);
        for (k, (&got, &w)) in b.terms.iter().zip(want.iter()).enumerate() {
            if got < 0.0 {
                return Err(format!("term {} negative: {got}", LOSS_TERMS[k]));
            }
            worst = worst.max((got - w).abs());
        }
        worst = worst.max((b.total - want.iter().sum::<f64>()).abs());
        cases += 1;
    }
    check(worst <= LOSS_TOL, format!("{cases} random cases, max abs diff {worst:.2e} (tol {LOSS_TOL:.0e})"))
}

// ---------------------------------------------------------------- end to end

struct SeedRun {
    mean_mae: f64,
    mf_mae: f64,
    model_mae: f64,
    pair_mean_frob: f64,
    model_frob: f64,
}

/// The static link predictor: each held-out slot gets the temporal mean of
/// that pair's observed weights. Returns its held-out Frobenius error on
/// `range`, counting each undirected pair once.
fn pair_mean_frobenius(ds: &NtsDataset, range: std::ops::Range<usize>) -> f64 {
    let (t, n, _) = ds.adjacency.dim();
    let mut err = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let obs: Vec<f64> = (0..t).filter(|&k| ds.edge_mask[[k, i, j]] == OBSERVED).map(|k| ds.adjacency[[k, i, j]]).collect();
            let m = if obs.is_empty() { 0.0 } else { obs.iter().sum::<f64>() / obs.len() as f64 };
            for k in range.clone().filter(|&k| ds.edge_mask[[k, i, j]] == HELD_OUT) {
                err += (ds.adjacency[[k, i, j]] - m).powi(2);
            }
        }
    }
    err.sqrt()
}

fn run_seed(seed: u64) -> Result<SeedRun, String> {
    let ds = generate(&GenConfig {
        seed,
        ..GenConfig::default()
    })
    .map_err(|e| e.to_string())?
    .dataset;
    let view = observed_view(&ds);
    let test = ds.range(Split::Test);
    let mae_on_test = |features: &Array3<f64>| -> Result<f64, String> {
        let preds = ntsimpute::eval::Predictions::from_full(features, &view.obs_adjacency, test.clone());
        Ok(evaluate_range(&ds, &preds, test.clone(), ds.window).map_err(|e| e.to_string())?.feature.mae)
    };
    let mean = mean_impute(&view, ds.range(Split::Train)).map_err(|e| e.to_string())?;
    let mf = mf_impute(&view, &MfConfig::default()).map_err(|e| e.to_string())?.features;

    let (model_cfg, train_cfg) = e2e_configs(seed);
    let setup = Setup::new(&ds, &model_cfg, &train_cfg).map_err(|e| e.to_string())?;
    let mut tr = Trainer::new(&ds, setup).map_err(|e| e.to_string())?;
    tr.fit(|_, _| Ok(())).map_err(|e| e.to_string())?;
    let preds = model::impute_range(&tr.state.best_params, &tr.setup.dims, &view, &tr.setup.positions, test.clone(), tr.setup.window)
        .map_err(|e| e.to_string())?;
    let scored = evaluate_range(&ds, &preds, test.clone(), ds.window).map_err(|e| e.to_string())?;
    Ok(SeedRun {
        mean_mae: mae_on_test(&mean)?,
        mf_mae: mae_on_test(&mf)?,
        model_mae: scored.feature.mae,
        pair_mean_frob: pair_mean_frobenius(&ds, test),
        model_frob: scored.link.frobenius_heldout,
    })
}

fn end_to_end(runs: &Result<(Vec<SeedRun>, Duration), String>) -> Outcome {
    let (runs, took) = runs.as_ref().map_err(Clone::clone)?;
    let k = runs.len() as f64;
    let avg = |f: fn(&SeedRun) -> f64| runs.iter().map(f).sum::<f64>() / k;
    let (mean, mf, ours) = (avg(|r| r.mean_mae), avg(|r| r.mf_mae), avg(|r| r.model_mae));
    let improvement = avg(|r| (r.mean_mae - r.model_mae) / r.mean_mae);
    check(
        ours < mean && ours < mf && improvement >= E2E_MIN_IMPROVEMENT && *took < E2E_BUDGET,
        format!(
            "test MAE model {ours:.4} vs Mean {mean:.4}, MF {mf:.4}; improvement over Mean {:.1}% (need {:.0}%); {:.0}s for {} seeds",
            100.0 * improvement,
            100.0 * E2E_MIN_IMPROVEMENT,
            took.as_secs_f64(),
            runs.len()
        ),
    )
}

fn link_prediction(runs: &Result<(Vec<SeedRun>, Duration), String>) -> Outcome {
    let (runs, _) = runs.as_ref().map_err(Clone::clone)?;
    let k = runs.len() as f64;
    let ours = runs.iter().map(|r| r.model_frob).sum::<f64>() / k;
    let oracle = runs.iter().map(|r| r.pair_mean_frob).sum::<f64>() / k;
    let per_seed: Vec<String> = runs.iter().map(|r| format!("{:.3}/{:.3}", r.model_frob, r.pair_mean_frob)).collect();
    check(
        ours < oracle,
        format!("held-out Frobenius model {ours:.4} vs per-pair mean {oracle:.4} (per seed {})", per_seed.join(", ")),
    )
}

// ---------------------------------------------------------------- cli determinism

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ntsimpute"))
        .args(args)
        .env("NTS_THREADS", "1")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn pipeline(root: &Path) -> Result<Vec<u8>, String> {
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();
    std::fs::write(
        root.join("gen.json"),
        r#"{"num_nodes": 8, "num_steps": 120, "window": 12}"#,
    )
    .map_err(|e| e.to_string())?;
    std::fs::write(root.join("model.json"), r#"{"hidden": 8, "time_pairs": 4}"#).map_err(|e| e.to_string())?;
    cli(&["generate", "--config", &p("gen.json"), "--out", &p("data"), "--seed", "42"])?;
    cli(&[
        "train", "--data", &p("data"), "--out", &p("run"), "--model-config", &p("model.json"), "--seed", "42", "--epochs", "3",
        "--threads", "1",
    ])?;
    cli(&["impute", "--data", &p("data"), "--model", &p("run"), "--out", &p("pred"), "--threads", "1"])?;
    cli(&["evaluate", "--data", &p("data"), "--pred", &p("pred"), "--out", &p("metrics.json")])?;
    std::fs::read(root.join("metrics.json")).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ma = pipeline(a.path())?;
    let mb = pipeline(b.path())?;
    check(
        !ma.is_empty() && ma == mb,
        format!("metrics.json {} bytes, identical: {}", ma.len(), ma == mb),
    )
}

// ---------------------------------------------------------------- baselines

fn mf_recovery() -> Outcome {
    let mut r = rng::stream(8, 80);
    let (t, n) = (60, 12);
    let u: Vec<f64> = (0..t).map(|_| r.random_range(0.5..1.5)).collect();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let truth = Array3::from_shape_fn((t, n, 1), |(a, b, _)| u[a] * v[b]);
    let mask = Array3::from_shape_fn((t, n, 1), |_| if r.random_bool(0.1) { 0.0 } else { 1.0 });
    let view = ntsimpute::data::ObservedView {
        obs_features: &truth * &mask,
        model_mask: mask.clone(),
        obs_adjacency: Array3::zeros((t, n, n)),
        model_edge_mask: Array3::zeros((t, n, n)),
    };
    let cfg = MfConfig {
        rank: 1,
        ridge: 1e-12,
        tol: 0.0,
        als_iters: 500,
        ..MfConfig::default()
    };
    let fit = mf_impute(&view, &cfg).map_err(|e| e.to_string())?;
    let (mut se, mut hidden) = (0.0, 0.0);
    for ((&p, &y), &m) in fit.features.iter().zip(truth.iter()).zip(mask.iter()) {
        if m == 0.0 {
            se += (p - y).powi(2);
            hidden += 1.0;
        }
    }
    let rmse = (se / hidden).sqrt();
    let monotone = |obj: &[f64]| obj.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-15);
    let default_fit = mf_impute(&view, &MfConfig { rank: 1, ..MfConfig::default() }).map_err(|e| e.to_string())?;
    let mono = monotone(&fit.objective) && monotone(&default_fit.objective);
    check(
        rmse <= MF_RMSE_TOL && mono,
        format!(
            "hidden-entry RMSE {rmse:.2e} over {hidden} entries (tol {MF_RMSE_TOL:.0e}); objective monotone over {} + {} sweeps: {mono}",
            fit.objective.len(),
            default_fit.objective.len()
        ),
    )
}

// ---------------------------------------------------------------- driver

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wanted = |name: &str| filter.as_deref().is_none_or(|f| name.contains(f));

    let mut failed = 0;
    let mut report = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(name) {
            return;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    };

    report("rwr_oracle_equivalence", &mut rwr_oracle);
    report("rwr_simplex", &mut rwr_simplex);
    report("gradient_contract", &mut gradient_contract);
    report("time_encoding_norm", &mut time_encoding_norm);
    report("structural_invariants", &mut structural_invariants);
    report("loss_fidelity", &mut loss_fidelity);
    let needs_runs = wanted("end_to_end_imputation") || wanted("link_prediction");
    let runs = if needs_runs {
        let clock = Instant::now();
        (0..E2E_SEEDS)
            .map(run_seed)
            .collect::<Result<Vec<_>, _>>()
            .map(|r| (r, clock.elapsed()))
    } else {
        Err("skipped".into())
    };
    report("end_to_end_imputation", &mut || end_to_end(&runs));
    report("link_prediction", &mut || link_prediction(&runs));
    report("determinism", &mut determinism);
    report("mf_baseline_sanity", &mut mf_recovery);

    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
