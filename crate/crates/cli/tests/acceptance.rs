//! Acceptance checks, one PASS/FAIL line each. Set `ACCEPTANCE_SKIP_SLOW=1`
//! to skip the three training runs (5, 6 and 8).

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use hebbsnn::autodiff::{smooth_op_report, Graph};
use hebbsnn::concentration::{mean, optimal_agent_eval, random_agent_eval};
use hebbsnn::conversion::{balance_thresholds, conversion_fidelity, ConversionConfig, DenseReluNet};
use hebbsnn::hebbian::{hebbian_update, HebbianMemoryState, HebbianParams, MemoryWeights, StepMode};
use hebbsnn::optim::rate_regularizer;
use hebbsnn::snn::{LifLayerState, LifNode, LifParams, SpikeRaster};
use hebbsnn::tensor::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FIXED_POINT_TOL: f64 = 1e-6;
const FIXED_POINT_MAX_ITERS: usize = 200;
const FUZZ_EPISODES: usize = 1000;
const FUZZ_STEPS: usize = 500;
const GRAD_TOL: f64 = 1e-4;
const LIF_GRAD_TOL: f64 = 1e-12;
const RECALL_TRIALS: usize = 200;
const RECALL_MIN: f64 = 0.95;
const ASSOC_ITERATIONS: usize = 300;
const ASSOC_MIN: f64 = 0.90;
const OOD_ITERATIONS: usize = 300;
const OOD_MIN: f64 = 2.0 / 30.0 * 2.0;
const BASELINE_GAMES: usize = 10_000;
const PPO_MAX_FLIPS: f64 = 8.0;
const CONVERSION_MIN_R: f64 = 0.95;
const REGULARIZER_TOL: f64 = 1e-12;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn fixed_point() -> Outcome {
    let p = HebbianParams::default();
    let mut w = Matrix::zeros(1, 1);
    let mut reached = None;
    for k in 1..=FIXED_POINT_MAX_ITERS {
        let d = hebbian_update(&w, &[1.0], &[1.0], &p).unwrap();
        w.data[0] += d.data[0];
        if reached.is_none() && (w.data[0] - 0.5).abs() < FIXED_POINT_TOL {
            reached = Some(k);
        }
    }
    let err = (w.data[0] - 0.5).abs();
    outcome(reached.is_some() && err < FIXED_POINT_TOL, format!("W={:.9} within {FIXED_POINT_TOL:e} after {reached:?} iterations", w.data[0]))
}

fn weight_bounds() -> Outcome {
    let (l, d) = (100, 160);
    let lif = LifParams::default();
    let hebb = HebbianParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..FUZZ_EPISODES {
        let scale = rng.random_range(0.0..0.5);
        let mut m = |r: usize, c: usize| Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-0.2..1.0) * scale).collect()).unwrap();
        let weights = MemoryWeights { w_s_key: m(l, d), w_s_value: m(l, d), w_r_key: m(l, d + l) };
        let mut mem = HebbianMemoryState::new(weights, 1).unwrap();
        let rate = rng.random_range(0.0..0.4);
        let store_steps = rng.random_range(0..=FUZZ_STEPS);
        for t in 0..FUZZ_STEPS {
            let z: Vec<f64> = (0..d).map(|_| (rng.random::<f64>() < rate) as u8 as f64).collect();
            let mode = if t < store_steps { StepMode::Store } else { StepMode::Recall };
            mem.step(mode, &z, &lif, &hebb).unwrap();
            for &x in &mem.dynamics.w_assoc.data {
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
    }
    outcome(lo >= 0.0 && hi <= 1.0, format!("W_assoc range [{lo:.4}, {hi:.4}] over {FUZZ_EPISODES} episodes of {FUZZ_STEPS} steps"))
}

/// Two LIF steps of one neuron driven by `w * x_t` from membrane `v0`;
/// loss `z_2 + V_2`. Returns (graph gradient, hand-derived gradient).
fn lif_two_steps(w: f64, x: [f64; 2], v0: f64) -> (f64, f64) {
    let p = LifParams::default();
    let mut g = Graph::new();
    let wn = g.param_vec(vec![w]);
    let mut state = LifLayerState::new(1);
    state.membrane[0] = v0;
    let mut node = LifNode::from_state(&mut g, &state);
    let mut z2 = None;
    for &xt in &x {
        let i = g.scale(wn, xt).unwrap();
        z2 = Some(node.step(&mut g, i, &p).unwrap());
    }
    let loss = g.lincomb(&[(z2.unwrap(), 1.0), (node.membrane, 1.0)], 0.0).unwrap();
    let graph = g.backward(loss).unwrap().get_or_zeros(wn, 1)[0];

    let (a, th) = (p.alpha(), p.theta);
    let z1 = if v0 > th { 1.0 } else { 0.0 };
    let v1 = a * v0 + (1.0 - a) * w * x[0] - th * z1;
    let dv1 = (1.0 - a) * x[0];
    let blocked = z1 > 0.0;
    let vn = (v1 - th) / th;
    let dz2 = if blocked { 0.0 } else { p.beta * (1.0 - vn.abs()).max(0.0) / th * dv1 };
    let dv2 = a * dv1 + (1.0 - a) * x[1] - th * dz2;
    (graph, dz2 + dv2)
}

fn gradient_fidelity() -> Outcome {
    let report = smooth_op_report(5, 1e-6).unwrap();
    let (worst_op, worst) = report.iter().copied().fold(("", 0.0), |acc, (op, e)| if e > acc.1 { (op, e) } else { acc });
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut lif_err = 0.0f64;
    let mut active = 0;
    for _ in 0..200 {
        let w = rng.random_range(0.0..0.3);
        let x = [rng.random_range(0.0..3.0), rng.random_range(-1.0..1.0)];
        let v0 = rng.random_range(0.0..0.15);
        let (graph, hand) = lif_two_steps(w, x, v0);
        lif_err = lif_err.max((graph - hand).abs());
        active += (graph != 0.0) as usize;
    }
    let pass = worst <= GRAD_TOL && lif_err <= LIF_GRAD_TOL;
    outcome(pass, format!("{} ops, worst {worst_op} {worst:.2e} (tol {GRAD_TOL:e}); 2-step LIF |diff| {lif_err:.1e} (tol {LIF_GRAD_TOL:e}, {active} nonzero)", report.len()))
}

/// Store 5 bindings between disjoint 10-neuron groups, then cue one key for
/// 30 steps. True when the cued partner's value group is the most similar to the recalled counts.
fn recall_trial(rng: &mut ChaCha8Rng) -> bool {
    const GROUPS: usize = 5;
    const WIDTH: usize = 10;
    let n = GROUPS * WIDTH;
    let lif = LifParams::default();
    let hebb = HebbianParams::default();
    let mut partner: Vec<usize> = (0..GROUPS).collect();
    partner.shuffle(rng);
    let gain = 1.0;
    let mut w_s_key = Matrix::zeros(n, n);
    let mut w_s_value = Matrix::zeros(n, n);
    let mut w_r_key = Matrix::zeros(n, 2 * n);
    for gi in 0..GROUPS {
        for k in 0..WIDTH {
            let i = gi * WIDTH + k;
            w_s_key.data[i * n + i] = gain;
            w_r_key.data[i * 2 * n + i] = gain;
            w_s_value.data[(partner[gi] * WIDTH + k) * n + i] = gain;
        }
    }
    let mut mem = HebbianMemoryState::new(MemoryWeights { w_s_key, w_s_value, w_r_key }, 1).unwrap();
    let input = |group: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|i| if i / WIDTH == group { (rng.random::<f64>() < 0.5) as u8 as f64 } else { (rng.random::<f64>() < 0.02) as u8 as f64 }).collect()
    };
    for gi in 0..GROUPS {
        for _ in 0..100 {
            let z = input(gi, rng);
            mem.step(StepMode::Store, &z, &lif, &hebb).unwrap();
        }
    }
    let cue = rng.random_range(0..GROUPS);
    let mut counts = vec![0.0; n];
    for _ in 0..30 {
        let z = input(cue, rng);
        let (_, zv) = mem.step(StepMode::Recall, &z, &lif, &hebb).unwrap();
        counts.iter_mut().zip(&zv).for_each(|(c, x)| *c += x);
    }
    let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm == 0.0 {
        return false;
    }
    let sim: Vec<f64> = (0..GROUPS).map(|g| counts[g * WIDTH..(g + 1) * WIDTH].iter().sum::<f64>() / (norm * (WIDTH as f64).sqrt())).collect();
    let target = partner[cue];
    (0..GROUPS).all(|g| g == target || sim[target] > sim[g])
}

fn store_recall() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let hits = (0..RECALL_TRIALS).filter(|_| recall_trial(&mut rng)).count();
    let frac = hits as f64 / RECALL_TRIALS as f64;
    outcome(frac >= RECALL_MIN, format!("{hits}/{RECALL_TRIALS} recalls closest to the bound partner (need {RECALL_MIN})"))
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hebbsnn")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn summary_value(stdout: &str, key: &str) -> Option<f64> {
    stdout.lines().rev().find_map(|l| l.split_whitespace().find_map(|kv| kv.strip_prefix(&format!("{key}="))?.parse().ok()))
}

fn train_run(args: &[&str], key: &str, check: impl Fn(f64) -> bool, what: &str) -> Outcome {
    match cli(args) {
        Ok(stdout) => match summary_value(&stdout, key) {
            Some(v) => outcome(check(v), format!("{key}={v:.4} ({what})")),
            None => outcome(false, format!("no {key} in output: {stdout}")),
        },
        Err(e) => outcome(false, format!("run failed: {e}")),
    }
}

fn desk_association(dir: &Path) -> Outcome {
    let out = dir.join("assoc");
    let iters = ASSOC_ITERATIONS.to_string();
    train_run(
        &["train", "--task", "assoc", "--preset", "desk", "--seed", "0", "--iterations", &iters, "--out", out.to_str().unwrap()],
        "accuracy",
        |a| a >= ASSOC_MIN,
        &format!("N=3 after {ASSOC_ITERATIONS} iterations of batch 64, 2000 held-out episodes, need {ASSOC_MIN}"),
    )
}

fn desk_ood(dir: &Path) -> Outcome {
    let out = dir.join("ood");
    let iters = OOD_ITERATIONS.to_string();
    train_run(
        &[
            "train", "--task", "ood", "--preset", "desk", "--seed", "0", "--iterations", &iters, "--override", "eval.lengths=[3,6]", "--out",
            out.to_str().unwrap(),
        ],
        "accuracy",
        |a| a >= OOD_MIN,
        &format!("N_test=6, L_max=30, trained at N=3 for {OOD_ITERATIONS} iterations, need {OOD_MIN:.3}"),
    )
}

fn baselines() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for (n, random_target, random_tol, optimal_target, optimal_tol) in [(2, 16.0, 0.5, 5.33, 0.15), (3, 36.0, 1.0, 8.65, 0.2)] {
        let mut rng = ChaCha8Rng::seed_from_u64(14 + n as u64);
        let random = mean(&random_agent_eval(n, BASELINE_GAMES, &mut rng).unwrap());
        let optimal_games = optimal_agent_eval(n, BASELINE_GAMES, &mut rng).unwrap();
        let optimal = mean(&optimal_games);
        let in_range = optimal_games.iter().all(|&f| f >= 2 * n && f <= 4 * n - 2);
        pass &= (random - random_target).abs() <= random_tol && (optimal - optimal_target).abs() <= optimal_tol && in_range;
        notes.push(format!("n={n} random {random:.2} optimal {optimal:.3} lengths in [{}, {}]: {in_range}", 2 * n, 4 * n - 2));
    }
    outcome(pass, notes.join("; "))
}

fn desk_ppo(dir: &Path) -> Outcome {
    let out = dir.join("rl");
    train_run(
        &["train", "--task", "rl", "--preset", "desk", "--seed", "0", "--out", out.to_str().unwrap()],
        "mean_flips",
        |f| f <= PPO_MAX_FLIPS,
        &format!("4 cards, 500 iterations x 16 envs, greedy over 1000 games, need <= {PPO_MAX_FLIPS}"),
    )
}

fn conversion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let net = DenseReluNet::random(&[20, 15, 10], &mut rng).unwrap();
    let mut draw = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..20).map(|_| rng.random::<f64>()).collect()).collect() };
    let calibration = draw(200);
    let held_out = draw(200);
    let cfg = ConversionConfig::default();
    let t = balance_thresholds(&net, &calibration, &cfg).unwrap();
    let r = conversion_fidelity(&net, &t, &held_out, &cfg).unwrap();
    outcome(r.iter().all(|&x| x >= CONVERSION_MIN_R), format!("per-layer r {r:.4?} (need {CONVERSION_MIN_R})"))
}

fn raster(spikes: &[&[usize]], steps: usize) -> SpikeRaster {
    let mut r = SpikeRaster::new(spikes.len());
    for t in 0..steps {
        r.push(spikes.iter().map(|s| s.contains(&t) as u8 as f64).collect());
    }
    r
}

fn regularizer() -> Outcome {
    let lambda = 1e-5;
    let base = raster(&[&[2], &[0, 4, 8]], 10);
    let doubled = raster(&[&[2, 6], &[0, 1, 4, 5, 8, 9]], 10);
    let silent = raster(&[&[], &[]], 10);
    let cases = [
        ("rates 0.1/0.3", rate_regularizer(&[vec![base.clone()]], lambda, 0.0).unwrap(), 5e-7),
        ("doubled counts", rate_regularizer(&[vec![doubled]], lambda, 0.0).unwrap(), 4.0 * 5e-7),
        ("silent", rate_regularizer(&[vec![silent.clone()]], lambda, 0.0).unwrap(), 0.0),
        ("batch of two", rate_regularizer(&[vec![base.clone(), base.clone()]], lambda, 0.0).unwrap(), 5e-7),
        ("two layers", rate_regularizer(&[vec![base.clone()], vec![silent]], lambda, 0.0).unwrap(), 5e-7),
        ("target 0.2", rate_regularizer(&[vec![base]], lambda, 0.2).unwrap(), lambda * (0.01 + 0.01) / 2.0),
    ];
    let worst = cases.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    outcome(worst <= REGULARIZER_TOL, format!("{} constructed cases, max |error| {worst:.1e} (tol {REGULARIZER_TOL:e})", cases.len()))
}

fn determinism(dir: &Path) -> Outcome {
    let runs: [&[&str]; 4] = [
        &["train", "--task", "assoc", "--iterations", "3", "--override", "train.batch_size=8", "--override", "eval.episodes=50"],
        &["train", "--task", "rl", "--iterations", "2", "--override", "eval.games=20", "--override", "ppo.checkpoint_interval=1"],
        &["train", "--task", "convert-demo", "--override", "conversion.calibration=50", "--override", "conversion.held_out=50"],
        &["train", "--task", "gradcheck"],
    ];
    let mut compared = 0;
    for (k, args) in runs.iter().enumerate() {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let out = dir.join(format!("det{k}_{rep}"));
            let mut full: Vec<&str> = args.to_vec();
            let out_s = out.to_str().unwrap().to_string();
            full.extend(["--seed", "3", "--out", &out_s]);
            let stdout = match cli(&full) {
                Ok(s) => s,
                Err(e) => return outcome(false, format!("{args:?} failed: {e}")),
            };
            let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&out)
                .unwrap()
                .map(|e| e.unwrap())
                .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
                .collect();
            files.sort();
            outputs.push((stdout, files));
        }
        if outputs[0] != outputs[1] {
            return outcome(false, format!("{args:?} differs between identical runs"));
        }
        compared += outputs[0].1.len();
    }
    outcome(true, format!("{} commands run twice, {compared} output files and stdout byte-identical", runs.len()))
}

fn main() {
    let skip_slow = std::env::var_os("ACCEPTANCE_SKIP_SLOW").is_some();
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, bool, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("hebbian fixed point", false, Box::new(fixed_point)),
        ("weight boundedness fuzz", false, Box::new(weight_bounds)),
        ("gradient fidelity", false, Box::new(gradient_fidelity)),
        ("store/recall round trip", false, Box::new(store_recall)),
        ("desk association", true, Box::new(|| desk_association(dir.path()))),
        ("desk OOD", true, Box::new(|| desk_ood(dir.path()))),
        ("concentration baselines", false, Box::new(baselines)),
        ("desk PPO", true, Box::new(|| desk_ppo(dir.path()))),
        ("conversion fidelity", false, Box::new(conversion)),
        ("regularizer exactness", false, Box::new(regularizer)),
        ("determinism", false, Box::new(|| determinism(dir.path()))),
    ];
    let mut failed = 0;
    for (i, (name, slow, run)) in criteria.iter().enumerate() {
        if *slow && skip_slow {
            println!("SKIP {:>2} {name}", i + 1);
            continue;
        }
        let start = Instant::now();
        let o = run();
        failed += (!o.pass) as usize;
        println!("{} {:>2} {name}: {} [{:.1} s]", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail, start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
