//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use adpm_core::data::{generate_longtail, train_test_split, DatasetTable, GaussianMixture, LongTailSpec};
use adpm_core::denoiser::DenoiserConfig;
use adpm_core::diffusion::{forward_sample, reverse_step, Branch};
use adpm_core::loss::{mmd_loss, BandwidthMode, KernelConfig};
use adpm_core::metrics::{bound_check, classification_metrics, BoundSettings, HypothesisGrid, MetricsReport};
use adpm_core::nn::Parameters;
use adpm_core::numkernel::Tensor2;
use adpm_core::rng::{normal_vec, stream};
use adpm_core::schedule::{imbalance_ratio, lambda_vector, linear_beta, ClassCensus, NoiseLevelConfig, NoiseSchedule};
use adpm_core::sweep::run_sweep;
use adpm_core::trainer::{draw_sample, fit, train_step, training_census, FitOptions, Model, TrainConfig};
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn under(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn c1_imbalance_table() -> Verdict {
    let start = Instant::now();
    let cases = [((845, 52), 16), ((6705, 115), 58), ((1078, 3), 359), ((1148, 6), 191)];
    let mut got = Vec::new();
    for ((max, min), want) in cases {
        let ir = imbalance_ratio(&ClassCensus::new(vec![max, min]).unwrap()).table();
        got.push((ir, want));
    }
    let elapsed = start.elapsed();
    let ok = got.iter().all(|(g, w)| g == w);
    verdict(ok && under(elapsed, 1.0), format!("IR {:?} in {:?}", got.iter().map(|p| p.0).collect::<Vec<_>>(), elapsed))
}

/// Plain DDPM coded from `alpha_t = 1 - beta_t`, sharing nothing with the library.
struct Ddpm {
    beta: Vec<f64>,
    abar: Vec<f64>,
}

impl Ddpm {
    fn new(horizon: usize, b1: f64, bt: f64) -> Self {
        let beta: Vec<f64> = (0..horizon)
            .map(|i| b1 + (bt - b1) * i as f64 / (horizon - 1) as f64)
            .collect();
        let mut abar = vec![1.0];
        for b in &beta {
            abar.push(abar.last().unwrap() * (1.0 - b));
        }
        Self { beta, abar }
    }

    fn forward(&self, t: usize, x0: &[f64], eps: &[f64]) -> Vec<f64> {
        let a = self.abar[t];
        x0.iter().zip(eps).map(|(x, e)| a.sqrt() * x + (1.0 - a).sqrt() * e).collect()
    }

    fn reverse(&self, t: usize, x: &[f64], eps: &[f64], z: &[f64]) -> Vec<f64> {
        let b = self.beta[t - 1];
        let sigma = (b * (1.0 - self.abar[t - 1]) / (1.0 - self.abar[t])).sqrt();
        (0..x.len())
            .map(|i| (x[i] - b / (1.0 - self.abar[t]).sqrt() * eps[i]) / (1.0 - b).sqrt() + sigma * z[i])
            .collect()
    }
}

fn c2_isotropic_reduction() -> Verdict {
    let (horizon, k) = (200, 4);
    let sched = NoiseSchedule::build(linear_beta(horizon, 1e-4, 0.02).unwrap(), vec![1.0; k]).unwrap();
    let reference = Ddpm::new(horizon, 1e-4, 0.02);
    let zero = vec![0.0; k];
    let mut rng = stream(2, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let class = rng.random_range(0..k);
        let y0 = normal_vec(&mut rng, k);
        let t = rng.random_range(0..=horizon);
        let draw = forward_sample(&sched, class, &y0, &zero, t, Branch::Fused, &mut rng).unwrap();
        for (a, b) in draw.y_t.iter().zip(reference.forward(t, &y0, &draw.eps)) {
            worst = worst.max((a - b).abs());
        }
        let t = rng.random_range(1..=horizon);
        let (y, eps, z) = (normal_vec(&mut rng, k), normal_vec(&mut rng, k), normal_vec(&mut rng, k));
        let ours = reverse_step(&sched, class, t, &y, &zero, &eps, &z).unwrap();
        for (a, b) in ours.iter().zip(reference.reverse(t, &y, &eps, &z)) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(worst < 1e-12, format!("max |diff| {worst:.3e} over 1e4 forward and 1e4 reverse inputs"))
}

fn c3_forward_marginal() -> Verdict {
    let start = Instant::now();
    let (horizon, k, n) = (100, 3, 100_000);
    let sched = NoiseSchedule::build(linear_beta(horizon, 1e-4, 0.02).unwrap(), vec![1.0, 6.0, 20.0]).unwrap();
    let mut pick = stream(3, &[]);
    let mut ok = true;
    let mut worst_z: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for _ in 0..5 {
        let class = pick.random_range(0..k);
        let t = pick.random_range(1..=horizon);
        let mut y0 = vec![0.0; k];
        y0[pick.random_range(0..k)] = 1.0;
        let prior: Vec<f64> = (0..k).map(|_| pick.random::<f64>()).collect();
        let g = sched.gamma(class, t);
        let mut rng = stream(3, &[class as u64, t as u64]);
        let mut sum = vec![0.0; k];
        let mut sq = vec![0.0; k];
        for _ in 0..n {
            let d = forward_sample(&sched, class, &y0, &prior, t, Branch::Fused, &mut rng).unwrap();
            for i in 0..k {
                sum[i] += d.y_t[i];
                sq[i] += d.y_t[i] * d.y_t[i];
            }
        }
        for i in 0..k {
            let mean = sum[i] / n as f64;
            let var = (sq[i] - n as f64 * mean * mean) / (n - 1) as f64;
            let want_mean = g.sqrt() * y0[i] + (1.0 - g.sqrt()) * prior[i];
            let se = ((1.0 - g) / n as f64).sqrt();
            let zs = (mean - want_mean).abs() / se;
            let rel = (var / (1.0 - g) - 1.0).abs();
            worst_z = worst_z.max(zs);
            worst_var = worst_var.max(rel);
            ok &= zs <= 4.0 && rel <= 0.02;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        ok && under(elapsed, 30.0),
        format!("worst mean offset {worst_z:.2} SE, worst variance error {:.2}% in {elapsed:?}", 100.0 * worst_var),
    )
}

fn fd_config() -> TrainConfig {
    TrainConfig {
        horizon: 50,
        sample_steps: 10,
        prior_hidden: 8,
        mask_size: 2,
        denoiser: DenoiserConfig {
            hidden: 8,
            att_dim: 4,
            time_dim: 4,
        },
        seed: 4,
        ..TrainConfig::default()
    }
}

fn c4_gradient_check() -> Verdict {
    let table = generate_longtail(&LongTailSpec {
        k: 3,
        head_count: 12,
        d: 4,
        seed: 4,
        ..LongTailSpec::default()
    })
    .unwrap();
    let cfg = fd_config();
    let model = Model::init(&cfg, training_census(&table).unwrap(), table.dim()).unwrap();
    let schedule = model.schedule().unwrap();
    let rows: Vec<usize> = (0..6).map(|i| i * table.len() / 6).collect();
    let draws: Vec<_> = rows
        .iter()
        .map(|&r| draw_sample(cfg.seed, 0, r, cfg.horizon, table.classes()))
        .collect();
    let loss = |m: &Model| train_step(m, &schedule, &table, &rows, &draws).unwrap().report.l_total;
    let grads = train_step(&model, &schedule, &table, &rows, &draws).unwrap().all_grads();

    let sizes: Vec<usize> = grads.iter().map(Tensor2::len).collect();
    let total: usize = sizes.iter().sum();
    let n_enc = model.encoder.blocks().len();
    let h = 1e-5;
    let mut rng = stream(4, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut flat = rng.random_range(0..total);
        let mut block = 0;
        while flat >= sizes[block] {
            flat -= sizes[block];
            block += 1;
        }
        let nudge = |delta: f64| {
            let mut m = model.clone();
            let slot = if block < n_enc {
                &mut m.encoder.blocks_mut()[block]
            } else {
                &mut m.denoiser.blocks_mut()[block - n_enc]
            };
            slot.as_mut_slice()[flat] += delta;
            loss(&m)
        };
        let numeric = (nudge(h) - nudge(-h)) / (2.0 * h);
        let analytic = grads[block].as_slice()[flat];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    verdict(worst < 1e-4, format!("worst relative error {worst:.3e} over 100 coordinates of {total}"))
}

fn random_batch<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor2 {
    let scale = rng.random_range(0.1..3.0);
    Tensor2::new(rows, cols, normal_vec(rng, rows * cols).into_iter().map(|v| v * scale).collect()).unwrap()
}

fn c5_mmd_axioms() -> Verdict {
    let mut rng = stream(5, &[]);
    let (mut self_max, mut asym_max, mut min_val): (f64, f64, f64) = (0.0, 0.0, f64::INFINITY);
    for i in 0..1000 {
        let cols = rng.random_range(1..8);
        let (nx, ny) = (rng.random_range(1..20), rng.random_range(1..20));
        let x = random_batch(&mut rng, nx, cols);
        let y = random_batch(&mut rng, ny, cols);
        let cfg = KernelConfig {
            bandwidth: rng.random_range(0.2..4.0),
            mode: if i % 2 == 0 { BandwidthMode::Fixed } else { BandwidthMode::Median },
        };
        let xy = mmd_loss(&x, &y, &cfg).unwrap();
        let yx = mmd_loss(&y, &x, &cfg).unwrap();
        self_max = self_max.max(mmd_loss(&x, &x, &cfg).unwrap().abs());
        asym_max = asym_max.max((xy - yx).abs());
        min_val = min_val.min(xy).min(yx);
    }
    let ok = self_max <= 1e-12 && asym_max <= 1e-12 && min_val >= -1e-12;
    verdict(
        ok,
        format!("max MMD(X,X) {self_max:.2e}, max asymmetry {asym_max:.2e}, min {min_val:.2e} over 1000 pairs"),
    )
}

fn c6_gamma_ordering() -> Verdict {
    let mut rng = stream(6, &[]);
    let (mut built, mut rec_err, mut order_violations): (usize, f64, usize) = (0, 0.0, 0);
    for i in 0..1000 {
        let horizon = rng.random_range(1..300);
        let b1 = rng.random_range(1e-5..1e-2);
        let bt = rng.random_range(b1..0.05);
        let beta = linear_beta(horizon, b1, bt).unwrap();
        let k = rng.random_range(1..8);
        let lambda: Vec<f64> = if i % 2 == 0 {
            (0..k).map(|_| rng.random_range(0.5..20.0)).collect()
        } else {
            let counts: Vec<u64> = (0..k).map(|_| rng.random_range(1..2000)).collect();
            let cfg = NoiseLevelConfig {
                alpha: rng.random_range(0.0..1.0),
                c: rng.random_range(0.1..5.0),
                ..NoiseLevelConfig::default()
            };
            lambda_vector(&ClassCensus::new(counts).unwrap(), &cfg)
        };
        let Ok(s) = NoiseSchedule::build(beta.clone(), lambda.clone()) else {
            continue;
        };
        built += 1;
        for j in 0..k {
            for t in 1..=horizon {
                let want = s.gamma(j, t - 1) * (1.0 - lambda[j] * beta[t - 1]);
                rec_err = rec_err.max((s.gamma(j, t) - want).abs());
            }
            for m in 0..k {
                if lambda[j] < lambda[m] {
                    order_violations += (0..=horizon).filter(|&t| s.gamma(j, t) < s.gamma(m, t)).count();
                }
            }
        }
    }
    let ok = built >= 500 && rec_err <= 1e-14 && order_violations == 0;
    verdict(
        ok,
        format!("{built} feasible schedules, recurrence error {rec_err:.2e}, {order_violations} ordering violations"),
    )
}

fn efficacy_config(seed: u64, noise_level: &str) -> TrainConfig {
    TrainConfig {
        horizon: 100,
        sample_steps: 25,
        noise: NoiseLevelConfig {
            alpha: 1.0 / 6.0,
            c: 5.0,
            ..NoiseLevelConfig::default()
        },
        noise_level: noise_level.into(),
        prior_hidden: 32,
        denoiser: DenoiserConfig {
            hidden: 32,
            att_dim: 16,
            time_dim: 16,
        },
        seed,
        ..TrainConfig::default()
    }
}

fn evaluate(train: &DatasetTable, test: &DatasetTable, cfg: &TrainConfig) -> MetricsReport {
    let model = fit(train, cfg, &FitOptions::default()).unwrap().model;
    let preds: Vec<usize> = model.predict(test, false).unwrap().iter().map(|o| o.class).collect();
    classification_metrics(test.labels(), &preds, test.classes()).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn longtail_split(seed: u64) -> (DatasetTable, DatasetTable) {
    let data = generate_longtail(&LongTailSpec { seed, ..LongTailSpec::default() }).unwrap();
    train_test_split(&data, 0.7, seed).unwrap()
}

fn c7_efficacy() -> Verdict {
    let start = Instant::now();
    let (mut acc, mut f1, mut base_f1) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..5 {
        let (train, test) = longtail_split(seed);
        let ours = evaluate(&train, &test, &efficacy_config(seed, "anisotropic"));
        let base = evaluate(&train, &test, &efficacy_config(seed, "isotropic"));
        acc.push(ours.accuracy);
        f1.push(ours.macro_f1);
        base_f1.push(base.macro_f1);
    }
    let elapsed = start.elapsed();
    let min_acc = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let (m_f1, m_base) = (median(f1.clone()), median(base_f1.clone()));
    let ok = min_acc >= 0.90 && m_f1 >= m_base && under(elapsed, 600.0);
    verdict(
        ok,
        format!(
            "accuracy per seed {acc:.3?} (min {min_acc:.3}); median macro-F1 {m_f1:.4} vs baseline {m_base:.4} \
             (per seed {f1:.3?} vs {base_f1:.3?}) in {elapsed:.1?}"
        ),
    )
}

fn c8_alpha_zero_row() -> Verdict {
    let (train, test) = longtail_split(8);
    let base = TrainConfig {
        epochs: 30,
        ..efficacy_config(8, "anisotropic")
    };
    let r = run_sweep(&train, &test, &base, &[0.0, 1.0 / 6.0], &[1.0, 5.0], &[8], None).unwrap();
    let row = &r.f1[0];
    let constant = row.iter().all(|v| v.to_bits() == row[0].to_bits());
    verdict(constant, format!("alpha=0 row {row:?}, alpha=1/6 row {:?}", r.f1[1]))
}

fn c9_bound() -> Verdict {
    let start = Instant::now();
    let settings = BoundSettings {
        seed: 9,
        ..BoundSettings::default()
    };
    let mixture = GaussianMixture::place(2, 2, 2.0, 1.0, settings.seed).unwrap();
    let grid = HypothesisGrid::thresholds(2, 16, -3.0, 3.0).unwrap();
    let report = bound_check(&mixture, &grid, &settings).unwrap();
    let elapsed = start.elapsed();
    let held = 1.0 - report.violation_rate;
    let ok = settings.trials == 200 && settings.population == 100_000 && settings.delta == 0.05;
    verdict(
        ok && grid.len() <= 1024 && held >= 0.95 && under(elapsed, 300.0),
        format!(
            "bound held in {:.1}% of {} draws over {} hypotheses, min margin {:.4}, in {elapsed:.1?}",
            100.0 * held,
            report.trials,
            grid.len(),
            report.min_margin
        ),
    )
}

fn c10_determinism() -> Verdict {
    let table = generate_longtail(&LongTailSpec {
        head_count: 30,
        seed: 10,
        ..LongTailSpec::default()
    })
    .unwrap();
    let (train, test) = train_test_split(&table, 0.7, 10).unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        warmup_epochs: 3,
        ..efficacy_config(10, "anisotropic")
    };
    let run = || {
        let out = fit(&train, &cfg, &FitOptions::default()).unwrap();
        let samples = out.model.predict(&test, true).unwrap();
        let preds: Vec<usize> = samples.iter().map(|o| o.class).collect();
        let report = classification_metrics(test.labels(), &preds, test.classes()).unwrap();
        (
            out.checkpoint.to_json().unwrap(),
            serde_json::to_string(&samples).unwrap(),
            serde_json::to_string(&report).unwrap(),
        )
    };
    let a = run();
    let b = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(run);
    let half = fit(
        &train,
        &cfg,
        &FitOptions {
            stop_after: Some(3),
            ..FitOptions::default()
        },
    )
    .unwrap();
    let resumed = fit(
        &train,
        &cfg,
        &FitOptions {
            resume: Some(half.checkpoint),
            ..FitOptions::default()
        },
    )
    .unwrap();
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2, resumed.checkpoint.to_json().unwrap() == a.0];
    verdict(
        same.iter().all(|&s| s),
        format!("checkpoint, samples, metrics, resume identical: {same:?}"),
    )
}

#[test]
fn acceptance() {
    let checks: [(&str, fn() -> Verdict); 10] = [
        ("imbalance ratio table", c1_imbalance_table),
        ("isotropic reduction", c2_isotropic_reduction),
        ("forward marginal", c3_forward_marginal),
        ("gradient check", c4_gradient_check),
        ("MMD axioms", c5_mmd_axioms),
        ("gamma feasibility and ordering", c6_gamma_ordering),
        ("end-to-end efficacy", c7_efficacy),
        ("alpha=0 sweep row", c8_alpha_zero_row),
        ("generalization bound", c9_bound),
        ("determinism", c10_determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in checks.iter().enumerate() {
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        println!("criterion {:>2} {:<32} {}  {}", i + 1, name, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
