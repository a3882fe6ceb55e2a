use std::path::Path;

use adpm_core::checkpoint::Checkpoint;
use adpm_core::data::{load_csv, DatasetTable, GaussianMixture};
use adpm_core::metrics::{bound_check, classification_metrics, HypothesisGrid};
use adpm_core::schedule::{class_proportions, imbalance_ratio, ClassCensus};
use adpm_core::sweep::run_sweep;
use adpm_core::trainer::{fit, training_census, FitOptions, Model};
use anyhow::Context;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{BoundArgs, Cli, Command, DataArgs, EvalArgs, ModelArgs, NoiseArgs, SampleArgs, ScheduleArgs, SweepArgs, TrainArgs, UsageError};

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    // A resumed run reuses the config written next to its checkpoint.
    let sibling = match (&cli.command, &cli.config) {
        (Command::Train(TrainArgs { resume: Some(ck), .. }), None) => {
            ck.parent().map(|d| d.join("config.json")).filter(|p| p.exists())
        }
        _ => None,
    };
    let mut cfg = RunConfig::load(cli.config.as_deref().or(sibling.as_deref()))?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let out = cli.out.as_deref();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    match &cli.command {
        Command::Schedule(a) => schedule(cfg, a, out),
        Command::Train(a) => train(cfg, a, out),
        Command::Eval(a) => eval(cfg, a, out),
        Command::Sample(a) => sample(cfg, a, out),
        Command::Sweep(a) => sweep(cfg, a, out),
        Command::Bound(a) => bound(cfg, a, out),
    }
}

fn apply_noise(cfg: &mut RunConfig, a: &NoiseArgs) {
    let t = &mut cfg.train;
    if let Some(v) = a.alpha {
        t.noise.alpha = v;
    }
    if let Some(v) = a.c {
        t.noise.c = v;
    }
    if let Some(v) = a.a {
        t.noise.a = v;
    }
    if let Some(v) = a.b {
        t.noise.b = v;
    }
    if let Some(v) = &a.noise_level {
        t.noise_level = v.clone();
    }
    if let Some(v) = a.horizon {
        t.horizon = v;
    }
    if let Some(v) = a.beta1 {
        t.beta1 = v;
    }
    if let Some(v) = a.beta_t {
        t.beta_t = v;
    }
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) {
    let d = &mut cfg.data;
    if let Some(p) = &a.data {
        d.csv = Some(p.clone());
    }
    if let Some(p) = &a.test_data {
        d.test_csv = Some(p.clone());
    }
    if let Some(v) = a.classes {
        d.classes = Some(v);
    }
    let s = &mut d.synthetic;
    if let Some(v) = a.k {
        s.k = v;
    }
    if let Some(v) = a.head {
        s.head_count = v;
    }
    if let Some(v) = a.decay {
        s.decay = v;
    }
    if let Some(v) = a.dim {
        s.d = v;
    }
    if let Some(v) = a.separation {
        s.separation = v;
    }
    if let Some(v) = a.spread {
        s.spread = v;
    }
    if let Some(v) = a.train_frac {
        d.train_frac = v;
    }
}

fn apply_model(cfg: &mut RunConfig, a: &ModelArgs) {
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.warmup_epochs {
        t.warmup_epochs = v;
    }
    if let Some(v) = a.sample_steps {
        t.sample_steps = v;
    }
    if let Some(v) = a.w {
        t.w = v;
    }
    if let Some(v) = &a.optimizer {
        t.optimizer = v.clone();
    }
    if let Some(v) = a.hidden {
        t.denoiser.hidden = v;
        t.prior_hidden = v;
    }
}

fn write_or_print(out: Option<&Path>, name: &str, text: &str) -> anyhow::Result<()> {
    match out {
        Some(dir) => {
            let path = dir.join(name);
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn schedule(mut cfg: RunConfig, a: &ScheduleArgs, out: Option<&Path>) -> anyhow::Result<()> {
    apply_noise(&mut cfg, &a.noise);
    let counts = match (&a.data, a.counts.is_empty()) {
        (Some(path), true) => load_csv(path, a.classes)?.class_counts(),
        (None, false) => a.counts.clone(),
        (Some(_), false) => return Err(UsageError("give either --counts or --data, not both".into()).into()),
        (None, true) => return Err(UsageError("schedule needs --counts or --data".into()).into()),
    };
    let census = ClassCensus::new(counts).map_err(|e| UsageError(e.to_string()))?;
    cfg.train.noise.validate()?;
    let sched = cfg.train.schedule(&census)?;
    let props = class_proportions(&census, &cfg.train.noise)?;

    let mut lam = String::from("class,count,proportion,lambda\n");
    for j in 0..census.classes() {
        lam.push_str(&format!("{j},{},{:?},{:?}\n", census.counts()[j], props[j], sched.lambda(j)));
    }
    let mut gam = String::from("t");
    for j in 0..census.classes() {
        gam.push_str(&format!(",class{j}"));
    }
    gam.push('\n');
    for t in 0..=sched.horizon() {
        gam.push_str(&t.to_string());
        for j in 0..census.classes() {
            gam.push_str(&format!(",{:?}", sched.gamma(j, t)));
        }
        gam.push('\n');
    }

    println!("IR {}", imbalance_ratio(&census));
    match out {
        Some(dir) => {
            write_or_print(out, "lambda.csv", &lam)?;
            write_or_print(out, "gamma.csv", &gam)?;
            cfg.write(dir)?;
        }
        None => print!("{lam}"),
    }
    Ok(())
}

fn train(mut cfg: RunConfig, a: &TrainArgs, out: Option<&Path>) -> anyhow::Result<()> {
    apply_data(&mut cfg, &a.data);
    apply_noise(&mut cfg, &a.noise);
    apply_model(&mut cfg, &a.model);
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resume {
        cfg.train = ck.config.clone();
    }
    let (train, _) = cfg.data.load()?;
    if let Some(ck) = &resume {
        let census = training_census(&train)?;
        if ck.census != census.counts() {
            return Err(UsageError(format!(
                "checkpoint was trained on class counts {:?}, this data has {:?}; pass the same data and --seed",
                ck.census,
                census.counts()
            ))
            .into());
        }
    }
    let opts = FitOptions {
        out_dir: out.map(Path::to_path_buf),
        checkpoint_every: a.checkpoint_every,
        resume,
        stop_after: None,
    };
    if let Some(dir) = out {
        cfg.write(dir)?;
    }
    let outcome = fit(&train, &cfg.train, &opts)?;
    if out.is_none() {
        println!("{}", outcome.checkpoint.to_json()?);
    } else if let Some(last) = outcome.log.last() {
        println!("epoch {} loss {:.6}", last.epoch, last.l_total);
    }
    Ok(())
}

fn load_model(path: &Path, cfg: &mut RunConfig) -> anyhow::Result<Model> {
    let ck = Checkpoint::load(path)?;
    cfg.train = ck.config.clone();
    Ok(Model::from_checkpoint(&ck)?)
}

fn check_compatible(model: &Model, table: &DatasetTable) -> anyhow::Result<()> {
    if table.classes() != model.classes() || table.dim() != model.input_dim() {
        return Err(UsageError(format!(
            "checkpoint expects {} classes and {} features, data has {} and {}",
            model.classes(),
            model.input_dim(),
            table.classes(),
            table.dim()
        ))
        .into());
    }
    if table.is_empty() {
        return Err(UsageError("test set is empty".into()).into());
    }
    Ok(())
}

fn eval(mut cfg: RunConfig, a: &EvalArgs, out: Option<&Path>) -> anyhow::Result<()> {
    apply_data(&mut cfg, &a.data);
    let model = load_model(&a.checkpoint, &mut cfg)?;
    let (_, test) = cfg.data.load()?;
    check_compatible(&model, &test)?;
    let outcomes = model.predict(&test, false)?;
    let preds: Vec<usize> = outcomes.iter().map(|o| o.class).collect();
    let report = classification_metrics(test.labels(), &preds, test.classes())?;
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(dir) => {
            write_or_print(out, "metrics.json", &json)?;
            write_or_print(out, "per_class.csv", &report.per_class_csv())?;
            if a.embeddings {
                let mut csv = String::from("index,label,predicted");
                for j in 0..model.classes() {
                    csv.push_str(&format!(",y{j}"));
                }
                csv.push('\n');
                for (i, o) in outcomes.iter().enumerate() {
                    csv.push_str(&format!("{i},{},{}", test.labels()[i], o.class));
                    for v in &o.y0 {
                        csv.push_str(&format!(",{v:?}"));
                    }
                    csv.push('\n');
                }
                write_or_print(out, "embeddings.csv", &csv)?;
            }
            cfg.write(dir)?;
            println!("accuracy {:.4} macro-F1 {:.4}", report.accuracy, report.macro_f1);
        }
        None => println!("{json}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    index: usize,
    label: usize,
    class: usize,
    lambda: f64,
    y0: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<&'a [adpm_core::diffusion::Snapshot]>,
}

fn sample(mut cfg: RunConfig, a: &SampleArgs, out: Option<&Path>) -> anyhow::Result<()> {
    apply_data(&mut cfg, &a.data);
    let model = load_model(&a.checkpoint, &mut cfg)?;
    let (_, test) = cfg.data.load()?;
    check_compatible(&model, &test)?;
    let n = a.limit.min(test.len());
    let picked = test.subset(&(0..n).collect::<Vec<_>>());
    let outcomes = model.predict(&picked, a.trace)?;
    let records: Vec<SampleRecord> = outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| SampleRecord {
            index: i,
            label: picked.labels()[i],
            class: o.class,
            lambda: o.lambda,
            y0: &o.y0,
            trace: o.trace.as_deref(),
        })
        .collect();
    let json = serde_json::to_string_pretty(&records)?;
    write_or_print(out, "samples.json", &json)?;
    if let Some(dir) = out {
        cfg.write(dir)?;
    }
    Ok(())
}

fn sweep(mut cfg: RunConfig, a: &SweepArgs, out: Option<&Path>) -> anyhow::Result<()> {
    apply_data(&mut cfg, &a.data);
    apply_noise(&mut cfg, &a.noise);
    apply_model(&mut cfg, &a.model);
    if !a.alphas.is_empty() {
        cfg.sweep.alphas = a.alphas.clone();
    }
    if !a.cs.is_empty() {
        cfg.sweep.cs = a.cs.clone();
    }
    if !a.seeds.is_empty() {
        cfg.sweep.seeds = a.seeds.clone();
    }
    let (train, test) = cfg.data.load()?;
    if test.is_empty() {
        return Err(UsageError("sweep needs a non-empty test set".into()).into());
    }
    if let Some(dir) = out {
        cfg.write(dir)?;
    }
    let s = &cfg.sweep;
    let result = run_sweep(&train, &test, &cfg.train, &s.alphas, &s.cs, &s.seeds, out)?;
    let csv = result.to_csv();
    if out.is_some() {
        write_or_print(out, "f1.csv", &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn bound(mut cfg: RunConfig, a: &BoundArgs, out: Option<&Path>) -> anyhow::Result<()> {
    let b = &mut cfg.bound;
    if !a.counts.is_empty() {
        b.settings.counts = a.counts.clone();
    }
    if let Some(v) = a.delta {
        b.settings.delta = v;
    }
    if let Some(v) = a.c_loss {
        b.settings.c_loss = v;
    }
    if let Some(v) = a.lipschitz {
        b.settings.lipschitz = v;
    }
    if let Some(v) = a.trials {
        b.settings.trials = v;
    }
    if let Some(v) = a.population {
        b.settings.population = v;
    }
    if let Some(v) = a.draws {
        b.settings.rademacher_draws = v;
    }
    if let Some(v) = a.thresholds {
        b.thresholds = v;
    }
    if let Some(v) = a.dim {
        b.dim = v;
    }
    if let Some(v) = a.separation {
        b.separation = v;
    }
    if let Some(v) = a.alpha {
        b.settings.weights.alpha = v;
    }
    if b.settings.counts.len() != 2 {
        return Err(UsageError("bound needs exactly two class counts".into()).into());
    }
    let mixture = GaussianMixture::place(2, b.dim, b.separation, b.spread, b.settings.seed)?;
    let grid = HypothesisGrid::thresholds(b.dim, b.thresholds, -b.threshold_range, b.threshold_range)?;
    let report = bound_check(&mixture, &grid, &b.settings)?;
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(dir) => {
            write_or_print(out, "bound.json", &json)?;
            cfg.write(dir)?;
            println!(
                "violation rate {:.4} over {} trials, min margin {:.4}",
                report.violation_rate, report.trials, report.min_margin
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}
