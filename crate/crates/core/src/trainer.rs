//! Prior warmup followed by joint training of the encoder and denoiser.
//!
//! The priors enter the diffusion objective as constants; the prior network
//! keeps learning from its own cross-entropy during the joint phase. A copy
//! frozen at the end of warmup picks the noise level at inference.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use crate::data::DatasetTable;
use crate::denoiser::{predict_noise_on, DenoiserConfig, DenoiserParams};
use crate::diffusion::{forward_with_eps, sample, SampleOutcome};
use crate::error::{Error, Result};
use crate::loss::{objective_on, BranchBatches, KernelConfig, LossReport};
use crate::nn::{self, load_blocks, BlockData, Parameters};
use crate::numkernel::{NodeId, Tape, Tensor2};
use crate::optim::{LrSchedule, Optimizer, OptimizerConfig};
use crate::priors::{
    batch_cross_entropy, encode_features, encode_on, prior_bundle, warmup_train, EncoderParams,
    PriorNetParams, WarmupSettings,
};
use crate::registry;
use crate::rng::{normal_vec, stream};
use crate::schedule::{inference_class, linear_beta, ClassCensus, NoiseLevelConfig, NoiseSchedule};

// Stream tags.
const TAG_INIT: u64 = 0x1417;
const TAG_ORDER: u64 = 0xE70C;
const TAG_DRAW: u64 = 0x7EA1;
const TAG_SAMPLE: u64 = 0x5A3B;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Diffusion horizon `T`.
    pub horizon: usize,
    pub sample_steps: usize,
    pub beta1: f64,
    pub beta_t: f64,
    pub noise: NoiseLevelConfig,
    /// Registered noise-level rule.
    pub noise_level: String,
    pub w: f64,
    pub kernel: KernelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate at step 0 of the linear ramp.
    pub lr_start: f64,
    pub lr_warmup_epochs: usize,
    /// Prior-network warmup epochs.
    pub warmup_epochs: usize,
    pub prior_learning_rate: f64,
    pub optimizer: String,
    pub optimizer_config: OptimizerConfig,
    pub prior_hidden: usize,
    pub mask_size: usize,
    pub denoiser: DenoiserConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            horizon: 1000,
            sample_steps: 250,
            beta1: 1e-4,
            beta_t: 0.02,
            noise: NoiseLevelConfig::default(),
            noise_level: "anisotropic".into(),
            w: 0.5,
            kernel: KernelConfig::default(),
            epochs: 300,
            batch_size: 32,
            learning_rate: 1e-3,
            lr_start: 1e-5,
            lr_warmup_epochs: 5,
            warmup_epochs: 15,
            prior_learning_rate: 1e-3,
            optimizer: "adam".into(),
            optimizer_config: OptimizerConfig::default(),
            prior_hidden: 32,
            mask_size: 4,
            denoiser: DenoiserConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if self.sample_steps == 0 || self.sample_steps > self.horizon {
            return Err(Error::Config(format!(
                "sample_steps must lie in 1..={}, got {}",
                self.horizon, self.sample_steps
            )));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("prior_learning_rate", self.prior_learning_rate),
            ("w", self.w),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lr_start >= 0.0) {
            return Err(Error::Config("lr_start must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !self.denoiser.time_dim.is_multiple_of(2) {
            return Err(Error::Config("denoiser.time_dim must be even".into()));
        }
        self.noise.validate()?;
        self.kernel.validate()?;
        let names = registry::noise_levels();
        if !names.contains(&self.noise_level) {
            return Err(Error::Config(format!(
                "unknown noise level '{}' (available: {})",
                self.noise_level,
                names.names().join(", ")
            )));
        }
        registry::optimizers().create(&self.optimizer, &self.optimizer_config)?;
        linear_beta(self.horizon, self.beta1, self.beta_t)?;
        Ok(())
    }

    pub fn betas(&self) -> Result<Vec<f64>> {
        linear_beta(self.horizon, self.beta1, self.beta_t)
    }

    /// Noise schedule for the given training census.
    pub fn schedule(&self, census: &ClassCensus) -> Result<NoiseSchedule> {
        let rule = registry::noise_levels().create(&self.noise_level, &())?;
        NoiseSchedule::build(self.betas()?, rule.lambdas(census, &self.noise))
    }
}

/// Training census with empty classes counted as one sample.
pub fn training_census(table: &DatasetTable) -> Result<ClassCensus> {
    let mut counts = table.class_counts();
    for (j, n) in counts.iter_mut().enumerate() {
        if *n == 0 {
            log::warn!("class {j} has no training samples; counting it as 1");
            *n = 1;
        }
    }
    ClassCensus::new(counts)
}

/// The three networks plus the frozen prior copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub census: ClassCensus,
    pub prior: PriorNetParams,
    pub prior_frozen: PriorNetParams,
    pub encoder: EncoderParams,
    pub denoiser: DenoiserParams,
}

impl Model {
    pub fn init(config: &TrainConfig, census: ClassCensus, input_dim: usize) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("input dimension must be >= 1".into()));
        }
        let k = census.classes();
        let mut rng = stream(config.seed, &[TAG_INIT]);
        let mask = config.mask_size.clamp(1, input_dim);
        let prior = PriorNetParams::init(&mut rng, input_dim, config.prior_hidden, k, mask)?;
        let encoder = EncoderParams::init(&mut rng, input_dim, config.denoiser.hidden);
        let denoiser = DenoiserParams::init(&mut rng, k, &config.denoiser)?;
        Ok(Self {
            config: config.clone(),
            census,
            prior_frozen: prior.clone(),
            prior,
            encoder,
            denoiser,
        })
    }

    pub fn classes(&self) -> usize {
        self.census.classes()
    }

    pub fn input_dim(&self) -> usize {
        self.prior.input_dim()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.config.schedule(&self.census)
    }

    /// Samples a label vector for `x`. `index` keys the random stream.
    pub fn classify_with(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        index: u64,
        trace: bool,
    ) -> Result<SampleOutcome> {
        let bundle = prior_bundle(&self.prior, x)?;
        let lambda_class = inference_class(&self.prior_frozen.logits(x)?);
        let cond = encode_features(&self.encoder, x)?;
        let mut rng = stream(self.config.seed, &[TAG_SAMPLE, index]);
        sample(
            schedule,
            &self.denoiser,
            &cond,
            &bundle.fused,
            lambda_class,
            self.config.sample_steps,
            trace,
            &mut rng,
        )
    }

    pub fn classify(&self, x: &[f64], index: u64) -> Result<SampleOutcome> {
        self.classify_with(&self.schedule()?, x, index, false)
    }

    /// Samples every row of `table`, in parallel.
    pub fn predict(&self, table: &DatasetTable, trace: bool) -> Result<Vec<SampleOutcome>> {
        if table.dim() != self.input_dim() {
            return Err(Error::Config(format!(
                "data has {} features, model expects {}",
                table.dim(),
                self.input_dim()
            )));
        }
        if table.classes() != self.classes() {
            return Err(Error::Config(format!(
                "data has {} classes, model expects {}",
                table.classes(),
                self.classes()
            )));
        }
        let schedule = self.schedule()?;
        (0..table.len())
            .into_par_iter()
            .map(|i| self.classify_with(&schedule, table.feature_row(i), i as u64, trace))
            .collect()
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut v = self.encoder.blocks_mut();
        v.extend(self.denoiser.blocks_mut());
        v
    }

    fn blocks(&self) -> std::collections::BTreeMap<String, BlockData> {
        let mut out = std::collections::BTreeMap::new();
        let nets: [(&str, Vec<(&'static str, &Tensor2)>); 4] = [
            ("prior", self.prior.blocks()),
            ("prior_frozen", self.prior_frozen.blocks()),
            ("encoder", self.encoder.blocks()),
            ("denoiser", self.denoiser.blocks()),
        ];
        for (prefix, blocks) in nets {
            for (name, t) in blocks {
                out.insert(format!("{prefix}.{name}"), BlockData::from(t));
            }
        }
        out
    }

    /// Rebuilds the networks stored in `ck`.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let census = ClassCensus::new(ck.census.clone())?;
        let mut model = Model::init(&ck.config, census, ck.input_dim)?;
        load_blocks(&mut model.prior, "prior", &ck.blocks)?;
        load_blocks(&mut model.prior_frozen, "prior_frozen", &ck.blocks)?;
        load_blocks(&mut model.encoder, "encoder", &ck.blocks)?;
        load_blocks(&mut model.denoiser, "denoiser", &ck.blocks)?;
        Ok(model)
    }
}

/// Randomness for one sample of a training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDraw {
    pub t: usize,
    pub eps_g: Vec<f64>,
    pub eps_l: Vec<f64>,
    pub eps_f: Vec<f64>,
}

/// Draws `t ~ U{1..T}` and three independent noise vectors for `row`.
pub fn draw_sample(seed: u64, epoch: usize, row: usize, horizon: usize, k: usize) -> SampleDraw {
    let mut rng = stream(seed, &[TAG_DRAW, epoch as u64, row as u64]);
    let t = rng.random_range(1..=horizon);
    SampleDraw {
        t,
        eps_g: normal_vec(&mut rng, k),
        eps_l: normal_vec(&mut rng, k),
        eps_f: normal_vec(&mut rng, k),
    }
}

/// Gradients of one step, aligned with the encoder and denoiser blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub report: LossReport,
    pub encoder_grads: Vec<Tensor2>,
    pub denoiser_grads: Vec<Tensor2>,
}

impl StepOutput {
    pub fn all_grads(&self) -> Vec<Tensor2> {
        let mut v = self.encoder_grads.clone();
        v.extend(self.denoiser_grads.iter().cloned());
        v
    }
}

struct SampleGraph {
    tape: Tape,
    enc_ids: Vec<NodeId>,
    den_ids: Vec<NodeId>,
    preds: [NodeId; 3],
}

fn sample_graph(
    model: &Model,
    schedule: &NoiseSchedule,
    x: &[f64],
    label: usize,
    draw: &SampleDraw,
) -> Result<SampleGraph> {
    let k = model.classes();
    let bundle = prior_bundle(&model.prior, x)?;
    let mut y0 = vec![0.0; k];
    y0[label] = 1.0;
    let horizon = schedule.horizon();

    let mut tape = Tape::new();
    let enc_ids = model.encoder.bind(&mut tape);
    let den_ids = model.denoiser.bind(&mut tape);
    let xn = tape.leaf(Tensor2::row_vector(x));
    let cond = encode_on(&mut tape, &enc_ids, xn)?;
    let branches = [
        (&bundle.global, &draw.eps_g),
        (&bundle.local, &draw.eps_l),
        (&bundle.fused, &draw.eps_f),
    ];
    let mut preds = [cond; 3];
    for (slot, (prior, eps)) in preds.iter_mut().zip(branches) {
        let y_t = forward_with_eps(schedule, label, &y0, prior, draw.t, eps)?;
        let yn = tape.leaf(Tensor2::row_vector(&y_t));
        let pn = tape.leaf(Tensor2::row_vector(prior));
        *slot = predict_noise_on(&mut tape, &den_ids, cond, yn, pn, draw.t, horizon)?;
    }
    Ok(SampleGraph {
        tape,
        enc_ids,
        den_ids,
        preds,
    })
}

/// Loss and encoder/denoiser gradients on `rows` with fixed randomness.
///
/// Per-sample graphs run in parallel; the batch objective is evaluated on
/// its own tape and its adjoints are pushed back into each sample graph.
/// Gradients are summed in ascending position order.
pub fn train_step(
    model: &Model,
    schedule: &NoiseSchedule,
    table: &DatasetTable,
    rows: &[usize],
    draws: &[SampleDraw],
) -> Result<StepOutput> {
    if rows.is_empty() {
        return Err(Error::Usage("training batch is empty".into()));
    }
    if rows.len() != draws.len() {
        return Err(Error::Usage("one draw per batch row required".into()));
    }
    let graphs: Vec<SampleGraph> = rows
        .par_iter()
        .zip(draws.par_iter())
        .map(|(&i, d)| sample_graph(model, schedule, table.feature_row(i), table.labels()[i], d))
        .collect::<Result<_>>()?;

    let stack = |pick: &dyn Fn(usize) -> Vec<f64>| -> Result<Tensor2> {
        Tensor2::from_rows(&(0..rows.len()).map(pick).collect::<Vec<_>>())
    };
    let pred_value = |b: usize, i: usize| graphs[i].tape.value(graphs[i].preds[b]).as_slice().to_vec();

    let mut tape = Tape::new();
    let eps_g = tape.leaf(stack(&|i| draws[i].eps_g.clone())?);
    let pred_g = tape.leaf(stack(&|i| pred_value(0, i))?);
    let eps_l = tape.leaf(stack(&|i| draws[i].eps_l.clone())?);
    let pred_l = tape.leaf(stack(&|i| pred_value(1, i))?);
    let eps_f = tape.leaf(stack(&|i| draws[i].eps_f.clone())?);
    let pred_f = tape.leaf(stack(&|i| pred_value(2, i))?);
    let batches = BranchBatches {
        eps_g,
        pred_g,
        eps_l,
        pred_l,
        eps_f,
        pred_f,
    };
    let (root, report) = objective_on(&mut tape, &batches, model.config.w, &model.config.kernel)?;
    let adj = tape.backward(root)?;
    let k = model.classes();
    let shape = (rows.len(), k);
    let adj = [
        adj.get_or_zeros(pred_g, shape),
        adj.get_or_zeros(pred_l, shape),
        adj.get_or_zeros(pred_f, shape),
    ];

    let per_sample: Vec<(Vec<Tensor2>, Vec<Tensor2>)> = graphs
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let seeds: Vec<(NodeId, Tensor2)> = (0..3)
                .map(|b| (g.preds[b], Tensor2::row_vector(adj[b].row(i))))
                .collect();
            let grads = g.tape.backward_seeded(&seeds)?;
            let enc = g
                .enc_ids
                .iter()
                .map(|&id| grads.get_or_zeros(id, g.tape.value(id).shape()))
                .collect();
            let den = g
                .den_ids
                .iter()
                .map(|&id| grads.get_or_zeros(id, g.tape.value(id).shape()))
                .collect();
            Ok((enc, den))
        })
        .collect::<Result<_>>()?;

    let mut encoder_grads = model.encoder.zeros_like();
    let mut denoiser_grads = model.denoiser.zeros_like();
    for (enc, den) in &per_sample {
        nn::accumulate(&mut encoder_grads, enc);
        nn::accumulate(&mut denoiser_grads, den);
    }
    Ok(StepOutput {
        report,
        encoder_grads,
        denoiser_grads,
    })
}

/// Per-epoch means of the batch losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_g: f64,
    pub l_l: f64,
    pub l_eps: f64,
    pub l_total: f64,
    pub lr: f64,
}

pub struct Trainer {
    model: Model,
    schedule: NoiseSchedule,
    epoch: usize,
    step: u64,
    optimizer: Box<dyn Optimizer>,
    prior_optimizer: Box<dyn Optimizer>,
}

impl Trainer {
    /// Initialises the networks and runs the prior warmup.
    pub fn new(config: &TrainConfig, table: &DatasetTable) -> Result<Self> {
        config.validate()?;
        if table.is_empty() {
            return Err(Error::Usage("training set is empty".into()));
        }
        let census = training_census(table)?;
        // fail on an infeasible schedule before any training
        let schedule = config.schedule(&census)?;
        let mut model = Model::init(config, census, table.dim())?;
        let settings = WarmupSettings {
            epochs: config.warmup_epochs,
            batch_size: config.batch_size,
            learning_rate: config.prior_learning_rate,
            optimizer: config.optimizer.clone(),
            optimizer_config: config.optimizer_config,
            seed: config.seed,
        };
        model.prior = warmup_train(&model.prior, table, &settings)?;
        model.prior_frozen = model.prior.clone();
        let optimizers = registry::optimizers();
        Ok(Self {
            model,
            schedule,
            epoch: 0,
            step: 0,
            optimizer: optimizers.create(&config.optimizer, &config.optimizer_config)?,
            prior_optimizer: optimizers.create(&config.optimizer, &config.optimizer_config)?,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = Model::from_checkpoint(ck)?;
        let schedule = model.schedule()?;
        let optimizers = registry::optimizers();
        let cfg = &ck.config;
        let mut optimizer = optimizers.create(&cfg.optimizer, &cfg.optimizer_config)?;
        let mut prior_optimizer = optimizers.create(&cfg.optimizer, &cfg.optimizer_config)?;
        for (name, opt) in [("diffusion", &mut optimizer), ("prior", &mut prior_optimizer)] {
            let state = ck
                .optimizers
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer state '{name}'")))?;
            opt.load_state(state)?;
        }
        Ok(Self {
            model,
            schedule,
            epoch: ck.epoch,
            step: ck.step,
            optimizer,
            prior_optimizer,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut optimizers = std::collections::BTreeMap::new();
        optimizers.insert("diffusion".to_string(), self.optimizer.state());
        optimizers.insert("prior".to_string(), self.prior_optimizer.state());
        Checkpoint {
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            step: self.step,
            config: self.model.config.clone(),
            census: self.model.census.counts().to_vec(),
            input_dim: self.model.input_dim(),
            blocks: self.model.blocks(),
            optimizers,
        }
    }

    fn lr_schedule(&self, n: usize) -> LrSchedule {
        let cfg = &self.model.config;
        let per_epoch = n.div_ceil(cfg.batch_size) as u64;
        LrSchedule {
            base_lr: cfg.learning_rate,
            start_lr: cfg.lr_start,
            warmup_steps: cfg.lr_warmup_epochs as u64 * per_epoch,
            total_steps: cfg.epochs as u64 * per_epoch,
        }
    }

    /// One pass over `table` in a shuffled order keyed by the epoch index.
    pub fn run_epoch(&mut self, table: &DatasetTable) -> Result<EpochRecord> {
        let cfg = self.model.config.clone();
        if table.dim() != self.model.input_dim() || table.classes() != self.model.classes() {
            return Err(Error::Config("training data does not match the model".into()));
        }
        let lrs = self.lr_schedule(table.len());
        let mut order: Vec<usize> = (0..table.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[TAG_ORDER, self.epoch as u64]));
        let k = self.model.classes();
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        let mut lr = lrs.at(self.step);
        for rows in order.chunks(cfg.batch_size) {
            let draws: Vec<SampleDraw> = rows
                .iter()
                .map(|&r| draw_sample(cfg.seed, self.epoch, r, cfg.horizon, k))
                .collect();
            let out = train_step(&self.model, &self.schedule, table, rows, &draws)?;
            lr = lrs.at(self.step);
            let grads = out.all_grads();
            self.optimizer.step(&mut self.model.trainable_mut(), &grads, lr)?;
            let (_, prior_grads) = batch_cross_entropy(&self.model.prior, table, rows)?;
            self.prior_optimizer
                .step(&mut self.model.prior.blocks_mut(), &prior_grads, cfg.prior_learning_rate)?;
            self.step += 1;
            let r = out.report;
            for (s, v) in sums.iter_mut().zip([r.l_g, r.l_l, r.l_eps, r.l_total]) {
                *s += v;
            }
            batches += 1;
        }
        if !(self.model.encoder.is_finite() && self.model.denoiser.is_finite()) {
            return Err(Error::Config(format!(
                "parameters became non-finite in epoch {}; lower the learning rate",
                self.epoch
            )));
        }
        let m = batches.max(1) as f64;
        let record = EpochRecord {
            epoch: self.epoch,
            l_g: sums[0] / m,
            l_l: sums[1] / m,
            l_eps: sums[2] / m,
            l_total: sums[3] / m,
            lr,
        };
        self.epoch += 1;
        Ok(record)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Directory for `checkpoint.json` and `train_log.jsonl`.
    pub out_dir: Option<PathBuf>,
    /// Also write `checkpoint_epoch<N>.json` every this many epochs.
    pub checkpoint_every: usize,
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed epochs instead of `config.epochs`.
    pub stop_after: Option<usize>,
}

pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub model: Model,
    pub log: Vec<EpochRecord>,
}

fn append_log(path: &Path, rec: &EpochRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(rec)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Warmup plus joint training, or continuation from `opts.resume`.
pub fn fit(table: &DatasetTable, config: &TrainConfig, opts: &FitOptions) -> Result<FitOutcome> {
    let mut trainer = match &opts.resume {
        Some(ck) => {
            if ck.classes() != table.classes() || ck.input_dim != table.dim() {
                return Err(Error::Config(format!(
                    "checkpoint expects {} classes and {} features, data has {} and {}",
                    ck.classes(),
                    ck.input_dim,
                    table.classes(),
                    table.dim()
                )));
            }
            Trainer::from_checkpoint(ck)?
        }
        None => Trainer::new(config, table)?,
    };
    let epochs = trainer.model().config.epochs;
    let last = opts.stop_after.map_or(epochs, |s| s.min(epochs));
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = Vec::new();
    while trainer.epoch() < last {
        let rec = trainer.run_epoch(table)?;
        log::info!(
            "epoch {} loss {:.6} (g {:.6}, l {:.6}, eps {:.6})",
            rec.epoch,
            rec.l_total,
            rec.l_g,
            rec.l_l,
            rec.l_eps
        );
        if let Some(dir) = &opts.out_dir {
            append_log(&dir.join("train_log.jsonl"), &rec)?;
            if opts.checkpoint_every > 0 && trainer.epoch() % opts.checkpoint_every == 0 {
                trainer
                    .checkpoint()
                    .save(&dir.join(format!("checkpoint_epoch{}.json", trainer.epoch())))?;
            }
        }
        log.push(rec);
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = &opts.out_dir {
        checkpoint.save(&dir.join("checkpoint.json"))?;
    }
    Ok(FitOutcome {
        checkpoint,
        model: trainer.model,
        log,
    })
}
