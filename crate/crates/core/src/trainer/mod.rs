//! Training loop, synthetic data and checkpoints.

mod checkpoint;
mod dataset;

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel, WrongRecoveryMode};
use crate::imageio::Image;
use crate::keygen::{self, KeygenConfig, SecretKey};
use crate::objective::{self, LossWeights, PyramidGradient, RecoveryTriple};
use crate::obfuscators::{ObfuscatorKind, ObfuscatorSampler, SamplerMode};
use crate::pipeline;
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{load_folder, procedural_face, procedural_faces};

pub const LOSS_CSV_HEADER: &str = "step,L_P,L_R,L_WR,total";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: WrongRecoveryMode,
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub weights: LossWeights,
    pub obfuscators: Vec<ObfuscatorKind>,
    /// `Train` draws random obfuscator strengths, `Eval` uses the fixed
    /// evaluation settings.
    pub obfuscator_params: SamplerMode,
    pub side: usize,
    pub blocks: usize,
    pub growth: usize,
    pub alpha: f64,
    /// Steps between bijectivity checks; 0 disables them.
    pub check_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let flow = FlowConfig::default();
        Self {
            mode: flow.mode,
            steps: 1000,
            batch: 12,
            adam: AdamConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
            obfuscators: ObfuscatorKind::ALL.to_vec(),
            obfuscator_params: SamplerMode::Train,
            side: flow.side,
            blocks: flow.blocks,
            growth: flow.growth,
            alpha: flow.alpha,
            check_every: 100,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            blocks: self.blocks,
            growth: self.growth,
            alpha: self.alpha,
            side: self.side,
            mode: self.mode,
            keygen: KeygenConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be at least 1".into()));
        }
        if self.obfuscators.is_empty() {
            return Err(Error::InvalidConfig("enable at least one obfuscator".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.adam.lr)));
        }
        self.weights.validate()?;
        self.flow_config().validate()
    }

    /// Sets one field from its textual `key = value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "mode" => self.mode = WrongRecoveryMode::parse(v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "lr" => self.adam.lr = parse(key, v)?,
            "adam_beta1" => self.adam.beta1 = parse(key, v)?,
            "adam_beta2" => self.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.adam.eps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "beta" => self.weights.beta = parse(key, v)?,
            "lambda_p" => self.weights.lambda_p = parse(key, v)?,
            "lambda_r" => self.weights.lambda_r = parse(key, v)?,
            "lambda_wr" => self.weights.lambda_wr = parse(key, v)?,
            "margin" => self.weights.margin = parse(key, v)?,
            "obfuscators" => {
                self.obfuscators = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "obfuscator_params" => {
                self.obfuscator_params = match v {
                    "train" => SamplerMode::Train,
                    "eval" => SamplerMode::Eval,
                    _ => return Err(Error::InvalidConfig(format!("obfuscator_params: expected train or eval, got {v:?}"))),
                }
            }
            "side" => self.side = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "growth" => self.growth = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "check_every" => self.check_every = parse(key, v)?,
            other => return Err(Error::InvalidConfig(format!("unknown training option {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// text after `#` are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in parse_key_values(text)? {
            cfg.set(&key, &value)?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let obfs: Vec<&str> = self.obfuscators.iter().map(|k| k.short_name()).collect();
        let params = match self.obfuscator_params {
            SamplerMode::Train => "train",
            SamplerMode::Eval => "eval",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a String");
        kv("mode", self.mode.name().into());
        kv("steps", self.steps.to_string());
        kv("batch", self.batch.to_string());
        kv("lr", self.adam.lr.to_string());
        kv("adam_beta1", self.adam.beta1.to_string());
        kv("adam_beta2", self.adam.beta2.to_string());
        kv("adam_eps", self.adam.eps.to_string());
        kv("seed", self.seed.to_string());
        kv("beta", self.weights.beta.to_string());
        kv("lambda_p", self.weights.lambda_p.to_string());
        kv("lambda_r", self.weights.lambda_r.to_string());
        kv("lambda_wr", self.weights.lambda_wr.to_string());
        kv("margin", self.weights.margin.to_string());
        kv("obfuscators", obfs.join(","));
        kv("obfuscator_params", params.into());
        kv("side", self.side.to_string());
        kv("blocks", self.blocks.to_string());
        kv("growth", self.growth.to_string());
        kv("alpha", self.alpha.to_string());
        kv("check_every", self.check_every.to_string());
        s
    }
}

/// Splits `key = value` lines, dropping `#` comments and blank lines.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub protection: f64,
    pub recovery: f64,
    pub wrong_recovery: f64,
    pub total: f64,
}

pub fn loss_csv(log: &[LossRecord]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in log {
        writeln!(
            s,
            "{},{:e},{:e},{:e},{:e}",
            r.step, r.protection, r.recovery, r.wrong_recovery, r.total
        )
        .expect("writing to a String");
    }
    s
}

pub fn write_loss_csv(log: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, loss_csv(log)).map_err(|e| Error::io(path, e))
}

fn random_key(rng: &mut ChaCha8Rng) -> SecretKey {
    let bytes: [u8; 16] = rng.gen();
    SecretKey::new(bytes.to_vec()).expect("non-empty")
}

/// Steps a model through the training protocol one batch at a time.
pub struct Trainer {
    config: TrainConfig,
    model: FlowModel,
    adam: AdamState,
    dataset: Vec<Image>,
    sampler: ObfuscatorSampler,
    rng: ChaCha8Rng,
    log: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: Vec<Image>) -> Result<Self> {
        config.validate()?;
        let model = FlowModel::init(config.flow_config(), config.seed)?;
        Self::resume(config, model, dataset)
    }

    /// Continues training an existing model with fresh optimizer state.
    pub fn resume(config: TrainConfig, model: FlowModel, dataset: Vec<Image>) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::InvalidConfig("training needs at least one image".into()));
        }
        if let Some(bad) = dataset
            .iter()
            .find(|img| img.height() != config.side || img.width() != config.side)
        {
            return Err(Error::shape(
                "train",
                format!(
                    "dataset image is {}x{}, expected {}x{}",
                    bad.width(),
                    bad.height(),
                    config.side,
                    config.side
                ),
            ));
        }
        let adam = AdamState::new(config.adam, model.tensors());
        let sampler = ObfuscatorSampler::new(config.seed.wrapping_add(1), config.obfuscator_params, &config.obfuscators)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
        Ok(Self {
            config,
            model,
            adam,
            dataset,
            sampler,
            rng,
            log: Vec::new(),
        })
    }

    pub fn model(&self) -> &FlowModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    pub fn into_parts(self) -> (FlowModel, Vec<LossRecord>) {
        (self.model, self.log)
    }

    /// Runs one optimization step and returns its losses.
    pub fn step(&mut self) -> Result<LossRecord> {
        let step = self.log.len();
        let b = self.config.batch;

        let mut xs = Vec::with_capacity(b);
        let mut ys = Vec::with_capacity(b);
        let mut good = Vec::with_capacity(b);
        let mut bad = Vec::with_capacity(b);
        for _ in 0..b {
            let x = &self.dataset[self.rng.gen_range(0..self.dataset.len())];
            let spec = self.sampler.sample();
            ys.push(spec.apply(x)?.into_tensor());
            xs.push(x.tensor().clone());
            let k = random_key(&mut self.rng);
            let mut w = random_key(&mut self.rng);
            while w == k {
                w = random_key(&mut self.rng);
            }
            let side = self.config.side;
            good.push(keygen::keygen(&k, side, side, &self.model.config.keygen)?);
            bad.push(keygen::keygen(&w, side, side, &self.model.config.keygen)?);
        }
        let x = Tensor::stack(&xs.iter().collect::<Vec<_>>())?;
        let y = Tensor::stack(&ys.iter().collect::<Vec<_>>())?;
        let (k, kkk) = pipeline::key_batch::<f32>(&good)?;
        let (kw, kkkw) = pipeline::key_batch::<f32>(&bad)?;

        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let kv = tape.constant(k);
        let lv = tape.constant(kkk);
        let kwv = tape.constant(kw);
        let lwv = tape.constant(kkkw);

        let (protected, _) = pipeline::protect_graph(&mut tape, &bound, xv, yv, kv)?;
        let (recovered, _) = pipeline::recover_graph(&mut tape, &bound, protected, kv, lv)?;
        let (wrong, _) = pipeline::recover_graph(&mut tape, &bound, protected, kwv, lwv)?;

        let d = PyramidGradient::default();
        let w = self.config.weights;
        let lp = objective::protection_loss(&mut tape, &d, protected, yv, w.beta)?;
        let lr = objective::recovery_loss(&mut tape, recovered, xv)?;
        let triple = RecoveryTriple {
            original: xv,
            template: yv,
            recovered,
            wrong,
        };
        let lwr = objective::wrong_recovery_loss(&mut tape, &d, self.config.mode, triple, w.margin)?;
        let total = objective::total_loss(&mut tape, lp, lr, lwr, &w)?;

        let scalar = |v| tape.value(v).data()[0] as f64;
        let record = LossRecord {
            step,
            protection: scalar(lp),
            recovery: scalar(lr),
            wrong_recovery: scalar(lwr),
            total: scalar(total),
        };
        if ![record.protection, record.recovery, record.wrong_recovery, record.total]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite(format!(
                "step {step}: L_P={} L_R={} L_WR={} total={}",
                record.protection, record.recovery, record.wrong_recovery, record.total
            )));
        }

        let mut grads = tape.backward(total)?;
        let grads: Vec<Tensor> = bound
            .vars()
            .into_iter()
            .map(|v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect();
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!("step {step}: gradient of parameter tensor {i}")));
        }
        drop(tape);
        self.adam.step(self.model.tensors_mut(), &grads)?;
        self.log.push(record);

        let every = self.config.check_every;
        if every > 0 && (step + 1) % every == 0 {
            self.check_bijectivity(&xs[0], &ys[0], &good[0])?;
        }
        Ok(record)
    }

    fn check_bijectivity(&self, x: &Tensor, y: &Tensor, k: &keygen::SecretMap) -> Result<()> {
        let xf = crate::wavelet::dwt(&Tensor::stack(&[x])?)?;
        let yf = crate::wavelet::dwt(&Tensor::stack(&[y])?)?;
        let (a, b) = self.model.forward(&xf, &yf, k.tensor())?;
        let (xb, yb) = self.model.backward(&a, &b, k.tensor())?;
        let err = xb.max_abs_diff(&xf)?.max(yb.max_abs_diff(&yf)?);
        if !(err < 1e-3) {
            return Err(Error::Invariant(format!(
                "after step {}: flow roundtrip error {err}",
                self.log.len()
            )));
        }
        Ok(())
    }

    /// Runs the remaining configured steps.
    pub fn run(&mut self) -> Result<()> {
        while self.log.len() < self.config.steps {
            self.step()?;
        }
        Ok(())
    }
}

/// Trains a fresh model for `config.steps` steps.
pub fn train(config: TrainConfig, dataset: Vec<Image>) -> Result<(FlowModel, Vec<LossRecord>)> {
    let mut t = Trainer::new(config, dataset)?;
    t.run()?;
    Ok(t.into_parts())
}
