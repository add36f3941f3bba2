//! Training loop: stochastic gradient descent with momentum on the denoising
//! objective.
//!
//! Step `s` (counted from 1) draws everything it needs from
//! `rng::stream(seed, s)`, and stream 0 initializes the parameters, so a run
//! resumed from a checkpoint continues exactly as an unbroken run would.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;

use crate::backbone::{checkpoint, BackboneParams};
use crate::diffusion::train_step;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::moe_blocks::Params;
use crate::rng;
use crate::tensor_core::Tensor;

const STEP_KEY: &str = "optim.step";
const VELOCITY_PREFIX: &str = "optim.velocity.";

/// SGD with heavy-ball momentum: `v = mu v + g; p -= lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Completed steps.
    pub step: usize,
    pub velocity: Vec<(String, Tensor)>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            step: 0,
            velocity: Vec::new(),
        }
    }

    pub fn apply(&mut self, params: &mut BackboneParams, grads: Vec<(String, Tensor)>) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|(n, g)| (n.clone(), Tensor::zeros(g.shape()))).collect();
        }
        if self.velocity.len() != grads.len() {
            return Err(Error::invalid("sgd", "gradient count changed between steps"));
        }
        for ((_, v), (_, g)) in self.velocity.iter_mut().zip(&grads) {
            *v = v.scale(self.momentum);
            v.axpy(1.0, g)?;
        }
        let mut it = self.velocity.iter();
        let lr = self.learning_rate;
        let mut outcome = Ok(());
        params.visit_mut("", &mut |_, p| {
            let (_, v) = it.next().expect("one velocity per parameter");
            if let Err(e) = p.axpy(-lr, v) {
                outcome = Err(e);
            }
        });
        self.step += 1;
        outcome
    }

    pub fn records(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![(STEP_KEY.to_string(), Tensor::scalar(self.step as f64))];
        out.extend(self.velocity.iter().map(|(n, v)| (format!("{VELOCITY_PREFIX}{n}"), v.clone())));
        out
    }

    /// Optimizer state stored alongside model records, if any.
    pub fn from_records(learning_rate: f64, momentum: f64, records: &[(String, Tensor)]) -> Option<Self> {
        let step = records.iter().find(|(n, _)| n == STEP_KEY)?.1.data()[0] as usize;
        let velocity = records
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(VELOCITY_PREFIX).map(|n| (n.to_string(), t.clone())))
            .collect();
        Some(Self {
            learning_rate,
            momentum,
            step,
            velocity,
        })
    }
}

/// Parameters initialized from stream 0 of the run seed.
pub fn initial_params(cfg: &RunConfig) -> Result<BackboneParams> {
    BackboneParams::init(&cfg.backbone(), &mut rng::stream(cfg.seed, 0))
}

pub struct TrainOutcome {
    pub params: BackboneParams,
    pub optimizer: Sgd,
    /// `(step, loss)` for every step run in this call.
    pub losses: Vec<(usize, f64)>,
}

impl TrainOutcome {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (s, l) in &self.losses {
            writeln!(out, "{s},{l}").unwrap();
        }
        out
    }
}

/// Trains on `data` [n, C, T] until `cfg.train_steps` steps are complete,
/// starting fresh or from `(params, optimizer)`.
pub fn train(cfg: &RunConfig, data: &Tensor, start: Option<(BackboneParams, Sgd)>) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.expect_rank(3, "train", "dataset [n, C, T]")?;
    if data.dim(1) != cfg.channels {
        return Err(Error::shape(
            "train",
            format!("dataset has {} channels (axis 1), config says {}", data.dim(1), cfg.channels),
        ));
    }
    let sched = cfg.schedule()?;
    let (mut params, mut optim) = match start {
        Some(s) => s,
        None => (initial_params(cfg)?, Sgd::new(cfg.learning_rate, cfg.momentum)),
    };
    let (n, c, len) = (data.dim(0), data.dim(1), data.dim(2));
    let b = cfg.batch_size;
    let mut losses = Vec::new();
    while optim.step < cfg.train_steps {
        let step = optim.step + 1;
        let mut r = rng::stream(cfg.seed, step as u64);
        let picks: Vec<usize> = if b <= n {
            index::sample(&mut r, n, b).into_vec()
        } else {
            (0..b).map(|_| r.gen_range(0..n)).collect()
        };
        let batch_data = picks.iter().flat_map(|&i| data.row(i).iter().copied()).collect();
        let batch = Tensor::from_vec(vec![b, c, len], batch_data)?;
        let mask = cfg.mask.kind.draw(b, c, len, &mut r)?;
        let (loss, grads) = train_step(&params, &batch, &mask, &sched, &mut r)?;
        if !loss.is_finite() || grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        optim.apply(&mut params, grads)?;
        losses.push((step, loss));
    }
    Ok(TrainOutcome {
        params,
        optimizer: optim,
        losses,
    })
}

pub fn save_checkpoint(params: &BackboneParams, optim: &Sgd, path: &Path) -> Result<()> {
    let mut records = checkpoint::records(params);
    records.extend(optim.records());
    checkpoint::save_records(&records, path)
}

/// Model parameters for `cfg` and any optimizer state saved with them.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<(BackboneParams, Option<Sgd>)> {
    let records = checkpoint::load_records(path)?;
    let params = checkpoint::from_records(&cfg.backbone(), &records)?;
    Ok((params, Sgd::from_records(cfg.learning_rate, cfg.momentum, &records)))
}

pub fn write_loss_csv(outcome: &TrainOutcome, path: &Path) -> Result<()> {
    fs::write(path, outcome.loss_csv()).map_err(|e| Error::io(path, e))
}
