//! Run configuration in a flat `key = value` text format. Blank lines and
//! anything after `#` are ignored. A `profile` line selects the defaults
//! (`toy` or `full`) that the remaining keys override, wherever it appears.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::diffusion::{make_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::harness::synth::SyntheticConfig;
use crate::masking::{MaskKind, MaskSpec};
use crate::moe_blocks::GateMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Toy,
    Full,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Toy => "toy",
            Profile::Full => "full",
        })
    }
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "toy" => Ok(Profile::Toy),
            "full" => Ok(Profile::Full),
            _ => Err(format!("unknown profile {s:?} (expected toy or full)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,

    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    pub channels: usize,
    pub width: usize,
    pub depth: usize,
    pub kernels: Vec<usize>,
    pub head_experts: usize,
    pub d_emb: usize,
    pub gate_mode: GateMode,

    pub learning_rate: f64,
    pub momentum: f64,
    pub train_steps: usize,
    pub batch_size: usize,

    pub mask: MaskSpec,

    pub n_samples: usize,
    pub length: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub harmonics: usize,
    pub spike_prob: f64,
    pub amp_jitter: f64,
    pub noise_sigma: f64,

    pub data_path: String,
    pub checkpoint_path: String,
    pub loss_path: String,
    pub output_path: String,
    pub metrics_path: String,
}

const KEYS: &[&str] = &[
    "profile",
    "seed",
    "steps",
    "beta_start",
    "beta_end",
    "channels",
    "width",
    "depth",
    "kernels",
    "head_experts",
    "d_emb",
    "gate_mode",
    "learning_rate",
    "momentum",
    "train_steps",
    "batch_size",
    "mask_kind",
    "mask_ratio",
    "drop_length",
    "drop_channels",
    "shared_window",
    "mask_seed",
    "n_samples",
    "length",
    "f_min",
    "f_max",
    "harmonics",
    "spike_prob",
    "amp_jitter",
    "noise_sigma",
    "data_path",
    "checkpoint_path",
    "loss_path",
    "output_path",
    "metrics_path",
];

impl RunConfig {
    /// Desk-scale defaults.
    pub fn toy() -> Self {
        Self {
            profile: Profile::Toy,
            seed: 0,
            steps: 10,
            beta_start: 1e-4,
            beta_end: 0.5,
            channels: 3,
            width: 16,
            depth: 1,
            kernels: vec![3, 5, 7, 9, 11],
            head_experts: 4,
            d_emb: 64,
            gate_mode: GateMode::Renormalized,
            learning_rate: 0.01,
            momentum: 0.9,
            train_steps: 500,
            batch_size: 8,
            mask: MaskSpec {
                kind: MaskKind::Continuous {
                    drop_length: 26,
                    drop_channels: 1,
                    shared_window: false,
                },
                seed: 1,
            },
            n_samples: 64,
            length: 256,
            f_min: 3.0,
            f_max: 9.0,
            harmonics: 3,
            spike_prob: 0.5,
            amp_jitter: 0.2,
            noise_sigma: 0.05,
            data_path: "data.tsb1".into(),
            checkpoint_path: "model.ckp".into(),
            loss_path: "loss.csv".into(),
            output_path: "imputed.tsb1".into(),
            metrics_path: "metrics.csv".into(),
        }
    }

    /// Full-size architecture and schedule.
    pub fn full() -> Self {
        Self {
            profile: Profile::Full,
            steps: 40,
            beta_start: 1e-4,
            beta_end: 0.05,
            channels: 12,
            width: 160,
            depth: 3,
            kernels: (1..=15).map(|i| 2 * i + 1).collect(),
            head_experts: 16,
            batch_size: 6,
            // 120 epochs over 1000 samples in batches of 6.
            train_steps: 20_040,
            mask: MaskSpec {
                kind: MaskKind::Continuous {
                    drop_length: 300,
                    drop_channels: 1,
                    shared_window: false,
                },
                seed: 1,
            },
            n_samples: 1000,
            length: 1000,
            ..Self::toy()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Toy => Self::toy(),
            Profile::Full => Self::full(),
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            channels: self.channels,
            width: self.width,
            depth: self.depth,
            kernels: self.kernels.clone(),
            head_experts: self.head_experts,
            d_emb: self.d_emb,
            gate_mode: self.gate_mode,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_samples: self.n_samples,
            channels: self.channels,
            length: self.length,
            f_min: self.f_min,
            f_max: self.f_max,
            harmonics: self.harmonics,
            spike_prob: self.spike_prob,
            amp_jitter: self.amp_jitter,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::Config { line: 0, detail });
        self.backbone().validate()?;
        self.schedule()?;
        self.synthetic().validate()?;
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return fail("learning_rate must be positive and momentum in [0, 1)".into());
        }
        match self.mask.kind {
            MaskKind::Random { ratio } if !(0.0..=1.0).contains(&ratio) => {
                return fail(format!("mask_ratio {ratio} outside [0, 1]"));
            }
            MaskKind::Continuous {
                drop_length,
                drop_channels,
                ..
            } if drop_length == 0 || drop_length > self.length || drop_channels == 0 || drop_channels > self.channels => {
                return fail(format!(
                    "continuous mask needs 1 <= drop_length <= length ({}) and 1 <= drop_channels <= channels ({})",
                    self.length, self.channels
                ));
            }
            _ => {}
        }
        let paths = [
            &self.data_path,
            &self.checkpoint_path,
            &self.loss_path,
            &self.output_path,
            &self.metrics_path,
        ];
        for (i, a) in paths.iter().enumerate() {
            if paths[..i].contains(a) {
                return fail(format!("path {a} is used for two different outputs"));
            }
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let (kind, ratio, length, channels, shared) = match self.mask.kind {
            MaskKind::Random { ratio } => ("random", ratio, 1, 1, false),
            MaskKind::Continuous {
                drop_length,
                drop_channels,
                shared_window,
            } => ("continuous", 0.0, drop_length, drop_channels, shared_window),
        };
        match key {
            "profile" => self.profile.to_string(),
            "seed" => self.seed.to_string(),
            "steps" => self.steps.to_string(),
            "beta_start" => self.beta_start.to_string(),
            "beta_end" => self.beta_end.to_string(),
            "channels" => self.channels.to_string(),
            "width" => self.width.to_string(),
            "depth" => self.depth.to_string(),
            "kernels" => self.kernels.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "head_experts" => self.head_experts.to_string(),
            "d_emb" => self.d_emb.to_string(),
            "gate_mode" => self.gate_mode.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "momentum" => self.momentum.to_string(),
            "train_steps" => self.train_steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "mask_kind" => kind.to_string(),
            "mask_ratio" => ratio.to_string(),
            "drop_length" => length.to_string(),
            "drop_channels" => channels.to_string(),
            "shared_window" => shared.to_string(),
            "mask_seed" => self.mask.seed.to_string(),
            "n_samples" => self.n_samples.to_string(),
            "length" => self.length.to_string(),
            "f_min" => self.f_min.to_string(),
            "f_max" => self.f_max.to_string(),
            "harmonics" => self.harmonics.to_string(),
            "spike_prob" => self.spike_prob.to_string(),
            "amp_jitter" => self.amp_jitter.to_string(),
            "noise_sigma" => self.noise_sigma.to_string(),
            "data_path" => self.data_path.clone(),
            "checkpoint_path" => self.checkpoint_path.clone(),
            "loss_path" => self.loss_path.clone(),
            "output_path" => self.output_path.clone(),
            "metrics_path" => self.metrics_path.clone(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.value_of(key));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                detail: format!("expected key = value, got {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config {
                    line: i + 1,
                    detail: format!("unknown key {k:?}"),
                });
            }
            if let Some((first, ..)) = entries.iter().find(|e| e.1 == k) {
                return Err(Error::Config {
                    line: i + 1,
                    detail: format!("key {k:?} already set on line {first}"),
                });
            }
            entries.push((i + 1, k, v));
        }
        let mut cfg = match entries.iter().find(|e| e.1 == "profile") {
            Some(&(line, _, v)) => Self::for_profile(v.parse().map_err(|detail| Error::Config { line, detail })?),
            None => Self::toy(),
        };
        let mut mask = MaskFields::from(&cfg.mask);
        for &(line, k, v) in &entries {
            cfg.set(k, v, &mut mask)
                .map_err(|detail| Error::Config { line, detail: format!("{k}: {detail}") })?;
        }
        cfg.mask = mask.build();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config { line, detail } => Error::Format {
                path: path.display().to_string(),
                location: format!("line {line}"),
                detail,
            },
            other => other,
        })
    }

    fn set(&mut self, key: &str, v: &str, mask: &mut MaskFields) -> std::result::Result<(), String> {
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse {v:?}"))
        }
        match key {
            "profile" => {}
            "seed" => self.seed = num(v)?,
            "steps" => self.steps = num(v)?,
            "beta_start" => self.beta_start = num(v)?,
            "beta_end" => self.beta_end = num(v)?,
            "channels" => self.channels = num(v)?,
            "width" => self.width = num(v)?,
            "depth" => self.depth = num(v)?,
            "kernels" => {
                self.kernels = v.split(',').map(|s| num(s.trim())).collect::<std::result::Result<_, _>>()?
            }
            "head_experts" => self.head_experts = num(v)?,
            "d_emb" => self.d_emb = num(v)?,
            "gate_mode" => self.gate_mode = v.parse().map_err(|e: Error| e.to_string())?,
            "learning_rate" => self.learning_rate = num(v)?,
            "momentum" => self.momentum = num(v)?,
            "train_steps" => self.train_steps = num(v)?,
            "batch_size" => self.batch_size = num(v)?,
            "mask_kind" => {
                if v != "random" && v != "continuous" {
                    return Err(format!("expected random or continuous, got {v:?}"));
                }
                mask.kind = v.to_string();
            }
            "mask_ratio" => mask.ratio = num(v)?,
            "drop_length" => mask.drop_length = num(v)?,
            "drop_channels" => mask.drop_channels = num(v)?,
            "shared_window" => mask.shared_window = num(v)?,
            "mask_seed" => mask.seed = num(v)?,
            "n_samples" => self.n_samples = num(v)?,
            "length" => self.length = num(v)?,
            "f_min" => self.f_min = num(v)?,
            "f_max" => self.f_max = num(v)?,
            "harmonics" => self.harmonics = num(v)?,
            "spike_prob" => self.spike_prob = num(v)?,
            "amp_jitter" => self.amp_jitter = num(v)?,
            "noise_sigma" => self.noise_sigma = num(v)?,
            "data_path" => self.data_path = v.to_string(),
            "checkpoint_path" => self.checkpoint_path = v.to_string(),
            "loss_path" => self.loss_path = v.to_string(),
            "output_path" => self.output_path = v.to_string(),
            "metrics_path" => self.metrics_path = v.to_string(),
            _ => unreachable!(),
        }
        Ok(())
    }
}

/// Mask keys gathered before the spec is assembled.
struct MaskFields {
    kind: String,
    ratio: f64,
    drop_length: usize,
    drop_channels: usize,
    shared_window: bool,
    seed: u64,
}

impl From<&MaskSpec> for MaskFields {
    fn from(m: &MaskSpec) -> Self {
        let mut f = MaskFields {
            kind: String::new(),
            ratio: 0.0,
            drop_length: 1,
            drop_channels: 1,
            shared_window: false,
            seed: m.seed,
        };
        match m.kind {
            MaskKind::Random { ratio } => {
                f.kind = "random".into();
                f.ratio = ratio;
            }
            MaskKind::Continuous {
                drop_length,
                drop_channels,
                shared_window,
            } => {
                f.kind = "continuous".into();
                f.drop_length = drop_length;
                f.drop_channels = drop_channels;
                f.shared_window = shared_window;
            }
        }
        f
    }
}

impl MaskFields {
    fn build(&self) -> MaskSpec {
        let kind = match self.kind.as_str() {
            "random" => MaskKind::Random { ratio: self.ratio },
            _ => MaskKind::Continuous {
                drop_length: self.drop_length,
                drop_channels: self.drop_channels,
                shared_window: self.shared_window,
            },
        };
        MaskSpec { kind, seed: self.seed }
    }
}
