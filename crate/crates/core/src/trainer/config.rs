use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::losses::MarginKind;

use super::net::{NetConfig, PoolingKind};
use super::schedule::RampShape;

/// Hyper-parameters of one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub steps: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub frames: usize,
    pub margin_start: f64,
    pub margin_end: f64,
    pub margin_shape: RampShape,
    /// Fraction of `steps` over which the margin ramps; flat afterwards.
    pub ramp_fraction: f64,
    pub loss: MarginKind,
    pub scale: f64,
    pub patience: usize,
    pub decay_factor: f64,
    pub min_lr: f64,
    pub validate_every: usize,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            steps: 20_000,
            lr0: 0.08,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch: 1024,
            frames: 200,
            margin_start: 0.0,
            margin_end: 0.2,
            margin_shape: RampShape::Linear,
            ramp_fraction: 0.6,
            loss: MarginKind::Am,
            scale: 32.0,
            patience: 2,
            decay_factor: 0.1,
            min_lr: 1e-6,
            validate_every: 2000,
        }
    }

    pub fn lmft() -> Self {
        Self {
            steps: 2000,
            lr0: 8e-5,
            batch: 256,
            frames: 1200,
            margin_start: 0.2,
            margin_end: 0.8,
            margin_shape: RampShape::Exponential,
            ramp_fraction: 1.0,
            loss: MarginKind::Aam,
            decay_factor: 0.5,
            ..Self::stage1()
        }
    }

    pub fn ramp_steps(&self) -> usize {
        ((self.steps as f64 * self.ramp_fraction).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch == 0 || self.frames == 0 || self.validate_every == 0 {
            return bad("batch, frames and validate_every must be positive");
        }
        if !(self.lr0 >= 0.0) || !(self.min_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("need lr0 >= 0, min_lr > 0 and momentum in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !(self.scale > 0.0) {
            return bad("need weight_decay >= 0 and scale > 0");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad("decay_factor must lie in (0, 1)");
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0) {
            return bad("ramp_fraction must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub sub_centers: usize,
    pub stage1: StageConfig,
    pub lmft: StageConfig,
    /// Number of fixed crops used for the plateau scheduler's validation loss.
    pub validation_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            sub_centers: 3,
            stage1: StageConfig::stage1(),
            lmft: StageConfig::lmft(),
            validation_size: 256,
            seed: 0,
        }
    }
}

fn kind_str(k: MarginKind) -> &'static str {
    match k {
        MarginKind::Am => "am",
        MarginKind::Aam => "aam",
    }
}

fn parse_kind(s: &str) -> Result<MarginKind> {
    match s {
        "am" => Ok(MarginKind::Am),
        "aam" => Ok(MarginKind::Aam),
        _ => Err(Error::Parse(format!("unknown loss {s:?}"))),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    /// Small settings that train in seconds on a laptop.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.stage1.steps = 400;
        c.stage1.batch = 32;
        c.stage1.frames = 40;
        c.stage1.validate_every = 50;
        c.stage1.lr0 = 0.05;
        c.lmft.steps = 150;
        c.lmft.batch = 32;
        c.lmft.frames = 80;
        c.lmft.validate_every = 50;
        c.lmft.lr0 = 5e-3;
        c.validation_size = 64;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.sub_centers == 0 {
            return Err(Error::InvalidConfig("sub_centers must be at least 1".into()));
        }
        self.stage1.validate()?;
        self.lmft.validate()
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let n = &self.net;
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "sub_centers = {}", self.sub_centers);
        let _ = writeln!(out, "validation_size = {}", self.validation_size);
        let _ = writeln!(out, "net.input_dim = {}", n.input_dim);
        let _ = writeln!(out, "net.hidden = {}", n.hidden);
        let _ = writeln!(out, "net.channels = {}", n.channels);
        let _ = writeln!(out, "net.embed_dim = {}", n.embed_dim);
        match n.pooling {
            PoolingKind::Gsp => {
                let _ = writeln!(out, "net.pooling = gsp");
            }
            PoolingKind::Mqmha { heads, queries } => {
                let _ = writeln!(out, "net.pooling = mqmha");
                let _ = writeln!(out, "net.heads = {heads}");
                let _ = writeln!(out, "net.queries = {queries}");
            }
        }
        for (name, s) in [("stage1", &self.stage1), ("lmft", &self.lmft)] {
            let _ = writeln!(out, "{name}.steps = {}", s.steps);
            let _ = writeln!(out, "{name}.lr0 = {:?}", s.lr0);
            let _ = writeln!(out, "{name}.momentum = {:?}", s.momentum);
            let _ = writeln!(out, "{name}.weight_decay = {:?}", s.weight_decay);
            let _ = writeln!(out, "{name}.batch = {}", s.batch);
            let _ = writeln!(out, "{name}.frames = {}", s.frames);
            let _ = writeln!(out, "{name}.margin_start = {:?}", s.margin_start);
            let _ = writeln!(out, "{name}.margin_end = {:?}", s.margin_end);
            let _ = writeln!(out, "{name}.margin_shape = {}", s.margin_shape.as_str());
            let _ = writeln!(out, "{name}.ramp_fraction = {:?}", s.ramp_fraction);
            let _ = writeln!(out, "{name}.loss = {}", kind_str(s.loss));
            let _ = writeln!(out, "{name}.scale = {:?}", s.scale);
            let _ = writeln!(out, "{name}.patience = {}", s.patience);
            let _ = writeln!(out, "{name}.decay_factor = {:?}", s.decay_factor);
            let _ = writeln!(out, "{name}.min_lr = {:?}", s.min_lr);
            let _ = writeln!(out, "{name}.validate_every = {}", s.validate_every);
        }
        out
    }

    /// Applies `key = value` overrides on top of `self`; unknown keys are errors.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        let mut heads = None;
        let mut queries = None;
        let mut pooling = None;
        for (key, v) in kv {
            let v = v.as_str();
            if let Some((stage, field)) = key.split_once('.').filter(|(s, _)| *s == "stage1" || *s == "lmft") {
                let s = if stage == "stage1" { &mut self.stage1 } else { &mut self.lmft };
                match field {
                    "steps" => s.steps = num(key, v)?,
                    "lr0" => s.lr0 = num(key, v)?,
                    "momentum" => s.momentum = num(key, v)?,
                    "weight_decay" => s.weight_decay = num(key, v)?,
                    "batch" => s.batch = num(key, v)?,
                    "frames" => s.frames = num(key, v)?,
                    "margin_start" => s.margin_start = num(key, v)?,
                    "margin_end" => s.margin_end = num(key, v)?,
                    "margin_shape" => s.margin_shape = RampShape::parse(v)?,
                    "ramp_fraction" => s.ramp_fraction = num(key, v)?,
                    "loss" => s.loss = parse_kind(v)?,
                    "scale" => s.scale = num(key, v)?,
                    "patience" => s.patience = num(key, v)?,
                    "decay_factor" => s.decay_factor = num(key, v)?,
                    "min_lr" => s.min_lr = num(key, v)?,
                    "validate_every" => s.validate_every = num(key, v)?,
                    _ => return Err(Error::Parse(format!("unknown config key {key}"))),
                }
                continue;
            }
            match key.as_str() {
                "seed" => self.seed = num(key, v)?,
                "sub_centers" => self.sub_centers = num(key, v)?,
                "validation_size" => self.validation_size = num(key, v)?,
                "net.input_dim" => self.net.input_dim = num(key, v)?,
                "net.hidden" => self.net.hidden = num(key, v)?,
                "net.channels" => self.net.channels = num(key, v)?,
                "net.embed_dim" => self.net.embed_dim = num(key, v)?,
                "net.pooling" => pooling = Some(v.to_string()),
                "net.heads" => heads = Some(num::<usize>(key, v)?),
                "net.queries" => queries = Some(num::<usize>(key, v)?),
                _ => return Err(Error::Parse(format!("unknown config key {key}"))),
            }
        }
        let (cur_heads, cur_queries) = match self.net.pooling {
            PoolingKind::Mqmha { heads, queries } => (heads, queries),
            PoolingKind::Gsp => (2, 1),
        };
        let want_mqmha = match pooling.as_deref() {
            Some("gsp") => false,
            Some("mqmha") => true,
            Some(other) => return Err(Error::Parse(format!("unknown pooling {other:?}"))),
            None => matches!(self.net.pooling, PoolingKind::Mqmha { .. }),
        };
        self.net.pooling = if want_mqmha {
            PoolingKind::Mqmha { heads: heads.unwrap_or(cur_heads), queries: queries.unwrap_or(cur_queries) }
        } else {
            PoolingKind::Gsp
        };
        self.validate()
    }

    pub fn from_kv_text(text: &str, base: TrainConfig) -> Result<Self> {
        let kv = crate::dataio::parse_key_values(text)?;
        let mut cfg = base;
        cfg.apply_kv(&kv)?;
        Ok(cfg)
    }
}
