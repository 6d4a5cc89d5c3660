//! Two-stage training at desk scale.
//!
//! Stage 1 trains the toy network with a sub-center AM loss while the margin
//! ramps up linearly. The large-margin fine-tuning stage drops the
//! speed-perturbed classes, consolidates the sub-centers, switches to AAM
//! with longer crops, an exponential margin ramp and a much lower rate.

mod config;
mod net;
mod schedule;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use config::{StageConfig, TrainConfig};
pub use net::{Cache, NetConfig, PoolingKind, ToyNet};
pub use schedule::{MarginSchedule, PlateauScheduler, RampShape};

use crate::dataio::{original_speaker, synth_features, FeatureArchive, Split, SynthCorpus};
use crate::error::{Error, Result};
use crate::feats::{crop_frames, FeatureMatrix};
use crate::losses::{
    consolidate_dominated, consolidate_sum, fill_unit_gaussian, loss_and_grad, MarginLossConfig, SubCenterBank,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub id: String,
    pub class: usize,
    pub feats: FeatureMatrix,
}

/// Labelled frame-level features.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainCorpus {
    pub class_names: Vec<String>,
    pub items: Vec<TrainItem>,
}

impl TrainCorpus {
    /// Training split of a synthetic corpus with per-utterance synthetic frames.
    pub fn from_synth(corpus: &SynthCorpus, frames_per_utt: usize, frame_noise: f64, seed: u64) -> Self {
        let class_index: std::collections::HashMap<&str, usize> =
            corpus.train_classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let items = corpus
            .utterances
            .par_iter()
            .enumerate()
            .filter(|(_, u)| u.split == Split::Train)
            .map(|(i, u)| TrainItem {
                id: u.id.clone(),
                class: class_index[u.speaker.as_str()],
                feats: synth_features(&u.vec, frames_per_utt, frame_noise, seed, i as u64),
            })
            .collect();
        Self { class_names: corpus.train_classes.clone(), items }
    }

    /// Builds a corpus from a feature archive and `(utt, class)` pairs;
    /// classes are numbered in order of first appearance in `utt2class`.
    pub fn from_archive(archive: FeatureArchive, utt2class: &[(String, String)]) -> Result<Self> {
        let mut class_names: Vec<String> = Vec::new();
        let mut class_index = std::collections::HashMap::new();
        let mut utt_class = std::collections::HashMap::new();
        for (utt, class) in utt2class {
            let next = class_index.len();
            let c = *class_index.entry(class.clone()).or_insert_with(|| {
                class_names.push(class.clone());
                next
            });
            utt_class.insert(utt.as_str(), c);
        }
        let mut items = Vec::new();
        for (id, feats) in archive.records {
            if let Some(&class) = utt_class.get(id.as_str()) {
                items.push(TrainItem { id, class, feats });
            }
        }
        if items.is_empty() {
            return Err(Error::NoData("no labelled utterances in the feature archive".into()));
        }
        Ok(Self { class_names, items })
    }

    /// Drops speed-perturbed classes, renumbering the rest in order.
    pub fn without_speed_copies(&self) -> Self {
        let mut remap = vec![None; self.class_names.len()];
        let mut class_names = Vec::new();
        for (i, c) in self.class_names.iter().enumerate() {
            if original_speaker(c).is_none() {
                remap[i] = Some(class_names.len());
                class_names.push(c.clone());
            }
        }
        let items = self
            .items
            .iter()
            .filter_map(|it| remap[it.class].map(|class| TrainItem { class, ..it.clone() }))
            .collect();
        Self { class_names, items }
    }
}

/// Everything needed to resume or use a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: ToyNet,
    pub bank: SubCenterBank,
    pub class_names: Vec<String>,
    pub config: TrainConfig,
    pub stage: String,
    pub step: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn embed(&self, feats: &FeatureMatrix) -> Result<Vec<f64>> {
        Ok(self.net.embed(feats.frames.view())?.to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Consolidation {
    /// Keep the largest-norm sub-center of each class.
    Dominated,
    /// Replace the sub-centers by their sum.
    Sum,
    /// Fine-tune with all sub-centers.
    KeepSubCenters,
}

impl Consolidation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dominated" | "max" => Ok(Self::Dominated),
            "sum" => Ok(Self::Sum),
            "keep" | "keep_k3" | "keep-k3" => Ok(Self::KeepSubCenters),
            _ => Err(Error::Parse(format!("unknown consolidation {s:?}"))),
        }
    }
}

/// Loss per step and the learning rate in force at each step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub validation: Vec<f64>,
}

struct Crop {
    frames: Array2<f64>,
    class: usize,
}

fn sample_crops(corpus: &TrainCorpus, n: usize, frames: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Crop>> {
    let mut picks = Vec::with_capacity(n);
    for _ in 0..n {
        let i = rng.random_range(0..corpus.items.len());
        let len = corpus.items[i].feats.n_frames();
        let start = if len > frames { rng.random_range(0..=len - frames) } else { 0 };
        picks.push((i, start));
    }
    picks
        .into_iter()
        .map(|(i, start)| {
            let it = &corpus.items[i];
            Ok(Crop { frames: crop_frames(&it.feats, frames, start)?.frames, class: it.class })
        })
        .collect()
}

fn forward_batch(net: &ToyNet, crops: &[Crop]) -> Result<(Array2<f64>, Vec<Cache>)> {
    let outs = crops.par_iter().map(|c| net.forward(c.frames.view())).collect::<Result<Vec<_>>>()?;
    let mut emb = Array2::zeros((crops.len(), net.embed_dim()));
    let mut caches = Vec::with_capacity(outs.len());
    for (i, (e, cache)) in outs.into_iter().enumerate() {
        emb.row_mut(i).assign(&e);
        caches.push(cache);
    }
    Ok((emb, caches))
}

// Inside the loop a non-finite value or a collapsed norm can only come from the updates.
fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(_) | Error::DegenerateEmbedding(_) => Error::Diverged { step, loss: f64::NAN },
        other => other,
    }
}

/// Returns false if any parameter left the finite range.
fn sgd_update(params: &mut [&mut [f64]], grads: &[&[f64]], velocity: &mut [&mut [f64]], lr: f64, momentum: f64, wd: f64) -> bool {
    let mut finite = true;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((p, g), v) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            let g = g + wd * *p;
            *v = momentum * *v + g;
            *p -= lr * *v;
            finite &= p.is_finite();
        }
    }
    finite
}

/// Runs one stage of minibatch SGD and returns the updated parameters.
fn run_stage(
    mut net: ToyNet,
    mut bank: SubCenterBank,
    corpus: &TrainCorpus,
    stage: &StageConfig,
    validation_size: usize,
    seed: u64,
) -> Result<(ToyNet, SubCenterBank, TrainTrace)> {
    stage.validate()?;
    if corpus.items.is_empty() {
        return Err(Error::NoData("empty training corpus".into()));
    }
    if bank.n_classes() != corpus.class_names.len() {
        return Err(Error::Internal(format!(
            "bank has {} classes, corpus has {}",
            bank.n_classes(),
            corpus.class_names.len()
        )));
    }
    let schedule = MarginSchedule::new(stage.margin_start, stage.margin_end, stage.ramp_steps(), stage.margin_shape)?;
    let mut plateau = PlateauScheduler::new(stage.lr0, stage.patience, stage.decay_factor, stage.min_lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val_rng = ChaCha8Rng::seed_from_u64(seed);
    val_rng.set_stream(1);
    let val_crops = sample_crops(corpus, validation_size.max(1), stage.frames, &mut val_rng)?;
    let val_labels: Vec<usize> = val_crops.iter().map(|c| c.class).collect();
    // validation uses the final margin so successive values stay comparable
    let val_cfg = MarginLossConfig { kind: stage.loss, scale: stage.scale, margin: stage.margin_end };

    let mut vel_net = net.zeros_like();
    let mut vel_bank = Array3::<f64>::zeros(bank.weights.dim());
    let mut trace = TrainTrace::default();
    for step in 0..stage.steps {
        let cfg = MarginLossConfig { kind: stage.loss, scale: stage.scale, margin: schedule.margin_at(step)? };
        let crops = sample_crops(corpus, stage.batch, stage.frames, &mut rng)?;
        let labels: Vec<usize> = crops.iter().map(|c| c.class).collect();
        let (emb, caches) = forward_batch(&net, &crops).map_err(|e| diverged(step, e))?;
        let lg = loss_and_grad(emb.view(), &labels, &bank, &cfg).map_err(|e| diverged(step, e))?;
        if !lg.loss.is_finite() {
            return Err(Error::Diverged { step, loss: lg.loss });
        }
        let grads = caches
            .par_iter()
            .zip(lg.embeddings.axis_iter(Axis(0)).collect::<Vec<_>>())
            .map(|(cache, g)| net.backward(cache, g))
            .collect::<Result<Vec<_>>>()?;
        let mut g_net = net.zeros_like();
        for g in &grads {
            g_net.accumulate(g);
        }

        let lr = plateau.lr;
        {
            let mut params = net.tensors_mut();
            params.push(bank.weights.as_slice_mut().expect("standard layout"));
            let mut grads = g_net.tensors();
            grads.push(lg.bank.as_slice().expect("standard layout"));
            let mut vel = vel_net.tensors_mut();
            vel.push(vel_bank.as_slice_mut().expect("standard layout"));
            if !sgd_update(&mut params, &grads, &mut vel, lr, stage.momentum, stage.weight_decay) {
                return Err(Error::Diverged { step, loss: lg.loss });
            }
        }
        trace.losses.push(lg.loss);
        trace.lrs.push(lr);

        if (step + 1) % stage.validate_every == 0 {
            let (val_emb, _) = forward_batch(&net, &val_crops).map_err(|e| diverged(step, e))?;
            let v = loss_and_grad(val_emb.view(), &val_labels, &bank, &val_cfg).map_err(|e| diverged(step, e))?;
            trace.validation.push(v.loss);
            plateau.step(v.loss);
            log::debug!("step {} loss {:.4} val {:.4} lr {:e}", step + 1, lg.loss, v.loss, plateau.lr);
        }
    }
    Ok((net, bank, trace))
}

/// Stage 1: fresh network and a `K`-sub-center bank trained with the stage-1 recipe.
pub fn train_stage1(corpus: &TrainCorpus, cfg: &TrainConfig) -> Result<(Checkpoint, TrainTrace)> {
    cfg.validate()?;
    if corpus.class_names.is_empty() {
        return Err(Error::NoData("corpus has no classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = ToyNet::init(&cfg.net, &mut rng)?;
    let bank = SubCenterBank::random(corpus.class_names.len(), cfg.sub_centers, cfg.net.embed_dim, &mut rng)?;
    let (net, bank, trace) = run_stage(net, bank, corpus, &cfg.stage1, cfg.validation_size, cfg.seed.wrapping_add(1))?;
    let ckpt = Checkpoint {
        net,
        bank,
        class_names: corpus.class_names.clone(),
        config: cfg.clone(),
        stage: "stage1".into(),
        step: cfg.stage1.steps as u64,
        seed: cfg.seed,
    };
    Ok((ckpt, trace))
}

/// Consolidates the bank and restricts it to the non-speed-perturbed classes
/// of `corpus`, in that corpus's class order.
pub fn prepare_lmft(ckpt: &Checkpoint, corpus: &TrainCorpus, consolidation: Consolidation) -> Result<(Checkpoint, TrainCorpus)> {
    let bank = match consolidation {
        Consolidation::Dominated => consolidate_dominated(&ckpt.bank),
        Consolidation::Sum => consolidate_sum(&ckpt.bank).0,
        Consolidation::KeepSubCenters => {
            if ckpt.bank.k() < 2 {
                return Err(Error::InconsistentK(format!(
                    "keeping sub-centers needs K > 1, checkpoint has K = {}",
                    ckpt.bank.k()
                )));
            }
            ckpt.bank.clone()
        }
    };
    let corpus = corpus.without_speed_copies();
    let index: std::collections::HashMap<&str, usize> =
        ckpt.class_names.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let keep = corpus
        .class_names
        .iter()
        .map(|c| index.get(c.as_str()).copied().ok_or_else(|| Error::BadLabel { label: usize::MAX, n_classes: ckpt.class_names.len() }))
        .collect::<Result<Vec<_>>>()
        .map_err(|_| Error::NoData("corpus class missing from checkpoint; extend the classifier first".into()))?;
    let bank = bank.select_classes(&keep)?;
    let out = Checkpoint { bank, class_names: corpus.class_names.clone(), stage: "lmft".into(), ..ckpt.clone() };
    Ok((out, corpus))
}

/// Large-margin fine-tuning from a stage-1 checkpoint.
pub fn train_lmft(
    ckpt: &Checkpoint,
    corpus: &TrainCorpus,
    cfg: &TrainConfig,
    consolidation: Consolidation,
) -> Result<(Checkpoint, TrainTrace)> {
    cfg.validate()?;
    let (start, corpus) = prepare_lmft(ckpt, corpus, consolidation)?;
    if cfg.lmft.steps == 0 {
        return Ok((start, TrainTrace::default()));
    }
    let seed = cfg.seed.wrapping_add(2);
    let (net, bank, trace) = run_stage(start.net.clone(), start.bank.clone(), &corpus, &cfg.lmft, cfg.validation_size, seed)?;
    let out = Checkpoint { net, bank, step: start.step + cfg.lmft.steps as u64, config: cfg.clone(), ..start };
    Ok((out, trace))
}

/// Appends `n_new` randomly initialised, unit-norm classes named `extra00000`, ...
pub fn extend_classifier(ckpt: &Checkpoint, n_new: usize, seed: u64) -> Result<Checkpoint> {
    if n_new == 0 {
        return Err(Error::NothingToAdd("requested zero new classes".into()));
    }
    let (j, k, d) = ckpt.bank.weights.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Array3::zeros((j + n_new, k, d));
    weights.slice_mut(ndarray::s![..j, .., ..]).assign(&ckpt.bank.weights);
    for c in j..j + n_new {
        for s in 0..k {
            fill_unit_gaussian(weights.slice_mut(ndarray::s![c, s, ..]), &mut rng);
        }
    }
    let mut class_names = ckpt.class_names.clone();
    class_names.extend((0..n_new).map(|i| format!("extra{:05}", j + i)));
    Ok(Checkpoint { bank: SubCenterBank::new(weights)?, class_names, ..ckpt.clone() })
}
