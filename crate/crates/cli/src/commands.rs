use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;
use svkit::backend::{
    asnorm_scores, build_cohort, compute_genre_means, fuse as fuse_sets, score_trials, Embedding, GenreMeans, Scoring,
    ScoreSet, TrialList,
};
use svkit::dataio::{
    format_score, gen_retrieval as make_retrieval, gen_synthetic, gen_trials as make_trials, load_checkpoint,
    parse_enrollments, parse_genre_table, parse_scores, parse_trials, parse_two_column, save_checkpoint,
    synth_features, write_atomic, write_enrollments, write_scores, write_trials, EmbeddingArchive, Enrollment,
    FeatureArchive, GenreTable, SynthCorpusSpec, CNCELEB_GENRES,
};
use svkit::feats::{FbankExtractor, FeatureConfig, Waveform};
use svkit::metrics::{det_curve, eer, mean_average_precision, min_dcf, Candidate, DcfParams, RetrievalQuery, RetrievalRun};
use svkit::trainer::{train_lmft, train_stage1, Consolidation, TrainConfig, TrainCorpus, TrainTrace};
use svkit::{Error, Result};

use crate::corpus::{self, read_text};
use crate::GenreArgs;

pub struct Context {
    pub seed: Option<u64>,
    pub quiet: bool,
}

impl Context {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn print(&self, line: &str) {
        if !self.quiet {
            println!("{line}");
        }
    }
}

fn text_file(path: &Path) -> Result<String> {
    read_text(path)
}

fn load_embeddings(path: &Path) -> Result<EmbeddingArchive> {
    EmbeddingArchive::load(path).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

// ---------------------------------------------------------------- fbank

#[derive(Args, Debug)]
pub struct FbankArgs {
    /// WAV file(s); the utterance id is the file stem.
    #[arg(long)]
    wav: Vec<PathBuf>,
    /// Two-column list `utt-id path.wav`.
    #[arg(long)]
    wav_list: Option<PathBuf>,
    /// Output feature archive.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 80)]
    num_mel: usize,
    /// Drop the log-energy column.
    #[arg(long)]
    no_energy: bool,
    /// Skip cepstral mean normalization.
    #[arg(long)]
    no_cmn: bool,
}

pub fn fbank(_ctx: &Context, a: FbankArgs) -> Result<()> {
    let mut inputs: Vec<(String, PathBuf)> = a
        .wav
        .iter()
        .map(|p| (p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(), p.clone()))
        .collect();
    if let Some(list) = &a.wav_list {
        inputs.extend(parse_two_column(&text_file(list)?)?.into_iter().map(|(id, p)| (id, PathBuf::from(p))));
    }
    if inputs.is_empty() {
        return Err(Error::NoData("no input WAV files".into()));
    }
    let cfg = FeatureConfig { n_mels: a.num_mel, include_energy: !a.no_energy, ..Default::default() };
    let extractor = FbankExtractor::new(cfg.clone())?;
    let feats = inputs
        .par_iter()
        .map(|(id, path)| {
            let wave = Waveform::read_wav(path).map_err(|e| with_path(e, path))?;
            let f = extractor.extract(&wave)?;
            let f = if a.no_cmn { f } else { svkit::feats::apply_cmn(&f) };
            Ok((id.clone(), f))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut archive = FeatureArchive::new(cfg.dim());
    archive.records = feats;
    archive.save(&a.out)?;
    log::info!("wrote {} feature matrices to {}", inputs.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------- synthetic data

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    /// Output corpus directory.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    speakers: usize,
    #[arg(long, default_value_t = 10)]
    utts_per_speaker: usize,
    #[arg(long, default_value_t = 81)]
    dim: usize,
    /// Number of genres, taken in order from the eleven corpus genres.
    #[arg(long, default_value_t = 8)]
    genres: usize,
    #[arg(long, default_value_t = 0.5)]
    genre_offset: f64,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    /// Add two speed-perturbed copies of every training speaker.
    #[arg(long)]
    speed_triple: bool,
    #[arg(long, default_value_t = 0.5)]
    speed_perturb: f64,
    /// Held-out speakers for trials and retrieval.
    #[arg(long, default_value_t = 40)]
    eval_speakers: usize,
    #[arg(long, default_value_t = 1)]
    min_utts: usize,
    /// Frames per utterance in feats.svfm (0 skips feature synthesis).
    #[arg(long, default_value_t = 200)]
    frames: usize,
    #[arg(long, default_value_t = 1.0)]
    frame_noise: f64,
}

pub fn gen_synth(ctx: &Context, a: GenSynthArgs) -> Result<()> {
    if a.genres == 0 || a.genres > CNCELEB_GENRES.len() {
        return Err(Error::InvalidConfig(format!("--genres must be in 1..={}", CNCELEB_GENRES.len())));
    }
    let spec = SynthCorpusSpec {
        n_speakers: a.speakers,
        utterances_per_speaker: a.utts_per_speaker,
        dim: a.dim,
        genres: CNCELEB_GENRES[..a.genres].iter().map(|g| g.to_string()).collect(),
        genre_offset_scale: a.genre_offset,
        within_speaker_noise: a.noise,
        speed_triple: a.speed_triple,
        speed_perturb_scale: a.speed_perturb,
        n_eval_speakers: a.eval_speakers,
        min_utterances: a.min_utts,
        seed: ctx.seed(),
    };
    let c = gen_synthetic(&spec)?;
    corpus::write_corpus(&a.out_dir, &c)?;
    if a.frames > 0 {
        let records = c
            .utterances
            .par_iter()
            .enumerate()
            .map(|(i, u)| (u.id.clone(), synth_features(&u.vec, a.frames, a.frame_noise, ctx.seed(), i as u64)))
            .collect();
        let mut archive = FeatureArchive::new(a.dim);
        archive.records = records;
        archive.save(a.out_dir.join(corpus::FEATS))?;
    }
    log::info!(
        "{} utterances, {} training classes, {} held-out speakers in {}",
        c.utterances.len(),
        c.train_classes.len(),
        c.eval_speakers.len(),
        a.out_dir.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenTrialsArgs {
    /// Corpus directory written by gen-synth.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    targets: usize,
    #[arg(long)]
    nontargets: usize,
    /// Build enrollments from 2-3 concatenated utterances.
    #[arg(long)]
    concat: bool,
    /// Output trial list.
    #[arg(long)]
    out: PathBuf,
    /// Output enrollment map.
    #[arg(long)]
    enroll_out: Option<PathBuf>,
}

fn write_enroll_map(path: &Option<PathBuf>, enrollments: &[Enrollment]) -> Result<()> {
    if let Some(p) = path {
        write_atomic(p, write_enrollments(enrollments).as_bytes())?;
    }
    Ok(())
}

pub fn gen_trials(ctx: &Context, a: GenTrialsArgs) -> Result<()> {
    let c = corpus::load_corpus(&a.corpus)?;
    let set = make_trials(&c, a.targets, a.nontargets, a.concat, ctx.seed())?;
    write_atomic(&a.out, write_trials(&set.trials).as_bytes())?;
    write_enroll_map(&a.enroll_out, &set.enrollments)?;
    log::info!("{} trials, {} enrollments", set.trials.trials.len(), set.enrollments.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenRetrievalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 25)]
    targets: usize,
    #[arg(long, default_value_t = 10)]
    tests_per_target: usize,
    /// Pool items from non-target speakers.
    #[arg(long, default_value_t = 100)]
    nontargets: usize,
    /// Output manifest (every target against every pool item, labelled).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    enroll_out: Option<PathBuf>,
}

pub fn gen_retrieval(ctx: &Context, a: GenRetrievalArgs) -> Result<()> {
    let c = corpus::load_corpus(&a.corpus)?;
    let m = make_retrieval(&c, a.targets, a.tests_per_target, a.nontargets, ctx.seed())?;
    write_atomic(&a.out, write_trials(&m.trials).as_bytes())?;
    write_enroll_map(&a.enroll_out, &m.enrollments)?;
    log::info!("{} targets, {} manifest lines", m.enrollments.len(), m.trials.trials.len());
    Ok(())
}

// ---------------------------------------------------------------- training

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Feature archive.
    #[arg(long)]
    feats: PathBuf,
    /// Utterance-to-class map.
    #[arg(long)]
    utt2spk: PathBuf,
    /// Optional utterance-to-split map; only `train` utterances are used.
    #[arg(long)]
    utt2split: Option<PathBuf>,
    /// Key-value overrides of the desk-scale training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Which stages to run: stage1, lmft or both.
    #[arg(long, default_value = "both")]
    stage: String,
    /// Stage-1 checkpoint to fine-tune (required for --stage lmft).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Sub-center handling before fine-tuning: dominated, sum or keep.
    #[arg(long, default_value = "dominated")]
    consolidation: String,
    /// Final checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Also keep the stage-1 checkpoint here.
    #[arg(long)]
    stage1_out: Option<PathBuf>,
    /// Per-step `stage step loss lr` log.
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn append_trace(out: &mut String, stage: &str, trace: &TrainTrace) {
    for (i, (loss, lr)) in trace.losses.iter().zip(&trace.lrs).enumerate() {
        let _ = writeln!(out, "{stage} {} {} {}", i + 1, format_score(*loss), format_score(*lr));
    }
}

pub fn train(ctx: &Context, a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::desk();
    if let Some(p) = &a.config {
        cfg = TrainConfig::from_kv_text(&text_file(p)?, cfg)?;
    }
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let (run_stage1, run_lmft) = match a.stage.as_str() {
        "stage1" => (true, false),
        "lmft" => (false, true),
        "both" => (true, true),
        other => return Err(Error::InvalidConfig(format!("unknown stage {other:?}"))),
    };
    let consolidation = Consolidation::parse(&a.consolidation)?;

    let archive = FeatureArchive::load(&a.feats).map_err(|e| with_path(e, &a.feats))?;
    let mut utt2spk = parse_two_column(&text_file(&a.utt2spk)?)?;
    if let Some(p) = &a.utt2split {
        let split: HashMap<String, String> = parse_two_column(&text_file(p)?)?.into_iter().collect();
        utt2spk.retain(|(utt, _)| split.get(utt).map(String::as_str) == Some("train"));
    }
    let corpus = TrainCorpus::from_archive(archive, &utt2spk)?;
    log::info!("{} utterances, {} classes", corpus.items.len(), corpus.class_names.len());

    let mut trace_text = String::new();
    let stage1 = if run_stage1 {
        let (ckpt, trace) = train_stage1(&corpus, &cfg)?;
        log::info!(
            "stage 1: loss {:.4} -> {:.4}",
            trace.losses.first().copied().unwrap_or(f64::NAN),
            trace.losses.last().copied().unwrap_or(f64::NAN)
        );
        append_trace(&mut trace_text, "stage1", &trace);
        if let Some(p) = &a.stage1_out {
            save_checkpoint(&ckpt, p)?;
        }
        ckpt
    } else {
        let init = a.init.as_ref().ok_or_else(|| Error::InvalidConfig("--stage lmft needs --init".into()))?;
        load_checkpoint(init).map_err(|e| with_path(e, init))?
    };
    let final_ckpt = if run_lmft {
        let (ckpt, trace) = train_lmft(&stage1, &corpus, &cfg, consolidation)?;
        log::info!("fine-tuning: {} classes, {} steps", ckpt.class_names.len(), trace.losses.len());
        append_trace(&mut trace_text, "lmft", &trace);
        ckpt
    } else {
        stage1
    };
    save_checkpoint(&final_ckpt, &a.out)?;
    if let Some(p) = &a.trace {
        write_atomic(p, trace_text.as_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------- extraction

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    feats: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Enrollment map; multi-segment enrollments get the mean of their segment embeddings.
    #[arg(long)]
    enroll: Option<PathBuf>,
}

pub fn extract(_ctx: &Context, a: ExtractArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.model).map_err(|e| with_path(e, &a.model))?;
    let archive = FeatureArchive::load(&a.feats).map_err(|e| with_path(e, &a.feats))?;
    let embedded = archive
        .records
        .par_iter()
        .map(|(id, f)| Ok((id.clone(), ckpt.embed(f)?)))
        .collect::<Result<Vec<_>>>()?;
    let dim = ckpt.net.embed_dim();
    let mut out = EmbeddingArchive::new(dim);
    for (id, v) in &embedded {
        out.push(id.clone(), v.iter().map(|&x| x as f32).collect())?;
    }
    if let Some(p) = &a.enroll {
        let index: HashMap<&str, &Vec<f64>> = embedded.iter().map(|(id, v)| (id.as_str(), v)).collect();
        for e in parse_enrollments(&text_file(p)?)? {
            if e.segments.len() == 1 && e.segments[0] == e.id {
                continue;
            }
            let mut mean = vec![0.0; dim];
            for s in &e.segments {
                let v = index.get(s.as_str()).ok_or_else(|| Error::NoData(format!("no features for segment {s}")))?;
                for (m, x) in mean.iter_mut().zip(v.iter()) {
                    *m += x;
                }
            }
            let n = e.segments.len() as f64;
            out.push(e.id, mean.into_iter().map(|m| (m / n) as f32).collect())?;
        }
    }
    out.save(&a.out)?;
    log::info!("wrote {} embeddings to {}", out.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------- scoring

fn embeddings_of(archive: &EmbeddingArchive, genres: Option<&GenreTable>, enroll: &[Enrollment]) -> Vec<Embedding> {
    let segments: HashMap<&str, &Vec<String>> = enroll.iter().map(|e| (e.id.as_str(), &e.segments)).collect();
    archive
        .records
        .iter()
        .map(|(id, v)| {
            let mut e = Embedding::new(id.clone(), v.iter().map(|&x| f64::from(x)).collect());
            if let Some(table) = genres {
                match (table.get(id), segments.get(id.as_str())) {
                    (Some(g), _) if g.len() == 1 => e = e.with_genre(g[0].clone()),
                    (Some(g), _) => e = e.with_segments(g.clone()),
                    (None, Some(segs)) => {
                        let g = segs.iter().filter_map(|s| table.get(s)).flatten().cloned().collect();
                        e = e.with_segments(g);
                    }
                    (None, None) => {}
                }
            }
            e
        })
        .collect()
}

/// Embeddings with genre labels plus the genre means for Sub-Mean.
fn genre_setup(emb: &Path, g: &GenreArgs) -> Result<(Vec<Embedding>, GenreMeans)> {
    let genres_path = g.genres.as_ref().ok_or_else(|| Error::InvalidConfig("Sub-Mean needs --genres".into()))?;
    let table = parse_genre_table(&text_file(genres_path)?)?;
    let enroll = match &g.enroll {
        Some(p) => parse_enrollments(&text_file(p)?)?,
        None => Vec::new(),
    };
    let archive = load_embeddings(emb)?;
    let embeddings = embeddings_of(&archive, Some(&table), &enroll);
    let means = match &g.mean_emb {
        Some(p) => {
            let mean_table = match &g.mean_genres {
                Some(t) => parse_genre_table(&text_file(t)?)?,
                None => table.clone(),
            };
            let mean_archive = load_embeddings(p)?;
            compute_genre_means(&embeddings_of(&mean_archive, Some(&mean_table), &[]))?
        }
        None => compute_genre_means(&embeddings)?,
    };
    Ok((embeddings, means))
}

fn load_trials(path: &Path) -> Result<TrialList> {
    parse_trials(&text_file(path)?)
}

fn load_scores(path: &Path) -> Result<ScoreSet> {
    parse_scores(&text_file(path)?)
}

fn save_scores(path: &Path, set: &ScoreSet) -> Result<()> {
    write_atomic(path, write_scores(set).as_bytes())
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn score(_ctx: &Context, a: ScoreArgs) -> Result<()> {
    let archive = load_embeddings(&a.emb)?;
    let embeddings = embeddings_of(&archive, None, &[]);
    let set = score_trials(&load_trials(&a.trials)?, &embeddings, Scoring::Cosine)?;
    save_scores(&a.out, &set)
}

#[derive(Args, Debug)]
pub struct SubmeanArgs {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    genre: GenreArgs,
}

pub fn submean(_ctx: &Context, a: SubmeanArgs) -> Result<()> {
    let (embeddings, means) = genre_setup(&a.emb, &a.genre)?;
    let set = score_trials(&load_trials(&a.trials)?, &embeddings, Scoring::SubMean(&means))?;
    save_scores(&a.out, &set)
}

#[derive(Args, Debug)]
pub struct AsnormArgs {
    /// Raw score file to normalize.
    #[arg(long)]
    scores: PathBuf,
    /// Embeddings of the trial utterances.
    #[arg(long)]
    emb: PathBuf,
    /// Cohort embeddings (typically the training set).
    #[arg(long)]
    cohort_emb: PathBuf,
    /// Utterance-to-speaker map for the cohort.
    #[arg(long)]
    cohort_utt2spk: PathBuf,
    #[arg(long, default_value_t = 300)]
    top_k: usize,
    /// Compute cohort statistics on genre-centered trial vectors.
    #[arg(long)]
    sub_mean: bool,
    #[command(flatten)]
    genre: GenreArgs,
    #[arg(long)]
    out: PathBuf,
}

pub fn asnorm(ctx: &Context, a: AsnormArgs) -> Result<()> {
    let raw = load_scores(&a.scores)?;
    let cohort_archive = load_embeddings(&a.cohort_emb)?;
    let spk: HashMap<String, String> = parse_two_column(&text_file(&a.cohort_utt2spk)?)?.into_iter().collect();
    let mut by_speaker: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (id, v) in &cohort_archive.records {
        if let Some(s) = spk.get(id) {
            by_speaker.entry(s.clone()).or_default().push(v.iter().map(|&x| f64::from(x)).collect());
        }
    }
    let cohort = build_cohort(&by_speaker, a.top_k, ctx.seed())?;
    let set = if a.sub_mean {
        let (embeddings, means) = genre_setup(&a.emb, &a.genre)?;
        asnorm_scores(&raw, &embeddings, &cohort, Some(&means))?
    } else {
        let embeddings = embeddings_of(&load_embeddings(&a.emb)?, None, &[]);
        asnorm_scores(&raw, &embeddings, &cohort, None)?
    };
    save_scores(&a.out, &set)
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    /// Comma-separated nonnegative weights, one per score file.
    #[arg(long, value_delimiter = ',', required = true)]
    weights: Vec<f64>,
    /// Score files; the first fixes the output trial order.
    #[arg(required = true)]
    scores: Vec<PathBuf>,
    /// Output score file (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn fuse(_ctx: &Context, a: FuseArgs) -> Result<()> {
    let sets = a.scores.iter().map(|p| load_scores(p)).collect::<Result<Vec<_>>>()?;
    let fused = fuse_sets(&sets, &a.weights)?;
    match &a.out {
        Some(p) => save_scores(p, &fused),
        None => {
            print!("{}", write_scores(&fused));
            Ok(())
        }
    }
}

// ---------------------------------------------------------------- evaluation

/// Scores with labels from the trial list; every trial must be scored exactly once.
fn labelled_scores(trials: &Path, scores: &Path) -> Result<ScoreSet> {
    let list = load_trials(trials)?;
    let mut set = load_scores(scores)?;
    if set.trials.len() != list.trials.len() {
        return Err(Error::UnalignedScoreSets(format!(
            "{} scores for {} trials",
            set.trials.len(),
            list.trials.len()
        )));
    }
    set.attach_labels(&list)?;
    Ok(set)
}

#[derive(Args, Debug)]
pub struct EvalSvArgs {
    /// Labelled trial list.
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    p_target: f64,
    /// Write `threshold p_miss p_fa` per operating point.
    #[arg(long)]
    det_out: Option<PathBuf>,
}

pub fn eval_sv(_ctx: &Context, a: EvalSvArgs) -> Result<()> {
    let set = labelled_scores(&a.trials, &a.scores)?;
    let curve = det_curve(&set)?;
    let params = DcfParams { p_target: a.p_target, ..Default::default() };
    let dcf = min_dcf(&curve, &params)?;
    println!("EER {:.6} minDCF {:.6}", eer(&curve), dcf);
    if let Some(p) = &a.det_out {
        let mut text = String::new();
        for pt in &curve.points {
            let _ = writeln!(text, "{} {} {}", format_score(pt.threshold), format_score(pt.p_miss), format_score(pt.p_fa));
        }
        write_atomic(p, text.as_bytes())?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalSrArgs {
    /// Labelled retrieval manifest (target, candidate, relevance).
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    scores: PathBuf,
}

pub fn eval_sr(ctx: &Context, a: EvalSrArgs) -> Result<()> {
    let set = labelled_scores(&a.trials, &a.scores)?;
    let mut order: Vec<String> = Vec::new();
    let mut queries: HashMap<String, Vec<Candidate>> = HashMap::new();
    for t in set.trials {
        let label = t.label.ok_or_else(|| Error::UnlabeledTrials(format!("{} {}", t.enroll, t.test)))?;
        let q = queries.entry(t.enroll.clone()).or_default();
        if q.is_empty() {
            order.push(t.enroll.clone());
        }
        q.push(Candidate { id: t.test, score: t.score, relevant: label });
    }
    let run = RetrievalRun {
        queries: order
            .into_iter()
            .map(|target| {
                let candidates = queries.remove(&target).unwrap_or_default();
                RetrievalQuery { target, candidates }
            })
            .collect(),
    };
    let (aps, map) = mean_average_precision(&run)?;
    for (q, ap) in run.queries.iter().zip(&aps) {
        ctx.print(&format!("AP {} {:.6}", q.target, ap));
    }
    println!("mAP {map:.6}");
    Ok(())
}
