//! Synthetic corpora shaped like a genre-labelled speaker corpus: unit-norm
//! speaker identities, shared per-genre offsets, per-utterance noise and
//! optional speed-perturbation class tripling.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backend::{TrialKey, TrialList};
use crate::error::{Error, Result};
use crate::feats::FeatureMatrix;

/// The eleven content genres, with spaces replaced so they fit whitespace-separated files.
pub const CNCELEB_GENRES: [&str; 11] = [
    "advertisement",
    "drama",
    "entertainment",
    "interview",
    "live_broadcast",
    "movie",
    "play",
    "recitation",
    "singing",
    "speech",
    "video_blog",
];

/// Class-id suffixes of the two speed-perturbed copies of every speaker.
pub const SPEED_SUFFIXES: [&str; 2] = ["#sp0.9", "#sp1.1"];

/// Strips a speed-copy suffix; `None` for original speakers.
pub fn original_speaker(class: &str) -> Option<&str> {
    SPEED_SUFFIXES.iter().find_map(|s| class.strip_suffix(s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpusSpec {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub dim: usize,
    pub genres: Vec<String>,
    pub genre_offset_scale: f64,
    pub within_speaker_noise: f64,
    pub speed_triple: bool,
    /// Norm of the identity perturbation applied to speed copies.
    pub speed_perturb_scale: f64,
    /// Held-out speakers (never speed-tripled) for trials and retrieval.
    pub n_eval_speakers: usize,
    /// Speakers with fewer utterances are dropped, like a minimum-duration filter.
    pub min_utterances: usize,
    pub seed: u64,
}

impl Default for SynthCorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers: 200,
            utterances_per_speaker: 10,
            dim: 81,
            genres: CNCELEB_GENRES[..8].iter().map(|s| s.to_string()).collect(),
            genre_offset_scale: 0.5,
            within_speaker_noise: 0.5,
            speed_triple: false,
            speed_perturb_scale: 0.5,
            n_eval_speakers: 0,
            min_utterances: 1,
            seed: 0,
        }
    }
}

impl SynthCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.utterances_per_speaker == 0 || self.dim == 0 || self.genres.is_empty() {
            return Err(Error::InvalidConfig("speaker, utterance, dim and genre counts must be at least 1".into()));
        }
        if !(self.genre_offset_scale >= 0.0) || !(self.within_speaker_noise >= 0.0) || !(self.speed_perturb_scale >= 0.0)
        {
            return Err(Error::InvalidConfig("noise and offset scales must be nonnegative".into()));
        }
        if self.genres.iter().any(|g| g.is_empty() || g.contains(char::is_whitespace)) {
            return Err(Error::InvalidConfig("genre names must be nonempty and contain no whitespace".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::Parse(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Class id; speed copies carry a [`SPEED_SUFFIXES`] suffix.
    pub speaker: String,
    pub genre: String,
    pub split: Split,
    pub vec: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub utterances: Vec<Utterance>,
    /// Training class ids in label order.
    pub train_classes: Vec<String>,
    pub eval_speakers: Vec<String>,
    pub genre_offsets: BTreeMap<String, Vec<f64>>,
}

impl SynthCorpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    /// Utterances grouped by class, classes and utterances in corpus order.
    pub fn by_speaker(&self, split: Split) -> Vec<(String, Vec<&Utterance>)> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
        for u in self.split(split) {
            let g = groups.entry(u.speaker.as_str()).or_default();
            if g.is_empty() {
                order.push(u.speaker.clone());
            }
            g.push(u);
        }
        order.into_iter().map(|s| {
            let utts = groups.remove(s.as_str()).unwrap_or_default();
            (s, utts)
        }).collect()
    }
}

fn gaussian(dim: usize, rng: &mut impl Rng) -> Array1<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_gaussian(dim: usize, rng: &mut impl Rng) -> Array1<f64> {
    loop {
        let v = gaussian(dim, rng);
        let n = v.dot(&v).sqrt();
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn normalized(v: Array1<f64>) -> Vec<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        (v / n).to_vec()
    } else {
        v.to_vec()
    }
}

pub fn gen_synthetic(spec: &SynthCorpusSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.dim;
    let genre_offsets: BTreeMap<String, Vec<f64>> =
        spec.genres.iter().map(|g| (g.clone(), unit_gaussian(dim, &mut rng).to_vec())).collect();
    let noise_scale = spec.within_speaker_noise / (dim as f64).sqrt();

    let mut utterances = Vec::new();
    let mut train_classes = Vec::new();
    let mut eval_speakers = Vec::new();
    let keep = spec.utterances_per_speaker >= spec.min_utterances;

    let emit = |class: &str, identity: &Array1<f64>, split: Split, rng: &mut ChaCha8Rng, out: &mut Vec<Utterance>| {
        for u in 0..spec.utterances_per_speaker {
            let genre = spec.genres.choose(rng).expect("nonempty genres").clone();
            let offset = Array1::from(genre_offsets[&genre].clone());
            let v = identity + &(offset * spec.genre_offset_scale) + &(gaussian(dim, rng) * noise_scale);
            out.push(Utterance {
                id: format!("{class}-u{u:03}"),
                speaker: class.to_string(),
                genre,
                split,
                vec: normalized(v),
            });
        }
    };

    for s in 0..spec.n_speakers {
        let name = format!("spk{s:05}");
        let identity = unit_gaussian(dim, &mut rng);
        let mut classes = vec![(name.clone(), identity.clone())];
        if spec.speed_triple {
            for suffix in SPEED_SUFFIXES {
                let perturbed = &identity + &(unit_gaussian(dim, &mut rng) * spec.speed_perturb_scale);
                classes.push((format!("{name}{suffix}"), Array1::from(normalized(perturbed))));
            }
        }
        for (class, id_vec) in classes {
            let mut utts = Vec::new();
            emit(&class, &id_vec, Split::Train, &mut rng, &mut utts);
            if keep {
                train_classes.push(class);
                utterances.extend(utts);
            }
        }
    }
    for s in 0..spec.n_eval_speakers {
        let name = format!("eval{s:05}");
        let identity = unit_gaussian(dim, &mut rng);
        let mut utts = Vec::new();
        emit(&name, &identity, Split::Eval, &mut rng, &mut utts);
        if keep {
            eval_speakers.push(name);
            utterances.extend(utts);
        }
    }
    Ok(SynthCorpus { utterances, train_classes, eval_speakers, genre_offsets })
}

/// Frame-level features for one utterance: every frame is the utterance
/// vector plus i.i.d. Gaussian frame noise. `stream` keeps utterances
/// independent of generation order.
pub fn synth_features(vec: &[f64], n_frames: usize, frame_noise: f64, seed: u64, stream: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let dim = vec.len();
    let scale = (dim as f64).sqrt();
    let frames = Array2::from_shape_fn((n_frames, dim), |(_, c)| {
        vec[c] * scale + frame_noise * rng.sample::<f64, _>(StandardNormal)
    });
    FeatureMatrix::new(frames)
}

/// An enrollment made of one or more utterances; its embedding is the mean of
/// the segment embeddings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Enrollment {
    pub id: String,
    pub segments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub enrollments: Vec<Enrollment>,
    pub trials: TrialList,
}

/// Splits each speaker's shuffled utterances into one enrollment and the
/// remaining test utterances.
fn enroll_split<'a>(
    groups: &[(String, Vec<&'a Utterance>)],
    concat_enroll: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<(Enrollment, Vec<&'a Utterance>)> {
    groups
        .iter()
        .filter(|(_, u)| u.len() >= 2)
        .map(|(spk, utts)| {
            let mut utts = utts.clone();
            utts.shuffle(rng);
            let n_seg = if concat_enroll { rng.random_range(2..=3).min(utts.len() - 1) } else { 1 };
            let segments: Vec<String> = utts[..n_seg].iter().map(|u| u.id.clone()).collect();
            let id = if n_seg == 1 { segments[0].clone() } else { format!("{spk}-enroll") };
            (Enrollment { id, segments }, utts[n_seg..].to_vec())
        })
        .collect()
}

/// Labelled trials over the held-out speakers, sampled without replacement.
pub fn gen_trials(
    corpus: &SynthCorpus,
    n_target: usize,
    n_nontarget: usize,
    concat_enroll: bool,
    seed: u64,
) -> Result<TrialSet> {
    let groups = corpus.by_speaker(Split::Eval);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = enroll_split(&groups, concat_enroll, &mut rng);
    if split.len() < 2 && n_nontarget > 0 {
        return Err(Error::CorpusTooSmall("need at least two eval speakers with two utterances".into()));
    }

    let targets: Vec<(usize, usize)> =
        split.iter().enumerate().flat_map(|(s, (_, tests))| (0..tests.len()).map(move |t| (s, t))).collect();
    // nontarget pair space: (enroll speaker, any test utterance of another speaker)
    let all_tests: Vec<(usize, usize)> = targets.clone();
    let per_enroll = |s: usize| all_tests.len() - split[s].1.len();
    let nontarget_space: usize = (0..split.len()).map(per_enroll).sum();
    if n_target > targets.len() || n_nontarget > nontarget_space {
        return Err(Error::CorpusTooSmall(format!(
            "requested {n_target} target / {n_nontarget} nontarget trials, corpus supports {} / {}",
            targets.len(),
            nontarget_space
        )));
    }

    let mut keys = Vec::with_capacity(n_target + n_nontarget);
    for i in index::sample(&mut rng, targets.len(), n_target).into_iter() {
        let (s, t) = targets[i];
        keys.push(TrialKey { enroll: split[s].0.id.clone(), test: split[s].1[t].id.clone(), label: Some(true) });
    }
    let offsets: Vec<usize> = (0..split.len())
        .scan(0, |acc, s| {
            let start = *acc;
            *acc += per_enroll(s);
            Some(start)
        })
        .collect();
    let mut picks: Vec<usize> = index::sample(&mut rng, nontarget_space, n_nontarget).into_vec();
    picks.sort_unstable();
    for i in picks {
        let s = offsets.partition_point(|&o| o <= i) - 1;
        let mut j = i - offsets[s];
        // skip over the enroll speaker's own tests in the flattened test list
        let own_start = all_tests.iter().position(|&(sp, _)| sp == s).unwrap_or(all_tests.len());
        if j >= own_start {
            j += split[s].1.len();
        }
        let (ts, tt) = all_tests[j];
        keys.push(TrialKey { enroll: split[s].0.id.clone(), test: split[ts].1[tt].id.clone(), label: Some(false) });
    }
    keys.shuffle(&mut rng);
    Ok(TrialSet { enrollments: split.into_iter().map(|(e, _)| e).collect(), trials: TrialList { trials: keys } })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalManifest {
    pub enrollments: Vec<Enrollment>,
    /// Every target paired with every pool candidate; label = same speaker.
    pub trials: TrialList,
}

/// Retrieval task: `n_targets` held-out speakers, each with one enrollment
/// utterance and `tests_per_target` relevant pool items, plus `n_nontarget`
/// pool items from other held-out speakers.
pub fn gen_retrieval(
    corpus: &SynthCorpus,
    n_targets: usize,
    tests_per_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<RetrievalManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = corpus.by_speaker(Split::Eval);
    let eligible: Vec<usize> = (0..groups.len()).filter(|&i| groups[i].1.len() > tests_per_target).collect();
    if eligible.len() < n_targets || n_targets == 0 || tests_per_target == 0 {
        return Err(Error::CorpusTooSmall(format!(
            "{} eval speakers have more than {tests_per_target} utterances, {n_targets} targets requested",
            eligible.len()
        )));
    }
    let mut chosen: Vec<usize> = eligible.choose_multiple(&mut rng, n_targets).copied().collect();
    chosen.sort_unstable();

    let mut enrollments = Vec::with_capacity(n_targets);
    let mut pool: Vec<&Utterance> = Vec::new();
    for &g in &chosen {
        let mut utts = groups[g].1.clone();
        utts.shuffle(&mut rng);
        enrollments.push((groups[g].0.as_str(), Enrollment { id: utts[0].id.clone(), segments: vec![utts[0].id.clone()] }));
        pool.extend(&utts[1..=tests_per_target]);
    }
    let others: Vec<&Utterance> = groups
        .iter()
        .enumerate()
        .filter(|(i, _)| chosen.binary_search(i).is_err())
        .flat_map(|(_, (_, u))| u.iter().copied())
        .collect();
    if others.len() < n_nontarget {
        return Err(Error::CorpusTooSmall(format!(
            "{} non-target utterances available, {n_nontarget} requested",
            others.len()
        )));
    }
    for i in index::sample(&mut rng, others.len(), n_nontarget).into_iter() {
        pool.push(others[i]);
    }
    pool.sort_by(|a, b| a.id.cmp(&b.id));

    let mut trials = Vec::with_capacity(n_targets * pool.len());
    for (spk, e) in &enrollments {
        for c in &pool {
            trials.push(TrialKey { enroll: e.id.clone(), test: c.id.clone(), label: Some(c.speaker == *spk) });
        }
    }
    Ok(RetrievalManifest {
        enrollments: enrollments.into_iter().map(|(_, e)| e).collect(),
        trials: TrialList { trials },
    })
}
