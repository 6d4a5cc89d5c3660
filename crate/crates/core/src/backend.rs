//! Trial scoring: cosine, genre-aware Sub-Mean, adaptive symmetric score
//! normalization against a cohort of speaker centers, and weighted fusion.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Standard-deviation threshold below which cohort statistics are unusable.
pub const MIN_COHORT_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub id: String,
    pub vec: Vec<f64>,
    pub genre: Option<String>,
    /// Genres of the segments of a concatenated enrollment.
    pub segment_genres: Vec<String>,
}

impl Embedding {
    pub fn new(id: impl Into<String>, vec: Vec<f64>) -> Self {
        Self { id: id.into(), vec, genre: None, segment_genres: Vec::new() }
    }

    pub fn with_genre(mut self, genre: impl Into<String>) -> Self {
        self.genre = Some(genre.into());
        self
    }

    pub fn with_segments(mut self, genres: Vec<String>) -> Self {
        self.segment_genres = genres;
        self
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch { expected: a.len(), found: b.len() });
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::DegenerateEmbedding("zero-norm vector in cosine".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Resolves the genre of an utterance; concatenated enrollments take the most
/// frequent segment genre, ties going to the lexicographically smallest name.
pub fn genre_of(e: &Embedding) -> Result<&str> {
    if !e.segment_genres.is_empty() {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for g in &e.segment_genres {
            *counts.entry(g.as_str()).or_default() += 1;
        }
        let mut best: Option<(&str, usize)> = None;
        for (g, n) in counts {
            if best.is_none_or(|(_, m)| n > m) {
                best = Some((g, n));
            }
        }
        return Ok(best.expect("nonempty").0);
    }
    e.genre.as_deref().ok_or_else(|| Error::GenreUnavailable(e.id.clone()))
}

/// Mean embedding per genre.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GenreMeans {
    pub means: BTreeMap<String, Vec<f64>>,
}

impl GenreMeans {
    pub fn get(&self, genre: &str) -> Result<&[f64]> {
        self.means.get(genre).map(Vec::as_slice).ok_or_else(|| Error::UnknownGenre(genre.to_string()))
    }

    /// Subtracts the mean of the embedding's own genre.
    pub fn centered(&self, e: &Embedding) -> Result<Vec<f64>> {
        let mean = self.get(genre_of(e)?)?;
        if mean.len() != e.vec.len() {
            return Err(Error::DimMismatch { expected: mean.len(), found: e.vec.len() });
        }
        Ok(e.vec.iter().zip(mean).map(|(x, m)| x - m).collect())
    }
}

pub fn compute_genre_means(embeddings: &[Embedding]) -> Result<GenreMeans> {
    if embeddings.is_empty() {
        return Err(Error::NoData("no embeddings for genre means".into()));
    }
    let dim = embeddings[0].vec.len();
    let mut acc: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for e in embeddings {
        if e.vec.len() != dim {
            return Err(Error::DimMismatch { expected: dim, found: e.vec.len() });
        }
        let g = genre_of(e)?;
        let (sum, n) = acc.entry(g.to_string()).or_insert_with(|| (vec![0.0; dim], 0));
        for (s, x) in sum.iter_mut().zip(&e.vec) {
            *s += x;
        }
        *n += 1;
    }
    let means = acc
        .into_iter()
        .map(|(g, (sum, n))| (g, sum.into_iter().map(|s| s / n as f64).collect()))
        .collect();
    Ok(GenreMeans { means })
}

/// Cosine after removing each side's genre mean.
pub fn sub_mean_score(e: &Embedding, t: &Embedding, means: &GenreMeans) -> Result<f64> {
    cosine(&means.centered(e)?, &means.centered(t)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub centers: Vec<Vec<f64>>,
    pub top_k: usize,
}

impl Cohort {
    pub fn new(centers: Vec<Vec<f64>>, top_k: usize) -> Result<Self> {
        if top_k == 0 || centers.len() < top_k {
            return Err(Error::CohortTooSmall { have: centers.len(), top_k });
        }
        Ok(Self { centers, top_k })
    }
}

/// One randomly chosen utterance per speaker becomes that speaker's center.
/// Speakers are visited in key order, so a fixed seed gives a fixed cohort.
pub fn build_cohort(by_speaker: &BTreeMap<String, Vec<Vec<f64>>>, top_k: usize, seed: u64) -> Result<Cohort> {
    if by_speaker.len() < top_k || top_k == 0 {
        return Err(Error::CohortTooSmall { have: by_speaker.len(), top_k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(by_speaker.len());
    for (spk, utts) in by_speaker {
        let pick = utts.choose(&mut rng).ok_or_else(|| Error::NoData(format!("speaker {spk} has no utterances")))?;
        centers.push(pick.clone());
    }
    Cohort::new(centers, top_k)
}

/// The `k` largest values, sorted descending.
pub fn top_k(mut scores: Vec<f64>, k: usize) -> Vec<f64> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scores.len() {
        scores.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
        scores.truncate(k);
    }
    scores.sort_by(|a, b| b.total_cmp(a));
    scores
}

/// Mean and population standard deviation of a score set.
pub fn mean_std(scores: &[f64]) -> (f64, f64) {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortStats {
    pub mean: f64,
    pub std: f64,
}

impl CohortStats {
    pub fn from_top_scores(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::DegenerateCohort("empty cohort score set".into()));
        }
        let (mean, std) = mean_std(scores);
        if !(std >= MIN_COHORT_STD) {
            return Err(Error::DegenerateCohort(format!("cohort std {std:e} below {MIN_COHORT_STD:e}")));
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, raw: f64) -> f64 {
        (raw - self.mean) / self.std
    }
}

/// Top-k cohort statistics for one (possibly genre-centered) vector.
pub fn cohort_stats(v: &[f64], cohort: &Cohort) -> Result<CohortStats> {
    let scores = cohort.centers.iter().map(|c| cosine(v, c)).collect::<Result<Vec<_>>>()?;
    CohortStats::from_top_scores(&top_k(scores, cohort.top_k))
}

/// Symmetric normalization given the two already-selected cohort score sets.
pub fn asnorm_from_sets(raw: f64, enroll_top: &[f64], test_top: &[f64]) -> Result<f64> {
    let se = CohortStats::from_top_scores(enroll_top)?;
    let st = CohortStats::from_top_scores(test_top)?;
    Ok(0.5 * (se.normalize(raw) + st.normalize(raw)))
}

pub fn asnorm(raw: f64, e: &Embedding, t: &Embedding, cohort: &Cohort) -> Result<f64> {
    let se = cohort_stats(&e.vec, cohort)?;
    let st = cohort_stats(&t.vec, cohort)?;
    Ok(0.5 * (se.normalize(raw) + st.normalize(raw)))
}

/// A trial key with an optional target/nontarget label.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TrialKey {
    pub enroll: String,
    pub test: String,
    pub label: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialList {
    pub trials: Vec<TrialKey>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub score: f64,
    pub label: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    pub trials: Vec<Trial>,
}

impl ScoreSet {
    pub fn from_triples(triples: Vec<(String, String, f64)>) -> Self {
        Self {
            trials: triples
                .into_iter()
                .map(|(enroll, test, score)| Trial { enroll, test, score, label: None })
                .collect(),
        }
    }

    pub fn scores(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.score).collect()
    }

    /// Copies labels from a trial list onto matching keys.
    pub fn attach_labels(&mut self, list: &TrialList) -> Result<()> {
        let map: HashMap<(&str, &str), Option<bool>> =
            list.trials.iter().map(|k| ((k.enroll.as_str(), k.test.as_str()), k.label)).collect();
        for t in &mut self.trials {
            let label = map.get(&(t.enroll.as_str(), t.test.as_str())).ok_or_else(|| {
                Error::UnalignedScoreSets(format!("trial {} {} missing from trial list", t.enroll, t.test))
            })?;
            t.label = *label;
        }
        Ok(())
    }
}

/// Scoring rule applied to every trial.
#[derive(Debug, Clone, Copy)]
pub enum Scoring<'a> {
    Cosine,
    SubMean(&'a GenreMeans),
}

fn lookup<'a>(index: &HashMap<&str, &'a Embedding>, id: &str) -> Result<&'a Embedding> {
    index.get(id).copied().ok_or_else(|| Error::NoData(format!("no embedding for {id}")))
}

fn index_embeddings(embeddings: &[Embedding]) -> HashMap<&str, &Embedding> {
    embeddings.iter().map(|e| (e.id.as_str(), e)).collect()
}

/// Scores every trial in input order; work is spread over the rayon pool.
pub fn score_trials(list: &TrialList, embeddings: &[Embedding], scoring: Scoring<'_>) -> Result<ScoreSet> {
    let index = index_embeddings(embeddings);
    let trials = list
        .trials
        .par_iter()
        .map(|k| {
            let e = lookup(&index, &k.enroll)?;
            let t = lookup(&index, &k.test)?;
            let score = match scoring {
                Scoring::Cosine => cosine(&e.vec, &t.vec)?,
                Scoring::SubMean(means) => sub_mean_score(e, t, means)?,
            };
            Ok(Trial { enroll: k.enroll.clone(), test: k.test.clone(), score, label: k.label })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSet { trials })
}

/// AS-Norm over a whole score set. With `sub_mean`, cohort cosines are
/// computed on genre-centered trial vectors; cohort centers are used as given.
pub fn asnorm_scores(
    scores: &ScoreSet,
    embeddings: &[Embedding],
    cohort: &Cohort,
    sub_mean: Option<&GenreMeans>,
) -> Result<ScoreSet> {
    let index = index_embeddings(embeddings);
    let mut ids: Vec<&str> = scores.trials.iter().flat_map(|t| [t.enroll.as_str(), t.test.as_str()]).collect();
    ids.sort_unstable();
    ids.dedup();
    let stats: HashMap<&str, CohortStats> = ids
        .par_iter()
        .map(|&id| {
            let e = lookup(&index, id)?;
            let v = match sub_mean {
                Some(means) => means.centered(e)?,
                None => e.vec.clone(),
            };
            Ok((id, cohort_stats(&v, cohort)?))
        })
        .collect::<Result<_>>()?;
    let trials = scores
        .trials
        .iter()
        .map(|t| {
            let se = stats[t.enroll.as_str()];
            let st = stats[t.test.as_str()];
            Trial { score: 0.5 * (se.normalize(t.score) + st.normalize(t.score)), ..t.clone() }
        })
        .collect();
    Ok(ScoreSet { trials })
}

/// Weighted average of aligned score sets; the first set fixes the trial order.
pub fn fuse(sets: &[ScoreSet], weights: &[f64]) -> Result<ScoreSet> {
    if sets.is_empty() {
        return Err(Error::NoData("no score sets to fuse".into()));
    }
    if sets.len() != weights.len() {
        return Err(Error::InvalidConfig(format!("{} score sets but {} weights", sets.len(), weights.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidConfig("fusion weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidConfig("fusion weights must not all be zero".into()));
    }
    let base = &sets[0];
    let mut seen = HashSet::with_capacity(base.trials.len());
    for t in &base.trials {
        if !seen.insert((t.enroll.as_str(), t.test.as_str())) {
            return Err(Error::UnalignedScoreSets(format!("duplicate trial {} {}", t.enroll, t.test)));
        }
    }
    let mut lookups = Vec::with_capacity(sets.len() - 1);
    for (i, set) in sets.iter().enumerate().skip(1) {
        if set.trials.len() != base.trials.len() {
            return Err(Error::UnalignedScoreSets(format!(
                "set {i} has {} trials, set 0 has {}",
                set.trials.len(),
                base.trials.len()
            )));
        }
        let map: HashMap<(&str, &str), f64> =
            set.trials.iter().map(|t| ((t.enroll.as_str(), t.test.as_str()), t.score)).collect();
        if map.len() != set.trials.len() {
            return Err(Error::UnalignedScoreSets(format!("set {i} has duplicate trials")));
        }
        lookups.push(map);
    }
    let mut trials = Vec::with_capacity(base.trials.len());
    for t in &base.trials {
        let key = (t.enroll.as_str(), t.test.as_str());
        let mut acc = weights[0] * t.score;
        for (map, w) in lookups.iter().zip(&weights[1..]) {
            let s = map.get(&key).ok_or_else(|| {
                Error::UnalignedScoreSets(format!("trial {} {} missing from a score set", t.enroll, t.test))
            })?;
            acc += w * s;
        }
        trials.push(Trial { score: acc / total, ..t.clone() });
    }
    Ok(ScoreSet { trials })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        assert!((cosine(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.70711).abs() < 1e-5);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::DegenerateEmbedding(_))));
    }

    #[test]
    fn genre_resolution() {
        let segs = |g: &[&str]| g.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let e = Embedding::new("e", vec![1.0]).with_segments(segs(&["speech", "speech", "singing"]));
        assert_eq!(genre_of(&e).unwrap(), "speech");
        let e = Embedding::new("e", vec![1.0]).with_genre("interview");
        assert_eq!(genre_of(&e).unwrap(), "interview");
        let e = Embedding::new("e", vec![1.0]).with_segments(segs(&["movie", "drama"]));
        assert_eq!(genre_of(&e).unwrap(), "drama");
        let e = Embedding::new("e", vec![1.0]);
        assert!(matches!(genre_of(&e), Err(Error::GenreUnavailable(_))));
    }

    #[test]
    fn sub_mean_edge_cases() {
        let e = Embedding::new("e", vec![1.0, 2.0]).with_genre("a");
        let t = Embedding::new("t", vec![-0.5, 2.0]).with_genre("b");
        let zero = GenreMeans {
            means: [("a".to_string(), vec![0.0, 0.0]), ("b".to_string(), vec![0.0, 0.0])].into(),
        };
        assert_eq!(sub_mean_score(&e, &t, &zero).unwrap(), cosine(&e.vec, &t.vec).unwrap());

        let means = GenreMeans {
            means: [("a".to_string(), vec![1.0, 2.0]), ("b".to_string(), vec![0.0, 0.0])].into(),
        };
        assert!(matches!(sub_mean_score(&e, &t, &means), Err(Error::DegenerateEmbedding(_))));
        let only_a = GenreMeans { means: [("a".to_string(), vec![0.0, 0.0])].into() };
        assert!(matches!(sub_mean_score(&e, &t, &only_a), Err(Error::UnknownGenre(_))));
    }

    #[test]
    fn genre_means_simple() {
        let v = vec![0.4, -0.1];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let es = vec![
            Embedding::new("1", v.clone()).with_genre("a"),
            Embedding::new("2", vec![3.0, 1.0]).with_genre("b"),
            Embedding::new("3", neg).with_genre("a"),
        ];
        let m = compute_genre_means(&es).unwrap();
        assert_eq!(m.get("a").unwrap(), &[0.0, 0.0]);
        assert_eq!(m.get("b").unwrap(), &[3.0, 1.0]);
        assert!(matches!(compute_genre_means(&[]), Err(Error::NoData(_))));
    }

    #[test]
    fn asnorm_hand_example() {
        let v = asnorm_from_sets(0.5, &[0.1, 0.3], &[0.2, 0.4]).unwrap();
        assert!((v - 2.5).abs() < 1e-12);
        assert!(matches!(asnorm_from_sets(0.5, &[0.2, 0.2], &[0.1, 0.3]), Err(Error::DegenerateCohort(_))));
    }

    #[test]
    fn asnorm_symmetric_halves() {
        let cohort = Cohort::new(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]], 3).unwrap();
        let e = Embedding::new("e", vec![2.0, 1.0]);
        let raw = 0.37;
        let stats = cohort_stats(&e.vec, &cohort).unwrap();
        let v = asnorm(raw, &e, &e, &cohort).unwrap();
        assert!((v - stats.normalize(raw)).abs() < 1e-15);
    }

    #[test]
    fn cohort_from_single_utterances() {
        let by: BTreeMap<String, Vec<Vec<f64>>> =
            (0..4).map(|i| (format!("s{i}"), vec![vec![i as f64, 1.0]])).collect();
        let c = build_cohort(&by, 2, 9).unwrap();
        assert_eq!(c.centers, (0..4).map(|i| vec![i as f64, 1.0]).collect::<Vec<_>>());
        assert!(matches!(build_cohort(&by, 5, 9), Err(Error::CohortTooSmall { .. })));
    }

    #[test]
    fn top_k_sorted_desc() {
        assert_eq!(top_k(vec![0.1, 0.9, 0.5, 0.7], 2), vec![0.9, 0.7]);
        assert_eq!(top_k(vec![0.1, 0.9], 5), vec![0.9, 0.1]);
    }

    #[test]
    fn fuse_small_cases() {
        let a = ScoreSet::from_triples(vec![("e".into(), "t".into(), 0.2), ("e".into(), "u".into(), -1.0)]);
        let b = ScoreSet::from_triples(vec![("e".into(), "u".into(), 1.0), ("e".into(), "t".into(), 0.6)]);
        let one = fuse(std::slice::from_ref(&a), &[1.0]).unwrap();
        assert_eq!(one, a);
        let f = fuse(&[a.clone(), b], &[1.0, 1.0]).unwrap();
        assert!((f.trials[0].score - 0.4).abs() < 1e-15);
        assert_eq!(f.trials[1].score, 0.0);
        let c = ScoreSet::from_triples(vec![("e".into(), "t".into(), 0.2), ("x".into(), "u".into(), 0.0)]);
        assert!(matches!(fuse(&[a, c], &[1.0, 1.0]), Err(Error::UnalignedScoreSets(_))));
    }
}
