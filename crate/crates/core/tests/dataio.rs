use std::collections::BTreeSet;

use proptest::prelude::*;
use svkit::backend::{score_trials, Embedding, Scoring};
use svkit::dataio::{
    format_score, gen_retrieval, gen_synthetic, gen_trials, original_speaker, parse_scores, write_scores,
    EmbeddingArchive, Split, SynthCorpus, SynthCorpusSpec,
};
use svkit::metrics::{mean_average_precision, Candidate, RetrievalQuery, RetrievalRun};

fn corpus(spec: SynthCorpusSpec) -> SynthCorpus {
    gen_synthetic(&spec).unwrap()
}

fn small(seed: u64) -> SynthCorpusSpec {
    SynthCorpusSpec { n_speakers: 30, utterances_per_speaker: 8, dim: 16, n_eval_speakers: 12, seed, ..Default::default() }
}

fn embeddings(c: &SynthCorpus) -> Vec<Embedding> {
    c.utterances.iter().map(|u| Embedding::new(u.id.clone(), u.vec.clone()).with_genre(u.genre.clone())).collect()
}

#[test]
fn archive_concat_keeps_every_record() {
    let mut a = EmbeddingArchive::new(3);
    let mut b = EmbeddingArchive::new(3);
    for i in 0..5 {
        a.push(format!("a{i}"), vec![i as f32; 3]).unwrap();
    }
    for i in 0..7 {
        b.push(format!("b{i}"), vec![-(i as f32); 3]).unwrap();
    }
    a.concat(&b).unwrap();
    assert_eq!(a.len(), 12);
    let back = EmbeddingArchive::from_bytes(&a.to_bytes().unwrap()).unwrap();
    assert_eq!(back, a);
    assert!(a.concat(&EmbeddingArchive::new(4)).is_err());
}

#[test]
fn speed_triple_class_count() {
    let c = corpus(SynthCorpusSpec {
        n_speakers: 2745,
        utterances_per_speaker: 1,
        dim: 4,
        speed_triple: true,
        ..Default::default()
    });
    assert_eq!(c.train_classes.len(), 8235);
    let originals: BTreeSet<&str> = c.train_classes.iter().map(|s| original_speaker(s).unwrap_or(s)).collect();
    assert_eq!(originals.len(), 2745);
}

#[test]
fn generator_is_deterministic() {
    assert_eq!(corpus(small(5)), corpus(small(5)));
    assert_ne!(corpus(small(5)), corpus(small(6)));
    let c = corpus(small(5));
    assert_eq!(gen_trials(&c, 20, 20, false, 3).unwrap(), gen_trials(&c, 20, 20, false, 3).unwrap());
    assert_eq!(gen_retrieval(&c, 3, 4, 10, 3).unwrap(), gen_retrieval(&c, 3, 4, 10, 3).unwrap());
}

#[test]
fn noiseless_speaker_utterances_coincide() {
    let c = corpus(SynthCorpusSpec { genre_offset_scale: 0.0, within_speaker_noise: 0.0, ..small(1) });
    for (_, utts) in c.by_speaker(Split::Train).into_iter().chain(c.by_speaker(Split::Eval)) {
        for u in &utts[1..] {
            assert_eq!(u.vec, utts[0].vec);
        }
    }
}

#[test]
fn trial_counts_and_uniqueness() {
    let c = corpus(small(2));
    for concat in [false, true] {
        let set = gen_trials(&c, 30, 40, concat, 7).unwrap();
        let targets = set.trials.trials.iter().filter(|t| t.label == Some(true)).count();
        assert_eq!((targets, set.trials.trials.len()), (30, 70));
        let pairs: BTreeSet<(&str, &str)> = set.trials.trials.iter().map(|t| (t.enroll.as_str(), t.test.as_str())).collect();
        assert_eq!(pairs.len(), 70);
        let eval: BTreeSet<&str> = c.split(Split::Eval).map(|u| u.id.as_str()).collect();
        for e in &set.enrollments {
            assert!(e.segments.iter().all(|s| eval.contains(s.as_str())));
            assert!(concat || e.segments.len() == 1);
        }
    }
}

fn map_of(c: &SynthCorpus, targets: usize, nontargets: usize) -> f64 {
    let m = gen_retrieval(c, targets, 4, nontargets, 9).unwrap();
    let scores = score_trials(&m.trials, &embeddings(c), Scoring::Cosine).unwrap();
    let mut queries: Vec<RetrievalQuery> = Vec::new();
    for t in scores.trials {
        if queries.last().map(|q| &q.target) != Some(&t.enroll) {
            queries.push(RetrievalQuery { target: t.enroll.clone(), candidates: Vec::new() });
        }
        let q = queries.last_mut().unwrap();
        q.candidates.push(Candidate { id: t.test, score: t.score, relevant: t.label.unwrap() });
    }
    mean_average_precision(&RetrievalRun { queries }).unwrap().1
}

#[test]
fn retrieval_without_distractors_is_perfect() {
    assert_eq!(map_of(&corpus(small(3)), 1, 0), 1.0);
    let clean = corpus(SynthCorpusSpec { genre_offset_scale: 0.0, within_speaker_noise: 0.0, ..small(3) });
    assert_eq!(map_of(&clean, 4, 10), 1.0);
}

proptest! {
    #[test]
    fn score_text_keeps_nine_digits(scores in prop::collection::vec(-1e6f64..1e6, 1..20)) {
        let set = svkit::backend::ScoreSet::from_triples(
            scores.iter().enumerate().map(|(i, &s)| (format!("e{i}"), format!("t{i}"), s)).collect(),
        );
        let back = parse_scores(&write_scores(&set)).unwrap();
        for (a, b) in set.trials.iter().zip(&back.trials) {
            prop_assert_eq!((&a.enroll, &a.test), (&b.enroll, &b.test));
            prop_assert!((a.score - b.score).abs() <= 1e-8 * a.score.abs().max(1e-300) + 1e-300,
                "{} -> {}", a.score, format_score(a.score));
        }
    }
}
