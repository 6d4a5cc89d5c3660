//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use svkit::backend::{
    asnorm, asnorm_from_sets, asnorm_scores, build_cohort, compute_genre_means, cosine, score_trials, top_k, Cohort,
    Embedding, ScoreSet, Scoring,
};
use svkit::dataio::{
    checkpoint_to_bytes, gen_retrieval, gen_synthetic, gen_trials, load_checkpoint, save_checkpoint, synth_features,
    EmbeddingArchive, FeatureArchive, Split, SynthCorpus, SynthCorpusSpec,
};
use svkit::losses::{consolidate_dominated, consolidate_sum, loss_and_grad, MarginKind, MarginLossConfig, SubCenterBank};
use svkit::metrics::{
    det_curve_from, eer, eer_and_min_dcf, mean_average_precision, min_dcf, Candidate, DcfParams,
    RetrievalQuery, RetrievalRun,
};
use svkit::pooling::{MqmhaParams, Pooling};
use svkit::trainer::{train_lmft, train_stage1, Checkpoint, Consolidation, NetConfig, PoolingKind, TrainConfig, TrainCorpus};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(start: Instant, limit: Duration) -> Outcome {
    let took = start.elapsed();
    ensure!(took < limit, "took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs());
    Ok(String::new())
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-1.0..1.0)
}

// ------------------------------------------------------------- 1: metric oracle

struct Swept {
    thresholds: Vec<f64>,
    p_miss: Vec<f64>,
    p_fa: Vec<f64>,
}

/// Counts misses and false alarms from scratch at every candidate threshold.
fn sweep(scores: &[f64], labels: &[bool]) -> Swept {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let n_t = labels.iter().filter(|&&l| l).count() as f64;
    let n_n = labels.len() as f64 - n_t;
    let mut out = Swept { thresholds: Vec::new(), p_miss: Vec::new(), p_fa: Vec::new() };
    for &th in &thresholds {
        let miss = scores.iter().zip(labels).filter(|(s, &l)| l && **s < th).count() as f64;
        let fa = scores.iter().zip(labels).filter(|(s, &l)| !l && **s >= th).count() as f64;
        out.thresholds.push(th);
        out.p_miss.push(miss / n_t);
        out.p_fa.push(fa / n_n);
    }
    out
}

fn oracle_eer(s: &Swept) -> f64 {
    let diff: Vec<f64> = s.p_fa.iter().zip(&s.p_miss).map(|(f, m)| f - m).collect();
    if diff[0] <= 0.0 {
        return s.p_miss[0].max(s.p_fa[0]);
    }
    for i in 1..diff.len() {
        if diff[i] <= 0.0 {
            let t = diff[i - 1] / (diff[i - 1] - diff[i]);
            return s.p_miss[i - 1] + t * (s.p_miss[i] - s.p_miss[i - 1]);
        }
    }
    0.0
}

fn oracle_min_dcf(s: &Swept, p: f64) -> f64 {
    let norm = p.min(1.0 - p);
    s.p_miss.iter().zip(&s.p_fa).map(|(m, f)| (p * m + (1.0 - p) * f) / norm).fold(f64::INFINITY, f64::min)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for set in 0..100 {
        let n = rng.random_range(2..=200);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        // every third set is quantized so ties are exercised
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| {
                let s = uniform(&mut rng) + if l { 0.4 } else { 0.0 };
                if set % 3 == 0 { (s * 10.0).round() / 10.0 } else { s }
            })
            .collect();
        let curve = det_curve_from(&scores, &labels).map_err(|e| e.to_string())?;
        let swept = sweep(&scores, &labels);
        ensure!(curve.points.len() == swept.thresholds.len(), "set {set}: {} points vs {}", curve.points.len(), swept.thresholds.len());
        for (i, p) in curve.points.iter().enumerate() {
            ensure!(
                p.threshold.to_bits() == swept.thresholds[i].to_bits()
                    && p.p_miss.to_bits() == swept.p_miss[i].to_bits()
                    && p.p_fa.to_bits() == swept.p_fa[i].to_bits(),
                "set {set}: operating point {i} differs"
            );
        }
        let e = (eer(&curve) - oracle_eer(&swept)).abs();
        let d = (min_dcf(&curve, &DcfParams::default()).map_err(|e| e.to_string())? - oracle_min_dcf(&swept, 0.01)).abs();
        ensure!(e <= 1e-12 && d <= 1e-12, "set {set}: eer diff {e:e}, minDCF diff {d:e}");
        worst = worst.max(e).max(d);
    }
    within(start, Duration::from_secs(10))?;
    Ok(format!("100 sets, sweep bitwise, max interpolated diff {worst:.1e}"))
}

// ------------------------------------------------------------- 2: gradient checks

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

fn central_diff(x: &mut [f64], f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(x);
            x[i] = orig - h;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn loss_instance(rng: &mut ChaCha8Rng, kind: MarginKind, k: usize) -> Result<f64, String> {
    let (b, d, j) = (4, 6, 5);
    let cfg = MarginLossConfig { kind, scale: 10.0, margin: 0.2 };
    let emb = Array2::from_shape_fn((b, d), |_| uniform(rng));
    let bank = Array3::from_shape_fn((j, k, d), |_| uniform(rng));
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..j)).collect();
    let lg = loss_and_grad(emb.view(), &labels, &SubCenterBank::new(bank.clone()).unwrap(), &cfg).map_err(|e| e.to_string())?;

    let mut e = emb.clone().into_raw_vec_and_offset().0;
    let num_e = central_diff(&mut e, &mut |v| {
        let x = Array2::from_shape_vec((b, d), v.to_vec()).unwrap();
        loss_and_grad(x.view(), &labels, &SubCenterBank::new(bank.clone()).unwrap(), &cfg).unwrap().loss
    });
    let mut w = bank.clone().into_raw_vec_and_offset().0;
    let num_w = central_diff(&mut w, &mut |v| {
        let wb = SubCenterBank::new(Array3::from_shape_vec((j, k, d), v.to_vec()).unwrap()).unwrap();
        loss_and_grad(emb.view(), &labels, &wb, &cfg).unwrap().loss
    });
    let ae: Vec<f64> = lg.embeddings.iter().copied().collect();
    let aw: Vec<f64> = lg.bank.iter().copied().collect();
    Ok(rel_err(&ae, &num_e).max(rel_err(&aw, &num_w)))
}

fn pooling_instance(rng: &mut ChaCha8Rng, attentive: bool) -> Result<f64, String> {
    let (t, c) = (7, 8);
    let frames = Array2::from_shape_fn((t, c), |_| uniform(rng));
    let pooling = if attentive {
        let mut p = MqmhaParams::zeros(c, 2, 2).map_err(|e| e.to_string())?;
        p.query_weights.mapv_inplace(|_| uniform(rng));
        Pooling::Mqmha(p)
    } else {
        Pooling::Gsp
    };
    let upstream = Array1::from_shape_fn(pooling.output_dim(c), |_| uniform(rng));
    let grad = pooling.backward(frames.view(), upstream.view()).map_err(|e| e.to_string())?;

    let objective = |p: &Pooling, x: &Array2<f64>| p.forward(x.view()).unwrap().dot(&upstream);
    let mut x = frames.clone().into_raw_vec_and_offset().0;
    let num_x = central_diff(&mut x, &mut |v| objective(&pooling, &Array2::from_shape_vec((t, c), v.to_vec()).unwrap()));
    let mut err = rel_err(&grad.frames.iter().copied().collect::<Vec<_>>(), &num_x);
    if let Pooling::Mqmha(p) = &pooling {
        let shape = p.query_weights.dim();
        let mut q = p.query_weights.clone().into_raw_vec_and_offset().0;
        let num_q = central_diff(&mut q, &mut |v| {
            let mut pp = p.clone();
            pp.query_weights = Array2::from_shape_vec(shape, v.to_vec()).unwrap();
            objective(&Pooling::Mqmha(pp), &frames)
        });
        let aq: Vec<f64> = grad.query_weights.as_ref().ok_or("missing attention gradient")?.iter().copied().collect();
        err = err.max(rel_err(&aq, &num_q));
    }
    Ok(err)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for (kind, k) in [(MarginKind::Am, 1), (MarginKind::Am, 3), (MarginKind::Aam, 1), (MarginKind::Aam, 3)] {
        for i in 0..20 {
            let err = loss_instance(&mut rng, kind, k)?;
            ensure!(err <= 1e-4, "{kind:?} K={k} instance {i}: relative error {err:e}");
            worst = worst.max(err);
        }
    }
    for attentive in [false, true] {
        for i in 0..20 {
            let err = pooling_instance(&mut rng, attentive)?;
            ensure!(err <= 1e-4, "pooling (attentive={attentive}) instance {i}: relative error {err:e}");
            worst = worst.max(err);
        }
    }
    within(start, Duration::from_secs(30))?;
    Ok(format!("120 instances, max relative error {worst:.1e}"))
}

// ------------------------------------------------------------- 3: sub-center reductions

fn plain_margin_loss(emb: &Array2<f64>, labels: &[usize], w: &Array2<f64>, cfg: &MarginLossConfig) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let x = emb.row(i);
        let logits: Vec<f64> = (0..w.nrows())
            .map(|j| {
                let wj = w.row(j);
                let c = x.dot(&wj) / (x.dot(&x).sqrt() * wj.dot(&wj).sqrt());
                let term = if j != y {
                    c
                } else {
                    match cfg.kind {
                        MarginKind::Am => c - cfg.margin,
                        MarginKind::Aam => {
                            let theta = c.clamp(-1.0, 1.0).acos();
                            if theta + cfg.margin <= std::f64::consts::PI {
                                (theta + cfg.margin).cos()
                            } else {
                                c - cfg.margin * cfg.margin.sin()
                            }
                        }
                    }
                };
                cfg.scale * term
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[y];
    }
    total / labels.len() as f64
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (b, d, j) = (6, 8, 5);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let kind = if i % 2 == 0 { MarginKind::Am } else { MarginKind::Aam };
        let cfg = MarginLossConfig { kind, scale: 32.0, margin: 0.2 };
        let emb = Array2::from_shape_fn((b, d), |_| uniform(&mut rng));
        let w = Array2::from_shape_fn((j, d), |_| uniform(&mut rng));
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..j)).collect();
        let k1 = SubCenterBank::new(w.clone().into_shape_with_order((j, 1, d)).unwrap()).unwrap();
        let single = loss_and_grad(emb.view(), &labels, &k1, &cfg).map_err(|e| e.to_string())?;
        let diff = (single.loss - plain_margin_loss(&emb, &labels, &w, &cfg)).abs() / single.loss.abs().max(1.0);
        ensure!(diff <= 1e-12, "instance {i}: K=1 loss differs from plain {kind:?} by {diff:e}");
        worst = worst.max(diff);

        let dup = SubCenterBank::new(Array3::from_shape_fn((j, 3, d), |(c, _, x)| w[[c, x]])).unwrap();
        let triple = loss_and_grad(emb.view(), &labels, &dup, &cfg).map_err(|e| e.to_string())?;
        ensure!(triple.loss.to_bits() == single.loss.to_bits(), "instance {i}: duplicated sub-centers change the loss");
        ensure!(triple.embeddings == single.embeddings, "instance {i}: duplicated sub-centers change embedding gradients");
        let summed = triple.bank.sum_axis(ndarray::Axis(1));
        ensure!(
            summed == single.bank.index_axis(ndarray::Axis(1), 0),
            "instance {i}: duplicated sub-centers change class gradients"
        );
    }

    let mut norms = Array3::zeros((1, 3, 2));
    for (s, n) in [0.9, 1.2, 1.0].iter().enumerate() {
        norms[[0, s, 0]] = *n;
    }
    let dom = consolidate_dominated(&SubCenterBank::new(norms).unwrap());
    ensure!(dom.weights[[0, 0, 0]] == 1.2, "norms {{0.9, 1.2, 1.0}} should keep sub-center 1");

    for _ in 0..20 {
        let bank = SubCenterBank::new(Array3::from_shape_fn((4, 3, 6), |_| uniform(&mut rng))).unwrap();
        let dom = consolidate_dominated(&bank);
        let (sum, degenerate) = consolidate_sum(&bank);
        ensure!(degenerate.is_empty(), "random bank flagged degenerate");
        for c in 0..4 {
            let mut best = 0;
            let mut best_norm = -1.0;
            for s in 0..3 {
                let n: f64 = (0..6).map(|x| bank.weights[[c, s, x]].powi(2)).sum::<f64>().sqrt();
                if n > best_norm {
                    best_norm = n;
                    best = s;
                }
            }
            for x in 0..6 {
                ensure!(dom.weights[[c, 0, x]] == bank.weights[[c, best, x]], "dominated consolidation picked the wrong center");
                let total = bank.weights[[c, 0, x]] + bank.weights[[c, 1, x]] + bank.weights[[c, 2, x]];
                ensure!(sum.weights[[c, 0, x]] == total, "summed consolidation differs from direct sum");
            }
        }
    }
    let v = Array1::from_shape_fn(6, |_| uniform(&mut rng));
    let opposite = Array3::from_shape_fn((1, 2, 6), |(_, s, x)| if s == 0 { v[x] } else { -v[x] });
    let (zero, degenerate) = consolidate_sum(&SubCenterBank::new(opposite).unwrap());
    ensure!(zero.weights.iter().all(|&x| x == 0.0) && degenerate == vec![0], "opposite sub-centers should cancel and be flagged");
    Ok(format!("K=1 matches plain losses within {worst:.1e}; duplicates exact; consolidations match oracles"))
}

// ------------------------------------------------------------- 4: end-to-end training

fn embed_eval(corpus: &SynthCorpus, ckpt: &Checkpoint, frames: usize, noise: f64, seed: u64) -> Vec<Embedding> {
    corpus
        .utterances
        .iter()
        .enumerate()
        .filter(|(_, u)| u.split == Split::Eval)
        .map(|(i, u)| Embedding::new(u.id.clone(), ckpt.embed(&synth_features(&u.vec, frames, noise, seed, i as u64)).unwrap()))
        .collect()
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let seed = 7;
    let (frames, noise) = (200, 1.0);
    let spec = SynthCorpusSpec { n_speakers: 200, n_eval_speakers: 40, speed_triple: true, seed, ..Default::default() };
    ensure!(spec.genres.len() == 8 && spec.genre_offset_scale > 0.0, "corpus spec must have 8 genres with offsets");
    let corpus = gen_synthetic(&spec).map_err(|e| e.to_string())?;
    let train = TrainCorpus::from_synth(&corpus, frames, noise, seed);
    let cfg = TrainConfig::desk();
    let (stage1, trace) = train_stage1(&train, &cfg).map_err(|e| e.to_string())?;
    let (lmft, _) = train_lmft(&stage1, &train, &cfg, Consolidation::Dominated).map_err(|e| e.to_string())?;
    let first = trace.losses[0];
    let last = *trace.losses.last().unwrap();
    ensure!(last < 0.5 * first, "stage-1 loss {first:.3} -> {last:.3} is not below half");

    let trials = gen_trials(&corpus, 300, 3000, false, seed).map_err(|e| e.to_string())?.trials;
    let mut metrics = Vec::new();
    for ckpt in [&stage1, &lmft] {
        let emb = embed_eval(&corpus, ckpt, frames, noise, seed);
        let scores = score_trials(&trials, &emb, Scoring::Cosine).map_err(|e| e.to_string())?;
        metrics.push(eer_and_min_dcf(&scores).map_err(|e| e.to_string())?);
    }
    let (s1, ft) = (metrics[0], metrics[1]);
    ensure!(ft.0 < 0.05, "system EER {:.4} not below 5%", ft.0);
    ensure!(ft.1 <= s1.1, "fine-tuned minDCF {:.4} above stage-1 {:.4}", ft.1, s1.1);
    within(start, Duration::from_secs(600))?;
    Ok(format!(
        "loss {first:.2} -> {last:.2}; EER {:.2}%; minDCF stage1 {:.4} -> fine-tuned {:.4}; {:.0}s",
        100.0 * ft.0,
        s1.1,
        ft.1,
        start.elapsed().as_secs_f64()
    ))
}

// ------------------------------------------------------------- 5: Sub-Mean direction

struct BackendResult {
    cosine: (f64, f64),
    sub_mean: (f64, f64),
    asnorm: (f64, f64),
    combined: (f64, f64),
}

fn backend_run(genre_offset: f64, seed: u64) -> Result<BackendResult, String> {
    let spec = SynthCorpusSpec {
        n_speakers: 200,
        n_eval_speakers: 60,
        genre_offset_scale: genre_offset,
        within_speaker_noise: 1.0,
        seed,
        ..Default::default()
    };
    let c = gen_synthetic(&spec).map_err(|e| e.to_string())?;
    let trials = gen_trials(&c, 500, 5000, false, seed).map_err(|e| e.to_string())?.trials;
    let cross_genre = trials.trials.iter().any(|k| {
        let g = |id: &str| c.utterances.iter().find(|u| u.id == id).map(|u| u.genre.clone());
        g(&k.enroll) != g(&k.test)
    });
    ensure!(cross_genre, "trial list has no cross-genre trials");
    let as_emb = |split: Option<Split>| -> Vec<Embedding> {
        c.utterances
            .iter()
            .filter(|u| split.is_none_or(|s| u.split == s))
            .map(|u| Embedding::new(u.id.clone(), u.vec.clone()).with_genre(u.genre.clone()))
            .collect()
    };
    let all = as_emb(None);
    let means = compute_genre_means(&as_emb(Some(Split::Train))).map_err(|e| e.to_string())?;
    let mut by_speaker: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for u in c.split(Split::Train) {
        by_speaker.entry(u.speaker.clone()).or_default().push(u.vec.clone());
    }
    let cohort = build_cohort(&by_speaker, 100, seed).map_err(|e| e.to_string())?;
    let metric = |s: &ScoreSet| eer_and_min_dcf(s).map_err(|e| e.to_string());
    let cos = score_trials(&trials, &all, Scoring::Cosine).map_err(|e| e.to_string())?;
    let sm = score_trials(&trials, &all, Scoring::SubMean(&means)).map_err(|e| e.to_string())?;
    let asn = asnorm_scores(&cos, &all, &cohort, None).map_err(|e| e.to_string())?;
    let both = asnorm_scores(&sm, &all, &cohort, Some(&means)).map_err(|e| e.to_string())?;
    Ok(BackendResult { cosine: metric(&cos)?, sub_mean: metric(&sm)?, asnorm: metric(&asn)?, combined: metric(&both)? })
}

fn criterion_5() -> Outcome {
    let with = backend_run(0.5, 11)?;
    ensure!(
        with.sub_mean.1 <= with.cosine.1,
        "Sub-Mean minDCF {:.4} above cosine {:.4}",
        with.sub_mean.1,
        with.cosine.1
    );
    let vs_cosine = 1.0 - with.combined.1 / with.cosine.1;
    let vs_asnorm = 1.0 - with.combined.1 / with.asnorm.1;
    ensure!(vs_cosine > 0.0, "Sub-Mean + AS-Norm does not reduce minDCF relative to cosine");
    ensure!(vs_asnorm > 0.0, "Sub-Mean + AS-Norm does not reduce minDCF relative to AS-Norm alone");
    let without = backend_run(0.0, 12)?;
    let delta = (without.sub_mean.0 - without.cosine.0).abs();
    ensure!(delta < 0.005, "offset-free corpus: Sub-Mean moved EER by {:.2} points", 100.0 * delta);
    Ok(format!(
        "minDCF cosine {:.4}, Sub-Mean {:.4}, AS-Norm {:.4}, both {:.4} ({:.1}% below AS-Norm); offset-free EER change {:.2} points",
        with.cosine.1,
        with.sub_mean.1,
        with.asnorm.1,
        with.combined.1,
        100.0 * vs_asnorm,
        100.0 * delta
    ))
}

// ------------------------------------------------------------- 6: AS-Norm

fn criterion_6() -> Outcome {
    let hand = asnorm_from_sets(0.5, &[0.1, 0.3], &[0.2, 0.4]).map_err(|e| e.to_string())?;
    ensure!((hand - 2.5).abs() <= 1e-12, "hand example gives {hand}");

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let unit = |rng: &mut ChaCha8Rng| (0..16).map(|_| uniform(rng)).collect::<Vec<f64>>();
    let cohort = Cohort::new((0..50).map(|_| unit(&mut rng)).collect(), 10).map_err(|e| e.to_string())?;
    let (e, t) = (Embedding::new("e", unit(&mut rng)), Embedding::new("t", unit(&mut rng)));
    let mut prev = f64::NEG_INFINITY;
    for step in 0..=200 {
        let raw = -1.0 + step as f64 * 0.01;
        let v = asnorm(raw, &e, &t, &cohort).map_err(|e| e.to_string())?;
        ensure!(v > prev, "not increasing at raw {raw}");
        prev = v;
    }

    for n in [1usize, 2, 17, 300, 1000, 5000] {
        let scores: Vec<f64> = (0..n).map(|_| (uniform(&mut rng) * 100.0).round() / 100.0).collect();
        for k in [1, n.min(300), n] {
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            sorted.truncate(k);
            ensure!(top_k(scores.clone(), k) == sorted, "top-{k} of {n} differs from sort");
        }
    }
    Ok("hand example 2.5, monotone on a 201-point grid, top-k matches sort up to 5000".into())
}

// ------------------------------------------------------------- 7: mAP

/// Rank of a candidate = 1 + number of candidates ordered before it.
fn oracle_ap(q: &RetrievalQuery) -> f64 {
    let before = |a: &Candidate, b: &Candidate| a.score > b.score || (a.score == b.score && a.id < b.id);
    let relevant: Vec<&Candidate> = q.candidates.iter().filter(|c| c.relevant).collect();
    let precisions: Vec<f64> = relevant
        .iter()
        .map(|r| {
            let rank = 1 + q.candidates.iter().filter(|c| before(c, r)).count();
            let hits = 1 + relevant.iter().filter(|c| before(c, r)).count();
            hits as f64 / rank as f64
        })
        .collect();
    precisions.iter().sum::<f64>() / precisions.len() as f64
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for run_idx in 0..50 {
        let queries: Vec<RetrievalQuery> = (0..rng.random_range(1..=30))
            .map(|q| {
                let n = rng.random_range(1..=1000);
                let mut candidates: Vec<Candidate> = (0..n)
                    .map(|c| Candidate {
                        id: format!("c{c:04}"),
                        score: (uniform(&mut rng) * 20.0).round() / 20.0,
                        relevant: rng.random_bool(0.05),
                    })
                    .collect();
                candidates[rng.random_range(0..n)].relevant = true;
                RetrievalQuery { target: format!("t{q}"), candidates }
            })
            .collect();
        let run = RetrievalRun { queries };
        let (aps, map) = mean_average_precision(&run).map_err(|e| e.to_string())?;
        let oracle: Vec<f64> = run.queries.iter().map(oracle_ap).collect();
        for (a, o) in aps.iter().zip(&oracle) {
            ensure!((a - o).abs() <= 1e-12, "run {run_idx}: AP {a} vs oracle {o}");
        }
        let oracle_map = oracle.iter().sum::<f64>() / oracle.len() as f64;
        ensure!((map - oracle_map).abs() <= 1e-12, "run {run_idx}: mAP {map} vs oracle {oracle_map}");
    }

    let spec = SynthCorpusSpec { n_speakers: 10, utterances_per_speaker: 12, n_eval_speakers: 60, seed: 7, ..Default::default() };
    let corpus = gen_synthetic(&spec).map_err(|e| e.to_string())?;
    let manifest = gen_retrieval(&corpus, 25, 10, 200, 7).map_err(|e| e.to_string())?;
    let vecs: BTreeMap<&str, &Vec<f64>> = corpus.utterances.iter().map(|u| (u.id.as_str(), &u.vec)).collect();
    let mut by_target: BTreeMap<String, Vec<Candidate>> = BTreeMap::new();
    for k in &manifest.trials.trials {
        let score = cosine(vecs[k.enroll.as_str()], vecs[k.test.as_str()]).map_err(|e| e.to_string())?;
        by_target.entry(k.enroll.clone()).or_default().push(Candidate {
            id: k.test.clone(),
            score,
            relevant: k.label == Some(true),
        });
    }
    let run = RetrievalRun {
        queries: by_target.into_iter().map(|(target, candidates)| RetrievalQuery { target, candidates }).collect(),
    };
    ensure!(run.queries.len() == 25, "{} targets in the manifest", run.queries.len());
    for q in &run.queries {
        let relevant = q.candidates.iter().filter(|c| c.relevant).count();
        ensure!(relevant == 10 && q.candidates.len() == 450, "target {} has {relevant} relevant of {}", q.target, q.candidates.len());
    }
    let (_, map) = mean_average_precision(&run).map_err(|e| e.to_string())?;
    ensure!((0.0..=1.0).contains(&map), "mAP {map} out of range");
    Ok(format!("50 random runs match the per-rank oracle; 25 x 10 manifest mAP {map:.4}"))
}

// ------------------------------------------------------------- 8: CLI determinism

fn svkit(dir: &Path, threads: usize, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_svkit"))
        .current_dir(dir)
        .args(["--seed", "5", "--quiet", "--threads", &threads.to_string()])
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "svkit {:?} failed: {}", args, String::from_utf8_lossy(&out.stderr));
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

const TINY_TRAIN: &str = "\
stage1.steps = 30
stage1.batch = 16
stage1.frames = 30
stage1.validate_every = 10
lmft.steps = 10
lmft.batch = 16
lmft.frames = 50
lmft.validate_every = 5
validation_size = 16
";

/// Runs the whole pipeline in a fresh directory; returns the artifacts that must be reproducible.
fn pipeline(threads: usize) -> Result<Vec<(String, Vec<u8>)>, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    std::fs::write(dir.join("train.conf"), TINY_TRAIN).map_err(|e| e.to_string())?;
    let run = |args: &[&str]| svkit(dir, threads, args);
    run(&["gen-synth", "--out-dir", "c", "--speakers", "30", "--eval-speakers", "12", "--utts-per-speaker", "8", "--frames", "60", "--speed-triple"])?;
    run(&["gen-trials", "--corpus", "c", "--targets", "40", "--nontargets", "200", "--concat", "--out", "trials", "--enroll-out", "enroll"])?;
    run(&["train", "--feats", "c/feats.svfm", "--utt2spk", "c/utt2spk", "--utt2split", "c/utt2split", "--config", "train.conf", "--out", "model.ckpt"])?;
    run(&["extract", "--model", "model.ckpt", "--feats", "c/feats.svfm", "--enroll", "enroll", "--out", "emb.sveb"])?;
    run(&["score", "--emb", "emb.sveb", "--trials", "trials", "--out", "raw.score"])?;

    let split = std::fs::read_to_string(dir.join("c/utt2split")).map_err(|e| e.to_string())?;
    let spk = std::fs::read_to_string(dir.join("c/utt2spk")).map_err(|e| e.to_string())?;
    let train_utts: std::collections::HashSet<&str> =
        split.lines().filter(|l| l.ends_with(" train")).filter_map(|l| l.split_whitespace().next()).collect();
    let cohort: String = spk
        .lines()
        .filter(|l| l.split_whitespace().next().is_some_and(|u| train_utts.contains(u)))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(dir.join("cohort.utt2spk"), cohort).map_err(|e| e.to_string())?;
    run(&["asnorm", "--scores", "raw.score", "--emb", "emb.sveb", "--cohort-emb", "emb.sveb", "--cohort-utt2spk", "cohort.utt2spk", "--top-k", "20", "--out", "as.score"])?;
    let raw_metrics = run(&["eval-sv", "--trials", "trials", "--scores", "raw.score"])?;
    let as_metrics = run(&["eval-sv", "--trials", "trials", "--scores", "as.score"])?;
    let read = |name: &str| std::fs::read(dir.join(name)).map_err(|e| e.to_string());
    Ok(vec![
        ("model.ckpt".into(), read("model.ckpt")?),
        ("raw.score".into(), read("raw.score")?),
        ("as.score".into(), read("as.score")?),
        ("eval raw".into(), raw_metrics.into_bytes()),
        ("eval asnorm".into(), as_metrics.into_bytes()),
    ])
}

fn criterion_8() -> Outcome {
    let reference = pipeline(1)?;
    let metric_line = String::from_utf8_lossy(&reference[4].1).trim().to_string();
    ensure!(metric_line.starts_with("EER "), "unexpected metric line {metric_line:?}");
    for threads in [1, 4, 4] {
        let again = pipeline(threads)?;
        for ((name, a), (_, b)) in reference.iter().zip(&again) {
            ensure!(a == b, "{name} differs on a rerun with --threads {threads}");
        }
    }
    Ok(format!("identical artifacts over 4 runs (threads 1, 1, 4, 4); {metric_line}"))
}

// ------------------------------------------------------------- 9: format round trips

fn tiny_checkpoint() -> Result<Checkpoint, String> {
    let spec = SynthCorpusSpec { n_speakers: 6, utterances_per_speaker: 4, dim: 10, seed: 3, ..Default::default() };
    let corpus = TrainCorpus::from_synth(&gen_synthetic(&spec).map_err(|e| e.to_string())?, 20, 0.5, 3);
    let mut cfg = TrainConfig::desk();
    cfg.net = NetConfig { input_dim: 10, hidden: 12, channels: 8, embed_dim: 6, pooling: PoolingKind::Mqmha { heads: 2, queries: 2 } };
    cfg.stage1.steps = 5;
    cfg.stage1.batch = 4;
    cfg.stage1.frames = 10;
    cfg.validation_size = 4;
    Ok(train_stage1(&corpus, &cfg).map_err(|e| e.to_string())?.0)
}

fn expect_class<T: std::fmt::Debug>(r: svkit::Result<T>, class: &str, what: &str) -> Result<(), String> {
    match r {
        Err(e) if e.class() == class => Ok(()),
        Err(e) => Err(format!("{what}: expected {class}, got {}", e.class())),
        Ok(v) => Err(format!("{what}: expected {class}, loaded {v:?}")),
    }
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut archive = EmbeddingArchive::new(128);
    for i in 0..1000 {
        archive.push(format!("utt{i:04}"), (0..128).map(|_| f32::from_bits(rng.random::<u32>() & 0xbf7f_ffff)).collect()).map_err(|e| e.to_string())?;
    }
    let path = dir.join("a.sveb");
    archive.save(&path).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let back = EmbeddingArchive::load(&path).map_err(|e| e.to_string())?;
    ensure!(back.records.len() == 1000, "lost records");
    let bitwise = back.records.iter().zip(&archive.records).all(|((ia, va), (ib, vb))| {
        ia == ib && va.iter().zip(vb).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    ensure!(bitwise, "archive payload changed on round trip");
    ensure!(back.to_bytes().map_err(|e| e.to_string())? == bytes, "archive bytes changed on round trip");

    let ckpt = tiny_checkpoint()?;
    let cpath = dir.join("m.ckpt");
    save_checkpoint(&ckpt, &cpath).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&cpath).map_err(|e| e.to_string())?;
    ensure!(loaded == ckpt, "checkpoint changed on round trip");
    ensure!(checkpoint_to_bytes(&loaded).map_err(|e| e.to_string())? == std::fs::read(&cpath).map_err(|e| e.to_string())?, "checkpoint bytes changed");

    let write = |name: &str, data: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, data).unwrap();
        p
    };
    let mut bad_magic = bytes.clone();
    bad_magic[..4].copy_from_slice(b"JUNK");
    expect_class(EmbeddingArchive::load(write("m.sveb", &bad_magic)), "bad-magic", "archive magic")?;
    expect_class(EmbeddingArchive::load(write("t.sveb", &bytes[..9])), "truncated", "archive header")?;
    expect_class(EmbeddingArchive::load(write("r.sveb", &bytes[..bytes.len() - 1])), "truncated", "archive record")?;
    let mut version = bytes.clone();
    version[4] = 7;
    expect_class(EmbeddingArchive::load(write("v.sveb", &version)), "unsupported-version", "archive version")?;
    expect_class(EmbeddingArchive::load_with_dim(&path, 64), "dim-mismatch", "archive dim")?;
    let cbytes = std::fs::read(&cpath).map_err(|e| e.to_string())?;
    let mut cmagic = cbytes.clone();
    cmagic[0] ^= 0xff;
    expect_class(load_checkpoint(write("m.ckpt2", &cmagic)), "bad-magic", "checkpoint magic")?;
    expect_class(load_checkpoint(write("t.ckpt2", &cbytes[..cbytes.len() / 2])), "truncated", "checkpoint body")?;
    expect_class(FeatureArchive::load(write("f.svfm", &bytes)), "bad-magic", "feature archive read as embeddings")?;

    let out = Command::new(env!("CARGO_BIN_EXE_svkit"))
        .current_dir(dir)
        .args(["score", "--emb", "m.sveb", "--trials", "missing", "--out", "s"])
        .output()
        .map_err(|e| e.to_string())?;
    let stderr = String::from_utf8_lossy(&out.stderr);
    ensure!(out.status.code() == Some(3) && stderr.starts_with("error bad-magic:"), "CLI reported {:?} / {stderr}", out.status.code());
    ensure!(!dir.join("s").exists(), "CLI left a partial output");
    Ok("1000 x 128 archive and checkpoint bitwise; corrupted inputs give bad-magic/truncated/unsupported-version/dim-mismatch".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("metric oracle equivalence", criterion_1),
        ("gradient checks", criterion_2),
        ("sub-center reductions", criterion_3),
        ("end-to-end synthetic verification", criterion_4),
        ("Sub-Mean direction", criterion_5),
        ("AS-Norm correctness", criterion_6),
        ("mAP oracle", criterion_7),
        ("CLI determinism", criterion_8),
        ("format round trips", criterion_9),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
