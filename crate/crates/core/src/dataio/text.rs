use std::collections::BTreeMap;

use crate::backend::{ScoreSet, Trial, TrialKey, TrialList};
use crate::error::{Error, Result};

use super::synth::Enrollment;

/// Utterance id to genre list (one genre for single utterances, one per
/// segment for concatenated enrollments).
pub type GenreTable = BTreeMap<String, Vec<String>>;

fn lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()))
        .filter(|(_, f)| !f.is_empty() && !f[0].starts_with('#'))
}

fn parse_label(s: &str, line: usize) -> Result<bool> {
    match s {
        "1" | "target" | "tgt" => Ok(true),
        "0" | "nontarget" | "non" | "imp" => Ok(false),
        _ => Err(Error::Parse(format!("line {line}: bad label {s:?}"))),
    }
}

/// Renders a score with 9 significant digits.
pub fn format_score(score: f64) -> String {
    if score == 0.0 || !score.is_finite() {
        return format!("{score}");
    }
    let magnitude = score.abs().log10().floor() as i32;
    if (-5..=9).contains(&magnitude) {
        let decimals = (8 - magnitude).max(0) as usize;
        format!("{score:.decimals$}")
    } else {
        format!("{score:.8e}")
    }
}

/// `enroll-id test-id [label]` lines.
pub fn parse_trials(text: &str) -> Result<TrialList> {
    let mut trials = Vec::new();
    for (line, f) in lines(text) {
        let label = match f.len() {
            2 => None,
            3 => Some(parse_label(f[2], line)?),
            n => return Err(Error::Parse(format!("line {line}: expected 2 or 3 fields, got {n}"))),
        };
        trials.push(TrialKey { enroll: f[0].to_string(), test: f[1].to_string(), label });
    }
    Ok(TrialList { trials })
}

pub fn write_trials(list: &TrialList) -> String {
    let mut out = String::new();
    for t in &list.trials {
        out.push_str(&t.enroll);
        out.push(' ');
        out.push_str(&t.test);
        if let Some(l) = t.label {
            out.push_str(if l { " 1" } else { " 0" });
        }
        out.push('\n');
    }
    out
}

/// `enroll-id test-id score` lines.
pub fn parse_scores(text: &str) -> Result<ScoreSet> {
    let mut trials = Vec::new();
    for (line, f) in lines(text) {
        if f.len() != 3 {
            return Err(Error::Parse(format!("line {line}: expected 3 fields, got {}", f.len())));
        }
        let score: f64 = f[2].parse().map_err(|_| Error::Parse(format!("line {line}: bad score {:?}", f[2])))?;
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("line {line}: score {score}")));
        }
        trials.push(Trial { enroll: f[0].to_string(), test: f[1].to_string(), score, label: None });
    }
    Ok(ScoreSet { trials })
}

pub fn write_scores(set: &ScoreSet) -> String {
    let mut out = String::new();
    for t in &set.trials {
        out.push_str(&format!("{} {} {}\n", t.enroll, t.test, format_score(t.score)));
    }
    out
}

/// `utt-id genre [genre ...]` lines.
pub fn parse_genre_table(text: &str) -> Result<GenreTable> {
    let mut table = GenreTable::new();
    for (line, f) in lines(text) {
        if f.len() < 2 {
            return Err(Error::Parse(format!("line {line}: expected utterance id and genre")));
        }
        let genres = f[1..].iter().map(|s| s.to_string()).collect();
        if table.insert(f[0].to_string(), genres).is_some() {
            return Err(Error::DuplicateId(f[0].to_string()));
        }
    }
    Ok(table)
}

pub fn write_genre_table(table: &GenreTable) -> String {
    let mut out = String::new();
    for (id, genres) in table {
        out.push_str(id);
        for g in genres {
            out.push(' ');
            out.push_str(g);
        }
        out.push('\n');
    }
    out
}

/// Two-column `key value` maps such as utt2spk; order is preserved.
pub fn parse_two_column(text: &str) -> Result<Vec<(String, String)>> {
    lines(text)
        .map(|(line, f)| {
            if f.len() != 2 {
                return Err(Error::Parse(format!("line {line}: expected 2 fields, got {}", f.len())));
            }
            Ok((f[0].to_string(), f[1].to_string()))
        })
        .collect()
}

pub fn write_two_column(rows: &[(String, String)]) -> String {
    rows.iter().map(|(a, b)| format!("{a} {b}\n")).collect()
}

/// `enroll-id utt-id [utt-id ...]` lines.
pub fn parse_enrollments(text: &str) -> Result<Vec<Enrollment>> {
    lines(text)
        .map(|(line, f)| {
            if f.len() < 2 {
                return Err(Error::Parse(format!("line {line}: enrollment needs at least one segment")));
            }
            Ok(Enrollment { id: f[0].to_string(), segments: f[1..].iter().map(|s| s.to_string()).collect() })
        })
        .collect()
}

pub fn write_enrollments(enrollments: &[Enrollment]) -> String {
    enrollments.iter().map(|e| format!("{} {}\n", e.id, e.segments.join(" "))).collect()
}

/// `key = value` or `key value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let l = raw.split('#').next().unwrap_or("").trim();
        if l.is_empty() {
            continue;
        }
        let (k, v) = match l.split_once('=') {
            Some((k, v)) => (k.trim(), v.trim()),
            None => l.split_once(char::is_whitespace).map(|(k, v)| (k, v.trim())).ok_or_else(|| {
                Error::Parse(format!("line {}: expected key = value", i + 1))
            })?,
        };
        if k.is_empty() || v.is_empty() {
            return Err(Error::Parse(format!("line {}: expected key = value", i + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Parse(format!("line {}: duplicate key {k}", i + 1)));
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_formatting_keeps_nine_digits() {
        assert_eq!(format_score(0.70710678118), "0.707106781");
        assert_eq!(format_score(2.5), "2.50000000");
        assert_eq!(format_score(-12.3456789012), "-12.3456789");
        assert_eq!(format_score(0.0), "0");
        for &v in &[1.234567891e-7, 3.0e12, -0.000123456789] {
            let back: f64 = format_score(v).parse().unwrap();
            assert!(((back - v) / v).abs() < 1e-8, "{v} -> {}", format_score(v));
        }
    }

    #[test]
    fn trials_and_scores() {
        let list = parse_trials("a b 1\n# comment\nc d 0\ne f\n").unwrap();
        assert_eq!(list.trials.len(), 3);
        assert_eq!(list.trials[0].label, Some(true));
        assert_eq!(list.trials[2].label, None);
        assert_eq!(parse_trials(&write_trials(&list)).unwrap(), list);
        assert!(parse_trials("a b c d\n").is_err());
        assert!(parse_trials("a b maybe\n").is_err());

        let s = parse_scores("a b 0.5\nc d -1e-3\n").unwrap();
        assert_eq!(s.trials[1].score, -1e-3);
        assert!(parse_scores("a b x\n").is_err());
        assert!(matches!(parse_scores("a b NaN\n"), Err(Error::NonFinite(_))));
    }

    #[test]
    fn genre_table_and_kv() {
        let t = parse_genre_table("u1 speech\nenr speech singing speech\n").unwrap();
        assert_eq!(t["enr"].len(), 3);
        assert_eq!(parse_genre_table(&write_genre_table(&t)).unwrap(), t);
        assert!(matches!(parse_genre_table("u speech\nu drama\n"), Err(Error::DuplicateId(_))));

        let kv = parse_key_values("# c\nstage1.lr0 = 0.08\nsteps 10  # trailing\n").unwrap();
        assert_eq!(kv["stage1.lr0"], "0.08");
        assert_eq!(kv["steps"], "10");
        assert!(parse_key_values("a = 1\na = 2\n").is_err());
    }

    #[test]
    fn enrollments_round_trip() {
        let e = parse_enrollments("e1 u1 u2\ne2 u3\n").unwrap();
        assert_eq!(e[0].segments, vec!["u1", "u2"]);
        assert_eq!(parse_enrollments(&write_enrollments(&e)).unwrap(), e);
        assert!(parse_enrollments("e1\n").is_err());
    }
}
