//! Identification accuracy, verification metrics (EER, minimum detection
//! cost, DET operating points) and trial-list construction.
//!
//! A trial is accepted when its score is at least the threshold.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;

use crate::corpus::Manifest;
use crate::{Error, Result};

/// Scored verification trials.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub trials: Vec<(f64, bool)>,
}

impl ScoreSet {
    pub fn new(trials: Vec<(f64, bool)>) -> Self {
        Self { trials }
    }

    fn counts(&self) -> Result<(usize, usize)> {
        if self.trials.iter().any(|(s, _)| s.is_nan()) {
            return Err(Error::InvalidInput("NaN score".into()));
        }
        let targets = self.trials.iter().filter(|t| t.1).count();
        let nontargets = self.trials.len() - targets;
        if targets == 0 || nontargets == 0 {
            return Err(Error::InvalidInput(
                "need at least one target and one non-target trial".into(),
            ));
        }
        Ok((targets, nontargets))
    }
}

/// Detection cost weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcfParams {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_tar: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            c_miss: 1.0,
            c_fa: 1.0,
            p_tar: 0.01,
        }
    }
}

impl DcfParams {
    fn validate(&self) -> Result<()> {
        if !(self.c_miss > 0.0 && self.c_fa > 0.0 && self.p_tar > 0.0 && self.p_tar < 1.0) {
            return Err(Error::InvalidInput(format!("invalid DCF parameters {self:?}")));
        }
        Ok(())
    }

    pub fn cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        self.c_miss * p_miss * self.p_tar + self.c_fa * p_fa * (1.0 - self.p_tar)
    }

    /// Cost of the better of the two trivial systems.
    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_tar).min(self.c_fa * (1.0 - self.p_tar))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Operating points sorted by increasing threshold: accept-all at `-inf`,
/// one point per distinct score, reject-all at `+inf`.
pub fn det_points(scores: &ScoreSet) -> Result<Vec<DetPoint>> {
    let (nt, nn) = scores.counts()?;
    let mut sorted = scores.trials.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::with_capacity(sorted.len() + 2);
    points.push(DetPoint {
        threshold: f64::NEG_INFINITY,
        p_miss: 0.0,
        p_fa: 1.0,
    });
    // Walking upward, trials strictly below the threshold are rejected.
    let (mut missed, mut rejected_non) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        points.push(DetPoint {
            threshold,
            p_miss: missed as f64 / nt as f64,
            p_fa: (nn - rejected_non) as f64 / nn as f64,
        });
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                missed += 1;
            } else {
                rejected_non += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

/// Equal error rate, interpolated linearly between the two adjacent
/// operating points that bracket the miss/false-alarm crossing.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    let points = det_points(scores)?;
    for w in points.windows(2) {
        let d0 = w[0].p_miss - w[0].p_fa;
        let d1 = w[1].p_miss - w[1].p_fa;
        if d0 == 0.0 {
            return Ok(w[0].p_miss);
        }
        if d0 < 0.0 && d1 >= 0.0 {
            let alpha = -d0 / (d1 - d0);
            return Ok(w[0].p_miss + alpha * (w[1].p_miss - w[0].p_miss));
        }
    }
    // The last point always has p_miss - p_fa = 1, so the loop returns.
    unreachable!("DET curve has no crossing")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinDcf {
    pub raw: f64,
    pub normalized: f64,
    pub threshold: f64,
}

/// Minimum detection cost over all thresholds, raw and normalized by the
/// cost of the best trivial system.
pub fn min_dcf(scores: &ScoreSet, params: &DcfParams) -> Result<MinDcf> {
    params.validate()?;
    let points = det_points(scores)?;
    let best = points
        .iter()
        .map(|p| (params.cost(p.p_miss, p.p_fa), p.threshold))
        .fold((f64::INFINITY, 0.0), |a, b| if b.0 < a.0 { b } else { a });
    Ok(MinDcf {
        raw: best.0,
        normalized: best.0 / params.default_cost(),
        threshold: best.1,
    })
}

/// Fraction of samples whose label ranks within the top `k` scores. Ties
/// rank the lower class index first.
pub fn top_k_accuracy(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidInput("need one label per score row".into()));
    }
    let classes = scores[0].len();
    if k == 0 || k > classes {
        return Err(Error::InvalidInput(format!("k = {k} outside 1..={classes}")));
    }
    let mut hits = 0;
    for (row, &label) in scores.iter().zip(labels) {
        if row.len() != classes {
            return Err(Error::InvalidInput("ragged score matrix".into()));
        }
        if label >= classes {
            return Err(Error::InvalidInput(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let s = row[label];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > s || (v == s && j < label))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

pub type TrialList = Vec<Trial>;

/// Samples `pos_per_spk` same-speaker and `neg_per_spk` cross-speaker trials
/// per speaker, never repeating an unordered pair.
pub fn build_trials(test: &Manifest, pos_per_spk: usize, neg_per_spk: usize, seed: u64) -> Result<TrialList> {
    let mut by_spk: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in &test.records {
        by_spk.entry(r.poi_id.as_str()).or_default().push(r.utterance_id.as_str());
    }
    if by_spk.len() < 2 {
        return Err(Error::InsufficientData("trials need at least two speakers".into()));
    }
    if let Some((spk, _)) = by_spk.iter().find(|(_, u)| u.len() < 2) {
        return Err(Error::InsufficientData(format!(
            "speaker {spk} has fewer than two utterances"
        )));
    }
    for utts in by_spk.values_mut() {
        utts.sort_unstable();
    }
    let mut rng = crate::rng::seeded(seed);
    let mut used: HashSet<(String, String)> = HashSet::new();
    let key = |a: &str, b: &str| {
        if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        }
    };
    let mut trials = Vec::new();
    for (spk, utts) in &by_spk {
        let mut same: Vec<(&str, &str)> = Vec::new();
        for i in 0..utts.len() {
            for j in i + 1..utts.len() {
                same.push((utts[i], utts[j]));
            }
        }
        same.shuffle(&mut rng);
        let mut taken = 0;
        for (a, b) in same {
            if taken == pos_per_spk {
                break;
            }
            if used.insert(key(a, b)) {
                trials.push(Trial {
                    enroll: a.to_string(),
                    test: b.to_string(),
                    target: true,
                });
                taken += 1;
            }
        }
        let mut cross: Vec<(&str, &str)> = Vec::new();
        for (other, others) in &by_spk {
            if other == spk {
                continue;
            }
            for a in utts {
                for b in others {
                    cross.push((a, b));
                }
            }
        }
        cross.shuffle(&mut rng);
        let mut taken = 0;
        for (a, b) in cross {
            if taken == neg_per_spk {
                break;
            }
            if used.insert(key(a, b)) {
                trials.push(Trial {
                    enroll: a.to_string(),
                    test: b.to_string(),
                    target: false,
                });
                taken += 1;
            }
        }
    }
    Ok(trials)
}

pub fn write_trials<W: Write>(w: &mut W, trials: &[Trial]) -> Result<()> {
    for t in trials {
        writeln!(w, "{} {} {}", t.enroll, t.test, label(t.target))?;
    }
    Ok(())
}

fn label(target: bool) -> &'static str {
    if target {
        "target"
    } else {
        "nontarget"
    }
}

fn parse_label(s: &str, line: usize) -> Result<bool> {
    match s {
        "target" => Ok(true),
        "nontarget" => Ok(false),
        other => Err(Error::Format(format!("line {line}: bad trial label {other:?}"))),
    }
}

pub fn read_trials<R: BufRead>(r: R) -> Result<TrialList> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [enroll, test, target] = fields[..] else {
            return Err(Error::Format(format!("line {}: expected 3 fields", i + 1)));
        };
        out.push(Trial {
            enroll: enroll.into(),
            test: test.into(),
            target: parse_label(target, i + 1)?,
        });
    }
    Ok(out)
}

/// One scored trial as stored in a score file.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTrial {
    pub trial: Trial,
    pub score: f64,
}

/// Score file: `<enroll_id> <test_id> <score> <target|nontarget>` per line.
pub fn write_scores<W: Write>(w: &mut W, scored: &[ScoredTrial]) -> Result<()> {
    for s in scored {
        writeln!(
            w,
            "{} {} {} {}",
            s.trial.enroll,
            s.trial.test,
            s.score,
            label(s.trial.target)
        )?;
    }
    Ok(())
}

pub fn read_scores<R: BufRead>(r: R) -> Result<Vec<ScoredTrial>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() || fields[0].starts_with('#') {
            continue;
        }
        let [enroll, test, score, target] = fields[..] else {
            return Err(Error::Format(format!("line {}: expected 4 fields", i + 1)));
        };
        let score: f64 = score
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad score {score:?}", i + 1)))?;
        out.push(ScoredTrial {
            trial: Trial {
                enroll: enroll.into(),
                test: test.into(),
                target: parse_label(target, i + 1)?,
            },
            score,
        });
    }
    Ok(out)
}

pub fn to_score_set(scored: &[ScoredTrial]) -> ScoreSet {
    ScoreSet::new(scored.iter().map(|s| (s.score, s.trial.target)).collect())
}

/// Verification report as a `key=value` block.
pub fn verification_report(scores: &ScoreSet, params: &DcfParams) -> Result<String> {
    let e = eer(scores)?;
    let dcf = min_dcf(scores, params)?;
    let (nt, nn) = scores.counts()?;
    let mut out = String::new();
    writeln!(out, "trials={}", scores.trials.len()).unwrap();
    writeln!(out, "targets={nt}").unwrap();
    writeln!(out, "nontargets={nn}").unwrap();
    writeln!(out, "eer={e:.6}").unwrap();
    writeln!(out, "eer_percent={:.4}", 100.0 * e).unwrap();
    writeln!(out, "min_dcf={:.6}", dcf.normalized).unwrap();
    writeln!(out, "min_dcf_raw={:.6}", dcf.raw).unwrap();
    writeln!(out, "min_dcf_normalized={:.6}", dcf.normalized).unwrap();
    writeln!(out, "p_tar={}", params.p_tar).unwrap();
    writeln!(out, "c_miss={}", params.c_miss).unwrap();
    writeln!(out, "c_fa={}", params.c_fa).unwrap();
    Ok(out)
}
