//! Manifest schema, the identification and verification split protocols,
//! dataset statistics and a synthetic desk-scale speaker corpus.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioBuffer, SAMPLE_RATE};
use crate::{Error, Result};

/// Minimum utterances in the held-out identification test video.
pub const MIN_TEST_UTTERANCES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub poi_id: String,
    pub poi_name: String,
    pub gender: Gender,
    pub nationality: String,
    pub video_id: String,
    pub utterance_id: String,
    pub audio_path: String,
    pub duration_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let m = Self { records };
        m.validate()?;
        Ok(m)
    }

    /// Unique utterance ids, positive durations, and every video owned by a
    /// single POI.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for r in &self.records {
            if !ids.insert(r.utterance_id.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate utterance id {}",
                    r.utterance_id
                )));
            }
            if !(r.duration_s > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "utterance {} has non-positive duration",
                    r.utterance_id
                )));
            }
            if let Some(prev) = owner.insert(&r.video_id, &r.poi_id) {
                if prev != r.poi_id {
                    return Err(Error::InvalidInput(format!(
                        "video {} belongs to both {prev} and {}",
                        r.video_id, r.poi_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct POI ids.
    pub fn poi_ids(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.poi_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Dense class index per record, following sorted POI order.
    pub fn class_labels(&self) -> (Vec<String>, Vec<usize>) {
        let ids = self.poi_ids();
        let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
        let labels = self.records.iter().map(|r| index[r.poi_id.as_str()]).collect();
        (ids, labels)
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Self::new(records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_jsonl(BufReader::new(File::open(path)?))
    }
}

/// Holds out one video per POI for testing: the qualifying video (at least
/// five utterances) with the most utterances, then the smallest video id.
pub fn identification_split(m: &Manifest) -> Result<(Manifest, Manifest)> {
    let mut videos: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for r in &m.records {
        *videos
            .entry(&r.poi_id)
            .or_default()
            .entry(&r.video_id)
            .or_default() += 1;
    }
    let mut test_videos = HashSet::new();
    for (poi, vids) in &videos {
        if vids.len() < 2 {
            return Err(Error::SplitInfeasible(format!(
                "POI {poi} has a single video; nothing would remain for training"
            )));
        }
        let chosen = vids
            .iter()
            .filter(|(_, &n)| n >= MIN_TEST_UTTERANCES)
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(v, _)| *v)
            .ok_or_else(|| {
                Error::SplitInfeasible(format!(
                    "POI {poi} has no video with at least {MIN_TEST_UTTERANCES} utterances"
                ))
            })?;
        test_videos.insert(chosen);
    }
    let (test, dev): (Vec<_>, Vec<_>) = m
        .records
        .iter()
        .cloned()
        .partition(|r| test_videos.contains(r.video_id.as_str()));
    Ok((Manifest { records: dev }, Manifest { records: test }))
}

fn is_test_name(name: &str) -> bool {
    matches!(name.trim().chars().next(), Some('E') | Some('e'))
}

/// Reserves every POI whose name starts with 'E' (either case) for testing.
pub fn verification_split(m: &Manifest) -> Result<(Manifest, Manifest)> {
    let (test, dev): (Vec<_>, Vec<_>) = m
        .records
        .iter()
        .cloned()
        .partition(|r| is_test_name(&r.poi_name));
    if test.is_empty() || dev.is_empty() {
        return Err(Error::SplitInfeasible(
            "verification split needs at least one 'E' POI and one other POI".into(),
        ));
    }
    Ok((Manifest { records: dev }, Manifest { records: test }))
}

/// `max / avg / min` of one statistic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triple {
    pub max: f64,
    pub avg: f64,
    pub min: f64,
}

impl Triple {
    fn of(values: &[f64]) -> Self {
        Self {
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            avg: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} / {:.2} / {}", self.max, self.avg, self.min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub pois: usize,
    pub male_pois: usize,
    pub videos_per_poi: Triple,
    pub utterances_per_poi: Triple,
    pub utterance_length_s: Triple,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pois={}", self.pois)?;
        writeln!(f, "male_pois={}", self.male_pois)?;
        writeln!(f, "videos_per_poi={}", self.videos_per_poi)?;
        writeln!(f, "utterances_per_poi={}", self.utterances_per_poi)?;
        writeln!(f, "utterance_length_s={}", self.utterance_length_s)
    }
}

pub fn corpus_stats(m: &Manifest) -> Result<CorpusStats> {
    if m.is_empty() {
        return Err(Error::InvalidInput("empty manifest".into()));
    }
    let mut per_poi: BTreeMap<&str, (BTreeSet<&str>, usize, Gender)> = BTreeMap::new();
    for r in &m.records {
        let e = per_poi
            .entry(&r.poi_id)
            .or_insert_with(|| (BTreeSet::new(), 0, r.gender));
        e.0.insert(&r.video_id);
        e.1 += 1;
    }
    let videos: Vec<f64> = per_poi.values().map(|v| v.0.len() as f64).collect();
    let utts: Vec<f64> = per_poi.values().map(|v| v.1 as f64).collect();
    let lengths: Vec<f64> = m.records.iter().map(|r| r.duration_s).collect();
    Ok(CorpusStats {
        pois: per_poi.len(),
        male_pois: per_poi.values().filter(|v| v.2 == Gender::Male).count(),
        videos_per_poi: Triple::of(&videos),
        utterances_per_poi: Triple::of(&utts),
        utterance_length_s: Triple::of(&lengths),
    })
}

// ---------------------------------------------------------------------------
// Synthetic corpus

#[derive(Clone, Debug)]
pub struct SynthParams {
    pub n_speakers: usize,
    pub videos_per_spk: usize,
    pub utts_per_video: usize,
    pub dur_range_s: (f64, f64),
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_speakers: 10,
            videos_per_spk: 4,
            utts_per_video: 5,
            dur_range_s: (3.0, 8.0),
            seed: 42,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub manifest: Manifest,
    /// One buffer per manifest record, same order.
    pub audio: Vec<AudioBuffer>,
}

/// Speaker names cycle through this list; two of the first ten start with
/// 'E' so a ten-speaker corpus supports the verification split.
const NAMES: [&str; 26] = [
    "Abel", "Bianca", "Caius", "Dora", "Elton", "Farid", "Gwen", "Hugo", "Ines", "Emma", "Kofi",
    "Lena", "Milo", "Nadia", "Otto", "Priya", "Quinn", "Rosa", "Sven", "Tara", "Umar", "Vera",
    "Wade", "Xenia", "Yusuf", "Zoe",
];

const NATIONALITIES: [&str; 6] = ["UK", "USA", "India", "Canada", "Australia", "Ireland"];

/// A fixed artificial voice: glottal pulse rate, three resonances and a
/// spectral tilt.
#[derive(Clone, Debug)]
struct Voice {
    f0: f64,
    formants: [(f64, f64); 3],
    tilt: f64,
}

impl Voice {
    fn sample(rng: &mut crate::rng::Rng) -> Self {
        Self {
            f0: rng.gen_range(80.0..300.0),
            formants: [
                (rng.gen_range(300.0..900.0), rng.gen_range(60.0..120.0)),
                (rng.gen_range(900.0..2400.0), rng.gen_range(80.0..150.0)),
                (rng.gen_range(2400.0..3600.0), rng.gen_range(100.0..200.0)),
            ],
            tilt: rng.gen_range(0.3..0.9),
        }
    }
}

struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64) -> Self {
        let fs = SAMPLE_RATE as f64;
        let r = (-PI * bandwidth / fs).exp();
        let theta = 2.0 * PI * freq / fs;
        Self {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            gain: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Source-filter synthesis with per-utterance prosody, per-video channel
/// coloring and additive white noise at a random SNR in [5, 20] dB.
fn synth_utterance(voice: &Voice, channel: f64, duration_s: f64, rng: &mut crate::rng::Rng) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let n = (duration_s * fs).round() as usize;
    let vib_rate = rng.gen_range(0.2..0.8);
    let vib_phase = rng.gen_range(0.0..2.0 * PI);
    let jitter_rate = rng.gen_range(2.0..5.0);
    let jitter_phase = rng.gen_range(0.0..2.0 * PI);
    let syllable_rate = rng.gen_range(2.5..5.0);
    let syllable_phase = rng.gen_range(0.0..2.0 * PI);
    let mut resonators: Vec<Resonator> = voice
        .formants
        .iter()
        .map(|&(f, b)| Resonator::new(f * rng.gen_range(0.97..1.03), b))
        .collect();
    let mut phase = 0.0;
    let mut tilt_state = 0.0;
    let mut prev_in = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / fs;
        let f0 = voice.f0
            * (1.0
                + 0.08 * (2.0 * PI * vib_rate * t + vib_phase).sin()
                + 0.02 * (2.0 * PI * jitter_rate * t + jitter_phase).sin());
        phase += f0 / fs;
        let pulse = if phase >= 1.0 {
            phase -= 1.0;
            1.0
        } else {
            0.0
        };
        let envelope = 0.25 + 0.75 * (PI * syllable_rate * t + syllable_phase).sin().abs();
        let mut x = pulse * envelope;
        tilt_state = x + voice.tilt * tilt_state;
        x = tilt_state;
        let mut y = 0.0;
        for r in resonators.iter_mut() {
            y += r.step(x);
        }
        let colored = y - channel * prev_in;
        prev_in = y;
        out.push(colored);
    }
    let power = out.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let snr_db = rng.gen_range(5.0..20.0);
    let noise_sd = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += noise_sd * z;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.7 / peak);
    }
    out
}

/// Generates a deterministic corpus of artificial speakers.
pub fn synth_corpus(p: &SynthParams) -> Result<SynthCorpus> {
    if p.n_speakers == 0 || p.videos_per_spk == 0 || p.utts_per_video == 0 {
        return Err(Error::InvalidInput("all corpus counts must be at least 1".into()));
    }
    let (lo, hi) = p.dur_range_s;
    if !(lo >= 1.0 && hi >= lo) {
        return Err(Error::InvalidInput(format!(
            "durations must satisfy 1.0 <= min <= max, got {lo}..{hi}"
        )));
    }
    struct Job {
        record: ManifestRecord,
        voice: Voice,
        channel: f64,
        parts: [u64; 3],
    }
    let mut jobs = Vec::new();
    for s in 0..p.n_speakers {
        let mut srng = crate::rng::derive(p.seed, &[s as u64]);
        let voice = Voice::sample(&mut srng);
        let gender = if voice.f0 < 165.0 { Gender::Male } else { Gender::Female };
        let name = if s < NAMES.len() {
            NAMES[s].to_string()
        } else {
            format!("{}{}", NAMES[s % NAMES.len()], s / NAMES.len())
        };
        let poi_id = format!("id{:05}", 10_001 + s);
        let nationality = NATIONALITIES[srng.gen_range(0..NATIONALITIES.len())].to_string();
        for v in 0..p.videos_per_spk {
            let mut vrng = crate::rng::derive(p.seed, &[s as u64, v as u64]);
            let channel = vrng.gen_range(-0.3..0.3);
            let video_id = format!("{poi_id}_v{v:02}");
            for u in 0..p.utts_per_video {
                let mut urng = crate::rng::derive(p.seed, &[s as u64, v as u64, u as u64, 1]);
                let samples = (urng.gen_range(lo..=hi) * SAMPLE_RATE as f64).round();
                let utterance_id = format!("{video_id}_u{u:02}");
                jobs.push(Job {
                    record: ManifestRecord {
                        poi_id: poi_id.clone(),
                        poi_name: name.clone(),
                        gender,
                        nationality: nationality.clone(),
                        video_id: video_id.clone(),
                        audio_path: format!("wav/{poi_id}/{utterance_id}.wav"),
                        utterance_id,
                        duration_s: samples / SAMPLE_RATE as f64,
                    },
                    voice: voice.clone(),
                    channel,
                    parts: [s as u64, v as u64, u as u64],
                });
            }
        }
    }
    let audio: Vec<AudioBuffer> = jobs
        .par_iter()
        .map(|j| {
            let mut rng = crate::rng::derive(p.seed, &[j.parts[0], j.parts[1], j.parts[2], 2]);
            let samples = synth_utterance(&j.voice, j.channel, j.record.duration_s, &mut rng);
            AudioBuffer::new(samples, SAMPLE_RATE)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest::new(jobs.into_iter().map(|j| j.record).collect())?;
    Ok(SynthCorpus { manifest, audio })
}

impl SynthCorpus {
    /// Writes `manifest.jsonl` and 16-bit WAVs under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        for (r, buf) in self.manifest.records.iter().zip(&self.audio) {
            let path = dir.join(&r.audio_path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            audio::write_wav(&path, buf)?;
        }
        let manifest_path = dir.join("manifest.jsonl");
        self.manifest.save(&manifest_path)?;
        Ok(manifest_path)
    }
}
