use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use voxkit::audio::{self, Spectrogram, MFCC_DIM};
use voxkit::corpus::{self, Manifest, SynthParams};
use voxkit::curation::{self, CurationConfig, FrameStream, StreamInput, StreamMeta};
use voxkit::eval::{self, DcfParams, ScoredTrial};
use voxkit::gmm::{self, DiagonalGmm, UbmConfig};
use voxkit::ivector::{self, LinearSvm, PldaConfig, PldaModel, TotalVariabilityModel};
use voxkit::neural::{self, CnnConfig, Network, SiameseConfig, TrainConfig};

use crate::{Cli, CliError, Command, RunConfig};

type Res<T> = Result<T, CliError>;

/// One line of an embedding file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub utterance_id: String,
    pub vector: Vec<f64>,
}

struct Ctx {
    cfg: RunConfig,
    data_dir: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.data_dir {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn out_path(&self) -> Res<PathBuf> {
        self.out
            .as_deref()
            .map(|p| self.path(p))
            .ok_or_else(|| CliError::Usage("this command needs --out".into()))
    }

    fn seed(&self) -> Res<u64> {
        self.cfg.get("seed")
    }

    /// Writes results to --out, or standard output without it.
    fn emit(&self, text: &str) -> Res<()> {
        match &self.out {
            Some(p) => fs::write(self.path(p), text)?,
            None => {
                let mut so = std::io::stdout().lock();
                so.write_all(text.as_bytes())?;
                so.flush()?;
            }
        }
        Ok(())
    }

    fn manifest(&self, p: &Path) -> Res<(Manifest, PathBuf)> {
        let path = self.path(p);
        let m = Manifest::read_jsonl(open(&path)?)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, base))
    }
}

macro_rules! apply {
    ($cfg:expr, $args:expr, $($key:ident),+) => {
        $( $cfg.apply(stringify!($key), &$args.$key)?; )+
    };
}

pub fn run(cli: Cli) -> Res<()> {
    let g = cli.global;
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply("seed", &g.seed)?;
    cfg.apply("threads", &g.threads)?;
    let threads: usize = cfg.get("threads")?;
    if threads > 0 {
        // A second initialisation only happens in-process; ignore it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let mut ctx = Ctx { cfg, data_dir: g.data_dir, out: g.out };
    match cli.command {
        Command::SynthData(a) => {
            apply!(ctx.cfg, a, speakers, videos_per_speaker, utterances_per_video, min_duration_s, max_duration_s);
            synth_data(&ctx)
        }
        Command::ExtractFeatures(a) => {
            apply!(ctx.cfg, a, features);
            extract_features(&ctx, &a.manifest)
        }
        Command::TrainUbm(a) => {
            apply!(ctx.cfg, a, ubm_components, ubm_iters, ubm_init_subsample);
            train_ubm(&ctx, &a.manifest, &a.feature_dir)
        }
        Command::TrainIvector(a) => {
            apply!(ctx.cfg, a, tv_rank, tv_iters);
            train_ivector(&ctx, &a.manifest, &a.feature_dir, &a.ubm)
        }
        Command::TrainPlda(a) => {
            apply!(ctx.cfg, a, plda_dim, plda_iters);
            train_plda(&ctx, &a.manifest, &a.embeddings)
        }
        Command::TrainSvm(a) => {
            apply!(ctx.cfg, a, svm_c_grid);
            train_svm(&ctx, &a.manifest, &a.embeddings, a.val_manifest.as_deref())
        }
        Command::TrainCnn(a) => {
            apply!(
                ctx.cfg, a, objective, cnn_size, epochs, batch_size, lr, momentum, weight_decay, lr_decay,
                patience, embed_dim, siamese_epochs, siamese_steps, batch_pairs, margin, crops_per_utt
            );
            train_cnn(&ctx, &a.manifest, &a.feature_dir, a.init.as_deref())
        }
        Command::Embed(a) => {
            apply!(ctx.cfg, a, embedding);
            embed(&ctx, &a)
        }
        Command::Split(a) => split(&ctx, &a.manifest, &a.protocol),
        Command::Trials(a) => {
            apply!(ctx.cfg, a, trials_pos, trials_neg);
            trials(&ctx, &a.manifest)
        }
        Command::Score(a) => {
            apply!(ctx.cfg, a, backend, map_relevance);
            score(&ctx, &a)
        }
        Command::EvalId(a) => {
            apply!(ctx.cfg, a, inference, top_k);
            eval_id(&ctx, &a)
        }
        Command::EvalVer(a) => {
            apply!(ctx.cfg, a, p_tar, c_miss, c_fa);
            eval_ver(&ctx, &a.scores)
        }
        Command::Curate(a) => {
            apply!(
                ctx.cfg, a, shot_threshold, iou_min, gap_max, sync_window, sync_threshold, identity_threshold,
                require_landmarks
            );
            curate(&mut ctx, &a.streams)
        }
        Command::Stats(a) => {
            let (m, _) = ctx.manifest(&a.manifest)?;
            ctx.emit(&corpus::corpus_stats(&m)?.to_string())
        }
    }
}

// ---------------------------------------------------------------------------
// File helpers

fn feature_file(dir: &Path, utt: &str) -> PathBuf {
    dir.join(format!("{utt}.feat"))
}

fn load_spectrograms(dir: &Path, m: &Manifest) -> Res<Vec<Spectrogram>> {
    m.records
        .par_iter()
        .map(|r| {
            let x = audio::load_features(&feature_file(dir, &r.utterance_id))?;
            Ok(Spectrogram::from_matrix(x)?)
        })
        .collect()
}

fn load_mfccs(dir: &Path, m: &Manifest) -> Res<Vec<Array2<f64>>> {
    m.records
        .par_iter()
        .map(|r| {
            let x = audio::load_features(&feature_file(dir, &r.utterance_id))?;
            if x.nrows() != MFCC_DIM {
                return Err(CliError::Data(voxkit::Error::ModelMismatch(format!(
                    "{} holds {} rows, expected {MFCC_DIM} cepstral rows",
                    r.utterance_id,
                    x.nrows()
                ))));
            }
            Ok(x)
        })
        .collect()
}

fn create(path: &Path) -> Res<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Res<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Data(voxkit::Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))))
}

fn write_embeddings(path: &Path, recs: &[EmbeddingRecord]) -> Res<()> {
    let mut w = create(path)?;
    for r in recs {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Res<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for line in open(path)?.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: EmbeddingRecord = serde_json::from_str(&line)?;
        out.insert(r.utterance_id, r.vector);
    }
    Ok(out)
}

/// Vectors of the manifest's utterances, in manifest order.
fn vectors_for(m: &Manifest, map: &BTreeMap<String, Vec<f64>>) -> Res<Vec<DVector<f64>>> {
    m.records
        .iter()
        .map(|r| {
            map.get(&r.utterance_id)
                .map(|v| DVector::from_column_slice(v))
                .ok_or_else(|| {
                    CliError::Data(voxkit::Error::InvalidInput(format!("no vector for {}", r.utterance_id)))
                })
        })
        .collect()
}

fn unit(v: DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

fn classes_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".classes");
    PathBuf::from(s)
}

fn write_classes(model: &Path, ids: &[String]) -> Res<()> {
    fs::write(classes_path(model), ids.join("\n") + "\n")?;
    Ok(())
}

/// Class order saved next to a model, or the manifest's own POI order.
fn read_classes(model: &Path, fallback: &Manifest) -> Res<Vec<String>> {
    match fs::read_to_string(classes_path(model)) {
        Ok(s) => Ok(s.lines().map(str::to_string).filter(|l| !l.is_empty()).collect()),
        Err(_) => Ok(fallback.poi_ids()),
    }
}

fn labels_in(m: &Manifest, classes: &[String]) -> Res<Vec<usize>> {
    m.records
        .iter()
        .map(|r| {
            classes.iter().position(|c| *c == r.poi_id).ok_or_else(|| {
                CliError::Data(voxkit::Error::InvalidInput(format!("POI {} is not a model class", r.poi_id)))
            })
        })
        .collect()
}

fn read_gmm(path: &Path) -> Res<DiagonalGmm> {
    Ok(DiagonalGmm::read(&mut open(path)?)?)
}

fn bad_choice(key: &str, value: &str, allowed: &str) -> CliError {
    CliError::Usage(format!("{key} must be {allowed}, got {value:?}"))
}

// ---------------------------------------------------------------------------
// Commands

fn synth_data(ctx: &Ctx) -> Res<()> {
    let c = &ctx.cfg;
    let p = SynthParams {
        n_speakers: c.get("speakers")?,
        videos_per_spk: c.get("videos_per_speaker")?,
        utts_per_video: c.get("utterances_per_video")?,
        dur_range_s: (c.get("min_duration_s")?, c.get("max_duration_s")?),
        seed: ctx.seed()?,
    };
    let dir = ctx.out_path()?;
    let synth = corpus::synth_corpus(&p)?;
    let manifest = synth.write(&dir)?;
    log::info!("{} utterances from {} speakers", synth.manifest.len(), p.n_speakers);
    println!("{}", manifest.display());
    Ok(())
}

fn extract_features(ctx: &Ctx, manifest: &Path) -> Res<()> {
    let kind: String = ctx.cfg.get("features")?;
    if kind != "spectrogram" && kind != "mfcc" {
        return Err(bad_choice("features", &kind, "spectrogram or mfcc"));
    }
    let (m, base) = ctx.manifest(manifest)?;
    let dir = ctx.out_path()?;
    fs::create_dir_all(&dir)?;
    m.records.par_iter().try_for_each(|r| -> Res<()> {
        let buf = audio::read_wav(&base.join(&r.audio_path))?;
        let x = if kind == "spectrogram" {
            audio::normalize_spectrogram(&audio::spectrogram(&buf)?)?.magnitudes
        } else {
            audio::cmvn(&audio::mfcc(&buf)?)?.coeffs
        };
        audio::save_features(&feature_file(&dir, &r.utterance_id), &x)?;
        Ok(())
    })?;
    log::info!("{} {kind} files in {}", m.len(), dir.display());
    Ok(())
}

fn train_ubm(ctx: &Ctx, manifest: &Path, features: &Path) -> Res<()> {
    let (m, _) = ctx.manifest(manifest)?;
    let feats = load_mfccs(&ctx.path(features), &m)?;
    let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
    let cfg = UbmConfig {
        components: ctx.cfg.get("ubm_components")?,
        iters: ctx.cfg.get("ubm_iters")?,
        seed: ctx.seed()?,
        init_subsample: ctx.cfg.get("ubm_init_subsample")?,
    };
    let fit = gmm::train_ubm(&views, &cfg)?;
    let out = ctx.out_path()?;
    let mut w = create(&out)?;
    fit.gmm.write(&mut w)?;
    w.flush()?;
    if let Some(ll) = fit.log_likelihoods.last() {
        log::info!("final log-likelihood {ll:.4}");
    }
    Ok(())
}

fn stats_for(ubm: &DiagonalGmm, feats: &[Array2<f64>]) -> Res<Vec<ivector::BaumWelchStats>> {
    feats
        .par_iter()
        .map(|f| Ok(ivector::accumulate_stats(ubm, f.view())?))
        .collect()
}

fn train_ivector(ctx: &Ctx, manifest: &Path, features: &Path, ubm: &Path) -> Res<()> {
    let (m, _) = ctx.manifest(manifest)?;
    let ubm = read_gmm(&ctx.path(ubm))?;
    let stats = stats_for(&ubm, &load_mfccs(&ctx.path(features), &m)?)?;
    let fit = ivector::train_total_variability(
        &ubm,
        &stats,
        ctx.cfg.get("tv_rank")?,
        ctx.cfg.get("tv_iters")?,
        ctx.seed()?,
    )?;
    let mut w = create(&ctx.out_path()?)?;
    fit.model.write(&mut w)?;
    w.flush()?;
    Ok(())
}

fn train_plda(ctx: &Ctx, manifest: &Path, embeddings: &Path) -> Res<()> {
    let (m, _) = ctx.manifest(manifest)?;
    let vecs = vectors_for(&m, &read_embeddings(&ctx.path(embeddings))?)?;
    let (_, labels) = m.class_labels();
    let cfg = PldaConfig {
        out_dim: ctx.cfg.get("plda_dim")?,
        em_iters: ctx.cfg.get("plda_iters")?,
    };
    let model = ivector::train_plda(&vecs, &labels, &cfg)?;
    let mut w = create(&ctx.out_path()?)?;
    model.write(&mut w)?;
    w.flush()?;
    Ok(())
}

fn train_svm(ctx: &Ctx, manifest: &Path, embeddings: &Path, val: Option<&Path>) -> Res<()> {
    let (m, _) = ctx.manifest(manifest)?;
    let map = read_embeddings(&ctx.path(embeddings))?;
    let (classes, labels) = m.class_labels();
    let x: Vec<_> = vectors_for(&m, &map)?.into_iter().map(unit).collect();
    let (vx, vy) = match val {
        Some(v) => {
            let (vm, _) = ctx.manifest(v)?;
            let vx: Vec<_> = vectors_for(&vm, &map)?.into_iter().map(unit).collect();
            (vx, labels_in(&vm, &classes)?)
        }
        None => (x.clone(), labels.clone()),
    };
    let fit = ivector::train_ovr_svm(&x, &labels, &ctx.cfg.get_list("svm_c_grid")?, (&vx, &vy), ctx.seed()?)?;
    let out = ctx.out_path()?;
    let mut w = create(&out)?;
    fit.model.write(&mut w)?;
    w.flush()?;
    write_classes(&out, &classes)?;
    log::info!("chose C={} (validation accuracy {:.4})", fit.chosen_c, fit.validation_accuracy);
    Ok(())
}

fn train_cnn(ctx: &Ctx, manifest: &Path, features: &Path, init: Option<&Path>) -> Res<()> {
    let c = &ctx.cfg;
    let (m, _) = ctx.manifest(manifest)?;
    let specs = load_spectrograms(&ctx.path(features), &m)?;
    let (classes, labels) = m.class_labels();
    let out = ctx.out_path()?;
    let objective: String = c.get("objective")?;
    let net = match objective.as_str() {
        "softmax" => {
            let size: String = c.get("cnn_size")?;
            let mut arch = match size.as_str() {
                "full" => CnnConfig::table3(classes.len()),
                "compact" => CnnConfig::compact(classes.len()),
                other => return Err(bad_choice("cnn_size", other, "full or compact")),
            };
            arch.seed = ctx.seed()?;
            let mut net = neural::build_cnn(&arch)?;
            let tc = TrainConfig {
                epochs: c.get("epochs")?,
                batch_size: c.get("batch_size")?,
                lr: c.get("lr")?,
                momentum: c.get("momentum")?,
                weight_decay: c.get("weight_decay")?,
                lr_decay: c.get("lr_decay")?,
                patience: c.get("patience")?,
                seed: ctx.seed()?,
            };
            let h = neural::train_classifier(&mut net, &specs, &labels, &tc)?;
            log::info!("initial loss {:.4}", h.initial_loss);
            for (e, (l, lr)) in h.epoch_losses.iter().zip(&h.learning_rates).enumerate() {
                log::info!("epoch {} loss {l:.4} lr {lr}", e + 1);
            }
            net
        }
        "contrastive" => {
            let init = init.ok_or_else(|| CliError::Usage("contrastive training needs --init".into()))?;
            let trained = Network::load(&ctx.path(init))?;
            let mut net = neural::make_embedding_net(&trained, c.get("embed_dim")?, ctx.seed()?)?;
            let sc = SiameseConfig {
                epochs: c.get("siamese_epochs")?,
                steps_per_epoch: c.get("siamese_steps")?,
                batch_pairs: c.get("batch_pairs")?,
                lr: c.get("lr")?,
                momentum: c.get("momentum")?,
                weight_decay: c.get("weight_decay")?,
                margin: c.get("margin")?,
                crops_per_utt: c.get("crops_per_utt")?,
                seed: ctx.seed()?,
            };
            let h = neural::train_siamese(&mut net, &specs, &labels, &sc)?;
            if let (Some(first), Some(last)) = (h.step_losses.first(), h.step_losses.last()) {
                log::info!("pair loss {first:.4} -> {last:.4}");
            }
            net
        }
        other => return Err(bad_choice("objective", other, "softmax or contrastive")),
    };
    net.save(&out)?;
    write_classes(&out, &classes)?;
    Ok(())
}

fn embed(ctx: &Ctx, a: &crate::EmbedArgs) -> Res<()> {
    let (m, _) = ctx.manifest(&a.manifest)?;
    let dir = ctx.path(&a.feature_dir);
    let vectors: Vec<Vec<f64>> = if let Some(model) = &a.model {
        let net = Network::load(&ctx.path(model))?;
        let which: String = ctx.cfg.get("embedding")?;
        if which != "embedding" && which != "fc7" {
            return Err(bad_choice("embedding", &which, "embedding or fc7"));
        }
        let specs = load_spectrograms(&dir, &m)?;
        specs
            .par_iter()
            .map(|s| {
                Ok(if which == "fc7" {
                    neural::penultimate_features(&net, s)?
                } else {
                    neural::embed(&net, s)?
                })
            })
            .collect::<Res<_>>()?
    } else if let (Some(tv), Some(ubm)) = (&a.tv, &a.ubm) {
        let ubm = read_gmm(&ctx.path(ubm))?;
        let model = TotalVariabilityModel::read(&mut open(&ctx.path(tv))?, ubm)?;
        let stats = stats_for(&model.ubm, &load_mfccs(&dir, &m)?)?;
        ivector::extract_ivectors(&model, &stats)?
            .into_iter()
            .map(|v| v.iter().copied().collect())
            .collect()
    } else {
        return Err(CliError::Usage("embed needs --model or --tv with --ubm".into()));
    };
    let recs: Vec<EmbeddingRecord> = m
        .records
        .iter()
        .zip(vectors)
        .map(|(r, vector)| EmbeddingRecord { utterance_id: r.utterance_id.clone(), vector })
        .collect();
    write_embeddings(&ctx.out_path()?, &recs)
}

fn split(ctx: &Ctx, manifest: &Path, protocol: &str) -> Res<()> {
    let (m, _) = ctx.manifest(manifest)?;
    let (dev, test) = match protocol {
        "identification" => corpus::identification_split(&m)?,
        "verification" => corpus::verification_split(&m)?,
        other => return Err(bad_choice("protocol", other, "identification or verification")),
    };
    let dir = ctx.out_path()?;
    fs::create_dir_all(&dir)?;
    dev.save(&dir.join("dev.jsonl"))?;
    test.save(&dir.join("test.jsonl"))?;
    println!("dev={} test={}", dev.len(), test.len());
    Ok(())
}

fn trials(ctx: &Ctx, manifest: &Path) -> Res<()> {
    let (m, _) = ctx.manifest(manifest)?;
    let list = eval::build_trials(&m, ctx.cfg.get("trials_pos")?, ctx.cfg.get("trials_neg")?, ctx.seed()?)?;
    let mut buf = Vec::new();
    eval::write_trials(&mut buf, &list)?;
    ctx.emit(&String::from_utf8_lossy(&buf))
}

fn lookup<'a>(map: &'a BTreeMap<String, Vec<f64>>, id: &str) -> Res<&'a Vec<f64>> {
    map.get(id)
        .ok_or_else(|| CliError::Data(voxkit::Error::InvalidInput(format!("no vector for {id}"))))
}

fn score(ctx: &Ctx, a: &crate::ScoreArgs) -> Res<()> {
    let list = eval::read_trials(open(&ctx.path(&a.trials))?)?;
    let backend: String = ctx.cfg.get("backend")?;
    let need = |p: &Option<PathBuf>, flag: &str| {
        p.as_deref()
            .map(|p| ctx.path(p))
            .ok_or_else(|| CliError::Usage(format!("the {backend} backend needs --{flag}")))
    };
    let scores: Vec<f64> = match backend.as_str() {
        "cosine" => {
            let map = read_embeddings(&need(&a.embeddings, "embeddings")?)?;
            list.iter()
                .map(|t| Ok(neural::cosine_similarity(lookup(&map, &t.enroll)?, lookup(&map, &t.test)?)))
                .collect::<Res<_>>()?
        }
        "plda" => {
            let map = read_embeddings(&need(&a.embeddings, "embeddings")?)?;
            let model = PldaModel::read(&mut open(&need(&a.plda, "plda")?)?)?;
            list.iter()
                .map(|t| {
                    let e = DVector::from_column_slice(lookup(&map, &t.enroll)?);
                    let s = DVector::from_column_slice(lookup(&map, &t.test)?);
                    Ok(ivector::plda_score(&model, &e, &s)?)
                })
                .collect::<Res<_>>()?
        }
        "gmm" => {
            let ubm = read_gmm(&need(&a.ubm, "ubm")?)?;
            let dir = need(&a.feature_dir, "feature-dir")?;
            let relevance: f64 = ctx.cfg.get("map_relevance")?;
            let load = |id: &str| audio::load_features(&feature_file(&dir, id));
            let mut speakers: BTreeMap<&str, DiagonalGmm> = BTreeMap::new();
            for t in &list {
                if !speakers.contains_key(t.enroll.as_str()) {
                    let adapted = gmm::map_adapt(&ubm, load(&t.enroll)?.view(), relevance)?;
                    speakers.insert(&t.enroll, adapted);
                }
            }
            list.par_iter()
                .map(|t| Ok(gmm::gmm_ubm_score(&ubm, &speakers[t.enroll.as_str()], load(&t.test)?.view())?))
                .collect::<Res<_>>()?
        }
        other => return Err(bad_choice("backend", other, "cosine, plda or gmm")),
    };
    let scored: Vec<ScoredTrial> = list
        .into_iter()
        .zip(scores)
        .map(|(trial, score)| ScoredTrial { trial, score })
        .collect();
    let mut buf = Vec::new();
    eval::write_scores(&mut buf, &scored)?;
    ctx.emit(&String::from_utf8_lossy(&buf))
}

fn eval_id(ctx: &Ctx, a: &crate::EvalIdArgs) -> Res<()> {
    let (m, _) = ctx.manifest(&a.manifest)?;
    let top_k: usize = ctx.cfg.get("top_k")?;
    let (rows, labels): (Vec<Vec<f64>>, Vec<usize>) = if let Some(model) = &a.model {
        let model = ctx.path(model);
        let net = Network::load(&model)?;
        let classes = read_classes(&model, &m)?;
        let dir = a
            .feature_dir
            .as_deref()
            .ok_or_else(|| CliError::Usage("a CNN model needs --feature-dir".into()))?;
        let specs = load_spectrograms(&ctx.path(dir), &m)?;
        let inference: String = ctx.cfg.get("inference")?;
        let rows = specs
            .par_iter()
            .map(|s| match inference.as_str() {
                "avgpool" => Ok(neural::infer_identity(&net, s)?),
                "segments" => Ok(neural::infer_segments_avg(&net, s)?),
                other => Err(bad_choice("inference", other, "avgpool or segments")),
            })
            .collect::<Res<_>>()?;
        (rows, labels_in(&m, &classes)?)
    } else if let (Some(svm), Some(emb)) = (&a.svm, &a.embeddings) {
        let svm_path = ctx.path(svm);
        let model = LinearSvm::read(&mut open(&svm_path)?)?;
        let classes = read_classes(&svm_path, &m)?;
        let x = vectors_for(&m, &read_embeddings(&ctx.path(emb))?)?;
        let rows = x
            .into_iter()
            .map(|v| Ok(model.scores(&unit(v))?.iter().copied().collect()))
            .collect::<Res<_>>()?;
        (rows, labels_in(&m, &classes)?)
    } else {
        return Err(CliError::Usage("eval-id needs --model or --svm with --embeddings".into()));
    };
    let k = top_k.min(rows.first().map_or(1, Vec::len)).max(1);
    let top1 = eval::top_k_accuracy(&rows, &labels, 1)?;
    let topk = eval::top_k_accuracy(&rows, &labels, k)?;
    ctx.emit(&format!("utterances={}\ntop1={top1:.6}\ntop{k}={topk:.6}\n", rows.len()))
}

fn eval_ver(ctx: &Ctx, scores: &Path) -> Res<()> {
    let scored = eval::read_scores(open(&ctx.path(scores))?)?;
    let params = DcfParams {
        c_miss: ctx.cfg.get("c_miss")?,
        c_fa: ctx.cfg.get("c_fa")?,
        p_tar: ctx.cfg.get("p_tar")?,
    };
    let report = eval::verification_report(&eval::to_score_set(&scored), &params)?;
    ctx.emit(&report)
}

fn curate(ctx: &mut Ctx, listing: &Path) -> Res<()> {
    let c = &ctx.cfg;
    let cfg = CurationConfig {
        shot_threshold: c.get("shot_threshold")?,
        iou_min: c.get("iou_min")?,
        gap_max: c.get("gap_max")?,
        sync_window: c.get("sync_window")?,
        sync_threshold: c.get("sync_threshold")?,
        identity_threshold: c.get("identity_threshold")?,
        require_landmarks: c.get("require_landmarks")?,
    };
    let listing = ctx.path(listing);
    let base = listing.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut inputs = Vec::new();
    for line in open(&listing)?.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let meta: StreamMeta = serde_json::from_str(&line)?;
        let frames = base.join(&meta.frames_path);
        match open(&frames).and_then(|r| Ok(FrameStream::read_jsonl(r)?)) {
            Ok(stream) => inputs.push(StreamInput { meta, stream }),
            Err(e) => log::warn!("skipping stream {}: {e}", meta.video_id),
        }
    }
    let outcome = curation::curate(&inputs, &cfg);
    let mut text = String::new();
    for u in &outcome.utterances {
        text.push_str(&serde_json::to_string(u)?);
        text.push('\n');
    }
    log::info!("{} utterances, {} streams skipped", outcome.utterances.len(), outcome.failed.len());
    ctx.emit(&text)
}
