use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Every recognised key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "42", "seed of every stochastic stage"),
    ("threads", "0", "worker threads, 0 for one per core"),
    ("speakers", "10", "synthetic speakers"),
    ("videos_per_speaker", "4", "synthetic videos per speaker"),
    ("utterances_per_video", "5", "synthetic utterances per video"),
    ("min_duration_s", "3", "shortest synthetic utterance"),
    ("max_duration_s", "8", "longest synthetic utterance"),
    ("features", "spectrogram", "feature kind: spectrogram or mfcc"),
    ("ubm_components", "1024", "UBM mixture components"),
    ("ubm_iters", "10", "UBM EM iterations"),
    ("ubm_init_subsample", "100000", "frames drawn for k-means++ seeding"),
    ("map_relevance", "16", "MAP relevance factor"),
    ("tv_rank", "400", "i-vector dimension"),
    ("tv_iters", "10", "total variability EM iterations"),
    ("plda_dim", "200", "discriminant dimension kept before PLDA"),
    ("plda_iters", "10", "two-covariance EM iterations"),
    ("svm_c_grid", "0.01,0.1,1,10,100", "SVM C values tried on validation data"),
    ("cnn_size", "full", "network width: full or compact"),
    ("objective", "softmax", "softmax classification or contrastive embedding"),
    ("epochs", "30", "classification epochs"),
    ("batch_size", "16", "classification minibatch"),
    ("lr", "0.01", "initial learning rate"),
    ("momentum", "0.9", "SGD momentum"),
    ("weight_decay", "0.0005", "L2 penalty on filter weights"),
    ("lr_decay", "0.1", "learning rate multiplier on plateau"),
    ("patience", "2", "stale epochs before a decay"),
    ("embed_dim", "1024", "embedding width"),
    ("siamese_epochs", "10", "contrastive epochs"),
    ("siamese_steps", "20", "contrastive steps per epoch"),
    ("batch_pairs", "64", "pairs per contrastive step"),
    ("margin", "1", "contrastive margin"),
    ("crops_per_utt", "4", "cached crops per utterance for contrastive training"),
    ("embedding", "embedding", "what embed extracts from a network: embedding or fc7"),
    ("trials_pos", "10", "target trials per test speaker"),
    ("trials_neg", "10", "non-target trials per test speaker"),
    ("backend", "cosine", "scoring backend: cosine, plda or gmm"),
    ("inference", "avgpool", "identification inference: avgpool or segments"),
    ("top_k", "5", "second accuracy cut-off reported by eval-id"),
    ("p_tar", "0.01", "target prior of the detection cost"),
    ("c_miss", "1", "miss cost"),
    ("c_fa", "1", "false-alarm cost"),
    ("shot_threshold", "0.5", "L1 histogram distance marking a cut"),
    ("iou_min", "0.5", "IOU needed to extend a face track"),
    ("gap_max", "10", "missing frames bridged inside a track"),
    ("sync_window", "25", "frames per synchrony window"),
    ("sync_threshold", "0.5", "synchrony score threshold"),
    ("identity_threshold", "0.9", "face identity score threshold"),
    ("require_landmarks", "true", "drop detections with failed landmarks"),
];

/// Resolved `key=value` settings.
#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

impl RunConfig {
    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !known(key) {
            return Err(CliError::Usage(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a command-line override when present.
    pub fn apply<T: ToString>(&mut self, key: &str, flag: &Option<T>) -> Result<(), CliError> {
        match flag {
            Some(v) => self.set(key, &v.to_string()),
            None => Ok(()),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self
            .values
            .get(key)
            .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?}")))?;
        raw.parse()
            .map_err(|_| CliError::Usage(format!("bad value {raw:?} for {key}")))
    }

    pub fn get_list(&self, key: &str) -> Result<Vec<f64>, CliError> {
        let raw: String = self.get(key)?;
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad list entry {s:?} for {key}")))
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }
}

/// Key listing appended to the top-level help.
pub fn keys_help() -> String {
    let mut out = String::from("Config keys (file lines `key=value`, flags take precedence):\n");
    for (k, v, doc) in KEYS {
        writeln!(out, "  {k:<22} {doc} [default: {v}]").unwrap();
    }
    out
}
