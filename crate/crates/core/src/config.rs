//! Experiment configuration: `synth`, `model`, `train` and `eval` sections,
//! read from TOML (key = value under section headers) or JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::{LayerMode, ProbeConfig, ProbeSource, ProbeTarget};
use crate::losses::PseudoConConfig;
use crate::miclub::{MiMode, TimeReduction};
use crate::optim::{AdamConfig, LrSchedule};
use crate::synth::SynthConfig;

/// Learning-rate shape whose step counts follow the stage length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSpec {
    pub init: f64,
    pub peak: f64,
    pub floor: f64,
    /// Fraction of the stage spent warming up.
    pub warmup_frac: f64,
}

impl Default for LrSpec {
    fn default() -> Self {
        LrSpec::constant(1e-3)
    }
}

impl LrSpec {
    pub fn constant(lr: f64) -> Self {
        LrSpec {
            init: lr,
            peak: lr,
            floor: lr,
            warmup_frac: 0.0,
        }
    }

    pub fn warmup_decay(init: f64, peak: f64, floor: f64, warmup_frac: f64) -> Self {
        LrSpec {
            init,
            peak,
            floor,
            warmup_frac,
        }
    }

    pub fn schedule(&self, total_steps: u64) -> LrSchedule {
        let warmup = (self.warmup_frac * total_steps as f64).round() as u64;
        LrSchedule::warmup_decay(self.init, self.peak, self.floor, warmup, total_steps)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "{name}.warmup_frac {} outside [0, 1]",
                self.warmup_frac
            )));
        }
        self.schedule(1).validate()
    }
}

/// How many utterance-level targets `Q` to cluster into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UttTargets {
    Fixed(usize),
    /// Knee point of the inertia-vs-Q sweep.
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    /// `false` trains with `lambda = 0`.
    pub disentangle: bool,
    pub mi_mode: MiMode,
    pub mi_reduction: TimeReduction,
    pub steps_stage1_frame: u64,
    pub steps_stage1_utt: u64,
    pub steps_stage2: u64,
    /// Utterances per micro-batch.
    pub batch: usize,
    pub grad_accum: usize,
    pub lr_stage1_frame: LrSpec,
    pub lr_stage1_utt: LrSpec,
    pub lr_frame: LrSpec,
    pub lr_utt: LrSpec,
    pub lr_var: LrSpec,
    /// Aggregation projections; `None` follows `lr_utt`.
    pub lr_proj: Option<LrSpec>,
    pub adam: AdamConfig,
    pub pseudo_con: PseudoConConfig,
    pub tau_utt: f64,
    pub utt_targets: UttTargets,
    pub q_sweep: Vec<usize>,
    /// 1-based frame-encoder layer clustered into frame targets; `None`
    /// picks the middle layer.
    pub layer_for_targets: Option<usize>,
    pub kmeans_iters: usize,
    /// Frames subsampled for fitting frame-target centroids.
    pub kmeans_max_points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1e-3,
            disentangle: true,
            mi_mode: MiMode::Aggregated,
            mi_reduction: TimeReduction::Mean,
            steps_stage1_frame: 2000,
            steps_stage1_utt: 2000,
            steps_stage2: 4000,
            batch: 8,
            grad_accum: 4,
            lr_stage1_frame: LrSpec::warmup_decay(1e-4, 1e-3, 1e-5, 0.1),
            lr_stage1_utt: LrSpec::constant(1e-3),
            lr_frame: LrSpec::warmup_decay(1e-6, 1e-4, 1e-6, 0.1),
            lr_utt: LrSpec::constant(1e-3),
            lr_var: LrSpec::constant(1e-6),
            lr_proj: None,
            adam: AdamConfig::default(),
            pseudo_con: PseudoConConfig::default(),
            tau_utt: 1.0,
            utt_targets: UttTargets::Fixed(40),
            q_sweep: vec![5, 10, 15, 20, 25, 30, 40, 50, 60, 80],
            layer_for_targets: None,
            kmeans_iters: 50,
            kmeans_max_points: 20_000,
        }
    }
}

impl TrainConfig {
    /// Step budget of 100k joint updates.
    pub fn base_preset() -> Self {
        TrainConfig {
            steps_stage1_frame: 100_000,
            steps_stage1_utt: 100_000,
            steps_stage2: 100_000,
            utt_targets: UttTargets::Fixed(2000),
            ..TrainConfig::default()
        }
    }

    /// The MI weight actually applied.
    pub fn effective_lambda(&self) -> f64 {
        if self.disentangle {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn proj_lr(&self) -> LrSpec {
        self.lr_proj.unwrap_or(self.lr_utt)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be finite and >= 0", self.lambda));
        }
        if self.batch < 2 {
            return bad(format!("batch {} < 2", self.batch));
        }
        if self.grad_accum == 0 {
            return bad("grad_accum must be positive".into());
        }
        if !(self.tau_utt > 0.0 && self.tau_utt.is_finite()) {
            return bad(format!("tau_utt {} must be > 0", self.tau_utt));
        }
        if !(self.pseudo_con.tau > 0.0 && self.pseudo_con.tau.is_finite()) {
            return bad(format!("pseudo_con.tau {} must be > 0", self.pseudo_con.tau));
        }
        if let UttTargets::Fixed(q) = self.utt_targets {
            if q < 2 {
                return bad(format!("utt_targets {q} < 2"));
            }
        }
        if self.utt_targets == UttTargets::Auto && self.q_sweep.len() < 3 {
            return bad("q_sweep needs at least 3 candidates".into());
        }
        if self.kmeans_iters == 0 || self.kmeans_max_points == 0 {
            return bad("kmeans_iters and kmeans_max_points must be positive".into());
        }
        for (name, s) in [
            ("lr_stage1_frame", self.lr_stage1_frame),
            ("lr_stage1_utt", self.lr_stage1_utt),
            ("lr_frame", self.lr_frame),
            ("lr_utt", self.lr_utt),
            ("lr_var", self.lr_var),
            ("lr_proj", self.proj_lr()),
        ] {
            s.validate(name)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub layer_mode: LayerMode,
    pub epochs: usize,
    pub lr: Option<f64>,
    pub momentum: f64,
    pub max_frames: usize,
    pub test_fraction: f64,
    /// Triplets per ABX condition.
    pub abx_triplets: usize,
    /// Clusters for utterance purity; `None` uses the speaker count.
    pub purity_clusters: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let p = ProbeConfig::default();
        EvalConfig {
            layer_mode: p.layer_mode,
            epochs: p.epochs,
            lr: p.lr,
            momentum: p.momentum,
            max_frames: p.max_frames,
            test_fraction: p.test_fraction,
            abx_triplets: 200,
            purity_clusters: None,
        }
    }
}

impl EvalConfig {
    pub fn probe(&self, target: ProbeTarget, source: ProbeSource) -> ProbeConfig {
        ProbeConfig {
            target,
            source,
            layer_mode: self.layer_mode,
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            max_frames: self.max_frames,
            test_fraction: self.test_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction {} outside (0, 1)",
                self.test_fraction
            )));
        }
        if self.epochs == 0 || self.max_frames == 0 {
            return Err(Error::Config("epochs and max_frames must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Parses JSON when the text starts with `{`, TOML otherwise.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("json: {e}")))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(format!("toml: {}", e.message())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.synth.min_frames < 2 * self.model.seg_len {
            return Err(Error::Config(format!(
                "min_frames {} cannot hold two segments of {}",
                self.synth.min_frames, self.model.seg_len
            )));
        }
        Ok(())
    }

    /// Sorted-key JSON of every resolved field.
    pub fn canonical_json(&self) -> String {
        // serde_json maps are BTreeMap-backed, so keys come out sorted
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("value serializes")
    }

    /// Hex SHA-256 of [`canonical_json`](Self::canonical_json).
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("toml: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
        assert_eq!(ExperimentConfig::parse("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            "[train]\nlamda = 0.1\n",
            "[nonsense]\nx = 1\n",
            "{\"model\": {\"depth\": 3}}",
        ] {
            assert!(matches!(ExperimentConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn hash_ignores_key_order_and_format() {
        let a = "[train]\nlambda = 0.01\nbatch = 4\n[synth]\nnum_speakers = 10\n";
        let b = "[synth]\nnum_speakers = 10\n\n[train]\nbatch = 4\nlambda = 0.01\n";
        let c = r#"{"train": {"batch": 4, "lambda": 0.01}, "synth": {"num_speakers": 10}}"#;
        let h = ExperimentConfig::parse(a).unwrap().config_hash();
        assert_eq!(h, ExperimentConfig::parse(b).unwrap().config_hash());
        assert_eq!(h, ExperimentConfig::parse(c).unwrap().config_hash());
        assert_ne!(h, ExperimentConfig::default().config_hash());
        assert_eq!(h.len(), 64);
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.utt_targets = UttTargets::Auto;
        cfg.train.mi_mode = MiMode::FinalOnly;
        cfg.eval.layer_mode = LayerMode::Single(2);
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::parse("[train]\nlambda = -1.0\n").is_err());
        assert!(ExperimentConfig::parse("[train]\nbatch = 1\n").is_err());
        assert!(ExperimentConfig::parse("[model]\nseg_len = 80\n").is_err());
    }

    #[test]
    fn base_learning_rates() {
        let t = TrainConfig::default();
        let s = t.lr_frame.schedule(100_000);
        assert_eq!(s.lr_at(0), 1e-6);
        assert!((s.lr_at(10_000) - 1e-4).abs() < 1e-18);
        assert!((s.lr_at(100_000) - 1e-6).abs() < 1e-18);
        assert_eq!(t.lr_utt.schedule(10).lr_at(3), 1e-3);
        assert_eq!(t.lr_var.schedule(10).lr_at(3), 1e-6);
        assert_eq!(t.lambda, 1e-3);
        assert_eq!(t.grad_accum, 4);
        assert_eq!(t.effective_lambda(), 1e-3);
        let off = TrainConfig {
            disentangle: false,
            ..t
        };
        assert_eq!(off.effective_lambda(), 0.0);
    }
}
