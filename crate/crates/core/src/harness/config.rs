use serde::{Deserialize, Serialize};

use crate::align::AlignConfig;
use crate::data::{config_hash, AugMode, CorpusConfig};
use crate::error::{GilaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub gi_layers: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    /// Decoder position table length, counting `sos`.
    pub max_target_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            d_ff: 256,
            gi_layers: 3,
            enc_layers: 2,
            dec_layers: 2,
            dropout: 0.1,
            max_target_len: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub use_gi_cross_attn: bool,
    pub use_ir: bool,
    pub use_wl: bool,
    pub use_cl: bool,
    pub use_data_aug: bool,
    pub use_posenc: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::gila()
    }
}

impl Ablation {
    /// Concatenation fusion with no cross-modal interaction and no
    /// alignment losses.
    pub fn baseline() -> Self {
        Self {
            use_gi_cross_attn: false,
            use_ir: false,
            use_wl: false,
            use_cl: false,
            use_data_aug: false,
            use_posenc: true,
        }
    }

    pub fn gi() -> Self {
        Self {
            use_gi_cross_attn: true,
            use_ir: true,
            ..Self::baseline()
        }
    }

    pub fn gila() -> Self {
        Self {
            use_wl: true,
            use_cl: true,
            ..Self::gi()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "baseline" => Ok(Self::baseline()),
            "gi" => Ok(Self::gi()),
            "gila" => Ok(Self::gila()),
            other => Err(GilaError::config(format!("unknown ablation preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    /// Steps between validation passes; 0 validates only at the end.
    pub eval_every: u64,
    /// Training aborts once the batch loss exceeds this.
    pub divergence_threshold: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 300,
            total_steps: 3000,
            batch_size: 8,
            eval_every: 250,
            divergence_threshold: 1e4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    pub p_noise: f64,
    pub snr_db: f64,
    /// Weight of the clean flow when both flows are trained.
    pub lambda_c: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            p_noise: 0.25,
            snr_db: 0.0,
            lambda_c: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub align: AlignConfig,
    pub corpus: CorpusConfig,
    pub ablation: Ablation,
    pub optim: OptimConfig,
    pub aug: AugConfig,
    /// Beam width for decoding; 1 is greedy.
    pub beam_width: usize,
    pub length_penalty: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::default(),
            model: ModelConfig::default(),
            align: AlignConfig::default(),
            corpus: CorpusConfig::default(),
            ablation: Ablation::default(),
            optim: OptimConfig::default(),
            aug: AugConfig::default(),
            beam_width: 1,
            length_penalty: 1.0,
        }
    }
}

pub const SEED_ENV: &str = "GILA_SEED";

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| GilaError::config(format!("bad run config: {e}")))
    }

    /// Applies `GILA_SEED` if set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| GilaError::config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    pub fn aug_mode(&self) -> AugMode {
        if self.ablation.use_data_aug {
            AugMode::DataAug
        } else if self.aug.p_noise > 0.0 {
            AugMode::NoiseAug
        } else {
            AugMode::None
        }
    }

    /// Alignment settings after the ablation flags zero out disabled terms.
    pub fn effective_align(&self) -> AlignConfig {
        let mut a = self.align.clone();
        if !self.ablation.use_wl {
            a.within.iter_mut().for_each(|w| w.weight = 0.0);
        }
        if !self.ablation.use_cl {
            a.cross.iter_mut().for_each(|p| p.weight = 0.0);
        }
        a
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d == 0 || m.heads == 0 || m.d % m.heads != 0 {
            return Err(GilaError::config(format!(
                "model dim {} must be a positive multiple of heads {}",
                m.d, m.heads
            )));
        }
        if m.gi_layers == 0 || m.d_ff == 0 {
            return Err(GilaError::config("gi_layers and d_ff must be positive"));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(GilaError::config("dropout must be in [0, 1)"));
        }
        if m.max_target_len <= self.corpus.max_len {
            return Err(GilaError::config(format!(
                "max_target_len {} must exceed the longest utterance ({} words)",
                m.max_target_len, self.corpus.max_len
            )));
        }
        self.corpus.validate()?;
        self.align.validate(m.gi_layers, m.d)?;
        let o = &self.optim;
        if o.batch_size == 0 {
            return Err(GilaError::config("batch_size must be positive"));
        }
        if o.total_steps > 0 && o.total_steps <= o.warmup_steps {
            return Err(GilaError::config("total_steps must exceed warmup_steps"));
        }
        if !(o.peak_lr > 0.0) {
            return Err(GilaError::config("peak_lr must be positive"));
        }
        let a = &self.aug;
        if !(0.0..=1.0).contains(&a.p_noise) || !(0.0..=1.0).contains(&a.lambda_c) || !a.snr_db.is_finite() {
            return Err(GilaError::config("augmentation settings out of range"));
        }
        if self.corpus.train_size == 0 {
            return Err(GilaError::config("training split is empty"));
        }
        if self.beam_width == 0 {
            return Err(GilaError::config("beam_width must be at least 1"));
        }
        Ok(())
    }
}
