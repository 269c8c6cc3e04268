//! Plain-text `key = value` run configuration.
//!
//! One file drives every CLI command. Lines are `key = value`; blank lines
//! and `#` comments are ignored; unknown keys and malformed lines are
//! rejected with their line number. Every run re-serializes the resolved
//! configuration next to its outputs so results stay reproducible from the
//! artifacts alone.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ebc::ScanKind;
use crate::geometry::BevGrid;
use crate::nn::{ModelConfig, NnError, OsaStageConfig, ParamStore};
use crate::scene::{Dataset, Modality, SceneError, Split};
use crate::train::{LossWeighting, TrainConfig, UncertaintyWeights};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: bad value `{value}` for `{key}`: {msg}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        msg: String,
    },
    #[error("config: {msg}")]
    Invalid { msg: String },
    #[error("environment variable {var}: bad value `{value}`")]
    BadEnv { var: String, value: String },
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Every tunable of a run: data, model widths, ablation switches, optimizer.
/// Defaults describe the desk-scale camera-only reference run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Directory that receives checkpoints, logs, reports and exports.
    pub out_dir: PathBuf,
    /// Parameter-initialization seed (data splits use fixed per-split seeds).
    pub seed: u64,
    pub modality: Modality,

    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Samples written by `export`, taken from the head of the val split.
    pub export_scenes: usize,
    pub vehicles_min: usize,
    pub vehicles_max: usize,

    pub grid_nx: usize,
    pub grid_nz: usize,
    pub grid_ny: usize,
    pub img_h: usize,
    pub img_w: usize,

    pub stem_width: usize,
    pub stage1_width: usize,
    pub stage2_width: usize,
    pub stage3_width: usize,
    pub stage_layers: usize,
    pub stage_blocks: usize,
    pub d_feat: usize,
    pub d_model: usize,
    pub n_state: usize,
    pub dec_width: usize,
    pub head_width: usize,
    pub attn_dim: usize,
    pub pos_dim: usize,

    pub use_ebc: bool,
    pub scan_forward: bool,
    pub scan_forward_surround: bool,
    pub scan_backward_surround: bool,
    pub enhance_pv: bool,
    pub enhance_bev: bool,
    /// Learned log-variance weighting; `false` sums the three losses.
    pub uncertainty_weighting: bool,

    pub lr: f64,
    pub steps: usize,
    pub accum: usize,
    pub batch: usize,
    pub weight_decay: f64,
    pub log_every: usize,
    pub ckpt_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            seed: 0,
            modality: Modality::Camera,
            train_scenes: 2000,
            val_scenes: 200,
            export_scenes: 4,
            vehicles_min: 2,
            vehicles_max: 8,
            grid_nx: 96,
            grid_nz: 96,
            grid_ny: 4,
            img_h: 64,
            img_w: 112,
            stem_width: 16,
            stage1_width: 32,
            stage2_width: 64,
            stage3_width: 96,
            stage_layers: 2,
            stage_blocks: 1,
            d_feat: 32,
            d_model: 32,
            n_state: 8,
            dec_width: 32,
            head_width: 16,
            attn_dim: 16,
            pos_dim: 8,
            use_ebc: true,
            scan_forward: true,
            scan_forward_surround: true,
            scan_backward_surround: true,
            enhance_pv: true,
            enhance_bev: true,
            uncertainty_weighting: true,
            lr: 1e-3,
            steps: 2000,
            accum: 5,
            batch: 1,
            weight_decay: 0.01,
            log_every: 50,
            ckpt_every: 0,
        }
    }
}

fn parse_as<T: FromStr>(line: usize, key: &str, value: &str, msg: &str) -> Result<T> {
    value.parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.to_owned(),
        value: value.to_owned(),
        msg: msg.to_owned(),
    })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::BadValue {
            line,
            key: key.to_owned(),
            value: value.to_owned(),
            msg: "expected `true` or `false`".to_owned(),
        }),
    }
}

impl RunConfig {
    /// Parses a config body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line,
                    text: trimmed.to_owned(),
                });
            };
            let key = key.trim();
            let value = value.trim();
            cfg.set(line, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        const USIZE: &str = "expected a non-negative integer";
        const U64: &str = "expected a non-negative integer";
        const F64: &str = "expected a number";
        match key {
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = parse_as::<u64>(line, key, value, U64)?,
            "modality" => {
                self.modality =
                    value
                        .parse::<Modality>()
                        .map_err(|_| ConfigError::BadValue {
                            line,
                            key: key.to_owned(),
                            value: value.to_owned(),
                            msg: "expected camera | camera+radar | camera+lidar".to_owned(),
                        })?
            }
            "train_scenes" => self.train_scenes = parse_as(line, key, value, USIZE)?,
            "val_scenes" => self.val_scenes = parse_as(line, key, value, USIZE)?,
            "export_scenes" => self.export_scenes = parse_as(line, key, value, USIZE)?,
            "vehicles_min" => self.vehicles_min = parse_as(line, key, value, USIZE)?,
            "vehicles_max" => self.vehicles_max = parse_as(line, key, value, USIZE)?,
            "grid_nx" => self.grid_nx = parse_as(line, key, value, USIZE)?,
            "grid_nz" => self.grid_nz = parse_as(line, key, value, USIZE)?,
            "grid_ny" => self.grid_ny = parse_as(line, key, value, USIZE)?,
            "img_h" => self.img_h = parse_as(line, key, value, USIZE)?,
            "img_w" => self.img_w = parse_as(line, key, value, USIZE)?,
            "stem_width" => self.stem_width = parse_as(line, key, value, USIZE)?,
            "stage1_width" => self.stage1_width = parse_as(line, key, value, USIZE)?,
            "stage2_width" => self.stage2_width = parse_as(line, key, value, USIZE)?,
            "stage3_width" => self.stage3_width = parse_as(line, key, value, USIZE)?,
            "stage_layers" => self.stage_layers = parse_as(line, key, value, USIZE)?,
            "stage_blocks" => self.stage_blocks = parse_as(line, key, value, USIZE)?,
            "d_feat" => self.d_feat = parse_as(line, key, value, USIZE)?,
            "d_model" => self.d_model = parse_as(line, key, value, USIZE)?,
            "n_state" => self.n_state = parse_as(line, key, value, USIZE)?,
            "dec_width" => self.dec_width = parse_as(line, key, value, USIZE)?,
            "head_width" => self.head_width = parse_as(line, key, value, USIZE)?,
            "attn_dim" => self.attn_dim = parse_as(line, key, value, USIZE)?,
            "pos_dim" => self.pos_dim = parse_as(line, key, value, USIZE)?,
            "use_ebc" => self.use_ebc = parse_bool(line, key, value)?,
            "scan_forward" => self.scan_forward = parse_bool(line, key, value)?,
            "scan_forward_surround" => self.scan_forward_surround = parse_bool(line, key, value)?,
            "scan_backward_surround" => {
                self.scan_backward_surround = parse_bool(line, key, value)?
            }
            "enhance_pv" => self.enhance_pv = parse_bool(line, key, value)?,
            "enhance_bev" => self.enhance_bev = parse_bool(line, key, value)?,
            "uncertainty_weighting" => {
                self.uncertainty_weighting = parse_bool(line, key, value)?
            }
            "lr" => self.lr = parse_as(line, key, value, F64)?,
            "steps" => self.steps = parse_as(line, key, value, USIZE)?,
            "accum" => self.accum = parse_as(line, key, value, USIZE)?,
            "batch" => self.batch = parse_as(line, key, value, USIZE)?,
            "weight_decay" => self.weight_decay = parse_as(line, key, value, F64)?,
            "log_every" => self.log_every = parse_as(line, key, value, USIZE)?,
            "ckpt_every" => self.ckpt_every = parse_as(line, key, value, USIZE)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_owned(),
                })
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ConfigError::Invalid { msg });
        if self.vehicles_min > self.vehicles_max {
            return fail(format!(
                "vehicles_min {} exceeds vehicles_max {}",
                self.vehicles_min, self.vehicles_max
            ));
        }
        for (name, v) in [
            ("train_scenes", self.train_scenes),
            ("val_scenes", self.val_scenes),
            ("grid_nx", self.grid_nx),
            ("grid_nz", self.grid_nz),
            ("grid_ny", self.grid_ny),
            ("img_h", self.img_h),
            ("img_w", self.img_w),
            ("steps", self.steps),
            ("accum", self.accum),
            ("batch", self.batch),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.use_ebc
            && !(self.scan_forward || self.scan_forward_surround || self.scan_backward_surround)
        {
            return fail("use_ebc = true requires at least one scan branch".to_owned());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        Ok(())
    }

    /// Applies `BEVSCAN_SEED` over the file's seed, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        const VAR: &str = "BEVSCAN_SEED";
        match std::env::var(VAR) {
            Ok(raw) => {
                self.seed = raw.parse().map_err(|_| ConfigError::BadEnv {
                    var: VAR.to_owned(),
                    value: raw.clone(),
                })?;
                Ok(())
            }
            Err(_) => Ok(()),
        }
    }

    /// Serializes every key; `parse` of the result reproduces `self`.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("out_dir", self.out_dir.display().to_string());
        kv("seed", self.seed.to_string());
        kv("modality", self.modality.to_string());
        kv("train_scenes", self.train_scenes.to_string());
        kv("val_scenes", self.val_scenes.to_string());
        kv("export_scenes", self.export_scenes.to_string());
        kv("vehicles_min", self.vehicles_min.to_string());
        kv("vehicles_max", self.vehicles_max.to_string());
        kv("grid_nx", self.grid_nx.to_string());
        kv("grid_nz", self.grid_nz.to_string());
        kv("grid_ny", self.grid_ny.to_string());
        kv("img_h", self.img_h.to_string());
        kv("img_w", self.img_w.to_string());
        kv("stem_width", self.stem_width.to_string());
        kv("stage1_width", self.stage1_width.to_string());
        kv("stage2_width", self.stage2_width.to_string());
        kv("stage3_width", self.stage3_width.to_string());
        kv("stage_layers", self.stage_layers.to_string());
        kv("stage_blocks", self.stage_blocks.to_string());
        kv("d_feat", self.d_feat.to_string());
        kv("d_model", self.d_model.to_string());
        kv("n_state", self.n_state.to_string());
        kv("dec_width", self.dec_width.to_string());
        kv("head_width", self.head_width.to_string());
        kv("attn_dim", self.attn_dim.to_string());
        kv("pos_dim", self.pos_dim.to_string());
        kv("use_ebc", self.use_ebc.to_string());
        kv("scan_forward", self.scan_forward.to_string());
        kv("scan_forward_surround", self.scan_forward_surround.to_string());
        kv(
            "scan_backward_surround",
            self.scan_backward_surround.to_string(),
        );
        kv("enhance_pv", self.enhance_pv.to_string());
        kv("enhance_bev", self.enhance_bev.to_string());
        kv(
            "uncertainty_weighting",
            self.uncertainty_weighting.to_string(),
        );
        kv("lr", self.lr.to_string());
        kv("steps", self.steps.to_string());
        kv("accum", self.accum.to_string());
        kv("batch", self.batch.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("log_every", self.log_every.to_string());
        kv("ckpt_every", self.ckpt_every.to_string());
        s
    }

    /// BEV grid over the fixed ±50 m × ±5 m extent at the configured
    /// resolution.
    pub fn grid(&self) -> BevGrid {
        BevGrid {
            nx: self.grid_nx,
            nz: self.grid_nz,
            ny: self.grid_ny,
            ..BevGrid::default()
        }
    }

    /// Enabled scan branches in canonical order.
    pub fn scan_kinds(&self) -> Vec<ScanKind> {
        let mut kinds = Vec::new();
        if self.scan_forward {
            kinds.push(ScanKind::Forward);
        }
        if self.scan_forward_surround {
            kinds.push(ScanKind::ForwardSurround);
        }
        if self.scan_backward_surround {
            kinds.push(ScanKind::BackwardSurround);
        }
        kinds
    }

    pub fn model_config(&self) -> ModelConfig {
        let stage = |w: usize| OsaStageConfig {
            out_width: w,
            layer_width: w,
            layers: self.stage_layers,
            blocks: self.stage_blocks,
        };
        ModelConfig {
            grid: self.grid(),
            img_h: self.img_h,
            img_w: self.img_w,
            stem_width: self.stem_width,
            stages: [
                stage(self.stage1_width),
                stage(self.stage2_width),
                stage(self.stage3_width),
            ],
            d_feat: self.d_feat,
            d_model: self.d_model,
            n_state: self.n_state,
            raster_channels: self.modality.raster_channels(),
            dec_width: self.dec_width,
            head_width: self.head_width,
            attn_dim: self.attn_dim,
            pos_dim: self.pos_dim,
            use_ebc: self.use_ebc,
            scan_kinds: self.scan_kinds(),
            enhance_pv: self.enhance_pv,
            enhance_bev: self.enhance_bev,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr_max: self.lr,
            weight_decay: self.weight_decay,
            accum: self.accum,
            batch: self.batch,
            log_every: self.log_every,
            ckpt_every: self.ckpt_every,
        }
    }

    /// Fresh parameter store seeded from `seed`.
    pub fn param_store(&self) -> ParamStore {
        ParamStore::new(ChaCha8Rng::seed_from_u64(self.seed))
    }

    pub fn weighting(
        &self,
        store: &mut ParamStore,
    ) -> std::result::Result<LossWeighting, NnError> {
        Ok(if self.uncertainty_weighting {
            LossWeighting::Uncertainty(UncertaintyWeights::new(store)?)
        } else {
            LossWeighting::Fixed {
                seg: 1.0,
                cen: 1.0,
                off: 1.0,
            }
        })
    }

    pub fn dataset(&self, split: Split) -> std::result::Result<Dataset, SceneError> {
        let size = match split {
            Split::Train => self.train_scenes,
            Split::Val | Split::Test => self.val_scenes,
        };
        Dataset::new(
            split,
            size,
            self.modality,
            (self.vehicles_min, self.vehicles_max),
            self.grid(),
            self.img_h,
            self.img_w,
        )
    }
}
