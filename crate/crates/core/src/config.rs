//! Flat run configuration shared by every CLI subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::growth::{DepthSource, GrowthConfig};
use crate::losses::LossWeights;
use crate::model::InitConfig;
use crate::train::{LearningRates, TrainConfig};

/// Every tunable of a run, one key per field. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // data
    pub scene: String,
    pub n_cameras: usize,
    pub image_size: usize,
    pub sparse_points: usize,
    /// Drop sparse points and training views covering one half of the scene.
    pub half_coverage: bool,
    pub dataset: PathBuf,
    pub out: PathBuf,

    // grid and initialization
    pub s0: f64,
    pub l_max: usize,
    pub k: usize,
    pub min_points: usize,
    pub feature_dim: usize,
    pub hidden_width: usize,
    pub softplus_beta: f64,
    pub view_encoding_degree: usize,
    pub delta_init_ratio: f64,
    pub init_sdf_iterations: usize,
    pub init_sigma_t: f64,
    pub init_sigma_n: f64,
    pub init_colors: bool,

    // schedule
    pub total_iterations: usize,
    pub densify_start: usize,
    pub densify_end: usize,
    pub growth_iteration: usize,
    pub prune_interval: usize,
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub deterministic: bool,

    // learning rates
    pub lr_features: f64,
    pub lr_decoder: f64,
    pub lr_offsets: f64,
    pub lr_offset_scales: f64,
    pub lr_rotations: f64,
    pub lr_scales: f64,
    pub lr_colors: f64,
    pub lr_log_delta: f64,
    pub lr_final_ratio: f64,
    pub boost_factor: f64,
    pub boost_iterations: usize,
    pub old_factor: f64,

    // losses
    pub lambda_center: f64,
    pub lambda_eikonal: f64,
    pub lambda_flatten: f64,
    pub lambda_ssim: f64,
    pub eikonal_samples: usize,
    pub center_opacity_threshold: f64,
    pub background: [f64; 3],
    pub grad_norm_interval: usize,
    pub redundancy_tolerance: f64,

    // growth and pruning
    pub theta_thresh: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_down: Option<f64>,
    pub sigma_t: f64,
    pub sigma_n: f64,
    pub depth_source: DepthSource,
    pub tau_alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_sdf: Option<f64>,
    pub refit_iterations: usize,

    // meshing and evaluation
    pub mesh_resolution: usize,
    pub eval_samples: usize,
    pub f1_tau: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let i = InitConfig::default();
        let g = GrowthConfig::default();
        RunConfig {
            scene: "sphere".into(),
            n_cameras: 16,
            image_size: 64,
            sparse_points: 2000,
            half_coverage: false,
            dataset: PathBuf::from("data"),
            out: PathBuf::from("out"),
            s0: i.base_size,
            l_max: i.max_level,
            k: i.gaussians_per_cell,
            min_points: i.min_points,
            feature_dim: i.field.feature_dim,
            hidden_width: i.field.hidden_width,
            softplus_beta: i.field.softplus_beta,
            view_encoding_degree: i.field.view_encoding_degree,
            delta_init_ratio: i.delta_init_ratio,
            init_sdf_iterations: i.init_sdf_iterations,
            init_sigma_t: i.sigma_t,
            init_sigma_n: i.sigma_n,
            init_colors: true,
            total_iterations: t.total_iterations,
            densify_start: t.densify_start,
            densify_end: t.densify_end,
            growth_iteration: t.growth_iteration,
            prune_interval: t.prune_interval,
            checkpoint_interval: t.checkpoint_interval,
            seed: t.seed,
            deterministic: t.deterministic,
            lr_features: t.lr.features,
            lr_decoder: t.lr.decoder,
            lr_offsets: t.lr.offsets,
            lr_offset_scales: t.lr.offset_scales,
            lr_rotations: t.lr.rotations,
            lr_scales: t.lr.scales,
            lr_colors: t.lr.colors,
            lr_log_delta: t.lr.log_delta,
            lr_final_ratio: t.lr_final_ratio,
            boost_factor: t.boost_factor,
            boost_iterations: t.boost_iterations,
            old_factor: t.old_factor,
            lambda_center: t.weights.lambda_center,
            lambda_eikonal: t.weights.lambda_eikonal,
            lambda_flatten: t.weights.lambda_flatten,
            lambda_ssim: t.weights.lambda_ssim,
            eikonal_samples: t.eikonal_samples,
            center_opacity_threshold: t.center_opacity_threshold,
            background: t.background,
            grad_norm_interval: t.grad_norm_interval,
            redundancy_tolerance: t.redundancy_tolerance,
            theta_thresh: g.theta_thresh,
            s_down: g.s_down,
            sigma_t: g.sigma_t,
            sigma_n: g.sigma_n,
            depth_source: g.depth_source,
            tau_alpha: g.tau_alpha,
            tau_sdf: g.tau_sdf,
            refit_iterations: g.refit_iterations,
            mesh_resolution: 64,
            eval_samples: 100_000,
            f1_tau: 0.05,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Writes the resolved configuration as `config.toml` inside `dir`.
    pub fn save_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cameras < 2 || self.image_size < 4 || self.sparse_points == 0 {
            return Err(Error::Config("need n_cameras ≥ 2, image_size ≥ 4 and sparse_points > 0".into()));
        }
        if !(self.s0 > 0.0) || self.k == 0 || self.min_points == 0 {
            return Err(Error::Config("need s0 > 0, k > 0 and min_points > 0".into()));
        }
        if self.mesh_resolution < 8 || self.eval_samples == 0 || !(self.f1_tau > 0.0) {
            return Err(Error::Config("need mesh_resolution ≥ 8, eval_samples > 0 and f1_tau > 0".into()));
        }
        self.train_config().validate()
    }

    pub fn init_config(&self) -> InitConfig {
        InitConfig {
            base_size: self.s0,
            max_level: self.l_max,
            gaussians_per_cell: self.k,
            min_points: self.min_points,
            field: FieldConfig {
                feature_dim: self.feature_dim,
                hidden_width: self.hidden_width,
                softplus_beta: self.softplus_beta,
                view_encoding_degree: self.view_encoding_degree,
            },
            delta_init_ratio: self.delta_init_ratio,
            init_sdf_iterations: self.init_sdf_iterations,
            sigma_t: self.init_sigma_t,
            sigma_n: self.init_sigma_n,
        }
    }

    pub fn growth_config(&self) -> GrowthConfig {
        GrowthConfig {
            trigger_iteration: self.growth_iteration,
            theta_thresh: self.theta_thresh,
            s_down: self.s_down,
            sigma_t: self.sigma_t,
            sigma_n: self.sigma_n,
            depth_source: self.depth_source,
            tau_alpha: self.tau_alpha,
            tau_sdf: self.tau_sdf,
            refit_iterations: self.refit_iterations,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            total_iterations: self.total_iterations,
            densify_start: self.densify_start,
            densify_end: self.densify_end,
            growth_iteration: self.growth_iteration,
            prune_interval: self.prune_interval,
            checkpoint_interval: self.checkpoint_interval,
            lr: LearningRates {
                features: self.lr_features,
                decoder: self.lr_decoder,
                offsets: self.lr_offsets,
                offset_scales: self.lr_offset_scales,
                rotations: self.lr_rotations,
                scales: self.lr_scales,
                colors: self.lr_colors,
                log_delta: self.lr_log_delta,
            },
            lr_final_ratio: self.lr_final_ratio,
            boost_factor: self.boost_factor,
            boost_iterations: self.boost_iterations,
            old_factor: self.old_factor,
            eikonal_samples: self.eikonal_samples,
            center_opacity_threshold: self.center_opacity_threshold,
            background: self.background,
            grad_norm_interval: self.grad_norm_interval,
            redundancy_tolerance: self.redundancy_tolerance,
            seed: self.seed,
            deterministic: self.deterministic,
            weights: LossWeights {
                lambda_center: self.lambda_center,
                lambda_eikonal: self.lambda_eikonal,
                lambda_flatten: self.lambda_flatten,
                lambda_ssim: self.lambda_ssim,
            },
            growth: self.growth_config(),
        }
    }
}
