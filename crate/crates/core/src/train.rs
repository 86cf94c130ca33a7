//! Optimization loop: per-view steps, learning-rate schedule, growth and
//! pruning events, checkpoints and the CSV log.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldConfig, NeuralField, LAYER_NAMES};
use crate::grid::{Bounds, LodGrid};
use crate::growth::{grow, prune, prune_redundant_coarse, DepthProvider, DepthSource, GrowthConfig, GrowthReport, PruneReport};
use crate::io::{f64_from_chunks, f64_to_chunks, read_tensors, write_tensors};
use crate::losses::{sample_eikonal_points, LossReport, LossWeights};
use crate::model::{GaussianStore, Model};
use crate::optim::AdamState;
use crate::scene::{Camera, ImageBuffer, Vec3};
use crate::seed::{iteration_stream, substream};
use crate::synth::AnalyticScene;
use crate::tape::{GradientTape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub features: f64,
    pub decoder: f64,
    pub offsets: f64,
    pub offset_scales: f64,
    pub rotations: f64,
    pub scales: f64,
    pub colors: f64,
    pub log_delta: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            features: 1e-2,
            decoder: 1e-3,
            offsets: 1e-3,
            offset_scales: 1e-3,
            rotations: 1e-3,
            scales: 1e-3,
            colors: 2.5e-2,
            log_delta: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Features,
    Decoder,
    Offsets,
    OffsetScales,
    Rotations,
    Scales,
    Colors,
    LogDelta,
}

impl ParamGroup {
    /// Groups of the neural field get the exponential decay.
    pub fn decays(self) -> bool {
        matches!(self, ParamGroup::Features | ParamGroup::Decoder | ParamGroup::LogDelta)
    }
}

/// Store tensors in [`GaussianStore::tensors`] order.
const STORE_GROUPS: [ParamGroup; 5] =
    [ParamGroup::Offsets, ParamGroup::OffsetScales, ParamGroup::Rotations, ParamGroup::Scales, ParamGroup::Colors];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_iterations: usize,
    pub densify_start: usize,
    pub densify_end: usize,
    /// Growth runs once after this many steps; a value ≥ `total_iterations` disables it.
    pub growth_iteration: usize,
    pub prune_interval: usize,
    pub checkpoint_interval: usize,
    pub lr: LearningRates,
    /// Field learning rates reach `lr · lr_final_ratio` at the last iteration.
    pub lr_final_ratio: f64,
    pub boost_factor: f64,
    pub boost_iterations: usize,
    pub old_factor: f64,
    pub eikonal_samples: usize,
    /// Opacity above which a Gaussian enters the SDF-center loss.
    pub center_opacity_threshold: f64,
    pub background: [f64; 3],
    /// Per-term gradient norms every this many steps; 0 disables.
    pub grad_norm_interval: usize,
    /// Render tolerance of coarse redundancy pruning; 0 disables it.
    pub redundancy_tolerance: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub weights: LossWeights,
    pub growth: GrowthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iterations: 30000,
            densify_start: 1500,
            densify_end: 15000,
            growth_iteration: 5000,
            prune_interval: 1000,
            checkpoint_interval: 5000,
            lr: LearningRates::default(),
            lr_final_ratio: 0.1,
            boost_factor: 5.0,
            boost_iterations: 2000,
            old_factor: 0.8,
            eikonal_samples: 1024,
            center_opacity_threshold: 0.1,
            background: [0.0; 3],
            grad_norm_interval: 0,
            redundancy_tolerance: 5e-4,
            seed: 0,
            deterministic: true,
            weights: LossWeights::default(),
            growth: GrowthConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn growth_enabled(&self) -> bool {
        self.growth_iteration < self.total_iterations
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.densify_start < self.densify_end && self.densify_end < self.total_iterations) {
            return bad("need densify_start < densify_end < total_iterations");
        }
        if self.growth_enabled() && !(self.densify_start < self.growth_iteration && self.growth_iteration < self.densify_end) {
            return bad("need densify_start < growth_iteration < densify_end");
        }
        if self.growth.trigger_iteration != self.growth_iteration {
            return bad("growth.trigger_iteration must equal growth_iteration");
        }
        if self.prune_interval == 0 || self.checkpoint_interval == 0 {
            return bad("prune_interval and checkpoint_interval must be positive");
        }
        let lr = &self.lr;
        let rates = [lr.features, lr.decoder, lr.offsets, lr.offset_scales, lr.rotations, lr.scales, lr.colors, lr.log_delta];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad("learning rates must be finite and non-negative");
        }
        if !(self.lr_final_ratio > 0.0 && self.boost_factor >= 1.0 && self.old_factor > 0.0) {
            return bad("lr_final_ratio, old_factor must be positive and boost_factor ≥ 1");
        }
        if !(self.center_opacity_threshold >= 0.0 && self.center_opacity_threshold <= 1.0) {
            return bad("center_opacity_threshold must lie in [0, 1]");
        }
        if !(self.redundancy_tolerance >= 0.0) || self.background.iter().any(|b| !b.is_finite()) {
            return bad("redundancy_tolerance and background must be finite");
        }
        self.weights.validate()?;
        self.growth.validate()
    }

    pub fn base_lr(&self, group: ParamGroup) -> f64 {
        let lr = &self.lr;
        match group {
            ParamGroup::Features => lr.features,
            ParamGroup::Decoder => lr.decoder,
            ParamGroup::Offsets => lr.offsets,
            ParamGroup::OffsetScales => lr.offset_scales,
            ParamGroup::Rotations => lr.rotations,
            ParamGroup::Scales => lr.scales,
            ParamGroup::Colors => lr.colors,
            ParamGroup::LogDelta => lr.log_delta,
        }
    }
}

/// Multiplier for a row born at `birth` (`None` for shared parameters).
pub fn boost_multiplier(cfg: &TrainConfig, iteration: usize, birth: Option<usize>) -> f64 {
    let g = cfg.growth_iteration;
    if !cfg.growth_enabled() || iteration < g || iteration >= g + cfg.boost_iterations {
        return 1.0;
    }
    match birth {
        None => 1.0,
        Some(b) if b == g => {
            let t = (iteration - g) as f64 / cfg.boost_iterations as f64;
            cfg.boost_factor - (cfg.boost_factor - 1.0) * t
        }
        Some(_) => cfg.old_factor,
    }
}

/// Learning rate of `group` at `iteration` for a row born at `birth`.
pub fn lr_schedule(cfg: &TrainConfig, iteration: usize, group: ParamGroup, birth: Option<usize>) -> f64 {
    let mut lr = cfg.base_lr(group);
    if group.decays() {
        let t = (iteration as f64 / cfg.total_iterations.max(1) as f64).min(1.0);
        lr *= cfg.lr_final_ratio.powf(t);
    }
    lr * boost_multiplier(cfg, iteration, birth)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub features: AdamState,
    pub layers: Vec<AdamState>,
    pub log_delta: AdamState,
    pub store: Vec<AdamState>,
}

impl OptimizerState {
    pub fn for_model(model: &Model) -> OptimizerState {
        OptimizerState {
            features: AdamState::for_param(&model.field.features),
            layers: model.field.layers.iter().map(AdamState::for_param).collect(),
            log_delta: AdamState::new(1, 1),
            store: model.store.tensors().iter().map(|(_, t)| AdamState::for_param(t)).collect(),
        }
    }

    fn sync(&mut self, model: &Model) {
        self.features.grow(model.field.num_vertices());
        for s in &mut self.store {
            s.grow(model.store.len());
        }
    }

    fn apply_prune(&mut self, report: &PruneReport) {
        if report.removed_gaussians == 0 {
            return;
        }
        for s in &mut self.store {
            s.retain(&report.gaussian_keep);
        }
        self.features.retain(&report.vertex_keep);
    }

    fn named(&self) -> Vec<(String, &AdamState)> {
        let mut out = vec![("features".to_string(), &self.features), ("log_delta".to_string(), &self.log_delta)];
        out.extend(LAYER_NAMES.iter().zip(&self.layers).map(|(n, s)| (n.to_string(), s)));
        out.extend(STORE_NAMES.iter().zip(&self.store).map(|(n, s)| (n.to_string(), s)));
        out
    }
}

const STORE_NAMES: [&str; 5] = ["offsets", "offset_scales", "rotations", "log_scales", "colors"];

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub report: LossReport,
    pub gaussians: usize,
    pub delta: f64,
}

pub const LOG_HEADER: &str = "iteration,rgb,flatten,sdf_center,eikonal,total,gaussians,delta,grad_rgb,grad_flatten,grad_center,grad_eikonal";

impl LogRow {
    pub fn csv(&self) -> String {
        let r = &self.report;
        let g = match r.grad_norms {
            Some(g) => format!("{},{},{},{}", g[0], g[1], g[2], g[3]),
            None => ",,,".to_string(),
        };
        format!("{},{},{},{},{},{},{},{},{}", self.iteration, r.rgb, r.flatten, r.sdf_center, r.eikonal, r.total, self.gaussians, self.delta, g)
    }
}

/// Something that happened between steps.
#[derive(Clone, Debug)]
pub enum Event {
    Grow(GrowthReport),
    Prune { iteration: usize, threshold: PruneReport, redundant: PruneReport },
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub opt: OptimizerState,
    /// Completed steps.
    pub iteration: usize,
    pub views: Vec<(Camera, ImageBuffer)>,
    /// Cameras used for growth and redundancy checks.
    pub growth_views: Vec<Camera>,
    /// Analytic scene for oracle depth during growth.
    pub scene: Option<AnalyticScene>,
    pub log: Vec<LogRow>,
    pub events: Vec<Event>,
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        model: Model,
        views: Vec<(Camera, ImageBuffer)>,
        growth_views: Vec<Camera>,
        scene: Option<AnalyticScene>,
    ) -> Result<Trainer> {
        cfg.validate()?;
        if views.is_empty() {
            return Err(Error::InvalidInput("no training views".into()));
        }
        for (cam, img) in &views {
            if img.width != cam.width || img.height != cam.height || img.channels != 3 {
                return Err(Error::InvalidInput("training image does not match its camera".into()));
            }
        }
        if cfg.growth_enabled() && cfg.growth.depth_source == DepthSource::Oracle && scene.is_none() {
            return Err(Error::Config("oracle growth needs an analytic scene".into()));
        }
        let opt = OptimizerState::for_model(&model);
        Ok(Trainer { cfg, model, opt, iteration: 0, views, growth_views, scene, log: Vec::new(), events: Vec::new() })
    }

    fn background(&self) -> Vec3 {
        Vec3::from(self.cfg.background)
    }

    /// Index of the training view used at `iteration`; views are reshuffled every pass.
    pub fn view_index(&self, iteration: usize) -> usize {
        let n = self.views.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut iteration_stream(self.cfg.seed, "view-order", iteration / n));
        order[iteration % n]
    }

    /// Loss terms on `view` without updating anything.
    pub fn evaluate(&self, view: usize) -> Result<LossReport> {
        let mut rng = iteration_stream(self.cfg.seed, "train", self.iteration);
        let samples = self.eikonal_samples(&mut rng);
        let (cam, img) = &self.views[view];
        let mut tape = GradientTape::new();
        let g = self.model.loss_graph(&mut tape, cam, img, &self.background(), &self.cfg.weights, self.cfg.center_opacity_threshold, &samples);
        Ok(self.report(&tape, &g))
    }

    fn eikonal_samples(&self, rng: &mut impl rand::Rng) -> Vec<(Vec3, usize)> {
        if self.cfg.eikonal_samples == 0 || self.cfg.weights.lambda_eikonal == 0.0 {
            return Vec::new();
        }
        sample_eikonal_points(&self.model.grid, &self.model.eikonal_centers(), self.cfg.eikonal_samples, rng)
    }

    fn report(&self, tape: &GradientTape, g: &crate::model::LossGraph) -> LossReport {
        let eik = g.eikonal.map_or(0.0, |e| tape.value(e).item());
        let mut r = LossReport::combine(
            tape.value(g.rgb).item(),
            tape.value(g.flatten).item(),
            tape.value(g.center).item(),
            eik,
            &self.cfg.weights,
        );
        r.total = tape.value(g.total).item();
        r
    }

    /// One optimizer step on the scheduled view, followed by any due events.
    pub fn step(&mut self) -> Result<LossReport> {
        let it = self.iteration;
        let view = self.view_index(it);
        let mut rng = iteration_stream(self.cfg.seed, "train", it);
        let samples = self.eikonal_samples(&mut rng);
        let (cam, img) = &self.views[view];
        let mut tape = GradientTape::new();
        let g = self.model.loss_graph(&mut tape, cam, img, &self.background(), &self.cfg.weights, self.cfg.center_opacity_threshold, &samples);
        let mut report = self.report(&tape, &g);
        if !report.total.is_finite() {
            return Err(Error::NonFinite { iteration: it, detail: format!("{report:?}") });
        }
        let grads = tape.backward(g.total)?;
        let v = &g.vars;
        let params: Vec<_> = std::iter::once(v.field.features)
            .chain(v.field.layers.iter().copied())
            .chain([v.field.log_delta, v.offsets, v.offset_scales, v.rotations, v.log_scales, v.colors])
            .collect();
        let grad_tensors: Vec<Tensor> = params.iter().map(|&p| grads.wrt(p)).collect();
        if let Some(bad) = grad_tensors.iter().position(|t| t.data.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite { iteration: it, detail: format!("gradient of parameter tensor {bad}; losses {report:?}") });
        }
        if self.cfg.grad_norm_interval > 0 && it % self.cfg.grad_norm_interval == 0 {
            let w = &self.cfg.weights;
            let terms = [(Some(g.rgb), 1.0), (Some(g.flatten), 1.0), (Some(g.center), w.lambda_center), (g.eikonal, w.lambda_eikonal)];
            let mut norms = [0.0; 4];
            for (k, (term, scale)) in terms.iter().enumerate() {
                if let Some(t) = term {
                    let gt = tape.backward(*t)?;
                    let sq: f64 = params.iter().map(|&p| gt.wrt(p).data.iter().map(|x| x * x).sum::<f64>()).sum();
                    norms[k] = scale * sq.sqrt();
                }
            }
            report.grad_norms = Some(norms);
        }
        drop(tape);
        self.apply_gradients(grad_tensors);
        self.iteration += 1;
        self.log.push(LogRow { iteration: it, report: report.clone(), gaussians: self.model.num_gaussians(), delta: self.model.field.delta() });
        self.run_events()?;
        Ok(report)
    }

    fn apply_gradients(&mut self, mut grads: Vec<Tensor>) {
        let it = self.iteration;
        let cfg = &self.cfg;
        let rows_lr = |group: ParamGroup, births: &[usize]| -> Vec<f64> {
            births.iter().map(|&b| lr_schedule(cfg, it, group, Some(b))).collect()
        };
        let m = &mut self.model;
        let feat_rates = rows_lr(ParamGroup::Features, &m.field.vertex_birth);
        self.opt.features.step(&mut m.field.features, &grads[0], 1.0, Some(&feat_rates));
        let dec = lr_schedule(cfg, it, ParamGroup::Decoder, None);
        for (k, opt) in self.opt.layers.iter_mut().enumerate() {
            opt.step(&mut m.field.layers[k], &grads[1 + k], dec, None);
        }
        let nl = self.opt.layers.len();
        let mut ld = Tensor::scalar(m.field.log_delta);
        self.opt.log_delta.step(&mut ld, &grads[1 + nl], lr_schedule(cfg, it, ParamGroup::LogDelta, None), None);
        m.field.log_delta = ld.item();
        let births = m.store.birth.clone();
        for (k, (t, group)) in m.store.tensors_mut().into_iter().zip(STORE_GROUPS).enumerate() {
            let rates = rows_lr(group, &births);
            let g = std::mem::take(&mut grads[2 + nl + k]);
            self.opt.store[k].step(t, &g, 1.0, Some(&rates));
        }
    }

    fn run_events(&mut self) -> Result<()> {
        let it = self.iteration;
        let cfg = &self.cfg;
        if it % cfg.prune_interval == 0 && it >= cfg.densify_start && it <= cfg.densify_end {
            let ev = self.prune_now()?;
            self.events.push(ev);
        }
        if self.cfg.growth_enabled() && it == self.cfg.growth_iteration {
            let report = self.grow_now()?;
            self.events.push(Event::Grow(report));
        }
        Ok(())
    }

    /// Threshold pruning followed by coarse redundancy pruning.
    pub fn prune_now(&mut self) -> Result<Event> {
        let tau_sdf = self.cfg.growth.tau_sdf.unwrap_or(3.0 * self.model.field.delta());
        let threshold = prune(&mut self.model, self.cfg.growth.tau_alpha, tau_sdf)?;
        self.opt.apply_prune(&threshold);
        let redundant = if self.cfg.redundancy_tolerance > 0.0 {
            let bg = self.background();
            let r = prune_redundant_coarse(&mut self.model, &self.growth_views, &bg, self.cfg.redundancy_tolerance);
            self.opt.apply_prune(&r);
            r
        } else {
            PruneReport::default()
        };
        Ok(Event::Prune { iteration: self.iteration, threshold, redundant })
    }

    /// Runs growth now with birth stamp equal to the current iteration.
    pub fn grow_now(&mut self) -> Result<GrowthReport> {
        let mut rng = iteration_stream(self.cfg.seed, "growth", self.iteration);
        let views = self.growth_views.clone();
        let report = match self.cfg.growth.depth_source {
            DepthSource::Oracle => {
                let scene = self.scene.as_ref().ok_or_else(|| Error::Config("oracle growth needs an analytic scene".into()))?;
                grow(&mut self.model, &views, DepthProvider::Oracle(scene), &self.cfg.growth, self.iteration, &mut rng)?
            }
            DepthSource::SelfRender => {
                let snapshot = self.model.clone();
                grow(&mut self.model, &views, DepthProvider::Model(&snapshot), &self.cfg.growth, self.iteration, &mut rng)?
            }
        };
        self.opt.sync(&self.model);
        Ok(report)
    }

    pub fn finished(&self) -> bool {
        self.iteration >= self.cfg.total_iterations
    }

    pub fn checkpoint_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = model_tensors(&self.model)?;
        out.push(("train.iteration".into(), Tensor::scalar(exact_int(self.iteration)?)));
        for (name, s) in self.opt.named() {
            out.push((format!("adam.{name}.m"), s.m.clone()));
            out.push((format!("adam.{name}.v"), s.v.clone()));
            let steps: Vec<f64> = s.steps.iter().map(|&x| exact_int(x as usize)).collect::<Result<_>>()?;
            out.push((format!("adam.{name}.steps"), Tensor::from_vec(steps.len(), 1, steps)));
        }
        Ok(out)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        write_tensors(path, &self.checkpoint_tensors()?)
    }

    /// Restores model, optimizer state and iteration from a checkpoint.
    pub fn restore(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        let mut map: HashMap<String, Tensor> = tensors.into_iter().collect();
        let model = model_from_map(&mut map)?;
        let mut opt = OptimizerState::for_model(&model);
        let names: Vec<String> = opt.named().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let m = take(&mut map, &format!("adam.{name}.m"))?;
            let v = take(&mut map, &format!("adam.{name}.v"))?;
            let steps = take(&mut map, &format!("adam.{name}.steps"))?;
            let target = opt_by_name(&mut opt, &name);
            if m.shape() != target.m.shape() || v.shape() != target.m.shape() || steps.rows != target.steps.len() {
                return Err(Error::Checkpoint(format!("optimizer state '{name}' has the wrong shape")));
            }
            *target = AdamState { m, v, steps: steps.data.iter().map(|&s| s as u32).collect() };
        }
        self.iteration = take(&mut map, "train.iteration")?.item() as usize;
        self.model = model;
        self.opt = opt;
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.restore(read_tensors(path)?)
    }
}

fn opt_by_name<'a>(opt: &'a mut OptimizerState, name: &str) -> &'a mut AdamState {
    match name {
        "features" => &mut opt.features,
        "log_delta" => &mut opt.log_delta,
        _ => {
            if let Some(k) = LAYER_NAMES.iter().position(|n| *n == name) {
                &mut opt.layers[k]
            } else {
                let k = STORE_NAMES.iter().position(|n| *n == name).expect("known optimizer name");
                &mut opt.store[k]
            }
        }
    }
}

fn exact_int(x: usize) -> Result<f64> {
    if x > 1 << 24 {
        return Err(Error::Checkpoint(format!("integer {x} does not fit the f32 container")));
    }
    Ok(x as f64)
}

fn chunks(values: &[f64]) -> Vec<f64> {
    values.iter().flat_map(|&v| f64_to_chunks(v)).collect()
}

fn int_column(values: impl Iterator<Item = usize>) -> Result<Tensor> {
    let data: Vec<f64> = values.map(exact_int).collect::<Result<_>>()?;
    Ok(Tensor::from_vec(data.len(), 1, data))
}

fn coord_rows(keys: impl Iterator<Item = (usize, [i64; 3])>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    for (level, c) in keys {
        data.push(exact_int(level)?);
        for v in c {
            if v.unsigned_abs() > 1 << 24 {
                return Err(Error::Checkpoint("cell coordinate too large".into()));
            }
            data.push(v as f64);
        }
        rows += 1;
    }
    Ok(Tensor::from_vec(rows, 4, data))
}

/// Model parameters and structure as named tensors.
pub fn model_tensors(model: &Model) -> Result<Vec<(String, Tensor)>> {
    let g = &model.grid;
    let mut params = chunks(&[g.base_size]);
    params.extend(chunks(&g.bounds.min));
    params.extend(chunks(&g.bounds.max));
    params.push(exact_int(g.max_level)?);
    params.push(exact_int(g.gaussians_per_cell)?);
    let mut out: Vec<(String, Tensor)> = vec![("grid.params".into(), Tensor::from_vec(1, params.len(), params))];
    out.push(("grid.cells".into(), coord_rows(g.cells().iter().map(|c| (c.level, c.coord)))?));
    let ids: Vec<f64> = g.cells().iter().flat_map(|c| c.vertex_ids).map(exact_int).collect::<Result<_>>()?;
    out.push(("grid.cell_vertices".into(), Tensor::from_vec(g.num_cells(), 8, ids)));
    out.push(("grid.vertices".into(), coord_rows(g.vertex_keys().iter().copied())?));

    let f = &model.field;
    let mut fc = vec![exact_int(f.config.feature_dim)?, exact_int(f.config.hidden_width)?, exact_int(f.config.view_encoding_degree)?];
    fc.extend(chunks(&[f.config.softplus_beta]));
    out.push(("field.config".into(), Tensor::from_vec(1, fc.len(), fc)));
    out.push(("field.features".into(), f.features.clone()));
    out.push(("field.vertex_birth".into(), int_column(f.vertex_birth.iter().copied())?));
    for (name, t) in LAYER_NAMES.iter().zip(&f.layers) {
        out.push((format!("field.{name}"), t.clone()));
    }
    out.push(("field.log_delta".into(), Tensor::scalar(f.log_delta)));

    let s = &model.store;
    out.push(("gaussians.cell".into(), int_column(s.cell.iter().copied())?));
    out.push(("gaussians.level".into(), int_column(s.level.iter().copied())?));
    out.push(("gaussians.birth".into(), int_column(s.birth.iter().copied())?));
    for (name, t) in s.tensors() {
        out.push((name.to_string(), t.clone()));
    }
    Ok(out)
}

fn take(map: &mut HashMap<String, Tensor>, name: &str) -> Result<Tensor> {
    map.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
}

fn keys_from(t: &Tensor) -> Result<Vec<(usize, [i64; 3])>> {
    if t.cols != 4 && t.rows > 0 {
        return Err(Error::Checkpoint("coordinate tensor must have 4 columns".into()));
    }
    Ok((0..t.rows).map(|r| (t.at(r, 0) as usize, [t.at(r, 1) as i64, t.at(r, 2) as i64, t.at(r, 3) as i64])).collect())
}

fn model_from_map(map: &mut HashMap<String, Tensor>) -> Result<Model> {
    let p = take(map, "grid.params")?;
    if p.len() != 30 {
        return Err(Error::Checkpoint("grid.params must hold 30 values".into()));
    }
    let d = &p.data;
    let f64_at = |k: usize| f64_from_chunks(&d[4 * k..4 * k + 4]);
    let bounds = Bounds::new([f64_at(1), f64_at(2), f64_at(3)], [f64_at(4), f64_at(5), f64_at(6)])?;
    let cells = keys_from(&take(map, "grid.cells")?)?;
    let cv = take(map, "grid.cell_vertices")?;
    let cell_vertices: Vec<[usize; 8]> = (0..cv.rows).map(|r| std::array::from_fn(|k| cv.at(r, k) as usize)).collect();
    let vertex_keys = keys_from(&take(map, "grid.vertices")?)?;
    let grid = LodGrid::from_parts(f64_at(0), d[28] as usize, bounds, d[29] as usize, &cells, &cell_vertices, vertex_keys)?;

    let fc = take(map, "field.config")?;
    if fc.len() != 7 {
        return Err(Error::Checkpoint("field.config must hold 7 values".into()));
    }
    let config = FieldConfig {
        feature_dim: fc.data[0] as usize,
        hidden_width: fc.data[1] as usize,
        view_encoding_degree: fc.data[2] as usize,
        softplus_beta: f64_from_chunks(&fc.data[3..7]),
    };
    let log_delta = take(map, "field.log_delta")?.item();
    let mut field = NeuralField::new(config, 0, log_delta.exp(), &mut substream(0, "unused"))?;
    field.log_delta = log_delta;
    let features = take(map, "field.features")?;
    if features.rows != grid.num_vertices() || features.cols != field.config.feature_dim {
        return Err(Error::Checkpoint("feature table does not match the grid".into()));
    }
    field.features = features;
    field.vertex_birth = take(map, "field.vertex_birth")?.data.iter().map(|&b| b as usize).collect();
    if field.vertex_birth.len() != grid.num_vertices() {
        return Err(Error::Checkpoint("vertex births do not match the grid".into()));
    }
    for (k, name) in LAYER_NAMES.iter().enumerate() {
        let t = take(map, &format!("field.{name}"))?;
        if t.shape() != field.layers[k].shape() {
            return Err(Error::Checkpoint(format!("layer {name} has shape {:?}", t.shape())));
        }
        field.layers[k] = t;
    }

    let mut store = GaussianStore::new();
    let ints = |t: Tensor| -> Vec<usize> { t.data.iter().map(|&v| v as usize).collect() };
    store.cell = ints(take(map, "gaussians.cell")?);
    store.level = ints(take(map, "gaussians.level")?);
    store.birth = ints(take(map, "gaussians.birth")?);
    let n = store.cell.len();
    for (name, t) in STORE_NAMES.iter().zip(store.tensors_mut()) {
        let v = take(map, &format!("gaussians.{name}"))?;
        if v.rows != n || v.cols != t.cols {
            return Err(Error::Checkpoint(format!("gaussians.{name} has shape {:?}", v.shape())));
        }
        *t = v;
    }
    if store.level.len() != n || store.birth.len() != n {
        return Err(Error::Checkpoint("Gaussian index columns differ in length".into()));
    }
    let mut model = Model { grid, store, field };
    for (i, &c) in model.store.cell.iter().enumerate() {
        if c >= model.grid.num_cells() || model.grid.cell(c).level != model.store.level[i] {
            return Err(Error::Checkpoint(format!("Gaussian {i} points at a bad cell")));
        }
        model.grid.cell_mut(c).gaussian_ids.push(i);
    }
    Ok(model)
}

/// Loads just the model from a checkpoint (trainer state is ignored).
pub fn load_model(path: &Path) -> Result<Model> {
    let mut map: HashMap<String, Tensor> = read_tensors(path)?.into_iter().collect();
    model_from_map(&mut map)
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    write_tensors(path, &model_tensors(model)?)
}

/// Outcome of [`run`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub iterations: usize,
    pub initial_total: f64,
    pub final_total: f64,
    pub gaussians: usize,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Drives `trainer` to the end: logs every step to `train_log.csv`, writes
/// `checkpoint_NNNNNN.digs` every checkpoint interval and `final.digs` at the
/// end. On a non-finite loss, `abort.json` records the failure and the last
/// checkpoint stays in place.
pub fn run(trainer: &mut Trainer, out: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out)?;
    let log_path = out.join("train_log.csv");
    let mut log = if trainer.iteration == 0 || !log_path.exists() {
        let mut f = fs::File::create(&log_path)?;
        writeln!(f, "{LOG_HEADER}")?;
        f
    } else {
        fs::OpenOptions::new().append(true).open(&log_path)?
    };
    let mut initial = None;
    let mut last = f64::NAN;
    while !trainer.finished() {
        let report = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                let note = serde_json::json!({ "iteration": trainer.iteration, "error": e.to_string() });
                fs::write(out.join("abort.json"), serde_json::to_string_pretty(&note)?)?;
                return Err(e);
            }
        };
        initial.get_or_insert(report.total);
        last = report.total;
        let row = trainer.log.last().expect("step logs a row");
        writeln!(log, "{}", row.csv())?;
        for ev in trainer.events.drain(..) {
            match ev {
                Event::Grow(r) => log::info!(
                    "iteration {}: growth created {} cells ({:?} per level), {} Gaussians",
                    trainer.iteration,
                    r.created(),
                    r.created_per_level,
                    r.created_gaussians
                ),
                Event::Prune { iteration, threshold, redundant } => log::info!(
                    "iteration {iteration}: pruned {} by threshold, {} as redundant",
                    threshold.removed_gaussians,
                    redundant.removed_gaussians
                ),
            }
        }
        if trainer.iteration % trainer.cfg.checkpoint_interval == 0 {
            trainer.save_checkpoint(&out.join(format!("checkpoint_{:06}.digs", trainer.iteration)))?;
        }
        if trainer.iteration % 100 == 0 {
            log::info!("iteration {} total {:.6} gaussians {}", trainer.iteration, report.total, trainer.model.num_gaussians());
        }
    }
    log.flush()?;
    let checkpoint = out.join("final.digs");
    trainer.save_checkpoint(&checkpoint)?;
    Ok(RunSummary {
        iterations: trainer.iteration,
        initial_total: initial.unwrap_or(f64::NAN),
        final_total: last,
        gaussians: trainer.model.num_gaussians(),
        checkpoint,
        log: log_path,
    })
}
