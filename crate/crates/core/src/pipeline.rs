//! Patch sampling, training schedules and held-out evaluation.

use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureConfig, ATLAS_SCALE, OUTPUT_STRIDE};
use crate::atlasio::atlas_dropout;
use crate::cortexfield::{
    correction_angle, dominant_orientation_disc, gradient, rotate_bilinear, rotate_nearest, rotated_target, solve_laplace,
    LaplaceOptions, VectorField, GM,
};
use crate::dataset::{Section, UNLABELED};
use crate::error::{bail, Error, Result};
use crate::metrics::{EvalAccumulator, EvalReport};
use crate::net::{build_base_net, Model, StepOptions};
use crate::nn::loss::IGNORE;
use crate::nn::optim::sgd_step;
use crate::raster::Raster;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tiling::IMAGE_FILL;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Rotate each patch so the local cortex normal points up.
    Corrected,
    /// Uniformly random rotation (augmentation baseline).
    Random,
    /// No rotation.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub iterations: usize,
    /// Atlas-aware models only; `None` means half of `iterations`.
    #[serde(default)]
    pub phase1_iterations: Option<usize>,
    pub fg_fraction: f64,
    pub atlas_dropout: f64,
    pub seed: u64,
    pub orientation: Orientation,
    /// Unit weights when absent.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 192,
            batch_size: 20,
            lr: 0.05,
            iterations: 3000,
            phase1_iterations: None,
            fg_fraction: 0.85,
            atlas_dropout: 0.2,
            seed: 0,
            orientation: Orientation::Corrected,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    /// CPU-sized schedule: 192 px patches, batch 8, 1500 + 1500 iterations.
    pub fn desk() -> Self {
        TrainConfig { batch_size: 8, ..Self::default() }
    }

    /// The full-size schedule: 2000 px patches, batch 20, 5000 iterations.
    pub fn full_scale() -> Self {
        TrainConfig { patch_size: 2000, iterations: 5000, ..Self::default() }
    }

    pub fn phase1(&self) -> usize {
        self.phase1_iterations.unwrap_or(self.iterations / 2)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("fg fraction", self.fg_fraction), ("atlas dropout", self.atlas_dropout)] {
            if !(0.0..=1.0).contains(&v) {
                bail!(Invalid, "{name} {v} outside [0, 1]");
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bail!(Invalid, "learning rate {} must be finite and >= 0", self.lr);
        }
        if self.batch_size == 0 || self.patch_size == 0 || self.patch_size % (OUTPUT_STRIDE * ATLAS_SCALE) != 0 {
            bail!(Invalid, "patch size {} / batch {} invalid", self.patch_size, self.batch_size);
        }
        if self.phase1() > self.iterations {
            bail!(Invalid, "phase-1 budget {} exceeds {} iterations", self.phase1(), self.iterations);
        }
        Ok(())
    }
}

/// What a prepared section is labelled with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Areas plus gm/wm/bg (`n + 3` classes).
    Areas,
    /// Cortex (0) vs everything else (1).
    CortexBackground,
    /// gm/wm/bg with the tissue codes as class ids.
    Tissue,
}

/// A section ready for sampling: normalized image, training and
/// evaluation targets, optional registered atlas and orientation field.
#[derive(Clone)]
pub struct PreparedSection {
    pub name: String,
    pub classes: usize,
    pub image: Raster<f32>,
    pub labels: Raster<u8>,
    pub truth: Raster<u8>,
    pub tissue: Raster<u8>,
    /// Section-space probability maps on the quarter grid, one per area.
    pub atlas: Option<Vec<Raster<f32>>>,
    pub orientation: Option<VectorField>,
    fg: Vec<u32>,
    rest: Vec<u32>,
}

pub fn normalize_image(image: &Raster<u8>) -> Raster<f32> {
    image.map(|v| v as f32 / 255.0)
}

/// Orientation field from the tissue mask (gradient of the Laplace
/// solution between the outer and the white-matter boundary).
pub fn orientation_field(tissue: &Raster<u8>) -> Result<VectorField> {
    let field = solve_laplace(tissue, &LaplaceOptions::default())?;
    Ok(gradient(&field))
}

pub fn prepare(section: &Section, task: Task, with_atlas: bool, with_orientation: bool) -> Result<PreparedSection> {
    let tissue = section
        .segmask
        .clone()
        .ok_or_else(|| Error::Invalid(format!("section {} has no tissue mask", section.meta.name)))?;
    let (labels, truth, classes) = match task {
        Task::Areas => (section.extended_labels()?, section.ground_truth()?, section.classes()),
        Task::CortexBackground => {
            let l = tissue.map(|t| u8::from(t != GM));
            (l.clone(), l, 2)
        }
        Task::Tissue => (tissue.clone(), tissue.clone(), 3),
    };
    let annotated: Vec<bool> = match task {
        Task::Areas => section.labels.data().iter().map(|&l| l != UNLABELED).collect(),
        _ => tissue.data().iter().map(|&t| t == GM).collect(),
    };
    let (mut fg, mut rest) = (Vec::new(), Vec::new());
    for (i, &a) in annotated.iter().enumerate() {
        if a {
            fg.push(i as u32);
        } else {
            rest.push(i as u32);
        }
    }
    let atlas = if with_atlas {
        let t = section.section_atlas()?;
        let (a, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        Some((0..a).map(|k| Raster::new(h, w, t.data()[k * h * w..(k + 1) * h * w].to_vec())).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let orientation = if with_orientation { Some(orientation_field(&tissue)?) } else { None };
    Ok(PreparedSection {
        name: section.meta.name.clone(),
        classes,
        image: normalize_image(&section.image),
        labels,
        truth,
        tissue,
        atlas,
        orientation,
        fg,
        rest,
    })
}

impl PreparedSection {
    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    pub fn annotated_pixels(&self) -> usize {
        self.fg.len()
    }

    /// Rotation that turns the field gradient (outer surface towards white
    /// matter) within `size`/2 of `center` to point up; 0 where the
    /// orientation is undefined. A disc rather than the square patch keeps
    /// the angle consistent when the section itself is rotated.
    pub fn correction_at(&self, center: (f64, f64), size: usize) -> f64 {
        let Some(vf) = &self.orientation else { return 0.0 };
        dominant_orientation_disc(vf, center, size as f64 / 2.0).map(correction_angle).unwrap_or(0.0)
    }

    /// Rotated image crop and atlas crop (P/4 side) about `center`.
    pub fn extract(&self, center: (f64, f64), angle: f64, size: usize) -> (Raster<f32>, Option<Vec<Raster<f32>>>) {
        let img = rotate_bilinear(&self.image, center, angle, (size, size), IMAGE_FILL);
        let s = ATLAS_SCALE as f64;
        let ac = ((center.0 + 0.5) / s - 0.5, (center.1 + 0.5) / s - 0.5);
        let q = size / ATLAS_SCALE;
        let atlas = self
            .atlas
            .as_ref()
            .map(|maps| maps.iter().map(|m| rotate_nearest(m, ac, angle, (q, q), 0.0)).collect());
        (img, atlas)
    }
}

/// Majority label per `f`×`f` cell (partial cells at the border count
/// what they cover). Ties go to the smallest id; all-ignored cells stay ignored.
pub fn majority_downsample(labels: &Raster<u8>, f: usize) -> Raster<u8> {
    let (h, w) = labels.dims();
    let mut counts = [0u32; 256];
    Raster::from_fn(h.div_ceil(f), w.div_ceil(f), |cy, cx| {
        counts.fill(0);
        for y in cy * f..((cy + 1) * f).min(h) {
            for x in cx * f..((cx + 1) * f).min(w) {
                let l = labels.get(y, x);
                if l != IGNORE {
                    counts[l as usize] += 1;
                }
            }
        }
        let mut best = IGNORE;
        let mut best_n = 0;
        for (l, &n) in counts.iter().enumerate() {
            if n > best_n {
                best_n = n;
                best = l as u8;
            }
        }
        best
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchConfig {
    pub size: usize,
    pub fg_fraction: f64,
    pub orientation: Orientation,
}

impl From<&TrainConfig> for PatchConfig {
    fn from(c: &TrainConfig) -> Self {
        PatchConfig { size: c.patch_size, fg_fraction: c.fg_fraction, orientation: c.orientation }
    }
}

pub struct Patch {
    pub image: Raster<f32>,
    /// Majority-downsampled targets at output stride.
    pub labels: Raster<u8>,
    pub atlas: Option<Vec<Raster<f32>>>,
    pub section: usize,
    pub center: (usize, usize),
    pub angle: f64,
    pub foreground: bool,
}

/// Draws one training patch. The centre is an annotated pixel with
/// probability `fg_fraction`, otherwise a non-annotated one. Sampling the
/// rotated window directly is equivalent to rotating an enlarged crop and
/// cutting out its centre.
pub fn sample_patch(sections: &[PreparedSection], rng: &mut Rng, cfg: &PatchConfig) -> Result<Patch> {
    if sections.is_empty() {
        bail!(Invalid, "no training sections");
    }
    let si = rng.below(sections.len());
    let s = &sections[si];
    let (h, w) = s.dims();
    if cfg.size > h || cfg.size > w {
        bail!(Invalid, "patch {} larger than section {} ({h}x{w})", cfg.size, s.name);
    }
    let want_fg = rng.bernoulli(cfg.fg_fraction);
    let pool = match (want_fg, s.fg.is_empty(), s.rest.is_empty()) {
        (true, false, _) | (false, false, true) => &s.fg,
        _ => &s.rest,
    };
    let idx = pool[rng.below(pool.len())] as usize;
    let center = (idx / w, idx % w);
    let c = (center.0 as f64, center.1 as f64);
    let angle = match cfg.orientation {
        Orientation::Corrected => s.correction_at(c, cfg.size),
        Orientation::Random => rng.uniform() * TAU,
        Orientation::None => 0.0,
    };
    let (image, atlas) = s.extract(c, angle, cfg.size);
    let full = rotate_nearest(&s.labels, c, angle, (cfg.size, cfg.size), IGNORE);
    Ok(Patch {
        image,
        labels: majority_downsample(&full, OUTPUT_STRIDE),
        atlas,
        section: si,
        center,
        angle,
        foreground: std::ptr::eq(pool, &s.fg),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub phase: u8,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub curve: Vec<CurvePoint>,
}

impl TrainLog {
    /// Mean loss over the first / last `n` iterations.
    pub fn head_tail_means(&self, n: usize) -> (f64, f64) {
        let n = n.min(self.curve.len()).max(1);
        let mean = |s: &[CurvePoint]| s.iter().map(|p| p.loss).sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.curve[..n.min(self.curve.len())]), mean(&self.curve[self.curve.len().saturating_sub(n)..]))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "iteration,phase,loss")?;
        for p in &self.curve {
            writeln!(f, "{},{},{}", p.iteration, p.phase, p.loss)?;
        }
        f.flush()?;
        Ok(())
    }
}

fn stack_images(patches: &[Patch]) -> Result<Tensor<f32>> {
    let p = patches[0].image.height();
    let mut d = Vec::with_capacity(patches.len() * p * p);
    for x in patches {
        d.extend_from_slice(x.image.data());
    }
    Tensor::new(&[patches.len(), 1, p, p], d)
}

fn stack_atlas(patches: &[Patch], areas: usize) -> Result<Tensor<f32>> {
    let q = patches[0].image.height() / ATLAS_SCALE;
    let mut d = Vec::with_capacity(patches.len() * areas * q * q);
    for x in patches {
        let maps = x.atlas.as_ref().ok_or_else(|| Error::Invalid("patch without atlas".into()))?;
        for m in maps {
            d.extend_from_slice(m.data());
        }
    }
    Tensor::new(&[patches.len(), areas, q, q], d)
}

/// SGD training. Base models run a single phase; atlas-aware models first
/// see an all-zero atlas with the atlas path frozen (parameters and
/// batch-norm statistics), then the registered atlas with dropout.
pub fn train(model: &mut Model, sections: &[PreparedSection], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if sections.is_empty() {
        bail!(Invalid, "no training sections");
    }
    let classes = model.classes();
    if let Some(s) = sections.iter().find(|s| s.classes != classes) {
        bail!(Invalid, "section {} has {} classes, model has {classes}", s.name, s.classes);
    }
    let areas = model.config().atlas_channels;
    if model.has_atlas() {
        if let Some(s) = sections.iter().find(|s| s.atlas.as_ref().map(Vec::len) != Some(areas)) {
            bail!(Invalid, "section {} lacks a {areas}-channel atlas", s.name);
        }
    }
    if cfg.orientation == Orientation::Corrected {
        if let Some(s) = sections.iter().find(|s| s.orientation.is_none()) {
            bail!(Invalid, "section {} has no orientation field", s.name);
        }
    }
    let weights = cfg.class_weights.clone().unwrap_or_else(|| vec![1.0; classes]);
    let root = Rng::new(cfg.seed);
    let mut sampler = root.child(1);
    let mut dropout = root.child(2);
    let pcfg = PatchConfig::from(cfg);
    let phase1 = if model.has_atlas() { cfg.phase1() } else { 0 };
    let mut log = TrainLog::default();
    for it in 0..cfg.iterations {
        let frozen = it < phase1;
        let patches = (0..cfg.batch_size).map(|_| sample_patch(sections, &mut sampler, &pcfg)).collect::<Result<Vec<_>>>()?;
        let image = stack_images(&patches)?;
        let atlas = if model.has_atlas() {
            let a = stack_atlas(&patches, areas)?;
            Some(if frozen { Tensor::zeros(a.shape()) } else { atlas_dropout(&a, cfg.atlas_dropout, &mut dropout)? })
        } else {
            None
        };
        let targets: Vec<u8> = patches.iter().flat_map(|p| p.labels.data().iter().copied()).collect();
        let opts = StepOptions { freeze_atlas_stats: frozen, ..StepOptions::default() };
        let loss = model.loss_and_grads(&image, atlas.as_ref(), &targets, &weights, opts)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it, lr: cfg.lr });
        }
        sgd_step(model.learnable_mut(|name| !(frozen && name.starts_with("atl."))), cfg.lr)?;
        log.curve.push(CurvePoint { iteration: it, phase: if frozen || !model.has_atlas() { 1 } else { 2 }, loss });
        if (it + 1) % 100 == 0 {
            log::info!("iteration {} loss {loss:.4}", it + 1);
        }
    }
    model.clear_grads();
    Ok(log)
}

/// Anything that labels a prepared section on the stride-8 grid.
pub trait Predictor {
    fn predict(&self, section: &PreparedSection) -> Result<Raster<u8>>;
}

impl<F: Fn(&PreparedSection) -> Result<Raster<u8>>> Predictor for F {
    fn predict(&self, section: &PreparedSection) -> Result<Raster<u8>> {
        self(section)
    }
}

/// Patch-wise inference matching the training views: the section is cut
/// into `core`-pixel cells; each is predicted from a `patch`-pixel window
/// around it, rotated the same way training patches were, and the output
/// cells are mapped back to the section grid.
pub struct PatchPredictor<'a> {
    pub model: &'a Model,
    pub patch: usize,
    pub core: usize,
    pub orientation: Orientation,
    pub batch: usize,
}

impl<'a> PatchPredictor<'a> {
    pub fn new(model: &'a Model, patch: usize, orientation: Orientation) -> Self {
        PatchPredictor { model, patch, core: patch / 2, orientation, batch: 8 }
    }
}

impl Predictor for PatchPredictor<'_> {
    fn predict(&self, s: &PreparedSection) -> Result<Raster<u8>> {
        let (h, w) = s.dims();
        let p = self.patch;
        if self.core == 0 || self.core % OUTPUT_STRIDE != 0 || self.core > p {
            bail!(Invalid, "core {} must be a positive multiple of {OUTPUT_STRIDE} no larger than the patch", self.core);
        }
        if self.model.has_atlas() && s.atlas.is_none() {
            bail!(Invalid, "section {} has no atlas for an atlas-aware model", s.name);
        }
        let (gh, gw) = (h.div_ceil(OUTPUT_STRIDE), w.div_ceil(OUTPUT_STRIDE));
        let mut out = Raster::filled(gh, gw, 0u8);
        let mut jobs = Vec::new();
        for cy in (0..h).step_by(self.core) {
            for cx in (0..w).step_by(self.core) {
                jobs.push((cy, cx));
            }
        }
        let areas = self.model.config().atlas_channels;
        let q = p / ATLAS_SCALE;
        let cells = p / OUTPUT_STRIDE;
        for chunk in jobs.chunks(self.batch.max(1)) {
            let mut imgs = Vec::with_capacity(chunk.len() * p * p);
            let mut atl = Vec::new();
            let mut meta = Vec::new();
            for &(cy, cx) in chunk {
                let center = (cy as f64 + self.core as f64 / 2.0 - 0.5, cx as f64 + self.core as f64 / 2.0 - 0.5);
                let angle = match self.orientation {
                    Orientation::Corrected => s.correction_at(center, p),
                    _ => 0.0,
                };
                let (img, atlas) = s.extract(center, angle, p);
                imgs.extend_from_slice(img.data());
                if let Some(maps) = atlas.filter(|_| self.model.has_atlas()) {
                    for m in maps {
                        atl.extend_from_slice(m.data());
                    }
                }
                meta.push((cy, cx, center, angle));
            }
            let n = chunk.len();
            let image = Tensor::new(&[n, 1, p, p], imgs)?;
            let atlas = if self.model.has_atlas() { Some(Tensor::new(&[n, areas, q, q], atl)?) } else { None };
            let scores = self.model.infer(&image, atlas.as_ref())?;
            let labels = crate::net::argmax_labels(&scores)?;
            for (b, &(cy, cx, center, angle)) in meta.iter().enumerate() {
                for gy in cy / OUTPUT_STRIDE..((cy + self.core) / OUTPUT_STRIDE).min(gh) {
                    for gx in cx / OUTPUT_STRIDE..((cx + self.core) / OUTPUT_STRIDE).min(gw) {
                        let sy = (gy * OUTPUT_STRIDE) as f64 + (OUTPUT_STRIDE as f64 - 1.0) / 2.0;
                        let sx = (gx * OUTPUT_STRIDE) as f64 + (OUTPUT_STRIDE as f64 - 1.0) / 2.0;
                        let (py, px) = rotated_target(center, (p, p), sy, sx, angle);
                        let cell = |v: f64| (((v + 0.5) / OUTPUT_STRIDE as f64).floor().max(0.0) as usize).min(cells - 1);
                        out.set(gy, gx, labels[b][cell(py) * cells + cell(px)]);
                    }
                }
            }
        }
        Ok(out)
    }
}

pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<Raster<u8>>,
    pub truths: Vec<Raster<u8>>,
}

/// Predicts every section and aggregates the metrics against the
/// majority-downsampled ground truth (confusion matrices summed first).
pub fn evaluate(predictor: &impl Predictor, sections: &[PreparedSection], class_names: &[String]) -> Result<Evaluation> {
    if sections.is_empty() {
        bail!(Invalid, "nothing to evaluate");
    }
    let mut acc = EvalAccumulator::new(class_names.to_vec());
    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    for s in sections {
        let pred = predictor.predict(s)?;
        let gt = majority_downsample(&s.truth, OUTPUT_STRIDE);
        if pred.dims() != gt.dims() {
            bail!(Shape, "{}: prediction {:?} vs ground truth {:?}", s.name, pred.dims(), gt.dims());
        }
        acc.add(&pred, &gt, None)?;
        predictions.push(pred);
        truths.push(gt);
    }
    Ok(Evaluation { report: acc.report()?, predictions, truths })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmwmConfig {
    pub step1: TrainConfig,
    pub step2: TrainConfig,
    /// Weight of true-background pixels in the cortex step.
    pub background_weight: f64,
    /// Number of sections with gm/wm/bg labels used by the second step.
    pub subset: usize,
}

impl Default for GmwmConfig {
    fn default() -> Self {
        let step = TrainConfig { orientation: Orientation::None, ..TrainConfig::desk() };
        GmwmConfig { step1: step.clone(), step2: step, background_weight: 0.5, subset: 20 }
    }
}

pub struct GmwmOutcome {
    pub cortex: Model,
    pub tissue: Model,
    pub cortex_log: TrainLog,
    pub tissue_log: TrainLog,
}

/// Two-step gm/wm/bg segmentation: a cortex-vs-background model trained on
/// all sections with down-weighted background, then a three-class model on
/// a labelled subset, initialised from the first.
pub fn train_gmwm_two_step(sections: &[&Section], cfg: &GmwmConfig, seed: u64) -> Result<GmwmOutcome> {
    if sections.is_empty() || cfg.subset == 0 {
        bail!(Invalid, "two-step training needs sections and a nonempty subset");
    }
    let step1: Vec<PreparedSection> = sections.iter().map(|s| prepare(s, Task::CortexBackground, false, false)).collect::<Result<_>>()?;
    let mut cortex = build_base_net(&ArchitectureConfig::desk_base(2), seed)?;
    let c1 = TrainConfig { class_weights: Some(vec![1.0, cfg.background_weight]), ..cfg.step1.clone() };
    let cortex_log = train(&mut cortex, &step1, &c1)?;
    drop(step1);
    let step2: Vec<PreparedSection> = sections
        .iter()
        .take(cfg.subset)
        .map(|s| prepare(s, Task::Tissue, false, cfg.step2.orientation == Orientation::Corrected))
        .collect::<Result<_>>()?;
    let mut tissue = build_base_net(&ArchitectureConfig::desk_base(3), seed ^ 0x2)?;
    tissue.copy_matching_from(&cortex);
    let tissue_log = train(&mut tissue, &step2, &cfg.step2)?;
    Ok(GmwmOutcome { cortex, tissue, cortex_log, tissue_log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cortexfield::{BG, WM};
    use crate::nn::loss::softmax_weighted_ce;
    use crate::synthgen::{generate_section, BrainStyle, SynthConfig};
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn section(seed: u64) -> Section {
        let cfg = SynthConfig { size: 256, patch_size: 64, min_parcel_px: 16.0, ..SynthConfig::benchmark() };
        generate_section(&BrainStyle::stock(1, 3)[0], 0, &cfg, 0, seed).unwrap()
    }

    fn pcfg(fg: f64, o: Orientation) -> PatchConfig {
        PatchConfig { size: 64, fg_fraction: fg, orientation: o }
    }

    #[test]
    fn foreground_fraction_is_respected() {
        let s = vec![prepare(&section(1), Task::Areas, false, false).unwrap()];
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let p = sample_patch(&s, &mut rng, &pcfg(1.0, Orientation::None)).unwrap();
            assert!(p.foreground);
            assert_ne!(section(1).labels.get(p.center.0, p.center.1), UNLABELED);
        }
        let hits = (0..10_000).filter(|_| sample_patch(&s, &mut rng, &pcfg(0.85, Orientation::None)).unwrap().foreground).count();
        // 0.85 ± 0.02 covers > 5 standard deviations of a 10^4-draw binomial
        assert!((8300..=8700).contains(&hits), "{hits}");
    }

    #[test]
    fn sampling_is_seeded() {
        let s = vec![prepare(&section(2), Task::Areas, true, true).unwrap()];
        let draw = |seed| {
            let mut rng = Rng::new(seed);
            (0..5).map(|_| sample_patch(&s, &mut rng, &pcfg(0.85, Orientation::Corrected)).unwrap()).collect::<Vec<_>>()
        };
        let (a, b) = (draw(9), draw(9));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((x.center, x.angle), (y.center, y.angle));
            assert_eq!(x.image, y.image);
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.atlas, y.atlas);
        }
        assert_ne!(a[0].center, a[1].center);
        assert_eq!(a[0].labels.dims(), (8, 8));
        assert_eq!(a[0].atlas.as_ref().unwrap()[0].dims(), (16, 16));
    }

    #[test]
    fn oversized_patch_rejected() {
        let s = vec![prepare(&section(1), Task::Areas, false, false).unwrap()];
        let c = PatchConfig { size: 512, ..pcfg(0.5, Orientation::None) };
        assert!(sample_patch(&s, &mut Rng::new(1), &c).is_err());
        assert!(sample_patch(&[], &mut Rng::new(1), &pcfg(0.5, Orientation::None)).is_err());
    }

    #[test]
    fn corrected_patches_have_cortex_pointing_up() {
        let sec = section(4);
        let s = vec![prepare(&sec, Task::Areas, false, true).unwrap()];
        let tissue = vec![prepare(&sec, Task::Tissue, false, true).unwrap()];
        let mut rng = Rng::new(3);
        let mut checked = 0;
        for _ in 0..40 {
            let p = sample_patch(&s, &mut rng, &pcfg(1.0, Orientation::Corrected)).unwrap();
            // the same rotation applied to the tissue mask: wm above bg
            let t = rotate_nearest(&tissue[0].labels, (p.center.0 as f64, p.center.1 as f64), p.angle, (64, 64), IGNORE);
            let rows = |r: std::ops::Range<usize>, v: u8| r.clone().flat_map(|y| (0..64).map(move |x| (y, x))).filter(|&(y, x)| t.get(y, x) == v).count();
            let (bg_top, bg_bottom) = (rows(0..32, BG), rows(32..64, BG));
            let (wm_top, wm_bottom) = (rows(0..32, WM), rows(32..64, WM));
            if bg_top + bg_bottom > 50 && wm_top + wm_bottom > 50 {
                assert!(wm_top > wm_bottom && bg_bottom > bg_top, "patch at {:?}", p.center);
                checked += 1;
            }
        }
        assert!(checked > 5);
    }

    #[test]
    fn majority_vote_cells() {
        let l = Raster::from_fn(8, 12, |y, x| if x < 8 { u8::from(y >= 4) * 2 + 1 } else { IGNORE });
        let m = majority_downsample(&l, 8);
        // 32 ones vs 32 threes: tie to the smaller id; partial cell all ignored
        assert_eq!(m.data(), &[1, IGNORE]);
        let l = Raster::from_fn(3, 3, |y, _| y as u8);
        assert_eq!(majority_downsample(&l, 2).data(), &[0, 0, 2, 2]);
    }

    #[test]
    fn weighted_cortex_loss_values() {
        // two classes: cortex 0, background 1; p(background) = 0.25
        let logits = Tensor::<f64>::new(&[1, 2, 1, 1], vec![3f64.ln(), 0.0]).unwrap();
        let w = [1.0, 0.5];
        let (bg, _) = softmax_weighted_ce(&logits, &[1], &w).unwrap();
        assert!((bg - 0.5 * -(0.25f64).ln()).abs() < 1e-12);
        assert!((bg - std::f64::consts::LN_2).abs() < 1e-12);
        let logits = Tensor::<f64>::new(&[1, 2, 1, 1], vec![0.0, 3f64.ln()]).unwrap();
        let (cx, _) = softmax_weighted_ce(&logits, &[0], &w).unwrap();
        assert!((cx - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let sec = section(6);
        let s = vec![prepare(&sec, Task::Areas, true, true).unwrap()];
        let mut cfg_arch = ArchitectureConfig::desk_atlas_aware(sec.classes(), sec.n_areas());
        cfg_arch.name = "t".into();
        let mut m = Model::new(&cfg_arch, 1).unwrap();
        let before = m.clone();
        let cfg = TrainConfig { patch_size: 64, batch_size: 2, lr: 0.0, iterations: 1, ..TrainConfig::default() };
        train(&mut m, &s, &cfg).unwrap();
        for ((n, a), (_, b)) in m.named_tensors().into_iter().zip(before.named_tensors()) {
            if !n.contains("running") {
                assert_eq!(a.data(), b.data(), "{n}");
            }
        }
    }

    #[test]
    fn phase_one_freezes_atlas_path() {
        let sec = section(7);
        let s = vec![prepare(&sec, Task::Areas, true, true).unwrap()];
        let arch = ArchitectureConfig::desk_atlas_aware(sec.classes(), sec.n_areas());
        let mut m = Model::new(&arch, 2).unwrap();
        let before = m.clone();
        let cfg = TrainConfig { patch_size: 64, batch_size: 2, iterations: 3, phase1_iterations: Some(3), ..TrainConfig::default() };
        let log = train(&mut m, &s, &cfg).unwrap();
        assert!(log.curve.iter().all(|p| p.phase == 1));
        let mut changed = 0;
        for ((n, a), (_, b)) in m.named_tensors().into_iter().zip(before.named_tensors()) {
            if n.starts_with("atl.") {
                assert_eq!(a.data(), b.data(), "{n}");
            } else if a.data() != b.data() {
                changed += 1;
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn training_is_repeatable_and_checks_classes() {
        let sec = section(8);
        let s = vec![prepare(&sec, Task::Areas, false, true).unwrap()];
        let cfg = TrainConfig { patch_size: 64, batch_size: 2, iterations: 3, ..TrainConfig::default() };
        let run = || {
            let mut m = build_base_net(&ArchitectureConfig::desk_base(sec.classes()), 4).unwrap();
            let log = train(&mut m, &s, &cfg).unwrap();
            (m, log)
        };
        let ((m1, l1), (m2, l2)) = (run(), run());
        assert_eq!(l1, l2);
        assert_eq!(m1.named_tensors(), m2.named_tensors());
        let mut wrong = build_base_net(&ArchitectureConfig::desk_base(3), 4).unwrap();
        assert!(train(&mut wrong, &s, &cfg).is_err());
        let bad = TrainConfig { fg_fraction: 1.5, ..cfg };
        assert!(train(&mut build_base_net(&ArchitectureConfig::desk_base(sec.classes()), 4).unwrap(), &s, &bad).is_err());
    }

    #[test]
    fn huge_lr_aborts_with_diagnostics() {
        let sec = section(9);
        let s = vec![prepare(&sec, Task::Areas, false, false).unwrap()];
        let cfg = TrainConfig { patch_size: 64, batch_size: 2, iterations: 50, lr: 1e30, orientation: Orientation::None, ..TrainConfig::default() };
        let mut m = build_base_net(&ArchitectureConfig::desk_base(sec.classes()), 4).unwrap();
        match train(&mut m, &s, &cfg) {
            Err(Error::NonFiniteLoss { lr, .. }) => assert_eq!(lr, 1e30),
            other => panic!("expected a non-finite loss, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn evaluation_with_stub_predictors() {
        let secs: Vec<_> = [10, 11].iter().map(|&s| prepare(&section(s), Task::Areas, false, false).unwrap()).collect();
        let names = section(10).meta.area_names.clone();
        let names = crate::dataset::class_names(&names);
        let perfect = |s: &PreparedSection| Ok(majority_downsample(&s.truth, OUTPUT_STRIDE));
        let e = evaluate(&perfect, &secs, &names).unwrap();
        assert_eq!(e.report.mean_dice, 1.0);
        assert_eq!(e.report.eps, 0.0);
        let bg = (names.len() - 1) as u8;
        let constant = |s: &PreparedSection| {
            let (h, w) = s.dims();
            Ok(Raster::filled(h.div_ceil(8), w.div_ceil(8), bg))
        };
        let e = evaluate(&constant, &secs, &names).unwrap();
        for (k, d) in e.report.per_class_dice.iter().enumerate() {
            if k as u8 != bg {
                assert_eq!(d.unwrap_or(0.0), 0.0);
            } else {
                assert!(d.unwrap() > 0.0);
            }
        }
        let mut sum = crate::metrics::ConfusionMatrix::new(names.len());
        for s in &secs {
            let one = evaluate(&constant, std::slice::from_ref(s), &names).unwrap();
            sum.merge(&one.report.confusion).unwrap();
        }
        assert_eq!(sum, e.report.confusion);
    }

    #[test]
    fn patch_predictor_covers_grid() {
        let sec = section(12);
        let s = prepare(&sec, Task::Areas, true, true).unwrap();
        let arch = ArchitectureConfig::desk_atlas_aware(sec.classes(), sec.n_areas());
        let m = Model::new(&arch, 3).unwrap();
        let p = PatchPredictor::new(&m, 64, Orientation::Corrected);
        let a = p.predict(&s).unwrap();
        assert_eq!(a.dims(), (32, 32));
        assert_eq!(a, p.predict(&s).unwrap());
        assert!(a.data().iter().all(|&l| (l as usize) < sec.classes()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn extension_matches_recount(seed in 0u64..500) {
            let sec = section(seed);
            let ext = sec.extended_labels().unwrap();
            let n = sec.n_areas();
            let mut hist = vec![0usize; n + 3];
            for (&l, &t) in sec.labels.data().iter().zip(sec.segmask.as_ref().unwrap().data()) {
                hist[if l != UNLABELED { l as usize - 1 } else { n + t as usize }] += 1;
            }
            let mut got = vec![0usize; n + 3];
            for &l in ext.data() {
                got[l as usize] += 1;
            }
            prop_assert_eq!(got, hist);
        }

        #[test]
        fn majority_is_a_mode(data in proptest::collection::vec(0u8..4, 64)) {
            let r = Raster::new(8, 8, data.clone()).unwrap();
            let m = majority_downsample(&r, 8).get(0, 0);
            let count = |v: u8| data.iter().filter(|&&d| d == v).count();
            for v in 0..4u8 {
                prop_assert!(count(m) > count(v) || (count(m) == count(v) && m <= v));
            }
        }
    }
}
