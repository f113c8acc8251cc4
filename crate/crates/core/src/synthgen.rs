//! Synthetic cytoarchitectonic sections.
//!
//! Each section is a closed cortical ribbon around a white-matter core.
//! The ribbon is cut into angular parcels; each parcel carries a laminar
//! dot texture. Parcels tied to a mapped area get a label and an atlas
//! channel, the rest are unmapped cortex (gm). Brains ("styles") differ in
//! geometry and intensity; consecutive z indices drift slowly.

use serde::{Deserialize, Serialize};

use crate::atlasio::{estimate_affine, resample_atlas, AffineTransform2D, ProbabilisticAtlas};
use crate::cortexfield::{BG, GM, WM};
use crate::dataset::{class_names, AtlasRecord, Dataset, Section, SectionMeta, Split, ATLAS_SCALE, UNLABELED};
use crate::error::{bail, Result};
use crate::raster::{gaussian_blur, Raster};
use crate::rng::{mix64, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaProfile {
    pub name: String,
    /// Relative lamina thicknesses, outer surface first.
    pub thickness: Vec<f64>,
    /// Dot probability per pixel in each lamina.
    pub density: Vec<f64>,
}

impl AreaProfile {
    pub fn new(name: &str, thickness: &[f64], density: &[f64]) -> Self {
        AreaProfile { name: name.into(), thickness: thickness.to_vec(), density: density.to_vec() }
    }

    /// Dot density at relative depth `d` (0 outer surface, 1 white matter).
    pub fn density_at(&self, d: f64) -> f64 {
        let total: f64 = self.thickness.iter().sum();
        let mut acc = 0.0;
        for (t, &p) in self.thickness.iter().zip(&self.density) {
            acc += t / total;
            if d < acc {
                return p;
            }
        }
        *self.density.last().unwrap_or(&0.0)
    }

    fn validate(&self) -> Result<()> {
        if self.thickness.is_empty() || self.thickness.len() != self.density.len() {
            bail!(Invalid, "profile {}: lamina thickness and density lists differ", self.name);
        }
        if self.thickness.iter().any(|&t| t <= 0.0) || self.density.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            bail!(Invalid, "profile {}: bad lamina values", self.name);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parcel {
    /// Index into the mapped areas, or `None` for unmapped cortex.
    pub area: Option<usize>,
    pub arc_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub size: usize,
    /// Training patch side the data is meant for; the section must be at least 4× larger.
    pub patch_size: usize,
    pub areas: Vec<AreaProfile>,
    pub unmapped: AreaProfile,
    /// Parcels in angular order; arcs must sum to 360.
    pub layout: Vec<Parcel>,
    /// Fraction of areas hidden from the partial annotation of each section.
    pub hidden_fraction: f64,
    /// Minimum parcel arc length along the mean outer radius, in pixels.
    pub min_parcel_px: f64,
    /// Atlas smoothing, full-resolution pixels.
    pub atlas_blur: f64,
    pub jitter_rotation_deg: f64,
    pub jitter_scale: f64,
    /// Quarter-resolution pixels.
    pub jitter_shift: f64,
    pub landmarks: usize,
    pub landmark_noise: f64,
}

impl SynthConfig {
    /// Four mapped areas: two distinct ones (A, B) and a pair of
    /// texture twins (T1, T2) that only location can tell apart, each
    /// separated by a strip of unmapped cortex.
    pub fn benchmark() -> Self {
        let a = AreaProfile::new("A", &[0.2, 0.3, 0.2, 0.3], &[0.02, 0.10, 0.02, 0.06]);
        let b = AreaProfile::new("B", &[0.3, 0.2, 0.3, 0.2], &[0.08, 0.02, 0.10, 0.02]);
        let twin = [0.25; 4];
        let twin_density = [0.02, 0.02, 0.12, 0.12];
        let p = |area, arc_deg| Parcel { area, arc_deg };
        SynthConfig {
            size: 512,
            patch_size: 128,
            areas: vec![
                a,
                AreaProfile::new("T1", &twin, &twin_density),
                b,
                AreaProfile::new("T2", &twin, &twin_density),
            ],
            unmapped: AreaProfile::new("unmapped", &[1.0], &[0.05]),
            layout: vec![
                p(Some(0), 75.0),
                p(None, 20.0),
                p(Some(1), 65.0),
                p(None, 20.0),
                p(Some(2), 75.0),
                p(None, 20.0),
                p(Some(3), 65.0),
                p(None, 20.0),
            ],
            hidden_fraction: 0.25,
            min_parcel_px: 32.0,
            atlas_blur: 16.0,
            jitter_rotation_deg: 3.0,
            jitter_scale: 0.03,
            jitter_shift: 2.0,
            landmarks: 8,
            landmark_noise: 0.3,
        }
    }

    /// `n` distinct areas of equal extent with unmapped strips between them.
    pub fn uniform(n: usize) -> Self {
        let mut cfg = Self::benchmark();
        cfg.areas = (0..n)
            .map(|k| {
                let density = (0..4).map(|l| 0.02 + 0.10 * (((k * 7 + l * 3) % 5) as f64 / 4.0)).collect::<Vec<_>>();
                let thickness = (0..4).map(|l| 1.0 + ((k + l) % 3) as f64).collect::<Vec<_>>();
                AreaProfile::new(&format!("area{:02}", k + 1), &thickness, &density)
            })
            .collect();
        let arc = 360.0 / n.max(1) as f64;
        cfg.layout = (0..n)
            .flat_map(|k| [Parcel { area: Some(k), arc_deg: arc * 0.8 }, Parcel { area: None, arc_deg: arc * 0.2 }])
            .collect();
        cfg
    }

    pub fn area_names(&self) -> Vec<String> {
        self.areas.iter().map(|a| a.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.areas.len() < 2 {
            bail!(Invalid, "need at least 2 areas, got {}", self.areas.len());
        }
        if self.areas.len() + 3 > 255 {
            bail!(Invalid, "too many areas for 8-bit labels");
        }
        if self.patch_size == 0 || self.size < 4 * self.patch_size {
            bail!(Invalid, "section size {} must be at least 4x the patch size {}", self.size, self.patch_size);
        }
        if self.size % ATLAS_SCALE != 0 {
            bail!(Invalid, "section size {} not divisible by {ATLAS_SCALE}", self.size);
        }
        if !(0.0..=1.0).contains(&self.hidden_fraction) {
            bail!(Invalid, "hidden fraction {} outside [0, 1]", self.hidden_fraction);
        }
        for p in self.areas.iter().chain(std::iter::once(&self.unmapped)) {
            p.validate()?;
        }
        let total: f64 = self.layout.iter().map(|p| p.arc_deg).sum();
        if (total - 360.0).abs() > 1e-6 {
            bail!(Invalid, "parcel arcs sum to {total}, not 360");
        }
        for (k, _) in self.areas.iter().enumerate() {
            if !self.layout.iter().any(|p| p.area == Some(k)) {
                bail!(Invalid, "area {} has no parcel", self.areas[k].name);
            }
        }
        if let Some(p) = self.layout.iter().find(|p| p.area.is_some_and(|a| a >= self.areas.len())) {
            bail!(Invalid, "parcel refers to unknown area {:?}", p.area);
        }
        if self.landmarks < 3 {
            bail!(Invalid, "need at least 3 landmarks");
        }
        Ok(())
    }
}

/// Per-brain appearance and geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrainStyle {
    pub name: String,
    /// Outer radius as a fraction of the section size.
    pub radius: f64,
    pub thickness: f64,
    pub center_offset: (f64, f64),
    pub wave_amplitude: f64,
    pub wave_lobes: u32,
    pub wave_phase: f64,
    /// Rotation of the parcel layout, degrees.
    pub rotation_deg: f64,
    /// Per-z drift of the layout (degrees) and of the wave phase (radians).
    pub z_drift_deg: f64,
    pub z_phase_drift: f64,
    pub background: f64,
    pub gm_level: f64,
    pub wm_level: f64,
    pub dot_level: f64,
    pub dot_radius: f64,
    pub density_scale: f64,
    pub noise_sigma: f64,
}

impl BrainStyle {
    pub fn sample(index: usize, rng: &mut Rng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.uniform_range(lo, hi);
        BrainStyle {
            name: format!("brain{:02}", index + 1),
            radius: u(0.31, 0.35),
            thickness: u(0.105, 0.125),
            center_offset: (u(-0.02, 0.02), u(-0.02, 0.02)),
            wave_amplitude: u(0.01, 0.025),
            wave_lobes: 3 + (u(0.0, 3.0) as u32),
            wave_phase: u(0.0, std::f64::consts::TAU),
            rotation_deg: u(-6.0, 6.0),
            z_drift_deg: u(0.5, 1.5),
            z_phase_drift: u(0.05, 0.15),
            background: u(232.0, 245.0),
            gm_level: u(190.0, 212.0),
            wm_level: u(205.0, 225.0),
            dot_level: u(50.0, 95.0),
            dot_radius: u(1.2, 1.8),
            density_scale: u(0.85, 1.15),
            noise_sigma: u(4.0, 9.0),
        }
    }

    pub fn stock(n: usize, seed: u64) -> Vec<Self> {
        (0..n).map(|i| Self::sample(i, &mut Rng::new(mix64(seed ^ 0x5717_e000) ^ i as u64))).collect()
    }
}

struct Geometry {
    center: (f64, f64),
    r_mean: f64,
    thickness: f64,
    amplitude: f64,
    lobes: f64,
    phase: f64,
    rotation: f64,
}

impl Geometry {
    fn new(style: &BrainStyle, size: usize, z: usize) -> Self {
        let s = size as f64;
        Geometry {
            center: (s / 2.0 + style.center_offset.0 * s - 0.5, s / 2.0 + style.center_offset.1 * s - 0.5),
            r_mean: style.radius * s,
            thickness: style.thickness * s,
            amplitude: style.wave_amplitude * s,
            lobes: style.wave_lobes as f64,
            phase: style.wave_phase + z as f64 * style.z_phase_drift,
            rotation: style.rotation_deg + z as f64 * style.z_drift_deg,
        }
    }

    /// (tissue, relative depth, layout angle in degrees)
    fn classify(&self, y: f64, x: f64) -> (u8, f64, f64) {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        let r = dy.hypot(dx);
        let phi = dy.atan2(dx);
        let r_out = self.r_mean + self.amplitude * (self.lobes * phi + self.phase).sin();
        let t = self.thickness * (1.0 + 0.08 * (2.0 * phi + self.phase).sin());
        let deg = (phi.to_degrees() - self.rotation).rem_euclid(360.0);
        if r > r_out {
            (BG, 0.0, deg)
        } else if r < r_out - t {
            (WM, 1.0, deg)
        } else {
            (GM, (r_out - r) / t, deg)
        }
    }
}

fn parcel_at(layout: &[Parcel], deg: f64) -> &Parcel {
    let mut acc = 0.0;
    for p in layout {
        acc += p.arc_deg;
        if deg < acc {
            return p;
        }
    }
    layout.last().expect("validated layout")
}

/// Quarter-resolution area indicators, blurred; shape (areas, H/4, W/4).
fn indicator_atlas(full: &Raster<u8>, n_areas: usize, blur: f64) -> Tensor<f32> {
    let (h, w) = (full.height() / ATLAS_SCALE, full.width() / ATLAS_SCALE);
    let norm = (ATLAS_SCALE * ATLAS_SCALE) as f64;
    let mut data = Vec::with_capacity(n_areas * h * w);
    for k in 0..n_areas {
        let id = k as u8 + 1;
        let coarse = Raster::from_fn(h, w, |y, x| {
            let mut c = 0;
            for yy in 0..ATLAS_SCALE {
                for xx in 0..ATLAS_SCALE {
                    c += (full.get(y * ATLAS_SCALE + yy, x * ATLAS_SCALE + xx) == id) as usize;
                }
            }
            c as f64 / norm
        });
        let b = gaussian_blur(&coarse, blur / ATLAS_SCALE as f64);
        data.extend(b.data().iter().map(|&v| v.clamp(0.0, 1.0) as f32));
    }
    Tensor::new(&[n_areas, h, w], data).expect("sized above")
}

/// The atlas in section space before jitter (exposed for testing).
pub fn unjittered_atlas(section: &Section, cfg: &SynthConfig) -> Tensor<f32> {
    indicator_atlas(section.full_labels.as_ref().unwrap_or(&section.labels), section.n_areas(), cfg.atlas_blur)
}

pub fn section_seed(dataset_seed: u64, style: usize, z: usize) -> u64 {
    mix64(dataset_seed ^ mix64(((style as u64) << 32) | z as u64))
}

pub fn generate_section(style: &BrainStyle, style_index: usize, cfg: &SynthConfig, z: usize, seed: u64) -> Result<Section> {
    cfg.validate()?;
    let n = cfg.areas.len();
    let size = cfg.size;
    let geo = Geometry::new(style, size, z);
    if geo.r_mean + geo.amplitude + 8.0 > size as f64 / 2.0 - style.center_offset.0.abs().max(style.center_offset.1.abs()) * size as f64 {
        bail!(Invalid, "style {}: ribbon does not fit in a {size}px section", style.name);
    }
    if geo.r_mean - geo.amplitude - geo.thickness * 1.1 < 8.0 {
        bail!(Invalid, "style {}: ribbon leaves no white matter", style.name);
    }
    let circumference = std::f64::consts::TAU * geo.r_mean;
    if let Some(p) = cfg.layout.iter().find(|p| p.arc_deg / 360.0 * circumference < cfg.min_parcel_px) {
        bail!(Invalid, "parcel of {}° is thinner than {} px", p.arc_deg, cfg.min_parcel_px);
    }

    let root = Rng::new(seed);
    let mut dots = root.child(1);
    let mut noise = root.child(2);
    let mut pick = root.child(3);

    let mut segmask = Raster::filled(size, size, BG);
    let mut full = Raster::filled(size, size, UNLABELED);
    let mut stain = Raster::filled(size, size, 0.0f64);
    let reach = style.dot_radius.ceil() as isize + 1;
    for y in 0..size {
        for x in 0..size {
            let (tissue, depth, deg) = geo.classify(y as f64, x as f64);
            segmask.set(y, x, tissue);
            let p = match tissue {
                GM => {
                    let parcel = parcel_at(&cfg.layout, deg);
                    let profile = match parcel.area {
                        Some(k) => {
                            full.set(y, x, k as u8 + 1);
                            &cfg.areas[k]
                        }
                        None => &cfg.unmapped,
                    };
                    profile.density_at(depth)
                }
                WM => 0.004,
                _ => 0.0,
            } * style.density_scale;
            if p > 0.0 && dots.bernoulli(p.min(1.0)) {
                let cy = y as f64 + dots.uniform_range(-0.5, 0.5);
                let cx = x as f64 + dots.uniform_range(-0.5, 0.5);
                let strength = dots.uniform_range(0.7, 1.0);
                for yy in y as isize - reach..=y as isize + reach {
                    for xx in x as isize - reach..=x as isize + reach {
                        if yy < 0 || xx < 0 || yy >= size as isize || xx >= size as isize {
                            continue;
                        }
                        let d = (yy as f64 - cy).hypot(xx as f64 - cx);
                        let cover = (style.dot_radius + 0.5 - d).clamp(0.0, 1.0) * strength;
                        let s = stain.get(yy as usize, xx as usize);
                        if cover > s {
                            stain.set(yy as usize, xx as usize, cover);
                        }
                    }
                }
            }
        }
    }
    let mut image = Raster::filled(size, size, 0u8);
    for y in 0..size {
        for x in 0..size {
            let level = match segmask.get(y, x) {
                GM => style.gm_level,
                WM => style.wm_level,
                _ => style.background,
            };
            let s = stain.get(y, x);
            let v = level * (1.0 - s) + style.dot_level * s + style.noise_sigma * noise.normal();
            image.set(y, x, v.round().clamp(0.0, 255.0) as u8);
        }
    }

    let hide = (cfg.hidden_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, pick.below(i + 1));
    }
    let mut hidden: Vec<usize> = order[..hide.min(n)].to_vec();
    hidden.sort_unstable();
    let labels = full.map(|l| if l != UNLABELED && hidden.contains(&(l as usize - 1)) { UNLABELED } else { l });

    // Atlas space relates to section space by a known affine jitter.
    let base = indicator_atlas(&full, n, cfg.atlas_blur);
    let (ah, aw) = (size / ATLAS_SCALE, size / ATLAS_SCALE);
    let mut jr = root.child(4);
    let theta = jr.uniform_range(-cfg.jitter_rotation_deg, cfg.jitter_rotation_deg).to_radians();
    let scale = 1.0 + jr.uniform_range(-cfg.jitter_scale, cfg.jitter_scale);
    let shift = (jr.uniform_range(-cfg.jitter_shift, cfg.jitter_shift), jr.uniform_range(-cfg.jitter_shift, cfg.jitter_shift));
    let c = ((ah as f64 - 1.0) / 2.0, (aw as f64 - 1.0) / 2.0);
    let (sn, cs) = (theta.sin() * scale, theta.cos() * scale);
    // atlas (y, x) -> section (y, x): rotate/scale about the grid centre, then shift
    let truth = AffineTransform2D::new([
        [cs, -sn, c.0 + shift.0 - cs * c.0 + sn * c.1],
        [sn, cs, c.1 + shift.1 - sn * c.0 - cs * c.1],
    ])?;
    let maps = resample_atlas(&base, &truth.inverse()?, (ah, aw))?;
    let mut landmarks = Vec::with_capacity(cfg.landmarks);
    for _ in 0..cfg.landmarks {
        let q = (jr.uniform_range(0.1, 0.9) * ah as f64, jr.uniform_range(0.1, 0.9) * aw as f64);
        let p = truth.apply(q);
        let p = (p.0 + cfg.landmark_noise * jr.normal(), p.1 + cfg.landmark_noise * jr.normal());
        landmarks.push((q, p));
    }
    estimate_affine(&landmarks)?;

    let area_names = cfg.area_names();
    let meta = SectionMeta {
        name: format!("{}_z{:03}", style.name, z),
        brain: style.name.clone(),
        style_index,
        z,
        seed,
        area_names: area_names.clone(),
        atlas_scale: ATLAS_SCALE,
        hidden_areas: hidden,
    };
    let section = Section {
        meta,
        image,
        labels,
        full_labels: Some(full),
        segmask: Some(segmask),
        atlas: ProbabilisticAtlas::new(area_names.clone(), maps)?,
        atlas_record: AtlasRecord { areas: area_names, landmarks, true_transform: Some(truth) },
    };
    section.validate()?;
    Ok(section)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub sections: usize,
    pub styles: usize,
    pub seed: u64,
    pub synth: SynthConfig,
}

impl DatasetSpec {
    pub fn styles(&self) -> Vec<BrainStyle> {
        BrainStyle::stock(self.styles, self.seed)
    }

    /// Sections per style; earlier styles take the remainder.
    pub fn per_style(&self, style: usize) -> usize {
        self.sections / self.styles + usize::from(style < self.sections % self.styles)
    }
}

/// Every third consecutive section of a brain is held out.
pub fn split_of(z: usize) -> Split {
    if z % 3 == 2 {
        Split::Test
    } else {
        Split::Train
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.styles == 0 || spec.sections < spec.styles {
        bail!(Invalid, "{} sections cannot cover {} styles", spec.sections, spec.styles);
    }
    spec.synth.validate()?;
    let styles = spec.styles();
    let mut sections = Vec::with_capacity(spec.sections);
    let mut splits = Vec::with_capacity(spec.sections);
    for (si, style) in styles.iter().enumerate() {
        for z in 0..spec.per_style(si) {
            sections.push(generate_section(style, si, &spec.synth, z, section_seed(spec.seed, si, z))?);
            splits.push(split_of(z));
        }
    }
    Ok(Dataset {
        area_names: spec.synth.area_names(),
        sections,
        splits,
        seed: spec.seed,
        generator: serde_json::to_value(spec)?,
    })
}

/// Further sections of one brain, continuing after the dataset's z range.
pub fn generate_followup(spec: &DatasetSpec, style: usize, count: usize) -> Result<Vec<Section>> {
    let styles = spec.styles();
    let st = styles.get(style).ok_or_else(|| crate::Error::Invalid(format!("no style {style}")))?;
    let z0 = spec.per_style(style);
    (z0..z0 + count).map(|z| generate_section(st, style, &spec.synth, z, section_seed(spec.seed, style, z))).collect()
}

pub fn dataset_class_names(spec: &DatasetSpec) -> Vec<String> {
    class_names(&spec.synth.area_names())
}
