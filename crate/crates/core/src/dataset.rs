//! Sections and datasets, in memory and on disk.
//!
//! Class ids for an `n`-area dataset: areas `0..n`, then gm = n, wm = n+1,
//! bg = n+2. On disk, `labels.pgm` stores 0 for unlabeled and `k+1` for
//! area `k`; `segmask.pgm` stores the tissue codes of [`crate::cortexfield`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::atlasio::{estimate_affine, resample_atlas, AffineTransform2D, ProbabilisticAtlas};
use crate::cortexfield::{BG, GM, WM};
use crate::error::{bail, Error, Result};
use crate::raster::{read_pgm, write_pgm, Raster};
use crate::tensor::Tensor;

pub const ATLAS_SCALE: usize = crate::arch::ATLAS_SCALE;
pub const UNLABELED: u8 = 0;

pub fn class_names(areas: &[String]) -> Vec<String> {
    let mut v = areas.to_vec();
    v.extend(["gm", "wm", "bg"].map(String::from));
    v
}

/// Extended class id of a tissue code for an `n`-area dataset.
pub fn tissue_class(n_areas: usize, tissue: u8) -> u8 {
    n_areas as u8
        + match tissue {
            GM => 0,
            WM => 1,
            _ => 2,
        }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasRecord {
    pub areas: Vec<String>,
    /// (atlas point, section point) pairs on the quarter-resolution grid.
    pub landmarks: Vec<((f64, f64), (f64, f64))>,
    /// Generator ground truth, when known.
    pub true_transform: Option<AffineTransform2D>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionMeta {
    pub name: String,
    pub brain: String,
    pub style_index: usize,
    pub z: usize,
    pub seed: u64,
    pub area_names: Vec<String>,
    pub atlas_scale: usize,
    /// Areas present in the full labels but hidden from `labels`.
    #[serde(default)]
    pub hidden_areas: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub meta: SectionMeta,
    pub image: Raster<u8>,
    /// Partial annotation: 0 unlabeled, k+1 area k.
    pub labels: Raster<u8>,
    /// Complete area annotation in the same encoding (synthetic data only).
    pub full_labels: Option<Raster<u8>>,
    pub segmask: Option<Raster<u8>>,
    /// Probability maps in atlas space.
    pub atlas: ProbabilisticAtlas,
    pub atlas_record: AtlasRecord,
}

/// Annotated pixels keep their area id; the rest take gm/wm/bg from the
/// tissue mask (unannotated cortex becomes gm).
pub fn extend_labels(labels: &Raster<u8>, segmask: &Raster<u8>, n_areas: usize) -> Result<Raster<u8>> {
    if labels.dims() != segmask.dims() {
        bail!(Shape, "labels {:?} and tissue mask {:?} differ in size", labels.dims(), segmask.dims());
    }
    let data = labels
        .data()
        .iter()
        .zip(segmask.data())
        .map(|(&l, &s)| {
            if l != UNLABELED {
                if l as usize > n_areas {
                    return Err(Error::Invalid(format!("area label {l} exceeds {n_areas} areas")));
                }
                Ok(l - 1)
            } else {
                if s > BG {
                    return Err(Error::Invalid(format!("unknown tissue code {s}")));
                }
                Ok(tissue_class(n_areas, s))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    Raster::new(labels.height(), labels.width(), data)
}

impl Section {
    pub fn n_areas(&self) -> usize {
        self.meta.area_names.len()
    }

    pub fn classes(&self) -> usize {
        self.n_areas() + 3
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    fn segmask(&self) -> Result<&Raster<u8>> {
        self.segmask
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("section {} has no tissue mask", self.meta.name)))
    }

    /// Training ground truth from the partial annotation.
    pub fn extended_labels(&self) -> Result<Raster<u8>> {
        extend_labels(&self.labels, self.segmask()?, self.n_areas())
    }

    /// Evaluation ground truth: the full annotation when available.
    pub fn ground_truth(&self) -> Result<Raster<u8>> {
        extend_labels(self.full_labels.as_ref().unwrap_or(&self.labels), self.segmask()?, self.n_areas())
    }

    /// Atlas registered into section space on the quarter-resolution grid,
    /// via a least-squares affine fit to the stored landmarks.
    pub fn section_atlas(&self) -> Result<Tensor<f32>> {
        let (t, _) = estimate_affine(&self.atlas_record.landmarks)?;
        let (h, w) = self.dims();
        resample_atlas(&self.atlas.maps, &t, (h / self.meta.atlas_scale, w / self.meta.atlas_scale))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_pgm(dir.join("image.pgm"), &self.image)?;
        write_pgm(dir.join("labels.pgm"), &self.labels)?;
        if let Some(f) = &self.full_labels {
            write_pgm(dir.join("labels_full.pgm"), f)?;
        }
        if let Some(s) = &self.segmask {
            write_pgm(dir.join("segmask.pgm"), s)?;
        }
        self.atlas.maps.save(dir.join("atlas.ptnsr"))?;
        write_json(dir.join("atlas.json"), &self.atlas_record)?;
        write_json(dir.join("meta.json"), &self.meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: SectionMeta = read_json(dir.join("meta.json"))?;
        let atlas_record: AtlasRecord = read_json(dir.join("atlas.json"))?;
        let optional = |name: &str| -> Result<Option<Raster<u8>>> {
            let p = dir.join(name);
            if p.exists() {
                Ok(Some(read_pgm(p)?))
            } else {
                Ok(None)
            }
        };
        let s = Section {
            image: read_pgm(dir.join("image.pgm"))?,
            labels: read_pgm(dir.join("labels.pgm"))?,
            full_labels: optional("labels_full.pgm")?,
            segmask: optional("segmask.pgm")?,
            atlas: ProbabilisticAtlas::new(atlas_record.areas.clone(), Tensor::load(dir.join("atlas.ptnsr"))?)?,
            atlas_record,
            meta,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        let m = &self.meta;
        for (name, r) in [
            ("labels", Some(&self.labels)),
            ("full labels", self.full_labels.as_ref()),
            ("tissue mask", self.segmask.as_ref()),
        ] {
            if let Some(r) = r {
                if r.dims() != dims {
                    bail!(Shape, "{}: {name} {:?} differs from image {:?}", m.name, r.dims(), dims);
                }
            }
        }
        if m.atlas_scale == 0 || dims.0 % m.atlas_scale != 0 || dims.1 % m.atlas_scale != 0 {
            bail!(Shape, "{}: image {:?} not divisible by atlas scale {}", m.name, dims, m.atlas_scale);
        }
        if self.atlas.areas != m.area_names {
            bail!(Invalid, "{}: atlas areas do not match section areas", m.name);
        }
        if let Some(l) = self.labels.data().iter().find(|&&l| l as usize > m.area_names.len()) {
            bail!(Invalid, "{}: label {l} exceeds {} areas", m.name, m.area_names.len());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub dir: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub area_names: Vec<String>,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub sections: Vec<DatasetEntry>,
    /// Generator configuration or other provenance.
    #[serde(default)]
    pub generator: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub area_names: Vec<String>,
    pub sections: Vec<Section>,
    pub splits: Vec<Split>,
    pub seed: u64,
    pub generator: serde_json::Value,
}

impl Dataset {
    pub fn class_names(&self) -> Vec<String> {
        class_names(&self.area_names)
    }

    pub fn classes(&self) -> usize {
        self.area_names.len() + 3
    }

    pub fn split(&self, which: Split) -> Vec<&Section> {
        self.sections
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == which)
            .map(|(sec, _)| sec)
            .collect()
    }

    fn section_dir(s: &Section) -> String {
        format!("sections/{}", s.meta.name)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (s, &split) in self.sections.iter().zip(&self.splits) {
            let rel = Self::section_dir(s);
            s.save(dir.join(&rel))?;
            entries.push(DatasetEntry { dir: rel, split });
        }
        let manifest = DatasetManifest {
            area_names: self.area_names.clone(),
            class_names: self.class_names(),
            seed: self.seed,
            sections: entries,
            generator: self.generator.clone(),
        };
        write_json(dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir: PathBuf = dir.as_ref().to_path_buf();
        let manifest: DatasetManifest = read_json(dir.join("manifest.json"))?;
        let mut sections = Vec::new();
        let mut splits = Vec::new();
        for e in &manifest.sections {
            let s = Section::load(dir.join(&e.dir))?;
            if s.meta.area_names != manifest.area_names {
                bail!(Invalid, "section {} lists different areas than the dataset", s.meta.name);
            }
            sections.push(s);
            splits.push(e.split);
        }
        Ok(Dataset {
            area_names: manifest.area_names,
            sections,
            splits,
            seed: manifest.seed,
            generator: manifest.generator,
        })
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let p = path.as_ref();
    let bytes = std::fs::read(p).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}
