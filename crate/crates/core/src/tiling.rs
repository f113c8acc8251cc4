//! Whole-section inference by overlapping tiles.
//!
//! Windows are aligned to the model's size multiple so every tile shares
//! the pooling grid of a whole-image pass; with enough overlap the core of
//! each tile sees exactly the context the whole pass would.

use crate::arch::{receptive_field, OUTPUT_STRIDE};
use crate::error::{bail, Result};
use crate::net::Model;
use crate::raster::Raster;
use crate::tensor::Tensor;

/// Intensity used to pad images up to the size multiple (white background).
pub const IMAGE_FILL: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileSpec {
    /// Side of the core region each tile contributes.
    pub core: usize,
    /// Context on each side of the core.
    pub overlap: usize,
}

impl TileSpec {
    /// Smallest overlap a model accepts, with a core of `core` pixels.
    pub fn for_model(model: &Model, core: usize) -> Result<Self> {
        let (rf, _) = receptive_field(model.config())?;
        Ok(TileSpec { core, overlap: (rf - 1) / 2 })
    }
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

fn pad_image(image: &Raster<f32>, h: usize, w: usize) -> Tensor<f32> {
    let r = image.crop(0, 0, h, w, IMAGE_FILL);
    Tensor::new(&[1, 1, h, w], r.into_data()).expect("sized by crop")
}

/// Crop of a (1, C, H, W) tensor.
fn window(t: &Tensor<f32>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<f32> {
    let (_, c, th, tw) = t.dims4().expect("4-d input");
    let d = t.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in y0..y0 + h {
            let row = (ch * th + y) * tw;
            out.extend_from_slice(&d[row + x0..row + x0 + w]);
        }
    }
    Tensor::new(&[1, c, h, w], out).expect("sized above")
}

/// Class scores (C, ceil(H/8), ceil(W/8)) for a full section. `atlas` is
/// the section-space stack (A, H/4, W/4) for atlas-aware models.
pub fn predict_scores(model: &Model, image: &Raster<f32>, atlas: Option<&Tensor<f32>>, spec: TileSpec) -> Result<Tensor<f32>> {
    let cfg = model.config();
    let (rf, stride) = receptive_field(cfg)?;
    debug_assert_eq!(stride, OUTPUT_STRIDE);
    let m = cfg.size_multiple();
    let scale = crate::arch::ATLAS_SCALE;
    if spec.core == 0 {
        bail!(Invalid, "tile core must be positive");
    }
    if spec.overlap < (rf - 1) / 2 {
        bail!(
            Invalid,
            "tile overlap {} below half the receptive field ({} px needed for rf {rf})",
            spec.overlap,
            (rf - 1) / 2
        );
    }
    let core = round_up(spec.core, m);
    let ov = round_up(spec.overlap, m);
    if core + 2 * ov < rf {
        log::warn!("tile of {} px is smaller than the receptive field {rf}", core + 2 * ov);
    }
    let (h, w) = image.dims();
    let (hp, wp) = (round_up(h, m), round_up(w, m));
    let img = pad_image(image, hp, wp);
    let atl = match atlas {
        Some(a) => {
            let s = a.shape();
            if s.len() != 3 || s[1] != h / scale || s[2] != w / scale {
                bail!(Shape, "atlas stack {:?} does not match a {h}x{w} section at 1/{scale}", s);
            }
            let (ah, aw) = (hp / scale, wp / scale);
            let mut d = vec![0.0f32; s[0] * ah * aw];
            for c in 0..s[0] {
                for y in 0..s[1] {
                    let src = (c * s[1] + y) * s[2];
                    let dst = (c * ah + y) * aw;
                    d[dst..dst + s[2]].copy_from_slice(&a.data()[src..src + s[2]]);
                }
            }
            Some(Tensor::new(&[1, s[0], ah, aw], d)?)
        }
        None => None,
    };
    let classes = model.classes();
    let (oh, ow) = (hp / OUTPUT_STRIDE, wp / OUTPUT_STRIDE);
    let mut out = vec![0.0f32; classes * oh * ow];
    for cy in (0..hp).step_by(core) {
        for cx in (0..wp).step_by(core) {
            let (y0, x0) = (cy.saturating_sub(ov), cx.saturating_sub(ov));
            let (y1, x1) = ((cy + core + ov).min(hp), (cx + core + ov).min(wp));
            let tile = window(&img, y0, x0, y1 - y0, x1 - x0);
            let tile_atlas = atl
                .as_ref()
                .map(|a| window(a, y0 / scale, x0 / scale, (y1 - y0) / scale, (x1 - x0) / scale));
            let scores = model.infer(&tile, tile_atlas.as_ref())?;
            let (_, _, th, tw) = scores.dims4()?;
            let (ey, ex) = ((cy + core).min(hp), (cx + core).min(wp));
            for c in 0..classes {
                for y in cy / OUTPUT_STRIDE..ey / OUTPUT_STRIDE {
                    let ty = y - y0 / OUTPUT_STRIDE;
                    for x in cx / OUTPUT_STRIDE..ex / OUTPUT_STRIDE {
                        let tx = x - x0 / OUTPUT_STRIDE;
                        out[(c * oh + y) * ow + x] = scores.data()[(c * th + ty) * tw + tx];
                    }
                }
            }
        }
    }
    let (rh, rw) = (h.div_ceil(OUTPUT_STRIDE), w.div_ceil(OUTPUT_STRIDE));
    let mut cropped = Vec::with_capacity(classes * rh * rw);
    for c in 0..classes {
        for y in 0..rh {
            cropped.extend_from_slice(&out[(c * oh + y) * ow..(c * oh + y) * ow + rw]);
        }
    }
    Tensor::new(&[classes, rh, rw], cropped)
}

/// Label image at stride 8 (argmax of [`predict_scores`]).
pub fn predict_section(model: &Model, image: &Raster<f32>, atlas: Option<&Tensor<f32>>, spec: TileSpec) -> Result<Raster<u8>> {
    let s = predict_scores(model, image, atlas, spec)?;
    let (c, h, w) = (s.shape()[0], s.shape()[1], s.shape()[2]);
    let labels = crate::net::argmax_labels(&s.reshape(&[1, c, h, w])?)?.remove(0);
    Raster::new(h, w, labels)
}
