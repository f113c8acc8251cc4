//! Row-major 2-D rasters and binary PGM/PPM IO.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{bail, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            bail!(Shape, "raster {}x{} needs {} values, got {}", height, width, height * width, data.len());
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    /// Value at signed coordinates, `None` outside.
    #[inline]
    pub fn at(&self, y: isize, x: isize) -> Option<T> {
        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
            None
        } else {
            Some(self.data[y as usize * self.width + x as usize])
        }
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Raster<U> {
        Raster {
            height: self.height,
            width: self.width,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// `h`×`w` window with top-left corner at (y0, x0); outside → `fill`.
    pub fn crop(&self, y0: isize, x0: isize, h: usize, w: usize, fill: T) -> Raster<T> {
        Raster::from_fn(h, w, |y, x| self.at(y0 + y as isize, x0 + x as isize).unwrap_or(fill))
    }
}

impl Raster<f32> {
    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integers); samples outside the raster blend with `fill`.
    pub fn bilinear(&self, y: f64, x: f64, fill: f32) -> f32 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let v = |yy, xx| self.at(yy, xx).unwrap_or(fill);
        let top = v(y0, x0) * (1.0 - fx) + v(y0, x0 + 1) * fx;
        let bot = v(y0 + 1, x0) * (1.0 - fx) + v(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Separable Gaussian blur, truncated at 3σ, zero outside the raster.
pub fn gaussian_blur(img: &Raster<f64>, sigma: f64) -> Raster<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = img.dims();
    let pass = |src: &Raster<f64>, vertical: bool| {
        Raster::from_fn(h, w, |y, x| {
            let mut acc = 0.0;
            for (k, d) in kernel.iter().zip(-r..=r) {
                let v = if vertical { src.at(y as isize + d, x as isize) } else { src.at(y as isize, x as isize + d) };
                acc += k * v.unwrap_or(0.0);
            }
            acc
        })
    };
    pass(&pass(img, false), true)
}

fn read_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        let c = byte[0];
        if c == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c as char);
    }
    if tok.is_empty() {
        return Err(Error::Format("truncated netpbm header".into()));
    }
    Ok(tok)
}

fn read_netpbm(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let m = read_token(&mut r)?;
    if m != magic {
        return Err(Error::Format(format!("{}: expected {magic}, found {m}", path.display())));
    }
    let num = |r: &mut BufReader<std::fs::File>| -> Result<usize> {
        read_token(r)?
            .parse()
            .map_err(|_| Error::Format(format!("{}: bad header number", path.display())))
    };
    let w = num(&mut r)?;
    let h = num(&mut r)?;
    let maxval = num(&mut r)?;
    if maxval != 255 {
        return Err(Error::Format(format!("{}: only maxval 255 is supported", path.display())));
    }
    let mut data = vec![0u8; w * h * channels];
    r.read_exact(&mut data)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    Ok((h, w, data))
}

/// Binary 8-bit grayscale (P5).
pub fn write_pgm(path: impl AsRef<Path>, img: &Raster<u8>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", img.width(), img.height())?;
    f.write_all(img.data())?;
    f.flush()?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Raster<u8>> {
    let (h, w, data) = read_netpbm(path.as_ref(), "P5", 1)?;
    Raster::new(h, w, data)
}

/// Binary 8-bit RGB (P6).
pub fn write_ppm(path: impl AsRef<Path>, img: &Raster<[u8; 3]>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", img.width(), img.height())?;
    for px in img.data() {
        f.write_all(px)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Raster<[u8; 3]>> {
    let (h, w, data) = read_netpbm(path.as_ref(), "P6", 3)?;
    Raster::new(h, w, data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Distinct colour per class id (golden-angle hue walk); 255 → black.
pub fn class_color(id: u8) -> [u8; 3] {
    if id == 255 {
        return [0, 0, 0];
    }
    let h = (id as f64 * 137.508) % 360.0;
    let (s, v) = (0.65, if id % 2 == 0 { 0.95 } else { 0.75 });
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [((r + m) * 255.0) as u8, ((g + m) * 255.0) as u8, ((b + m) * 255.0) as u8]
}

/// Blends class colours over a grayscale image. `labels` may be on a
/// coarser grid (integer factor), it is upsampled by nearest neighbour.
pub fn overlay(image: &Raster<u8>, labels: &Raster<u8>, alpha: f64) -> Result<Raster<[u8; 3]>> {
    let (h, w) = image.dims();
    let (lh, lw) = labels.dims();
    if lh == 0 || lw == 0 {
        bail!(Shape, "empty label raster");
    }
    let fy = h.div_ceil(lh);
    let fx = w.div_ceil(lw);
    Ok(Raster::from_fn(h, w, |y, x| {
        let g = image.get(y, x) as f64;
        let c = class_color(labels.get((y / fy).min(lh - 1), (x / fx).min(lw - 1)));
        let mix = |ch: u8| ((1.0 - alpha) * g + alpha * ch as f64).round() as u8;
        [mix(c[0]), mix(c[1]), mix(c[2])]
    }))
}

/// Row-normalised heat map of a square count matrix, `cell` px per entry.
pub fn matrix_heatmap(counts: &[Vec<u64>], cell: usize) -> Raster<[u8; 3]> {
    let n = counts.len();
    let side = n * cell;
    Raster::from_fn(side, side, |y, x| {
        let (t, p) = (y / cell, x / cell);
        let row: u64 = counts[t].iter().sum();
        let v = if row == 0 { 0.0 } else { counts[t][p] as f64 / row as f64 };
        let hot = (255.0 * v).round() as u8;
        [255 - hot / 4, 255 - hot, 255 - hot]
    })
}
