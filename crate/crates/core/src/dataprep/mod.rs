//! Panorama to perspective data preparation: cubemap side faces, ray to
//! planar depth, depth normalization, image codecs and the turbo colormap.

mod netpbm;
mod turbo_lut;

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

pub use netpbm::{read_pfm, read_pgm, read_ppm, write_pfm, write_pgm, write_ppm, Graymap};

use crate::error::{Error, Result};

/// Interleaved row-major raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Image<T> {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, v: T) -> Self {
        Self { width, height, channels, data: vec![v; width * height * channels] }
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Image<U> {
        Image { width: self.width, height: self.height, channels: self.channels, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// The four side faces of a cubemap; ceiling and floor are not produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Face {
    Front,
    Right,
    Back,
    Left,
}

impl Face {
    pub const ALL: [Face; 4] = [Face::Front, Face::Right, Face::Back, Face::Left];

    pub fn name(self) -> &'static str {
        match self {
            Face::Front => "front",
            Face::Right => "right",
            Face::Back => "back",
            Face::Left => "left",
        }
    }

    /// World direction of face-plane point `(a, b, 1)`; x right, y down,
    /// front looks along +z.
    pub fn direction(self, a: f64, b: f64) -> [f64; 3] {
        match self {
            Face::Front => [a, b, 1.0],
            Face::Right => [1.0, b, -a],
            Face::Back => [-a, b, -1.0],
            Face::Left => [-1.0, b, a],
        }
    }
}

/// Face-plane coordinates of pixel `(u, v)` on an `s x s` face, in `(-1, 1)`.
pub fn face_plane(u: usize, v: usize, s: usize) -> (f64, f64) {
    let s = s as f64;
    (2.0 * (u as f64 + 0.5) / s - 1.0, 2.0 * (v as f64 + 0.5) / s - 1.0)
}

/// Longitude `atan2(dx, dz)` and latitude `asin(dy / |d|)`.
pub fn spherical(d: [f64; 3]) -> (f64, f64) {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    (d[0].atan2(d[2]), (d[1] / n).asin())
}

/// Continuous panorama coordinates (pixel centres at `i + 0.5`).
pub fn pano_coords(d: [f64; 3], width: usize, height: usize) -> (f64, f64) {
    let (theta, phi) = spherical(d);
    ((theta / (2.0 * PI) + 0.5) * width as f64, (phi / PI + 0.5) * height as f64)
}

/// Bilinear sample of channel `c`, wrapping in x and clamping in y.
pub fn sample_bilinear(img: &Image<f64>, x: f64, y: f64, c: usize) -> f64 {
    let (w, h) = (img.width as isize, img.height as isize);
    let (fx, fy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - x0, fy - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let px = |xi: isize| xi.rem_euclid(w) as usize;
    let py = |yi: isize| yi.clamp(0, h - 1) as usize;
    let v = |xi, yi| img.at(px(xi), py(yi), c);
    let top = v(x0, y0) * (1.0 - tx) + v(x0 + 1, y0) * tx;
    let bottom = v(x0, y0 + 1) * (1.0 - tx) + v(x0 + 1, y0 + 1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Nearest sample, wrapping in x and clamping in y.
pub fn sample_nearest<T: Copy>(img: &Image<T>, x: f64, y: f64, c: usize) -> T {
    let xi = (x.floor() as isize).rem_euclid(img.width as isize) as usize;
    let yi = (y.floor() as isize).clamp(0, img.height as isize - 1) as usize;
    img.at(xi, yi, c)
}

fn check_pano<T>(pano: &Image<T>, s: usize) -> Result<()> {
    if pano.width != 2 * pano.height || pano.height == 0 {
        return Err(Error::Shape(format!("panorama must be 2:1, got {}x{}", pano.width, pano.height)));
    }
    if s < 2 {
        return Err(Error::Invalid(format!("face side must be >= 2, got {s}")));
    }
    Ok(())
}

fn project<T: Copy, U>(pano: &Image<T>, face: Face, s: usize, f: impl Fn(f64, f64, usize) -> U) -> Result<Image<U>> {
    check_pano(pano, s)?;
    let mut data = Vec::with_capacity(s * s * pano.channels);
    for v in 0..s {
        for u in 0..s {
            let (a, b) = face_plane(u, v, s);
            let (x, y) = pano_coords(face.direction(a, b), pano.width, pano.height);
            for c in 0..pano.channels {
                data.push(f(x, y, c));
            }
        }
    }
    Ok(Image { width: s, height: s, channels: pano.channels, data })
}

/// 90 degree pinhole view of a continuous-valued panorama (bilinear).
pub fn equirect_to_face(pano: &Image<f64>, face: Face, s: usize) -> Result<Image<f64>> {
    project(pano, face, s, |x, y, c| sample_bilinear(pano, x, y, c))
}

/// 90 degree pinhole view of a label panorama (nearest).
pub fn equirect_to_face_nearest<T: Copy>(pano: &Image<T>, face: Face, s: usize) -> Result<Image<T>> {
    project(pano, face, s, |x, y, c| sample_nearest(pano, x, y, c))
}

/// Ray distance to depth along the face normal: `ray / |(a, b, 1)|`.
pub fn ray_to_planar(depth: &Image<f64>) -> Image<f64> {
    let s = depth.width;
    let mut out = depth.clone();
    for v in 0..depth.height {
        for u in 0..s {
            let (a, b) = face_plane(u, v, s);
            let k = 1.0 / (a * a + b * b + 1.0).sqrt();
            out.data[v * s + u] *= k;
        }
    }
    out
}

/// Divides all faces by the cubemap-wide maximum and rescales to `[0, 255]`.
pub fn normalize_depth(faces: &[Image<f64>]) -> Result<Vec<Image<f32>>> {
    let max = faces.iter().flat_map(|f| f.data.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::Domain(format!("cubemap maximum depth must be positive and finite, got {max}")));
    }
    Ok(faces.iter().map(|f| f.map(|v| (v / max * 255.0) as f32)).collect())
}

/// Turbo colour of `t` in `[0, 1]`, linear between the 256 table entries.
pub fn turbo(t: f64) -> [f64; 3] {
    let pos = t.clamp(0.0, 1.0) * 255.0;
    let i = (pos.floor() as usize).min(254);
    let f = pos - i as f64;
    let (a, b) = (turbo_lut::TURBO_LUT[i], turbo_lut::TURBO_LUT[i + 1]);
    [0, 1, 2].map(|c| a[c] * (1.0 - f) + b[c] * f)
}

/// The raw 256-entry table.
pub fn turbo_table() -> &'static [[f64; 3]; 256] {
    &turbo_lut::TURBO_LUT
}

/// Maps depth to 8-bit RGB through turbo, `d_min` blue to `d_max` red.
pub fn turbo_colorize(depth: &Image<f64>, d_min: f64, d_max: f64) -> Result<Image<u8>> {
    if !(d_max > d_min) || !d_min.is_finite() || !d_max.is_finite() {
        return Err(Error::Domain(format!("degenerate depth range [{d_min}, {d_max}]")));
    }
    let mut data = Vec::with_capacity(depth.width * depth.height * 3);
    for &d in depth.data.iter().step_by(depth.channels) {
        let rgb = turbo((d - d_min) / (d_max - d_min));
        data.extend(rgb.map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Image::new(depth.width, depth.height, 3, data)
}

/// Faces of one converted scene.
pub struct SceneFaces {
    pub rgb: Vec<Image<u8>>,
    pub labels: Vec<Image<u8>>,
    /// Planar depth normalized to `[0, 255]`.
    pub depth: Vec<Image<f32>>,
}

/// Converts an RGB/label/ray-depth panorama triplet into the four side faces.
pub fn convert_panorama(rgb: &Image<u8>, labels: &Image<u8>, depth: &Image<f64>, s: usize) -> Result<SceneFaces> {
    if (rgb.width, rgb.height) != (labels.width, labels.height) || (rgb.width, rgb.height) != (depth.width, depth.height) {
        return Err(Error::Shape("panorama triplet sizes differ".into()));
    }
    if rgb.channels != 3 || labels.channels != 1 || depth.channels != 1 {
        return Err(Error::Shape("expected 3-channel RGB, 1-channel labels and depth".into()));
    }
    let rgb_f = rgb.map(f64::from);
    let mut out = SceneFaces { rgb: Vec::new(), labels: Vec::new(), depth: Vec::new() };
    let mut planar = Vec::new();
    for face in Face::ALL {
        let c = equirect_to_face(&rgb_f, face, s)?;
        out.rgb.push(c.map(|v| v.round().clamp(0.0, 255.0) as u8));
        out.labels.push(equirect_to_face_nearest(labels, face, s)?);
        planar.push(ray_to_planar(&equirect_to_face(depth, face, s)?));
    }
    out.depth = normalize_depth(&planar)?;
    Ok(out)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

/// Reads `<dir>/{rgb.ppm, sem.pgm, depth.pfm | depth.pgm}`; returns the label maxval too.
pub fn read_scene(dir: &Path) -> Result<(Image<u8>, Image<u8>, u8, Image<f64>)> {
    let rgb = read_ppm(open(&dir.join("rgb.ppm"))?)?;
    let sem = read_pgm(open(&dir.join("sem.pgm"))?)?;
    if sem.maxval > 255 {
        return Err(Error::Format("label maps must be 8-bit".into()));
    }
    let labels = sem.image.map(|v| v as u8);
    let pfm = dir.join("depth.pfm");
    let depth = if pfm.exists() {
        read_pfm(open(&pfm)?)?.map(f64::from)
    } else {
        read_pgm(open(&dir.join("depth.pgm"))?)?.image.map(f64::from)
    };
    Ok((rgb, labels, sem.maxval as u8, depth))
}

/// Writes `<out>/<face>.{rgb.ppm, sem.pgm, depth.pfm}` and returns the paths.
pub fn write_scene(out: &Path, faces: &SceneFaces, label_maxval: u8) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for (i, face) in Face::ALL.iter().enumerate() {
        let base = out.join(face.name());
        let p = base.with_extension("rgb.ppm");
        write_ppm(BufWriter::new(File::create(&p)?), &faces.rgb[i])?;
        written.push(p);
        let p = base.with_extension("sem.pgm");
        write_pgm(BufWriter::new(File::create(&p)?), &faces.labels[i], label_maxval)?;
        written.push(p);
        let p = base.with_extension("depth.pfm");
        write_pfm(BufWriter::new(File::create(&p)?), &faces.depth[i])?;
        written.push(p);
    }
    Ok(written)
}
