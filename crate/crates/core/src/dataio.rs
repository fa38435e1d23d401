//! Scenes, the `HSC1` container, synthetic scenes, PCA, patches and splits.
//!
//! A scene stores its cube band-interleaved by pixel (`(i * w + j) * c + b`)
//! exactly as on disk. Patches handed to the network are channel-first.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HSC1";

pub type Coord = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct HsiScene {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub class_count: usize,
    pub aux_bands: usize,
    pub cube: Vec<f32>,
    /// `0` is unlabeled, `1..=class_count` are classes.
    pub labels: Vec<u16>,
    pub aux: Option<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    k2: usize,
    has_aux: bool,
}

impl HsiScene {
    /// Container holding only a label map (no spectral bands).
    pub fn label_only(height: usize, width: usize, class_count: usize, labels: Vec<u16>) -> HsiScene {
        HsiScene {
            height,
            width,
            bands: 0,
            class_count,
            aux_bands: 0,
            cube: Vec::new(),
            labels,
            aux: None,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, i: usize, j: usize) -> &[f32] {
        let at = (i * self.width + j) * self.bands;
        &self.cube[at..at + self.bands]
    }

    pub fn label(&self, i: usize, j: usize) -> u16 {
        self.labels[i * self.width + j]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pixels();
        if n == 0 {
            return Err(Error::Validation("scene has a zero extent".into()));
        }
        if self.cube.len() != n * self.bands || self.labels.len() != n {
            return Err(Error::Validation("cube or label size disagrees with extents".into()));
        }
        if let Some(at) = self.cube.iter().position(|v| !v.is_finite()) {
            let px = at / self.bands;
            return Err(Error::Validation(format!(
                "non-finite cube value at pixel ({}, {}) band {}",
                px / self.width,
                px % self.width,
                at % self.bands
            )));
        }
        if let Some(at) = self.labels.iter().position(|&l| l as usize > self.class_count) {
            return Err(Error::Validation(format!(
                "label {} at pixel ({}, {}) exceeds class count {}",
                self.labels[at],
                at / self.width,
                at % self.width,
                self.class_count
            )));
        }
        match &self.aux {
            Some(a) if a.len() != n * self.aux_bands => {
                Err(Error::Validation("auxiliary raster is not co-registered".into()))
            }
            Some(a) if a.iter().any(|v| !v.is_finite()) => {
                Err(Error::Validation("auxiliary raster has non-finite values".into()))
            }
            None if self.aux_bands != 0 => Err(Error::Validation(format!(
                "{} auxiliary bands declared without a raster",
                self.aux_bands
            ))),
            _ => Ok(()),
        }
    }

    /// Rescales every auxiliary band to `[0, 1]` (constant bands become 0).
    pub fn normalize_aux(&mut self) {
        let k2 = self.aux_bands;
        let Some(aux) = self.aux.as_mut() else { return };
        for b in 0..k2 {
            let vals = aux.iter().skip(b).step_by(k2);
            let (lo, hi) = vals.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let span = hi - lo;
            for v in aux.iter_mut().skip(b).step_by(k2) {
                *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
            }
        }
    }

    /// Labelled coordinates in row-major order.
    pub fn labeled_coords(&self) -> Vec<Coord> {
        (0..self.height)
            .flat_map(|i| (0..self.width).map(move |j| (i, j)))
            .filter(|&(i, j)| self.label(i, j) != 0)
            .collect()
    }

    /// Copy of the label map keeping only `coords`.
    pub fn labels_at(&self, coords: &[Coord]) -> Vec<u16> {
        let mut out = vec![0; self.pixels()];
        for &(i, j) in coords {
            out[i * self.width + j] = self.label(i, j);
        }
        out
    }
}

pub fn encode_scene(scene: &HsiScene) -> Result<Vec<u8>> {
    scene.validate()?;
    let header = serde_json::to_vec(&Header {
        h: scene.height,
        w: scene.width,
        c: scene.bands,
        k: scene.class_count,
        k2: scene.aux_bands,
        has_aux: scene.aux.is_some(),
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + scene.cube.len() * 4 + scene.labels.len() * 2);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    scene.cube.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    scene.labels.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    if let Some(aux) = &scene.aux {
        aux.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.buf.len() as u64,
                msg: format!(
                    "truncated {what}: need {n} bytes from offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(count * 4, what)?;
        Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
    }
}

pub fn decode_scene(buf: &[u8]) -> Result<HsiScene> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, expected HSC1".into() });
    }
    let len = r.take(4, "header length")?;
    let len = u32::from_le_bytes([len[0], len[1], len[2], len[3]]) as usize;
    let header: Header = serde_json::from_slice(r.take(len, "header")?).map_err(|e| Error::Format {
        offset: 8,
        msg: format!("bad header: {e}"),
    })?;
    let n = header
        .h
        .checked_mul(header.w)
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Format { offset: 8, msg: "header declares a zero extent".into() })?;
    let cube = r.f32s(n * header.c, "cube payload")?;
    let labels = r
        .take(n * 2, "label payload")?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    let aux = if header.has_aux {
        Some(r.f32s(n * header.k2, "auxiliary payload")?)
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    let scene = HsiScene {
        height: header.h,
        width: header.w,
        bands: header.c,
        class_count: header.k,
        aux_bands: if header.has_aux { header.k2 } else { 0 },
        cube,
        labels,
        aux,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(scene: &HsiScene, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_scene(scene)?)?;
    Ok(())
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<HsiScene> {
    decode_scene(&fs::read(path)?)
}

/// Parameters of [`synth_scene`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub h: usize,
    pub w: usize,
    pub bands: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Smooth, distinct per-class spectra.
pub fn synth_prototypes(bands: usize, classes: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|k| {
            let freq = 0.5 + 0.5 * (k % 3) as f64;
            let phase = std::f64::consts::TAU * k as f64 / classes as f64 + rng.random_range(0.0..0.5);
            let tilt = rng.random_range(-0.2..0.2);
            let amp = rng.random_range(0.2..0.3);
            (0..bands)
                .map(|b| {
                    let t = b as f64 / bands.max(2).saturating_sub(1) as f64;
                    0.5 + amp * (std::f64::consts::TAU * freq * t + phase).sin() + tilt * (t - 0.5)
                })
                .collect()
        })
        .collect()
}

/// Voronoi mosaic of classes with smooth spectra, Gaussian noise, a one-band
/// elevation raster and an unlabeled band of rows at the bottom (~10%).
pub fn synth_scene(params: &SynthParams) -> Result<HsiScene> {
    let SynthParams { h, w, bands, classes, noise_sigma, seed } = *params;
    if h < 2 || w < 2 || classes < 2 || bands < classes || !(noise_sigma >= 0.0) {
        return Err(Error::Argument(format!(
            "synthetic scene needs h, w >= 2, classes >= 2, bands >= classes and sigma >= 0 (got {h}x{w}, {bands} bands, {classes} classes, sigma {noise_sigma})"
        )));
    }
    if classes > u16::MAX as usize {
        return Err(Error::Argument("too many classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = synth_prototypes(bands, classes, &mut rng);
    let elevation: Vec<f64> = (0..classes).map(|k| k as f64 / (classes - 1) as f64).collect();

    let border = ((h as f64 * 0.1).round() as usize).clamp(1, h - 1);
    let labeled_rows = h - border;
    let sites: Vec<(f64, f64, usize)> = (0..classes * 3)
        .map(|s| {
            let i = rng.random_range(0..labeled_rows) as f64;
            let j = rng.random_range(0..w) as f64;
            (i, j, s % classes)
        })
        .collect();

    let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Argument(e.to_string()))?;
    let mut cube = Vec::with_capacity(h * w * bands);
    let mut labels = Vec::with_capacity(h * w);
    let mut aux = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let class = sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - i as f64).powi(2) + (a.1 - j as f64).powi(2);
                    let db = (b.0 - i as f64).powi(2) + (b.1 - j as f64).powi(2);
                    da.total_cmp(&db)
                })
                .map(|s| s.2)
                .unwrap_or(0);
            for &v in &protos[class] {
                let n = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                cube.push((v + n) as f32);
            }
            let n = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            aux.push((elevation[class] + n) as f32);
            labels.push(if i < labeled_rows { class as u16 + 1 } else { 0 });
        }
    }
    let mut scene = HsiScene {
        height: h,
        width: w,
        bands,
        class_count: classes,
        aux_bands: 1,
        cube,
        labels,
        aux: Some(aux),
    };
    scene.normalize_aux();
    scene.validate()?;
    Ok(scene)
}

/// Scene-level principal component projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `bands x components`, column-major by component.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues of the kept components, descending.
    pub variances: Vec<f64>,
}

impl Pca {
    /// Fits on all pixels. Covariance uses the population divisor.
    pub fn fit(scene: &HsiScene, components: usize) -> Result<Pca> {
        let c = scene.bands;
        if components == 0 || components > c {
            return Err(Error::Argument(format!(
                "cannot keep {components} components of {c} bands"
            )));
        }
        let n = scene.pixels();
        let mut mean = vec![0.0; c];
        for px in scene.cube.chunks_exact(c) {
            mean.iter_mut().zip(px).for_each(|(m, &v)| *m += v as f64);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::<f64>::zeros(c, c);
        for px in scene.cube.chunks_exact(c) {
            let centered: Vec<f64> = px.iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect();
            for a in 0..c {
                for b in a..c {
                    cov[(a, b)] += centered[a] * centered[b];
                }
            }
        }
        for a in 0..c {
            for b in a..c {
                cov[(a, b)] /= n as f64;
                cov[(b, a)] = cov[(a, b)];
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut comps = Vec::with_capacity(components);
        let mut variances = Vec::with_capacity(components);
        for &k in order.iter().take(components) {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            comps.push(v);
            variances.push(eig.eigenvalues[k]);
        }
        Ok(Pca { mean, components: comps, variances })
    }

    pub fn project_pixel(&self, px: &[f32]) -> Vec<f64> {
        self.components
            .iter()
            .map(|v| v.iter().zip(px).zip(&self.mean).map(|((a, &x), m)| a * (x as f64 - m)).sum())
            .collect()
    }

    pub fn apply(&self, scene: &HsiScene) -> HsiScene {
        let cube = scene
            .cube
            .chunks_exact(scene.bands)
            .flat_map(|px| self.project_pixel(px).into_iter().map(|v| v as f32))
            .collect();
        HsiScene {
            bands: self.components.len(),
            cube,
            ..scene.clone()
        }
    }
}

pub fn pca_reduce(scene: &HsiScene, components: usize) -> Result<(HsiScene, Pca)> {
    let pca = Pca::fit(scene, components)?;
    Ok((pca.apply(scene), pca))
}

/// Mirror reflection without repeating the edge (`-1 -> 1`, `n -> n - 2`).
pub fn reflect(k: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = k.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Channel-first `(C, p, p)` crop centred on a pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPatch {
    pub center: Coord,
    pub size: usize,
    pub bands: usize,
    pub data: Vec<f64>,
}

fn check_odd(p: usize) -> Result<isize> {
    if p == 0 || p.is_multiple_of(2) {
        return Err(Error::Argument(format!("patch size {p} must be odd")));
    }
    Ok((p / 2) as isize)
}

fn crop_bands(values: &[f32], bands: usize, scene: &HsiScene, i: usize, j: usize, p: usize) -> Result<RawPatch> {
    let half = check_odd(p)?;
    let mut data = vec![0.0; bands * p * p];
    for a in 0..p {
        let si = reflect(i as isize + a as isize - half, scene.height);
        for b in 0..p {
            let sj = reflect(j as isize + b as isize - half, scene.width);
            let at = (si * scene.width + sj) * bands;
            for (c, &v) in values[at..at + bands].iter().enumerate() {
                data[(c * p + a) * p + b] = v as f64;
            }
        }
    }
    Ok(RawPatch { center: (i, j), size: p, bands, data })
}

/// Spectral crop with mirror padding at scene borders.
pub fn extract_patch(scene: &HsiScene, i: usize, j: usize, p: usize) -> Result<RawPatch> {
    crop_bands(&scene.cube, scene.bands, scene, i, j, p)
}

pub fn extract_aux_patch(scene: &HsiScene, i: usize, j: usize, p: usize) -> Result<Option<RawPatch>> {
    match &scene.aux {
        Some(aux) => crop_bands(aux, scene.aux_bands, scene, i, j, p).map(Some),
        None => Ok(None),
    }
}

/// Label crop; positions outside the scene are unlabeled.
pub fn extract_labels(labels: &[u16], height: usize, width: usize, i: usize, j: usize, p: usize) -> Result<Vec<u16>> {
    let half = check_odd(p)?;
    let mut out = vec![0; p * p];
    for a in 0..p {
        for b in 0..p {
            let (si, sj) = (i as isize + a as isize - half, j as isize + b as isize - half);
            if si >= 0 && sj >= 0 && (si as usize) < height && (sj as usize) < width {
                out[a * p + b] = labels[si as usize * width + sj as usize];
            }
        }
    }
    Ok(out)
}

fn nearest_source(t: usize, from: usize, to: usize) -> usize {
    (((t as f64 + 0.5) * from as f64 / to as f64) as usize).min(from - 1)
}

fn nearest_target(s: usize, from: usize, to: usize) -> usize {
    (((s as f64 + 0.5) * to as f64 / from as f64) as usize).min(to - 1)
}

/// Nearest-neighbour label resize. Labelled source cells that no target cell
/// samples are written into their nearest target cell if it is still empty,
/// so sparse labels survive downscaling.
pub fn resize_labels(labels: &[u16], p: usize, r: usize) -> Vec<u16> {
    let mut out = vec![0; r * r];
    for a in 0..r {
        for b in 0..r {
            out[a * r + b] = labels[nearest_source(a, p, r) * p + nearest_source(b, p, r)];
        }
    }
    for a in 0..p {
        for b in 0..p {
            let l = labels[a * p + b];
            let t = nearest_target(a, p, r) * r + nearest_target(b, p, r);
            if l != 0 && out[t] == 0 {
                out[t] = l;
            }
        }
    }
    out
}

/// Network input: spectra and labels resized to the model grid `r`.
#[derive(Clone, Debug)]
pub struct PatchSample {
    pub center: Coord,
    pub patch_size: usize,
    pub model_size: usize,
    /// `(C, r, r)`.
    pub spectral: Tensor,
    pub label_patch: Vec<u16>,
    /// `(K2, r, r)`.
    pub aux_patch: Option<Tensor>,
}

fn resize_bands(raw: &RawPatch, r: usize) -> Result<Tensor> {
    let t = Tensor::from_f64(&[raw.bands, raw.size, raw.size], raw.data.clone())?;
    Ok(t.interpolate_bilinear(r, r)?)
}

pub fn resize_patch(raw: &RawPatch, labels: &[u16], aux: Option<&RawPatch>, r: usize) -> Result<PatchSample> {
    if r == 0 || labels.len() != raw.size * raw.size {
        return Err(Error::Argument(format!(
            "cannot resize a {0}x{0} patch with {1} labels to {r}",
            raw.size,
            labels.len()
        )));
    }
    Ok(PatchSample {
        center: raw.center,
        patch_size: raw.size,
        model_size: r,
        spectral: resize_bands(raw, r)?,
        label_patch: resize_labels(labels, raw.size, r),
        aux_patch: aux.map(|a| resize_bands(a, r)).transpose()?,
    })
}

/// Full patch pipeline for one centre using `labels` as the label map.
pub fn make_sample(scene: &HsiScene, labels: &[u16], center: Coord, p: usize, r: usize) -> Result<PatchSample> {
    let (i, j) = center;
    let raw = extract_patch(scene, i, j, p)?;
    let lab = extract_labels(labels, scene.height, scene.width, i, j, p)?;
    let aux = extract_aux_patch(scene, i, j, p)?;
    resize_patch(&raw, &lab, aux.as_ref(), r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub per_class_train: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { per_class_train: 10, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<Coord>,
    pub test: Vec<Coord>,
}

/// Random per-class split. Both lists come back in row-major order.
pub fn make_split(scene: &HsiScene, spec: &SplitSpec) -> Result<Split> {
    let mut by_class: Vec<Vec<Coord>> = vec![Vec::new(); scene.class_count];
    for (i, j) in scene.labeled_coords() {
        by_class[scene.label(i, j) as usize - 1].push((i, j));
    }
    if let Some(k) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Validation(format!("class {} has no labeled pixels", k + 1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut coords in by_class {
        coords.shuffle(&mut rng);
        let n = spec.per_class_train.min(coords.len());
        train.extend_from_slice(&coords[..n]);
        test.extend_from_slice(&coords[n..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}
