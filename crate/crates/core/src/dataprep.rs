//! Dataset preparation: grayscale conversion, square-crop extraction,
//! manifest construction and batch loading.
//!
//! Crops are stored on disk as 8-bit grayscale PNG files named
//! `<domain>_<source_id>_<offset>.png`; each domain directory carries a JSON
//! manifest listing every crop with its train/eval split.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// BT.601 luma weights used for RGB -> grayscale conversion.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Handwritten,
    Printed,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Handwritten => "handwritten",
            Domain::Printed => "printed",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "handwritten" => Ok(Domain::Handwritten),
            "printed" => Ok(Domain::Printed),
            other => Err(Error::InvalidInput(format!(
                "unknown domain `{other}` (expected `handwritten` or `printed`)"
            ))),
        }
    }
}

/// Pixel payload of a source scan: grayscale (H, W) or RGB (H, W, 3).
#[derive(Debug, Clone)]
pub enum PixelData {
    Gray(Array2<u8>),
    Rgb(Array3<u8>),
}

/// A rectangular staff scan with provenance.
#[derive(Debug, Clone)]
pub struct SourceImage {
    pub pixels: PixelData,
    pub domain: Domain,
    pub source_id: String,
}

impl SourceImage {
    pub fn new(pixels: PixelData, domain: Domain, source_id: impl Into<String>) -> Result<Self> {
        let (h, w) = match &pixels {
            PixelData::Gray(a) => (a.nrows(), a.ncols()),
            PixelData::Rgb(a) => {
                if a.shape()[2] != 3 {
                    return Err(Error::InvalidInput(format!(
                        "expected 3 channels, got {}",
                        a.shape()[2]
                    )));
                }
                (a.shape()[0], a.shape()[1])
            }
        };
        if h == 0 || w == 0 {
            return Err(Error::InvalidInput("image must be at least 1x1".into()));
        }
        Ok(SourceImage { pixels, domain, source_id: source_id.into() })
    }

    pub fn height(&self) -> usize {
        match &self.pixels {
            PixelData::Gray(a) => a.nrows(),
            PixelData::Rgb(a) => a.shape()[0],
        }
    }

    pub fn width(&self) -> usize {
        match &self.pixels {
            PixelData::Gray(a) => a.ncols(),
            PixelData::Rgb(a) => a.shape()[1],
        }
    }
}

/// A single square grayscale training image.
#[derive(Debug, Clone)]
pub struct ImageCrop {
    pub pixels: Array2<u8>,
    pub domain: Domain,
    pub source_id: String,
    pub offset_x: u32,
}

impl ImageCrop {
    pub fn size(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn file_name(&self) -> String {
        format!("{}_{}_{}.png", self.domain, self.source_id, self.offset_x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub source_id: String,
    pub offset: u32,
    pub split: Split,
}

/// Deterministic index of all crops for one domain.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub domain: Domain,
    pub crop_size: u32,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn count(&self) -> usize {
        self.entries.len()
    }

    pub fn indices_for(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Other(format!("manifest serialization failed: {e}")))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidInput(format!("malformed manifest {}: {e}", path.display())))
    }
}

/// A file excluded from a manifest, with the reason.
#[derive(Debug, Clone)]
pub struct Reject {
    pub path: PathBuf,
    pub reason: String,
}

/// Round to nearest with ties to even, then clamp into u8 range.
pub(crate) fn round_half_even_u8(x: f64) -> u8 {
    let floor = x.floor();
    let frac = x - floor;
    let v = if frac > 0.5 {
        floor + 1.0
    } else if frac < 0.5 {
        floor
    } else if (floor as i64) % 2 == 0 {
        floor
    } else {
        floor + 1.0
    };
    v.clamp(0.0, 255.0) as u8
}

/// Convert to a single channel using fixed BT.601 luma weights; grayscale
/// input is returned unchanged.
pub fn to_grayscale(image: &SourceImage) -> Result<SourceImage> {
    match &image.pixels {
        PixelData::Gray(_) => Ok(image.clone()),
        PixelData::Rgb(rgb) => {
            let (h, w) = (rgb.shape()[0], rgb.shape()[1]);
            let mut gray = Array2::<u8>::zeros((h, w));
            for i in 0..h {
                for j in 0..w {
                    let y = LUMA_WEIGHTS[0] * rgb[[i, j, 0]] as f64
                        + LUMA_WEIGHTS[1] * rgb[[i, j, 1]] as f64
                        + LUMA_WEIGHTS[2] * rgb[[i, j, 2]] as f64;
                    gray[[i, j]] = round_half_even_u8(y);
                }
            }
            Ok(SourceImage {
                pixels: PixelData::Gray(gray),
                domain: image.domain,
                source_id: image.source_id.clone(),
            })
        }
    }
}

/// Overlap weights for resampling a length-`src` axis to `dst` by area
/// averaging. Output cell `i` covers `[i*src/dst, (i+1)*src/dst)`.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let mut weights = Vec::new();
            let mut j = lo.floor() as usize;
            while (j as f64) < hi && j < src {
                let overlap = hi.min(j as f64 + 1.0) - lo.max(j as f64);
                if overlap > 0.0 {
                    weights.push((j, overlap / scale));
                }
                j += 1;
            }
            weights
        })
        .collect()
}

/// Separable area resampling of a grayscale image in double precision.
pub(crate) fn area_resample(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = (src.nrows(), src.ncols());
    let row_w = area_weights(h, out_h);
    let col_w = area_weights(w, out_w);

    // Rows first, then columns.
    let mut tmp = Array2::<f64>::zeros((out_h, w));
    for (i, ws) in row_w.iter().enumerate() {
        for j in 0..w {
            tmp[[i, j]] = ws.iter().map(|&(r, wt)| src[[r, j]] * wt).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for i in 0..out_h {
        for (j, ws) in col_w.iter().enumerate() {
            out[[i, j]] = ws.iter().map(|&(c, wt)| tmp[[i, c]] * wt).sum();
        }
    }
    out
}

/// Cut a grayscale scan into square crops.
///
/// The scan is first rescaled vertically to `crop_size` (uniform vertical
/// scale, width untouched), then windows of `crop_size` are taken
/// left-to-right at offsets 0, stride, 2*stride, ... A scan narrower than
/// `crop_size` yields no crops and logs a warning.
pub fn extract_square_crops(
    image: &SourceImage,
    crop_size: usize,
    stride: usize,
) -> Result<Vec<ImageCrop>> {
    let gray = match &image.pixels {
        PixelData::Gray(g) => g,
        PixelData::Rgb(_) => {
            return Err(Error::InvalidInput(
                "extract_square_crops expects a grayscale image; call to_grayscale first".into(),
            ))
        }
    };
    if crop_size == 0 {
        return Err(Error::InvalidInput("crop_size must be >= 1".into()));
    }
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be >= 1".into()));
    }

    let w = gray.ncols();
    if w < crop_size {
        log::warn!(
            "source `{}` is narrower ({}) than crop size {}; produced no crops",
            image.source_id,
            w,
            crop_size
        );
        return Ok(Vec::new());
    }

    // Vertical rescale to crop_size; already-exact heights pass through.
    let resized: Array2<u8> = if gray.nrows() == crop_size {
        gray.clone()
    } else {
        let srcf = gray.mapv(|v| v as f64);
        area_resample(&srcf, crop_size, w).mapv(round_half_even_u8)
    };

    let count = (w - crop_size) / stride + 1;
    let mut crops = Vec::with_capacity(count);
    for k in 0..count {
        let x0 = k * stride;
        let window = resized.slice(ndarray::s![.., x0..x0 + crop_size]).to_owned();
        crops.push(ImageCrop {
            pixels: window,
            domain: image.domain,
            source_id: image.source_id.clone(),
            offset_x: x0 as u32,
        });
    }
    Ok(crops)
}

/// Write crops as 8-bit grayscale PNGs into `dir`.
pub fn write_crops(crops: &[ImageCrop], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(crops.len());
    for crop in crops {
        let path = dir.join(crop.file_name());
        let s = crop.size();
        let raw: Vec<u8> = crop.pixels.iter().copied().collect();
        let img = image::GrayImage::from_raw(s as u32, s as u32, raw)
            .ok_or_else(|| Error::image(&path, "buffer size mismatch"))?;
        img.save(&path).map_err(|e| Error::image(&path, e.to_string()))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Load one crop PNG as (size, pixels).
pub fn read_crop_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::image(path, e.to_string()))?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), gray.into_raw())
        .expect("image buffer size"))
}

/// Split assignment by source id: a stable hash keeps every crop of one
/// source page in the same split.
pub fn split_for_source(source_id: &str, eval_fraction: f64) -> Split {
    let digest = Sha256::digest(source_id.as_bytes());
    let x = u64::from_be_bytes(digest[..8].try_into().unwrap());
    let frac = x as f64 / u64::MAX as f64;
    if frac < eval_fraction {
        Split::Eval
    } else {
        Split::Train
    }
}

fn parse_crop_name(name: &str, domain: Domain) -> Option<(String, u32)> {
    let stem = name.strip_suffix(".png")?;
    let rest = stem.strip_prefix(&format!("{domain}_"))?;
    let (source_id, offset) = rest.rsplit_once('_')?;
    if source_id.is_empty() {
        return None;
    }
    let offset: u32 = offset.parse().ok()?;
    Some((source_id.to_string(), offset))
}

/// Build a deterministic manifest over the crop PNGs in `directory`.
///
/// Files that match the crop naming scheme but cannot be decoded (or whose
/// size disagrees with the rest of the set) are excluded and returned in the
/// rejects report. Entries are ordered lexicographically by source id, then
/// by offset.
pub fn build_manifest(
    directory: &Path,
    domain: Domain,
    eval_fraction: f64,
) -> Result<(DatasetManifest, Vec<Reject>)> {
    if !(0.0..=1.0).contains(&eval_fraction) {
        return Err(Error::InvalidInput(format!(
            "eval_fraction must be in [0, 1], got {eval_fraction}"
        )));
    }
    let mut names: Vec<String> = Vec::new();
    let rd = std::fs::read_dir(directory).map_err(|e| Error::io(directory, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(directory, e))?;
        if entry.path().is_file() {
            if let Some(name) = entry.file_name().to_str() {
                if name.ends_with(".png") {
                    names.push(name.to_string());
                }
            }
        }
    }
    names.sort();

    let mut rejects = Vec::new();
    let mut parsed: Vec<(String, u32, String)> = Vec::new(); // (source_id, offset, name)
    for name in names {
        match parse_crop_name(&name, domain) {
            Some((source_id, offset)) => parsed.push((source_id, offset, name)),
            None => rejects.push(Reject {
                path: directory.join(&name),
                reason: format!("file name does not match `{domain}_<source>_<offset>.png`"),
            }),
        }
    }
    parsed.sort();

    let mut crop_size: Option<u32> = None;
    let mut entries = Vec::new();
    let mut seen: BTreeSet<(String, u32)> = BTreeSet::new();
    for (source_id, offset, name) in parsed {
        let path = directory.join(&name);
        let pixels = match read_crop_png(&path) {
            Ok(p) => p,
            Err(e) => {
                rejects.push(Reject { path, reason: e.to_string() });
                continue;
            }
        };
        if pixels.nrows() != pixels.ncols() {
            rejects.push(Reject {
                path,
                reason: format!("crop is not square: {}x{}", pixels.nrows(), pixels.ncols()),
            });
            continue;
        }
        let size = pixels.nrows() as u32;
        match crop_size {
            None => crop_size = Some(size),
            Some(s) if s != size => {
                rejects.push(Reject {
                    path,
                    reason: format!("crop size {size} differs from manifest size {s}"),
                });
                continue;
            }
            _ => {}
        }
        if !seen.insert((source_id.clone(), offset)) {
            rejects.push(Reject { path, reason: "duplicate (source_id, offset)".into() });
            continue;
        }
        entries.push(ManifestEntry {
            path: name,
            source_id: source_id.clone(),
            offset,
            split: split_for_source(&source_id, eval_fraction),
        });
    }

    Ok((DatasetManifest { domain, crop_size: crop_size.unwrap_or(0), entries }, rejects))
}

/// Load the crops at `indices` as a (len, 1, resolution, resolution) batch
/// in [-1, 1]. Crops are resampled to `resolution` by area averaging;
/// `base_dir` is the directory holding the manifest's files.
pub fn load_batch(
    manifest: &DatasetManifest,
    base_dir: &Path,
    indices: &[usize],
    resolution: usize,
) -> Result<Array4<f64>> {
    if resolution == 0 {
        return Err(Error::InvalidInput("resolution must be >= 1".into()));
    }
    if resolution as u32 > manifest.crop_size {
        return Err(Error::InvalidInput(format!(
            "resolution {} exceeds crop size {}",
            resolution, manifest.crop_size
        )));
    }
    let mut batch = Array4::<f64>::zeros((indices.len(), 1, resolution, resolution));
    for (bi, &idx) in indices.iter().enumerate() {
        let entry = manifest.entries.get(idx).ok_or_else(|| {
            Error::InvalidInput(format!(
                "index {idx} out of range for manifest with {} entries",
                manifest.count()
            ))
        })?;
        let path = base_dir.join(&entry.path);
        let pixels = read_crop_png(&path)?;
        let srcf = pixels.mapv(|v| v as f64);
        let resized = if pixels.nrows() == resolution && pixels.ncols() == resolution {
            srcf
        } else {
            area_resample(&srcf, resolution, resolution)
        };
        for i in 0..resolution {
            for j in 0..resolution {
                batch[[bi, 0, i, j]] = 2.0 * resized[[i, j]] / 255.0 - 1.0;
            }
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn gray_image(h: usize, w: usize, f: impl Fn(usize, usize) -> u8) -> SourceImage {
        let mut a = Array2::<u8>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                a[[i, j]] = f(i, j);
            }
        }
        SourceImage::new(PixelData::Gray(a), Domain::Handwritten, "test").unwrap()
    }

    #[test]
    fn grayscale_conversion_weights() {
        let mut rgb = Array3::<u8>::zeros((1, 3, 3));
        // white, black, pure red
        for c in 0..3 {
            rgb[[0, 0, c]] = 255;
        }
        rgb[[0, 2, 0]] = 255;
        let img = SourceImage::new(PixelData::Rgb(rgb), Domain::Printed, "p").unwrap();
        let gray = to_grayscale(&img).unwrap();
        match gray.pixels {
            PixelData::Gray(g) => {
                assert_eq!(g[[0, 0]], 255);
                assert_eq!(g[[0, 1]], 0);
                assert_eq!(g[[0, 2]], 76); // 0.299 * 255 = 76.245
            }
            _ => panic!("expected grayscale"),
        }
    }

    #[test]
    fn grayscale_passthrough_for_single_channel() {
        let img = gray_image(4, 4, |i, j| (i * 4 + j) as u8);
        let out = to_grayscale(&img).unwrap();
        match (&img.pixels, &out.pixels) {
            (PixelData::Gray(a), PixelData::Gray(b)) => assert_eq!(a, b),
            _ => panic!(),
        }
    }

    #[test]
    fn crop_counts_follow_floor_formula() {
        let img = gray_image(128, 512, |_, _| 7);
        let crops = extract_square_crops(&img, 128, 128).unwrap();
        assert_eq!(crops.len(), 4);
        assert_eq!(
            crops.iter().map(|c| c.offset_x).collect::<Vec<_>>(),
            vec![0, 128, 256, 384]
        );

        let img = gray_image(100, 300, |_, _| 7);
        assert_eq!(extract_square_crops(&img, 100, 100).unwrap().len(), 3);

        let narrow = gray_image(100, 90, |_, _| 7);
        assert!(extract_square_crops(&narrow, 100, 100).unwrap().is_empty());
    }

    #[test]
    fn crops_equal_windows_of_resized_source() {
        let img = gray_image(64, 130, |i, j| ((i + 2 * j) % 251) as u8);
        let crops = extract_square_crops(&img, 64, 33).unwrap();
        assert_eq!(crops.len(), (130 - 64) / 33 + 1);
        match &img.pixels {
            PixelData::Gray(g) => {
                for crop in &crops {
                    assert_eq!(crop.pixels.nrows(), 64);
                    assert_eq!(crop.pixels.ncols(), 64);
                    for i in 0..64 {
                        for j in 0..64 {
                            assert_eq!(crop.pixels[[i, j]], g[[i, crop.offset_x as usize + j]]);
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn vertical_resize_is_exact_for_integer_factors() {
        // 4 rows -> 2 rows: each output row is the mean of two input rows.
        let img = gray_image(4, 2, |i, _| (i * 10) as u8); // rows 0,10,20,30
        let crops = extract_square_crops(&img, 2, 2).unwrap();
        assert_eq!(crops.len(), 1);
        assert_eq!(crops[0].pixels[[0, 0]], 5);
        assert_eq!(crops[0].pixels[[1, 0]], 25);
    }

    #[test]
    fn split_by_source_is_stable_and_grouped() {
        let s = split_for_source("page-17", 0.25);
        for _ in 0..3 {
            assert_eq!(split_for_source("page-17", 0.25), s);
        }
        assert_eq!(split_for_source("anything", 0.0), Split::Train);
        assert_eq!(split_for_source("anything", 1.0), Split::Eval);
    }

    #[test]
    fn manifest_roundtrip_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let img = gray_image(32, 96, |i, j| ((i * j) % 255) as u8);
        let crops = extract_square_crops(&img, 32, 32).unwrap();
        write_crops(&crops, dir.path()).unwrap();

        let (m1, rej1) = build_manifest(dir.path(), Domain::Handwritten, 0.0).unwrap();
        let (m2, rej2) = build_manifest(dir.path(), Domain::Handwritten, 0.0).unwrap();
        assert!(rej1.is_empty() && rej2.is_empty());
        assert_eq!(m1.count(), 3);
        assert_eq!(m1, m2);

        let p1 = dir.path().join("manifest.json");
        let p2 = dir.path().join("manifest2.json");
        m1.save(&p1).unwrap();
        m2.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let loaded = DatasetManifest::load(&p1).unwrap();
        assert_eq!(loaded, m1);
    }

    #[test]
    fn manifest_rejects_undecodable_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = gray_image(16, 32, |_, _| 9);
        let crops = extract_square_crops(&img, 16, 16).unwrap();
        write_crops(&crops, dir.path()).unwrap();
        std::fs::write(dir.path().join("handwritten_bad_0.png"), b"not a png").unwrap();

        let (m, rejects) = build_manifest(dir.path(), Domain::Handwritten, 0.0).unwrap();
        assert_eq!(m.count(), 2);
        assert_eq!(rejects.len(), 1);
        assert!(rejects[0].path.ends_with("handwritten_bad_0.png"));
    }

    #[test]
    fn source_grouping_keeps_pages_whole() {
        let dir = tempfile::tempdir().unwrap();
        for page in 0..10 {
            let img = SourceImage::new(
                PixelData::Gray(Array2::from_elem((8, 80), page as u8 * 20)),
                Domain::Printed,
                format!("page{page}"),
            )
            .unwrap();
            let crops = extract_square_crops(&img, 8, 8).unwrap();
            write_crops(&crops, dir.path()).unwrap();
        }
        let (m, _) = build_manifest(dir.path(), Domain::Printed, 0.3).unwrap();
        assert_eq!(m.count(), 100);
        // Grouping oracle: every source must land wholly in one split.
        let mut by_source: std::collections::HashMap<&str, BTreeSet<Split>> =
            std::collections::HashMap::new();
        for e in &m.entries {
            by_source
                .entry(e.source_id.as_str())
                .or_default()
                .insert(e.split);
        }
        for (_, splits) in by_source {
            assert_eq!(splits.len(), 1);
        }
    }

    #[test]
    fn load_batch_endpoints_and_midpoint() {
        let dir = tempfile::tempdir().unwrap();
        for (name, value) in [("black", 0u8), ("white", 255), ("mid", 128)] {
            let img = SourceImage::new(
                PixelData::Gray(Array2::from_elem((16, 16), value)),
                Domain::Handwritten,
                name,
            )
            .unwrap();
            let crops = extract_square_crops(&img, 16, 16).unwrap();
            write_crops(&crops, dir.path()).unwrap();
        }
        let (m, _) = build_manifest(dir.path(), Domain::Handwritten, 0.0).unwrap();
        let batch = load_batch(&m, dir.path(), &[0, 1, 2], 8).unwrap();
        assert_eq!(batch.shape(), &[3, 1, 8, 8]);
        // Entries are sorted by source id: black, mid, white.
        assert_abs_diff_eq!(batch[[0, 0, 0, 0]], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(batch[[1, 0, 3, 3]], 2.0 * 128.0 / 255.0 - 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(batch[[2, 0, 7, 7]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn load_batch_names_bad_index() {
        let dir = tempfile::tempdir().unwrap();
        let img = gray_image(8, 8, |_, _| 1);
        let crops = extract_square_crops(&img, 8, 8).unwrap();
        write_crops(&crops, dir.path()).unwrap();
        let (m, _) = build_manifest(dir.path(), Domain::Handwritten, 0.0).unwrap();
        let err = load_batch(&m, dir.path(), &[5], 8).unwrap_err();
        assert!(err.to_string().contains("index 5"));
    }

    #[test]
    fn empty_directory_yields_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let (m, rejects) = build_manifest(dir.path(), Domain::Printed, 0.2).unwrap();
        assert_eq!(m.count(), 0);
        assert!(rejects.is_empty());
    }

    #[test]
    fn crop_name_parsing_handles_underscores_in_source() {
        assert_eq!(
            parse_crop_name("handwritten_w-01_p003_128.png", Domain::Handwritten),
            Some(("w-01_p003".to_string(), 128))
        );
        assert_eq!(parse_crop_name("printed_x_1.png", Domain::Handwritten), None);
        assert_eq!(parse_crop_name("handwritten__5.png", Domain::Handwritten), None);
    }
}
