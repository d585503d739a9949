//! Quantitative evaluation: Inception Score, Frechet Inception Distance,
//! Kernel Inception Distance and PCA projections, behind a pluggable
//! feature-extractor interface.
//!
//! All linear algebra runs in double precision on symmetric matrices via a
//! cyclic Jacobi eigensolver, so results are deterministic and need no
//! external LAPACK.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use scoreforge_autograd::nn::{Conv2d, Linear, WeightInit};
use scoreforge_autograd::Tensor;

use crate::dataprep::area_resample;
use crate::error::{Error, Result};

/// KID kernel: (x . y / d + 1)^3.
pub const KID_DEGREE: u32 = 3;
pub const KID_OFFSET: f64 = 1.0;

/// Minimum sample count below which FID estimates get a warning.
pub const FID_SAMPLE_WARN: usize = 2048;

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (cyclic Jacobi)
// ---------------------------------------------------------------------------

/// Eigenvalues (ascending) and eigenvectors (columns) of a symmetric matrix.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Numerical(format!("matrix is {}x{}, not square", n, a.ncols())));
    }
    let scale = a.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1e-300);
    for i in 0..n {
        for j in 0..i {
            if (a[[i, j]] - a[[j, i]]).abs() > 1e-9 * scale.max(1.0) {
                return Err(Error::Numerical(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    a[[i, j]],
                    a[[j, i]]
                )));
            }
        }
    }

    let mut m = a.clone();
    let mut v: Array2<f64> = Array2::eye(n);
    let off = |m: &Array2<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[[i, j]] * m[[i, j]];
                }
            }
        }
        s.sqrt()
    };

    let tol = 1e-14 * scale * n as f64;
    let mut converged = false;
    for _sweep in 0..200 {
        if off(&m) <= tol {
            converged = true;
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() <= tol / (n as f64 * n as f64).max(1.0) {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged && off(&m) > 1e-7 * scale.max(1.0) {
        return Err(Error::Numerical(format!(
            "Jacobi eigensolver did not converge (off-diagonal {:.3e})",
            off(&m)
        )));
    }

    let mut pairs: Vec<(f64, usize)> = (0..n).map(|i| (m[[i, i]], i)).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let values = Array1::from_iter(pairs.iter().map(|&(val, _)| val));
    let mut vectors = Array2::zeros((n, n));
    for (col, &(_, src)) in pairs.iter().enumerate() {
        for row in 0..n {
            vectors[[row, col]] = v[[row, src]];
        }
    }
    Ok((values, vectors))
}

/// Clamp slightly negative eigenvalues of a PSD matrix to zero; error when
/// the negativity exceeds numerical noise.
fn clamp_psd_eigenvalues(values: &mut Array1<f64>, context: &str) -> Result<()> {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let tol = 1e-8f64.max(1e-12 * max);
    for v in values.iter_mut() {
        if *v < 0.0 {
            if *v < -tol {
                return Err(Error::Numerical(format!(
                    "{context}: eigenvalue {v:.6e} is negative beyond tolerance {tol:.1e}"
                )));
            }
            *v = 0.0;
        }
    }
    Ok(())
}

/// Symmetric PSD matrix square root via eigendecomposition.
fn matrix_sqrt_psd(a: &Array2<f64>, context: &str) -> Result<Array2<f64>> {
    let (mut values, vectors) = symmetric_eigen(a)?;
    clamp_psd_eigenvalues(&mut values, context)?;
    let n = a.nrows();
    let mut out = Array2::zeros((n, n));
    for k in 0..n {
        let s = values[k].sqrt();
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += s * vectors[[i, k]] * vectors[[j, k]];
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Moments and FID
// ---------------------------------------------------------------------------

/// Mean vector and covariance matrix of a feature set.
#[derive(Debug, Clone)]
pub struct FeatureMoments {
    pub mu: Array1<f64>,
    pub sigma: Array2<f64>,
}

/// Sample mean and unbiased (n-1) covariance of an (n, d) feature matrix.
pub fn compute_moments(features: &Array2<f64>) -> Result<FeatureMoments> {
    let n = features.nrows();
    let d = features.ncols();
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 samples for moments, got {n}")));
    }
    let mu = features.mean_axis(Axis(0)).unwrap();
    let mut sigma = Array2::<f64>::zeros((d, d));
    for row in features.rows() {
        for i in 0..d {
            let di = row[i] - mu[i];
            for j in i..d {
                sigma[[i, j]] += di * (row[j] - mu[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            sigma[[i, j]] /= denom;
            sigma[[j, i]] = sigma[[i, j]];
        }
    }
    Ok(FeatureMoments { mu, sigma })
}

/// Frechet distance between two Gaussians:
/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}),
/// with the cross term computed as Tr sqrt(S_a^{1/2} S_b S_a^{1/2}).
pub fn frechet_distance(a: &FeatureMoments, b: &FeatureMoments) -> Result<f64> {
    let d = a.mu.len();
    if b.mu.len() != d || a.sigma.nrows() != d || b.sigma.nrows() != d {
        return Err(Error::InvalidInput(format!(
            "moment dimension mismatch: {} vs {}",
            d,
            b.mu.len()
        )));
    }
    let dmu: f64 = a
        .mu
        .iter()
        .zip(b.mu.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();

    let root_a = matrix_sqrt_psd(&a.sigma, "sqrt(sigma_a)")?;
    let inner = root_a.dot(&b.sigma).dot(&root_a);
    // Symmetrize away round-off before the second decomposition.
    let inner = (&inner + &inner.t()) * 0.5;
    let (mut values, _) = symmetric_eigen(&inner)?;
    clamp_psd_eigenvalues(&mut values, "sqrt(sigma_a sigma_b)")?;
    let tr_sqrt: f64 = values.iter().map(|v| v.sqrt()).sum();

    let tr_a: f64 = (0..d).map(|i| a.sigma[[i, i]]).sum();
    let tr_b: f64 = (0..d).map(|i| b.sigma[[i, i]]).sum();
    let fid = dmu + tr_a + tr_b - 2.0 * tr_sqrt;
    if fid < 0.0 {
        if fid > -1e-8 {
            return Ok(0.0);
        }
        return Err(Error::Numerical(format!("FID evaluated to {fid:.6e} < 0")));
    }
    Ok(fid)
}

// ---------------------------------------------------------------------------
// KID
// ---------------------------------------------------------------------------

/// Unbiased MMD^2 with the cubic polynomial kernel (x . y / d + 1)^3.
pub fn kid(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    let (m, d) = (x.nrows(), x.ncols());
    let n = y.nrows();
    if m < 2 || n < 2 {
        return Err(Error::InvalidInput(format!("KID needs m, n >= 2 (got {m}, {n})")));
    }
    if y.ncols() != d {
        return Err(Error::InvalidInput(format!(
            "KID feature dimension mismatch: {d} vs {}",
            y.ncols()
        )));
    }
    let kern = |dot: f64| (dot / d as f64 + KID_OFFSET).powi(KID_DEGREE as i32);

    let kxx = x.dot(&x.t());
    let kyy = y.dot(&y.t());
    let kxy = x.dot(&y.t());

    let mut sum_xx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                sum_xx += kern(kxx[[i, j]]);
            }
        }
    }
    let mut sum_yy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum_yy += kern(kyy[[i, j]]);
            }
        }
    }
    let mut sum_xy = 0.0;
    for i in 0..m {
        for j in 0..n {
            sum_xy += kern(kxy[[i, j]]);
        }
    }
    Ok(sum_xx / (m * (m - 1)) as f64 + sum_yy / (n * (n - 1)) as f64
        - 2.0 * sum_xy / (m * n) as f64)
}

// ---------------------------------------------------------------------------
// Inception Score
// ---------------------------------------------------------------------------

fn validate_probability_rows(probs: &Array2<f64>) -> Result<()> {
    for (i, row) in probs.rows().into_iter().enumerate() {
        let mut sum = 0.0;
        for &p in row {
            if !(p >= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "probability row {i} has negative entry {p}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "probability row {i} sums to {sum}, not 1"
            )));
        }
    }
    Ok(())
}

/// Inception Score over `splits` contiguous groups:
/// exp(E_x KL(p(y|x) || p_bar(y))) per group, reported mean and population
/// standard deviation across groups.
pub fn inception_score(probs: &Array2<f64>, splits: usize) -> Result<(f64, f64)> {
    let n = probs.nrows();
    if splits == 0 || n < splits {
        return Err(Error::InvalidInput(format!(
            "need at least as many samples ({n}) as splits ({splits})"
        )));
    }
    validate_probability_rows(probs)?;

    let mut scores = Vec::with_capacity(splits);
    for g in 0..splits {
        let lo = g * n / splits;
        let hi = (g + 1) * n / splits;
        let group = probs.slice(ndarray::s![lo..hi, ..]);
        let marginal = group.mean_axis(Axis(0)).unwrap();
        let mut mean_kl = 0.0;
        for row in group.rows() {
            let mut kl = 0.0;
            for (&p, &q) in row.iter().zip(marginal.iter()) {
                if p > 0.0 {
                    kl += p * (p / q).ln();
                }
            }
            mean_kl += kl;
        }
        mean_kl /= (hi - lo) as f64;
        // KL is nonnegative; shave off float round-off so IS >= 1 holds.
        scores.push(mean_kl.max(0.0).exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

/// Projection of labelled feature sets onto shared principal directions.
#[derive(Debug, Clone)]
pub struct PcaProjection {
    pub labels: Vec<String>,
    pub coordinates: Vec<Array2<f64>>,
    pub explained_variance_ratio: Vec<f64>,
}

/// Project all sets onto the top principal directions of the pooled data.
/// Components are sign-fixed so their first nonzero loading is positive.
pub fn pca_project(sets: &[(String, Array2<f64>)], components: usize) -> Result<PcaProjection> {
    if sets.is_empty() {
        return Err(Error::InvalidInput("no feature sets given".into()));
    }
    let d = sets[0].1.ncols();
    let total: usize = sets.iter().map(|(_, m)| m.nrows()).sum();
    if total < components {
        return Err(Error::InvalidInput(format!(
            "{total} samples cannot support {components} components"
        )));
    }
    for (label, m) in sets {
        if m.ncols() != d {
            return Err(Error::InvalidInput(format!(
                "feature set `{label}` has dimension {}, expected {d}",
                m.ncols()
            )));
        }
    }

    let mut pooled = Array2::<f64>::zeros((total, d));
    let mut row = 0;
    for (_, m) in sets {
        for r in m.rows() {
            pooled.row_mut(row).assign(&r);
            row += 1;
        }
    }
    let mean = pooled.mean_axis(Axis(0)).unwrap();
    let centered = &pooled - &mean.view().insert_axis(Axis(0));
    let denom = if total > 1 { (total - 1) as f64 } else { 1.0 };
    let cov = centered.t().dot(&centered) / denom;

    let (values, vectors) = symmetric_eigen(&cov)?;
    let total_var: f64 = values.iter().map(|&v| v.max(0.0)).sum();
    let mut basis = Array2::<f64>::zeros((d, components));
    let mut explained = Vec::with_capacity(components);
    for k in 0..components {
        let src = d - 1 - k; // eigenvalues ascend; take from the top
        let mut col: Vec<f64> = (0..d).map(|i| vectors[[i, src]]).collect();
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                for v in col.iter_mut() {
                    *v = -*v;
                }
            }
        }
        for i in 0..d {
            basis[[i, k]] = col[i];
        }
        let ratio = if total_var > 0.0 { values[src].max(0.0) / total_var } else { 0.0 };
        explained.push(ratio);
    }

    let mut labels = Vec::new();
    let mut coordinates = Vec::new();
    for (label, m) in sets {
        let centered = m - &mean.view().insert_axis(Axis(0));
        coordinates.push(centered.dot(&basis));
        labels.push(label.clone());
    }
    Ok(PcaProjection { labels, coordinates, explained_variance_ratio: explained })
}

/// Write PCA coordinates as CSV rows (label, pc1, pc2, ...).
pub fn write_pca_csv(proj: &PcaProjection, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Other(e.to_string()))?;
    let comps = proj.explained_variance_ratio.len();
    let mut header = vec!["label".to_string()];
    for k in 0..comps {
        header.push(format!("pc{}", k + 1));
    }
    w.write_record(&header).map_err(|e| Error::Other(e.to_string()))?;
    for (label, coords) in proj.labels.iter().zip(&proj.coordinates) {
        for row in coords.rows() {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|v| format!("{v}")));
            w.write_record(&rec).map_err(|e| Error::Other(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Feature extractors
// ---------------------------------------------------------------------------

/// Maps image batches to features and class probabilities. Implementations
/// must be deterministic for fixed input and safe for concurrent read-only
/// inference.
pub trait FeatureExtractor {
    fn id(&self) -> &str;
    /// Resolution at which images should be loaded for this extractor.
    fn input_resolution(&self) -> usize;
    /// (N, 1, R, R) in [-1, 1] -> (N, d) features.
    fn embed(&self, images: &Array4<f64>) -> Result<Array2<f64>>;
    /// (N, 1, R, R) in [-1, 1] -> (N, C) probabilities, each row summing to 1.
    fn classify(&self, images: &Array4<f64>) -> Result<Array2<f64>>;
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Deterministic offline extractor: a fixed random projection for features
/// and a softmax over a second projection for class probabilities.
pub struct TestExtractor {
    id: String,
    resolution: usize,
    w_embed: Array2<f64>,
    w_class: Array2<f64>,
}

impl TestExtractor {
    pub fn new(seed: u64, resolution: usize, dim: usize, classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = resolution * resolution;
        let w_embed = Array2::from_shape_vec(
            (flat, dim),
            Tensor::randn(&[flat, dim], 1.0 / (flat as f64).sqrt(), &mut rng).to_vec(),
        )
        .unwrap();
        let w_class = Array2::from_shape_vec(
            (dim, classes),
            Tensor::randn(&[dim, classes], 1.0 / (dim as f64).sqrt(), &mut rng).to_vec(),
        )
        .unwrap();
        TestExtractor { id: format!("test-extractor-{seed}"), resolution, w_embed, w_class }
    }

    fn flatten(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        let s = images.shape();
        if s[1] != 1 || s[2] != self.resolution || s[3] != self.resolution {
            return Err(Error::InvalidInput(format!(
                "extractor expects (N, 1, {r}, {r}), got {s:?}",
                r = self.resolution
            )));
        }
        let n = s[0];
        Ok(images
            .view()
            .into_shape_with_order((n, self.resolution * self.resolution))
            .unwrap()
            .to_owned())
    }
}

impl Default for TestExtractor {
    fn default() -> Self {
        TestExtractor::new(0, 32, 48, 10)
    }
}

impl FeatureExtractor for TestExtractor {
    fn id(&self) -> &str {
        &self.id
    }

    fn input_resolution(&self) -> usize {
        self.resolution
    }

    fn embed(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        Ok(self.flatten(images)?.dot(&self.w_embed))
    }

    fn classify(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        let mut logits = self.embed(images)?.dot(&self.w_class);
        softmax_rows(&mut logits);
        Ok(logits)
    }
}

/// Small convolutional classifier used behind [`ClassifierAdapter`].
pub struct SmallCnn {
    pub input_resolution: usize,
    pub base: usize,
    pub classes: usize,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    head: Linear,
}

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    input_resolution: usize,
    base: usize,
    classes: usize,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl SmallCnn {
    pub fn new(input_resolution: usize, base: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let init = WeightInit::Normal(0.05);
        SmallCnn {
            input_resolution,
            base,
            classes,
            conv1: Conv2d::new(3, base, 3, 2, 1, true, init, rng),
            conv2: Conv2d::new(base, base * 2, 3, 2, 1, true, init, rng),
            conv3: Conv2d::new(base * 2, base * 4, 3, 2, 1, true, init, rng),
            head: Linear::new(base * 4, classes, true, init, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.base * 4
    }

    /// x: (N, 3, R, R) -> penultimate features (N, 4 * base).
    fn features(&self, x: &Tensor) -> Tensor {
        let h = self.conv1.forward(x).leaky_relu(0.2);
        let h = self.conv2.forward(&h).leaky_relu(0.2);
        let h = self.conv3.forward(&h).leaky_relu(0.2);
        let n = h.shape()[0];
        let c = self.feature_dim();
        h.mean_axes(&[2, 3], false).reshape(&[n, c])
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.conv1.collect_params("conv1", &mut out);
        self.conv2.collect_params("conv2", &mut out);
        self.conv3.collect_params("conv3", &mut out);
        self.head.collect_params("head", &mut out);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for (name, t) in self.named_params() {
            tensors.insert(name, (t.shape(), t.to_vec()));
        }
        let file = ClassifierFile {
            input_resolution: self.input_resolution,
            base: self.base,
            classes: self.classes,
            tensors,
        };
        let json = serde_json::to_string(&file)
            .map_err(|e| Error::Other(format!("classifier serialization: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ClassifierFile = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidInput(format!("malformed classifier file: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cnn = SmallCnn::new(file.input_resolution, file.base, file.classes, &mut rng);
        for (name, t) in cnn.named_params() {
            let (shape, data) = file
                .tensors
                .get(&name)
                .ok_or_else(|| Error::InvalidInput(format!("classifier misses tensor `{name}`")))?;
            if shape != &t.shape() {
                return Err(Error::InvalidInput(format!(
                    "classifier tensor `{name}` has shape {shape:?}, expected {:?}",
                    t.shape()
                )));
            }
            t.set_value(
                ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), data.clone()).unwrap(),
            );
        }
        Ok(cnn)
    }
}

/// Bilinear resample of one grayscale plane (align_corners = false).
pub(crate) fn bilinear_resample(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = (src.nrows(), src.ncols());
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for i in 0..out_h {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for j in 0..out_w {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            out[[i, j]] = src[[y0, x0]] * (1.0 - wy) * (1.0 - wx)
                + src[[y0, x1]] * (1.0 - wy) * wx
                + src[[y1, x0]] * wy * (1.0 - wx)
                + src[[y1, x1]] * wy * wx;
        }
    }
    out
}

/// Adapter exposing a pretrained [`SmallCnn`] through the extractor
/// interface: grayscale input is replicated to three channels and resized to
/// the classifier's input size by bilinear resampling.
pub struct ClassifierAdapter {
    id: String,
    cnn: SmallCnn,
}

impl ClassifierAdapter {
    pub fn from_file(path: &Path) -> Result<Self> {
        let cnn = SmallCnn::load(path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("classifier");
        Ok(ClassifierAdapter { id: format!("classifier:{stem}"), cnn })
    }

    pub fn from_cnn(cnn: SmallCnn, id: impl Into<String>) -> Self {
        ClassifierAdapter { id: id.into(), cnn }
    }

    fn preprocess(&self, images: &Array4<f64>) -> Tensor {
        let s = images.shape();
        let (n, r) = (s[0], self.cnn.input_resolution);
        let mut out = ndarray::Array4::<f64>::zeros((n, 3, r, r));
        for b in 0..n {
            let plane = images.index_axis(Axis(0), b);
            let plane = plane.index_axis(Axis(0), 0).to_owned();
            let resized = if plane.nrows() == r && plane.ncols() == r {
                plane
            } else {
                bilinear_resample(&plane, r, r)
            };
            for c in 0..3 {
                for i in 0..r {
                    for j in 0..r {
                        out[[b, c, i, j]] = resized[[i, j]];
                    }
                }
            }
        }
        Tensor::constant(out.into_dyn())
    }
}

impl FeatureExtractor for ClassifierAdapter {
    fn id(&self) -> &str {
        &self.id
    }

    fn input_resolution(&self) -> usize {
        self.cnn.input_resolution
    }

    fn embed(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        let x = self.preprocess(images);
        let f = self.cnn.features(&x);
        let n = f.shape()[0];
        let d = f.shape()[1];
        Ok(Array2::from_shape_vec((n, d), f.to_vec()).unwrap())
    }

    fn classify(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        let x = self.preprocess(images);
        let f = self.cnn.features(&x);
        let logits = self.cnn.head.forward(&f);
        let n = logits.shape()[0];
        let c = logits.shape()[1];
        let mut probs = Array2::from_shape_vec((n, c), logits.to_vec()).unwrap();
        softmax_rows(&mut probs);
        Ok(probs)
    }
}

// ---------------------------------------------------------------------------
// Directory evaluation
// ---------------------------------------------------------------------------

/// One evaluation run's results, serialized as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub extractor_id: String,
    pub n_real: usize,
    pub n_fake: usize,
    pub is_mean: f64,
    pub is_std: f64,
    pub fid: f64,
    pub kid: f64,
    pub splits: usize,
    pub kernel: KernelSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSpec {
    pub degree: u32,
    pub scale: f64,
    pub offset: f64,
}

/// Load every readable image in a directory (sorted by name) as a
/// (n, 1, resolution, resolution) batch in [-1, 1]. Unreadable files are
/// skipped with a warning.
pub fn load_image_dir(dir: &Path, resolution: usize, limit: Option<usize>) -> Result<Array4<f64>> {
    load_image_dir_named(dir, resolution, limit).map(|(batch, _)| batch)
}

/// Like [`load_image_dir`] but also returns the file stem of each loaded
/// image, aligned with the batch rows.
pub fn load_image_dir_named(
    dir: &Path,
    resolution: usize,
    limit: Option<usize>,
) -> Result<(Array4<f64>, Vec<String>)> {
    let mut names: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("png") | Some("jpg") | Some("jpeg") | Some("bmp")
                )
        })
        .collect();
    names.sort();
    if let Some(limit) = limit {
        names.truncate(limit);
    }

    let mut planes: Vec<Array2<f64>> = Vec::new();
    let mut stems: Vec<String> = Vec::new();
    for path in &names {
        match crate::dataprep::read_crop_png(path) {
            Ok(pixels) => {
                let srcf = pixels.mapv(|v| v as f64);
                let resized = if pixels.nrows() == resolution && pixels.ncols() == resolution {
                    srcf
                } else {
                    area_resample(&srcf, resolution, resolution)
                };
                planes.push(resized.mapv(|v| 2.0 * v / 255.0 - 1.0));
                stems.push(
                    path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string(),
                );
            }
            Err(e) => log::warn!("skipping unreadable image {}: {e}", path.display()),
        }
    }
    if planes.is_empty() {
        return Err(Error::InvalidInput(format!("no readable images in {}", dir.display())));
    }
    let mut out = Array4::<f64>::zeros((planes.len(), 1, resolution, resolution));
    for (b, plane) in planes.iter().enumerate() {
        for i in 0..resolution {
            for j in 0..resolution {
                out[[b, 0, i, j]] = plane[[i, j]];
            }
        }
    }
    Ok((out, stems))
}

fn wrap_extractor<T>(id: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Extractor { id: id.to_string(), message: e.to_string() })
}

/// FID between two in-memory image batches under one extractor.
pub fn fid_between_images(
    extractor: &dyn FeatureExtractor,
    real: &Array4<f64>,
    fake: &Array4<f64>,
) -> Result<f64> {
    let real = resample_batch(real, extractor.input_resolution());
    let fake = resample_batch(fake, extractor.input_resolution());
    let fr = wrap_extractor(extractor.id(), extractor.embed(&real))?;
    let ff = wrap_extractor(extractor.id(), extractor.embed(&fake))?;
    frechet_distance(&compute_moments(&fr)?, &compute_moments(&ff)?)
}

/// Area-resample a batch to a target resolution (no-op when it matches).
pub fn resample_batch(batch: &Array4<f64>, resolution: usize) -> Array4<f64> {
    let s = batch.shape();
    if s[2] == resolution && s[3] == resolution {
        return batch.clone();
    }
    let mut out = Array4::<f64>::zeros((s[0], 1, resolution, resolution));
    for b in 0..s[0] {
        let plane = batch.index_axis(Axis(0), b);
        let plane = plane.index_axis(Axis(0), 0).to_owned();
        let r = area_resample(&plane, resolution, resolution);
        for i in 0..resolution {
            for j in 0..resolution {
                out[[b, 0, i, j]] = r[[i, j]];
            }
        }
    }
    out
}

/// Run IS on the fake directory and FID/KID between real and fake
/// directories, all under one extractor.
pub fn evaluate(
    real_dir: &Path,
    fake_dir: &Path,
    extractor: &dyn FeatureExtractor,
    splits: usize,
) -> Result<MetricReport> {
    let res = extractor.input_resolution();
    let real = load_image_dir(real_dir, res, None)?;
    let fake = load_image_dir(fake_dir, res, None)?;
    let (n_real, n_fake) = (real.shape()[0], fake.shape()[0]);
    if n_real < 2 || n_fake < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 images per directory (got {n_real} real, {n_fake} fake)"
        )));
    }
    if n_real < FID_SAMPLE_WARN || n_fake < FID_SAMPLE_WARN {
        log::warn!(
            "FID computed from {n_real} real / {n_fake} fake samples; \
             estimates below {FID_SAMPLE_WARN} samples are noisy"
        );
    }

    let probs = wrap_extractor(extractor.id(), extractor.classify(&fake))?;
    let (is_mean, is_std) = inception_score(&probs, splits)?;
    let fr = wrap_extractor(extractor.id(), extractor.embed(&real))?;
    let ff = wrap_extractor(extractor.id(), extractor.embed(&fake))?;
    let fid = frechet_distance(&compute_moments(&fr)?, &compute_moments(&ff)?)?;
    let kid_value = kid(&fr, &ff)?;
    let d = fr.ncols();

    Ok(MetricReport {
        extractor_id: extractor.id().to_string(),
        n_real,
        n_fake,
        is_mean,
        is_std,
        fid,
        kid: kid_value,
        splits,
        kernel: KernelSpec { degree: KID_DEGREE, scale: 1.0 / d as f64, offset: KID_OFFSET },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn eigen_recovers_diagonal() {
        let a = Array2::from_shape_vec((2, 2), vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        assert_abs_diff_eq!(vals[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], 3.0, epsilon = 1e-12);
        // Columns are unit vectors.
        for c in 0..2 {
            let norm: f64 = (0..2).map(|r| vecs[[r, c]] * vecs[[r, c]]).sum();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn eigen_reconstructs_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = Tensor::randn(&[6, 6], 1.0, &mut rng);
        let m = Array2::from_shape_vec((6, 6), raw.to_vec()).unwrap();
        let sym = (&m + &m.t()) * 0.5;
        let (vals, vecs) = symmetric_eigen(&sym).unwrap();
        // V diag(vals) V^T == sym
        let mut rec = Array2::<f64>::zeros((6, 6));
        for k in 0..6 {
            for i in 0..6 {
                for j in 0..6 {
                    rec[[i, j]] += vals[k] * vecs[[i, k]] * vecs[[j, k]];
                }
            }
        }
        for (a, b) in rec.iter().zip(sym.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn moments_hand_case() {
        let f = Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        let m = compute_moments(&f).unwrap();
        assert_eq!(m.mu.to_vec(), vec![1.0, 0.0]);
        assert_eq!(m.sigma[[0, 0]], 2.0); // (n-1) denominator
        assert_eq!(m.sigma[[0, 1]], 0.0);
        assert_eq!(m.sigma[[1, 1]], 0.0);

        let same = Array2::from_shape_vec((3, 2), vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let m = compute_moments(&same).unwrap();
        assert!(m.sigma.iter().all(|&v| v == 0.0));

        assert!(compute_moments(&Array2::zeros((1, 2))).is_err());
    }

    #[test]
    fn fid_identity_and_1d_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Array2::from_shape_vec((20, 3), Tensor::randn(&[20, 3], 1.0, &mut rng).to_vec())
            .unwrap();
        let m = compute_moments(&f).unwrap();
        assert!(frechet_distance(&m, &m).unwrap() <= 1e-8);

        // 1-D: (mu 0, var 1) vs (mu 1, var 4) -> 1 + (1 + 4 - 2*2) = 2.
        let a = FeatureMoments {
            mu: Array1::from_vec(vec![0.0]),
            sigma: Array2::from_shape_vec((1, 1), vec![1.0]).unwrap(),
        };
        let b = FeatureMoments {
            mu: Array1::from_vec(vec![1.0]),
            sigma: Array2::from_shape_vec((1, 1), vec![4.0]).unwrap(),
        };
        assert_abs_diff_eq!(frechet_distance(&a, &b).unwrap(), 2.0, epsilon = 1e-8);
    }

    #[test]
    fn fid_commuting_diagonal_matches_closed_form() {
        let mus = (vec![0.5, -1.0, 2.0], vec![0.0, 1.0, 1.5]);
        let vars = (vec![1.0, 2.0, 0.5], vec![2.0, 0.25, 1.0]);
        let a = FeatureMoments {
            mu: Array1::from_vec(mus.0.clone()),
            sigma: Array2::from_diag(&Array1::from_vec(vars.0.clone())),
        };
        let b = FeatureMoments {
            mu: Array1::from_vec(mus.1.clone()),
            sigma: Array2::from_diag(&Array1::from_vec(vars.1.clone())),
        };
        let expect: f64 = (0..3)
            .map(|i| {
                (mus.0[i] - mus.1[i]).powi(2)
                    + (vars.0[i].sqrt() - vars.1[i].sqrt()).powi(2)
            })
            .sum();
        assert_abs_diff_eq!(frechet_distance(&a, &b).unwrap(), expect, epsilon = 1e-8);
    }

    #[test]
    fn fid_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fa = Array2::from_shape_vec((30, 4), Tensor::randn(&[30, 4], 1.0, &mut rng).to_vec())
            .unwrap();
        let fb = Array2::from_shape_vec((25, 4), Tensor::randn(&[25, 4], 1.5, &mut rng).to_vec())
            .unwrap();
        let (ma, mb) = (compute_moments(&fa).unwrap(), compute_moments(&fb).unwrap());
        let ab = frechet_distance(&ma, &mb).unwrap();
        let ba = frechet_distance(&mb, &ma).unwrap();
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-8);
    }

    #[test]
    fn kid_hand_case() {
        // X = Y = {e1, e2} in d = 2: 1 + 1 - 4.375 = -2.375.
        let x = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = x.clone();
        assert_abs_diff_eq!(kid(&x, &y).unwrap(), -2.375, epsilon = 1e-10);
    }

    #[test]
    fn kid_matches_brute_force_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Array2::from_shape_vec((5, 3), Tensor::randn(&[5, 3], 1.0, &mut rng).to_vec())
            .unwrap();
        let y = Array2::from_shape_vec((4, 3), Tensor::randn(&[4, 3], 1.0, &mut rng).to_vec())
            .unwrap();
        let d = 3.0;
        let kern = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
            let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
            (dot / d + 1.0).powi(3)
        };
        let m = 5usize;
        let n = 4usize;
        let mut xx = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    xx += kern(x.row(i), x.row(j));
                }
            }
        }
        let mut yy = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    yy += kern(y.row(i), y.row(j));
                }
            }
        }
        let mut xy = 0.0;
        for i in 0..m {
            for j in 0..n {
                xy += kern(x.row(i), y.row(j));
            }
        }
        let brute =
            xx / (m * (m - 1)) as f64 + yy / (n * (n - 1)) as f64 - 2.0 * xy / (m * n) as f64;
        assert_abs_diff_eq!(kid(&x, &y).unwrap(), brute, epsilon = 1e-10);
    }

    #[test]
    fn kid_symmetric_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = Array2::from_shape_vec((6, 2), Tensor::randn(&[6, 2], 1.0, &mut rng).to_vec())
            .unwrap();
        let y = Array2::from_shape_vec((5, 2), Tensor::randn(&[5, 2], 1.0, &mut rng).to_vec())
            .unwrap();
        let base = kid(&x, &y).unwrap();
        assert_abs_diff_eq!(base, kid(&y, &x).unwrap(), epsilon = 1e-12);
        // Permute rows of x.
        let mut xp = x.clone();
        let r0 = xp.row(0).to_owned();
        let r5 = xp.row(5).to_owned();
        xp.row_mut(0).assign(&r5);
        xp.row_mut(5).assign(&r0);
        assert_abs_diff_eq!(base, kid(&xp, &y).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn inception_score_uniform_and_onehot() {
        let uniform = Array2::from_elem((8, 4), 0.25);
        let (mean, std) = inception_score(&uniform, 2).unwrap();
        assert_eq!(mean, 1.0);
        assert_eq!(std, 0.0);

        let mut onehot = Array2::zeros((4, 4));
        for i in 0..4 {
            onehot[[i, i]] = 1.0;
        }
        let (mean, _) = inception_score(&onehot, 1).unwrap();
        assert_abs_diff_eq!(mean, 4.0, epsilon = 1e-9);
    }

    #[test]
    fn inception_score_bounds_and_errors() {
        assert!(inception_score(&Array2::from_elem((2, 3), 1.0 / 3.0), 3).is_err());
        let bad = Array2::from_elem((4, 2), 0.7);
        assert!(inception_score(&bad, 1).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut probs = Array2::from_shape_vec(
            (12, 5),
            Tensor::randn(&[12, 5], 1.0, &mut rng).to_vec(),
        )
        .unwrap();
        softmax_rows(&mut probs);
        let (mean, _) = inception_score(&probs, 3).unwrap();
        assert!((1.0..=5.0).contains(&mean));
    }

    #[test]
    fn inception_score_invariant_to_permutation_within_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut probs = Array2::from_shape_vec(
            (6, 4),
            Tensor::randn(&[6, 4], 1.0, &mut rng).to_vec(),
        )
        .unwrap();
        softmax_rows(&mut probs);
        let (a, _) = inception_score(&probs, 2).unwrap();
        // Swap rows 0 and 2 (same split of size 3).
        let r0 = probs.row(0).to_owned();
        let r2 = probs.row(2).to_owned();
        probs.row_mut(0).assign(&r2);
        probs.row_mut(2).assign(&r0);
        let (b, _) = inception_score(&probs, 2).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn pca_planar_data_explains_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        // 3-D points confined to the z = 0 plane.
        let mut pts = Array2::zeros((40, 3));
        for i in 0..40 {
            pts[[i, 0]] = Tensor::randn(&[1], 2.0, &mut rng).item();
            pts[[i, 1]] = Tensor::randn(&[1], 0.5, &mut rng).item();
        }
        let proj = pca_project(&[("a".into(), pts)], 2).unwrap();
        let total: f64 = proj.explained_variance_ratio.iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn pca_identical_sets_project_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let a = Array2::from_shape_vec((10, 4), Tensor::randn(&[10, 4], 1.0, &mut rng).to_vec())
            .unwrap();
        let proj = pca_project(&[("a".into(), a.clone()), ("b".into(), a)], 2).unwrap();
        for (x, y) in proj.coordinates[0].iter().zip(proj.coordinates[1].iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn pca_matches_power_iteration_oracle() {
        // Independent route: dominant eigenvector by power iteration with
        // deflation, in test code only.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let data = Array2::from_shape_vec((50, 3), Tensor::randn(&[50, 3], 1.0, &mut rng).to_vec())
            .unwrap();
        let mean = data.mean_axis(Axis(0)).unwrap();
        let centered = &data - &mean.view().insert_axis(Axis(0));
        let cov = centered.t().dot(&centered) / 49.0;

        let power = |m: &Array2<f64>| -> (f64, Array1<f64>) {
            let mut v = Array1::from_vec(vec![1.0, 0.7, -0.3]);
            for _ in 0..50_000 {
                let w = m.dot(&v);
                let norm = (w.iter().map(|x| x * x).sum::<f64>()).sqrt();
                v = w / norm;
            }
            (v.dot(&m.dot(&v)), v)
        };
        let (l1, v1) = power(&cov);
        let deflated = &cov - &(l1 * &v1.view().insert_axis(Axis(1)).dot(&v1.view().insert_axis(Axis(0))));
        let (_, v2) = power(&deflated);

        let proj = pca_project(&[("x".into(), data.clone())], 2).unwrap();
        // Recompute the implied basis from projections: coords = centered . B.
        // Compare |centered . v_oracle| with |pc| columns.
        let c1 = centered.dot(&v1);
        let c2 = centered.dot(&v2);
        for (k, oracle) in [c1, c2].into_iter().enumerate() {
            let got: Vec<f64> = proj.coordinates[0].column(k).to_vec();
            // Match up to overall sign.
            let same: f64 = got.iter().zip(oracle.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let flip: f64 = got.iter().zip(oracle.iter()).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
            assert!(same.min(flip) < 1e-8, "component {k}: {same} / {flip}");
        }
    }

    #[test]
    fn test_extractor_contract() {
        let ex = TestExtractor::default();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let imgs = Array4::from_shape_vec(
            (3, 1, 32, 32),
            Tensor::randn(&[3 * 32 * 32], 0.5, &mut rng).to_vec(),
        )
        .unwrap();
        let probs = ex.classify(&imgs).unwrap();
        for row in probs.rows() {
            let sum: f64 = row.iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
        // Deterministic.
        let e1 = ex.embed(&imgs).unwrap();
        let e2 = ex.embed(&imgs).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn classifier_adapter_roundtrip_and_contract() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let cnn = SmallCnn::new(16, 4, 6, &mut rng);
        let path = dir.path().join("cls.json");
        cnn.save(&path).unwrap();
        let adapter = ClassifierAdapter::from_file(&path).unwrap();
        assert_eq!(adapter.input_resolution(), 16);

        // Feed images at a different resolution: the adapter resizes.
        let imgs = Array4::from_shape_vec(
            (2, 1, 24, 24),
            Tensor::randn(&[2 * 24 * 24], 0.5, &mut rng).to_vec(),
        )
        .unwrap();
        let emb = adapter.embed(&imgs).unwrap();
        assert_eq!(emb.shape(), &[2, 16]);
        let probs = adapter.classify(&imgs).unwrap();
        for row in probs.rows() {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-6);
        }

        // Loading reproduces the exact same features.
        let adapter2 = ClassifierAdapter::from_file(&path).unwrap();
        assert_eq!(adapter2.embed(&imgs).unwrap(), emb);
    }

    #[test]
    fn kid_unbiasedness_monte_carlo() {
        // Mean over resamples from one distribution concentrates near zero.
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut sum = 0.0;
        let trials = 100;
        let (n, d) = (128, 8);
        for _ in 0..trials {
            let x = Array2::from_shape_vec(
                (n, d),
                Tensor::randn(&[n, d], 1.0, &mut rng).to_vec(),
            )
            .unwrap();
            let y = Array2::from_shape_vec(
                (n, d),
                Tensor::randn(&[n, d], 1.0, &mut rng).to_vec(),
            )
            .unwrap();
            sum += kid(&x, &y).unwrap();
        }
        let mean = sum / trials as f64;
        assert!(mean.abs() < 0.01, "mean KID over resamples = {mean}");
    }
}
