//! Toy datasets and file loaders.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{Dataset, Targets};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `sin(2πx) + 0.5·sin(6πx)`
pub fn periodic_target(x: f64) -> f64 {
    (2.0 * PI * x).sin() + 0.5 * (6.0 * PI * x).sin()
}

/// `n` points `x ~ U(0, 1)` as single-token, single-feature examples with
/// [`periodic_target`] as the regression target.
pub fn periodic_regression<T: Scalar>(n: usize, seed: u64) -> Result<Dataset<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let inputs = Tensor::new([n, 1, 1], xs.iter().map(|&x| T::lit(x)).collect())?;
    let targets = Tensor::new(
        [n, 1],
        xs.iter().map(|&x| T::lit(periodic_target(x))).collect(),
    )?;
    Dataset::new(inputs, Targets::Values(targets))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub side: usize,
    pub patch: usize,
    /// Per-pixel noise around the class prototype.
    pub noise: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            classes: 10,
            side: 8,
            patch: 4,
            noise: 1.0,
        }
    }
}

/// Images drawn as Gaussian clusters: each class has a prototype image with
/// unit-normal pixels, and an example is its prototype plus
/// `N(0, noise²)` per pixel. Labels cycle through the classes.
pub fn gaussian_blobs<T: Scalar>(n: usize, spec: BlobSpec, seed: u64) -> Result<Dataset<T>> {
    if spec.classes == 0 || spec.patch == 0 || !spec.side.is_multiple_of(spec.patch) {
        return Err(Error::config(format!(
            "blob images of side {} cannot be cut into {}-pixel patches",
            spec.side, spec.patch
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = spec.side * spec.side;
    let protos: Vec<f64> = (0..spec.classes * pixels)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let mut images = Vec::with_capacity(n * pixels);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        labels.push(c);
        for p in 0..pixels {
            let z: f64 = rng.sample(StandardNormal);
            images.push(T::lit(protos[c * pixels + p] + spec.noise * z));
        }
    }
    let images = Tensor::new([n, spec.side, spec.side], images)?;
    Dataset::new(patchify(&images, spec.patch)?, Targets::Labels(labels))
}

/// `[N, H, W]` → `[N, (H/p)·(W/p), p²]`, patches in row-major order.
pub fn patchify<T: Scalar>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 3 || patch == 0 || !s[1].is_multiple_of(patch) || !s[2].is_multiple_of(patch) {
        return Err(Error::shape(format!(
            "cannot cut images {s:?} into {patch}×{patch} patches"
        )));
    }
    let (n, h, w) = (s[0], s[1], s[2]);
    let (ph, pw) = (h / patch, w / patch);
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for img in 0..n {
        for py in 0..ph {
            for px in 0..pw {
                for y in 0..patch {
                    let row = img * h * w + (py * patch + y) * w + px * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new([n, ph * pw, patch * patch], out)
}

/// An IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses the IDX format: big-endian magic `0x0000_08_NN` (unsigned bytes,
/// `NN` dimensions), `NN` big-endian u32 sizes, then the data.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let magic = bytes
        .get(..4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| Error::format("IDX file shorter than its magic number"))?;
    let ndim = (magic & 0xff) as usize;
    if magic >> 8 != 0x08 || ndim == 0 {
        return Err(Error::format(format!(
            "bad IDX magic 0x{magic:08x} (expected 0x000008NN, unsigned bytes)"
        )));
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let at = 4 + 4 * d;
        let v = bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
            .ok_or_else(|| Error::format("IDX header truncated"))?;
        dims.push(v as usize);
    }
    let start = 4 + 4 * ndim;
    let len = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    if len.and_then(|l| l.checked_add(start)) != Some(bytes.len()) {
        return Err(Error::format(format!(
            "IDX dims {dims:?} do not match the {} data bytes in the file",
            bytes.len().saturating_sub(start)
        )));
    }
    Ok(IdxArray {
        dims,
        data: bytes[start..].to_vec(),
    })
}

/// An IDX image file (`[N, H, W]`) and label file (`[N]`) as patch tokens,
/// pixels scaled to `[0, 1]`.
pub fn load_idx<T: Scalar>(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    patch: usize,
) -> Result<Dataset<T>> {
    let img = parse_idx(&std::fs::read(images)?)?;
    let lab = parse_idx(&std::fs::read(labels)?)?;
    if img.dims.len() != 3 || lab.dims.len() != 1 {
        return Err(Error::format(format!(
            "expected [N, H, W] images and [N] labels, got {:?} and {:?}",
            img.dims, lab.dims
        )));
    }
    let images = Tensor::new(
        img.dims.clone(),
        img.data.iter().map(|&b| T::lit(b as f64 / 255.0)).collect(),
    )?;
    let labels = lab.data.iter().map(|&b| b as usize).collect();
    Dataset::new(patchify(&images, patch)?, Targets::Labels(labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsvTarget {
    /// First column is a class index.
    Class,
    /// First column is a real-valued target.
    Value,
}

/// Rows of `target,feature₁,…,feature_k` (no header) as `[N, tokens, k/tokens]`.
pub fn load_csv<T: Scalar>(
    path: impl AsRef<Path>,
    tokens: usize,
    target: CsvTarget,
) -> Result<Dataset<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(format!("csv: {e}")))?;
    let (mut feats, mut labels, mut values) = (Vec::new(), Vec::new(), Vec::new());
    let mut width = None;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(format!("csv: {e}")))?;
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::format(format!("csv line {}: '{s}' is not a number", line + 1)))
        };
        let mut fields = rec.iter();
        let head = fields
            .next()
            .ok_or_else(|| Error::format(format!("csv line {} is empty", line + 1)))?;
        match target {
            CsvTarget::Class => labels.push(head.parse::<usize>().map_err(|_| {
                Error::format(format!(
                    "csv line {}: label '{head}' is not a class index",
                    line + 1
                ))
            })?),
            CsvTarget::Value => values.push(T::lit(parse(head)?)),
        }
        let before = feats.len();
        for f in fields {
            feats.push(T::lit(parse(f)?));
        }
        let k = feats.len() - before;
        if *width.get_or_insert(k) != k {
            return Err(Error::format(format!(
                "csv line {} has {k} features, expected {}",
                line + 1,
                width.unwrap()
            )));
        }
    }
    let n = labels.len().max(values.len());
    let k = width.unwrap_or(0);
    if n == 0 || k == 0 || tokens == 0 || k % tokens != 0 {
        return Err(Error::format(format!(
            "csv holds {n} rows of {k} features, not divisible into {tokens} tokens"
        )));
    }
    let inputs = Tensor::new([n, tokens, k / tokens], feats)?;
    let targets = match target {
        CsvTarget::Class => Targets::Labels(labels),
        CsvTarget::Value => Targets::Values(Tensor::new([n, 1], values)?),
    };
    Dataset::new(inputs, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(magic: u32, dims: &[u32], data: &[u8]) -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(data);
        b
    }

    #[test]
    fn idx_three_dim() {
        let data: Vec<u8> = (0..24).collect();
        let a = parse_idx(&idx_bytes(0x0000_0803, &[2, 3, 4], &data)).unwrap();
        assert_eq!(a.dims, vec![2, 3, 4]);
        assert_eq!(a.data, data);
    }

    #[test]
    fn idx_bad_magic_and_length() {
        assert!(matches!(
            parse_idx(&idx_bytes(0x0000_0d03, &[1, 1, 1], &[0])),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            parse_idx(&idx_bytes(0x0803_0000, &[1], &[0])),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            parse_idx(&idx_bytes(0x0000_0801, &[3], &[0, 1])),
            Err(Error::Format(_))
        ));
        assert!(matches!(parse_idx(&[0, 0]), Err(Error::Format(_))));
        // Sizes whose product overflows.
        let huge = idx_bytes(0x0000_0804, &[u32::MAX; 4], &[]);
        assert!(matches!(parse_idx(&huge), Err(Error::Format(_))));
    }

    #[test]
    fn patchify_layout() {
        let img = Tensor::<f64>::from_fn([1, 4, 4], |i| i as f64).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), [1, 4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data()[12..], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let a = gaussian_blobs::<f32>(50, BlobSpec::default(), 7).unwrap();
        assert_eq!(
            a,
            gaussian_blobs::<f32>(50, BlobSpec::default(), 7).unwrap()
        );
        assert_ne!(
            a,
            gaussian_blobs::<f32>(50, BlobSpec::default(), 8).unwrap()
        );
        assert_eq!(a.inputs.shape(), [50, 4, 16]);
        let r = periodic_regression::<f64>(20, 1).unwrap();
        assert_eq!(r, periodic_regression::<f64>(20, 1).unwrap());
        let (x, Targets::Values(y)) = (&r.inputs, &r.targets) else {
            panic!()
        };
        for (xi, yi) in x.data().iter().zip(y.data()) {
            assert_eq!(*yi, periodic_target(*xi));
        }
    }
}
