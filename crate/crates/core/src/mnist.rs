//! MNIST IDX ingestion, checksum-verified download, and per-sample
//! rotation/translation augmentation.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const DATA_DIR_ENV: &str = "PRCN_MNIST_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";
pub const DEFAULT_MIRROR: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";

/// File name and SHA-256 of the decompressed file.
pub const FILES: [(&str, &str); 4] = [
    (
        "train-images-idx3-ubyte",
        "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    ),
    (
        "train-labels-idx1-ubyte",
        "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    ),
    (
        "t10k-images-idx3-ubyte",
        "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    ),
    (
        "t10k-labels-idx1-ubyte",
        "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    ),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdxDataset {
    /// `(n, 1, rows, cols)`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl IdxDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples (all of them when `n` exceeds the size).
    pub fn take(&self, n: usize) -> Result<IdxDataset> {
        let n = n.min(self.len());
        Ok(IdxDataset {
            images: self.images.batch_slice(0, n)?,
            labels: self.labels[..n].to_vec(),
        })
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

/// Decompresses gzip input (detected by its magic bytes); passes raw bytes
/// through.
pub fn maybe_gunzip(bytes: &[u8]) -> Result<std::borrow::Cow<'_, [u8]>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut out)?;
        Ok(out.into())
    } else {
        Ok(bytes.into())
    }
}

struct Header<'a> {
    dims: Vec<usize>,
    body: &'a [u8],
}

fn read_header<'a>(bytes: &'a [u8], magic: u32, ndims: usize, what: &str) -> Result<Header<'a>> {
    let word = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::Parse {
                offset: off,
                msg: format!("{what} header truncated"),
            })
    };
    let m = word(0)?;
    if m != magic {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("{what} magic {m:#010x}, expected {magic:#010x}"),
        });
    }
    let dims = (0..ndims)
        .map(|i| word(4 + 4 * i).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndims;
    let need = dims.iter().product::<usize>();
    let body = &bytes[start..];
    if body.len() != need {
        return Err(Error::Parse {
            offset: start + body.len().min(need),
            msg: format!(
                "{what} payload has {} bytes, header promises {need}",
                body.len()
            ),
        });
    }
    Ok(Header { dims, body })
}

/// Parses an IDX image file and its label file (raw or gzip). Pixels are
/// scaled by 1/255.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<IdxDataset> {
    let images = maybe_gunzip(images)?;
    let labels = maybe_gunzip(labels)?;
    let ih = read_header(&images, IMAGE_MAGIC, 3, "image")?;
    let lh = read_header(&labels, LABEL_MAGIC, 1, "label")?;
    let (n, rows, cols) = (ih.dims[0], ih.dims[1], ih.dims[2]);
    if lh.dims[0] != n {
        return Err(Error::Parse {
            offset: 4,
            msg: format!("{n} images but {} labels", lh.dims[0]),
        });
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Parse {
            offset: 4,
            msg: "empty dataset".into(),
        });
    }
    let data = ih.body.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(IdxDataset {
        images: Tensor::from_vec(Shape::new(n, 1, rows, cols), data)?,
        labels: lh.body.to_vec(),
    })
}

/// Inverse of [`parse_idx`]; pixels are rounded back to bytes.
pub fn serialize_idx(ds: &IdxDataset) -> (Vec<u8>, Vec<u8>) {
    let s = ds.images.shape();
    let mut img = Vec::with_capacity(16 + s.len());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in [s.n, s.h, s.w] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + ds.labels.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(&ds.labels);
    (img, lab)
}

/// Data directory: `PRCN_MNIST_DIR` if set, else `data/mnist`.
pub fn default_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{stem}[.gz] not found in {} (run `prcn fetch`)", dir.display()),
    )))
}

/// True when both files of both splits are present.
pub fn available(dir: &Path) -> bool {
    FILES.iter().all(|(stem, _)| find_file(dir, stem).is_ok())
}

pub fn load_split(dir: &Path, split: Split) -> Result<IdxDataset> {
    let img = fs::read(find_file(dir, &format!("{}-images-idx3-ubyte", split.prefix()))?)?;
    let lab = fs::read(find_file(dir, &format!("{}-labels-idx1-ubyte", split.prefix()))?)?;
    parse_idx(&img, &lab)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn verify(name: &str, bytes: &[u8], expected: &str) -> Result<()> {
    let actual = sha256_hex(bytes);
    if actual != expected {
        return Err(Error::Checksum {
            file: name.into(),
            expected: expected.into(),
            actual,
        });
    }
    Ok(())
}

/// Where [`fetch`] gets the compressed files from.
#[derive(Clone, Debug)]
pub enum Source {
    Url(String),
    Dir(PathBuf),
}

/// Downloads (or copies) the four files into `dest`, decompressing and
/// checking each against its SHA-256 before writing. Files already
/// present with the right digest are skipped. Returns the written paths.
pub fn fetch(dest: &Path, source: &Source) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dest)?;
    let mut written = Vec::new();
    for (stem, digest) in FILES {
        let target = dest.join(stem);
        if let Ok(existing) = fs::read(&target) {
            if sha256_hex(&existing) == digest {
                continue;
            }
        }
        let packed = match source {
            Source::Dir(dir) => fs::read(find_file(dir, stem)?)?,
            Source::Url(base) => download(&format!("{}/{stem}.gz", base.trim_end_matches('/')))?,
        };
        let raw = maybe_gunzip(&packed)?;
        verify(stem, &raw, digest)?;
        let tmp = target.with_extension("part");
        fs::write(&tmp, &raw)?;
        fs::rename(&tmp, &target)?;
        written.push(target);
    }
    Ok(written)
}

fn download(url: &str) -> Result<Vec<u8>> {
    let mut resp = ureq::get(url)
        .call()
        .map_err(|e| Error::Fetch(format!("{url}: {e}")))?;
    resp.body_mut()
        .with_config()
        .limit(256 << 20)
        .read_to_vec()
        .map_err(|e| Error::Fetch(format!("{url}: {e}")))
}

/// Rotates a single-channel `h × w` image by `angle_deg` (counterclockwise
/// in (x = column, y = row) coordinates) about `((h-1)/2, (w-1)/2)`, by
/// inverse mapping with bilinear interpolation and zero fill.
pub fn rotate(img: &[f64], h: usize, w: usize, angle_deg: f64) -> Vec<f64> {
    assert_eq!(img.len(), h * w, "image size");
    if angle_deg == 0.0 {
        return img.to_vec();
    }
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let px = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            img[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for oy in 0..h {
        for ox in 0..w {
            let dx = ox as f64 - cx;
            let dy = oy as f64 - cy;
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            out[oy * w + ox] = (1.0 - fy) * ((1.0 - fx) * px(y0, x0) + fx * px(y0, x0 + 1))
                + fy * ((1.0 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
        }
    }
    out
}

/// Integer shift by `dx` columns and `dy` rows with zero fill.
pub fn translate(img: &[f64], h: usize, w: usize, dx: i64, dy: i64) -> Vec<f64> {
    assert_eq!(img.len(), h * w, "image size");
    let mut out = vec![0.0; h * w];
    for y in 0..h as i64 {
        let sy = y - dy;
        if sy < 0 || sy >= h as i64 {
            continue;
        }
        for x in 0..w as i64 {
            let sx = x - dx;
            if sx >= 0 && sx < w as i64 {
                out[(y * w as i64 + x) as usize] = img[(sy * w as i64 + sx) as usize];
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub max_rotation_deg: f64,
    pub max_translation_px: usize,
}

impl AugmentSpec {
    pub fn new(max_rotation_deg: f64, max_translation_px: usize) -> Self {
        Self {
            max_rotation_deg,
            max_translation_px,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=180.0).contains(&self.max_rotation_deg) {
            return Err(config_err(format!(
                "rotation bound {} outside [0, 180] degrees",
                self.max_rotation_deg
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.max_rotation_deg == 0.0 && self.max_translation_px == 0
    }
}

/// One sample's draws: angle, then column shift, then row shift (three
/// draws, always consumed).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub angle_deg: f64,
    pub dx: i64,
    pub dy: i64,
}

impl AugmentDraw {
    pub fn sample(spec: &AugmentSpec, rng: &mut Rng) -> Self {
        let t = spec.max_rotation_deg;
        let angle_deg = rng.uniform(-t, t);
        let dx = rng.symmetric_int(spec.max_translation_px);
        let dy = rng.symmetric_int(spec.max_translation_px);
        Self { angle_deg, dx, dy }
    }

    /// Rotation first, then translation; the result is clamped to `[0, 1]`
    /// to absorb rounding in the interpolation weights.
    pub fn apply(&self, img: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = rotate(img, h, w, self.angle_deg);
        if self.dx != 0 || self.dy != 0 {
            out = translate(&out, h, w, self.dx, self.dy);
        }
        out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }
}

/// Augments every sample independently, drawing per sample in batch order.
pub fn augment_batch(batch: &Tensor, spec: &AugmentSpec, rng: &mut Rng) -> Result<Tensor> {
    let s = batch.shape();
    if s.c != 1 {
        return Err(shape_err(format!("augmentation expects 1 channel, got {s}")));
    }
    let mut out = Tensor::alloc(s)?;
    for n in 0..s.n {
        let d = AugmentDraw::sample(spec, rng);
        if spec.is_identity() {
            out.plane_mut(n, 0).copy_from_slice(batch.plane(n, 0));
        } else {
            out.plane_mut(n, 0)
                .copy_from_slice(&d.apply(batch.plane(n, 0), s.h, s.w));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        for d in [2u32, 28, 28] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend((0..2 * 784).map(|i| (i % 256) as u8));
        let mut lab = Vec::new();
        lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[7, 3]);
        (img, lab)
    }

    #[test]
    fn parses_fixture() {
        let (img, lab) = fixture();
        let ds = parse_idx(&img, &lab).unwrap();
        assert_eq!(ds.images.shape(), Shape::new(2, 1, 28, 28));
        assert_eq!(ds.labels, [7, 3]);
        assert_eq!(ds.images.data()[255], 1.0);
        assert_eq!(ds.images.data()[0], 0.0);
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let (img, lab) = fixture();
        let ds = parse_idx(&img, &lab).unwrap();
        assert_eq!(serialize_idx(&ds), (img, lab));
    }

    #[test]
    fn gzip_accepted() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let (img, lab) = fixture();
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&img).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(parse_idx(&gz, &lab).unwrap(), parse_idx(&img, &lab).unwrap());
    }

    #[test]
    fn bad_headers_name_offsets() {
        let (mut img, lab) = fixture();
        img[3] = 0x01;
        match parse_idx(&img, &lab) {
            Err(Error::Parse { offset: 0, msg }) => assert!(msg.contains("magic")),
            other => panic!("{other:?}"),
        }
        let (img, _) = fixture();
        assert!(matches!(
            parse_idx(&img[..img.len() - 5], &fixture().1),
            Err(Error::Parse { .. })
        ));
        let (img, mut lab) = fixture();
        lab[7] = 3;
        lab.push(1);
        assert!(parse_idx(&img, &lab).is_err());
    }

    fn ramp(h: usize, w: usize) -> Vec<f64> {
        (0..h * w).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()
    }

    #[test]
    fn rotation_identities() {
        let img = ramp(28, 28);
        assert_eq!(rotate(&img, 28, 28, 0.0), img);
        let full = rotate(&img, 28, 28, 360.0);
        for (a, b) in full.iter().zip(&img) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn quarter_turn_moves_pixel() {
        for r in 1..=10usize {
            let mut img = vec![0.0; 29 * 29];
            img[(14 + r) * 29 + 14] = 1.0;
            let out = rotate(&img, 29, 29, 90.0);
            assert!((out[14 * 29 + 14 - r] - 1.0).abs() < 1e-9, "r={r}");
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn quarter_turn_matches_inverse_map_oracle() {
        // On an even grid the 90° map sends integer pixels to integer pixels.
        let (h, w) = (28, 28);
        let img = ramp(h, w);
        let out = rotate(&img, h, w, 90.0);
        for oy in 0..h {
            for ox in 0..w {
                // (x', y') = (c - (y - c), c + (x - c)) with c = 13.5
                let sx = oy;
                let sy = w - 1 - ox;
                assert!((out[oy * w + ox] - img[sy * w + sx]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rotation_is_linear() {
        let img = ramp(28, 28);
        let scaled: Vec<f64> = img.iter().map(|v| 2.5 * v).collect();
        let a = rotate(&scaled, 28, 28, 33.0);
        let b = rotate(&img, 28, 28, 33.0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - 2.5 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_round_trip_and_mass() {
        let (h, w) = (28, 28);
        assert_eq!(translate(&ramp(h, w), h, w, 0, 0), ramp(h, w));
        let mut img = vec![0.0; h * w];
        for y in 10..18 {
            for x in 10..18 {
                img[y * w + x] = 0.5;
            }
        }
        let moved = translate(&img, h, w, 4, -6);
        assert!((moved.iter().sum::<f64>() - img.iter().sum::<f64>()).abs() < 1e-12);
        assert_eq!(translate(&moved, h, w, -4, 6), img);
        let src = ramp(h, w);
        let back = translate(&translate(&src, h, w, 3, 2), h, w, -3, -2);
        for y in 0..h {
            for x in 0..w {
                let want = if y < h - 2 && x < w - 3 { src[y * w + x] } else { 0.0 };
                assert_eq!(back[y * w + x], want);
            }
        }
    }

    #[test]
    fn draws_stay_in_bounds() {
        let spec = AugmentSpec::new(90.0, 12);
        let mut rng = Rng::new(4);
        for _ in 0..100_000 {
            let d = AugmentDraw::sample(&spec, &mut rng);
            assert!((-90.0..=90.0).contains(&d.angle_deg));
            assert!((-12..=12).contains(&d.dx) && (-12..=12).contains(&d.dy));
        }
    }

    #[test]
    fn augmentation_is_deterministic_and_bounded() {
        let (img, lab) = fixture();
        let ds = parse_idx(&img, &lab).unwrap();
        let spec = AugmentSpec::new(60.0, 8);
        let a = augment_batch(&ds.images, &spec, &mut Rng::new(9)).unwrap();
        let b = augment_batch(&ds.images, &spec, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let id = augment_batch(&ds.images, &AugmentSpec::default(), &mut Rng::new(9)).unwrap();
        assert_eq!(id, ds.images);
    }

    #[test]
    fn fetch_from_local_copy_verifies_digests() {
        let src = tempfile::tempdir().unwrap();
        let dst = tempfile::tempdir().unwrap();
        for (stem, _) in FILES {
            fs::write(src.path().join(stem), b"not mnist").unwrap();
        }
        assert!(matches!(
            fetch(dst.path(), &Source::Dir(src.path().into())),
            Err(Error::Checksum { .. })
        ));
        assert!(!dst.path().join(FILES[0].0).exists());
    }
}
