//! Readers for the on-disk image corpora.
//!
//! Expected layout under the data root:
//!
//! ```text
//! cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin
//! cifar-100-binary/{train,test}.bin
//! tiny-imagenet-200/{wnids.txt,train/<wnid>/images/*.JPEG,val/val_annotations.txt,val/images/*.JPEG}
//! mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]
//! fashion-mnist/  (same names as mnist)
//! svhn/{train,test}_32x32.mat
//! ```

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ucl_core::config::RunConfig;
use ucl_core::data::{synthetic_blobs, DatasetId, EvalRole, EvalSet, ImageSet, SyntheticConfig};
use ucl_core::experiment::Corpus;

use crate::error::{format_err, IoContext, Result, UclError};

pub const DATA_ROOT_ENV: &str = "UCL_DATA_ROOT";

/// Config key first, then the environment.
pub fn resolve_data_root(configured: Option<&str>) -> Result<PathBuf> {
    if let Some(r) = configured {
        return Ok(PathBuf::from(r));
    }
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).ok_or(UclError::NoDataRoot(DATA_ROOT_ENV))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).at(path)
}

/// Reads `path`, or `path.gz` decompressed when only that exists.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    if path.exists() {
        return read(path);
    }
    let gz = PathBuf::from(format!("{}.gz", path.display()));
    let raw = read(&gz)?;
    let mut out = Vec::new();
    GzDecoder::new(&raw[..]).read_to_end(&mut out).at(&gz)?;
    Ok(out)
}

/// CIFAR binary records: `label_bytes` label bytes then 3072 CHW pixels.
/// The last label byte is the class.
pub fn parse_cifar(bytes: &[u8], label_bytes: usize, num_classes: usize, path: &Path) -> Result<ImageSet> {
    const PIXELS: usize = 3 * 32 * 32;
    let rec = label_bytes + PIXELS;
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(format_err(path, format!("{} bytes is not a whole number of {rec}-byte records", bytes.len())));
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for r in bytes.chunks_exact(rec) {
        labels.push(r[label_bytes - 1] as u32);
        pixels.extend_from_slice(&r[label_bytes..]);
    }
    Ok(ImageSet::new(3, 32, 32, pixels, labels, num_classes)?)
}

fn cifar_files(root: &Path, files: &[&str], label_bytes: usize, classes: usize) -> Result<ImageSet> {
    let mut bytes = Vec::new();
    for f in files {
        bytes.extend(read(&root.join(f))?);
    }
    parse_cifar(&bytes, label_bytes, classes, &root.join(files[0]))
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// IDX image and label files (MNIST layout).
pub fn parse_idx(images: &[u8], labels: &[u8], path: &Path) -> Result<ImageSet> {
    if images.len() < 16 || be_u32(images, 0) != 0x0803 {
        return Err(format_err(path, "not an idx3 image file"));
    }
    if labels.len() < 8 || be_u32(labels, 0) != 0x0801 {
        return Err(format_err(path, "not an idx1 label file"));
    }
    let (n, h, w) = (be_u32(images, 4) as usize, be_u32(images, 8) as usize, be_u32(images, 12) as usize);
    if be_u32(labels, 4) as usize != n || images.len() != 16 + n * h * w || labels.len() != 8 + n {
        return Err(format_err(path, "idx header and payload disagree"));
    }
    let lab = labels[8..].iter().map(|&l| l as u32).collect();
    Ok(ImageSet::new(1, h, w, images[16..].to_vec(), lab, 10)?)
}

fn idx_pair(dir: &Path, prefix: &str) -> Result<ImageSet> {
    let img = dir.join(format!("{prefix}-images-idx3-ubyte"));
    parse_idx(&read_maybe_gz(&img)?, &read_maybe_gz(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?, &img)
}

fn mat_values(path: &Path, data: &matfile::NumericData) -> Result<Vec<f64>> {
    use matfile::NumericData as N;
    Ok(match data {
        N::UInt8 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        N::Int32 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        N::UInt16 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        N::Single { real, .. } => real.iter().map(|&v| v as f64).collect(),
        N::Double { real, .. } => real.clone(),
        _ => return Err(format_err(path, "unsupported numeric class")),
    })
}

/// SVHN cropped digits: `X` is `32×32×3×N` uint8 (column-major), `y` holds
/// labels 1..=10 with 10 standing for digit 0.
pub fn parse_svhn(bytes: &[u8], path: &Path) -> Result<ImageSet> {
    let mat = matfile::MatFile::parse(bytes).map_err(|e| format_err(path, e.to_string()))?;
    let x = mat.find_by_name("X").ok_or_else(|| format_err(path, "no `X` array"))?;
    let y = mat.find_by_name("y").ok_or_else(|| format_err(path, "no `y` array"))?;
    let dims = x.size();
    if dims.len() != 4 || dims[2] != 3 {
        return Err(format_err(path, format!("`X` has shape {dims:?}")));
    }
    let (h, w, n) = (dims[0], dims[1], dims[3]);
    let raw = match x.data() {
        matfile::NumericData::UInt8 { real, .. } => real,
        _ => return Err(format_err(path, "`X` is not uint8")),
    };
    let mut pixels = vec![0u8; n * 3 * h * w];
    for i in 0..n {
        for c in 0..3 {
            for col in 0..w {
                for row in 0..h {
                    pixels[((i * 3 + c) * h + row) * w + col] = raw[row + h * (col + w * (c + 3 * i))];
                }
            }
        }
    }
    let labels = mat_values(path, y.data())?.into_iter().map(|v| if v as u32 == 10 { 0 } else { v as u32 }).collect::<Vec<_>>();
    if labels.len() != n {
        return Err(format_err(path, format!("{} labels for {n} images", labels.len())));
    }
    Ok(ImageSet::new(3, h, w, pixels, labels, 10)?)
}

fn decode_rgb(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

fn push_chw(img: &image::RgbImage, pixels: &mut Vec<u8>) {
    for c in 0..3 {
        pixels.extend(img.pixels().map(|p| p.0[c]));
    }
}

/// Tiny-ImageNet: classes follow `wnids.txt` order; the labeled `val` split
/// serves as test set.
pub fn load_tiny_imagenet(dir: &Path) -> Result<(ImageSet, ImageSet)> {
    let wnids_path = dir.join("wnids.txt");
    let wnids: Vec<String> =
        fs::read_to_string(&wnids_path).at(&wnids_path)?.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
    let class_of = |w: &str| wnids.iter().position(|x| x == w);
    let size = 64;
    let (mut tr_px, mut tr_lab) = (Vec::new(), Vec::new());
    for (c, w) in wnids.iter().enumerate() {
        let img_dir = dir.join("train").join(w).join("images");
        let mut files: Vec<PathBuf> = fs::read_dir(&img_dir).at(&img_dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        files.sort();
        for f in files {
            let img = decode_rgb(&f)?;
            if img.dimensions() != (size, size) {
                return Err(format_err(&f, format!("expected 64x64, got {:?}", img.dimensions())));
            }
            push_chw(&img, &mut tr_px);
            tr_lab.push(c as u32);
        }
    }
    let ann_path = dir.join("val").join("val_annotations.txt");
    let (mut te_px, mut te_lab) = (Vec::new(), Vec::new());
    for line in fs::read_to_string(&ann_path).at(&ann_path)?.lines() {
        let mut cols = line.split('\t');
        let (Some(file), Some(w)) = (cols.next(), cols.next()) else { continue };
        let c = class_of(w).ok_or_else(|| format_err(&ann_path, format!("unknown wnid {w}")))?;
        let f = dir.join("val").join("images").join(file);
        push_chw(&decode_rgb(&f)?, &mut te_px);
        te_lab.push(c as u32);
    }
    let classes = wnids.len();
    Ok((ImageSet::new(3, 64, 64, tr_px, tr_lab, classes)?, ImageSet::new(3, 64, 64, te_px, te_lab, classes)?))
}

/// Train and test splits of a dataset at its native resolution.
pub fn load_dataset(id: DatasetId, root: &Path) -> Result<(ImageSet, ImageSet)> {
    match id {
        DatasetId::Cifar10 => {
            let dir = root.join("cifar-10-batches-bin");
            let train: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
            let train: Vec<&str> = train.iter().map(String::as_str).collect();
            Ok((cifar_files(&dir, &train, 1, 10)?, cifar_files(&dir, &["test_batch.bin"], 1, 10)?))
        }
        DatasetId::Cifar100 => {
            let dir = root.join("cifar-100-binary");
            Ok((cifar_files(&dir, &["train.bin"], 2, 100)?, cifar_files(&dir, &["test.bin"], 2, 100)?))
        }
        DatasetId::TinyImagenet => load_tiny_imagenet(&root.join("tiny-imagenet-200")),
        DatasetId::Mnist | DatasetId::FashionMnist => {
            let dir = root.join(if id == DatasetId::Mnist { "mnist" } else { "fashion-mnist" });
            Ok((idx_pair(&dir, "train")?, idx_pair(&dir, "t10k")?))
        }
        DatasetId::Svhn => {
            let dir = root.join("svhn");
            let (tr, te) = (dir.join("train_32x32.mat"), dir.join("test_32x32.mat"));
            Ok((parse_svhn(&read(&tr)?, &tr)?, parse_svhn(&read(&te)?, &te)?))
        }
        DatasetId::Synthetic => Ok(synthetic_blobs(&SyntheticConfig::default())?),
    }
}

/// Training corpus for a run, conformed to the encoder input.
pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let (train, test) = if cfg.dataset == DatasetId::Synthetic {
        synthetic_blobs(&cfg.synthetic)?
    } else {
        let root = resolve_data_root(cfg.data_root.as_deref())?;
        load_dataset(cfg.dataset, &root)?
    };
    let (c, s) = (cfg.arch.input_channels, cfg.arch.input_size);
    Ok(Corpus::new(cfg, train.conform(c, s)?, test.conform(c, s)?)?)
}

/// An out-of-distribution corpus resized (bilinear) and channel-replicated
/// to the encoder input.
pub fn load_ood_eval_set(id: DatasetId, root: Option<&Path>, channels: usize, size: usize) -> Result<EvalSet> {
    let (train, test) = match id {
        DatasetId::Synthetic => synthetic_blobs(&SyntheticConfig::default())?,
        _ => load_dataset(id, root.ok_or(UclError::NoDataRoot(DATA_ROOT_ENV))?)?,
    };
    Ok(EvalSet { dataset: id, train: train.conform(channels, size)?, test: test.conform(channels, size)?, role: EvalRole::Ood })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::io::Write;

    /// Minimal uncompressed MAT v5 writer for fixtures.
    pub(crate) fn mat_file(arrays: &[(&str, &[usize], MatData)]) -> Vec<u8> {
        let mut out = vec![b' '; 116];
        out[..10].copy_from_slice(b"MATLAB 5.0");
        out.extend([0u8; 8]);
        out.extend(0x0100u16.to_le_bytes());
        out.extend(b"IM");
        let pad = |v: &mut Vec<u8>| v.resize(v.len().div_ceil(8) * 8, 0);
        let element = |ty: u32, payload: &[u8]| {
            let mut v = Vec::new();
            v.extend(ty.to_le_bytes());
            v.extend((payload.len() as u32).to_le_bytes());
            v.extend(payload);
            pad(&mut v);
            v
        };
        for (name, dims, data) in arrays {
            let (class, ty, bytes): (u32, u32, Vec<u8>) = match data {
                MatData::U8(v) => (9, 2, v.clone()),
                MatData::F64(v) => (6, 9, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
            };
            let mut body = element(6, &[class.to_le_bytes(), 0u32.to_le_bytes()].concat());
            body.extend(element(5, &dims.iter().flat_map(|&d| (d as i32).to_le_bytes()).collect::<Vec<_>>()));
            body.extend(element(1, name.as_bytes()));
            body.extend(element(ty, &bytes));
            out.extend(14u32.to_le_bytes());
            out.extend((body.len() as u32).to_le_bytes());
            out.extend(body);
        }
        out
    }

    pub(crate) enum MatData {
        U8(Vec<u8>),
        F64(Vec<f64>),
    }

    #[test]
    fn cifar_records() {
        let mut bytes = Vec::new();
        for (coarse, fine) in [(1u8, 7u8), (2, 42)] {
            bytes.extend([coarse, fine]);
            bytes.extend((0..3072).map(|i| (i % 251) as u8));
        }
        let set = parse_cifar(&bytes, 2, 100, Path::new("x")).unwrap();
        assert_eq!(set.labels, vec![7, 42]);
        assert_eq!(set.raw(1)[5], 5);
        assert!(parse_cifar(&bytes[..100], 2, 100, Path::new("x")).is_err());
    }

    fn idx_bytes(n: usize) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        for v in [0x0803u32, n as u32, 2, 3] {
            img.extend(v.to_be_bytes());
        }
        img.extend((0..n * 6).map(|i| i as u8));
        let mut lab = Vec::new();
        for v in [0x0801u32, n as u32] {
            lab.extend(v.to_be_bytes());
        }
        lab.extend((0..n).map(|i| (i % 10) as u8));
        (img, lab)
    }

    #[test]
    fn idx_plain_and_gzipped() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_bytes(4);
        fs::write(dir.path().join("train-labels-idx1-ubyte"), &lab).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        gz.write_all(&img).unwrap();
        fs::write(dir.path().join("train-images-idx3-ubyte.gz"), gz.finish().unwrap()).unwrap();
        let set = idx_pair(dir.path(), "train").unwrap();
        assert_eq!((set.len(), set.channels, set.height, set.width), (4, 1, 2, 3));
        assert_eq!(set.raw(1), &[6, 7, 8, 9, 10, 11]);
        assert!(parse_idx(&lab, &img, Path::new("x")).is_err());
    }

    #[test]
    fn svhn_column_major_and_zero_label() {
        // Two 2x2 RGB images; value encodes (row, col, channel, image).
        let (h, w, n) = (2, 2, 2);
        let mut x = vec![0u8; h * w * 3 * n];
        for i in 0..n {
            for c in 0..3 {
                for col in 0..w {
                    for row in 0..h {
                        x[row + h * (col + w * (c + 3 * i))] = (100 * i + 10 * c + 2 * row + col) as u8;
                    }
                }
            }
        }
        let bytes = mat_file(&[("X", &[h, w, 3, n], MatData::U8(x)), ("y", &[n, 1], MatData::F64(vec![10.0, 3.0]))]);
        let set = parse_svhn(&bytes, Path::new("x")).unwrap();
        assert_eq!(set.labels, vec![0, 3]);
        assert_eq!(set.raw(1), &[100, 101, 102, 103, 110, 111, 112, 113, 120, 121, 122, 123]);
    }

    #[test]
    fn tiny_imagenet_tree() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::write(root.join("wnids.txt"), "n01\nn02\n").unwrap();
        for (k, w) in ["n01", "n02"].iter().enumerate() {
            let d = root.join("train").join(w).join("images");
            fs::create_dir_all(&d).unwrap();
            image::RgbImage::from_pixel(64, 64, image::Rgb([40 * k as u8, 0, 0])).save(d.join(format!("{w}_0.png"))).unwrap();
        }
        fs::create_dir_all(root.join("val/images")).unwrap();
        image::RgbImage::from_pixel(64, 64, image::Rgb([0, 0, 200])).save(root.join("val/images/val_0.png")).unwrap();
        fs::write(root.join("val/val_annotations.txt"), "val_0.png\tn02\t0\t0\t63\t63\n").unwrap();
        let (tr, te) = load_tiny_imagenet(root).unwrap();
        assert_eq!((tr.len(), tr.num_classes), (2, 2));
        assert_eq!(tr.labels, vec![0, 1]);
        assert_eq!(tr.raw(1)[0], 40);
        assert_eq!(te.labels, vec![1]);
        assert_eq!(te.raw(0)[2 * 64 * 64], 200);
    }

    #[test]
    fn ood_sets_conform_to_the_encoder() {
        let set = load_ood_eval_set(DatasetId::Synthetic, None, 3, 8).unwrap();
        assert_eq!((set.train.channels, set.test.height), (3, 8));
        assert!(load_ood_eval_set(DatasetId::Mnist, None, 3, 32).is_err());
    }

    #[test]
    fn data_root_prefers_config() {
        assert_eq!(resolve_data_root(Some("/data")).unwrap(), PathBuf::from("/data"));
    }
}
