//! Dataset sources: the synthetic generator, `root/<class>/<image>.ppm`
//! directories and raw tensor files (`img.{i}` / `label.{i}` entries).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vitscope_core::data::{Dataset, SyntheticSpec};
use vitscope_core::vit::N_CHANNELS;
use vitscope_core::Tensor;

use crate::container::TensorFile;
use crate::error::{config, Error, Result};

pub const DATASET_FILE: &str = "dataset.safetensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// One subdirectory per class; labels follow the sorted class names.
    Directory { path: PathBuf },
    RawTensorFile { path: PathBuf },
}

/// Per-channel `(x − mean)/std` applied after loading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: [f32; N_CHANNELS],
    pub std: [f32; N_CHANNELS],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub source: DatasetSource,
    /// Required side length; `None` accepts whatever the source holds.
    #[serde(default)]
    pub expected_image_size: Option<usize>,
    #[serde(default)]
    pub normalization: Option<ChannelNorm>,
}

impl DatasetSpec {
    pub fn synthetic(spec: SyntheticSpec) -> Self {
        Self {
            source: DatasetSource::Synthetic(spec),
            expected_image_size: None,
            normalization: None,
        }
    }

    /// Guesses the source of a path: a file is a raw tensor file, a
    /// directory holding `dataset.safetensors` is one too, any other
    /// directory is a class-directory tree.
    pub fn from_path(path: &Path) -> Self {
        let source = if path.is_dir() && !path.join(DATASET_FILE).exists() {
            DatasetSource::Directory { path: path.into() }
        } else {
            DatasetSource::RawTensorFile { path: path.into() }
        };
        Self {
            source,
            expected_image_size: None,
            normalization: None,
        }
    }

    /// Paths this spec reads from.
    pub fn inputs(&self) -> Vec<PathBuf> {
        match &self.source {
            DatasetSource::Synthetic(_) => Vec::new(),
            DatasetSource::Directory { path } | DatasetSource::RawTensorFile { path } => vec![path.clone()],
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        let mut data = match &self.source {
            DatasetSource::Synthetic(s) => {
                if s.n_classes < 2 {
                    return Err(config("a synthetic dataset needs at least two classes"));
                }
                Dataset::synthetic(s)?
            }
            DatasetSource::Directory { path } => load_class_dirs(path)?,
            DatasetSource::RawTensorFile { path } => load_raw(path)?,
        };
        if let Some(s) = self.expected_image_size {
            if !data.is_empty() && data.image_size() != s {
                return Err(config(format!(
                    "dataset images are {0}x{0}, expected {s}x{s}",
                    data.image_size()
                )));
            }
        }
        if let Some(n) = self.normalization {
            data.normalize(n.mean, n.std);
        }
        Ok(data)
    }
}

/// Writes `img.{i}` `[S×S×3]` and `label.{i}` `[1]` entries.
pub fn save_raw(path: &Path, data: &Dataset) -> Result<()> {
    let mut file = TensorFile::new().with_metadata("n_images", data.len().to_string());
    for i in 0..data.len() {
        file.insert(format!("img.{i}"), data.images().index_outer(i)?);
        file.insert(format!("label.{i}"), Tensor::from_slice(&[data.labels()[i] as f32])?);
    }
    file.write(path)
}

pub fn load_raw(path: &Path) -> Result<Dataset> {
    let path = if path.is_dir() { path.join(DATASET_FILE) } else { path.to_path_buf() };
    let mut file = TensorFile::read(&path)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut i = 0;
    while file.tensors.contains_key(&format!("img.{i}")) {
        let img = file.take(&format!("img.{i}"), &path)?;
        let label = file.take(&format!("label.{i}"), &path)?;
        let l = match label.data() {
            [v] if *v >= 0.0 && v.fract() == 0.0 => *v as usize,
            _ => return Err(Error::format(&path, format!("label.{i} must be one non-negative integer"))),
        };
        images.push(img);
        labels.push(l);
        i += 1;
    }
    if let Some(extra) = file.tensors.keys().next() {
        return Err(Error::format(&path, format!("unexpected entry `{extra}`")));
    }
    if images.is_empty() {
        return Err(Error::format(&path, "no `img.0` entry; not a dataset file"));
    }
    let images = Tensor::stack(&images).map_err(|e| Error::format(&path, e.to_string()))?;
    Ok(Dataset::new(images, labels)?)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(Error::io(dir))? {
        out.push(e.map_err(Error::io(dir))?.path());
    }
    out.sort();
    Ok(out)
}

/// `root/<class_name>/*.ppm`; class labels are the sorted class index.
pub fn load_class_dirs(root: &Path) -> Result<Dataset> {
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(Error::format(root, "no class subdirectories"));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        for file in sorted_entries(class)? {
            let is_ppm = file
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
            if !is_ppm {
                log::warn!("skipping {} (only PPM images are read)", file.display());
                continue;
            }
            images.push(read_ppm(&file)?);
            labels.push(label);
        }
    }
    if images.is_empty() {
        return Err(Error::format(root, "no PPM images found"));
    }
    let first = images[0].shape().to_vec();
    if let Some(i) = images.iter().position(|t| t.shape() != first.as_slice()) {
        return Err(Error::format(
            root,
            format!("image {i} is {:?}; every image must be {:?}", images[i].shape(), first),
        ));
    }
    Ok(Dataset::new(Tensor::stack(&images)?, labels)?)
}

/// Reads a binary (P6) or ASCII (P3) PPM into `[H×W×3]` values in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    parse_ppm(&bytes).map_err(|m| Error::format(path, m))
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad PPM header field `{s}`"));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("unsupported PPM geometry {w}x{h}, maxval {maxval}"));
    }
    let n = w * h * N_CHANNELS;
    let scale = maxval as f32;
    let values: Vec<f32> = match magic.as_str() {
        "P6" => {
            let body = &bytes[(pos + 1).min(bytes.len())..];
            let wide = maxval > 255;
            let need = n * if wide { 2 } else { 1 };
            if body.len() < need {
                return Err(format!("pixel data holds {} bytes, expected {need}", body.len()));
            }
            if wide {
                body[..need]
                    .chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / scale)
                    .collect()
            } else {
                body[..need].iter().map(|&b| b as f32 / scale).collect()
            }
        }
        "P3" => {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(num(token()?)? as f32 / scale);
            }
            v
        }
        m => return Err(format!("`{m}` is not a PPM (P3/P6) image")),
    };
    Tensor::new(vec![h, w, N_CHANNELS], values).map_err(|e| e.to_string())
}

/// Binary PPM encoding of `[H×W×3]` values in `[0, 1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != N_CHANNELS {
        return Err(config(format!("expected an [H×W×3] image, got {s:?}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}
