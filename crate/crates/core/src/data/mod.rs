//! Samples, the on-disk dataset layout, and synthetic scenes.
//!
//! A dataset directory holds `index.txt` (one id per line),
//! `images/{id}.ppm` and `labels/{id}.pgm`.

pub mod netpbm;
pub mod synth;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use netpbm::LabelMap;
pub use synth::{synth_dataset, synth_sample};

#[derive(Clone, Debug)]
pub struct Sample {
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: LabelMap,
}

impl Sample {
    pub fn new(image: Tensor<f32>, label: LabelMap) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 3 || s[0] != label.height || s[1] != label.width {
            return Err(Error::Data(format!(
                "image {s:?} does not match a {}x{} label map",
                label.height, label.width
            )));
        }
        Ok(Self { image, label })
    }

    pub fn height(&self) -> usize {
        self.label.height
    }

    pub fn width(&self) -> usize {
        self.label.width
    }
}

fn read_index(root: &Path) -> Result<Vec<String>> {
    let path = root.join("index.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ids: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if ids.is_empty() {
        return Err(Error::Data(format!("{} lists no samples", path.display())));
    }
    Ok(ids)
}

pub fn load_sample(root: &Path, id: &str) -> Result<Sample> {
    let image = netpbm::read_image(&root.join("images").join(format!("{id}.ppm")))?;
    let label = netpbm::read_labels(&root.join("labels").join(format!("{id}.pgm")))?;
    Sample::new(image, label).map_err(|e| Error::Data(format!("sample {id}: {e}")))
}

/// Loads every sample listed in `{root}/index.txt`, in listed order.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    read_index(root)?.iter().map(|id| load_sample(root, id)).collect()
}

/// Writes samples under ids `000000`, `000001`, ...
pub fn save_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["images", "labels"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut index = String::new();
    for (i, s) in samples.iter().enumerate() {
        let id = format!("{i:06}");
        netpbm::write_image(&root.join("images").join(format!("{id}.ppm")), &s.image)?;
        netpbm::write_labels(&root.join("labels").join(format!("{id}.pgm")), &s.label)?;
        index.push_str(&id);
        index.push('\n');
    }
    let path = root.join("index.txt");
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}
