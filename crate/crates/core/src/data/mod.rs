//! Chips, masks and their metadata: synthetic generation, crop augmentation,
//! manifest IO and scenario splits.

mod augment;
mod manifest;
mod splits;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{admissible_offsets, augment_crops, augment_dataset, center_crop_sample, crop_sample};
pub use manifest::{decode_gray_png, load_manifest, parse_manifest, ManifestRow, MANIFEST_FILE, CLASSES_FILE, read_png_gray16, read_png_mask, save_dataset, write_png_gray16, write_png_mask};
pub use splits::{make_eoc_splits, Scenario};
pub use synthetic::{default_classes, generate_chip, generate_corpus, ClassGeometry, CorpusPlan, ShapeKind, SyntheticSpec, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split '{other}' (expected train or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub depression_deg: f64,
    pub serial: String,
    pub split: Split,
}

/// One chip: a `(1,1,h,w)` image in `[0,1]`, its class and a per-pixel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    /// Row-major `h*w` class indices.
    pub mask: Vec<u8>,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn new(image: Tensor, label: usize, mask: Vec<u8>, meta: SampleMeta) -> Result<Self> {
        let [n, c, h, w] = image.shape();
        if n != 1 || c != 1 {
            return Err(Error::InvalidShape {
                shape: image.shape().to_vec(),
                reason: "sample image must be (1,1,h,w)".into(),
            });
        }
        if mask.len() != h * w {
            return Err(Error::Data(format!(
                "mask has {} pixels but image is {h}x{w}",
                mask.len()
            )));
        }
        Ok(Self { image, label, mask, meta })
    }

    pub fn height(&self) -> usize {
        self.image.h()
    }

    pub fn width(&self) -> usize {
        self.image.w()
    }

    pub fn target_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }

    /// Inclusive bounding box `(y0, y1, x0, x1)` of nonzero mask pixels.
    pub fn target_bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let w = self.width();
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.mask.iter().enumerate().filter(|(_, &m)| m != 0) {
            let (y, x) = (i / w, i % w);
            bbox = Some(match bbox {
                None => (y, y, x, x),
                Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y), x0.min(x), x1.max(x)),
            });
        }
        bbox
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, samples: Vec<Sample>) -> Self {
        Self { class_names, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Largest mask value plus one, never below 2.
    pub fn num_seg_classes(&self) -> usize {
        let max = self
            .samples
            .iter()
            .flat_map(|s| s.mask.iter().copied())
            .max()
            .unwrap_or(0) as usize;
        (max + 1).max(2)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            if s.label < counts.len() {
                counts[s.label] += 1;
            }
        }
        counts
    }

    /// Every sample has the same spatial size; returns it.
    pub fn spatial_size(&self) -> Result<[usize; 2]> {
        let first = self.samples.first().ok_or(Error::EmptyDataset)?;
        let size = [first.height(), first.width()];
        if let Some(bad) = self.samples.iter().find(|s| [s.height(), s.width()] != size) {
            return Err(Error::Data(format!(
                "mixed chip sizes: {}x{} and {}x{}",
                size[0],
                size[1],
                bad.height(),
                bad.width()
            )));
        }
        Ok(size)
    }

    pub fn filter(&self, mut keep: impl FnMut(&Sample) -> bool) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> SampleMeta {
        SampleMeta {
            depression_deg: 17.0,
            serial: "A-base".into(),
            split: Split::Train,
        }
    }

    #[test]
    fn sample_rejects_mismatched_mask() {
        let img = Tensor::zeros([1, 1, 3, 3]);
        assert!(Sample::new(img.clone(), 0, vec![0; 8], meta()).is_err());
        assert!(Sample::new(img, 0, vec![0; 9], meta()).is_ok());
    }

    #[test]
    fn bbox_of_mask() {
        let mut mask = vec![0u8; 16];
        mask[5] = 1;
        mask[10] = 1;
        let s = Sample::new(Tensor::zeros([1, 1, 4, 4]), 0, mask, meta()).unwrap();
        assert_eq!(s.target_bbox(), Some((1, 2, 1, 2)));
        assert_eq!(s.target_pixels(), 2);
    }

    #[test]
    fn split_parsing() {
        assert_eq!("Train".parse::<Split>().unwrap(), Split::Train);
        assert!("val".parse::<Split>().is_err());
    }
}
