//! Random-crop augmentation that never cuts the target.

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Inclusive ranges of crop offsets `(rows, cols)` for which a `crop`-sized
/// window holds the whole target.
pub fn admissible_offsets(sample: &Sample, crop: usize) -> Result<((usize, usize), (usize, usize))> {
    let (h, w) = (sample.height(), sample.width());
    if crop == 0 || crop > h || crop > w {
        return Err(Error::InvalidConfig(format!(
            "crop {crop} does not fit a {h}x{w} chip"
        )));
    }
    let axis = |lo: usize, hi: usize, n: usize| -> Option<(usize, usize)> {
        let start = (hi + 1).saturating_sub(crop);
        let end = lo.min(n - crop);
        (start <= end).then_some((start, end))
    };
    match sample.target_bbox() {
        None => Ok(((0, h - crop), (0, w - crop))),
        Some((y0, y1, x0, x1)) => match (axis(y0, y1, h), axis(x0, x1, w)) {
            (Some(r), Some(c)) => Ok((r, c)),
            _ => Err(Error::Data(format!(
                "target of '{}' spans {}x{} px and cannot be kept whole in a {crop} px crop",
                sample.meta.serial,
                y1 - y0 + 1,
                x1 - x0 + 1
            ))),
        },
    }
}

pub fn crop_sample(sample: &Sample, y0: usize, x0: usize, crop: usize) -> Result<Sample> {
    let image = sample.image.crop(y0, x0, crop, crop)?;
    let w = sample.width();
    let mut mask = Vec::with_capacity(crop * crop);
    for y in y0..y0 + crop {
        mask.extend_from_slice(&sample.mask[y * w + x0..y * w + x0 + crop]);
    }
    Sample::new(image, sample.label, mask, sample.meta.clone())
}

/// `count` crops with offsets uniform over the admissible window.
pub fn augment_crops(sample: &Sample, count: usize, crop: usize, rng: &mut Rng) -> Result<Vec<Sample>> {
    let ((r0, r1), (c0, c1)) = admissible_offsets(sample, crop)?;
    (0..count)
        .map(|_| {
            let y = rng.int_inclusive(r0, r1);
            let x = rng.int_inclusive(c0, c1);
            crop_sample(sample, y, x, crop)
        })
        .collect()
}

/// Deterministic crop for evaluation: the admissible offset closest to the
/// geometric center.
pub fn center_crop_sample(sample: &Sample, crop: usize) -> Result<Sample> {
    let ((r0, r1), (c0, c1)) = admissible_offsets(sample, crop)?;
    let y = ((sample.height() - crop) / 2).clamp(r0, r1);
    let x = ((sample.width() - crop) / 2).clamp(c0, c1);
    crop_sample(sample, y, x, crop)
}

/// Crops every chip `per_chip` times. With a quota, each class is then
/// topped up (or trimmed) to exactly `quota` samples, extra crops being
/// drawn from chips picked uniformly with replacement.
pub fn augment_dataset(
    dataset: &Dataset,
    per_chip: usize,
    crop: usize,
    quota: Option<usize>,
    rng: &mut Rng,
) -> Result<Dataset> {
    let mut out = Vec::new();
    for class in 0..dataset.num_classes() {
        let chips: Vec<&Sample> = dataset.samples.iter().filter(|s| s.label == class).collect();
        let mut crops = Vec::new();
        for chip in &chips {
            crops.extend(augment_crops(chip, per_chip, crop, rng)?);
        }
        if let Some(q) = quota {
            if chips.is_empty() && q > 0 {
                return Err(Error::Data(format!(
                    "class '{}' has no chips to fill a quota of {q}",
                    dataset.class_names[class]
                )));
            }
            while crops.len() < q {
                let chip = chips[rng.below(chips.len())];
                crops.extend(augment_crops(chip, 1, crop, rng)?);
            }
            crops.truncate(q);
        }
        out.extend(crops);
    }
    Ok(Dataset::new(dataset.class_names.clone(), out))
}
