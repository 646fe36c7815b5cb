//! Synthetic SAR-like chips with exact target masks.
//!
//! A chip is clutter plus a bright rotated target and the radar shadow it
//! casts down-range (toward increasing row index). Shadow length grows as the
//! depression angle drops, which is what separates the depression scenarios.
//! Intensities are multiplied by unit-mean gamma speckle, clamped to `[0,1]`
//! and quantized to 16 bits so that PNG storage is lossless.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, SampleMeta, Split};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const MAX_POSE_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    LCompound,
}

/// Geometry variants of a class, used for the held-out configuration and
/// version scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    /// Adds a raised block on the hull.
    Config,
    /// Stretches the hull and narrows it.
    Version,
}

impl Variant {
    pub fn serial_suffix(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Config => "cfg1",
            Variant::Version => "ver1",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassGeometry {
    pub name: String,
    pub shape: ShapeKind,
    /// Full length of the long axis in pixels, `[min, max]`.
    pub length: [f64; 2],
    /// Width over length, `[min, max]`.
    pub aspect: [f64; 2],
    /// Mean target reflectivity, `[min, max]`.
    pub brightness: [f64; 2],
}

impl ClassGeometry {
    fn validate(&self) -> Result<()> {
        let ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] > 0.0 && r[0] <= r[1];
        if !ok(self.length) || !ok(self.aspect) || !ok(self.brightness) {
            return Err(Error::InvalidConfig(format!(
                "class '{}': ranges must be positive with min <= max",
                self.name
            )));
        }
        if self.aspect[1] > 1.0 || self.brightness[1] > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "class '{}': aspect and brightness must not exceed 1",
                self.name
            )));
        }
        Ok(())
    }

    /// Analytic area bounds over the configured ranges, widened for
    /// rasterization and variant edits.
    pub fn area_range(&self) -> (usize, usize) {
        let area = |l: f64, a: f64| {
            let (len, wid) = (l, l * a);
            match self.shape {
                ShapeKind::Ellipse => std::f64::consts::PI * len * wid / 4.0,
                ShapeKind::Rectangle => len * wid,
                ShapeKind::LCompound => {
                    let t = l_thickness(len, wid);
                    len * t + (wid - t) * t
                }
            }
        };
        let lo = area(self.length[0], self.aspect[0]) * 0.7;
        let hi = area(self.length[1], self.aspect[1]) * 1.45;
        (lo.floor() as usize, hi.ceil() as usize)
    }
}

fn l_thickness(len: f64, wid: f64) -> f64 {
    (0.45 * wid).max(0.2 * len).min(wid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub chip_size: usize,
    /// Class descriptors; when empty, `num_classes` defaults are used.
    pub classes: Vec<ClassGeometry>,
    pub num_classes: usize,
    /// Equivalent number of looks; 0 disables speckle.
    pub speckle_looks: u32,
    /// Shadow length in pixels at 45 degrees depression.
    pub shadow_length: f64,
    /// Shadow intensity relative to the clutter level.
    pub shadow_level: f64,
    pub clutter_level: f64,
    /// Maximum target-center offset from the chip center, in pixels.
    pub center_jitter: f64,
    pub plan: CorpusPlan,
}

/// How many chips of each kind to generate per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusPlan {
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Far-depression test chips of the base serial.
    pub eoc_depression_per_class: usize,
    /// Test chips per held-out variant (configuration and version).
    pub variant_per_class: usize,
    pub train_depression: f64,
    pub test_depression: f64,
    pub eoc_depression: f64,
}

impl Default for CorpusPlan {
    fn default() -> Self {
        Self {
            train_per_class: 64,
            test_per_class: 32,
            eoc_depression_per_class: 0,
            variant_per_class: 0,
            train_depression: 17.0,
            test_depression: 15.0,
            eoc_depression: 30.0,
        }
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            chip_size: 128,
            classes: Vec::new(),
            num_classes: 10,
            speckle_looks: 1,
            shadow_length: 6.0,
            shadow_level: 0.25,
            clutter_level: 0.12,
            center_jitter: 4.0,
            plan: CorpusPlan::default(),
        }
    }
}

/// Up to twelve classes cycling through the three shapes. Lengths spread
/// over 18..=48 px (at most 6 px apart) and the ranges never overlap.
pub fn default_classes(n: usize) -> Result<Vec<ClassGeometry>> {
    const NAMES: [&str; 12] = [
        "C00", "C01", "C02", "C03", "C04", "C05", "C06", "C07", "C08", "C09", "C10", "C11",
    ];
    if n == 0 || n > NAMES.len() {
        return Err(Error::InvalidConfig(format!(
            "default class table supports 1..={} classes, got {n}",
            NAMES.len()
        )));
    }
    let shapes = [ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::LCompound];
    let step = if n > 1 { (30.0 / (n - 1) as f64).min(6.0) } else { 6.0 };
    let half = 0.45 * step;
    Ok((0..n)
        .map(|i| {
            let base = 18.0 + step * i as f64;
            ClassGeometry {
                name: NAMES[i].to_string(),
                shape: shapes[i % 3],
                length: [base - half, base + half],
                aspect: [0.45, 0.6],
                brightness: [0.6, 0.85],
            }
        })
        .collect())
}

impl SyntheticSpec {
    pub fn resolved_classes(&self) -> Result<Vec<ClassGeometry>> {
        if self.classes.is_empty() {
            default_classes(self.num_classes)
        } else {
            Ok(self.classes.clone())
        }
    }

    pub fn validate(&self) -> Result<()> {
        let classes = self.resolved_classes()?;
        for c in &classes {
            c.validate()?;
        }
        let mut names: Vec<&str> = classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("duplicate class names".into()));
        }
        if names.iter().any(|n| n.is_empty() || n.contains([',', '\n', '"', '/'])) {
            return Err(Error::InvalidConfig("class names must be non-empty plain tokens".into()));
        }
        if self.chip_size < 16 {
            return Err(Error::InvalidConfig("chip_size must be at least 16".into()));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.shadow_length)
            || !finite_nonneg(self.center_jitter)
            || !(0.0..=1.0).contains(&self.shadow_level)
            || !(0.0..1.0).contains(&self.clutter_level)
        {
            return Err(Error::InvalidConfig(
                "shadow_length/center_jitter must be >= 0, shadow_level in [0,1], clutter_level in [0,1)".into(),
            ));
        }
        let max_len = classes.iter().map(|c| c.length[1]).fold(0.0, f64::max);
        if max_len * 1.25 + 2.0 * self.center_jitter + 2.0 > self.chip_size as f64 {
            return Err(Error::InvalidConfig(format!(
                "targets up to {max_len} px do not fit a {} px chip",
                self.chip_size
            )));
        }
        for d in [self.plan.train_depression, self.plan.test_depression, self.plan.eoc_depression] {
            if !(d > 0.0 && d < 90.0) {
                return Err(Error::InvalidConfig(format!("depression {d} outside (0, 90)")));
            }
        }
        Ok(())
    }

    fn shadow_pixels(&self, depression_deg: f64) -> usize {
        (self.shadow_length / depression_deg.to_radians().tan()).round() as usize
    }
}

struct Pose {
    cy: f64,
    cx: f64,
    cos: f64,
    sin: f64,
    len: f64,
    wid: f64,
}

fn inside(shape: ShapeKind, variant: Variant, pose: &Pose, y: f64, x: f64) -> bool {
    let (dy, dx) = (y - pose.cy, x - pose.cx);
    // Local frame: u along the long axis, v across.
    let u = dx * pose.cos + dy * pose.sin;
    let v = -dx * pose.sin + dy * pose.cos;
    let (hl, hw) = (pose.len / 2.0, pose.wid / 2.0);
    let hull = match shape {
        ShapeKind::Ellipse => (u / hl).powi(2) + (v / hw).powi(2) <= 1.0,
        ShapeKind::Rectangle => u.abs() <= hl && v.abs() <= hw,
        ShapeKind::LCompound => {
            let t = l_thickness(pose.len, pose.wid);
            let bar = u.abs() <= hl && v >= -hw && v <= -hw + t;
            let leg = u >= -hl && u <= -hl + t && v.abs() <= hw;
            bar || leg
        }
    };
    match variant {
        Variant::Config => {
            let s = 0.3 * pose.len;
            hull || ((u - 0.15 * pose.len).abs() <= s / 2.0 && v.abs() <= s / 2.0)
        }
        Variant::Base | Variant::Version => hull,
    }
}

/// Unit-mean gamma draw with `looks` degrees of freedom (mean of exponentials).
fn speckle(looks: u32, rng: &mut Rng) -> f64 {
    if looks == 0 {
        return 1.0;
    }
    let sum: f64 = (0..looks).map(|_| -rng.uniform_open().ln()).sum();
    sum / looks as f64
}

fn quantize16(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

/// One chip of class `class_id`. The pose is resampled until the mask area
/// falls inside the class's area range.
pub fn generate_chip(
    spec: &SyntheticSpec,
    class_id: usize,
    variant: Variant,
    depression_deg: f64,
    split: Split,
    rng: &mut Rng,
) -> Result<Sample> {
    let classes = spec.resolved_classes()?;
    let geom = classes.get(class_id).ok_or(Error::LabelOutOfRange {
        label: class_id,
        classes: classes.len(),
    })?;
    let n = spec.chip_size;
    let (area_lo, area_hi) = geom.area_range();

    let mut mask = vec![0u8; n * n];
    let mut found = false;
    for _ in 0..MAX_POSE_ATTEMPTS {
        let mut len = rng.uniform_range(geom.length[0], geom.length[1]);
        let mut aspect = rng.uniform_range(geom.aspect[0], geom.aspect[1]);
        if variant == Variant::Version {
            len *= 1.15;
            aspect *= 0.8;
        }
        let theta = rng.uniform_range(0.0, std::f64::consts::PI);
        let centre = (n as f64 - 1.0) / 2.0;
        let pose = Pose {
            cy: centre + rng.uniform_range(-spec.center_jitter, spec.center_jitter),
            cx: centre + rng.uniform_range(-spec.center_jitter, spec.center_jitter),
            cos: theta.cos(),
            sin: theta.sin(),
            len,
            wid: len * aspect,
        };
        let mut area = 0;
        for y in 0..n {
            for x in 0..n {
                let hit = inside(geom.shape, variant, &pose, y as f64, x as f64);
                mask[y * n + x] = hit as u8;
                area += hit as usize;
            }
        }
        if (area_lo..=area_hi).contains(&area) {
            found = true;
            break;
        }
    }
    if !found {
        return Err(Error::InvalidConfig(format!(
            "class '{}': no pose within area range {area_lo}..={area_hi}",
            geom.name
        )));
    }

    // Shadow: background pixels with a target pixel within `len` rows above.
    let len = spec.shadow_pixels(depression_deg);
    let mut shadow = vec![false; n * n];
    for x in 0..n {
        let mut since_target = usize::MAX;
        for y in 0..n {
            if mask[y * n + x] != 0 {
                since_target = 0;
            } else {
                since_target = since_target.saturating_add(1);
                shadow[y * n + x] = since_target <= len;
            }
        }
    }

    let brightness = rng.uniform_range(geom.brightness[0], geom.brightness[1]);
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n * n {
        let base = if mask[i] != 0 {
            brightness
        } else if shadow[i] {
            spec.clutter_level * spec.shadow_level
        } else {
            spec.clutter_level
        };
        data.push(quantize16(base * speckle(spec.speckle_looks, rng)));
    }
    let image = Tensor::from_vec([1, 1, n, n], data)?;
    Sample::new(
        image,
        class_id,
        mask,
        SampleMeta {
            depression_deg,
            serial: format!("{}-{}", geom.name, variant.serial_suffix()),
            split,
        },
    )
}

/// Full corpus per the spec's plan. Chip `i` is drawn from `Rng::derive(seed, i)`,
/// so the result does not depend on the worker count.
pub fn generate_corpus(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let classes = spec.resolved_classes()?;
    let plan = &spec.plan;
    let mut jobs: Vec<(usize, Variant, f64, Split)> = Vec::new();
    for c in 0..classes.len() {
        let mut push = |count: usize, v: Variant, d: f64, s: Split| {
            jobs.extend(std::iter::repeat_n((c, v, d, s), count));
        };
        push(plan.train_per_class, Variant::Base, plan.train_depression, Split::Train);
        push(plan.test_per_class, Variant::Base, plan.test_depression, Split::Test);
        push(plan.eoc_depression_per_class, Variant::Base, plan.eoc_depression, Split::Test);
        push(plan.variant_per_class, Variant::Config, plan.test_depression, Split::Test);
        push(plan.variant_per_class, Variant::Version, plan.test_depression, Split::Test);
    }
    let samples = jobs
        .par_iter()
        .enumerate()
        .map(|(i, &(c, v, d, s))| generate_chip(spec, c, v, d, s, &mut Rng::derive(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(classes.into_iter().map(|c| c.name).collect(), samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 4,
            plan: CorpusPlan {
                train_per_class: 2,
                test_per_class: 1,
                eoc_depression_per_class: 1,
                variant_per_class: 1,
                ..CorpusPlan::default()
            },
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn chip_mask_area_in_range_and_target_brighter() {
        let spec = SyntheticSpec::default();
        let classes = spec.resolved_classes().unwrap();
        for c in 0..classes.len() {
            for k in 0..3 {
                let mut rng = Rng::derive(9, (c * 10 + k) as u64);
                let s = generate_chip(&spec, c, Variant::Base, 17.0, Split::Train, &mut rng).unwrap();
                let (lo, hi) = classes[c].area_range();
                let area = s.target_pixels();
                assert!((lo..=hi).contains(&area), "class {c}: {area} not in {lo}..={hi}");
                let (mut t, mut nt, mut b, mut nb) = (0.0, 0, 0.0, 0);
                for (v, &m) in s.image.data().iter().zip(&s.mask) {
                    if m != 0 {
                        t += v;
                        nt += 1;
                    } else {
                        b += v;
                        nb += 1;
                    }
                }
                assert!(t / nt as f64 > b / nb as f64);
            }
        }
    }

    #[test]
    fn same_seed_same_chip() {
        let spec = SyntheticSpec::default();
        let a = generate_chip(&spec, 2, Variant::Base, 17.0, Split::Train, &mut Rng::new(4)).unwrap();
        let b = generate_chip(&spec, 2, Variant::Base, 17.0, Split::Train, &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
        let c = generate_chip(&spec, 2, Variant::Base, 17.0, Split::Train, &mut Rng::new(5)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn values_are_16_bit_exact() {
        let s = generate_chip(&SyntheticSpec::default(), 0, Variant::Base, 17.0, Split::Train, &mut Rng::new(1)).unwrap();
        for &v in s.image.data() {
            assert!((0.0..=1.0).contains(&v));
            let q = (v * 65535.0).round();
            assert_eq!(q / 65535.0, v);
        }
    }

    #[test]
    fn lower_depression_casts_longer_shadow() {
        let spec = SyntheticSpec::default();
        assert!(spec.shadow_pixels(15.0) > spec.shadow_pixels(17.0));
        assert!(spec.shadow_pixels(17.0) > spec.shadow_pixels(30.0));
    }

    #[test]
    fn corpus_is_balanced_and_serials_follow_variants() {
        let ds = generate_corpus(&small_spec(), 3).unwrap();
        assert_eq!(ds.num_classes(), 4);
        assert_eq!(ds.class_counts(), vec![6; 4]);
        assert!(ds.samples.iter().any(|s| s.meta.serial.ends_with("-cfg1")));
        assert!(ds.samples.iter().any(|s| s.meta.serial.ends_with("-ver1")));
        assert_eq!(ds, generate_corpus(&small_spec(), 3).unwrap());
    }

    #[test]
    fn invalid_class_and_spec() {
        let spec = SyntheticSpec::default();
        assert!(generate_chip(&spec, 10, Variant::Base, 17.0, Split::Train, &mut Rng::new(0)).is_err());
        let bad = SyntheticSpec { chip_size: 32, ..SyntheticSpec::default() };
        assert!(bad.validate().is_err());
        assert!(default_classes(0).is_err());
    }

    #[test]
    fn spec_json_rejects_unknown_fields() {
        let err = serde_json::from_str::<SyntheticSpec>(r#"{"chip_sise": 64}"#);
        assert!(err.is_err());
        let ok: SyntheticSpec = serde_json::from_str(r#"{"num_classes": 4}"#).unwrap();
        assert_eq!(ok.num_classes, 4);
        assert_eq!(ok.chip_size, 128);
    }
}
