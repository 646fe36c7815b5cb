//! Classical segmenters used as references: Otsu thresholding and a
//! Canny-edge region extractor.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::PixelAccuracyMatrix;
use crate::tensor::Tensor;

/// `[0,1]` intensity to one of 256 levels: `floor(255 v + 0.5)`.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram256 {
    pub counts: [u64; 256],
}

impl Histogram256 {
    pub fn from_levels(levels: &[u8]) -> Self {
        let mut counts = [0u64; 256];
        for &l in levels {
            counts[l as usize] += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OtsuResult {
    pub threshold: u8,
    /// 1 where the level exceeds the threshold.
    pub mask: Vec<u8>,
    /// Set when every threshold gives zero between-class variance.
    pub degenerate: bool,
}

/// Between-class variance `w0 w1 (m0 - m1)^2` for class 0 = levels `<= t`,
/// from running sums.
pub fn between_class_variances(hist: &Histogram256) -> [f64; 256] {
    let total = hist.total() as f64;
    let sum_all: f64 = hist.counts.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut out = [0.0; 256];
    let (mut n0, mut s0) = (0.0, 0.0);
    for t in 0..256 {
        n0 += hist.counts[t] as f64;
        s0 += t as f64 * hist.counts[t] as f64;
        let n1 = total - n0;
        if n0 > 0.0 && n1 > 0.0 {
            let (m0, m1) = (s0 / n0, (sum_all - s0) / n1);
            out[t] = (n0 / total) * (n1 / total) * (m0 - m1) * (m0 - m1);
        }
    }
    out
}

/// Exact argmax of the between-class variance over thresholds, smallest
/// threshold on ties. Compares `(N s0 - n0 S)^2 / (n0 n1)` as integer
/// fractions, which is the variance up to the positive factor `N^4`.
fn otsu_from_histogram(hist: &Histogram256) -> (u8, bool) {
    let total = hist.total() as u128;
    let sum_all: u128 = hist.counts.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let (mut n0, mut s0) = (0u128, 0u128);
    // Cross-multiplied scores fit in u128 unless the image is huge; then
    // fall back to the floating-point variances.
    let exact = total
        .checked_mul(sum_all)
        .and_then(|v| v.checked_mul(v))
        .and_then(|v| v.checked_mul(total * total / 4 + 1))
        .is_some();
    let variances = (!exact).then(|| between_class_variances(hist));
    // (threshold, numerator, denominator) of the best score so far.
    let mut best: Option<(u8, u128, u128)> = None;
    for t in 0..256usize {
        n0 += hist.counts[t] as u128;
        s0 += t as u128 * hist.counts[t] as u128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = (total * s0).abs_diff(n0 * sum_all);
        let (num, den) = (diff * diff, n0 * n1);
        let better = match (best, &variances) {
            (None, _) => num > 0,
            (Some((_, bn, bd)), None) => num * bd > bn * den,
            (Some((bt, _, _)), Some(v)) => v[t] > v[bt as usize],
        };
        if better {
            best = Some((t as u8, num, den));
        }
    }
    match best {
        Some((t, _, _)) => (t, false),
        None => (0, true),
    }
}

pub fn otsu_levels(levels: &[u8]) -> OtsuResult {
    let (threshold, degenerate) = otsu_from_histogram(&Histogram256::from_levels(levels));
    let mask = if degenerate {
        vec![0; levels.len()]
    } else {
        levels.iter().map(|&l| (l > threshold) as u8).collect()
    };
    OtsuResult { threshold, mask, degenerate }
}

/// Otsu on a `[0,1]` image, quantized with [`quantize`].
pub fn otsu_threshold(image: &Tensor) -> OtsuResult {
    let levels: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    otsu_levels(&levels)
}

/// Thresholds are quantiles of the gradient magnitude, so the result does not
/// depend on the image's intensity scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CannyParams {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            sigma: 1.4,
            low: 0.7,
            high: 0.9,
        }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!("canny sigma {} must be >= 0", self.sigma)));
        }
        if !(0.0 < self.low && self.low < self.high && self.high <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "canny thresholds need 0 < low < high <= 1, got low={} high={}",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

struct Plane<'a> {
    h: usize,
    w: usize,
    data: &'a [f64],
}

impl Plane<'_> {
    /// Replicated border.
    fn at(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.data[y * self.w + x]
    }
}

fn gaussian_blur(h: usize, w: usize, data: &[f64], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return data.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= norm);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let p = Plane { h, w, data: src };
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                out[y as usize * w + x as usize] = (-r..=r)
                    .map(|i| {
                        let v = if horizontal { p.at(y, x + i) } else { p.at(y + i, x) };
                        k[(i + r) as usize] * v
                    })
                    .sum();
            }
        }
        out
    };
    pass(&pass(data, true), false)
}

/// Thin edges after hysteresis, 1 on edge pixels.
pub fn canny_edges(image: &Tensor, params: &CannyParams) -> Result<Vec<u8>> {
    params.validate()?;
    let (h, w) = (image.h(), image.w());
    if image.n() != 1 || image.c() != 1 {
        return Err(Error::shape("canny", &[1, 1, h, w], &image.shape()));
    }
    let blurred = gaussian_blur(h, w, image.data(), params.sigma);
    let p = Plane { h, w, data: &blurred };
    let mut mag = vec![0.0; h * w];
    let mut dir = vec![0u8; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (p.at(y - 1, x + 1) + 2.0 * p.at(y, x + 1) + p.at(y + 1, x + 1))
                - (p.at(y - 1, x - 1) + 2.0 * p.at(y, x - 1) + p.at(y + 1, x - 1));
            let gy = (p.at(y + 1, x - 1) + 2.0 * p.at(y + 1, x) + p.at(y + 1, x + 1))
                - (p.at(y - 1, x - 1) + 2.0 * p.at(y - 1, x) + p.at(y - 1, x + 1));
            let i = y as usize * w + x as usize;
            mag[i] = gx.hypot(gy);
            // Gradient direction folded into 0, 45, 90, 135 degrees.
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            dir[i] = (((angle + 22.5) / 45.0).floor() as u8) % 4;
        }
    }

    let mut sorted = mag.clone();
    sorted.sort_by(f64::total_cmp);
    let quantile = |q: f64| sorted[((sorted.len() - 1) as f64 * q).floor() as usize];
    let (lo, hi) = (quantile(params.low), quantile(params.high));

    let m = Plane { h, w, data: &mag };
    let mut thin = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let (dy, dx) = match dir[i] {
                0 => (0, 1),
                1 => (1, 1),
                2 => (1, 0),
                _ => (1, -1),
            };
            let inb = |yy: isize, xx: isize| yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize;
            let before = if inb(y - dy, x - dx) { m.at(y - dy, x - dx) } else { 0.0 };
            let after = if inb(y + dy, x + dx) { m.at(y + dy, x + dx) } else { 0.0 };
            // Strict on one side so a plateau of two keeps exactly one pixel.
            if mag[i] > before && mag[i] >= after {
                thin[i] = mag[i];
            }
        }
    }

    let mut edges = vec![0u8; h * w];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for i in 0..h * w {
        if thin[i] > hi && thin[i] > 0.0 {
            edges[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (yy, xx) = (y + dy, x + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let j = yy as usize * w + xx as usize;
                if edges[j] == 0 && thin[j] > lo && thin[j] > 0.0 {
                    edges[j] = 1;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(edges)
}

/// 3x3 dilation (`erode == false`) or erosion. Outside pixels count as 0 for
/// dilation and 1 for erosion, so the border neither grows nor eats regions.
fn morph(h: usize, w: usize, src: &[u8], erode: bool) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut any = false;
            let mut all = true;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (y + dy, x + dx);
                    let v = if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        erode
                    } else {
                        src[yy as usize * w + xx as usize] != 0
                    };
                    any |= v;
                    all &= v;
                }
            }
            out[y as usize * w + x as usize] = if erode { all } else { any } as u8;
        }
    }
    out
}

pub fn closing(h: usize, w: usize, mask: &[u8], iterations: usize) -> Vec<u8> {
    let mut m = mask.to_vec();
    for _ in 0..iterations {
        m = morph(h, w, &m, false);
    }
    for _ in 0..iterations {
        m = morph(h, w, &m, true);
    }
    m
}

/// Marks every pixel not 4-connected to the border through background.
pub fn fill_holes(h: usize, w: usize, mask: &[u8]) -> Vec<u8> {
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if (y == 0 || x == 0 || y == h - 1 || x == w - 1) && mask[i] == 0 {
                outside[i] = true;
                queue.push_back(i);
            }
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / w, i % w);
        let mut visit = |j: usize| {
            if !outside[j] && mask[j] == 0 {
                outside[j] = true;
                queue.push_back(j);
            }
        };
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
    }
    outside.iter().map(|&o| (!o) as u8).collect()
}

/// Canny edges, closed twice with a 3x3 element, then filled.
pub fn canny_segment(image: &Tensor, params: &CannyParams) -> Result<Vec<u8>> {
    let (h, w) = (image.h(), image.w());
    let edges = canny_edges(image, params)?;
    Ok(fill_holes(h, w, &closing(h, w, &edges, 2)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineMethod {
    Otsu,
    Canny(CannyParams),
    /// Returns the reference mask; a sanity check for the scoring path.
    GroundTruth,
}

impl BaselineMethod {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineMethod::Otsu => "otsu",
            BaselineMethod::Canny(_) => "canny",
            BaselineMethod::GroundTruth => "truth",
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "otsu" => Ok(BaselineMethod::Otsu),
            "canny" => Ok(BaselineMethod::Canny(CannyParams::default())),
            "truth" => Ok(BaselineMethod::GroundTruth),
            other => Err(Error::InvalidConfig(format!(
                "unknown baseline method '{other}' (expected otsu or canny)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineReport {
    pub method: String,
    pub class_names: Vec<String>,
    /// Pixel counts per class of the chip, then the total.
    pub per_class: Vec<PixelAccuracyMatrix>,
    pub overall: PixelAccuracyMatrix,
    /// Chips on which Otsu found a constant image.
    pub degenerate: usize,
}

/// Scores a method on every sample, per chip class and overall.
pub fn evaluate_baseline(method: BaselineMethod, samples: &[Sample], class_names: &[String]) -> Result<BaselineReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let v = samples
        .iter()
        .flat_map(|s| s.mask.iter().copied())
        .max()
        .unwrap_or(0)
        .max(1) as usize
        + 1;
    let results = samples
        .par_iter()
        .map(|s| -> Result<(Vec<u8>, bool)> {
            Ok(match method {
                BaselineMethod::Otsu => {
                    let r = otsu_threshold(&s.image);
                    (r.mask, r.degenerate)
                }
                BaselineMethod::Canny(p) => (canny_segment(&s.image, &p)?, false),
                BaselineMethod::GroundTruth => (s.mask.clone(), false),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_class = vec![PixelAccuracyMatrix::new(v); class_names.len()];
    let mut overall = PixelAccuracyMatrix::new(v);
    let mut degenerate = 0;
    for (s, (pred, deg)) in samples.iter().zip(&results) {
        let row = per_class.get_mut(s.label).ok_or(Error::LabelOutOfRange {
            label: s.label,
            classes: class_names.len(),
        })?;
        row.accumulate(pred, &s.mask)?;
        overall.accumulate(pred, &s.mask)?;
        degenerate += *deg as usize;
    }
    Ok(BaselineReport {
        method: method.name().to_string(),
        class_names: class_names.to_vec(),
        per_class,
        overall,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    /// Exhaustive scan straight from the pixels. The variance
    /// `n0 n1 (m0 - m1)^2 / N^2` equals `(s0 n1 - s1 n0)^2 / (n0 n1 N^2)`,
    /// compared here as exact integer fractions.
    fn brute_force_otsu(levels: &[u8]) -> Option<u8> {
        let mut best: Option<(u8, u128, u128)> = None;
        for t in 0..=255u8 {
            let (mut n0, mut n1, mut s0, mut s1) = (0u128, 0u128, 0u128, 0u128);
            for &l in levels {
                if l <= t {
                    n0 += 1;
                    s0 += l as u128;
                } else {
                    n1 += 1;
                    s1 += l as u128;
                }
            }
            if n0 == 0 || n1 == 0 {
                continue;
            }
            let d = (s0 * n1).abs_diff(s1 * n0);
            let (num, den) = (d * d, n0 * n1);
            if best.is_none_or(|(_, bn, bd)| num * bd > bn * den) {
                best = Some((t, num, den));
            }
        }
        best.filter(|&(_, num, _)| num > 0).map(|(t, _, _)| t)
    }

    #[test]
    fn two_level_image() {
        let mut levels = vec![50u8; 40];
        levels.extend(vec![200u8; 60]);
        let r = otsu_levels(&levels);
        assert_eq!(r.threshold, 50);
        assert!(!r.degenerate);
        assert_eq!(r.mask, levels.iter().map(|&l| (l == 200) as u8).collect::<Vec<_>>());
    }

    #[test]
    fn constant_image_is_degenerate() {
        let r = otsu_levels(&[200; 64]);
        assert_eq!((r.threshold, r.degenerate), (0, true));
        assert!(r.mask.iter().all(|&m| m == 0));
    }

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(0.49 / 255.0), 0);
    }

    #[test]
    fn incremental_variance_matches_two_pass() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let levels: Vec<u8> = (0..300).map(|_| rng.below(256) as u8).collect();
            let v = between_class_variances(&Histogram256::from_levels(&levels));
            let n = levels.len() as f64;
            for t in 0..256usize {
                let c0: Vec<f64> = levels.iter().filter(|&&l| l as usize <= t).map(|&l| l as f64).collect();
                let c1: Vec<f64> = levels.iter().filter(|&&l| l as usize > t).map(|&l| l as f64).collect();
                let direct = if c0.is_empty() || c1.is_empty() {
                    0.0
                } else {
                    let m0 = c0.iter().sum::<f64>() / c0.len() as f64;
                    let m1 = c1.iter().sum::<f64>() / c1.len() as f64;
                    c0.len() as f64 / n * (c1.len() as f64 / n) * (m0 - m1).powi(2)
                };
                assert!((v[t] - direct).abs() < 1e-9);
            }
        }
    }

    fn square(n: usize, lo: usize, hi: usize, fg: f64, bg: f64) -> Tensor {
        Tensor::from_fn([1, 1, n, n], |_, _, y, x| {
            if (lo..hi).contains(&y) && (lo..hi).contains(&x) {
                fg
            } else {
                bg
            }
        })
    }

    #[test]
    fn canny_recovers_a_square() {
        let img = square(64, 22, 42, 0.9, 0.1);
        let mask = canny_segment(&img, &CannyParams::default()).unwrap();
        let correct = (0..64 * 64)
            .filter(|&i| {
                let (y, x) = (i / 64, i % 64);
                let truth = (22..42).contains(&y) && (22..42).contains(&x);
                (mask[i] != 0) == truth
            })
            .count();
        assert!(correct as f64 / 4096.0 >= 0.98, "{correct}");
        // Every error lies within two pixels of the boundary.
        for i in 0..4096 {
            let (y, x) = ((i / 64) as isize, (i % 64) as isize);
            let truth = (22..42).contains(&y) && (22..42).contains(&x);
            if (mask[i] != 0) != truth {
                let d = |v: isize| (v - 22).abs().min((v - 41).abs());
                assert!(d(y).min(d(x)) <= 2, "error at {y},{x}");
            }
        }
    }

    #[test]
    fn canny_constant_image_is_empty() {
        let img = Tensor::full([1, 1, 32, 32], 0.4);
        assert!(canny_segment(&img, &CannyParams::default()).unwrap().iter().all(|&m| m == 0));
    }

    #[test]
    fn canny_rejects_bad_thresholds() {
        let img = Tensor::full([1, 1, 8, 8], 0.4);
        for (low, high) in [(0.9, 0.7), (0.0, 0.5), (0.5, 1.5)] {
            assert!(canny_segment(&img, &CannyParams { sigma: 1.0, low, high }).is_err());
        }
    }

    #[test]
    fn fill_and_close() {
        // A ring with a one-pixel gap closes and fills.
        let n = 12;
        let mut ring = vec![0u8; n * n];
        for i in 3..9 {
            ring[3 * n + i] = 1;
            ring[8 * n + i] = 1;
            ring[i * n + 3] = 1;
            ring[i * n + 8] = 1;
        }
        ring[3 * n + 5] = 0;
        let filled = fill_holes(n, n, &closing(n, n, &ring, 2));
        for y in 3..9 {
            for x in 3..9 {
                assert_eq!(filled[y * n + x], 1);
            }
        }
        assert_eq!(filled[0], 0);
    }

    #[test]
    fn baseline_truth_is_perfect() {
        use crate::data::{generate_corpus, CorpusPlan, SyntheticSpec};
        let spec = SyntheticSpec {
            num_classes: 2,
            chip_size: 48,
            plan: CorpusPlan { train_per_class: 2, test_per_class: 0, ..CorpusPlan::default() },
            ..SyntheticSpec::default()
        };
        let ds = generate_corpus(&spec, 0).unwrap();
        let r = evaluate_baseline(BaselineMethod::GroundTruth, &ds.samples, &ds.class_names).unwrap();
        assert_eq!(r.overall.overall(), 1.0);
        assert!(evaluate_baseline(BaselineMethod::Otsu, &[], &ds.class_names).is_err());
        assert!("sobel".parse::<BaselineMethod>().is_err());
    }

    #[test]
    fn otsu_on_clean_chips() {
        use crate::data::{generate_corpus, CorpusPlan, SyntheticSpec};
        let spec = SyntheticSpec {
            num_classes: 3,
            speckle_looks: 0,
            plan: CorpusPlan { train_per_class: 3, test_per_class: 0, ..CorpusPlan::default() },
            ..SyntheticSpec::default()
        };
        let ds = generate_corpus(&spec, 0).unwrap();
        let r = evaluate_baseline(BaselineMethod::Otsu, &ds.samples, &ds.class_names).unwrap();
        assert!(r.overall.overall() >= 0.95, "{}", r.overall.overall());
    }

    proptest! {
        #[test]
        fn otsu_matches_exhaustive_scan(levels in proptest::collection::vec(any::<u8>(), 2..200)) {
            let r = otsu_levels(&levels);
            match brute_force_otsu(&levels) {
                Some(t) => prop_assert_eq!(r.threshold, t),
                None => prop_assert!(r.degenerate),
            }
        }

        #[test]
        fn raising_high_never_adds_pixels(seed in 0u64..200, lo in 0.3f64..0.6, h1 in 0.65f64..0.8, dh in 0.0f64..0.19) {
            let mut rng = Rng::new(seed);
            let mut img = square(24, 7, 16, 0.8, 0.2);
            img.data_mut().iter_mut().for_each(|v| *v *= 0.7 + 0.6 * rng.uniform());
            let a = canny_segment(&img, &CannyParams { sigma: 1.0, low: lo, high: h1 }).unwrap();
            let b = canny_segment(&img, &CannyParams { sigma: 1.0, low: lo, high: h1 + dh }).unwrap();
            prop_assert!(a.iter().zip(&b).all(|(x, y)| y <= x));
        }

        #[test]
        fn canny_is_scale_invariant(seed in 0u64..200, k in -3i32..4) {
            let mut rng = Rng::new(seed);
            let mut img = square(24, 6, 15, 0.7, 0.2);
            img.data_mut().iter_mut().for_each(|v| *v *= 0.6 + 0.8 * rng.uniform());
            let scaled = img.scale(2f64.powi(k));
            let p = CannyParams::default();
            let a = canny_segment(&img, &p).unwrap();
            let b = canny_segment(&scaled, &p).unwrap();
            prop_assert!(a.iter().all(|&m| m <= 1));
            prop_assert_eq!(a, b);
        }
    }
}
