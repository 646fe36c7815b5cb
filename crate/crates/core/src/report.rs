//! Evaluation artifacts: percentage tables, raw counts, a JSON summary and
//! side-by-side overlay images.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;

use crate::baselines::BaselineReport;
use crate::data::{Sample, Scenario};
use crate::error::{Error, Result};
use crate::metrics::{format_hundredths, row_percentages, ConfusionMatrix, PixelAccuracyMatrix};

pub const CONFUSION_CSV: &str = "confusion.csv";
pub const CONFUSION_COUNTS_CSV: &str = "confusion_counts.csv";
pub const PIXEL_ACCURACY_CSV: &str = "pixel_accuracy.csv";
pub const PIXEL_BY_CLASS_CSV: &str = "pixel_accuracy_by_class.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const OVERLAY_DIR: &str = "overlays";

/// Scored predictions for one test set.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub scenario: Option<Scenario>,
    pub class_names: Vec<String>,
    pub confusion: ConfusionMatrix,
    /// Pixel counts over the whole test set.
    pub pixels: PixelAccuracyMatrix,
    /// Pixel counts per chip class.
    pub pixels_by_class: Vec<PixelAccuracyMatrix>,
}

impl EvalReport {
    pub fn build(
        scenario: Option<Scenario>,
        class_names: &[String],
        samples: &[Sample],
        predicted_labels: &[usize],
        predicted_masks: &[Vec<u8>],
        seg_classes: usize,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if predicted_labels.len() != samples.len() || predicted_masks.len() != samples.len() {
            return Err(Error::shape(
                "eval report",
                &[samples.len()],
                &[predicted_labels.len(), predicted_masks.len()],
            ));
        }
        let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let confusion = crate::metrics::confusion(&truth, predicted_labels, class_names.len())?;
        let mut pixels = PixelAccuracyMatrix::new(seg_classes);
        let mut pixels_by_class = vec![PixelAccuracyMatrix::new(seg_classes); class_names.len()];
        for (s, m) in samples.iter().zip(predicted_masks) {
            pixels.accumulate(m, &s.mask)?;
            pixels_by_class[s.label].accumulate(m, &s.mask)?;
        }
        Ok(Self {
            scenario,
            class_names: class_names.to_vec(),
            confusion,
            pixels,
            pixels_by_class,
        })
    }

    pub fn recognition_ratio(&self) -> f64 {
        self.confusion.recognition_ratio()
    }

    pub fn pixel_accuracy(&self) -> f64 {
        self.pixels.overall()
    }
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    scenario: Option<&'static str>,
    samples: u64,
    class_names: &'a [String],
    recognition_ratio: f64,
    recognition_ratio_pct: String,
    per_class_recognition: Vec<Option<f64>>,
    pixel_accuracy: f64,
    pixel_accuracy_pct: String,
    target_pixel_accuracy: Option<f64>,
    background_pixel_accuracy: Option<f64>,
    overlays: usize,
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn opt_pct(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn seg_label(v: usize, seg_classes: usize) -> String {
    match (v, seg_classes) {
        (0, 2) => "background".into(),
        (1, 2) => "target".into(),
        _ => format!("class{v}"),
    }
}

/// Row-percentage table: one row per true class, entries to two decimals
/// summing to exactly 100. Rows without samples are left blank.
fn percentage_rows(names: &[String], counts: &[Vec<u64>]) -> Vec<Vec<String>> {
    names
        .iter()
        .zip(counts)
        .map(|(name, row)| {
            let mut out = vec![name.clone()];
            match row_percentages(row) {
                Some(p) => out.extend(p.into_iter().map(format_hundredths)),
                None => out.extend(std::iter::repeat_n(String::new(), row.len())),
            }
            out
        })
        .collect()
}

/// Per-class target/background/overall pixel accuracies in percent.
fn pixel_by_class_rows(names: &[String], per_class: &[PixelAccuracyMatrix], overall: &PixelAccuracyMatrix) -> Vec<Vec<String>> {
    let row = |name: &str, m: &PixelAccuracyMatrix| {
        let target = if m.classes() > 1 { m.class_accuracy(1) } else { None };
        vec![
            name.to_string(),
            opt_pct(target),
            opt_pct(m.class_accuracy(0)),
            if m.total() > 0 { pct(m.overall()) } else { String::new() },
        ]
    };
    let mut rows: Vec<Vec<String>> = names.iter().zip(per_class).map(|(n, m)| row(n, m)).collect();
    rows.push(row("overall", overall));
    rows
}

const PIXEL_BY_CLASS_HEADER: [&str; 4] = ["class", "target", "background", "overall"];

/// Writes the CSV tables, `summary.json` and up to `overlays` overlay PNGs.
pub fn emit_report(
    report: &EvalReport,
    samples: &[Sample],
    predicted_masks: &[Vec<u8>],
    overlays: usize,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let names = &report.class_names;

    let mut header = vec!["true\\predicted".to_string()];
    header.extend(names.iter().cloned());
    write_csv(
        &out_dir.join(CONFUSION_CSV),
        &header,
        &percentage_rows(names, &report.confusion.counts),
    )?;
    let counts: Vec<Vec<String>> = names
        .iter()
        .zip(&report.confusion.counts)
        .map(|(n, row)| std::iter::once(n.clone()).chain(row.iter().map(u64::to_string)).collect())
        .collect();
    write_csv(&out_dir.join(CONFUSION_COUNTS_CSV), &header, &counts)?;

    let v = report.pixels.classes();
    let seg_names: Vec<String> = (0..v).map(|i| seg_label(i, v)).collect();
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(seg_names.iter().cloned());
    write_csv(
        &out_dir.join(PIXEL_ACCURACY_CSV),
        &header,
        &percentage_rows(&seg_names, &report.pixels.counts),
    )?;
    write_csv(
        &out_dir.join(PIXEL_BY_CLASS_CSV),
        &PIXEL_BY_CLASS_HEADER.map(String::from),
        &pixel_by_class_rows(names, &report.pixels_by_class, &report.pixels),
    )?;

    let n_overlays = overlays.min(samples.len()).min(predicted_masks.len());
    if n_overlays > 0 {
        let dir = out_dir.join(OVERLAY_DIR);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..n_overlays {
            write_overlay(&dir.join(format!("{i:04}.png")), &samples[i], &predicted_masks[i])?;
        }
    }

    let summary = Summary {
        scenario: report.scenario.map(Scenario::tag),
        samples: report.confusion.total(),
        class_names: names,
        recognition_ratio: report.recognition_ratio(),
        recognition_ratio_pct: pct(report.recognition_ratio()),
        per_class_recognition: report.confusion.per_class_ratio(),
        pixel_accuracy: report.pixel_accuracy(),
        pixel_accuracy_pct: pct(report.pixel_accuracy()),
        target_pixel_accuracy: (v > 1).then(|| report.pixels.class_accuracy(1)).flatten(),
        background_pixel_accuracy: report.pixels.class_accuracy(0),
        overlays: n_overlays,
    };
    let path = out_dir.join(SUMMARY_JSON);
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Table of target/background/overall pixel accuracy per class.
pub fn write_baseline_csv(report: &BaselineReport, path: &Path) -> Result<()> {
    write_csv(
        path,
        &PIXEL_BY_CLASS_HEADER.map(String::from),
        &pixel_by_class_rows(&report.class_names, &report.per_class, &report.overall),
    )
}

fn outline(mask: &[u8], h: usize, w: usize) -> Vec<bool> {
    let on = |y: isize, x: isize| {
        y >= 0 && x >= 0 && y < h as isize && x < w as isize && mask[y as usize * w + x as usize] != 0
    };
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1))
        })
        .collect()
}

/// Three panels left to right: contrast-stretched input, ground-truth
/// outline in green, predicted outline in red.
pub fn render_overlay(sample: &Sample, predicted: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = (sample.height(), sample.width());
    if predicted.len() != h * w {
        return Err(Error::shape("overlay", &[h * w], &[predicted.len()]));
    }
    let data = sample.image.data();
    let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let gray: Vec<u8> = data.iter().map(|&v| (255.0 * (v - lo) / span).round() as u8).collect();
    let truth = outline(&sample.mask, h, w);
    let pred = outline(predicted, h, w);
    let width = 3 * w;
    let mut rgb = vec![0u8; h * width * 3];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let g = gray[i];
            for (panel, colour) in [(0, None), (1, truth[i].then_some([0, 255, 0])), (2, pred[i].then_some([255, 0, 0]))] {
                let o = (y * width + panel * w + x) * 3;
                rgb[o..o + 3].copy_from_slice(&colour.unwrap_or([g, g, g]));
            }
        }
    }
    Ok((h, width, rgb))
}

pub fn write_overlay(path: &Path, sample: &Sample, predicted: &[u8]) -> Result<()> {
    let (h, w, rgb) = render_overlay(sample, predicted)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let err = |e: png::EncodingError| Error::Png {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(&rgb).map_err(err)?;
    writer.finish().map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SampleMeta, Split};
    use crate::tensor::Tensor;

    fn samples() -> (Vec<Sample>, Vec<usize>, Vec<Vec<u8>>) {
        let mk = |label: usize, mask: Vec<u8>| {
            let meta = SampleMeta { depression_deg: 15.0, serial: "x-base".into(), split: Split::Test };
            Sample::new(Tensor::from_fn([1, 1, 2, 2], |_, _, y, x| (y + x) as f64 / 2.0), label, mask, meta).unwrap()
        };
        let s = vec![mk(0, vec![0, 1, 1, 0]), mk(1, vec![0, 0, 1, 1]), mk(2, vec![1, 1, 1, 1])];
        (s, vec![0, 2, 2], vec![vec![0, 1, 0, 0], vec![0, 0, 1, 1], vec![1, 1, 1, 1]])
    }

    fn names() -> Vec<String> {
        ["a", "b", "c"].map(String::from).to_vec()
    }

    #[test]
    fn report_files_are_written_and_deterministic() {
        let (s, l, m) = samples();
        let r = EvalReport::build(Some(Scenario::EocDepression), &names(), &s, &l, &m, 2).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        emit_report(&r, &s, &m, 2, d1.path()).unwrap();
        emit_report(&r, &s, &m, 2, d2.path()).unwrap();
        for f in [CONFUSION_CSV, CONFUSION_COUNTS_CSV, PIXEL_ACCURACY_CSV, PIXEL_BY_CLASS_CSV, SUMMARY_JSON] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap());
        }
        assert_eq!(fs::read_dir(d1.path().join(OVERLAY_DIR)).unwrap().count(), 2);
        let summary: serde_json::Value =
            serde_json::from_slice(&fs::read(d1.path().join(SUMMARY_JSON)).unwrap()).unwrap();
        assert_eq!(summary["scenario"], "EOC-D");
        assert!((summary["recognition_ratio"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let conf = fs::read_to_string(d1.path().join(CONFUSION_CSV)).unwrap();
        assert_eq!(conf.lines().nth(2).unwrap(), "b,0.00,0.00,100.00");
        let pix = fs::read_to_string(d1.path().join(PIXEL_ACCURACY_CSV)).unwrap();
        assert_eq!(pix.lines().nth(1).unwrap(), "background,100.00,0.00");
        assert_eq!(pix.lines().nth(2).unwrap(), "target,12.50,87.50");
    }

    #[test]
    fn empty_rows_are_blank() {
        let rows = percentage_rows(&names(), &[vec![1, 0, 0], vec![0, 0, 0], vec![0, 0, 3]]);
        assert_eq!(rows[1], vec!["b", "", "", ""]);
    }

    #[test]
    fn overlay_has_three_panels() {
        let (s, _, m) = samples();
        let (h, w, rgb) = render_overlay(&s[0], &m[0]).unwrap();
        assert_eq!((h, w, rgb.len()), (2, 6, 36));
        // Ground-truth outline pixel in the middle panel is green.
        assert_eq!(&rgb[(2 + 1) * 3..(2 + 1) * 3 + 3], &[0, 255, 0]);
    }

    #[test]
    fn unwritable_directory_errors() {
        let (s, l, m) = samples();
        let r = EvalReport::build(None, &names(), &s, &l, &m, 2).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(emit_report(&r, &s, &m, 0, &f.path().join("sub")).is_err());
    }
}
