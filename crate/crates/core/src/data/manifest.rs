//! On-disk datasets: `manifest.csv`, optional `classes.txt`, 16-bit
//! grayscale image PNGs under `images/` and 8-bit mask PNGs under `masks/`.
//! Mask pixels hold class indices directly (0 background, 1 target).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, SampleMeta, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CLASSES_FILE: &str = "classes.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub mask_path: String,
    pub class: String,
    pub depression: f64,
    pub serial: String,
    pub split: String,
}

fn png_err(path: &Path, reason: impl ToString) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Decodes a single-channel PNG into `(height, width, bit_depth, samples)`.
pub fn decode_gray_png(bytes: &[u8], path: &Path) -> Result<(usize, usize, u8, Vec<u16>)> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(png_err(path, format!("expected grayscale, found {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let depth = info.bit_depth;
    let values = match depth {
        png::BitDepth::Eight => (0..h)
            .flat_map(|y| buf[y * info.line_size..y * info.line_size + w].iter().map(|&b| b as u16))
            .collect(),
        png::BitDepth::Sixteen => (0..h)
            .flat_map(|y| {
                let row = &buf[y * info.line_size..y * info.line_size + 2 * w];
                row.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]))
            })
            .collect(),
        other => return Err(png_err(path, format!("unsupported bit depth {other:?}"))),
    };
    Ok((h, w, depth as u8, values))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Image in `[0,1]` as a `(1,1,h,w)` tensor; 8- and 16-bit inputs accepted.
pub fn read_png_gray16(path: &Path) -> Result<Tensor> {
    let (h, w, depth, values) = decode_gray_png(&read_file(path)?, path)?;
    let scale = if depth == 16 { 65535.0 } else { 255.0 };
    Tensor::from_vec([1, 1, h, w], values.into_iter().map(|v| v as f64 / scale).collect())
}

/// Mask as `(height, width, values)`; must be 8-bit.
pub fn read_png_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w, depth, values) = decode_gray_png(&read_file(path)?, path)?;
    if depth != 8 {
        return Err(png_err(path, "mask must be 8-bit"));
    }
    Ok((h, w, values.into_iter().map(|v| v as u8).collect()))
}

fn write_png(path: &Path, w: usize, h: usize, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Writes a `(1,1,h,w)` tensor as 16-bit grayscale, rounding to the nearest level.
pub fn write_png_gray16(path: &Path, image: &Tensor) -> Result<()> {
    let [n, c, h, w] = image.shape();
    if n != 1 || c != 1 {
        return Err(Error::shape("write_png_gray16", &[1, 1, h, w], &image.shape()));
    }
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
        .collect();
    write_png(path, w, h, png::BitDepth::Sixteen, &bytes)
}

pub fn write_png_mask(path: &Path, h: usize, w: usize, mask: &[u8]) -> Result<()> {
    if mask.len() != h * w {
        return Err(Error::shape("write_png_mask", &[h * w], &[mask.len()]));
    }
    write_png(path, w, h, png::BitDepth::Eight, mask)
}

/// Parses manifest rows without touching the referenced files.
pub fn parse_manifest<R: Read>(reader: R) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<ManifestRow>().enumerate() {
        let row = rec.map_err(|e| Error::Manifest {
            row: i + 1,
            reason: e.to_string(),
        })?;
        if !row.depression.is_finite() {
            return Err(Error::Manifest {
                row: i + 1,
                reason: "depression is not finite".into(),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

fn read_classes(path: &Path) -> Result<Option<Vec<String>>> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(Some(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Loads a dataset from a manifest file or a directory containing one.
/// Paths in the manifest are relative to its directory. Class indices follow
/// `classes.txt` when present, otherwise the sorted unique class names.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let manifest = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let root = manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let rows = parse_manifest(BufReader::new(
        File::open(&manifest).map_err(|e| Error::io(&manifest, e))?,
    ))?;
    let class_names = match read_classes(&root.join(CLASSES_FILE))? {
        Some(names) => names,
        None => {
            let mut names: Vec<String> = rows.iter().map(|r| r.class.clone()).collect();
            names.sort();
            names.dedup();
            names
        }
    };

    let mut samples = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let fail = |reason: String| Error::Manifest { row: i + 1, reason };
        let label = class_names
            .iter()
            .position(|c| c == &row.class)
            .ok_or_else(|| fail(format!("unknown class '{}'", row.class)))?;
        if row.path.is_empty() {
            return Err(fail("missing image path".into()));
        }
        if row.mask_path.is_empty() {
            return Err(fail("missing mask path".into()));
        }
        let split: Split = row.split.parse().map_err(|e: Error| fail(e.to_string()))?;
        let image = read_png_gray16(&root.join(&row.path)).map_err(|e| fail(e.to_string()))?;
        let (mh, mw, mask) = read_png_mask(&root.join(&row.mask_path)).map_err(|e| fail(e.to_string()))?;
        if [mh, mw] != [image.h(), image.w()] {
            return Err(fail(format!(
                "mask is {mh}x{mw} but image is {}x{}",
                image.h(),
                image.w()
            )));
        }
        let meta = SampleMeta {
            depression_deg: row.depression,
            serial: row.serial.clone(),
            split,
        };
        samples.push(Sample::new(image, label, mask, meta).map_err(|e| fail(e.to_string()))?);
    }
    Ok(Dataset::new(class_names, samples))
}

/// Writes `images/`, `masks/`, `manifest.csv` and `classes.txt` under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let classes_path = dir.join(CLASSES_FILE);
    let mut classes = dataset.class_names.join("\n");
    classes.push('\n');
    fs::write(&classes_path, classes).map_err(|e| Error::io(&classes_path, e))?;

    let manifest = dir.join(MANIFEST_FILE);
    let mut wtr = csv::Writer::from_path(&manifest)?;
    for (i, s) in dataset.samples.iter().enumerate() {
        let image = format!("images/{i:06}.png");
        let mask = format!("masks/{i:06}.png");
        write_png_gray16(&dir.join(&image), &s.image)?;
        write_png_mask(&dir.join(&mask), s.height(), s.width(), &s.mask)?;
        let class = dataset
            .class_names
            .get(s.label)
            .ok_or(Error::LabelOutOfRange {
                label: s.label,
                classes: dataset.num_classes(),
            })?
            .clone();
        wtr.serialize(ManifestRow {
            path: image,
            mask_path: mask,
            class,
            depression: s.meta.depression_deg,
            serial: s.meta.serial.clone(),
            split: s.meta.split.as_str().into(),
        })?;
    }
    wtr.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(())
}
