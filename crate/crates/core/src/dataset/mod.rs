//! COCO-style dataset output, validation and a visual contact sheet.
//!
//! Layout under the output root: `images/NNNNNN.png`, `annotations.json`.
//! Image id is sample index + 1; annotation ids are dense in emission order.

mod rle;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use rle::{rle_decode, rle_encode, RleError, RleMask};

use crate::compose::ComposedSample;
use crate::manifest::{sha256_hex, RunManifest};
use crate::mask::BBox;
use crate::vocab::ClassVocabulary;

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("sample {index} duplicates the pixels of sample {first}")]
    DuplicateImage { first: u64, index: u64 },
    #[error("sample {got} arrived out of order, expected {expected}")]
    OutOfOrder { expected: u64, got: u64 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: [u32; 4],
    pub segmentation: RleMask,
    pub area: u64,
    pub iscrowd: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
}

/// Field order here is the serialized key order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoDataset {
    /// Canonical bytes: compact JSON in struct field order, integers only.
    pub fn to_canonical_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec(self).expect("dataset serializes");
        v.push(b'\n');
        v
    }
}

pub fn image_file_name(index: u64) -> String {
    format!("{index:06}.png")
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteSummary {
    pub images: u64,
    pub annotations: u64,
    /// Pixel digest per image, in image id order.
    pub image_digests: Vec<String>,
    pub annotations_digest: String,
}

impl WriteSummary {
    /// Digest over the annotations file and every image digest.
    pub fn combined_digest(&self) -> String {
        let mut text = self.annotations_digest.clone();
        for d in &self.image_digests {
            text.push('\n');
            text.push_str(d);
        }
        sha256_hex(text.as_bytes())
    }
}

/// Incremental writer: images go to disk as samples arrive, the JSON
/// document is assembled in memory and written by [`CocoWriter::finish`].
pub struct CocoWriter {
    root: PathBuf,
    dataset: CocoDataset,
    digests: HashMap<String, u64>,
    summary: WriteSummary,
}

impl CocoWriter {
    pub fn new(root: &Path, vocab: &ClassVocabulary) -> Result<Self, DatasetError> {
        let images = root.join(IMAGES_DIR);
        std::fs::create_dir_all(&images).map_err(io_err(&images))?;
        let categories = vocab
            .categories()
            .iter()
            .map(|c| CocoCategory {
                id: c.id,
                name: c.label.clone(),
            })
            .collect();
        Ok(Self {
            root: root.to_path_buf(),
            dataset: CocoDataset {
                categories,
                ..CocoDataset::default()
            },
            digests: HashMap::new(),
            summary: WriteSummary::default(),
        })
    }

    /// Samples must arrive in index order starting at 0.
    pub fn add(&mut self, sample: &ComposedSample) -> Result<(), DatasetError> {
        let expected = self.summary.images;
        if sample.index != expected {
            return Err(DatasetError::OutOfOrder {
                expected,
                got: sample.index,
            });
        }
        let digest = sample.digest();
        if let Some(&first) = self.digests.get(&digest) {
            return Err(DatasetError::DuplicateImage {
                first,
                index: sample.index,
            });
        }
        self.digests.insert(digest.clone(), sample.index);
        let file_name = image_file_name(sample.index);
        let path = self.root.join(IMAGES_DIR).join(&file_name);
        sample.image.save(&path).map_err(|e| DatasetError::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let image_id = sample.index + 1;
        let (width, height) = sample.image.dimensions();
        self.dataset.images.push(CocoImage {
            id: image_id,
            file_name: format!("{IMAGES_DIR}/{file_name}"),
            width,
            height,
        });
        for ann in &sample.annotations {
            let id = self.dataset.annotations.len() as u64 + 1;
            let (x, y, w, h) = ann.bbox;
            self.dataset.annotations.push(CocoAnnotation {
                id,
                image_id,
                category_id: ann.category_id,
                bbox: [x, y, w, h],
                segmentation: rle_encode(&ann.mask),
                area: ann.area,
                iscrowd: 0,
            });
        }
        self.summary.images += 1;
        self.summary.annotations += sample.annotations.len() as u64;
        self.summary.image_digests.push(digest);
        Ok(())
    }

    pub fn finish(mut self) -> Result<WriteSummary, DatasetError> {
        let bytes = self.dataset.to_canonical_json();
        let path = self.root.join(ANNOTATIONS_FILE);
        std::fs::write(&path, &bytes).map_err(io_err(&path))?;
        self.summary.annotations_digest = sha256_hex(&bytes);
        Ok(self.summary)
    }
}

/// Write every sample and record a "write" stage in `manifest`.
pub fn write_coco(
    samples: impl IntoIterator<Item = ComposedSample>,
    vocab: &ClassVocabulary,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<WriteSummary, DatasetError> {
    let mut writer = CocoWriter::new(out_dir, vocab)?;
    for s in samples {
        writer.add(&s)?;
    }
    let summary = writer.finish()?;
    record_write(manifest, &summary);
    Ok(summary)
}

pub fn record_write(manifest: &mut RunManifest, summary: &WriteSummary) {
    manifest.record(
        "write",
        [("images", summary.images), ("annotations", summary.annotations)],
        summary.combined_digest(),
    );
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Schema,
    DuplicateId,
    UnresolvedImage,
    UnresolvedCategory,
    MissingFile,
    Segmentation,
    EmptyMask,
    BboxNotTight,
    AreaMismatch,
    BboxOutOfBounds,
    Crowd,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub image_id: Option<u64>,
    pub annotation_id: Option<u64>,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub images: u64,
    pub annotations: u64,
    /// Annotation count per category name.
    pub per_category: BTreeMap<String, u64>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

/// Check a dataset directory: schema, id resolution, image files, and for
/// each annotation that the decoded RLE reproduces bbox and area exactly.
pub fn validate_dataset(root: &Path) -> Result<ValidationReport, DatasetError> {
    let path = root.join(ANNOTATIONS_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut report = ValidationReport::default();
    let dataset: CocoDataset = match serde_json::from_str(&text) {
        Ok(d) => d,
        Err(e) => {
            report.violations.push(Violation {
                kind: ViolationKind::Schema,
                image_id: None,
                annotation_id: None,
                message: e.to_string(),
            });
            return Ok(report);
        }
    };
    check_dataset(&dataset, Some(root), &mut report);
    Ok(report)
}

/// Validation of an in-memory document; `root` enables the image file check.
pub fn check_dataset(dataset: &CocoDataset, root: Option<&Path>, report: &mut ValidationReport) {
    let mut push = |kind, image_id, annotation_id, message: String| {
        report.violations.push(Violation {
            kind,
            image_id,
            annotation_id,
            message,
        })
    };
    let mut images = BTreeMap::new();
    for im in &dataset.images {
        if images.insert(im.id, im).is_some() {
            push(
                ViolationKind::DuplicateId,
                Some(im.id),
                None,
                format!("image id {} repeated", im.id),
            );
        }
        if let Some(root) = root {
            if !root.join(&im.file_name).is_file() {
                push(
                    ViolationKind::MissingFile,
                    Some(im.id),
                    None,
                    format!("{} not found", im.file_name),
                );
            }
        }
    }
    let mut categories = BTreeMap::new();
    for c in &dataset.categories {
        if categories.insert(c.id, c.name.clone()).is_some() {
            push(
                ViolationKind::DuplicateId,
                None,
                None,
                format!("category id {} repeated", c.id),
            );
        }
    }
    let mut ann_ids = BTreeSet::new();
    let mut per_category: BTreeMap<String, u64> = BTreeMap::new();
    for a in &dataset.annotations {
        let (iid, aid) = (Some(a.image_id), Some(a.id));
        if !ann_ids.insert(a.id) {
            push(
                ViolationKind::DuplicateId,
                iid,
                aid,
                format!("annotation id {} repeated", a.id),
            );
        }
        match categories.get(&a.category_id) {
            Some(name) => *per_category.entry(name.clone()).or_default() += 1,
            None => push(
                ViolationKind::UnresolvedCategory,
                iid,
                aid,
                format!("category {} not declared", a.category_id),
            ),
        }
        if a.iscrowd != 0 {
            push(ViolationKind::Crowd, iid, aid, "iscrowd must be 0".into());
        }
        let image = images.get(&a.image_id);
        if image.is_none() {
            push(
                ViolationKind::UnresolvedImage,
                iid,
                aid,
                format!("image {} not declared", a.image_id),
            );
        }
        if let Some(im) = image {
            if a.segmentation.size != [im.height, im.width] {
                push(
                    ViolationKind::Segmentation,
                    iid,
                    aid,
                    format!(
                        "segmentation size {:?} differs from image {}x{}",
                        a.segmentation.size, im.width, im.height
                    ),
                );
                continue;
            }
            let [x, y, w, h] = a.bbox;
            if x as u64 + w as u64 > im.width as u64 || y as u64 + h as u64 > im.height as u64 {
                push(
                    ViolationKind::BboxOutOfBounds,
                    iid,
                    aid,
                    format!("bbox {:?} exceeds {}x{}", a.bbox, im.width, im.height),
                );
            }
        }
        let mask = match rle_decode(&a.segmentation) {
            Ok(m) => m,
            Err(e) => {
                push(ViolationKind::Segmentation, iid, aid, e.to_string());
                continue;
            }
        };
        let Some(tight) = mask.bbox() else {
            push(ViolationKind::EmptyMask, iid, aid, "segmentation has no pixels".into());
            continue;
        };
        let stored: BBox = (a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]);
        if stored != tight {
            push(
                ViolationKind::BboxNotTight,
                iid,
                aid,
                format!("bbox {stored:?}, mask bound {tight:?}"),
            );
        }
        if mask.area() != a.area {
            push(
                ViolationKind::AreaMismatch,
                iid,
                aid,
                format!("area {}, mask popcount {}", a.area, mask.area()),
            );
        }
    }
    report.images = dataset.images.len() as u64;
    report.annotations = dataset.annotations.len() as u64;
    report.per_category = per_category;
}

pub fn load_dataset(root: &Path) -> Result<CocoDataset, DatasetError> {
    let path = root.join(ANNOTATIONS_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path,
        message: e.to_string(),
    })
}

const OUTLINE: [u8; 3] = [255, 0, 255];

fn outline(canvas: &mut RgbImage, ox: u32, oy: u32, (x, y, w, h): BBox) {
    let (cw, ch) = canvas.dimensions();
    let mut put = |px: u32, py: u32| {
        if px < cw && py < ch {
            canvas.put_pixel(px, py, Rgb(OUTLINE));
        }
    };
    if w == 0 || h == 0 {
        return;
    }
    for dx in 0..w {
        put(ox + x + dx, oy + y);
        put(ox + x + dx, oy + y + h - 1);
    }
    for dy in 0..h {
        put(ox + x, oy + y + dy);
        put(ox + x + w - 1, oy + y + dy);
    }
}

/// Montage of `cols x rows` cells, each holding one image with its boxes
/// outlined. Extra images are ignored with a warning.
pub fn contact_sheet_from(items: &[(RgbImage, Vec<BBox>)], cols: u32, rows: u32) -> RgbImage {
    let cells = (cols * rows) as usize;
    if items.len() > cells {
        warn!("contact sheet holds {cells} images; {} ignored", items.len() - cells);
    }
    let cw = items.iter().map(|i| i.0.width()).max().unwrap_or(1);
    let ch = items.iter().map(|i| i.0.height()).max().unwrap_or(1);
    let mut sheet = RgbImage::new(cw * cols, ch * rows);
    for (n, (img, boxes)) in items.iter().take(cells).enumerate() {
        let (ox, oy) = ((n as u32 % cols) * cw, (n as u32 / cols) * ch);
        image::imageops::replace(&mut sheet, img, ox as i64, oy as i64);
        for b in boxes {
            outline(&mut sheet, ox, oy, *b);
        }
    }
    sheet
}

/// Contact sheet of the first `cols * rows` images of a written dataset.
pub fn contact_sheet(root: &Path, cols: u32, rows: u32, out: &Path) -> Result<(), DatasetError> {
    let dataset = load_dataset(root)?;
    let mut boxes: BTreeMap<u64, Vec<BBox>> = BTreeMap::new();
    for a in &dataset.annotations {
        boxes
            .entry(a.image_id)
            .or_default()
            .push((a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]));
    }
    if dataset.images.len() > (cols * rows) as usize {
        warn!(
            "dataset has {} images; contact sheet shows the first {}",
            dataset.images.len(),
            cols * rows
        );
    }
    let items = dataset
        .images
        .iter()
        .take((cols * rows) as usize)
        .map(|im| {
            let p = root.join(&im.file_name);
            let pixels = image::open(&p)
                .map_err(|e| DatasetError::Image {
                    path: p.clone(),
                    message: e.to_string(),
                })?
                .to_rgb8();
            Ok((pixels, boxes.remove(&im.id).unwrap_or_default()))
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    contact_sheet_from(&items, cols, rows)
        .save(out)
        .map_err(|e| DatasetError::Image {
            path: out.to_path_buf(),
            message: e.to_string(),
        })
}
