//! Dataset directories: `images.nbt` (N x C x H x W), `labels.csv`,
//! `boxes.csv` and a `dataset.json` describing the generator.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nobias_core::dataset::{LabeledDataset, Region};
use nobias_core::Tensor;
use serde::{Deserialize, Serialize};

pub const IMAGES: &str = "images.nbt";
pub const LABELS: &str = "labels.csv";
pub const BOXES: &str = "boxes.csv";
pub const DESCRIPTION: &str = "dataset.json";

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    index: usize,
    label: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BoxRow {
    index: usize,
    row: usize,
    col: usize,
    height: usize,
    width: usize,
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

/// Encoded files of a dataset directory, in write order.
pub fn encode(data: &LabeledDataset, description: &impl Serialize) -> Result<Vec<(&'static str, Vec<u8>)>> {
    let labels = csv_bytes(data.labels.iter().enumerate().map(|(index, &label)| LabelRow { index, label }))?;
    let mut boxes = csv_bytes(data.regions.iter().enumerate().filter_map(|(index, r)| {
        r.map(|r| BoxRow { index, row: r.row, col: r.col, height: r.height, width: r.width })
    }))?;
    if boxes.is_empty() {
        boxes = b"index,row,col,height,width\n".to_vec();
    }
    Ok(vec![
        (IMAGES, data.stacked_images()?.to_nbt_bytes()),
        (LABELS, labels),
        (BOXES, boxes),
        (DESCRIPTION, (serde_json::to_string_pretty(description)? + "\n").into_bytes()),
    ])
}

pub fn input_files(dir: &Path) -> Vec<PathBuf> {
    [IMAGES, LABELS, BOXES].iter().map(|f| dir.join(f)).collect()
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize().collect::<Result<Vec<T>, _>>().with_context(|| format!("parsing {}", path.display()))
}

pub fn read(dir: &Path) -> Result<LabeledDataset> {
    let stacked = Tensor::load(dir.join(IMAGES)).with_context(|| format!("loading {}", dir.join(IMAGES).display()))?;
    let images = LabeledDataset::unstack(&stacked)?;
    let n = images.len();
    let label_rows: Vec<LabelRow> = read_csv(&dir.join(LABELS))?;
    if label_rows.len() != n || label_rows.iter().enumerate().any(|(i, r)| r.index != i) {
        bail!(nobias_core::Error::Format(format!("{LABELS} must list indices 0..{n} in order")));
    }
    let mut regions: Vec<Option<Region>> = vec![None; n];
    let box_path = dir.join(BOXES);
    if box_path.exists() {
        for b in read_csv::<BoxRow>(&box_path)? {
            if b.index >= n {
                bail!(nobias_core::Error::Format(format!("{BOXES} refers to image {} of {n}", b.index)));
            }
            regions[b.index] = Some(Region { row: b.row, col: b.col, height: b.height, width: b.width });
        }
    }
    Ok(LabeledDataset::new(images, label_rows.into_iter().map(|r| r.label).collect(), regions)?)
}
