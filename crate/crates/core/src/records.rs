//! Comma-separated box files.
//!
//! Proposal files carry `image_id,xmin,ymin,xmax,ymax,score` and box files
//! carry `image_id,xmin,ymin,xmax,ymax`, each with that header line. Within an
//! image, proposals appear in rank order. Floats are written in shortest
//! round-trip form, so reading a file back yields the exact values written.

use std::path::Path;

use crate::boxes::{BBox, Corners};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::proposals::Proposal;

fn parse(path: &Path, detail: impl ToString) -> Error {
    Error::parse(path, detail)
}

pub const PROPOSAL_HEADER: [&str; 6] = ["image_id", "xmin", "ymin", "xmax", "ymax", "score"];
pub const BOX_HEADER: [&str; 5] = ["image_id", "xmin", "ymin", "xmax", "ymax"];

/// Boxes or proposals of one image, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecords<T> {
    pub image_id: String,
    pub items: Vec<T>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match line {
        Some(l) => parse(path, format!("line {l}: {e}")),
        None => parse(path, e.to_string()),
    }
}

fn write_rows<T>(path: &Path, header: &[&str], groups: &[ImageRecords<T>], row: impl Fn(&T) -> Vec<f64>) -> Result<()> {
    atomic_write(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(header).map_err(|e| Error::Format(e.to_string()))?;
        for g in groups {
            for item in &g.items {
                let mut fields = vec![g.image_id.clone()];
                fields.extend(row(item).into_iter().map(|v| v.to_string()));
                out.write_record(&fields).map_err(|e| Error::Format(e.to_string()))?;
            }
        }
        out.flush()?;
        Ok(())
    })
}

fn read_rows<T>(path: &Path, header: &[&str], item: impl Fn(&[f64]) -> Result<T>) -> Result<Vec<ImageRecords<T>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))),
            _ => csv_err(path, e),
        })?;
    let found = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(parse(path, format!("line 1: header {found:?}, expected {}", header.join(","))));
    }
    let mut groups: Vec<ImageRecords<T>> = vec![];
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(parse(path, format!("line {line}: {} fields, expected {}", rec.len(), header.len())));
        }
        let values = rec
            .iter()
            .skip(1)
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse(path, format!("line {line}: {e}")))?;
        let value = item(&values).map_err(|e| parse(path, format!("line {line}: {e}")))?;
        let id = &rec[0];
        match groups.last_mut() {
            Some(g) if g.image_id == id => g.items.push(value),
            _ => {
                if groups.iter().any(|g| g.image_id == id) {
                    return Err(parse(path, format!("line {line}: rows for image {id} are not contiguous")));
                }
                groups.push(ImageRecords {
                    image_id: id.to_string(),
                    items: vec![value],
                });
            }
        }
    }
    Ok(groups)
}

fn corners_of(v: &[f64]) -> Result<BBox> {
    BBox::from_corners(Corners {
        xmin: v[0],
        ymin: v[1],
        xmax: v[2],
        ymax: v[3],
    })
}

fn corner_row(b: &BBox) -> Vec<f64> {
    let c = b.to_corners();
    vec![c.xmin, c.ymin, c.xmax, c.ymax]
}

pub fn write_proposals(path: &Path, groups: &[ImageRecords<Proposal>]) -> Result<()> {
    write_rows(path, &PROPOSAL_HEADER, groups, |p| {
        let mut r = corner_row(&p.bbox);
        r.push(p.score);
        r
    })
}

pub fn read_proposals(path: &Path) -> Result<Vec<ImageRecords<Proposal>>> {
    read_rows(path, &PROPOSAL_HEADER, |v| {
        if !v[4].is_finite() {
            return Err(Error::NumericRange(format!("score {}", v[4])));
        }
        Ok(Proposal {
            bbox: corners_of(v)?,
            score: v[4],
        })
    })
}

pub fn write_boxes(path: &Path, groups: &[ImageRecords<BBox>]) -> Result<()> {
    write_rows(path, &BOX_HEADER, groups, corner_row)
}

pub fn read_boxes(path: &Path) -> Result<Vec<ImageRecords<BBox>>> {
    read_rows(path, &BOX_HEADER, corners_of)
}
