//! COCO-style annotation files: `images`, `annotations` and `categories` arrays,
//! boxes as `[x_top_left, y_top_left, width, height]` in pixels.

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::Scene;
use crate::boxes::{BBox, Corners};
use crate::error::{Error, Result};
use crate::io::atomic_write;

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: i64,
    width: f64,
    height: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file_name: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<i64>,
    image_id: i64,
    bbox: [f64; 4],
    #[serde(default)]
    category_id: i64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: i64,
    #[serde(default)]
    name: String,
}

pub fn load_annotations(path: &Path) -> Result<Vec<Scene>> {
    let text = std::fs::read_to_string(path)?;
    parse_annotations(&text).map_err(|e| match e {
        Error::Parse { detail, .. } => Error::parse(path, detail),
        other => other,
    })
}

/// Parse annotation JSON into scenes, one per image entry, in file order.
///
/// Annotations naming an unknown image, with non-positive size, or hanging
/// more than half an image outside the frame are skipped with a warning.
pub fn parse_annotations(text: &str) -> Result<Vec<Scene>> {
    let file: CocoFile = serde_json::from_str(text).map_err(|e| Error::parse("<annotations>", e))?;

    let mut scenes: Vec<Scene> = Vec::with_capacity(file.images.len());
    let mut by_id: HashMap<i64, usize> = HashMap::with_capacity(file.images.len());
    for img in &file.images {
        if !(img.width > 0.0 && img.height > 0.0) {
            return Err(Error::parse(
                "<annotations>",
                format!("image {} has non-positive size {}x{}", img.id, img.width, img.height),
            ));
        }
        if by_id.insert(img.id, scenes.len()).is_some() {
            return Err(Error::parse("<annotations>", format!("duplicate image id {}", img.id)));
        }
        let mut s = Scene::new(img.id.to_string(), img.width, img.height, Vec::new());
        s.categories = Some(Vec::new());
        scenes.push(s);
    }

    for (k, ann) in file.annotations.iter().enumerate() {
        let Some(&idx) = by_id.get(&ann.image_id) else {
            warn!("annotation #{k}: unknown image id {}, skipped", ann.image_id);
            continue;
        };
        let [x, y, w, h] = ann.bbox;
        let b = match BBox::from_corners(Corners {
            xmin: x,
            ymin: y,
            xmax: x + w,
            ymax: y + h,
        }) {
            Ok(b) if w > 0.0 && h > 0.0 => b,
            _ => {
                warn!("annotation #{k}: non-positive box {:?}, skipped", ann.bbox);
                continue;
            }
        };
        let scene = &mut scenes[idx];
        if !Scene::within_slack(&b, scene.width, scene.height) {
            warn!("annotation #{k}: box {:?} outside image {}, skipped", ann.bbox, scene.id);
            continue;
        }
        scene.gts.push(b);
        scene.categories.as_mut().unwrap().push(ann.category_id);
    }

    let unusable = scenes.iter().filter(|s| !s.is_trainable()).count();
    if unusable > 0 {
        warn!("{unusable} image(s) have no usable annotations");
    }
    Ok(scenes)
}

/// Write scenes back out in the same structure. Image ids must be integers.
pub fn save_annotations(scenes: &[Scene], path: &Path) -> Result<()> {
    let mut images = Vec::with_capacity(scenes.len());
    let mut annotations = Vec::new();
    let mut seen_categories = std::collections::BTreeSet::new();
    for s in scenes {
        let id: i64 = s
            .id
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("scene id `{}` is not an integer", s.id)))?;
        images.push(CocoImage {
            id,
            width: s.width,
            height: s.height,
            file_name: None,
        });
        for (k, g) in s.gts.iter().enumerate() {
            let c = g.to_corners();
            let category_id = s.categories.as_ref().and_then(|cs| cs.get(k).copied()).unwrap_or(1);
            seen_categories.insert(category_id);
            annotations.push(CocoAnnotation {
                id: Some(annotations.len() as i64 + 1),
                image_id: id,
                bbox: [c.xmin, c.ymin, c.xmax - c.xmin, c.ymax - c.ymin],
                category_id,
            });
        }
    }
    let categories = seen_categories
        .into_iter()
        .map(|id| CocoCategory {
            id,
            name: format!("category-{id}"),
        })
        .collect();
    let file = CocoFile {
        images,
        annotations,
        categories,
    };
    atomic_write(path, |w| {
        serde_json::to_writer_pretty(&mut *w, &file).map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file() {
        let text = r#"{
            "images": [{"id": 1, "width": 100, "height": 80}],
            "annotations": [{"image_id": 1, "bbox": [10, 20, 30, 40], "category_id": 3}],
            "categories": [{"id": 3, "name": "thing"}]
        }"#;
        let scenes = parse_annotations(text).unwrap();
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].id, "1");
        assert_eq!(scenes[0].gts, vec![BBox::new(25.0, 40.0, 30.0, 40.0).unwrap()]);
        assert_eq!(scenes[0].categories, Some(vec![3]));
    }

    #[test]
    fn empty_annotations_give_untrainable_scenes() {
        let scenes = parse_annotations(r#"{"images": [{"id": 4, "width": 10, "height": 10}], "annotations": []}"#).unwrap();
        assert_eq!(scenes.len(), 1);
        assert!(!scenes[0].is_trainable());
    }

    #[test]
    fn bad_annotations_are_skipped() {
        let text = r#"{
            "images": [{"id": 1, "width": 100, "height": 100}],
            "annotations": [
                {"image_id": 9, "bbox": [0, 0, 5, 5], "category_id": 1},
                {"image_id": 1, "bbox": [0, 0, 0, 5], "category_id": 1},
                {"image_id": 1, "bbox": [0, 0, 5, -1], "category_id": 1},
                {"image_id": 1, "bbox": [500, 0, 5, 5], "category_id": 1},
                {"image_id": 1, "bbox": [1, 1, 5, 5], "category_id": 2}
            ]
        }"#;
        let scenes = parse_annotations(text).unwrap();
        assert_eq!(scenes[0].gts.len(), 1);
        assert_eq!(scenes[0].categories, Some(vec![2]));
    }

    #[test]
    fn truncated_file_fails_with_position() {
        let text = r#"{"images": [{"id": 1, "width": 100, "height": 100}], "annotations": [{"image_id": 1, "bb"#;
        match parse_annotations(text) {
            Err(Error::Parse { detail, .. }) => assert!(detail.contains("line 1"), "{detail}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
