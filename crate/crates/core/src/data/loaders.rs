//! Readers for fully annotated multi-label datasets.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::labels::{DatasetIndex, ImageRef, LabelVector, Sample};
use super::synthetic::{synthetic_index, SyntheticSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    CocoJson,
    VocXml,
    SyntheticManifest,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coco_json" => Ok(Self::CocoJson),
            "voc_xml" => Ok(Self::VocXml),
            "synthetic_manifest" => Ok(Self::SyntheticManifest),
            other => Err(Error::invalid(format!("unknown dataset format {other:?}"))),
        }
    }
}

pub const VOC_CATEGORIES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadOptions {
    /// Category list the dataset must match exactly (order included).
    #[serde(default)]
    pub categories: Option<Vec<String>>,
    /// Directory image file names are resolved against.
    #[serde(default)]
    pub image_root: Option<PathBuf>,
}

pub fn load_dataset(path: &Path, format: DatasetFormat, opts: &LoadOptions) -> Result<DatasetIndex> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset path does not exist"),
        ));
    }
    let ds = match format {
        DatasetFormat::CocoJson => load_coco(path, opts)?,
        DatasetFormat::VocXml => load_voc(path, opts)?,
        DatasetFormat::SyntheticManifest => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let spec: SyntheticSpec =
                serde_json::from_str(&text).map_err(|e| Error::Annotation {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })?;
            synthetic_index(&spec)?
        }
    };
    if let Some(expected) = &opts.categories {
        ds.check_categories(expected)?;
    }
    Ok(ds)
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

fn load_coco(path: &Path, opts: &LoadOptions) -> Result<DatasetIndex> {
    let malformed = |reason: String| Error::Annotation {
        path: path.to_path_buf(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Err(malformed("empty annotation file".into()));
    }
    let coco: CocoFile = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if coco.images.is_empty() {
        return Err(malformed("annotation file lists no images".into()));
    }
    let mut categories = coco.categories;
    categories.sort_by_key(|c| c.id);
    let column: HashMap<u64, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id, i))
        .collect();
    let row: HashMap<u64, usize> = coco
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| (img.id, i))
        .collect();
    let mut present = vec![vec![false; categories.len()]; coco.images.len()];
    for ann in &coco.annotations {
        let r = *row
            .get(&ann.image_id)
            .ok_or_else(|| malformed(format!("annotation for unknown image {}", ann.image_id)))?;
        let c = *column.get(&ann.category_id).ok_or_else(|| {
            malformed(format!("annotation uses unknown category {}", ann.category_id))
        })?;
        present[r][c] = true;
    }
    let root = opts
        .image_root
        .clone()
        .unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).to_path_buf());
    let samples = coco
        .images
        .iter()
        .zip(present)
        .map(|(img, p)| Sample {
            image: ImageRef::Path(root.join(&img.file_name)),
            labels: LabelVector::from_presence(&p),
        })
        .collect();
    DatasetIndex::new(samples, categories.into_iter().map(|c| c.name).collect())
}

fn load_voc(path: &Path, opts: &LoadOptions) -> Result<DatasetIndex> {
    let ann_dir = if path.join("Annotations").is_dir() {
        path.join("Annotations")
    } else {
        path.to_path_buf()
    };
    let voc_root = ann_dir.parent().unwrap_or(Path::new(".")).to_path_buf();
    let image_dir = opts
        .image_root
        .clone()
        .unwrap_or_else(|| voc_root.join("JPEGImages"));
    let names: Vec<String> = match &opts.categories {
        Some(c) => c.clone(),
        None => VOC_CATEGORIES.iter().map(|s| s.to_string()).collect(),
    };
    let column: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    let mut files: Vec<PathBuf> = std::fs::read_dir(&ann_dir)
        .map_err(|e| Error::io(&ann_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xml"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Annotation {
            path: ann_dir,
            reason: "no XML annotation files".into(),
        });
    }

    let mut samples = Vec::with_capacity(files.len());
    for file in files {
        let malformed = |reason: String| Error::Annotation {
            path: file.clone(),
            reason,
        };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        if text.trim().is_empty() {
            return Err(malformed("empty annotation file".into()));
        }
        let doc = roxmltree::Document::parse(&text).map_err(|e| malformed(e.to_string()))?;
        let root = doc.root_element();
        let filename = root
            .children()
            .find(|n| n.has_tag_name("filename"))
            .and_then(|n| n.text())
            .map(|s| s.trim().to_string())
            .ok_or_else(|| malformed("missing <filename>".into()))?;
        let mut present = vec![false; names.len()];
        for obj in root.children().filter(|n| n.has_tag_name("object")) {
            let name = obj
                .children()
                .find(|n| n.has_tag_name("name"))
                .and_then(|n| n.text())
                .map(str::trim)
                .ok_or_else(|| malformed("object without <name>".into()))?;
            let c = *column.get(name).ok_or_else(|| {
                Error::CategoryMismatch(format!(
                    "{} names category {name:?}, not in the configured list",
                    file.display()
                ))
            })?;
            present[c] = true;
        }
        samples.push(Sample {
            image: ImageRef::Path(image_dir.join(filename)),
            labels: LabelVector::from_presence(&present),
        });
    }
    DatasetIndex::new(samples, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn voc_xml(filename: &str, objects: &[&str]) -> String {
        let objs: String = objects
            .iter()
            .map(|o| format!("<object><name>{o}</name><difficult>0</difficult></object>"))
            .collect();
        format!("<annotation><folder>VOC2007</folder><filename>{filename}</filename>{objs}</annotation>")
    }

    #[test]
    fn voc_directory_with_twenty_categories() {
        let dir = tempfile::tempdir().unwrap();
        let ann = dir.path().join("Annotations");
        std::fs::create_dir(&ann).unwrap();
        std::fs::write(ann.join("000001.xml"), voc_xml("000001.jpg", &["dog"])).unwrap();
        std::fs::write(ann.join("000002.xml"), voc_xml("000002.jpg", &["person", "dog", "person"]))
            .unwrap();
        let ds = load_dataset(dir.path(), DatasetFormat::VocXml, &LoadOptions::default()).unwrap();
        assert_eq!(ds.num_categories(), 20);
        assert_eq!(ds.len(), 2);
        let first = &ds.samples()[0].labels;
        assert_eq!(first.positive_count(), 1);
        assert_eq!(first.values().iter().filter(|&&v| v == -1).count(), 19);
        assert_eq!(first.get(11), 1);
        assert_eq!(ds.samples()[1].labels.positive_count(), 2);
        assert_eq!(
            ds.samples()[0].image,
            ImageRef::Path(dir.path().join("JPEGImages/000001.jpg"))
        );
    }

    #[test]
    fn voc_unknown_category_and_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.xml"), voc_xml("a.jpg", &["dragon"])).unwrap();
        let err = load_dataset(dir.path(), DatasetFormat::VocXml, &LoadOptions::default());
        assert!(matches!(err, Err(Error::CategoryMismatch(_))));

        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.xml"), "").unwrap();
        let err = load_dataset(dir.path(), DatasetFormat::VocXml, &LoadOptions::default());
        assert!(matches!(err, Err(Error::Annotation { .. })));
    }

    #[test]
    fn coco_presence_from_instances() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("instances.json");
        let json = r#"{
            "images": [{"id": 10, "file_name": "a.jpg", "width": 4}, {"id": 11, "file_name": "b.jpg"}],
            "annotations": [
                {"id": 1, "image_id": 10, "category_id": 3, "bbox": [0, 0, 1, 1]},
                {"id": 2, "image_id": 10, "category_id": 3},
                {"id": 3, "image_id": 11, "category_id": 1}
            ],
            "categories": [{"id": 3, "name": "cat"}, {"id": 1, "name": "person"}]
        }"#;
        std::fs::write(&path, json).unwrap();
        let ds = load_dataset(&path, DatasetFormat::CocoJson, &LoadOptions::default()).unwrap();
        assert_eq!(ds.category_names(), &["person".to_string(), "cat".to_string()]);
        assert_eq!(ds.samples()[0].labels.values(), &[-1, 1]);
        assert_eq!(ds.samples()[1].labels.values(), &[1, -1]);

        let opts = LoadOptions {
            categories: Some(vec!["cat".into(), "person".into()]),
            image_root: None,
        };
        assert!(matches!(
            load_dataset(&path, DatasetFormat::CocoJson, &opts),
            Err(Error::CategoryMismatch(_))
        ));
    }

    #[test]
    fn coco_empty_or_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        std::fs::write(&path, "").unwrap();
        assert!(load_dataset(&path, DatasetFormat::CocoJson, &LoadOptions::default()).is_err());
        std::fs::write(&path, r#"{"images": [], "categories": []}"#).unwrap();
        assert!(load_dataset(&path, DatasetFormat::CocoJson, &LoadOptions::default()).is_err());
        let missing = dir.path().join("nope.json");
        assert!(matches!(
            load_dataset(&missing, DatasetFormat::CocoJson, &LoadOptions::default()),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn synthetic_manifest_regenerates_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.json");
        std::fs::write(&path, r#"{"num_images": 5, "num_categories": 3, "seed": 2}"#).unwrap();
        let ds = load_dataset(&path, DatasetFormat::SyntheticManifest, &LoadOptions::default())
            .unwrap();
        assert_eq!(ds, synthetic_index(&SyntheticSpec::new(5, 3, 2)).unwrap());
    }
}
