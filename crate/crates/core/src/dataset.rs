//! Manifest CSV ingestion and in-memory examples.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{extract, read_wav, LogMelFeature};
use crate::error::{Error, Result};
use crate::ranking::{read_pseudo_labels, PseudoLabelVector};

pub const MANIFEST_HEADER: [&str; 5] = ["clip_id", "wav_path", "scene_label", "split", "pseudo_label_ref"];

/// Scene names of the ten-class urban acoustic scenes task.
pub const DEFAULT_SCENES: [&str; 10] = [
    "airport",
    "bus",
    "metro",
    "metro_station",
    "park",
    "public_square",
    "shopping_mall",
    "street_pedestrian",
    "street_traffic",
    "tram",
];

pub fn default_scenes() -> Vec<String> {
    DEFAULT_SCENES.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}; expected train, val or test"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub clip_id: String,
    pub wav_path: String,
    pub scene_label: String,
    pub split: Split,
    pub pseudo_label_ref: Option<String>,
    /// 1-based line in the manifest file.
    pub line: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Relative paths in the rows resolve against this directory.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn load(path: &Path, scenes: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root, scenes)
    }

    pub fn parse(text: &str, root: PathBuf, scenes: &[String]) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| Error::Format(format!("manifest line 1: {e}")))?;
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Format(format!("manifest line 1: header must be {}", MANIFEST_HEADER.join(","))));
        }
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Format(format!("manifest: {e}")))?;
            let line = record.position().map_or(0, |p| p.line());
            let err = |msg: String| Error::Format(format!("manifest line {line}: {msg}"));
            let field = |i: usize| record.get(i).unwrap_or("").to_string();
            let clip_id = field(0);
            if clip_id.is_empty() {
                return Err(err("empty clip_id".into()));
            }
            if !seen.insert(clip_id.clone()) {
                return Err(err(format!("duplicate clip_id {clip_id}")));
            }
            let wav_path = field(1);
            if wav_path.is_empty() {
                return Err(err(format!("clip {clip_id} has no wav_path")));
            }
            let scene_label = field(2);
            if !scenes.contains(&scene_label) {
                return Err(err(format!("clip {clip_id} has unknown scene {scene_label:?}")));
            }
            let split: Split = field(3).parse().map_err(|e: Error| err(format!("clip {clip_id}: {e}")))?;
            let pseudo = field(4);
            let pseudo_label_ref = (!pseudo.is_empty()).then_some(pseudo);
            if split == Split::Train && pseudo_label_ref.is_none() {
                return Err(err(format!("train clip {clip_id} has no pseudo_label_ref")));
            }
            rows.push(ManifestRow { clip_id, wav_path, scene_label, split, pseudo_label_ref, line });
        }
        Ok(DatasetManifest { root, rows })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER).expect("in-memory write");
        for r in &self.rows {
            let split = r.split.to_string();
            let pseudo = r.pseudo_label_ref.as_deref().unwrap_or("");
            w.write_record([r.clip_id.as_str(), &r.wav_path, &r.scene_label, &split, pseudo]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }
}

/// One decoded clip with its supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub clip_id: String,
    pub split: Split,
    pub scene: usize,
    pub features: LogMelFeature,
    pub labels: Option<PseudoLabelVector>,
}

/// Decodes the rows of `splits`, extracting features and looking up pseudo
/// labels by clip id in the referenced files.
pub fn load_examples(manifest: &DatasetManifest, scenes: &[String], splits: &[Split]) -> Result<Vec<Example>> {
    let mut label_files: HashMap<PathBuf, HashMap<String, PseudoLabelVector>> = HashMap::new();
    let mut out = Vec::new();
    for row in manifest.rows.iter().filter(|r| splits.contains(&r.split)) {
        let ctx = |e: Error| Error::Format(format!("manifest line {} (clip {}): {e}", row.line, row.clip_id));
        let clip = read_wav(&manifest.resolve(&row.wav_path)).map_err(ctx)?;
        let features = extract(&clip).map_err(ctx)?;
        let labels = match &row.pseudo_label_ref {
            Some(rel) => {
                let path = manifest.resolve(rel);
                if !label_files.contains_key(&path) {
                    let map = read_pseudo_labels(&path).map_err(ctx)?.into_iter().map(|l| (l.clip_id.clone(), l)).collect();
                    label_files.insert(path.clone(), map);
                }
                let found = label_files[&path].get(&row.clip_id).cloned();
                Some(found.ok_or_else(|| ctx(Error::Format(format!("no pseudo label for this clip in {rel}"))))?)
            }
            None => None,
        };
        let scene = scenes.iter().position(|s| *s == row.scene_label).expect("validated on parse");
        out.push(Example { clip_id: row.clip_id.clone(), split: row.split, scene, features, labels });
    }
    Ok(out)
}
