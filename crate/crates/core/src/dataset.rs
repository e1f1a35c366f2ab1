//! JSONL dataset format.
//!
//! One example per line:
//!
//! ```text
//! {"src": ["two","boys"], "tgt": ["zwei","jungen"],
//!  "objects": [{"span": [0, 2], "feat": [/* 2048 floats */]}]}
//! ```
//!
//! An object may instead carry `"feat_ref": {"file": "feats.bin", "offset": K}`,
//! pointing at the `K`-th little-endian `f32` vector of a sidecar file
//! (resolved relative to the dataset file). A missing `objects` key means no
//! visual nodes.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph_with, EdgeMode, Example, PhraseGrounding, FEATURE_DIM};
use crate::vocab::{Vocabulary, BOS, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub src: Vec<String>,
    #[serde(default)]
    pub tgt: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects: Option<Vec<ObjectRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub span: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feat: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feat_ref: Option<FeatRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatRef {
    pub file: String,
    /// Index of the vector within the sidecar, in units of `feature_dim` floats.
    pub offset: usize,
}

/// A parsed line with its object features resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRecord {
    pub line: usize,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub groundings: Vec<PhraseGrounding>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetOptions {
    pub feature_dim: usize,
    pub edge_mode: EdgeMode,
    /// Give object-free sentences a single zero-vector visual node.
    pub zero_object: bool,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            feature_dim: FEATURE_DIM,
            edge_mode: EdgeMode::Grounded,
            zero_object: false,
        }
    }
}

#[derive(Default)]
struct SidecarCache {
    files: HashMap<PathBuf, Vec<f32>>,
}

impl SidecarCache {
    fn vector(&mut self, base: &Path, r: &FeatRef, dim: usize) -> Result<Vec<f64>> {
        let path = base.join(&r.file);
        if !self.files.contains_key(&path) {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::Data(format!(
                    "{}: length {} is not a multiple of 4",
                    path.display(),
                    bytes.len()
                )));
            }
            let floats = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            self.files.insert(path.clone(), floats);
        }
        let floats = &self.files[&path];
        let start = r.offset * dim;
        floats
            .get(start..start + dim)
            .map(|s| s.iter().map(|&v| v as f64).collect())
            .ok_or_else(|| {
                Error::Data(format!(
                    "{}: vector {} out of range ({} vectors of width {dim})",
                    path.display(),
                    r.offset,
                    floats.len() / dim
                ))
            })
    }
}

fn resolve(
    line: usize,
    rec: Record,
    base: &Path,
    dim: usize,
    cache: &mut SidecarCache,
) -> Result<LoadedRecord> {
    let mut groundings = Vec::new();
    for (k, obj) in rec.objects.unwrap_or_default().into_iter().enumerate() {
        let feat = match (obj.feat, obj.feat_ref) {
            (Some(f), None) => f,
            (None, Some(r)) => cache.vector(base, &r, dim)?,
            _ => {
                return Err(Error::Parse {
                    line,
                    msg: format!("object {k}: exactly one of \"feat\" or \"feat_ref\" required"),
                })
            }
        };
        if feat.len() != dim {
            return Err(Error::Data(format!(
                "line {line}, object {k}: feature length {} != {dim}",
                feat.len()
            )));
        }
        groundings.push(PhraseGrounding::new(obj.span[0], obj.span[1], vec![feat]));
    }
    Ok(LoadedRecord {
        line,
        src: rec.src,
        tgt: rec.tgt,
        groundings,
    })
}

/// Parses JSONL text. `base` resolves sidecar feature files.
pub fn parse_records(text: &str, base: &Path, feature_dim: usize) -> Result<Vec<LoadedRecord>> {
    let mut cache = SidecarCache::default();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        out.push(resolve(line, rec, base, feature_dim, &mut cache)?);
    }
    Ok(out)
}

pub fn load_records(path: &Path, feature_dim: usize) -> Result<Vec<LoadedRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_records(&text, base, feature_dim)
}

impl LoadedRecord {
    pub fn to_example(&self, src: &Vocabulary, tgt: &Vocabulary, opts: &DatasetOptions) -> Result<Example> {
        let tokens = src.encode(&self.src);
        let graph = build_graph_with(&tokens, &self.groundings, opts.feature_dim, opts.edge_mode)
            .map_err(|e| match e {
                Error::Data(msg) => Error::Data(format!("line {}: {msg}", self.line)),
                other => other,
            })?;
        let graph = if opts.zero_object {
            graph.with_zero_object()
        } else {
            graph
        };
        let mut target = Vec::with_capacity(self.tgt.len() + 2);
        target.push(BOS);
        target.extend(tgt.encode(&self.tgt));
        target.push(EOS);
        Ok(Example { graph, target })
    }
}

pub fn to_examples(
    records: &[LoadedRecord],
    src: &Vocabulary,
    tgt: &Vocabulary,
    opts: &DatasetOptions,
) -> Result<Vec<Example>> {
    records.iter().map(|r| r.to_example(src, tgt, opts)).collect()
}

/// Reads a dataset file and builds one [`Example`] per line, in file order.
pub fn load_dataset(
    path: &Path,
    src: &Vocabulary,
    tgt: &Vocabulary,
    opts: &DatasetOptions,
) -> Result<Vec<Example>> {
    to_examples(&load_records(path, opts.feature_dim)?, src, tgt, opts)
}

/// Source and target vocabularies from the training records.
pub fn build_vocabularies(records: &[LoadedRecord]) -> (Vocabulary, Vocabulary) {
    (
        Vocabulary::build(records.iter().flat_map(|r| r.src.iter().map(String::as_str)), 1),
        Vocabulary::build(records.iter().flat_map(|r| r.tgt.iter().map(String::as_str)), 1),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;

    fn feat_json(v: f64, n: usize) -> String {
        format!("[{}]", vec![v.to_string(); n].join(","))
    }

    #[test]
    fn empty_text_gives_no_records() {
        assert!(parse_records("", Path::new("."), 4).unwrap().is_empty());
        assert!(parse_records("\n  \n", Path::new("."), 4).unwrap().is_empty());
    }

    #[test]
    fn one_line_matches_direct_graph() {
        let line = format!(
            r#"{{"src":["two","boys","play"],"tgt":["zwei","jungen"],"objects":[{{"span":[0,2],"feat":{}}}]}}"#,
            feat_json(0.5, FEATURE_DIM)
        );
        let recs = parse_records(&line, Path::new("."), FEATURE_DIM).unwrap();
        let (sv, tv) = build_vocabularies(&recs);
        let ex = recs[0].to_example(&sv, &tv, &DatasetOptions::default()).unwrap();
        let tokens = sv.encode(&["two", "boys", "play"]);
        let direct = build_graph(
            &tokens,
            &[PhraseGrounding::new(0, 2, vec![vec![0.5; FEATURE_DIM]])],
        )
        .unwrap();
        assert_eq!(ex.graph, direct);
        assert_eq!(ex.target, vec![BOS, tv.id("zwei"), tv.id("jungen"), EOS]);
    }

    #[test]
    fn missing_objects_means_no_visual_nodes() {
        let recs = parse_records(r#"{"src":["a"],"tgt":["b"]}"#, Path::new("."), 4).unwrap();
        assert!(recs[0].groundings.is_empty());
        let (sv, tv) = build_vocabularies(&recs);
        let opts = DatasetOptions {
            feature_dim: 4,
            ..Default::default()
        };
        let ex = recs[0].to_example(&sv, &tv, &opts).unwrap();
        assert_eq!(ex.graph.num_visual(), 0);
        let zero = recs[0]
            .to_example(&sv, &tv, &DatasetOptions { zero_object: true, ..opts })
            .unwrap();
        assert_eq!(zero.graph.num_visual(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"src\":[\"a\"]}\n{not json\n";
        match parse_records(text, Path::new("."), 4) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_feature_length_is_data_error() {
        let text = format!(r#"{{"src":["a"],"objects":[{{"span":[0,1],"feat":{}}}]}}"#, feat_json(1.0, 3));
        let err = parse_records(&text, Path::new("."), 4).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn bad_span_reports_line() {
        let text = format!(r#"{{"src":["a"],"objects":[{{"span":[0,3],"feat":{}}}]}}"#, feat_json(1.0, 4));
        let recs = parse_records(&text, Path::new("."), 4).unwrap();
        let (sv, tv) = build_vocabularies(&recs);
        let opts = DatasetOptions {
            feature_dim: 4,
            ..Default::default()
        };
        let err = recs[0].to_example(&sv, &tv, &opts).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn sidecar_features() {
        let dir = tempfile::tempdir().unwrap();
        let floats: Vec<f32> = (0..8).map(|v| v as f32).collect();
        let bytes: Vec<u8> = floats.iter().flat_map(|f| f.to_le_bytes()).collect();
        fs::write(dir.path().join("feats.bin"), bytes).unwrap();
        let text = r#"{"src":["a","b"],"objects":[{"span":[1,2],"feat_ref":{"file":"feats.bin","offset":1}}]}"#;
        fs::write(dir.path().join("d.jsonl"), text).unwrap();
        let recs = load_records(&dir.path().join("d.jsonl"), 4).unwrap();
        assert_eq!(recs[0].groundings[0].features[0], vec![4.0, 5.0, 6.0, 7.0]);
        let bad = r#"{"src":["a"],"objects":[{"span":[0,1],"feat_ref":{"file":"feats.bin","offset":2}}]}"#;
        assert!(parse_records(bad, dir.path(), 4).is_err());
    }
}
