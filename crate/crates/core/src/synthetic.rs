//! Seeded toy corpora: a word-for-word "translation" task with grounded
//! phrases and object features stored in a sidecar file.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{FeatRef, ObjectRecord, Record};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub pairs: usize,
    pub words: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub max_objects: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            pairs: 32,
            words: 46,
            min_len: 4,
            max_len: 10,
            max_objects: 2,
            feature_dim: crate::graph::FEATURE_DIM,
            seed: 7,
        }
    }
}

pub struct SyntheticCorpus {
    pub records: Vec<Record>,
    /// Row-major `[n_objects × feature_dim]` sidecar contents.
    pub features: Vec<f32>,
}

pub const SIDECAR_NAME: &str = "feats.bin";

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    if spec.min_len < 2 || spec.min_len > spec.max_len || spec.words == 0 || spec.max_objects == 0 {
        return Err(Error::Config("invalid synthetic corpus spec".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // One prototype feature per source word; objects add noise to the
    // prototype of the first word of their phrase.
    let protos: Vec<Vec<f32>> = (0..spec.words)
        .map(|_| (0..spec.feature_dim).map(|_| rng.gen_range(0.0..1.0f32)).collect())
        .collect();
    let mut records = Vec::with_capacity(spec.pairs);
    let mut features = Vec::new();
    let mut n_objects = 0;
    for _ in 0..spec.pairs {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.words)).collect();
        let k = rng.gen_range(1..=spec.max_objects.min(len / 2));
        // Disjoint spans of length 1–2 in distinct halves of the sentence.
        let mut objects = Vec::with_capacity(k);
        let part = len / k;
        for j in 0..k {
            let lo = j * part;
            let width = rng.gen_range(1..=2usize.min(part));
            let start = lo + rng.gen_range(0..=part - width);
            let proto = &protos[ids[start]];
            features.extend(proto.iter().map(|&p| p + rng.gen_range(-0.05..0.05f32)));
            objects.push(ObjectRecord {
                span: [start, start + width],
                feat: None,
                feat_ref: Some(FeatRef {
                    file: SIDECAR_NAME.into(),
                    offset: n_objects,
                }),
            });
            n_objects += 1;
        }
        records.push(Record {
            src: ids.iter().map(|i| format!("w{i}")).collect(),
            tgt: ids.iter().map(|i| format!("z{i}")).collect(),
            objects: Some(objects),
        });
    }
    Ok(SyntheticCorpus { records, features })
}

impl SyntheticCorpus {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("records serialize"));
            s.push('\n');
        }
        s
    }

    /// Writes `<name>.jsonl` and the sidecar into `dir`; returns the dataset path.
    pub fn write(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let side = dir.join(SIDECAR_NAME);
        let bytes: Vec<u8> = self.features.iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(&side, bytes).map_err(|e| Error::io(&side, e))?;
        let path = dir.join(format!("{name}.jsonl"));
        fs::write(&path, self.to_jsonl()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
