//! On-disk dataset layout: `<root>/<app>/<id>.{dfg,stim,trace,sample,meta}`.
//!
//! The `meta` file carries the metadata vector and the power labels:
//!
//! ```text
//! meta v1
//! lut 1520.0
//! ...
//! power_dynamic 0.42
//! power_total 0.61
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::activity::serialize_traces;
use crate::dfg::serialize_dfg;
use crate::interp::serialize_stimuli;
use crate::sample::{
    parse_sample, serialize_sample, GraphSample, MetadataVector, PowerKind, PowerLabel, SampleError,
};
use crate::synth::SynthRecord;

pub const META_SCHEMA: &str = "meta v1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Sample { path: PathBuf, source: SampleError },
    #[error("{path} line {line}: {msg}")]
    Meta {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("unknown application group `{0}`")]
    UnknownGroup(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Metadata and labels of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub metadata: MetadataVector,
    pub power_dynamic: Option<f64>,
    pub power_total: Option<f64>,
}

impl SampleMeta {
    pub fn power(&self, kind: PowerKind) -> Option<f64> {
        match kind {
            PowerKind::Dynamic => self.power_dynamic,
            PowerKind::Total => self.power_total,
        }
    }
}

pub fn serialize_meta(m: &SampleMeta) -> String {
    let mut out = format!("{META_SCHEMA}\n");
    for (k, v) in MetadataVector::KEYS.iter().zip(m.metadata.to_array()) {
        let _ = writeln!(out, "{k} {v:?}");
    }
    if let Some(p) = m.power_dynamic {
        let _ = writeln!(out, "power_dynamic {p:?}");
    }
    if let Some(p) = m.power_total {
        let _ = writeln!(out, "power_total {p:?}");
    }
    out
}

pub fn parse_meta(text: &str) -> Result<SampleMeta, (usize, String)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, l)) if l == META_SCHEMA => {}
        _ => return Err((1, format!("expected `{META_SCHEMA}` header"))),
    }
    let mut values: [Option<f64>; MetadataVector::LEN] = [None; MetadataVector::LEN];
    let mut meta = SampleMeta {
        metadata: MetadataVector::from_array([0.0; MetadataVector::LEN]),
        power_dynamic: None,
        power_total: None,
    };
    for (no, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| (no, "expected `key value`".to_string()))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| (no, format!("bad number `{value}`")))?;
        match key {
            "power_dynamic" => meta.power_dynamic = Some(v),
            "power_total" => meta.power_total = Some(v),
            _ => {
                let i = MetadataVector::KEYS
                    .iter()
                    .position(|k| *k == key)
                    .ok_or_else(|| (no, format!("unknown key `{key}`")))?;
                values[i] = Some(v);
            }
        }
    }
    let mut arr = [0.0; MetadataVector::LEN];
    for (i, v) in values.iter().enumerate() {
        arr[i] = v.ok_or_else(|| (0, format!("missing key `{}`", MetadataVector::KEYS[i])))?;
    }
    meta.metadata = MetadataVector::from_array(arr);
    meta.metadata.validate().map_err(|m| (0, m))?;
    Ok(meta)
}

/// Writes all files of a synthetic record under `root`.
pub fn write_record(root: &Path, r: &SynthRecord) -> Result<(), DatasetError> {
    let dir = root.join(&r.app);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let meta = SampleMeta {
        metadata: r.design.metadata.clone(),
        power_dynamic: Some(r.power_dynamic),
        power_total: Some(r.power_total),
    };
    let files = [
        ("dfg", serialize_dfg(&r.design.dfg)),
        ("stim", serialize_stimuli(&r.design.stimuli)),
        ("trace", serialize_traces(&r.traces)),
        ("sample", serialize_sample(&r.sample)),
        ("meta", serialize_meta(&meta)),
    ];
    for (ext, text) in files {
        let path = dir.join(format!("{}.{ext}", r.id));
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<SampleMeta, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_meta(&text).map_err(|(line, msg)| DatasetError::Meta {
        path: path.to_path_buf(),
        line,
        msg,
    })
}

pub fn read_sample(path: &Path) -> Result<GraphSample, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_sample(&text).map_err(|source| DatasetError::Sample {
        path: path.to_path_buf(),
        source,
    })
}

/// Samples grouped by application, all labelled with one power kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub groups: BTreeMap<String, Vec<GraphSample>>,
    pub kind: PowerKind,
}

impl Dataset {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut dim = None;
        for (name, group) in &self.groups {
            if group.is_empty() {
                return Err(DatasetError::Invalid(format!("group `{name}` is empty")));
            }
            for s in group {
                if s.num_nodes() == 0 {
                    continue;
                }
                match dim {
                    None => dim = Some(s.feature_dim),
                    Some(d) if d != s.feature_dim => {
                        return Err(DatasetError::Invalid(format!(
                            "sample `{}` has feature dim {}, expected {d}",
                            s.name, s.feature_dim
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.groups
            .values()
            .flatten()
            .find(|s| s.num_nodes() > 0)
            .map(|s| s.feature_dim)
    }

    pub fn len(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> impl Iterator<Item = &GraphSample> {
        self.groups.values().flatten()
    }

    /// Builds a dataset from synthetic records.
    pub fn from_records(records: &[SynthRecord], kind: PowerKind) -> Dataset {
        let mut groups: BTreeMap<String, Vec<GraphSample>> = BTreeMap::new();
        for r in records {
            let mut s = r.sample.clone();
            s.label = Some(PowerLabel {
                watts: match kind {
                    PowerKind::Dynamic => r.power_dynamic,
                    PowerKind::Total => r.power_total,
                },
                kind,
            });
            groups.entry(r.app.clone()).or_default().push(s);
        }
        Dataset { groups, kind }
    }
}

/// Directory entries sorted by path.
pub fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<_, _>>()?;
    out.sort();
    Ok(out)
}

/// Reads every `<app>/<id>.sample` with its `.meta` under `root`. Sample
/// names become `<app>/<id>`.
pub fn load_dataset(root: &Path, kind: PowerKind) -> Result<Dataset, DatasetError> {
    let mut groups = BTreeMap::new();
    for app_dir in sorted_entries(root)? {
        if !app_dir.is_dir() {
            continue;
        }
        let app = app_dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| DatasetError::Invalid(format!("bad directory name {app_dir:?}")))?
            .to_string();
        let mut group = Vec::new();
        for path in sorted_entries(&app_dir)? {
            if path.extension().and_then(|e| e.to_str()) != Some("sample") {
                continue;
            }
            let id = path
                .file_stem()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            let mut s = read_sample(&path)?;
            let meta = read_meta(&path.with_extension("meta"))?;
            let watts = meta.power(kind).ok_or_else(|| {
                DatasetError::Invalid(format!("{app}/{id}: no {} power label", kind.name()))
            })?;
            s.name = format!("{app}/{id}");
            s.metadata = Some(meta.metadata);
            s.label = Some(PowerLabel { watts, kind });
            s.validate().map_err(|source| DatasetError::Sample {
                path: path.clone(),
                source,
            })?;
            group.push(s);
        }
        if !group.is_empty() {
            groups.insert(app, group);
        }
    }
    let ds = Dataset { groups, kind };
    if ds.is_empty() {
        return Err(DatasetError::Invalid(format!(
            "no samples under {}",
            root.display()
        )));
    }
    ds.validate()?;
    Ok(ds)
}

/// Test split is the `target` group; training is every other group.
pub fn split_leave_one_out(
    ds: &Dataset,
    target: &str,
) -> Result<(Vec<GraphSample>, Vec<GraphSample>), DatasetError> {
    let test = ds
        .groups
        .get(target)
        .ok_or_else(|| DatasetError::UnknownGroup(target.to_string()))?
        .clone();
    let train = ds
        .groups
        .iter()
        .filter(|(name, _)| name.as_str() != target)
        .flat_map(|(_, g)| g.iter().cloned())
        .collect();
    Ok((train, test))
}
