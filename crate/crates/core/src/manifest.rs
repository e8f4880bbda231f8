//! Dataset statistics: task class sets, per-record pixel counts, image-level
//! class frequencies and label remapping between task granularities.
//!
//! A manifest file is JSONL. Line 1 is the task header
//! `{"task":"T2","classes":[{"id":0,"name":"...","group":"anatomy"},...]}`,
//! every following line one record
//! `{"id":"...","width":W,"height":H,"pixel_counts":{"0":123,...}}` with optional
//! `image_path` / `label_path`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::labelmap::{LabelMap, IGNORE};

/// Built-in T1/T2/T3 class tables and remaps (versioned with the crate).
pub const BUILTIN_TASKS: &str = include_str!("../config/tasks.json");

/// Instruments occurring in fewer than this fraction of records count as rare.
pub const DEFAULT_RARE_THRESHOLD: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassGroup {
    Anatomy,
    Instrument,
    Misc,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskId {
    T1,
    T2,
    T3,
    /// Any non-CaDIS class set, e.g. a synthetic benchmark.
    Custom(String),
}

impl TaskId {
    pub fn expected_classes(&self) -> Option<usize> {
        match self {
            TaskId::T1 => Some(8),
            TaskId::T2 => Some(17),
            TaskId::T3 => Some(25),
            TaskId::Custom(_) => None,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskId::T1 => f.write_str("T1"),
            TaskId::T2 => f.write_str("T2"),
            TaskId::T3 => f.write_str("T3"),
            TaskId::Custom(name) => f.write_str(name),
        }
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "T1" => TaskId::T1,
            "T2" => TaskId::T2,
            "T3" => TaskId::T3,
            "" => return Err(Error::validation("empty task id")),
            other => TaskId::Custom(other.to_owned()),
        })
    }
}

impl Serialize for TaskId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: usize,
    pub name: String,
    pub group: ClassGroup,
}

/// Mapping of every class of a task onto the next-coarser task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoarserRemap {
    pub table: Vec<usize>,
    pub target: Box<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub classes: Vec<ClassSpec>,
    pub remap_to_coarser: Option<CoarserRemap>,
}

impl TaskSpec {
    /// Task without a coarser level; validates ids and class counts.
    pub fn new(task_id: TaskId, classes: Vec<ClassSpec>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::validation(format!("task {task_id} has no classes")));
        }
        for (expected, class) in classes.iter().enumerate() {
            if class.id != expected {
                return Err(Error::validation(format!(
                    "task {task_id}: class ids must be contiguous from 0, found {} at position {expected}",
                    class.id
                )));
            }
        }
        if classes.len() >= IGNORE as usize {
            return Err(Error::validation(format!(
                "task {task_id}: at most {} classes fit an 8-bit label map",
                IGNORE
            )));
        }
        if let Some(n) = task_id.expected_classes() {
            if classes.len() != n {
                return Err(Error::validation(format!(
                    "task {task_id} must have {n} classes, got {}",
                    classes.len()
                )));
            }
        }
        Ok(Self {
            task_id,
            classes,
            remap_to_coarser: None,
        })
    }

    pub fn with_coarser(mut self, table: Vec<usize>, target: TaskSpec) -> Result<Self> {
        if table.len() != self.classes.len() {
            return Err(Error::validation(format!(
                "remap {} -> {} must cover {} classes, got {}",
                self.task_id,
                target.task_id,
                self.classes.len(),
                table.len()
            )));
        }
        let mut hit = vec![false; target.num_classes()];
        for (from, &to) in table.iter().enumerate() {
            let slot = hit.get_mut(to).ok_or_else(|| {
                Error::validation(format!(
                    "remap {} -> {}: class {from} maps to unknown id {to}",
                    self.task_id, target.task_id
                ))
            })?;
            *slot = true;
        }
        if let Some(missed) = hit.iter().position(|h| !h) {
            return Err(Error::validation(format!(
                "remap {} -> {} is not surjective: target class {missed} has no preimage",
                self.task_id, target.task_id
            )));
        }
        self.remap_to_coarser = Some(CoarserRemap {
            table,
            target: Box::new(target),
        });
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_ids_in(&self, group: ClassGroup) -> BTreeSet<usize> {
        self.classes
            .iter()
            .filter(|c| c.group == group)
            .map(|c| c.id)
            .collect()
    }

    /// Composite class table from this task down to `target`, following the
    /// chain of coarser remaps. Identity when `target` is this task.
    pub fn remap_table_to(&self, target: &TaskId) -> Result<Vec<usize>> {
        let mut table: Vec<usize> = (0..self.num_classes()).collect();
        let mut level = self;
        while level.task_id != *target {
            let remap = level.remap_to_coarser.as_ref().ok_or_else(|| {
                Error::validation(format!("task {} is not coarser than {}", target, self.task_id))
            })?;
            for slot in table.iter_mut() {
                *slot = remap.table[*slot];
            }
            level = &remap.target;
        }
        Ok(table)
    }
}

#[derive(Debug, Deserialize)]
struct TaskEntry {
    task: TaskId,
    classes: Vec<ClassSpec>,
    coarser: Option<TaskId>,
    remap_to_coarser: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
struct TaskFile {
    version: String,
    tasks: Vec<TaskEntry>,
}

/// All task definitions from one versioned config, linked coarse-to-fine.
#[derive(Debug, Clone)]
pub struct TaskCatalog {
    pub version: String,
    tasks: BTreeMap<TaskId, TaskSpec>,
}

impl TaskCatalog {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_TASKS).expect("bundled task config is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TaskFile = serde_json::from_str(text)?;
        let mut pending: Vec<TaskEntry> = file.tasks;
        let mut tasks: BTreeMap<TaskId, TaskSpec> = BTreeMap::new();
        // Resolve entries whose coarser task is already built until none remain.
        while !pending.is_empty() {
            let before = pending.len();
            let mut rest = Vec::new();
            for entry in pending {
                let ready = match &entry.coarser {
                    None => Some(None),
                    Some(c) => tasks.get(c).map(|t| Some(t.clone())),
                };
                match ready {
                    None => rest.push(entry),
                    Some(coarser) => {
                        let mut spec = TaskSpec::new(entry.task.clone(), entry.classes)?;
                        if let Some(target) = coarser {
                            let table = entry.remap_to_coarser.ok_or_else(|| {
                                Error::validation(format!("task {} names a coarser task but no remap", entry.task))
                            })?;
                            spec = spec.with_coarser(table, target)?;
                        }
                        if tasks.insert(entry.task.clone(), spec).is_some() {
                            return Err(Error::validation(format!("task {} defined twice", entry.task)));
                        }
                    }
                }
            }
            if rest.len() == before {
                return Err(Error::validation("task config has unresolved or cyclic coarser links"));
            }
            pending = rest;
        }
        Ok(Self {
            version: file.version,
            tasks,
        })
    }

    pub fn get(&self, id: &TaskId) -> Option<&TaskSpec> {
        self.tasks.get(id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordStats {
    pub record_id: String,
    pub width: usize,
    pub height: usize,
    pub pixel_counts: BTreeMap<usize, u64>,
    pub image_path: Option<PathBuf>,
    pub label_path: Option<PathBuf>,
}

impl RecordStats {
    pub fn from_labels(record_id: impl Into<String>, labels: &LabelMap, num_classes: usize) -> Result<Self> {
        let hist = labels.histogram(num_classes)?;
        Ok(Self {
            record_id: record_id.into(),
            width: labels.width(),
            height: labels.height(),
            pixel_counts: hist
                .into_iter()
                .enumerate()
                .filter(|&(_, n)| n > 0)
                .collect(),
            image_path: None,
            label_path: None,
        })
    }

    pub fn count(&self, class: usize) -> u64 {
        self.pixel_counts.get(&class).copied().unwrap_or(0)
    }

    pub fn contains(&self, class: usize) -> bool {
        self.count(class) > 0
    }

    /// Class ids with a positive pixel count, ascending.
    pub fn present_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.pixel_counts.iter().filter(|(_, &n)| n > 0).map(|(&c, _)| c)
    }

    fn validate(&self, task: &TaskSpec) -> Result<()> {
        if self.record_id.is_empty() {
            return Err(Error::validation("record id must be non-empty"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation(format!(
                "record {}: width and height must be positive",
                self.record_id
            )));
        }
        let mut total: u64 = 0;
        for &class in self.pixel_counts.keys() {
            if class >= task.num_classes() {
                return Err(Error::validation(format!(
                    "record {}: class id {class} not in task {}",
                    self.record_id, task.task_id
                )));
            }
        }
        for &n in self.pixel_counts.values() {
            total = total.saturating_add(n);
        }
        let area = (self.width as u64) * (self.height as u64);
        if total > area {
            return Err(Error::validation(format!(
                "record {}: pixel counts sum to {total}, exceeding {}x{} = {area}",
                self.record_id, self.width, self.height
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    width: usize,
    height: usize,
    pixel_counts: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_path: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    task: TaskId,
    classes: Vec<ClassSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<RecordStats>,
    pub task: TaskSpec,
}

impl DatasetManifest {
    pub fn new(records: Vec<RecordStats>, task: TaskSpec) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::validation("manifest has no records"));
        }
        let mut seen = HashSet::new();
        for record in &records {
            record.validate(&task)?;
            if !seen.insert(record.record_id.as_str()) {
                return Err(Error::validation(format!("duplicate record id {}", record.record_id)));
            }
        }
        Ok(Self { records, task })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.task.num_classes()
    }

    pub fn index_of(&self, record_id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.record_id == record_id)
    }

    /// Manifest restricted to the records accepted by `keep`, order preserved.
    pub fn filter<F: FnMut(&RecordStats) -> bool>(&self, mut keep: F) -> Result<Self> {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Self::new(records, self.task.clone())
    }

    pub fn read<R: Read>(input: R, origin: &Path) -> Result<Self> {
        let reader = BufReader::new(input);
        let parse_err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut task: Option<TaskSpec> = None;
        let mut records = Vec::new();
        let mut seen: HashSet<String> = HashSet::new();
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.trim().is_empty() {
                continue;
            }
            match &task {
                None => {
                    let header: HeaderLine = serde_json::from_str(&line)
                        .map_err(|e| parse_err(lineno, format!("bad header: {e}")))?;
                    let spec = TaskSpec::new(header.task, header.classes)
                        .map_err(|e| parse_err(lineno, e.to_string()))?;
                    task = Some(spec);
                }
                Some(spec) => {
                    let raw: RecordLine = serde_json::from_str(&line)
                        .map_err(|e| parse_err(lineno, format!("bad record: {e}")))?;
                    let mut pixel_counts = BTreeMap::new();
                    for (key, n) in raw.pixel_counts {
                        let class: usize = key
                            .parse()
                            .map_err(|_| parse_err(lineno, format!("pixel_counts key {key:?} is not a class id")))?;
                        pixel_counts.insert(class, n);
                    }
                    let record = RecordStats {
                        record_id: raw.id,
                        width: raw.width,
                        height: raw.height,
                        pixel_counts,
                        image_path: raw.image_path,
                        label_path: raw.label_path,
                    };
                    record.validate(spec).map_err(|e| parse_err(lineno, e.to_string()))?;
                    if !seen.insert(record.record_id.clone()) {
                        return Err(parse_err(lineno, format!("duplicate record id {}", record.record_id)));
                    }
                    records.push(record);
                }
            }
        }
        let task = task.ok_or_else(|| parse_err(1, "empty manifest: missing task header".into()))?;
        if records.is_empty() {
            return Err(parse_err(1, "manifest has a header but no records".into()));
        }
        Ok(Self { records, task })
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let header = HeaderLine {
            task: self.task.task_id.clone(),
            classes: self.task.classes.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        writeln!(out).map_err(|e| Error::io("<manifest>", e))?;
        for r in &self.records {
            let line = RecordLine {
                id: r.record_id.clone(),
                width: r.width,
                height: r.height,
                pixel_counts: r.pixel_counts.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                image_path: r.image_path.clone(),
                label_path: r.label_path.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            writeln!(out).map_err(|e| Error::io("<manifest>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write(&mut out)?;
        out.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::read(file, path)
}

/// Image-level occurrence frequency f_c for every class of the task.
pub fn class_frequencies(manifest: &DatasetManifest) -> Vec<f64> {
    let mut hits = vec![0usize; manifest.num_classes()];
    for record in &manifest.records {
        for class in record.present_classes() {
            hits[class] += 1;
        }
    }
    let n = manifest.len() as f64;
    hits.into_iter().map(|h| h as f64 / n).collect()
}

/// Instrument classes with f_c strictly below `threshold`.
pub fn rare_classes(manifest: &DatasetManifest, threshold: f64) -> Result<BTreeSet<usize>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::validation(format!("rare threshold must lie in (0,1), got {threshold}")));
    }
    let freqs = class_frequencies(manifest);
    Ok(manifest
        .task
        .classes
        .iter()
        .filter(|c| c.group == ClassGroup::Instrument && freqs[c.id] < threshold)
        .map(|c| c.id)
        .collect())
}

/// Map every pixel of a `from`-task label map onto the coarser `to` task.
pub fn remap_labels(labels: &LabelMap, from: &TaskSpec, to: &TaskSpec) -> Result<LabelMap> {
    let table = from.remap_table_to(&to.task_id)?;
    let mut out = labels.clone();
    for v in out.data_mut() {
        if *v == IGNORE {
            continue;
        }
        let mapped = table.get(*v as usize).ok_or_else(|| {
            Error::validation(format!("label value {v} is not a class of task {}", from.task_id))
        })?;
        *v = *mapped as u8;
    }
    Ok(out)
}
