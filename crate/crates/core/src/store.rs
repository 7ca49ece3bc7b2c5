//! Feature containers and dataset manifests.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic    "PEVF" (50 45 56 46)
//! version  u32 = 1
//! kind     u8: 1 = views, 2 = prompts, 3 = checkpoint
//! dim      u32
//! count    u32
//! records:
//!   id_len u32, id (UTF-8)
//!   views:      label u32, M u32, M·dim f32
//!   prompts:    dim f32
//!   checkpoint: rank u32, rank × u32 extents, product(extents) f64
//! ```
//!
//! View and prompt values are stored as binary32; checkpoints keep full
//! binary64 so a reloaded encoder reproduces the trained one exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PEVF";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ContainerKind {
    Views = 1,
    Prompts = 2,
    Checkpoint = 3,
}

impl ContainerKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(ContainerKind::Views),
            2 => Some(ContainerKind::Prompts),
            3 => Some(ContainerKind::Checkpoint),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeRecord {
    pub shape_id: String,
    pub label: usize,
    /// M×D view features.
    pub views: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub shapes: Vec<ShapeRecord>,
    pub dim: usize,
    pub backbone_tag: String,
    /// Whether every view row is already unit-norm.
    pub normalized: bool,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Data("feature dimension must be positive".into()));
        }
        if self.shapes.is_empty() {
            return Err(Error::Data("feature set has no shapes".into()));
        }
        for s in &self.shapes {
            let (m, d) = s.views.as_matrix()?;
            if m == 0 {
                return Err(Error::Data(format!("shape `{}` has no views", s.shape_id)));
            }
            if d != self.dim {
                return Err(Error::shape("feature set", &[m, self.dim], s.views.shape()));
            }
        }
        Ok(())
    }

    /// Checks every label against a category count.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.shapes.iter().find(|s| s.label >= classes) {
            Some(s) => Err(Error::Data(format!(
                "shape `{}` has label {} but only {classes} categories exist",
                s.shape_id, s.label
            ))),
            None => Ok(()),
        }
    }

    /// Unit-normalizes every view row unless already normalized.
    pub fn normalized(mut self) -> Result<Self> {
        if !self.normalized {
            for s in &mut self.shapes {
                s.views = l2_normalize_rows(&s.views)?;
            }
            self.normalized = true;
        }
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    pub categories: Vec<String>,
    /// Prompt template with a `{CLASS}` slot.
    pub template: String,
    /// N×D prompt features in category order.
    pub features: Tensor,
}

impl PromptBank {
    pub fn new(categories: Vec<String>, template: String, features: Tensor) -> Result<Self> {
        let bank = PromptBank {
            categories,
            template,
            features,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.len() < 2 {
            return Err(Error::Data(format!(
                "prompt bank needs at least 2 categories, got {}",
                self.categories.len()
            )));
        }
        let (rows, _) = self.features.as_matrix()?;
        if rows != self.categories.len() {
            return Err(Error::Data(format!(
                "{} prompt rows for {} categories",
                rows,
                self.categories.len()
            )));
        }
        Ok(())
    }

    pub fn normalized(mut self) -> Result<Self> {
        self.features = l2_normalize_rows(&self.features)?;
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub dim: usize,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Container {
    Views(FeatureSet),
    Prompts(PromptBank),
    Checkpoint(Checkpoint),
}

impl Container {
    pub fn kind(&self) -> ContainerKind {
        match self {
            Container::Views(_) => ContainerKind::Views,
            Container::Prompts(_) => ContainerKind::Prompts,
            Container::Checkpoint(_) => ContainerKind::Checkpoint,
        }
    }
}

/// Scales each row to unit Euclidean norm.
pub fn l2_normalize_rows(matrix: &Tensor) -> Result<Tensor> {
    let (rows, cols) = matrix.as_matrix()?;
    let mut data = matrix.data().to_vec();
    for (r, row) in data.chunks_mut(cols).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateRow { row: r });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new(vec![rows, cols], data)
}

fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::Data(format!("{what} {value} exceeds u32")))
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn header(kind: ContainerKind, dim: usize, count: usize) -> Result<Self> {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(&MAGIC);
        w.u32(VERSION);
        w.buf.push(kind as u8);
        w.u32(to_u32(dim, "dimension")?);
        w.u32(to_u32(count, "record count")?);
        Ok(w)
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn id(&mut self, id: &str) -> Result<()> {
        self.u32(to_u32(id.len(), "id length")?);
        self.buf.extend_from_slice(id.as_bytes());
        Ok(())
    }

    fn f32s(&mut self, values: &[f64]) {
        for &v in values {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    fn f64s(&mut self, values: &[f64]) {
        for &v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_views(set: &FeatureSet) -> Result<Vec<u8>> {
    set.validate()
        .map_err(|e| Error::format(0, format!("invalid feature set: {e}")))?;
    let mut w = Writer::header(ContainerKind::Views, set.dim, set.shapes.len())?;
    for s in &set.shapes {
        w.id(&s.shape_id)?;
        w.u32(to_u32(s.label, "label")?);
        w.u32(to_u32(s.views.rows(), "view count")?);
        w.f32s(s.views.data());
    }
    Ok(w.buf)
}

pub fn encode_prompts(bank: &PromptBank) -> Result<Vec<u8>> {
    bank.validate()
        .map_err(|e| Error::format(0, format!("invalid prompt bank: {e}")))?;
    let mut w = Writer::header(ContainerKind::Prompts, bank.dim(), bank.len())?;
    for (name, row) in bank.categories.iter().zip(bank.features.row_iter()) {
        w.id(name)?;
        w.f32s(row);
    }
    Ok(w.buf)
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    if ckpt.tensors.is_empty() {
        return Err(Error::format(0, "checkpoint has no tensors"));
    }
    let mut w = Writer::header(ContainerKind::Checkpoint, ckpt.dim, ckpt.tensors.len())?;
    for (name, t) in &ckpt.tensors {
        w.id(name)?;
        w.u32(to_u32(t.shape().len(), "rank")?);
        for &e in t.shape() {
            w.u32(to_u32(e, "extent")?);
        }
        w.f64s(t.data());
    }
    Ok(w.buf)
}

pub fn encode(container: &Container) -> Result<Vec<u8>> {
    match container {
        Container::Views(s) => encode_views(s),
        Container::Prompts(p) => encode_prompts(p),
        Container::Checkpoint(c) => encode_checkpoint(c),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    fn id(&mut self) -> Result<String> {
        let start = self.pos;
        let n = self.count("id length")?;
        let raw = self.take(n, "id")?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::format(start as u64, "id is not valid UTF-8"))
    }

    /// Byte size of `n` values of `width` bytes, rejecting counts that
    /// overflow or exceed the remaining input.
    fn extent(&self, n: Option<usize>, width: usize, what: &str) -> Result<usize> {
        let remaining = self.bytes.len() - self.pos;
        match n.and_then(|n| n.checked_mul(width)) {
            Some(bytes) if bytes <= remaining => Ok(bytes),
            Some(bytes) => Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {bytes} bytes, {remaining} remain"),
            )),
            None => Err(Error::format(self.pos as u64, format!("{what} extent overflows"))),
        }
    }

    fn f32s(&mut self, n: Option<usize>, what: &str) -> Result<Vec<f64>> {
        let bytes = self.extent(n, 4, what)?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn f64s(&mut self, n: Option<usize>, what: &str) -> Result<Vec<f64>> {
        let bytes = self.extent(n, 8, what)?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let kind_byte = r.u8("kind")?;
    let kind = ContainerKind::from_byte(kind_byte)
        .ok_or_else(|| Error::format(8, format!("unknown container kind {kind_byte}")))?;
    let dim = r.count("dimension")?;
    if dim == 0 {
        return Err(Error::format(9, "dimension must be positive"));
    }
    let count_at = r.pos;
    let count = r.count("record count")?;
    if count == 0 {
        return Err(Error::format(count_at as u64, "container has no records"));
    }

    let container = match kind {
        ContainerKind::Views => {
            let mut shapes = Vec::new();
            for _ in 0..count {
                let shape_id = r.id()?;
                let label = r.count("label")?;
                let m_at = r.pos;
                let m = r.count("view count")?;
                if m == 0 {
                    return Err(Error::format(m_at as u64, format!("shape `{shape_id}` has no views")));
                }
                let data = r.f32s(m.checked_mul(dim), "view payload")?;
                shapes.push(ShapeRecord {
                    shape_id,
                    label,
                    views: Tensor::new(vec![m, dim], data)?,
                });
            }
            Container::Views(FeatureSet {
                shapes,
                dim,
                backbone_tag: String::new(),
                normalized: false,
            })
        }
        ContainerKind::Prompts => {
            let mut categories = Vec::with_capacity(count.min(1 << 16));
            let mut data = Vec::new();
            for _ in 0..count {
                categories.push(r.id()?);
                data.extend(r.f32s(Some(dim), "prompt payload")?);
            }
            let features = Tensor::new(vec![count, dim], data)?;
            Container::Prompts(PromptBank {
                categories,
                template: String::new(),
                features,
            })
        }
        ContainerKind::Checkpoint => {
            let mut tensors = BTreeMap::new();
            for _ in 0..count {
                let name_at = r.pos;
                let name = r.id()?;
                let rank = r.count("rank")?;
                if rank == 0 || rank > 8 {
                    return Err(Error::format(r.pos as u64 - 4, format!("bad rank {rank}")));
                }
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    let e = r.count("extent")?;
                    if e == 0 {
                        return Err(Error::format(r.pos as u64 - 4, "zero extent"));
                    }
                    shape.push(e);
                }
                let n = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
                let data = r.f64s(n, "tensor payload")?;
                if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                    return Err(Error::format(name_at as u64, format!("duplicate tensor `{name}`")));
                }
            }
            Container::Checkpoint(Checkpoint { dim, tensors })
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(container)
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_container(container: &Container, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(container)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// JSON manifest tying containers and category names together. Relative
/// paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub categories: Vec<String>,
    pub template: String,
    pub splits: BTreeMap<String, PathBuf>,
    pub prompts: PathBuf,
    /// Encoder that produced the features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<String>,
    /// True when the containers already hold unit-norm rows.
    #[serde(default)]
    pub normalized: bool,
    /// Training overrides layered between defaults and command-line flags.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<serde_json::Value>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A manifest with its prompt bank loaded and normalized.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub base_dir: PathBuf,
    pub prompts: PromptBank,
}

impl Dataset {
    pub fn open(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = Manifest::read(manifest_path)?;
        let base_dir = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let prompts_path = base_dir.join(&manifest.prompts);
        let mut bank = match read_container(&prompts_path)? {
            Container::Prompts(p) => p,
            other => {
                return Err(Error::Data(format!(
                    "{}: expected a prompt container, found {:?}",
                    prompts_path.display(),
                    other.kind()
                )))
            }
        };
        if bank.categories != manifest.categories {
            return Err(Error::Data(format!(
                "{}: prompt rows do not match the manifest's category list",
                prompts_path.display()
            )));
        }
        bank.template = manifest.template.clone();
        bank.validate()?;
        if !manifest.normalized {
            bank = bank.normalized()?;
        }
        Ok(Dataset {
            manifest,
            base_dir,
            prompts: bank,
        })
    }

    pub fn split_path(&self, split: &str) -> Result<PathBuf> {
        self.manifest
            .splits
            .get(split)
            .map(|p| self.base_dir.join(p))
            .ok_or_else(|| Error::Data(format!("manifest has no `{split}` split")))
    }

    /// Loads a split, normalizing rows when the manifest says they are raw.
    pub fn load_split(&self, split: &str) -> Result<FeatureSet> {
        let path = self.split_path(split)?;
        let mut set = match read_container(&path)? {
            Container::Views(s) => s,
            other => {
                return Err(Error::Data(format!(
                    "{}: expected a views container, found {:?}",
                    path.display(),
                    other.kind()
                )))
            }
        };
        if set.dim != self.prompts.dim() {
            return Err(Error::shape(
                "split vs prompts",
                &[set.dim],
                &[self.prompts.dim()],
            ));
        }
        set.check_labels(self.prompts.len())?;
        set.backbone_tag = self.manifest.backbone.clone().unwrap_or_default();
        set.normalized = self.manifest.normalized;
        set.normalized()
    }
}
