//! Line-oriented text formats for checkpoints and datasets. Floats are
//! written with 17 significant digits so a round trip is value-exact.

use std::fmt::Write as _;
use std::path::Path;

use fcl_tensor::Tensor;
use rand::SeedableRng;

use crate::data::TerrainSample;
use crate::error::{Error, Result};
use crate::lsr::GeneratorSet;
use crate::model::{LayerGroup, SegNet, PARAM_NAMES};
use crate::rkr::RecoveryFn;
use crate::seed::Rng;

pub const CHECKPOINT_MAGIC: &str = "fcl-checkpoint";
pub const DATASET_MAGIC: &str = "fcl-dataset";
pub const FORMAT_VERSION: u32 = 1;

const GENERATOR_GROUP: &str = "generator";
const RECOVERY_GROUP: &str = "recovery";

/// Server model plus the per-client generators and the recovery function.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: SegNet,
    pub generators: Vec<GeneratorSet>,
    pub psi: Option<RecoveryFn>,
}

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn push_floats(out: &mut String, prefix: &str, values: &[f64]) {
    out.push_str(prefix);
    for v in values {
        write!(out, " {v:.16e}").expect("string write");
    }
    out.push('\n');
}

fn push_tensor(out: &mut String, name: &str, group: &str, t: &Tensor) {
    writeln!(out, "tensor {name} {group} {}", shape_text(t.shape())).expect("string write");
    push_floats(out, "data", t.data());
}

pub fn checkpoint_to_text(ckpt: &Checkpoint) -> String {
    let mut out = String::new();
    writeln!(out, "{CHECKPOINT_MAGIC}\nversion {FORMAT_VERSION}\nclass_count {}", ckpt.net.class_count()).unwrap();
    writeln!(out, "generators {}", ckpt.generators.len()).unwrap();
    writeln!(out, "recovery {}", if ckpt.psi.is_some() { "present" } else { "absent" }).unwrap();
    for (slot, t) in ckpt.net.params().iter().enumerate() {
        push_tensor(&mut out, PARAM_NAMES[slot], LayerGroup::of_slot(slot).name(), t);
    }
    for (k, g) in ckpt.generators.iter().enumerate() {
        for (i, t) in g.tensors().into_iter().enumerate() {
            push_tensor(&mut out, &format!("client{k}.{i}"), GENERATOR_GROUP, t);
        }
    }
    if let Some(psi) = &ckpt.psi {
        for (i, t) in psi.tensors().into_iter().enumerate() {
            push_tensor(&mut out, &format!("psi.{i}"), RECOVERY_GROUP, t);
        }
    }
    out.push_str("end\n");
    out
}

/// Sequential reader with line numbers for error messages.
struct Lines<'a> {
    origin: &'a str,
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str, origin: &'a str) -> Self {
        Lines { origin, iter: text.lines().enumerate(), line: 0 }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { origin: self.origin.to_string(), line: self.line, msg: msg.into() }
    }

    fn next(&mut self) -> Result<&'a str> {
        let (i, l) = self.iter.next().ok_or_else(|| Error::Parse {
            origin: self.origin.to_string(),
            line: self.line + 1,
            msg: "unexpected end of document".into(),
        })?;
        self.line = i + 1;
        Ok(l.trim_end())
    }

    /// Reads `key <value>` and returns the value text.
    fn field(&mut self, key: &str) -> Result<&'a str> {
        let l = self.next()?;
        match l.split_once(' ') {
            Some((k, v)) if k == key => Ok(v),
            _ => Err(self.err(format!("expected `{key} ...`, got `{l}`"))),
        }
    }

    fn number<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.field(key)?;
        v.parse().map_err(|_| self.err(format!("`{key}` value `{v}` is not a number")))
    }

    fn floats(&mut self, key: &str, expected: usize) -> Result<Vec<f64>> {
        let l = self.next()?;
        let mut parts = l.split(' ');
        if parts.next() != Some(key) {
            return Err(self.err(format!("expected `{key}` line")));
        }
        let values = parts.map(|p| p.parse::<f64>().map_err(|_| self.err(format!("bad number `{p}`")))).collect::<Result<Vec<_>>>()?;
        if values.len() != expected {
            return Err(self.err(format!("expected {expected} values, found {}", values.len())));
        }
        Ok(values)
    }

    fn shape(&self, text: &str) -> Result<Vec<usize>> {
        if text == "scalar" {
            return Ok(Vec::new());
        }
        text.split('x').map(|d| d.parse().map_err(|_| self.err(format!("bad shape `{text}`")))).collect()
    }
}

struct Entry {
    name: String,
    group: String,
    tensor: Tensor,
}

fn read_entry(lines: &mut Lines) -> Result<Entry> {
    let header = lines.field("tensor")?;
    let parts: Vec<&str> = header.split(' ').collect();
    let [name, group, shape] = parts[..] else {
        return Err(lines.err(format!("tensor header `{header}` needs name, group and shape")));
    };
    let shape = lines.shape(shape)?;
    let data = lines.floats("data", shape.iter().product())?;
    let tensor = Tensor::new(shape, data).map_err(|e| lines.err(e.to_string()))?;
    Ok(Entry { name: name.to_string(), group: group.to_string(), tensor })
}

fn expect_header(lines: &mut Lines, magic: &str) -> Result<()> {
    let first = lines.next()?;
    if first != magic {
        return Err(lines.err(format!("expected `{magic}` header")));
    }
    let version: u32 = lines.number("version")?;
    if version != FORMAT_VERSION {
        return Err(lines.err(format!("unsupported format version {version}")));
    }
    Ok(())
}

fn fill(lines: &mut Lines, targets: Vec<&mut Tensor>, group: &str) -> Result<()> {
    for target in targets {
        let e = read_entry(lines)?;
        if e.group != group || e.tensor.shape() != target.shape() {
            return Err(lines.err(format!(
                "tensor `{}` ({} {:?}) does not fit a {group} slot of shape {:?}",
                e.name,
                e.group,
                e.tensor.shape(),
                target.shape()
            )));
        }
        *target = e.tensor;
    }
    Ok(())
}

pub fn checkpoint_from_text(text: &str, origin: &str) -> Result<Checkpoint> {
    let mut lines = Lines::new(text, origin);
    expect_header(&mut lines, CHECKPOINT_MAGIC)?;
    let class_count: usize = lines.number("class_count")?;
    let generator_count: usize = lines.number("generators")?;
    let has_psi = match lines.field("recovery")? {
        "present" => true,
        "absent" => false,
        other => return Err(lines.err(format!("recovery flag `{other}`"))),
    };
    let mut params = Vec::with_capacity(PARAM_NAMES.len());
    for (slot, name) in PARAM_NAMES.iter().enumerate() {
        let e = read_entry(&mut lines)?;
        if e.name != *name || e.group != LayerGroup::of_slot(slot).name() {
            return Err(lines.err(format!("expected parameter `{name}`, found `{}` in group `{}`", e.name, e.group)));
        }
        params.push(e.tensor);
    }
    let net = SegNet::from_params(params).map_err(|e| lines.err(e.to_string()))?;
    if net.class_count() != class_count {
        return Err(lines.err(format!("class_count {class_count} but the head has {} rows", net.class_count())));
    }
    // Templates only fix the shapes; every value is overwritten.
    let mut template_rng = Rng::seed_from_u64(0);
    let mut generators = Vec::with_capacity(generator_count);
    for _ in 0..generator_count {
        let mut g = GeneratorSet::new(&mut template_rng);
        fill(&mut lines, g.tensors_mut(), GENERATOR_GROUP)?;
        generators.push(g);
    }
    let psi = if has_psi {
        let mut p = RecoveryFn::new(&mut template_rng);
        fill(&mut lines, p.tensors_mut(), RECOVERY_GROUP)?;
        Some(p)
    } else {
        None
    };
    if lines.next()? != "end" {
        return Err(lines.err("expected `end`"));
    }
    Ok(Checkpoint { net, generators, psi })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint_to_text(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_text(&text, &path.display().to_string())
}

pub fn dataset_to_text(samples: &[TerrainSample]) -> String {
    let mut out = String::new();
    writeln!(out, "{DATASET_MAGIC}\nversion {FORMAT_VERSION}\nsamples {}", samples.len()).unwrap();
    for s in samples {
        writeln!(out, "sample {}", shape_text(s.image.shape())).unwrap();
        push_floats(&mut out, "image", s.image.data());
        out.push_str("labels");
        for l in &s.labels {
            write!(out, " {l}").unwrap();
        }
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

pub fn dataset_from_text(text: &str, origin: &str) -> Result<Vec<TerrainSample>> {
    let mut lines = Lines::new(text, origin);
    expect_header(&mut lines, DATASET_MAGIC)?;
    let count: usize = lines.number("samples")?;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let shape_field = lines.field("sample")?;
        let shape = lines.shape(shape_field)?;
        if shape.len() != 3 {
            return Err(lines.err(format!("image shape `{shape_field}` is not channels x height x width")));
        }
        let image = lines.floats("image", shape.iter().product())?;
        let label_line = lines.field("labels")?;
        let labels = label_line
            .split(' ')
            .map(|p| p.parse::<u8>().map_err(|_| lines.err(format!("bad label `{p}`"))))
            .collect::<Result<Vec<_>>>()?;
        let image = Tensor::new(shape, image).map_err(|e| lines.err(e.to_string()))?;
        samples.push(TerrainSample::new(image, labels).map_err(|e| lines.err(e.to_string()))?);
    }
    if lines.next()? != "end" {
        return Err(lines.err("expected `end`"));
    }
    Ok(samples)
}

pub fn write_dataset(path: &Path, samples: &[TerrainSample]) -> Result<()> {
    std::fs::write(path, dataset_to_text(samples)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<TerrainSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    dataset_from_text(&text, &path.display().to_string())
}
