//! Dataset manifest: one `id,split,image_path,mask_path,scribble_path,L` line per record,
//! paths relative to the manifest, empty fields for absent files.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use super::formats::{read_bytes, read_image, read_labels, write_bytes};
use crate::error::{Error, Result, ResultExt};
use crate::grid::{Image, LabelMap, UNKNOWN};

pub const HEADER: &str = "id,split,image_path,mask_path,scribble_path,L";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub split: Split,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub scribbles: Option<PathBuf>,
    /// Label count including background.
    pub num_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<Record>,
}

fn opt_path(s: &str) -> Option<PathBuf> {
    let s = s.trim();
    if s.is_empty() || s == "-" {
        None
    } else {
        Some(PathBuf::from(s))
    }
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Manifest> {
        let mut records = Vec::new();
        let mut offset = 0u64;
        for (n, line) in text.split_inclusive('\n').enumerate() {
            let here = offset;
            offset += line.len() as u64;
            let line = line.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() || line.starts_with('#') || (n == 0 && line == HEADER) {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::format(path, here, format!("line {}: expected 6 fields, got {}", n + 1, f.len())));
            }
            let split = Split::parse(f[1].trim())
                .ok_or_else(|| Error::format(path, here, format!("line {}: unknown split {:?}", n + 1, f[1])))?;
            let num_labels = f[5]
                .trim()
                .parse::<usize>()
                .ok()
                .filter(|&l| (2..=UNKNOWN as usize).contains(&l))
                .ok_or_else(|| Error::format(path, here, format!("line {}: bad label count {:?}", n + 1, f[5])))?;
            let image = opt_path(f[2])
                .ok_or_else(|| Error::format(path, here, format!("line {}: missing image path", n + 1)))?;
            records.push(Record {
                id: f[0].trim().to_string(),
                split,
                image,
                mask: opt_path(f[3]),
                scribbles: opt_path(f[4]),
                num_labels,
            });
        }
        Ok(Manifest { records })
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let bytes = read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::format(path, e.utf8_error().valid_up_to() as u64, "manifest is not UTF-8"))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\n");
        let show = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.id,
                r.split,
                r.image.display(),
                show(&r.mask),
                show(&r.scribbles),
                r.num_labels
            ));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_text().as_bytes())
    }
}

/// A loaded record.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Option<LabelMap>,
    pub scribbles: Option<LabelMap>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub num_labels: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Loads every file the manifest references and validates ids, splits, dims and labels.
    pub fn load(manifest_path: &Path) -> Result<Dataset> {
        let manifest = Manifest::read(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let num_labels = manifest
            .records
            .first()
            .map(|r| r.num_labels)
            .ok_or_else(|| Error::Input(format!("{}: manifest lists no records", manifest_path.display())))?;
        let mut ids = HashSet::new();
        let mut ds = Dataset {
            num_labels,
            train: vec![],
            val: vec![],
            test: vec![],
        };
        for r in &manifest.records {
            let ctx = || format!("record {}", r.id);
            if !ids.insert(r.id.clone()) {
                return Err(Error::Input(format!("duplicate id {}", r.id)));
            }
            if r.num_labels != num_labels {
                return Err(Error::Input(format!("record {}: label count {} differs from {num_labels}", r.id, r.num_labels)));
            }
            match r.split {
                Split::Train if r.scribbles.is_none() => {
                    return Err(Error::Input(format!("train record {} has no scribbles", r.id)));
                }
                Split::Val | Split::Test if r.mask.is_none() => {
                    return Err(Error::Input(format!("{} record {} has no mask", r.split, r.id)));
                }
                _ => {}
            }
            let image = read_image(&root.join(&r.image)).context_with(ctx)?;
            let load = |p: &Option<PathBuf>, what: &str| -> Result<Option<LabelMap>> {
                let Some(p) = p else { return Ok(None) };
                let full = root.join(p);
                let m = read_labels(&full)?;
                if !m.same_dims(image.width(), image.height()) {
                    return Err(Error::format(
                        &full,
                        0,
                        format!(
                            "{what} is {}x{} but image is {}x{}",
                            m.width(),
                            m.height(),
                            image.width(),
                            image.height()
                        ),
                    ));
                }
                if let Some(bad) = m.data().iter().find(|&&v| v != UNKNOWN && v as usize >= num_labels) {
                    return Err(Error::Input(format!("{what} {} has label {bad} >= {num_labels}", full.display())));
                }
                Ok(Some(m))
            };
            let mask = load(&r.mask, "mask").context_with(ctx)?;
            if mask.as_ref().is_some_and(|m| m.has_unknown()) {
                return Err(Error::Input(format!("record {}: full mask contains UNKNOWN", r.id)));
            }
            let scribbles = load(&r.scribbles, "scribbles").context_with(ctx)?;
            let sample = Sample {
                id: r.id.clone(),
                image,
                mask,
                scribbles,
            };
            match r.split {
                Split::Train => ds.train.push(sample),
                Split::Val => ds.val.push(sample),
                Split::Test => ds.test.push(sample),
            }
        }
        Ok(ds)
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}
