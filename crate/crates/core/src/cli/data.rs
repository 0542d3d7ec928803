//! Dataset directories: `.occseq` files plus a manifest assigning each
//! scene to a split by a hash of its seed.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{io_err, CliError, CliResult};
use crate::occgrid::{read_sequence_file, OccSequence, SequenceMeta};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?} (train, val or test)")),
        }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 80/10/10 train/val/test assignment from the scene seed.
pub fn split_of(seed: u64) -> Split {
    match mix(seed) % 10 {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

/// Seed of scene `i` of a dataset generated with `seed`.
pub(crate) fn scene_seed(seed: u64, i: usize) -> u64 {
    mix(mix(seed) ^ i as u64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEntry {
    pub file: String,
    pub seed: u64,
    pub scene_id: String,
    pub split: Split,
    pub frames: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<DatasetEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# file seed scene_id split frames\n");
        for e in &self.entries {
            s.push_str(&format!("{} {} {} {} {}\n", e.file, e.seed, e.scene_id, e.split, e.frames));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || format!("manifest line {}: {line:?}", n + 1);
            if f.len() != 5 {
                return Err(bad());
            }
            entries.push(DatasetEntry {
                file: f[0].to_string(),
                seed: f[1].parse().map_err(|_| bad())?,
                scene_id: f[2].to_string(),
                split: f[3].parse()?,
                frames: f[4].parse().map_err(|_| bad())?,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        Manifest::parse(&text).map_err(|e| io_err(&path, e))
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(MANIFEST);
        fs::write(&path, self.to_text()).map_err(|e| io_err(&path, e))
    }
}

/// A loaded split: file names alongside sequences.
pub(crate) struct SplitData {
    pub names: Vec<String>,
    pub seqs: Vec<OccSequence>,
}

pub(crate) fn load_split(dir: &Path, split: Split) -> CliResult<SplitData> {
    let manifest = Manifest::read(dir)?;
    let mut names = Vec::new();
    let mut seqs = Vec::new();
    for e in manifest.entries.iter().filter(|e| e.split == split) {
        let path: PathBuf = dir.join(&e.file);
        let seq = read_sequence_file(&path).map_err(|err| io_err(&path, err))?;
        names.push(e.file.clone());
        seqs.push(seq.with_meta(SequenceMeta {
            scene_id: e.scene_id.clone(),
            seed: e.seed,
        }));
    }
    Ok(SplitData { names, seqs })
}

/// All sequences must share one grid layout.
pub(crate) fn check_layout(seqs: &[OccSequence], dims: [usize; 3], classes: u8, what: &str) -> CliResult<()> {
    for (i, s) in seqs.iter().enumerate() {
        if s.dims() != dims || s.num_classes() != classes {
            return Err(CliError::Mismatch(format!(
                "{what} sequence {i} has grid {:?} with {} classes, expected {dims:?} with {classes}",
                s.dims(),
                s.num_classes()
            )));
        }
    }
    Ok(())
}
