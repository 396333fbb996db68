use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One row of a dataset manifest. Relative paths are resolved against the
/// manifest's directory when read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub group: String,
    pub volume_path: PathBuf,
    pub labels_path: PathBuf,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers()?.clone();
    for col in ["id", "group", "volume_path", "labels_path"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::format(path, format!("manifest is missing column `{col}`")));
        }
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let mut e: ManifestEntry = row?;
        if e.volume_path.is_relative() {
            e.volume_path = base.join(&e.volume_path);
        }
        if e.labels_path.is_relative() {
            e.labels_path = base.join(&e.labels_path);
        }
        out.push(e);
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = out.iter().find(|e| !seen.insert(e.id.as_str())) {
        return Err(Error::format(path, format!("duplicate id `{}`", dup.id)));
    }
    Ok(out)
}

/// Writes entries verbatim; callers decide whether paths are relative.
pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for e in entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Per group: `train_per_group` items to train, `val_per_group` to
/// validation, the remainder to test. Groups are visited in sorted order and
/// shuffled by one seeded stream, so the split depends only on the seed and
/// the input. Each part keeps the input order.
pub fn split_dataset<T: Clone>(
    items: &[T],
    group_of: impl Fn(&T) -> &str,
    train_per_group: usize,
    val_per_group: usize,
    seed: u64,
) -> Result<Split<T>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        groups.entry(group_of(item)).or_default().push(i);
    }
    let need = train_per_group + val_per_group;
    for (g, members) in &groups {
        if members.len() < need {
            return Err(invalid!(
                "group `{g}` has {} items but {train_per_group} train + {val_per_group} val were requested",
                members.len()
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..train_per_group]);
        val.extend_from_slice(&members[train_per_group..need]);
        test.extend_from_slice(&members[need..]);
    }
    let pick = |mut idx: Vec<usize>| {
        idx.sort_unstable();
        idx.into_iter().map(|i| items[i].clone()).collect()
    };
    Ok(Split {
        train: pick(train),
        val: pick(val),
        test: pick(test),
    })
}
