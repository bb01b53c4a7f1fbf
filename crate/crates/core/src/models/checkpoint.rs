//! Named tensor archives: `<stem>.bin` holds concatenated tensor records and
//! `<stem>.idx` lists `name<TAB>byte offset` per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::io::{encoded_len, read_tensor, write_tensor};
use crate::tensor::Tensor;

pub const WEIGHTS_STEM: &str = "weights";

pub fn save_named<'a>(dir: &Path, stem: &str, items: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin_path = dir.join(format!("{stem}.bin"));
    let idx_path = dir.join(format!("{stem}.idx"));
    let mut bin = BufWriter::new(File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?);
    let mut idx = BufWriter::new(File::create(&idx_path).map_err(|e| Error::io(&idx_path, e))?);
    let mut offset = 0usize;
    for (name, t) in items {
        if name.contains(['\t', '\n']) {
            return Err(Error::Format(format!("tensor name {name:?} contains a tab or newline")));
        }
        write_tensor(&mut bin, t).map_err(|e| Error::io(&bin_path, e))?;
        writeln!(idx, "{name}\t{offset}").map_err(|e| Error::io(&idx_path, e))?;
        offset += encoded_len(t);
    }
    bin.flush().map_err(|e| Error::io(&bin_path, e))?;
    idx.flush().map_err(|e| Error::io(&idx_path, e))?;
    Ok(())
}

pub fn load_named(dir: &Path, stem: &str) -> Result<IndexMap<String, Tensor>> {
    let bin_path = dir.join(format!("{stem}.bin"));
    let idx_path = dir.join(format!("{stem}.idx"));
    let idx = BufReader::new(File::open(&idx_path).map_err(|e| Error::io(&idx_path, e))?);
    let mut bin = BufReader::new(File::open(&bin_path).map_err(|e| Error::io(&bin_path, e))?);
    let mut out = IndexMap::new();
    for (lineno, line) in idx.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&idx_path, e))?;
        if line.is_empty() {
            continue;
        }
        let (name, offset) = line
            .split_once('\t')
            .and_then(|(n, o)| Some((n, o.parse::<u64>().ok()?)))
            .ok_or_else(|| Error::Format(format!("{}:{}: malformed index line", idx_path.display(), lineno + 1)))?;
        bin.seek(SeekFrom::Start(offset)).map_err(|e| Error::io(&bin_path, e))?;
        let t = read_tensor(&mut bin)?;
        if out.insert(name.to_string(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor name `{name}` in {}", idx_path.display())));
        }
    }
    Ok(out)
}

impl ParamStore {
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_named(dir, WEIGHTS_STEM, self.iter())
    }

    /// Loads weights saved by [`ParamStore::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, t) in load_named(dir, WEIGHTS_STEM)? {
            store.insert(name, t);
        }
        Ok(store)
    }

    /// Checks that names and shapes agree with `specs`, in order.
    pub fn check_against(&self, specs: &[super::ParamSpec]) -> Result<()> {
        if self.len() != specs.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                self.len(),
                specs.len()
            )));
        }
        for ((name, t), spec) in self.iter().zip(specs) {
            if name != spec.name || t.shape() != spec.shape.as_slice() {
                return Err(Error::Format(format!(
                    "checkpoint tensor `{name}` {:?} does not match `{}` {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }
}
