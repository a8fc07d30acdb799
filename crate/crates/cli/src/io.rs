use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use cos_core::jsonl::read_jsonl;
use serde::de::DeserializeOwned;

/// A file, or standard input when the path is absent or `-`.
pub fn input(path: Option<&Path>) -> anyhow::Result<Box<dyn BufRead>> {
    match path {
        Some(p) if p != Path::new("-") => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Ok(Box::new(BufReader::new(f)))
        }
        _ => Ok(Box::new(BufReader::new(io::stdin()))),
    }
}

/// A file, or standard output when the path is absent or `-`.
pub fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    match path {
        Some(p) if p != Path::new("-") => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        _ => Ok(Box::new(BufWriter::new(io::stdout()))),
    }
}

pub fn read_all<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let r = input(Some(path))?;
    read_jsonl(r)
        .collect::<Result<Vec<T>, _>>()
        .with_context(|| format!("reading {}", path.display()))
}

pub fn must_exist(path: &Path) -> anyhow::Result<()> {
    if path == Path::new("-") || path.is_file() {
        Ok(())
    } else {
        Err(crate::config::usage(format!("{} does not exist", path.display())))
    }
}
