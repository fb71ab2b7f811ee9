//! Clip collections on disk: `clips/NNNNNN/` directories listed by one
//! plain-text manifest per split.

use std::fs;
use std::path::{Path, PathBuf};

use crate::radiometry::{generate_clip, read_clip, write_clip, ClipSample, GeneratorConfig};
use crate::{Error, Result};

/// Ordered list of clip directories. Relative entries resolve against the
/// manifest's own directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<String>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        if entries.is_empty() {
            return Err(Error::format("manifest", format!("{} lists no clips", path.display())));
        }
        let root = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        Ok(Self { root, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for e in &self.entries {
            text.push_str(e);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clip_dir(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i])
    }

    pub fn load(&self, i: usize) -> Result<ClipSample> {
        read_clip(&self.clip_dir(i))
    }

    pub fn load_all(&self) -> Result<Vec<ClipSample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

/// Generates `count` clips per split under `out`, numbering clips
/// consecutively across splits, and writes `<split>.txt` for each.
/// Clips are produced on all available cores; the result does not depend on
/// the thread count.
pub fn generate_dataset(out: &Path, cfg: &GeneratorConfig, seed: u64, splits: &[(&str, usize)]) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let total: usize = splits.iter().map(|s| s.1).sum();
    let clips_dir = out.join("clips");
    fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(total.max(1));
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let clips_dir = &clips_dir;
                s.spawn(move || -> Result<()> {
                    for i in (w..total).step_by(workers) {
                        let clip = generate_clip(seed, i as u64, cfg)?;
                        write_clip(&clips_dir.join(format!("{i:06}")), &clip)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generator thread panicked")).collect()
    });
    results.into_iter().collect::<Result<()>>()?;
    let mut next = 0;
    let mut paths = Vec::new();
    for (name, count) in splits {
        let m = Manifest {
            root: out.to_path_buf(),
            entries: (next..next + count).map(|i| format!("clips/{i:06}")).collect(),
        };
        next += count;
        let path = out.join(format!("{name}.txt"));
        m.write(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig { width: 32, height: 32, frames: 2, ..GeneratorConfig::default() };
        let paths = generate_dataset(dir.path(), &cfg, 5, &[("train", 2), ("test", 1)]).unwrap();
        let train = Manifest::read(&paths[0]).unwrap();
        let test = Manifest::read(&paths[1]).unwrap();
        assert_eq!(train.entries, vec!["clips/000000", "clips/000001"]);
        assert_eq!(test.entries, vec!["clips/000002"]);
        assert_eq!(test.load(0).unwrap(), generate_clip(5, 2, &cfg).unwrap());
    }

    #[test]
    fn empty_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        fs::write(&p, "# nothing\n\n").unwrap();
        assert!(Manifest::read(&p).is_err());
    }
}
