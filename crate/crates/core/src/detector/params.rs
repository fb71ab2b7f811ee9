//! Model directories: `model.txt` (architecture), `index.txt` (parameter
//! name to file) and one VSFT dump per parameter.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, Params};
use crate::config::{apply_section, render_section};
use crate::tensor::{read_vsft_file, write_vsft_file};
use crate::{Error, Result};

fn file_name(i: usize, name: &str) -> String {
    format!("{i:03}_{name}.vsft")
}

pub fn save_model(dir: &Path, model: &Model) -> Result<()> {
    model.check()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join("model.txt");
    fs::write(&cfg_path, render_section(&model.config)).map_err(|e| Error::io(&cfg_path, e))?;
    let mut index = String::new();
    for (i, (name, t)) in model.params.names().iter().zip(model.params.tensors()).enumerate() {
        let f = file_name(i, name);
        write_vsft_file(&dir.join(&f), t)?;
        index.push_str(&format!("{name}\t{f}\n"));
    }
    let idx_path = dir.join("index.txt");
    fs::write(&idx_path, index).map_err(|e| Error::io(&idx_path, e))
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let cfg_path = dir.join("model.txt");
    let mut config = ModelConfig::default();
    apply_section(&mut config, &fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?)?;
    config.validate()?;
    let idx_path = dir.join("index.txt");
    let index = fs::read_to_string(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
    let mut entries = Vec::new();
    for line in index.lines().filter(|l| !l.trim().is_empty()) {
        let (name, file) = line
            .split_once('\t')
            .ok_or_else(|| Error::format("index.txt", format!("expected 'name<TAB>file', got '{line}'")))?;
        if file.contains('/') || file.contains('\\') || file.starts_with('.') {
            return Err(Error::format("index.txt", format!("parameter file '{file}' must be a plain file name")));
        }
        entries.push((name.to_string(), read_vsft_file(&dir.join(file))?));
    }
    let model = Model { config, params: Params::new(entries)? };
    model.check()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{build_model, Variant};

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig { variant: Variant::VsfData, frames: 2, ..ModelConfig::default() };
        let m = build_model(&cfg, 9).unwrap();
        save_model(dir.path(), &m).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.params.names(), m.params.names());
        // payloads are stored as f32
        for (a, b) in back.params.tensors().iter().zip(m.params.tensors()) {
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| *x == *y as f32 as f64));
        }
        let index = fs::read_to_string(dir.path().join("index.txt")).unwrap();
        assert!(index.starts_with("s1.conv.w\t000_s1.conv.w.vsft\n"));
    }

    #[test]
    fn mismatched_directory_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(&ModelConfig { variant: Variant::ConcatBaseline, ..ModelConfig::default() }, 1).unwrap();
        save_model(dir.path(), &m).unwrap();
        fs::write(dir.path().join("model.txt"), "variant = vsf_full\n").unwrap();
        assert!(load_model(dir.path()).is_err());
        fs::write(dir.path().join("model.txt"), "variant = concat_baseline\n").unwrap();
        fs::write(dir.path().join("index.txt"), "s1.conv.w\t../x.vsft\n").unwrap();
        assert!(load_model(dir.path()).is_err());
    }
}
