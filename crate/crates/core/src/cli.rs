//! Command implementations behind the `gasvsf` binary. Commands communicate
//! only through files in their output directories.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::bbox::BBox;
use crate::checks::{gradient_suite, OpCheck, Scope};
use crate::config::RunConfig;
use crate::dataset::{generate_dataset, Manifest};
use crate::detector::{build_model, infer_clip, load_model, offset_fields, save_model, train, write_detections_csv, write_loss_csv, Detection, Model, TrainReport};
use crate::eval::{coco_ap, objectness, EvalConfig, EvalImage, EvalReport};
use crate::image::GrayImage;
use crate::radiometry::{read_clip, ClipSample};
use crate::tensor::{read_vsft_file, write_vsft_file};
use crate::vsf::OffsetField;
use crate::{Error, Result};

/// Name of the archived configuration in every output directory.
pub const CONFIG_FILE: &str = "config.txt";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    Ok(std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Logs the resolved configuration and archives it with the seed.
pub fn archive_config(out: &Path, cfg: &RunConfig, seed: u64) -> Result<()> {
    let text = format!("# seed = {seed}\n{}", cfg.to_text());
    for line in text.lines() {
        log::info!("config: {line}");
    }
    create_dir(out)?;
    write_text(&out.join(CONFIG_FILE), &text)
}

/// Generates the train and test splits (empty splits are skipped) and
/// returns the manifest paths.
pub fn cmd_generate(cfg: &RunConfig, out: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    archive_config(out, cfg, seed)?;
    let splits: Vec<(&str, usize)> = [("train", cfg.dataset.train), ("test", cfg.dataset.test)]
        .into_iter()
        .filter(|s| s.1 > 0)
        .collect();
    if splits.is_empty() {
        return Err(Error::Config("dataset.train and dataset.test are both zero".into()));
    }
    let paths = generate_dataset(out, &cfg.generator, seed, &splits)?;
    for p in &paths {
        log::info!("wrote {}", p.display());
    }
    Ok(paths)
}

/// Trains `cfg.model` on the manifest's clips. Writes `model/`, `loss.csv`
/// and the archived configuration under `out`.
pub fn cmd_train(cfg: &RunConfig, manifest: &Path, out: &Path, seed: u64) -> Result<TrainReport> {
    archive_config(out, cfg, seed)?;
    let clips = Manifest::read(manifest)?.load_all()?;
    log::info!("training {} on {} clips", cfg.model.variant.name(), clips.len());
    let mut model = build_model(&cfg.model, seed)?;
    let mut epoch = 0;
    let mut sum = 0.0;
    let mut n = 0usize;
    let report = train(&mut model, &clips, &cfg.train, seed, |s| {
        if s.epoch != epoch {
            if n > 0 {
                log::info!("epoch {epoch}: mean loss {:.5}", sum / n as f64);
            }
            (epoch, sum, n) = (s.epoch, 0.0, 0);
        }
        sum += s.total;
        n += 1;
        log::debug!("epoch {} step {}: loss {:.5}", s.epoch, s.step, s.total);
    })?;
    if n > 0 {
        log::info!("epoch {epoch}: mean loss {:.5}", sum / n as f64);
    }
    save_model(&out.join("model"), &model)?;
    let loss = out.join("loss.csv");
    write_loss_csv(create_file(&loss)?, &report).map_err(|e| Error::io(&loss, e))?;
    Ok(report)
}

/// Runs `model` on every clip and scores the detections frame by frame.
pub fn evaluate_clips(model: &Model, clips: &[ClipSample], cfg: &EvalConfig) -> Result<(EvalReport, Vec<Vec<Detection>>)> {
    let mut images = Vec::new();
    let mut all = Vec::with_capacity(clips.len());
    for (ci, clip) in clips.iter().enumerate() {
        let dets = infer_clip(model, clip)?;
        for (f, gt) in clip.boxes.iter().enumerate() {
            images.push(EvalImage {
                gts: gt.iter().copied().collect(),
                dets: dets.iter().filter(|d| d.frame == f).map(|d| (d.bbox, d.score)).collect(),
                clear: clip.meta.clear,
                clip: ci,
            });
        }
        all.push(dets);
    }
    Ok((coco_ap(&images, cfg)?, all))
}

/// Evaluates the model in `run/model` on a manifest. Writes `report.json`,
/// `report.txt` and per-clip detections under `out`.
pub fn cmd_eval(cfg: &RunConfig, run: &Path, manifest: &Path, out: &Path) -> Result<EvalReport> {
    cfg.eval.validate()?;
    let model = load_model(&run.join("model"))?;
    let m = Manifest::read(manifest)?;
    let clips = m.load_all()?;
    for line in crate::config::render_section(&cfg.eval).lines() {
        log::info!("config: eval.{line}");
    }
    let (report, dets) = evaluate_clips(&model, &clips, &cfg.eval)?;
    let det_dir = out.join("detections");
    create_dir(&det_dir)?;
    for (i, d) in dets.iter().enumerate() {
        let p = det_dir.join(format!("{i:06}.csv"));
        write_detections_csv(create_file(&p)?, d).map_err(|e| Error::io(&p, e))?;
    }
    write_text(&out.join("report.json"), &(report.to_json() + "\n"))?;
    write_text(&out.join("report.txt"), &report.to_table())?;
    Ok(report)
}

/// Gradient checks of the requested scopes.
pub fn cmd_gradcheck(scopes: &[Scope]) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for &s in scopes {
        out.extend(gradient_suite(s)?);
    }
    Ok(out)
}

/// One line of the gradient-check report.
pub fn gradcheck_line(c: &OpCheck) -> String {
    format!(
        "{} {} max_rel_error={:.3e} checked={} skipped={}",
        if c.report.passed { "PASS" } else { "FAIL" },
        c.name,
        c.report.max_rel_error,
        c.report.checked,
        c.report.skipped
    )
}

pub const OBJECTNESS_HEADER: &str = "source,frame,x1,y1,x2,y2,ms,cc,ed,ss";

fn objectness_row<W: Write>(w: &mut W, source: &str, frame: usize, img: &GrayImage, b: &BBox) -> Result<()> {
    let s = objectness(img, b)?;
    writeln!(w, "{source},{frame},{},{},{},{},{},{},{},{}", b.x1, b.y1, b.x2, b.y2, s.ms, s.cc, s.ed, s.ss)
        .map_err(|e| Error::io("<objectness csv>", e))
}

/// Scores every annotated frame of the manifest's clips.
pub fn cmd_objectness_manifest<W: Write>(manifest: &Path, mut w: W) -> Result<()> {
    let m = Manifest::read(manifest)?;
    writeln!(w, "{OBJECTNESS_HEADER}").map_err(|e| Error::io("<objectness csv>", e))?;
    for i in 0..m.len() {
        let clip = m.load(i)?;
        for (f, b) in clip.boxes.iter().enumerate() {
            if let Some(b) = b {
                objectness_row(&mut w, &m.entries[i], f, &clip.frames[f], b)?;
            }
        }
    }
    Ok(())
}

/// Scores boxes listed as `image.pgm x1 y1 x2 y2` lines; relative image
/// paths resolve against the list's directory.
pub fn cmd_objectness_list<W: Write>(list: &Path, mut w: W) -> Result<()> {
    let file = fs::File::open(list).map_err(|e| Error::io(list, e))?;
    let root = list.parent().unwrap_or(Path::new("."));
    writeln!(w, "{OBJECTNESS_HEADER}").map_err(|e| Error::io("<objectness csv>", e))?;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(list, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::format("box list", format!("line {}: expected 'image x1 y1 x2 y2', got '{line}'", n + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let v: Vec<f64> = f[1..].iter().map(|s| s.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        let b = BBox::new(v[0], v[1], v[2], v[3])?;
        let img = GrayImage::read_pgm(&root.join(f[0]))?;
        objectness_row(&mut w, f[0], 0, &img, &b)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Pgm,
    Csv,
}

impl ExportFormat {
    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "pgm" => Ok(Self::Pgm),
            "csv" => Ok(Self::Csv),
            _ => Err(Error::InvalidArgument(format!("unknown export format '{s}' (pgm, csv)"))),
        }
    }
}

/// Gray level of an offset component: 128 at zero, 32 levels per voxel.
fn offset_gray(v: f64) -> u8 {
    (128.0 + 32.0 * v).round().clamp(0.0, 255.0) as u8
}

/// Writes `<name>.csv` or one PGM per component and frame,
/// `<name>_<dx|dy|dt>_<frame>.pgm`.
pub fn export_offset_field(field: &OffsetField, name: &str, format: ExportFormat, out: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    match format {
        ExportFormat::Csv => {
            let p = out.join(format!("{name}.csv"));
            field.write_csv(create_file(&p)?).map_err(|e| Error::io(&p, e))?;
            Ok(vec![p])
        }
        ExportFormat::Pgm => {
            let mut paths = Vec::new();
            let (h, w, t) = (field.height, field.width, field.frames);
            for (k, comp) in ["dx", "dy", "dt"].iter().enumerate() {
                for f in 0..t {
                    let px = (0..h * w).map(|i| offset_gray(field.values[(i * t + f) * 3 + k])).collect();
                    let p = out.join(format!("{name}_{comp}_{f:03}.pgm"));
                    GrayImage::new(w, h, px)?.write_pgm(&p)?;
                    paths.push(p);
                }
            }
            Ok(paths)
        }
    }
}

/// Exports a `[H, W, T, 3]` offset dump.
pub fn cmd_export_offsets(dump: &Path, format: ExportFormat, out: &Path) -> Result<Vec<PathBuf>> {
    let field = OffsetField::from_tensor(&read_vsft_file(dump)?)?;
    let name = dump.file_stem().and_then(|s| s.to_str()).unwrap_or("offsets");
    export_offset_field(&field, name, format, out)
}

/// Dumps the offsets a trained model applies to one window of a clip, as
/// VSFT files plus the requested format.
pub fn cmd_export_run_offsets(run: &Path, clip: &Path, window: usize, channel: usize, format: ExportFormat, out: &Path) -> Result<Vec<PathBuf>> {
    let model = load_model(&run.join("model"))?;
    let clip = read_clip(clip)?;
    let fields = offset_fields(&model, &clip, window, channel)?;
    if fields.is_empty() {
        return Err(Error::InvalidArgument(format!("variant {} applies no shifts", model.config.variant.name())));
    }
    create_dir(out)?;
    let mut paths = Vec::new();
    for (name, f) in &fields {
        let p = out.join(format!("{name}.vsft"));
        write_vsft_file(&p, &f.to_tensor())?;
        paths.push(p);
        paths.extend(export_offset_field(f, name, format, out)?);
    }
    Ok(paths)
}

/// Exports a clip: frames with the annotated box outlined (PGM) or the
/// annotations as `frame,x1,y1,x2,y2` rows (CSV; empty fields for frames
/// without gas).
pub fn cmd_export_clip(clip: &Path, format: ExportFormat, out: &Path) -> Result<Vec<PathBuf>> {
    let clip = read_clip(clip)?;
    create_dir(out)?;
    match format {
        ExportFormat::Csv => {
            let p = out.join("boxes.csv");
            let mut w = create_file(&p)?;
            let mut rows = String::from("frame,x1,y1,x2,y2\n");
            for (f, b) in clip.boxes.iter().enumerate() {
                rows.push_str(&match b {
                    Some(b) => format!("{f},{},{},{},{}\n", b.x1, b.y1, b.x2, b.y2),
                    None => format!("{f},,,,\n"),
                });
            }
            w.write_all(rows.as_bytes()).map_err(|e| Error::io(&p, e))?;
            Ok(vec![p])
        }
        ExportFormat::Pgm => {
            let mut paths = Vec::new();
            for (f, (img, b)) in clip.frames.iter().zip(&clip.boxes).enumerate() {
                let mut img = img.clone();
                if let Some(b) = b {
                    outline(&mut img, b);
                }
                let p = out.join(format!("{f:06}.pgm"));
                img.write_pgm(&p)?;
                paths.push(p);
            }
            Ok(paths)
        }
    }
}

fn outline(img: &mut GrayImage, b: &BBox) {
    let (w, h) = (img.width(), img.height());
    let x0 = (b.x1.floor() as usize).min(w - 1);
    let y0 = (b.y1.floor() as usize).min(h - 1);
    let x1 = (b.x2.ceil() as usize).clamp(1, w) - 1;
    let y1 = (b.y2.ceil() as usize).clamp(1, h) - 1;
    let px = img.pixels_mut();
    for x in x0..=x1 {
        px[y0 * w + x] = 255;
        px[y1 * w + x] = 255;
    }
    for y in y0..=y1 {
        px[y * w + x0] = 255;
        px[y * w + x1] = 255;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        for kv in [
            "dataset.train=2",
            "dataset.test=1",
            "generator.width=32",
            "generator.height=32",
            "generator.frames=2",
            "model.frames=2",
            "model.input_size=16",
            "model.channels=16,16,16,16",
            "model.rpn_hidden=8",
            "model.head_hidden=8",
            "model.roi_bins=2",
            "model.anchor_sizes=6,12",
            "train.epochs=1",
        ] {
            let (k, v) = kv.split_once('=').unwrap();
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn pipeline_writes_its_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let data = dir.path().join("data");
        let manifests = cmd_generate(&cfg, &data, 1).unwrap();
        assert_eq!(manifests, [data.join("train.txt"), data.join("test.txt")]);
        let archived = fs::read_to_string(data.join(CONFIG_FILE)).unwrap();
        assert!(archived.starts_with("# seed = 1\n"));
        let mut back = RunConfig::default();
        back.apply_text(&archived).unwrap();
        assert_eq!(back, cfg);

        let run = dir.path().join("run");
        let report = cmd_train(&cfg, &manifests[0], &run, 1).unwrap();
        assert_eq!(report.steps.len(), 1);
        assert!(run.join("model/index.txt").exists());
        assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap().lines().count(), 2);

        let eval_dir = run.join("eval");
        let r = cmd_eval(&cfg, &run, &manifests[1], &eval_dir).unwrap();
        assert_eq!(r.images, 2);
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
        assert_eq!(json["images"], 2);
        assert!(eval_dir.join("detections/000000.csv").exists());

        let exported = cmd_export_run_offsets(&run, &data.join("clips/000002"), 0, 0, ExportFormat::Csv, &dir.path().join("off")).unwrap();
        assert!(exported.iter().any(|p| p.ends_with("stage1.csv")));
        let mut csv = Vec::new();
        cmd_objectness_manifest(&manifests[1], &mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with(OBJECTNESS_HEADER));
    }

    #[test]
    fn zero_offsets_export_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let dump = dir.path().join("zero.vsft");
        write_vsft_file(&dump, &OffsetField::zeros(3, 2, 2).to_tensor()).unwrap();
        let out = cmd_export_offsets(&dump, ExportFormat::Csv, dir.path()).unwrap();
        let text = fs::read_to_string(&out[0]).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("dx,dy,dt"));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 12);
        assert!(rows.iter().all(|r| r.split(',').all(|v| v.parse::<f64>().unwrap() == 0.0)));
        let pgm = cmd_export_offsets(&dump, ExportFormat::Pgm, &dir.path().join("pgm")).unwrap();
        assert_eq!(pgm.len(), 6);
        assert!(GrayImage::read_pgm(&pgm[0]).unwrap().pixels().iter().all(|&p| p == 128));
    }

    #[test]
    fn clip_export_formats() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        cmd_generate(&cfg, dir.path(), 3).unwrap();
        let clip = dir.path().join("clips/000000");
        let csv = cmd_export_clip(&clip, ExportFormat::Csv, &dir.path().join("x")).unwrap();
        assert_eq!(fs::read_to_string(&csv[0]).unwrap().lines().count(), 3);
        assert_eq!(cmd_export_clip(&clip, ExportFormat::Pgm, &dir.path().join("y")).unwrap().len(), 2);
        assert!(ExportFormat::from_name("png").is_err());
    }
}
