//! Named-tensor checkpoints: a text manifest (`<stem>.manifest`) listing
//! `name shape offset` per line, and a blob (`<stem>.bin`) of little-endian
//! `f32` values concatenated in manifest order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{GradError, ParamSet, Tensor};

const MANIFEST_HEADER: &str = "orientpose-checkpoint 1";

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("manifest"), stem.with_extension("bin"))
}

pub fn save_checkpoint(params: &ParamSet, stem: &Path) -> Result<(), GradError> {
    let (manifest_path, blob_path) = paths(stem);
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    let mut blob = Vec::with_capacity(params.numel() * 4);
    let mut offset = 0;
    for (name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(manifest, "{name} {} {offset}", dims.join("x")).expect("string write");
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += t.numel();
    }
    if let Some(dir) = manifest_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(&manifest_path, manifest)?;
    fs::write(&blob_path, blob)?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<ParamSet, GradError> {
    let (manifest_path, blob_path) = paths(stem);
    let manifest = fs::read_to_string(&manifest_path)?;
    let blob = fs::read(&blob_path)?;
    let mut lines = manifest.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(GradError::Checkpoint(format!(
            "{}: missing header `{MANIFEST_HEADER}`",
            manifest_path.display()
        )));
    }
    let mut params = ParamSet::new();
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| GradError::Checkpoint(format!("manifest line {}: {what}", lineno + 2));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, dims, offset] = fields[..] else {
            return Err(bad("expected `name shape offset`"));
        };
        let shape = dims
            .split('x')
            .map(str::parse)
            .collect::<Result<Vec<usize>, _>>()
            .map_err(|_| bad("bad shape"))?;
        let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
        let n: usize = shape.iter().product();
        let bytes = blob
            .get(offset * 4..(offset + n) * 4)
            .ok_or_else(|| bad("blob too short"))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        params.insert(name, Tensor::new(&shape, data)?);
    }
    Ok(params)
}
