use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use jigwm::detect::conform;
use jigwm::image::Image;
use serde::Deserialize;

use crate::commands::CliError;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Images of `dir` in filename order, brought to `height × width`. Every
/// resized image gets one warning line on stderr.
pub fn load_dir(dir: &Path, height: usize, width: usize) -> Result<Vec<(String, Image<f32>)>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::usage(format!("no images in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            let img = Image::<f32>::decode(&bytes)?;
            let name = p.file_name().expect("listed file").to_string_lossy().into_owned();
            let (w0, h0) = (img.width(), img.height());
            let (img, changed) = conform(&img, height, width);
            if changed {
                eprintln!("warning: {name}: {w0}x{h0} letterboxed to {width}x{height}");
            }
            Ok((name, img))
        })
        .collect()
}

/// Output name for an input file: same stem, PNG.
pub fn png_name(name: &str) -> String {
    match Path::new(name).file_stem() {
        Some(s) => format!("{}.png", s.to_string_lossy()),
        None => format!("{name}.png"),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstructionLine {
    image: String,
    instruction: String,
}

/// `{"image": FILENAME, "instruction": TEXT}` per line.
pub fn load_instructions(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: InstructionLine =
            serde_json::from_str(&line).map_err(|e| CliError::usage(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.insert(l.image, l.instruction);
    }
    if out.is_empty() {
        return Err(CliError::usage(format!("{} holds no instructions", path.display())));
    }
    Ok(out)
}
