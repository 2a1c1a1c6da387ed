use std::io::Write;
use std::path::{Path, PathBuf};

use pascore::{Error, Result};

/// Write a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = parent {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp: PathBuf = path.to_path_buf();
    let mut name = tmp
        .file_name()
        .ok_or_else(|| Error::invalid_input(format!("bad output path {}", path.display())))?
        .to_os_string();
    name.push(".tmp");
    tmp.set_file_name(name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// 8-bit binary PGM, one row per token, row-normalized so the strongest
/// weight in each row maps to 255.
pub fn attention_pgm_bytes(map: &pascore::score::AttentionMap) -> Vec<u8> {
    let w = map.n_frames();
    let h = map.n_tokens();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for i in 0..h {
        let row = map.row(i);
        let max = row.iter().cloned().fold(0.0f32, f32::max).max(f32::MIN_POSITIVE);
        for &v in row {
            out.push(((v / max) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn attention_csv_bytes(map: &pascore::score::AttentionMap) -> Vec<u8> {
    let mut out = String::new();
    for i in 0..map.n_tokens() {
        let row = map.row(i);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    out.into_bytes()
}
