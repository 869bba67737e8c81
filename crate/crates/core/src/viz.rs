//! Grayscale heatmaps of confidence and patch-word similarity.
//!
//! Each map is min-max normalised on its own into 8-bit binary PGM. The
//! range used for every file goes to `ranges.txt` next to it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::correspondence::cosine_table;
use crate::error::{Error, IoContext, Result};
use crate::model::{run_clip, ModelParams};
use crate::synthgen::VideoSample;

/// Name of the sidecar listing `file min max` per map.
pub const RANGES_FILE: &str = "ranges.txt";

/// Scales `values` to 0..=255. A constant map becomes all zeros.
pub fn normalize(values: &[f64]) -> (Vec<u8>, f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let bytes = values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - min) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    (bytes, min, max)
}

pub fn encode_pgm(pixels: &[u8], height: usize, width: usize) -> Result<Vec<u8>> {
    if pixels.len() != height * width {
        return Err(Error::Config(format!(
            "{} pixels for a {height}x{width} map",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Inverse of [`encode_pgm`]: `(height, width, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Config("not an 8-bit binary PGM".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    let (w, h): (usize, usize) = match (fields[1].parse(), fields[2].parse()) {
        (Ok(w), Ok(h)) => (w, h),
        _ => return Err(bad()),
    };
    if fields[0] != "P5" || fields[3] != "255" || bytes.len() != pos + 1 + w * h {
        return Err(bad());
    }
    Ok((h, w, bytes[pos + 1..].to_vec()))
}

/// One written heatmap.
#[derive(Clone, Debug, PartialEq)]
pub struct MapEntry {
    pub path: PathBuf,
    pub min: f64,
    pub max: f64,
}

/// A map's file name and its raw values.
pub type NamedMap = (String, Vec<f64>);

/// Raw values of every map for `sample`, keyed by file name.
///
/// Per frame `t`: `conf_tNN` holds the cell confidences and `sim_tNN_wMM_word`
/// the cosine similarity of every patch to word `MM`.
pub fn sample_maps(params: &ModelParams, sample: &VideoSample) -> Result<(usize, usize, Vec<NamedMap>)> {
    let out = run_clip(params, &sample.clip, &sample.tokens)?;
    let mut maps = Vec::new();
    for (t, pred) in out.predictions.iter().enumerate() {
        maps.push((format!("conf_t{t:02}.pgm"), pred.confidences()));
        let table = cosine_table(&out.patches[t], &out.words)?;
        for (s, word) in sample.tokens.raw_words.iter().enumerate() {
            let column = (0..table.rows()).map(|p| table.get(&[p, s])).collect();
            maps.push((format!("sim_t{t:02}_w{s:02}_{word}.pgm"), column));
        }
    }
    Ok((out.grid.grid_h, out.grid.grid_w, maps))
}

/// Writes every map of [`sample_maps`] plus the range sidecar into `dir`.
pub fn write_sample_maps(params: &ModelParams, sample: &VideoSample, dir: &Path) -> Result<Vec<MapEntry>> {
    fs::create_dir_all(dir).at(dir)?;
    let (h, w, maps) = sample_maps(params, sample)?;
    let mut sidecar = String::from("file min max\n");
    let mut entries = Vec::with_capacity(maps.len());
    for (name, values) in maps {
        let (pixels, min, max) = normalize(&values);
        let path = dir.join(&name);
        fs::write(&path, encode_pgm(&pixels, h, w)?).at(&path)?;
        writeln!(sidecar, "{name} {min:e} {max:e}").expect("string write");
        entries.push(MapEntry { path, min, max });
    }
    let side = dir.join(RANGES_FILE);
    fs::write(&side, sidecar).at(&side)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_constant() {
        let (px, min, max) = normalize(&[0.3; 6]);
        assert_eq!(px, vec![0; 6]);
        assert_eq!((min, max), (0.3, 0.3));
    }

    #[test]
    fn extremes_map_to_full_range() {
        let (px, min, max) = normalize(&[-1.0, 0.0, 1.0]);
        assert_eq!(px, vec![0, 128, 255]);
        assert_eq!((min, max), (-1.0, 1.0));
    }

    #[test]
    fn pgm_round_trip() {
        let px: Vec<u8> = (0..12).collect();
        let bytes = encode_pgm(&px, 3, 4).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(decode_pgm(&bytes).unwrap(), (3, 4, px));
        assert!(encode_pgm(&[0; 5], 2, 2).is_err());
        assert!(decode_pgm(b"P2\n1 1\n255\n\0").is_err());
    }
}
