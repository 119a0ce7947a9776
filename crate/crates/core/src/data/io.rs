//! Dataset directory layout:
//!
//! ```text
//! index.csv    file,mask_file,label,hospital_id,patient_id   (mask_file = none if absent)
//! split.csv    file,split
//! images/*.pgm 8-bit P5
//! masks/*.pgm  8-bit P5, 0 or 255
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{BBox, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const INDEX_HEADER: &str = "file,mask_file,label,hospital_id,patient_id";
const SPLIT_HEADER: &str = "file,split";

pub fn encode_pgm(w: usize, h: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary 8-bit PGM, returning `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Dataset(format!("malformed PGM: {m}"));
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("expected P5 magic"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let data = bytes.get(pos..).ok_or_else(|| bad("missing raster"))?;
    if data.len() != w * h {
        return Err(bad(&format!("raster has {} bytes, expected {}", data.len(), w * h)));
    }
    Ok((w, h, data.to_vec()))
}

pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(w, h, pixels)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn to_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn from_bytes(v: &[u8]) -> Vec<f32> {
    v.iter().map(|&b| b as f32 / 255.0).collect()
}

pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    for dir in ["images", "masks"] {
        let p = root.join(dir);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    let mut split = String::from(SPLIT_HEADER);
    split.push('\n');
    for s in &ds.samples {
        let (h, w) = (s.image.shape()[0], s.image.shape()[1]);
        let file = format!("images/{}.pgm", s.id);
        write_pgm(&root.join(&file), w, h, &to_bytes(s.image.data()))?;
        let mask_file = match &s.mask {
            Some(m) => {
                let f = format!("masks/{}.pgm", s.id);
                let bin: Vec<u8> = m.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
                write_pgm(&root.join(&f), w, h, &bin)?;
                f
            }
            None => "none".to_string(),
        };
        index.push_str(&format!("{file},{mask_file},{},{},{}\n", s.label, s.hospital, s.patient));
        split.push_str(&format!("{file},{}\n", s.split));
    }
    for (name, body) in [("index.csv", index), ("split.csv", split)] {
        let p = root.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn read_csv(path: &Path, header: &str) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header) {
        return Err(Error::Dataset(format!("{}: expected header `{header}`", path.display())));
    }
    let cols = header.split(',').count();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if row.len() != cols {
            return Err(Error::Dataset(format!("{} row {}: expected {cols} columns, got {}", path.display(), n + 2, row.len())));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Loads a dataset directory. Without `split.csv` every sample is `train`.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let rows = read_csv(&root.join("index.csv"), INDEX_HEADER)?;
    let split_path = root.join("split.csv");
    let splits: HashMap<String, Split> = if split_path.exists() {
        read_csv(&split_path, SPLIT_HEADER)?
            .into_iter()
            .map(|r| Ok((r[0].clone(), Split::parse(&r[1])?)))
            .collect::<Result<_>>()?
    } else {
        HashMap::new()
    };
    let mut samples = Vec::with_capacity(rows.len());
    for (n, r) in rows.iter().enumerate() {
        let row_err = |m: String| Error::Dataset(format!("index.csv row {}: {m}", n + 2));
        let label: u8 = r[2].parse().map_err(|_| row_err(format!("bad label `{}`", r[2])))?;
        if label > 1 {
            return Err(row_err(format!("label {label} is not 0/1")));
        }
        let hospital: u8 = r[3].parse().map_err(|_| row_err(format!("bad hospital `{}`", r[3])))?;
        if !(1..=super::generate::HOSPITALS).contains(&hospital) {
            return Err(row_err(format!("hospital {hospital} outside 1..=11")));
        }
        let patient: u32 = r[4].parse().map_err(|_| row_err(format!("bad patient `{}`", r[4])))?;
        let (w, h, px) = read_pgm(&root.join(&r[0]))?;
        if w != h {
            return Err(row_err(format!("image {} is {w}x{h}, expected square", r[0])));
        }
        let mask = if r[1] == "none" {
            None
        } else {
            let (mw, mh, mp) = read_pgm(&root.join(&r[1]))?;
            if (mw, mh) != (w, h) {
                return Err(row_err(format!("mask {mw}x{mh} does not match image {w}x{h}")));
            }
            if mp.iter().any(|&v| v != 0 && v != 255) {
                return Err(row_err("mask is not binary".into()));
            }
            Some(Tensor::raw(vec![h, w], mp.iter().map(|&v| if v == 255 { 1.0 } else { 0.0 }).collect()))
        };
        let id = Path::new(&r[0]).file_stem().and_then(|s| s.to_str()).unwrap_or(&r[0]).to_string();
        samples.push(Sample {
            id,
            image: Tensor::raw(vec![h, w, 1], from_bytes(&px)),
            label,
            lesion: mask.as_ref().and_then(BBox::of_mask),
            mask,
            hospital,
            patient,
            split: splits.get(&r[0]).copied().unwrap_or(Split::Train),
            cue: None,
        });
    }
    if let Some(first) = samples.first() {
        let s = first.size();
        if samples.iter().any(|x| x.size() != s) {
            return Err(Error::Dataset("images of different sizes in one dataset".into()));
        }
    }
    Ok(Dataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_with_comment() {
        let px: Vec<u8> = (0..12).collect();
        let enc = encode_pgm(4, 3, &px);
        assert_eq!(decode_pgm(&enc).unwrap(), (4, 3, px.clone()));
        let mut commented = b"P5\n# made by hand\n4 3\n255\n".to_vec();
        commented.extend_from_slice(&px);
        assert_eq!(decode_pgm(&commented).unwrap().2, px);
        assert!(decode_pgm(&enc[..enc.len() - 1]).is_err());
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
    }
}
