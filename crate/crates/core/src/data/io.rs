use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Sample};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.tsv";

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes planar `[3, h, w]` intensities as a binary PPM.
pub fn write_ppm(path: &Path, h: usize, w: usize, planar: &[f32]) -> Result<()> {
    if planar.len() != 3 * h * w {
        return Err(Error::dim(format!("{} values for a {h}x{w} RGB image", planar.len())));
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let hw = h * w;
    for i in 0..hw {
        bytes.extend((0..3).map(|c| to_byte(planar[c * hw + i])));
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, h: usize, w: usize, values: &[u8]) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::dim(format!("{} values for a {h}x{w} gray image", values.len())));
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(values);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a binary netpbm header; returns `(width, height, pixel bytes)`.
fn parse_netpbm<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<(usize, usize, &'a [u8])> {
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
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
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-text header"))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != magic {
        return Err(bad(&format!("expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad number {s:?}")));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad(&format!("maxval {max} is not 255")));
    }
    Ok((w, h, bytes.get(pos..).unwrap_or(&[])))
}

/// Reads a binary PPM into planar intensities; returns `(h, w, data)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, raster) = parse_netpbm(&bytes, "P6", path)?;
    let hw = h * w;
    if raster.len() != 3 * hw {
        return Err(Error::Data(format!(
            "{}: {} raster bytes for {w}x{h}",
            path.display(),
            raster.len()
        )));
    }
    let mut planar = vec![0f32; 3 * hw];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * hw + i] = px[c] as f32 / 255.0;
        }
    }
    Ok((h, w, planar))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, raster) = parse_netpbm(&bytes, "P5", path)?;
    if raster.len() != h * w {
        return Err(Error::Data(format!(
            "{}: {} raster bytes for {w}x{h}",
            path.display(),
            raster.len()
        )));
    }
    Ok((h, w, raster.to_vec()))
}

/// Writes `images/NNNNN.ppm`, `labels/NNNNN.pgm` and a manifest of relative
/// path pairs into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let img = format!("images/{i:05}.ppm");
        let lab = format!("labels/{i:05}.pgm");
        write_ppm(&dir.join(&img), s.height, s.width, &s.image)?;
        write_pgm(&dir.join(&lab), s.height, s.width, &s.labels)?;
        manifest.push_str(&format!("{img}\t{lab}\n"));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

fn resolve(base: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads every pair listed in a manifest; relative paths are resolved against
/// the manifest's directory.
pub fn load_manifest(path: &Path, num_classes: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (img, lab) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected image<TAB>label", path.display(), n + 1))
        })?;
        let (h, w, image) = read_ppm(&resolve(base, img))?;
        let (lh, lw, labels) = read_pgm(&resolve(base, lab))?;
        if (h, w) != (lh, lw) {
            return Err(Error::Data(format!(
                "{}:{}: image is {h}x{w} but labels are {lh}x{lw}",
                path.display(),
                n + 1
            )));
        }
        samples.push(Sample::new(h, w, image, labels)?);
    }
    Ok(Dataset {
        samples,
        num_classes,
    })
}
