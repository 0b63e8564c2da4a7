//! Dataset directories: binary PPM images plus `annotations.txt`, one line
//! per image: `file class x1 y1 x2 y2 [class x1 y1 x2 y2 ...]`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::synth::SceneRecord;
use crate::tensor::Tensor;

pub const ANNOTATION_FILE: &str = "annotations.txt";

pub fn image_name(index: usize) -> String {
    format!("img_{index:05}.ppm")
}

/// Writes images and annotations into `dir`, creating it if needed.
pub fn write_annotations(records: &[SceneRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = String::new();
    for (i, r) in records.iter().enumerate() {
        let name = image_name(i);
        write_ppm(&dir.join(&name), &r.image)?;
        text.push_str(&name);
        for (b, class) in &r.gts {
            text.push_str(&format!(
                " {class} {:.6} {:.6} {:.6} {:.6}",
                b.x1, b.y1, b.x2, b.y2
            ));
        }
        text.push('\n');
    }
    let path = dir.join(ANNOTATION_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
}

pub fn read_annotations(dir: &Path) -> Result<Vec<SceneRecord>> {
    let path = dir.join(ANNOTATION_FILE);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, gts) = parse_line(line).map_err(|msg| Error::Parse {
            file: path.clone(),
            line: i + 1,
            msg,
        })?;
        let image = read_ppm(&dir.join(name))?;
        out.push(SceneRecord { image, gts });
    }
    Ok(out)
}

fn parse_line(line: &str) -> std::result::Result<(&str, Vec<(BBox, usize)>), String> {
    let mut fields = line.split_whitespace();
    let name = fields.next().ok_or("missing image name")?;
    let rest: Vec<&str> = fields.collect();
    if !rest.len().is_multiple_of(5) {
        return Err(format!(
            "expected groups of 5 fields (class x1 y1 x2 y2) after the image name, got {}",
            rest.len()
        ));
    }
    let mut gts = Vec::new();
    for obj in rest.chunks(5) {
        let class: usize = obj[0]
            .parse()
            .map_err(|_| format!("bad class id {:?}", obj[0]))?;
        let mut c = [0.0; 4];
        for (slot, s) in c.iter_mut().zip(&obj[1..]) {
            *slot = s
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| format!("bad coordinate {s:?}"))?;
        }
        gts.push((BBox::new(c[0], c[1], c[2], c[3]), class));
    }
    Ok((name, gts))
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as 8-bit P6.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("ppm needs a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[(c * h + y) * w + x].clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let mut pos = 0;
    let mut header = Vec::new();
    while header.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if header[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
    if max != 255 || w == 0 || h == 0 {
        return Err(bad("only nonempty 8-bit images are supported"));
    }
    let pixels = bytes.get(pos..).unwrap_or_default();
    if pixels.len() != 3 * w * h {
        return Err(bad(&format!("expected {} pixel bytes, found {}", 3 * w * h, pixels.len())));
    }
    let mut data = vec![0.0; 3 * w * h];
    for (i, px) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Paths of the train and test splits under a dataset root.
pub fn split_dirs(root: &Path) -> (PathBuf, PathBuf) {
    (root.join("train"), root.join("test"))
}
