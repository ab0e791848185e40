//! File formats: binary 8-bit PGM images, keypoint lists, match lists.
//!
//! PGM is the bit-exact interchange format for images and masks. Keypoint
//! and match files are plain text with fixed headers so runs can be diffed.

use crate::geometry::ValidityMask;
use crate::inference::Keypoint;
use crate::tensor::Tensor;
use crate::{Error, Result};
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;

/// Write a `[H, W]` tensor with values in [0, 1] as binary PGM (P5).
pub fn write_pgm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    if img.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "write_pgm wants [H, W], got {:?}",
            img.shape()
        )));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Read a binary PGM (P5, maxval 255) into a `[H, W]` tensor in [0, 1].
pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    parse_pgm(&raw).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn parse_pgm(raw: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    // header tokens may be separated by whitespace and '#' comments
    let mut pos = 0usize;
    let mut token = |pos: &mut usize| -> std::result::Result<String, String> {
        loop {
            while *pos < raw.len() && raw[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < raw.len() && raw[*pos] == b'#' {
                while *pos < raw.len() && raw[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < raw.len() && !raw[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&raw[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    if magic != "P5" {
        return Err(format!("unsupported magic {magic:?}, want P5"));
    }
    let w: usize = token(&mut pos)?.parse().map_err(|_| "bad width")?;
    let h: usize = token(&mut pos)?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token(&mut pos)?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    pos += 1; // single whitespace byte after maxval
    if raw.len() < pos + w * h {
        return Err("truncated pixel data".into());
    }
    let data = raw[pos..pos + w * h]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Tensor::from_vec(&[h, w], data).map_err(|e| e.to_string())
}

/// Write a validity mask as a 0/255 PGM.
pub fn write_mask(path: &Path, mask: &ValidityMask) -> Result<()> {
    let data = mask
        .data()
        .iter()
        .map(|&v| if v { 1.0 } else { 0.0 })
        .collect();
    let img = Tensor::from_vec(&[mask.height, mask.width], data)?;
    write_pgm(path, &img)
}

/// Read a 0/255 PGM as a validity mask (threshold 1/2).
pub fn read_mask(path: &Path) -> Result<ValidityMask> {
    let img = read_pgm(path)?;
    let (h, w) = (img.shape()[0], img.shape()[1]);
    Ok(ValidityMask::from_data(
        w,
        h,
        img.data().iter().map(|&v| v > 0.5).collect(),
    ))
}

/// Write keypoints: header `REKD-KPTS v1 W H count`, then one line per
/// keypoint, `x y score scale orientation_deg`, six decimal places.
pub fn write_keypoints(path: &Path, kps: &[Keypoint], width: usize, height: usize) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    writeln!(out, "REKD-KPTS v1 {width} {height} {}", kps.len())?;
    for kp in kps {
        writeln!(
            out,
            "{:.6} {:.6} {:.6} {:.6} {:.6}",
            kp.x, kp.y, kp.score, kp.scale, kp.orientation_deg
        )?;
    }
    Ok(())
}

/// Read a keypoint file; returns `(keypoints, width, height)`.
pub fn read_keypoints(path: &Path) -> Result<(Vec<Keypoint>, usize, usize)> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty keypoint file".into()))??;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != "REKD-KPTS" || fields[1] != "v1" {
        return Err(Error::Parse(format!("bad keypoint header: {header}")));
    }
    let width: usize = fields[2].parse().map_err(|_| Error::Parse("bad W".into()))?;
    let height: usize = fields[3].parse().map_err(|_| Error::Parse("bad H".into()))?;
    let count: usize = fields[4]
        .parse()
        .map_err(|_| Error::Parse("bad count".into()))?;
    let mut kps = Vec::with_capacity(count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse(format!("bad keypoint line: {line}")))?;
        if v.len() != 5 {
            return Err(Error::Parse(format!("bad keypoint line: {line}")));
        }
        kps.push(Keypoint {
            x: v[0],
            y: v[1],
            score: v[2] as f32,
            scale: v[3],
            orientation_deg: v[4],
        });
    }
    if kps.len() != count {
        return Err(Error::Parse(format!(
            "keypoint count {} does not match header {count}",
            kps.len()
        )));
    }
    Ok((kps, width, height))
}

/// Write matches: header `REKD-MATCH v1 count`, lines `i j distance inlier`.
pub fn write_matches(
    path: &Path,
    pairs: &[(usize, usize)],
    distances: &[f32],
    inliers: &[bool],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    writeln!(out, "REKD-MATCH v1 {}", pairs.len())?;
    for (k, &(i, j)) in pairs.iter().enumerate() {
        writeln!(
            out,
            "{i} {j} {:.6} {}",
            distances[k],
            if inliers[k] { 1 } else { 0 }
        )?;
    }
    Ok(())
}

/// Read a match file; returns `(pairs, distances, inlier flags)`.
#[allow(clippy::type_complexity)]
pub fn read_matches(path: &Path) -> Result<(Vec<(usize, usize)>, Vec<f32>, Vec<bool>)> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty match file".into()))??;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 || fields[0] != "REKD-MATCH" || fields[1] != "v1" {
        return Err(Error::Parse(format!("bad match header: {header}")));
    }
    let count: usize = fields[2]
        .parse()
        .map_err(|_| Error::Parse("bad count".into()))?;
    let (mut pairs, mut dists, mut flags) = (Vec::new(), Vec::new(), Vec::new());
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 4 {
            return Err(Error::Parse(format!("bad match line: {line}")));
        }
        pairs.push((
            t[0].parse().map_err(|_| Error::Parse("bad i".into()))?,
            t[1].parse().map_err(|_| Error::Parse("bad j".into()))?,
        ));
        dists.push(t[2].parse().map_err(|_| Error::Parse("bad dist".into()))?);
        flags.push(t[3] == "1");
    }
    if pairs.len() != count {
        return Err(Error::Parse("match count mismatch".into()));
    }
    Ok((pairs, dists, flags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmp() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("rekd_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn pgm_roundtrip_is_bit_exact_on_quantized_values() {
        let dir = tmp();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f32> = (0..12 * 9)
            .map(|_| rng.gen_range(0..=255) as f32 / 255.0)
            .collect();
        let img = Tensor::from_vec(&[9, 12], data).unwrap();
        let path = dir.join("a.pgm");
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.shape(), &[9, 12]);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        // writing the reread image reproduces the bytes
        let path2 = dir.join("b.pgm");
        write_pgm(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn keypoint_file_roundtrip() {
        let dir = tmp();
        let kps = vec![
            Keypoint {
                x: 1.25,
                y: 2.5,
                score: 0.75,
                scale: 1.0,
                orientation_deg: 90.0,
            },
            Keypoint {
                x: 10.0,
                y: 20.0,
                score: 0.5,
                scale: 2.0,
                orientation_deg: 350.0,
            },
        ];
        let path = dir.join("k.kpts");
        write_keypoints(&path, &kps, 64, 48).unwrap();
        let (back, w, h) = read_keypoints(&path).unwrap();
        assert_eq!((w, h), (64, 48));
        assert_eq!(back.len(), 2);
        assert!((back[1].orientation_deg - 350.0).abs() < 1e-9);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("REKD-KPTS v1 64 48 2\n"));
    }

    #[test]
    fn match_file_roundtrip() {
        let dir = tmp();
        let path = dir.join("m.match");
        write_matches(&path, &[(0, 2), (1, 1)], &[0.5, 0.25], &[true, false]).unwrap();
        let (pairs, dists, flags) = read_matches(&path).unwrap();
        assert_eq!(pairs, vec![(0, 2), (1, 1)]);
        assert_eq!(flags, vec![true, false]);
        assert!((dists[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn bad_pgm_magic_is_an_error() {
        let dir = tmp();
        let path = dir.join("bad.pgm");
        std::fs::write(&path, b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tmp();
        let mask = ValidityMask::from_data(3, 2, vec![true, false, true, false, true, false]);
        let path = dir.join("m.pgm");
        write_mask(&path, &mask).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);
    }
}
