//! File formats: binary PGM (+ JSON sidecar) for raw frames, PFM for float
//! images, 8-bit PNG for viewing, and the burst directory layout.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{load_trajectory, save_trajectory, Burst};
use crate::image::ImagePlane;
use crate::raw_sensor::{CfaPattern, RawFrame};

/// Display gamma applied when exporting PNG and undone on import.
pub const PNG_GAMMA: f64 = 2.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub cfa: CfaPattern,
    pub bit_depth: u32,
    pub white_level: u32,
}

pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("json")
}

/// Serializes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(Some(path), e.to_string()))
}

/// Writes `frame` as a binary PGM scaled to its white level (quantizing), plus
/// the `.json` sidecar.
pub fn write_pgm(path: impl AsRef<Path>, frame: &RawFrame) -> Result<()> {
    let path = path.as_ref();
    let white = frame.white_level();
    let mut out = format!("P5\n{} {}\n{}\n", frame.width(), frame.height(), white).into_bytes();
    for &v in frame.data() {
        let code = (v * white as f64).round() as u32;
        if white < 256 {
            out.push(code as u8);
        } else {
            out.extend_from_slice(&(code as u16).to_be_bytes());
        }
    }
    fs::write(path, out)?;
    write_json(
        sidecar_path(path),
        &RawSidecar {
            cfa: frame.cfa(),
            bit_depth: frame.bit_depth(),
            white_level: white,
        },
    )
}

/// Reads a binary PGM. Without a sidecar the CFA defaults to RGGB and the bit
/// depth is inferred from maxval.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<RawFrame> {
    let path = path.as_ref();
    let mut reader = BufReader::new(fs::File::open(path)?);
    let magic = header_token(&mut reader, path)?;
    if magic != "P5" {
        return Err(Error::format(Some(path), format!("expected P5, found {magic:?}")));
    }
    let width = header_number(&mut reader, path)?;
    let height = header_number(&mut reader, path)?;
    let maxval = header_number(&mut reader, path)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(Some(path), format!("maxval {maxval} out of range")));
    }
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let mut buf = vec![0u8; width * height * bytes_per];
    reader
        .read_exact(&mut buf)
        .map_err(|_| Error::format(Some(path), "truncated pixel data"))?;
    let codes: Vec<u32> = if bytes_per == 1 {
        buf.iter().map(|&b| b as u32).collect()
    } else {
        buf.chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as u32)
            .collect()
    };
    if let Some(c) = codes.iter().find(|&&c| c as usize > maxval) {
        return Err(Error::format(Some(path), format!("sample {c} exceeds maxval {maxval}")));
    }

    let side = sidecar_path(path);
    let (cfa, bit_depth) = if side.exists() {
        let s: RawSidecar = read_json(&side)?;
        if s.white_level as usize != maxval {
            return Err(Error::format(
                Some(path),
                format!("sidecar white level {} but maxval {maxval}", s.white_level),
            ));
        }
        (s.cfa, s.bit_depth)
    } else {
        let bits = usize::BITS - maxval.leading_zeros();
        if (1usize << bits) - 1 != maxval {
            return Err(Error::format(
                Some(path),
                format!("maxval {maxval} is not 2^k - 1 and no sidecar was found"),
            ));
        }
        (CfaPattern::default(), bits)
    };
    let white = maxval as f64;
    let data = codes.into_iter().map(|c| c as f64 / white).collect();
    RawFrame::new(height, width, cfa, bit_depth, data).map_err(|e| Error::format(Some(path), e.to_string()))
}

fn header_token(reader: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut token = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        if reader.read(&mut byte)? == 0 {
            return Err(Error::format(Some(path), "unexpected end of header"));
        }
        let b = byte[0];
        if b == b'#' && token.is_empty() {
            let mut skip = Vec::new();
            reader.read_until(b'\n', &mut skip)?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(b);
    }
    String::from_utf8(token).map_err(|_| Error::format(Some(path), "non-ASCII header"))
}

fn header_number(reader: &mut impl BufRead, path: &Path) -> Result<usize> {
    let t = header_token(reader, path)?;
    t.parse()
        .map_err(|_| Error::format(Some(path), format!("bad header number {t:?}")))
}

/// Writes a 1- or 3-channel image as little-endian PFM (rows bottom to top).
/// Samples are stored as `f32`.
pub fn write_pfm(path: impl AsRef<Path>, img: &ImagePlane) -> Result<()> {
    let tag = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Shape(format!("PFM holds 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width(), img.height()).into_bytes();
    let row_len = (img.width() * img.channels()).max(1);
    for row in img.data().chunks_exact(row_len).rev() {
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let mut reader = BufReader::new(fs::File::open(path)?);
    let channels = match header_token(&mut reader, path)?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::format(Some(path), format!("expected Pf/PF, found {other:?}"))),
    };
    let width = header_number(&mut reader, path)?;
    let height = header_number(&mut reader, path)?;
    let scale_token = header_token(&mut reader, path)?;
    let scale: f64 = scale_token
        .parse()
        .map_err(|_| Error::format(Some(path), format!("bad scale {scale_token:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(Some(path), "scale must be non-zero"));
    }
    let little = scale < 0.0;
    let mut buf = vec![0u8; width * height * channels * 4];
    reader
        .read_exact(&mut buf)
        .map_err(|_| Error::format(Some(path), "truncated pixel data"))?;
    let values: Vec<f64> = buf
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            (if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
        })
        .collect();
    let row_len = width * channels;
    let data: Vec<f64> = if row_len == 0 {
        Vec::new()
    } else {
        values.chunks_exact(row_len).rev().flatten().copied().collect()
    };
    ImagePlane::new(height, width, channels, data).map_err(|e| Error::format(Some(path), e.to_string()))
}

/// 8-bit PNG with display gamma; values are clamped to `[0, 1]`.
pub fn write_png(path: impl AsRef<Path>, img: &ImagePlane) -> Result<()> {
    let path = path.as_ref();
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::Shape(format!("PNG export needs 1 or 3 channels, got {c}"))),
    };
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0).powf(1.0 / PNG_GAMMA) * 255.0).round() as u8)
        .collect();
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::format(Some(path), e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(Some(path), e.to_string()))?;
    writer.finish().map_err(|e| Error::format(Some(path), e.to_string()))?;
    Ok(())
}

/// Reads an 8- or 16-bit grey/RGB(A) PNG and linearizes it. Alpha is dropped
/// and grey is replicated to three channels.
pub fn read_png(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let bad = |e: png::DecodingError| Error::format(Some(path), e.to_string());
    let mut decoder = png::Decoder::new(BufReader::new(fs::File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(Some(path), "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let buf = &buf[..info.buffer_size()];
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Sixteen => buf
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
            .collect(),
        png::BitDepth::Eight => buf.iter().map(|&b| b as f64 / 255.0).collect(),
        other => return Err(Error::format(Some(path), format!("unsupported bit depth {other:?}"))),
    };
    let src_channels = info.color_type.samples();
    let (h, w) = (info.height as usize, info.width as usize);
    let linear = |v: f64| v.powf(PNG_GAMMA);
    let mut data = Vec::with_capacity(h * w * 3);
    for px in samples.chunks_exact(src_channels) {
        match src_channels {
            1 | 2 => data.extend([linear(px[0]); 3]),
            _ => data.extend(px[..3].iter().map(|&v| linear(v))),
        }
    }
    ImagePlane::new(h, w, 3, data)
}

/// Reads an RGB scene from a `.pfm` or `.png` file. Single-channel PFMs are
/// replicated to three channels.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "pfm" => {
            let img = read_pfm(path)?;
            if img.channels() == 1 {
                let p = img.plane(0);
                ImagePlane::from_planes(img.height(), img.width(), &[p.clone(), p.clone(), p])
            } else {
                Ok(img)
            }
        }
        "png" => read_png(path),
        other => Err(Error::format(Some(path), format!("unsupported image extension {other:?}"))),
    }
}

/// Writes by extension: `.pfm` (lossless float) or `.png` (display).
pub fn write_image(path: impl AsRef<Path>, img: &ImagePlane) -> Result<()> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "pfm" => write_pfm(path, img),
        "png" => write_png(path, img),
        other => Err(Error::format(Some(path), format!("unsupported image extension {other:?}"))),
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Contents of `burst.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstFile {
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub cfa: CfaPattern,
    pub bit_depth: u32,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

pub fn frame_file_name(i: usize) -> String {
    format!("frame_{i:03}.pgm")
}

/// Writes `frame_NNN.pgm` (+ sidecars), `trajectory.json` and `burst.json`.
pub fn save_burst(dir: impl AsRef<Path>, burst: &Burst) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, f) in burst.frames().iter().enumerate() {
        write_pgm(dir.join(frame_file_name(i)), f)?;
    }
    save_trajectory(&burst.trajectory, dir.join("trajectory.json"))?;
    let first = &burst.frames()[0];
    write_json(
        dir.join("burst.json"),
        &BurstFile {
            n_frames: burst.len(),
            height: first.height(),
            width: first.width(),
            cfa: first.cfa(),
            bit_depth: first.bit_depth(),
            meta: burst.meta.clone(),
        },
    )
}

pub fn load_burst(dir: impl AsRef<Path>) -> Result<Burst> {
    let dir = dir.as_ref();
    let info: BurstFile = read_json(dir.join("burst.json"))?;
    if info.n_frames == 0 {
        return Err(Error::Empty(format!("{} lists no frames", dir.display())));
    }
    let frames = (0..info.n_frames)
        .map(|i| read_pgm(dir.join(frame_file_name(i))))
        .collect::<Result<Vec<_>>>()?;
    let trajectory = load_trajectory(dir.join("trajectory.json"))?;
    let mut burst = Burst::new(frames, trajectory)?;
    burst.meta = info.meta;
    Ok(burst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Homography, Trajectory};
    use proptest::prelude::*;

    fn quantized_frame(seed: u64, bit_depth: u32) -> RawFrame {
        let white = ((1u32 << bit_depth) - 1) as f64;
        let data = (0..64u64)
            .map(|i| ((i * 2654435761 + seed * 97) % (white as u64 + 1)) as f64 / white)
            .collect();
        RawFrame::new(8, 8, CfaPattern::Grbg, bit_depth, data).unwrap()
    }

    #[test]
    fn pgm_round_trip_16_and_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        for bd in [12, 16, 8] {
            let f = quantized_frame(bd as u64, bd);
            let p = dir.path().join(format!("f{bd}.pgm"));
            write_pgm(&p, &f).unwrap();
            let bytes = fs::read(&p).unwrap();
            let header_len = format!("P5\n8 8\n{}\n", f.white_level()).len();
            assert_eq!(bytes.len(), header_len + 64 * if bd > 8 { 2 } else { 1 });
            assert_eq!(read_pgm(&p).unwrap(), f);
        }
    }

    #[test]
    fn pgm_without_sidecar_infers_depth() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        fs::write(&p, b"P5\n# comment\n2 2\n1023\n\x00\x00\x03\xff\x01\x00\x00\x01").unwrap();
        let f = read_pgm(&p).unwrap();
        assert_eq!(f.bit_depth(), 10);
        assert_eq!(f.cfa(), CfaPattern::Rggb);
        assert_eq!(f.data()[1], 1.0);
        fs::write(&p, b"P5\n2 2\n1000\n\x00\x00\x03\xe8\x01\x00\x00\x01").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Format { .. })));
        fs::write(&p, b"P5\n2 2\n1023\n\x00").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn pfm_layout_is_bottom_up_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pfm");
        let img = ImagePlane::new(2, 1, 1, vec![1.0, 2.0]).unwrap();
        write_pfm(&p, &img).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = b"Pf\n1 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..header.len() + 4], &2.0f32.to_le_bytes());
        assert_eq!(read_pfm(&p).unwrap(), img);
    }

    #[test]
    fn png_round_trip_within_8_bit_precision() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = crate::scene::band_limited_rgb(8, 8, 2, 1);
        write_png(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        // One 8-bit code step in the gamma domain, mapped back to linear.
        let step = |v: f64| PNG_GAMMA * v.powf(1.0 - 1.0 / PNG_GAMMA) / 255.0;
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= step(a.max(*b)));
        }
    }

    #[test]
    fn burst_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![quantized_frame(1, 12), quantized_frame(2, 12)];
        let traj = Trajectory::new(vec![
            Homography::identity(),
            Homography::rotation_about(0.01, 3.0, 4.0),
        ])
        .unwrap();
        let burst = Burst::new(frames, traj).unwrap().with_meta("seed", 7);
        save_burst(dir.path(), &burst).unwrap();
        assert!(dir.path().join("frame_001.pgm").exists());
        assert!(dir.path().join("frame_001.json").exists());
        assert_eq!(load_burst(dir.path()).unwrap(), burst);
    }

    #[test]
    fn unknown_extension_is_a_format_error() {
        let img = ImagePlane::zeros(2, 2, 3);
        assert!(matches!(write_image("a.bmp", &img), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn pfm_round_trip_f32_values(vals in proptest::collection::vec(-1e6f32..1e6, 12)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("v.pfm");
            let img = ImagePlane::new(2, 2, 3, vals.iter().map(|&v| v as f64).collect()).unwrap();
            write_pfm(&p, &img).unwrap();
            prop_assert_eq!(read_pfm(&p).unwrap(), img);
        }
    }
}
