//! Raw field blobs with JSON sidecars, plus PPM/PNG image output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Field, FieldKind, FieldShape, ImageRgb};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldMeta {
    pub kind: FieldKind,
    pub dims: Vec<usize>,
    pub value_range: [f32; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
}

impl FieldMeta {
    pub fn shape(&self) -> FieldShape {
        FieldShape {
            kind: self.kind,
            dims: self.dims.clone(),
        }
    }
}

/// Sidecar path for a blob: same stem, `.json` extension.
pub fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

pub fn f32s_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn le_bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

pub fn save_field(blob: &Path, field: &Field, theta: Option<&[f64]>) -> Result<()> {
    let shape = field.shape();
    let meta = FieldMeta {
        kind: shape.kind,
        dims: shape.dims,
        value_range: [0.0, 1.0],
        theta: theta.map(<[f64]>::to_vec),
    };
    fs::write(blob, f32s_to_le_bytes(field.values())).map_err(|e| Error::io(blob, e))?;
    write_json(&sidecar_path(blob), &meta)
}

/// Reads only the sidecar.
pub fn load_meta(blob: &Path) -> Result<FieldMeta> {
    let path = sidecar_path(blob);
    let meta: FieldMeta = read_json(&path)?;
    if meta.kind == FieldKind::Rgb && meta.dims.len() != 2 {
        return Err(Error::format(&path, "rgb fields need 2 dims"));
    }
    if !(2..=3).contains(&meta.dims.len()) || meta.dims.iter().any(|&d| d == 0) {
        return Err(Error::format(&path, format!("bad dims {:?}", meta.dims)));
    }
    Ok(meta)
}

pub fn load_field(blob: &Path) -> Result<(Field, FieldMeta)> {
    let meta = load_meta(blob)?;
    let bytes = fs::read(blob).map_err(|e| Error::io(blob, e))?;
    let shape = meta.shape();
    let expected = shape.num_points() * shape.channels() * 4;
    if bytes.len() < expected {
        return Err(Error::format(blob, format!("truncated: {} of {expected} bytes", bytes.len())));
    }
    if bytes.len() != expected {
        return Err(Error::format(
            blob,
            format!("sidecar dims {:?} need {expected} bytes, blob has {}", meta.dims, bytes.len()),
        ));
    }
    let field = shape.field_from_values(le_bytes_to_f32s(&bytes))?;
    Ok((field, meta))
}

pub fn encode_ppm(img: &ImageRgb) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_rgb8());
    out
}

pub fn write_ppm(path: &Path, img: &ImageRgb) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<ImageRgb> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::format(path, why);
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
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
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if tokens[0] != "P6" || tokens[3] != "255" {
        return Err(bad("expected binary P6 with maxval 255"));
    }
    let w: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let body = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| bad("truncated pixel data"))?;
    ImageRgb::new(w, h, body.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn encode_png(img: &ImageRgb) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::format("<png>", e))?;
        writer.write_image_data(&img.to_rgb8()).map_err(|e| Error::format("<png>", e))?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, img: &ImageRgb) -> Result<()> {
    fs::write(path, encode_png(img)?).map_err(|e| Error::io(path, e))
}

/// Writes PNG or PPM depending on the extension.
pub fn write_image(path: &Path, img: &ImageRgb) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => write_png(path, img),
        _ => write_ppm(path, img),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::ScalarField;
    use crate::numerics::Rng;
    use rand::Rng as _;

    #[test]
    fn field_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(3);
        let data: Vec<f32> = (0..512).map(|_| rng.gen::<f32>()).collect();
        let field = Field::Scalar(ScalarField::new(vec![8, 8, 8], data).unwrap());
        let path = dir.path().join("f.raw");
        save_field(&path, &field, Some(&[0.25])).unwrap();
        let (back, meta) = load_field(&path).unwrap();
        assert_eq!(meta.theta.as_deref(), Some(&[0.25][..]));
        let a: Vec<u32> = field.values().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn sidecar_mismatch_and_truncation_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.raw");
        fs::write(&path, f32s_to_le_bytes(&[0.5; 7])).unwrap();
        let meta = FieldMeta {
            kind: FieldKind::Scalar,
            dims: vec![2, 2, 2],
            value_range: [0.0, 1.0],
            theta: None,
        };
        write_json(&sidecar_path(&path), &meta).unwrap();
        assert!(matches!(load_field(&path), Err(Error::Format { .. })));
        fs::write(&path, [0u8; 33]).unwrap();
        assert!(load_field(&path).is_err());
    }

    #[test]
    fn metadata_loads_without_blob() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.raw");
        let field = Field::Scalar(ScalarField::zeros(vec![4, 3, 2]).unwrap());
        save_field(&path, &field, None).unwrap();
        fs::remove_file(&path).unwrap();
        let meta = load_meta(&path).unwrap();
        assert_eq!(meta.dims, vec![4, 3, 2]);
        assert!(load_field(&path).is_err());
    }

    #[test]
    fn ppm_and_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<f32> = (0..2 * 3 * 3).map(|i| i as f32 / 17.0).collect();
        let img = ImageRgb::new(2, 3, px).unwrap();
        let path = dir.path().join("a.ppm");
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
        let png_bytes = encode_png(&img).unwrap();
        let decoder = png::Decoder::new(png_bytes.as_slice());
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (2, 3));
        assert_eq!(&buf[..info.buffer_size()], img.to_rgb8().as_slice());
    }
}
