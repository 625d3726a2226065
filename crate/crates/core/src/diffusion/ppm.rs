//! Binary PPM (P6) images and the sample index.

use std::io::Write;
use std::path::Path;

use crate::numerics::{NumError, Tensor};

/// P6 bytes of a `[3, H, W]` image with values in `[0, 1]`.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>, NumError> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(NumError::Shape(format!("ppm image {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[c * h * w + y * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Decodes the P6 subset written by [`encode_ppm`].
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>, NumError> {
    let bad = |m: &str| NumError::Invalid(format!("ppm: {m}"));
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
            return Err(bad("short header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ascii"))?);
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("only 8-bit P6 is supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let pix = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| bad("truncated pixels"))?;
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, px) in pix.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> std::io::Result<()> {
    let bytes = encode_ppm(image).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?;
    std::fs::write(path, bytes)
}

/// Tiles `[3, H, W]` images row-major into a grid `cols` wide.
pub fn tile(images: &[Tensor<f32>], cols: usize) -> Result<Tensor<f32>, NumError> {
    let first = images.first().ok_or_else(|| NumError::Shape("empty grid".into()))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut data = vec![0.0f32; 3 * gh * gw];
    for (i, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(NumError::Shape(format!("grid tiles {:?} vs {:?}", img.shape(), first.shape())));
        }
        let (oy, ox) = ((i / cols) * h, (i % cols) * w);
        for c in 0..3 {
            for y in 0..h {
                let src = &img.data()[c * h * w + y * w..c * h * w + (y + 1) * w];
                let dst = c * gh * gw + (oy + y) * gw + ox;
                data[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Tensor::new(&[3, gh, gw], data)
}

/// One line of the sample index.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexRow {
    pub sample_id: String,
    pub class: usize,
    pub context_source: String,
}

pub fn index_csv(rows: &[IndexRow]) -> String {
    let mut out = String::from("sample_id,class,context_source\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.sample_id, r.class, r.context_source));
    }
    out
}

/// Writes `NNNN.ppm` per image plus `index.csv` into `dir`.
pub fn write_samples(dir: &Path, images: &[Tensor<f32>], rows: &[IndexRow]) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (img, row) in images.iter().zip(rows) {
        write_ppm(&dir.join(format!("{}.ppm", row.sample_id)), img)?;
    }
    let mut f = std::fs::File::create(dir.join("index.csv"))?;
    f.write_all(index_csv(rows).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_on_byte_grid() {
        let data: Vec<f32> = (0..3 * 2 * 3).map(|i| (i * 13 % 256) as f32 / 255.0).collect();
        let img = Tensor::new(&[3, 2, 3], data).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 18);
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
        // Red channel of pixel (0, 1) is the third byte after the header.
        assert_eq!(bytes[11 + 3], 13);
    }

    #[test]
    fn tiles_place_images() {
        let a = Tensor::full(&[3, 2, 2], 0.25f32);
        let b = Tensor::full(&[3, 2, 2], 0.75f32);
        let g = tile(&[a, b.clone(), b], 2).unwrap();
        assert_eq!(g.shape(), &[3, 4, 4]);
        assert_eq!(g.at(&[0, 0, 0]), 0.25);
        assert_eq!(g.at(&[1, 1, 3]), 0.75);
        assert_eq!(g.at(&[2, 3, 3]), 0.0);
        assert_eq!(g.at(&[2, 3, 1]), 0.75);
    }

    #[test]
    fn index_header() {
        let rows = [IndexRow { sample_id: "0000".into(), class: 3, context_source: "test:0".into() }];
        assert_eq!(index_csv(&rows), "sample_id,class,context_source\n0000,3,test:0\n");
    }
}
