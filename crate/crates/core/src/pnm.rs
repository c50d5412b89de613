//! Netpbm graymap (P5) and pixmap (P6) codecs, plus heat-map exports.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::field::Field;

/// Decode a binary P5/P6 image into a `[C, H, W]` tensor scaled to `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated netpbm header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Data(format!("unsupported netpbm magic `{other}`"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| Error::Data(format!("bad netpbm {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!(
            "unsupported netpbm geometry {width}x{height} maxval {maxval}"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = width * height * channels;
    let raster = bytes
        .get(start..start + need)
        .ok_or_else(|| Error::Data("truncated netpbm raster".into()))?;
    let scale = 1.0 / maxval as f32;
    let mut data = vec![0.0f32; need];
    for (i, &v) in raster.iter().enumerate() {
        let (pixel, ch) = (i / channels, i % channels);
        data[ch * width * height + pixel] = (v as f32 * scale).min(1.0);
    }
    Tensor::new(vec![channels, height, width], data)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode a `[1, H, W]` or `[3, H, W]` tensor in `[0, 1]` as P5 or P6.
pub fn encode(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::contract(format!("encode expects [C, H, W], got {:?}", image.shape())));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::contract(format!("cannot encode {c} channels as netpbm"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for px in 0..plane {
        for ch in 0..c {
            out.push(quantize(image.data()[ch * plane + px]));
        }
    }
    Ok(out)
}

/// 8-bit graymap of a field whose values lie in `[0, 1]`.
pub fn field_to_pgm(field: &Field) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", field.width(), field.height()).into_bytes();
    out.extend(field.data().iter().map(|&v| quantize(v)));
    out
}

/// Piecewise-linear "jet" colour ramp.
pub fn jet(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let ramp = |x: f32| (1.5 - (4.0 * v - x).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// RGB blend of 60% image and 40% colourised heat map. Grayscale images are
/// replicated across channels; the heat map must match the image extents.
pub fn overlay(image: &Tensor<f32>, heat: &Field) -> Result<Tensor<f32>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::contract(format!("overlay expects [C, H, W], got {:?}", image.shape())));
    };
    if (heat.height(), heat.width()) != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "overlay",
            left: vec![h, w],
            right: vec![heat.height(), heat.width()],
        });
    }
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for px in 0..plane {
        let color = jet(heat.data()[px]);
        for ch in 0..3 {
            let src = image.data()[(ch.min(c - 1)) * plane + px];
            data[ch * plane + px] = 0.6 * src + 0.4 * color[ch];
        }
    }
    Tensor::new(vec![3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_on_quantized_values() {
        let data: Vec<f32> = (0..2 * 3 * 3).map(|i| (i * 13 % 256) as f32 / 255.0).collect();
        let img = Tensor::new(vec![3, 2, 3], data).unwrap();
        let back = decode(&encode(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let img = decode(&bytes).unwrap();
        assert_eq!(img.shape(), &[1, 1, 2]);
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_truncated_raster() {
        assert!(decode(b"P6\n2 2\n255\n\x00\x00").is_err());
        assert!(decode(b"P3\n1 1\n255\n0 0 0").is_err());
    }

    #[test]
    fn overlay_keeps_extents() {
        let img = Tensor::full(vec![1, 4, 5], 0.5f32);
        let heat = Field::filled(4, 5, 1.0);
        let o = overlay(&img, &heat).unwrap();
        assert_eq!(o.shape(), &[3, 4, 5]);
        assert!((o.data()[0] - (0.3 + 0.4 * jet(1.0)[0])).abs() < 1e-6);
    }
}
