//! Single-channel 2-D real fields and bilinear resampling.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Field {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || height * width != data.len() {
            return Err(Error::contract(format!(
                "field {height}x{width} cannot hold {} values",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("field construction".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "field extents must be positive");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Flat index of the first maximum in scan order.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Field {
        Field {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Where the cells of a feature map sit on the grid it was computed from:
/// cell `i` along an axis is centred at `offset + stride·i`, `[y, x]` order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellGeometry {
    pub offset: [f64; 2],
    pub stride: [f64; 2],
}

impl CellGeometry {
    pub const IDENTITY: CellGeometry = CellGeometry {
        offset: [0.0, 0.0],
        stride: [1.0, 1.0],
    };

    /// Compose with a sliding window of `kernel`, `stride`, `padding` applied on top.
    pub fn then_window(self, kernel: [usize; 2], stride: [usize; 2], padding: [usize; 2]) -> Self {
        let mut next = self;
        for a in 0..2 {
            let shift = (kernel[a] as f64 - 1.0) / 2.0 - padding[a] as f64;
            next.offset[a] = self.offset[a] + self.stride[a] * shift;
            next.stride[a] = self.stride[a] * stride[a] as f64;
        }
        next
    }
}

/// Bilinear resampling of a row-major `h×w` plane at fractional source
/// positions, already clamped into `[0, n-1]`.
fn sample_plane(src: &[f32], w: usize, ys: &[f64], xs: &[f64], dst: &mut Vec<f32>) {
    let h = src.len() / w;
    let split = |pos: f64, n: usize| {
        let lo = (pos.floor() as usize).min(n - 1);
        (lo, (lo + 1).min(n - 1), (pos - lo as f64) as f32)
    };
    let xs: Vec<_> = xs.iter().map(|&x| split(x, w)).collect();
    for &y in ys {
        let (y0, y1, fy) = split(y, h);
        let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
            dst.push(top + (bottom - top) * fy);
        }
    }
}

fn aligned_corners(n_in: usize, n_out: usize) -> Vec<f64> {
    if n_in == 1 || n_out == 1 {
        return vec![0.0; n_out];
    }
    (0..n_out).map(|i| i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64).collect()
}

fn resample_plane(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize, dst: &mut Vec<f32>) {
    sample_plane(src, w, &aligned_corners(h, out_h), &aligned_corners(w, out_w), dst);
}

/// Bilinear interpolation with aligned corners; a 1×1 field broadcasts its value.
pub fn upsample_bilinear(field: &Field, out_h: usize, out_w: usize) -> Result<Field> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::contract("upsample target extents must be positive"));
    }
    let mut data = Vec::with_capacity(out_h * out_w);
    resample_plane(&field.data, field.height, field.width, out_h, out_w, &mut data);
    Field::new(out_h, out_w, data)
}

/// Bilinear interpolation of a feature map onto the `out_h×out_w` grid it was
/// computed from. Each output pixel reads the map at its own position in cell
/// coordinates; outside the hull of cell centres the nearest edge value holds.
pub fn upsample_cells(field: &Field, out_h: usize, out_w: usize, geometry: CellGeometry) -> Result<Field> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::contract("upsample target extents must be positive"));
    }
    if geometry.stride.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::contract(format!("cell stride must be positive, got {:?}", geometry.stride)));
    }
    let positions = |n_out: usize, n_in: usize, a: usize| -> Vec<f64> {
        (0..n_out)
            .map(|i| ((i as f64 - geometry.offset[a]) / geometry.stride[a]).clamp(0.0, (n_in - 1) as f64))
            .collect()
    };
    let mut data = Vec::with_capacity(out_h * out_w);
    sample_plane(
        &field.data,
        field.width,
        &positions(out_h, field.height, 0),
        &positions(out_w, field.width, 1),
        &mut data,
    );
    Field::new(out_h, out_w, data)
}

/// Resize every channel of a `[C, H, W]` image with the same kernel.
pub fn resize_image(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::contract(format!(
            "resize expects [C, H, W], got {:?}",
            image.shape()
        )));
    };
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for plane in image.data().chunks_exact(h * w) {
        resample_plane(plane, h, w, out_h, out_w, &mut data);
    }
    Tensor::new(vec![c, out_h, out_w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_broadcasts() {
        let f = Field::new(1, 1, vec![3.0]).unwrap();
        let up = upsample_bilinear(&f, 4, 5).unwrap();
        assert!(up.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn midpoint_with_aligned_corners() {
        let f = Field::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = upsample_bilinear(&f, 2, 3).unwrap();
        assert_eq!(up.data(), &[0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn identity_at_same_extents() {
        let f = Field::new(2, 3, vec![1.0, -2.0, 3.5, 0.25, 9.0, -7.0]).unwrap();
        assert_eq!(upsample_bilinear(&f, 2, 3).unwrap(), f);
    }

    #[test]
    fn corners_are_preserved() {
        let f = Field::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let up = upsample_bilinear(&f, 7, 9).unwrap();
        assert_eq!(up.get(0, 0), 1.0);
        assert_eq!(up.get(0, 8), 2.0);
        assert_eq!(up.get(6, 0), 5.0);
        assert_eq!(up.get(6, 8), 6.0);
    }
    #[test]
    fn identity_geometry_at_same_extents() {
        let f = Field::new(2, 3, vec![1.0, -2.0, 3.5, 0.25, 9.0, -7.0]).unwrap();
        assert_eq!(upsample_cells(&f, 2, 3, CellGeometry::IDENTITY).unwrap(), f);
    }

    #[test]
    fn cells_land_on_their_centres() {
        // 3x3 kernel without padding, then a 2x2 pool: cell i is centred at 2i + 1.5
        let g = CellGeometry::IDENTITY.then_window([3, 3], [1, 1], [0, 0]).then_window([2, 2], [2, 2], [0, 0]);
        assert_eq!(g, CellGeometry { offset: [1.5, 1.5], stride: [2.0, 2.0] });
        let f = Field::new(1, 3, vec![0.0, 4.0, 8.0]).unwrap();
        let up = upsample_cells(&f, 1, 8, g).unwrap();
        assert_eq!(up.data(), &[0.0, 0.0, 1.0, 3.0, 5.0, 7.0, 8.0, 8.0]);
    }

    #[test]
    fn padded_same_conv_keeps_the_grid() {
        let g = CellGeometry::IDENTITY.then_window([3, 5], [1, 1], [1, 2]);
        assert_eq!(g, CellGeometry::IDENTITY);
    }
}
