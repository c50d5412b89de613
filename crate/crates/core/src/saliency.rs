//! Grad-CAM heat maps, thresholded occlusion masks, and the patch-occlusion
//! sensitivity reference.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::field::{upsample_cells, CellGeometry, Field};
use crate::nn::Model;

/// What occluded pixels are replaced with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum OcclusionMode {
    #[default]
    Zero,
    /// Independent uniform draw in `[0, 1]` per pixel and channel.
    Random,
    One,
    /// Occlusion disabled; the trainer degenerates to classical training.
    Off,
}

impl fmt::Display for OcclusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OcclusionMode::Zero => "zero",
            OcclusionMode::Random => "random",
            OcclusionMode::One => "one",
            OcclusionMode::Off => "off",
        })
    }
}

impl FromStr for OcclusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" | "0" => Ok(OcclusionMode::Zero),
            "random" | "r" => Ok(OcclusionMode::Random),
            "one" | "1" => Ok(OcclusionMode::One),
            "off" => Ok(OcclusionMode::Off),
            _ => Err(Error::Config(format!(
                "occlusion_mode must be one of zero, random, one, off; got `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatMap {
    /// Rectified map at the captured activation's resolution.
    pub raw: Field,
    /// Upsampled to input resolution and min-max normalized to `[0, 1]`.
    pub normalized: Field,
    pub source_class: usize,
}

impl HeatMap {
    /// `geometry` places the raw cells on the `out_h×out_w` input grid.
    pub fn from_raw(raw: Field, out_h: usize, out_w: usize, geometry: CellGeometry, source_class: usize) -> Result<Self> {
        let normalized = min_max_norm(&upsample_cells(&raw, out_h, out_w, geometry)?);
        Ok(Self {
            raw,
            normalized,
            source_class,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OcclusionMask {
    height: usize,
    width: usize,
    selected: Vec<bool>,
}

impl OcclusionMask {
    pub fn new(height: usize, width: usize, selected: Vec<bool>) -> Result<Self> {
        if height * width != selected.len() || height == 0 || width == 0 {
            return Err(Error::contract(format!(
                "mask {height}x{width} cannot hold {} entries",
                selected.len()
            )));
        }
        Ok(Self {
            height,
            width,
            selected,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            selected: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn selected(&self) -> &[bool] {
        &self.selected
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.selected.len() as f64
    }
}

/// `(x − min) / (max − min)`; a constant field maps to all zeros.
pub fn min_max_norm(field: &Field) -> Field {
    let (lo, hi) = (field.min(), field.max());
    let range = hi - lo;
    if range <= 0.0 {
        return field.map(|_| 0.0);
    }
    field.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Select pixels whose normalized weight is strictly greater than `th`.
pub fn threshold_mask(normalized: &Field, th: f32) -> Result<OcclusionMask> {
    if !(th > 0.0 && th < 1.0) {
        return Err(Error::contract(format!("threshold must lie in (0, 1), got {th}")));
    }
    Ok(OcclusionMask {
        height: normalized.height(),
        width: normalized.width(),
        selected: normalized.data().iter().map(|&w| w > th).collect(),
    })
}

/// Copy of a `[C, H, W]` image with masked pixels overwritten in every channel.
pub fn occlude<R: Rng + ?Sized>(
    image: &Tensor<f32>,
    mask: &OcclusionMask,
    mode: OcclusionMode,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let &[_, h, w] = image.shape() else {
        return Err(Error::contract(format!("occlude expects [C, H, W], got {:?}", image.shape())));
    };
    if (h, w) != (mask.height, mask.width) {
        return Err(Error::ShapeMismatch {
            op: "occlude",
            left: vec![h, w],
            right: vec![mask.height, mask.width],
        });
    }
    let mut out = image.clone();
    if mode == OcclusionMode::Off {
        return Ok(out);
    }
    for plane in out.data_mut().chunks_exact_mut(h * w) {
        for (px, _) in plane.iter_mut().zip(&mask.selected).filter(|(_, &s)| s) {
            *px = match mode {
                OcclusionMode::Zero => 0.0,
                OcclusionMode::One => 1.0,
                OcclusionMode::Random => rng.random_range(0.0..=1.0),
                OcclusionMode::Off => unreachable!(),
            };
        }
    }
    Ok(out)
}

/// Raw Grad-CAM map from one image's activations `A: [K, h, w]` and their
/// gradients: `ReLU(Σ_k α_k A^k)` with `α_k` the spatial mean of `∂y/∂A^k`.
pub fn grad_cam_map(activation: &Tensor<f32>, gradient: &Tensor<f32>) -> Result<Field> {
    if activation.shape() != gradient.shape() || activation.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "grad_cam_map",
            left: activation.shape().to_vec(),
            right: gradient.shape().to_vec(),
        });
    }
    let (h, w) = (activation.shape()[1], activation.shape()[2]);
    let spatial = h * w;
    let mut cam = vec![0.0f64; spatial];
    for (a, g) in activation
        .data()
        .chunks_exact(spatial)
        .zip(gradient.data().chunks_exact(spatial))
    {
        let alpha = g.iter().map(|&v| v as f64).sum::<f64>() / spatial as f64;
        for (c, &av) in cam.iter_mut().zip(a) {
            *c += alpha * av as f64;
        }
    }
    Field::new(h, w, cam.into_iter().map(|v| v.max(0.0) as f32).collect())
}

/// Grad-CAM for every image of a `[N, C, H, W]` batch, each against its own target class.
///
/// One forward with activation capture and one backward from `Σ_i y_i^{target_i}`;
/// samples do not interact, so each image receives exactly the gradient of its
/// own target logit. Parameter gradients are neither computed nor touched.
pub fn grad_cam_batch(model: &mut Model<f32>, images: &Tensor<f32>, targets: &[usize]) -> Result<Vec<HeatMap>> {
    let &[n, _, h, w] = images.shape() else {
        return Err(Error::contract(format!(
            "grad_cam expects [N, C, H, W], got {:?}",
            images.shape()
        )));
    };
    if targets.len() != n {
        return Err(Error::contract(format!("{n} images but {} target classes", targets.len())));
    }
    let mut tape = Tape::without_param_grads();
    let x = tape.leaf(images)?;
    let pass = model.forward(&mut tape, x, true)?;
    let objective = tape.gather_sum(pass.logits, targets)?;
    tape.backward(objective)?;
    model.collect_gradients(&tape, &pass)?;
    heat_maps_from_capture(model, targets, h, w)
}

/// Build heat maps from the activations and gradients cached on `model`.
pub fn heat_maps_from_capture(model: &Model<f32>, targets: &[usize], out_h: usize, out_w: usize) -> Result<Vec<HeatMap>> {
    let capture = model
        .capture()
        .ok_or_else(|| Error::State("no captured activations; run a capturing forward first".into()))?;
    let gradient = capture
        .gradient
        .as_ref()
        .ok_or_else(|| Error::State("captured activations have no gradient yet".into()))?;
    if capture.activation.shape()[0] != targets.len() {
        return Err(Error::contract("target count does not match the captured batch"));
    }
    let geometry = model.capture_geometry();
    targets
        .iter()
        .enumerate()
        .map(|(i, &class)| {
            let raw = grad_cam_map(&capture.activation.outer(i)?, &gradient.outer(i)?)?;
            HeatMap::from_raw(raw, out_h, out_w, geometry, class)
        })
        .collect()
}

/// Grad-CAM heat map of a single `[C, H, W]` image.
pub fn grad_cam(model: &mut Model<f32>, image: &Tensor<f32>, target_class: usize) -> Result<HeatMap> {
    let batch = Tensor::stack(std::slice::from_ref(image))?;
    let mut maps = grad_cam_batch(model, &batch, &[target_class])?;
    Ok(maps.remove(0))
}

/// Slide a zeroed `patch×patch` square over the image and record
/// `score(clean) − score(occluded)` of the target logit at each position.
pub fn occlusion_sensitivity(
    model: &Model<f32>,
    image: &Tensor<f32>,
    target_class: usize,
    patch: usize,
    stride: usize,
) -> Result<Field> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::contract(format!(
            "occlusion_sensitivity expects [C, H, W], got {:?}",
            image.shape()
        )));
    };
    if patch == 0 || patch > h || patch > w || stride == 0 {
        return Err(Error::contract(format!(
            "patch {patch} / stride {stride} invalid for {h}x{w} image"
        )));
    }
    if target_class >= model.num_classes() {
        return Err(Error::contract(format!("class {target_class} outside the model's classes")));
    }
    let (rows, cols) = ((h - patch) / stride + 1, (w - patch) / stride + 1);
    let k = model.num_classes();
    let clean = model.logits(&Tensor::stack(std::slice::from_ref(image))?)?.data()[target_class];
    let positions: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |q| (r * stride, q * stride)))
        .collect();
    let mut drops = Vec::with_capacity(positions.len());
    for chunk in positions.chunks(32) {
        let mut batch = Vec::with_capacity(chunk.len() * image.numel());
        for &(y0, x0) in chunk {
            let mut img = image.data().to_vec();
            for ch in 0..c {
                for y in y0..y0 + patch {
                    let row = ch * h * w + y * w;
                    img[row + x0..row + x0 + patch].fill(0.0);
                }
            }
            batch.extend_from_slice(&img);
        }
        let logits = model.logits(&Tensor::new(vec![chunk.len(), c, h, w], batch)?)?;
        drops.extend(logits.data().chunks_exact(k).map(|row| clean - row[target_class]));
    }
    Field::new(rows, cols, drops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn min_max_examples() {
        let f = |v: Vec<f32>| Field::new(1, v.len(), v).unwrap();
        assert_eq!(min_max_norm(&f(vec![2.0, 4.0, 6.0])).data(), &[0.0, 0.5, 1.0]);
        assert_eq!(min_max_norm(&f(vec![5.0, 5.0])).data(), &[0.0, 0.0]);
        assert_eq!(min_max_norm(&f(vec![-1.0, 3.0])).data(), &[0.0, 1.0]);
    }

    #[test]
    fn threshold_is_strict() {
        let f = Field::new(1, 4, vec![0.9, 0.84, 0.86, 0.85]).unwrap();
        let m = threshold_mask(&f, 0.85).unwrap();
        assert_eq!(m.selected(), &[true, false, true, false]);
        assert!(threshold_mask(&f, 1.0).is_err());
        assert!(threshold_mask(&f, 0.0).is_err());
    }

    #[test]
    fn occlusion_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::new(vec![2, 2, 2], vec![0.5; 8]).unwrap();
        let empty = OcclusionMask::empty(2, 2);
        assert_eq!(occlude(&img, &empty, OcclusionMode::Zero, &mut rng).unwrap(), img);

        let full = OcclusionMask::new(2, 2, vec![true; 4]).unwrap();
        let ones = occlude(&img, &full, OcclusionMode::One, &mut rng).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1.0));

        let some = OcclusionMask::new(2, 2, vec![true, false, false, true]).unwrap();
        let z = occlude(&img, &some, OcclusionMode::Zero, &mut rng).unwrap();
        assert_eq!(z.data(), &[0.0, 0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.0]);
        assert_eq!(img.data(), &[0.5; 8]);

        let r = occlude(&img, &some, OcclusionMode::Random, &mut rng).unwrap();
        assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(r.data()[1], 0.5);

        let wrong = OcclusionMask::empty(3, 2);
        assert!(occlude(&img, &wrong, OcclusionMode::Zero, &mut rng).is_err());
    }

    #[test]
    fn uniform_positive_gradient_gives_rectified_activation() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let g = Tensor::new(vec![1, 2, 2], vec![0.5; 4]).unwrap();
        let raw = grad_cam_map(&a, &g).unwrap();
        assert_eq!(raw.data(), &[0.5, 0.0, 1.5, 0.25]);
    }

    #[test]
    fn opposite_channel_weights_subtract() {
        let a = Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 3.0, 1.0, 1.0]).unwrap();
        // α = (1, −1)
        let g = Tensor::new(vec![2, 1, 3], vec![1.0, 1.0, 1.0, -1.0, -1.0, -1.0]).unwrap();
        assert_eq!(grad_cam_map(&a, &g).unwrap().data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn mode_parsing() {
        for m in [OcclusionMode::Zero, OcclusionMode::Random, OcclusionMode::One, OcclusionMode::Off] {
            assert_eq!(m.to_string().parse::<OcclusionMode>().unwrap(), m);
        }
        assert!("half".parse::<OcclusionMode>().is_err());
    }
}
