use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};

/// Dense `channels x height x width` raster standing in for a backbone feature map.
///
/// Cell `(i, j)` covers image pixels `[j * stride, (j + 1) * stride) x [i * stride, (i + 1) * stride)`
/// and its value sits at the cell center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    /// Image pixels per cell.
    stride: f64,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize, stride: f64) -> Result<Self> {
        Self::from_data(width, height, channels, stride, vec![0.0; width * height * channels])
    }

    pub fn from_data(width: usize, height: usize, channels: usize, stride: f64, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "feature map dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if !(stride > 0.0 && stride.is_finite()) {
            return Err(Error::InvalidConfig(format!("feature map stride {stride}")));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericRange("non-finite feature map entry".into()));
        }
        Ok(FeatureMap {
            width,
            height,
            channels,
            stride,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> f64 {
        self.stride
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        self.data[(c * self.height + i) * self.width + j] = v;
    }

    /// Apply `f` to every entry. Panics if `f` produces a non-finite value.
    pub fn map_inplace<F: FnMut(f64) -> f64>(&mut self, mut f: F) {
        for v in &mut self.data {
            *v = f(*v);
            assert!(v.is_finite(), "non-finite feature value");
        }
    }

    /// Bilinear sample of channel `c` at map coordinates `(x, y)`; zero outside the map.
    pub fn sample(&self, c: usize, x: f64, y: f64) -> f64 {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(0.0..=w).contains(&x) || !(0.0..=h).contains(&y) {
            return 0.0;
        }
        let xs = (x - 0.5).clamp(0.0, w - 1.0);
        let ys = (y - 0.5).clamp(0.0, h - 1.0);
        let (j0, i0) = (xs.floor() as usize, ys.floor() as usize);
        let j1 = (j0 + 1).min(self.width - 1);
        let i1 = (i0 + 1).min(self.height - 1);
        let (fx, fy) = (xs - j0 as f64, ys - i0 as f64);
        let top = self.get(c, i0, j0) * (1.0 - fx) + self.get(c, i0, j1) * fx;
        let bottom = self.get(c, i1, j0) * (1.0 - fx) + self.get(c, i1, j1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// RoI-Align with one sample point per pooled cell.
///
/// `b` is in image coordinates and may extend past the map; samples outside the
/// map read as zero. The result is channel-major, `channels * pool_size^2` long.
pub fn roi_align(fm: &FeatureMap, b: &BBox, pool_size: usize) -> Vec<f64> {
    let mut out = vec![0.0; fm.channels * pool_size * pool_size];
    roi_align_into(fm, b, pool_size, &mut out);
    out
}

pub(crate) fn roi_align_into(fm: &FeatureMap, b: &BBox, pool_size: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), fm.channels * pool_size * pool_size);
    let s = fm.stride;
    let (x0, y0) = (b.left() / s, b.top() / s);
    let (bin_w, bin_h) = (b.w / s / pool_size as f64, b.h / s / pool_size as f64);
    let cells = pool_size * pool_size;
    for pi in 0..pool_size {
        let y = y0 + (pi as f64 + 0.5) * bin_h;
        for pj in 0..pool_size {
            let x = x0 + (pj as f64 + 0.5) * bin_w;
            for c in 0..fm.channels {
                out[c * cells + pi * pool_size + pj] = fm.sample(c, x, y);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn constant_map_pools_to_constant() {
        let fm = FeatureMap::from_data(8, 6, 2, 4.0, vec![0.7; 96]).unwrap();
        let b = BBox::new(16.0, 12.0, 10.0, 8.0).unwrap();
        for v in roi_align(&fm, &b, 7) {
            assert_abs_diff_eq!(v, 0.7, epsilon = 1e-15);
        }
    }

    #[test]
    fn bilinear_midpoint_of_two_by_two() {
        let fm = FeatureMap::from_data(2, 2, 1, 1.0, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let b = BBox::new(1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(roi_align(&fm, &b, 1), vec![1.5]);
    }

    #[test]
    fn box_outside_map_reads_zero() {
        let fm = FeatureMap::from_data(4, 4, 3, 1.0, vec![5.0; 48]).unwrap();
        let b = BBox::new(-20.0, 30.0, 3.0, 3.0).unwrap();
        assert!(roi_align(&fm, &b, 3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_is_channel_major() {
        let mut data = vec![0.0; 2 * 4 * 4];
        data[16..].iter_mut().for_each(|v| *v = 1.0);
        let fm = FeatureMap::from_data(4, 4, 2, 1.0, data).unwrap();
        let out = roi_align(&fm, &BBox::new(2.0, 2.0, 2.0, 2.0).unwrap(), 2);
        assert_eq!(out, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn rejects_bad_maps() {
        assert!(FeatureMap::from_data(0, 2, 1, 1.0, vec![]).is_err());
        assert!(FeatureMap::from_data(2, 2, 1, 1.0, vec![0.0; 3]).is_err());
        assert!(FeatureMap::from_data(1, 1, 1, 1.0, vec![f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn pooling_is_linear(
            a in -3.0..3.0f64,
            c in -3.0..3.0f64,
            f1 in prop::collection::vec(-1.0..1.0f64, 50),
            f2 in prop::collection::vec(-1.0..1.0f64, 50),
            x in -2.0..12.0f64, y in -2.0..12.0f64, w in 0.5..8.0f64, h in 0.5..8.0f64,
        ) {
            let m1 = FeatureMap::from_data(5, 5, 2, 2.0, f1.clone()).unwrap();
            let m2 = FeatureMap::from_data(5, 5, 2, 2.0, f2.clone()).unwrap();
            let mix: Vec<f64> = f1.iter().zip(&f2).map(|(p, q)| a * p + c * q).collect();
            let m3 = FeatureMap::from_data(5, 5, 2, 2.0, mix).unwrap();
            let b = BBox::new(x, y, w, h).unwrap();
            let (p1, p2, p3) = (roi_align(&m1, &b, 3), roi_align(&m2, &b, 3), roi_align(&m3, &b, 3));
            for k in 0..p3.len() {
                prop_assert!((p3[k] - (a * p1[k] + c * p2[k])).abs() < 1e-12);
            }
        }
    }
}
