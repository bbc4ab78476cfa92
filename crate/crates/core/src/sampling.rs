//! Bilinear interpolation with border clamping.
//!
//! Coordinates are `(x = column, y = row)` in sub-pixel units, with the
//! centre of the top-left cell at `(0, 0)`. Points outside the grid are
//! clamped onto the border before interpolation.

use alloc::vec::Vec;

use crate::datamodel::PointSet;
use crate::error::{invalid, Result};
use crate::math;
use crate::tensor::Tensor;

/// Neighbour indices and fractional weights for one sample location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearTap {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    /// Weight of the `x1` column.
    pub fx: f64,
    /// Weight of the `y1` row.
    pub fy: f64,
    /// Whether the x/y coordinate was clamped (its derivative is then zero).
    pub clamped_x: bool,
    pub clamped_y: bool,
}

#[inline]
fn axis_tap(v: f64, size: usize) -> (usize, usize, f64, bool) {
    let max = (size - 1) as f64;
    if v <= 0.0 || size == 1 {
        return (0, 0, 0.0, v < 0.0 || size == 1);
    }
    if v >= max {
        return (size - 1, size - 1, 0.0, v > max);
    }
    let f = math::floor(v);
    let i0 = f as usize;
    (i0, i0 + 1, v - f, false)
}

impl BilinearTap {
    #[inline]
    pub fn new(x: f64, y: f64, width: usize, height: usize) -> Self {
        let (x0, x1, fx, clamped_x) = axis_tap(x, width);
        let (y0, y1, fy, clamped_y) = axis_tap(y, height);
        BilinearTap { x0, y0, x1, y1, fx, fy, clamped_x, clamped_y }
    }

    /// Interpolate one `height × width` plane stored row-major.
    #[inline]
    pub fn sample(&self, plane: &[f64], width: usize) -> f64 {
        let a = plane[self.y0 * width + self.x0];
        let b = plane[self.y0 * width + self.x1];
        let c = plane[self.y1 * width + self.x0];
        let d = plane[self.y1 * width + self.x1];
        let top = a + (b - a) * self.fx;
        let bottom = c + (d - c) * self.fx;
        top + (bottom - top) * self.fy
    }

    /// Partial derivatives of [`sample`](Self::sample) with respect to x and y.
    #[inline]
    pub fn gradient(&self, plane: &[f64], width: usize) -> (f64, f64) {
        let a = plane[self.y0 * width + self.x0];
        let b = plane[self.y0 * width + self.x1];
        let c = plane[self.y1 * width + self.x0];
        let d = plane[self.y1 * width + self.x1];
        let dx = if self.clamped_x || self.x0 == self.x1 {
            0.0
        } else {
            (b - a) * (1.0 - self.fy) + (d - c) * self.fy
        };
        let dy = if self.clamped_y || self.y0 == self.y1 {
            0.0
        } else {
            (c - a) * (1.0 - self.fx) + (d - b) * self.fx
        };
        (dx, dy)
    }

    /// Scatter `g` into a gradient plane with the interpolation weights.
    #[inline]
    pub fn scatter(&self, plane: &mut [f64], width: usize, g: f64) {
        let (fx, fy) = (self.fx, self.fy);
        plane[self.y0 * width + self.x0] += g * (1.0 - fx) * (1.0 - fy);
        plane[self.y0 * width + self.x1] += g * fx * (1.0 - fy);
        plane[self.y1 * width + self.x0] += g * (1.0 - fx) * fy;
        plane[self.y1 * width + self.x1] += g * fx * fy;
    }
}

/// Sample a `[C, H, W]` map at every point; returns `n × C` values, point-major.
pub fn bilinear_sample(map: &Tensor, pts: &PointSet) -> Result<Vec<f64>> {
    if pts.is_empty() {
        return Err(invalid!("bilinear_sample needs at least one point"));
    }
    let (c, h, w) = chw(map)?;
    let mut out = Vec::with_capacity(pts.len() * c);
    for p in pts.iter() {
        let tap = BilinearTap::new(p.x, p.y, w, h);
        for ch in 0..c {
            out.push(tap.sample(&map.data()[ch * h * w..(ch + 1) * h * w], w));
        }
    }
    Ok(out)
}

pub(crate) fn chw(map: &Tensor) -> Result<(usize, usize, usize)> {
    match *map.shape() {
        [c, h, w] if h > 0 && w > 0 => Ok((c, h, w)),
        [h, w] if h > 0 && w > 0 => Ok((1, h, w)),
        _ => Err(invalid!("expected a [C, H, W] or [H, W] map, got shape {:?}", map.shape())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Point;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ps(v: &[(f64, f64)]) -> PointSet {
        PointSet::new(v.iter().map(|&(x, y)| Point::new(x, y)).collect()).unwrap()
    }

    /// Independent 4-neighbour weighted sum, written without the tap helper.
    fn brute(map: &Tensor, x: f64, y: f64) -> Vec<f64> {
        let (c, h, w) = chw(map).unwrap();
        let xc = x.clamp(0.0, (w - 1) as f64);
        let yc = y.clamp(0.0, (h - 1) as f64);
        let mut out = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for yy in 0..h {
                for xx in 0..w {
                    let wx = (1.0 - (xc - xx as f64).abs()).max(0.0);
                    let wy = (1.0 - (yc - yy as f64).abs()).max(0.0);
                    acc += wx * wy * map.data()[ch * h * w + yy * w + xx];
                }
            }
            out[ch] = acc;
        }
        out
    }

    #[test]
    fn integer_coordinate_is_exact() {
        let data: Vec<f64> = (0..16 * 16).map(|i| (i as f64).sqrt()).collect();
        let map = Tensor::from_vec(&[16, 16], data.clone());
        let v = bilinear_sample(&map, &ps(&[(10.0, 7.0)])).unwrap();
        assert_eq!(v[0], data[7 * 16 + 10]);
    }

    #[test]
    fn midpoint_interpolates_linearly() {
        let mut map = Tensor::zeros(&[16, 16]);
        map.data_mut()[7 * 16 + 10] = 2.0;
        map.data_mut()[7 * 16 + 11] = 4.0;
        let v = bilinear_sample(&map, &ps(&[(10.5, 7.0)])).unwrap();
        assert_eq!(v[0], 3.0);
    }

    #[test]
    fn empty_points_rejected() {
        let map = Tensor::zeros(&[4, 4]);
        let empty = PointSet::from_points_unchecked(Vec::new());
        assert!(bilinear_sample(&map, &empty).is_err());
    }

    #[test]
    fn out_of_bounds_clamps_to_border() {
        let data: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let map = Tensor::from_vec(&[4, 4], data);
        let v = bilinear_sample(&map, &ps(&[(-3.0, -2.0), (9.0, 1.5), (1.5, 40.0)])).unwrap();
        assert_eq!(v, vec![0.0, 9.0, 13.5]);
    }

    #[test]
    fn matches_brute_force_oracle_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let map = Tensor::from_vec(&[3, 16, 16], data);
        for _ in 0..200 {
            let x = rng.random_range(-2.0..18.0);
            let y = rng.random_range(-2.0..18.0);
            let got = bilinear_sample(&map, &ps(&[(x, y)])).unwrap();
            let want = brute(&map, x, y);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-6, "({x}, {y}): {g} vs {w}");
            }
        }
    }

    proptest! {
        #[test]
        fn sampling_is_linear_in_the_map(
            a in -3.0f64..3.0, b in -3.0f64..3.0,
            x in -1.0f64..9.0, y in -1.0f64..9.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m1: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m2: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = m1.iter().zip(&m2).map(|(p, q)| a * p + b * q).collect();
            let pts = ps(&[(x, y)]);
            let s1 = bilinear_sample(&Tensor::from_vec(&[8, 8], m1), &pts).unwrap()[0];
            let s2 = bilinear_sample(&Tensor::from_vec(&[8, 8], m2), &pts).unwrap()[0];
            let sm = bilinear_sample(&Tensor::from_vec(&[8, 8], mix), &pts).unwrap()[0];
            prop_assert!((sm - (a * s1 + b * s2)).abs() < 1e-5);
        }

        #[test]
        fn constant_map_returns_constant(c in -5.0f64..5.0, x in 0.0f64..7.0, y in 0.0f64..7.0) {
            let map = Tensor::full(&[8, 8], c);
            let v = bilinear_sample(&map, &ps(&[(x, y)])).unwrap()[0];
            prop_assert!((v - c).abs() < 1e-12);
        }
    }
}
