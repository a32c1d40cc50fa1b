//! Gaussian joint heatmaps and argmax decoding.
//!
//! Cell `(u, v)` of a stride-`s` map covers input pixels
//! `[u*s, (u+1)*s) x [v*s, (v+1)*s)`; its center sits at `u*s + s/2`.

use rpstn_tensor::Tensor;

use crate::error::{Error, Result};

/// Per-joint coordinates in input pixels plus visibility flags.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSet {
    pub coords: Vec<[f32; 2]>,
    pub visible: Vec<bool>,
}

impl JointSet {
    pub fn new(coords: Vec<[f32; 2]>, visible: Vec<bool>) -> Self {
        assert_eq!(coords.len(), visible.len(), "one visibility flag per joint");
        Self { coords, visible }
    }

    pub fn all_visible(coords: Vec<[f32; 2]>) -> Self {
        let n = coords.len();
        Self::new(coords, vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Score maps `[B, K, H', W']` at a fixed input stride.
#[derive(Debug, Clone, PartialEq)]
pub struct JointHeatmaps {
    pub maps: Tensor<f32>,
    pub stride: usize,
}

impl JointHeatmaps {
    pub fn batch(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.maps.shape()[2], self.maps.shape()[3])
    }
}

/// Cell-space coordinate whose cell center is input pixel `p`.
fn to_cell(p: f64, stride: usize) -> f64 {
    p / stride as f64 - 0.5
}

/// Render one `[K, H/stride, W/stride]` block of target maps into `out`.
pub fn render_into(joints: &JointSet, sigma: f64, stride: usize, height: usize, width: usize, out: &mut [f32]) -> Result<()> {
    if !(sigma > 0.0) {
        return Err(Error::Data(format!("sigma must be positive, got {sigma}")));
    }
    if stride == 0 || !height.is_multiple_of(stride) || !width.is_multiple_of(stride) {
        return Err(Error::Data(format!(
            "image {height}x{width} is not divisible by stride {stride}"
        )));
    }
    let (mh, mw) = (height / stride, width / stride);
    assert_eq!(out.len(), joints.len() * mh * mw, "output block size");
    let denom = 2.0 * sigma * sigma;
    for (k, (&[x, y], &vis)) in joints.coords.iter().zip(&joints.visible).enumerate() {
        let map = &mut out[k * mh * mw..(k + 1) * mh * mw];
        if !vis {
            map.fill(0.0);
            continue;
        }
        let (x, y) = (x as f64, y as f64);
        if !(0.0..=width as f64).contains(&x) || !(0.0..=height as f64).contains(&y) {
            return Err(Error::Data(format!(
                "visible joint {k} at ({x}, {y}) lies outside the {width}x{height} image"
            )));
        }
        let (cx, cy) = (to_cell(x, stride), to_cell(y, stride));
        for v in 0..mh {
            let dy = v as f64 - cy;
            for u in 0..mw {
                let dx = u as f64 - cx;
                map[v * mw + u] = (-(dx * dx + dy * dy) / denom).exp() as f32;
            }
        }
    }
    Ok(())
}

/// Ground-truth maps for one joint set, as a batch of one.
pub fn encode(joints: &JointSet, sigma: f64, stride: usize, height: usize, width: usize) -> Result<JointHeatmaps> {
    if stride == 0 || !height.is_multiple_of(stride) || !width.is_multiple_of(stride) {
        return Err(Error::Data(format!(
            "image {height}x{width} is not divisible by stride {stride}"
        )));
    }
    let (mh, mw) = (height / stride, width / stride);
    let mut data = vec![0.0f32; joints.len() * mh * mw];
    render_into(joints, sigma, stride, height, width, &mut data)?;
    let maps = Tensor::new(&[1, joints.len(), mh, mw], data)?;
    Ok(JointHeatmaps { maps, stride })
}

/// Argmax of one map: `(x, y)` pixel center of the first maximal cell in
/// row-major order, and whether the peak exceeds 0.
pub fn decode_map(map: &[f32], width: usize, stride: usize) -> ([f32; 2], bool) {
    let mut best = 0;
    for (i, &v) in map.iter().enumerate() {
        if v > map[best] {
            best = i;
        }
    }
    let (u, v) = (best % width, best / width);
    let half = stride as f32 / 2.0;
    (
        [u as f32 * stride as f32 + half, v as f32 * stride as f32 + half],
        map[best] > 0.0,
    )
}

/// Decode every batch element.
pub fn decode(maps: &JointHeatmaps) -> Vec<JointSet> {
    let (b, k) = (maps.batch(), maps.joints());
    let (h, w) = maps.extent();
    let data = maps.maps.data();
    (0..b)
        .map(|bi| {
            let (coords, visible) = (0..k)
                .map(|ki| {
                    let start = (bi * k + ki) * h * w;
                    decode_map(&data[start..start + h * w], w, maps.stride)
                })
                .unzip();
            JointSet { coords, visible }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_centered_joint_peaks_at_one() {
        let j = JointSet::all_visible(vec![[18.0, 10.0]]);
        let hm = encode(&j, 2.0, 4, 32, 32).unwrap();
        // pixel (18, 10) is the center of cell (4, 2)
        assert_eq!(hm.maps.at(&[0, 0, 2, 4]), 1.0);
        let d = decode(&hm);
        assert_eq!(d[0].coords[0], [18.0, 10.0]);
        assert!(d[0].visible[0]);
    }

    #[test]
    fn closed_form_value_two_cells_away() {
        let j = JointSet::all_visible(vec![[4.5, 4.5]]);
        let hm = encode(&j, 1.0, 1, 9, 9).unwrap();
        assert_eq!(hm.maps.at(&[0, 0, 4, 4]), 1.0);
        let v = hm.maps.at(&[0, 0, 6, 4]) as f64;
        assert!((v - (-2.0f64).exp()).abs() < 1e-7);
        assert!((v - 0.1353).abs() < 1e-4);
    }

    #[test]
    fn invisible_joint_gives_zero_map_and_decodes_invisible() {
        let j = JointSet::new(vec![[5.0, 5.0], [100.0, -3.0]], vec![true, false]);
        let hm = encode(&j, 2.0, 4, 16, 16).unwrap();
        let plane = 16;
        assert!(hm.maps.data()[plane..].iter().all(|&v| v == 0.0));
        let d = decode(&hm);
        assert!(!d[0].visible[1]);
    }

    #[test]
    fn out_of_bounds_visible_joint_is_rejected() {
        let j = JointSet::all_visible(vec![[17.0, 2.0]]);
        assert!(matches!(encode(&j, 2.0, 4, 16, 16), Err(Error::Data(_))));
        assert!(encode(&j, 2.0, 3, 16, 16).is_err());
    }

    #[test]
    fn ties_pick_row_major_first() {
        let mut map = vec![0.0f32; 16];
        map[6] = 0.8;
        map[9] = 0.8;
        let (xy, vis) = decode_map(&map, 4, 2);
        assert!(vis);
        assert_eq!(xy, [5.0, 3.0]);
    }
}
