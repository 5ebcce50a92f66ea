//! From activation maps to a 3D detection: threshold each view, intersect the
//! two silhouettes in 3D, tighten the result against uptake, and score it.

use std::collections::VecDeque;

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CamMap;
use crate::nn::Real;
use crate::volume::{PetVolume, View};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask2D {
    pub data: Array2<bool>,
    pub view: View,
}

impl BinaryMask2D {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }
}

/// How a 3D mask was produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub threshold: Option<f64>,
    pub views: Vec<View>,
    pub suv_frac: Option<f64>,
    /// Set by [`refine_mask`] when it was handed an empty mask.
    pub empty_input: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask3D {
    pub data: Array3<bool>,
    pub provenance: Provenance,
}

impl BinaryMask3D {
    pub fn new(data: Array3<bool>) -> Self {
        BinaryMask3D { data, provenance: Provenance::default() }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|b| *b)
    }

    pub fn is_subset_of(&self, other: &BinaryMask3D) -> bool {
        self.data.shape() == other.data.shape() && Zip::from(&self.data).and(&other.data).all(|a, b| !*a || *b)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbours only.
    #[default]
    #[serde(rename = "6")]
    Six,
    /// Faces and edges.
    #[serde(rename = "18")]
    Eighteen,
    /// Faces, edges and corners.
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dx in -1isize..=1 {
            for dy in -1isize..=1 {
                for dz in -1isize..=1 {
                    let n = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => n == 1,
                        Connectivity::Eighteen => n == 1 || n == 2,
                        Connectivity::TwentySix => n >= 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Keep pixels whose activation reaches `threshold_frac` of the (unit) peak.
pub fn cam_to_mask<T: Real>(cam: &CamMap<T>, threshold_frac: f64) -> Result<BinaryMask2D> {
    if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must lie in (0, 1), got {threshold_frac}")));
    }
    let view = cam
        .view
        .ok_or_else(|| Error::InvalidArgument("CAM carries no view identifier".into()))?;
    let t = T::lit(threshold_frac);
    Ok(BinaryMask2D { data: cam.data.mapv(|v| v >= t), view })
}

/// Voxel `(x, y, z)` is kept iff `coronal[x, z]` and `sagittal[y, z]`.
pub fn backproject(coronal: &BinaryMask2D, sagittal: &BinaryMask2D) -> Result<BinaryMask3D> {
    if coronal.view != View::Coronal || sagittal.view != View::Sagittal {
        return Err(Error::InvalidArgument(format!(
            "expected (coronal, sagittal) masks, got ({}, {})",
            coronal.view, sagittal.view
        )));
    }
    let (nx, nz) = coronal.data.dim();
    let (ny, nz2) = sagittal.data.dim();
    if nz != nz2 {
        return Err(Error::Shape(format!("coronal has {nz} slices along z, sagittal has {nz2}")));
    }
    let data = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| coronal.data[[x, z]] && sagittal.data[[y, z]]);
    Ok(BinaryMask3D {
        data,
        provenance: Provenance { views: vec![View::Coronal, View::Sagittal], ..Provenance::default() },
    })
}

/// Label connected components; returns per-voxel labels (0 = background)
/// and component sizes indexed by `label - 1`.
pub fn label_components(mask: &Array3<bool>, conn: Connectivity) -> (Array3<u32>, Vec<usize>) {
    let (nx, ny, nz) = mask.dim();
    let mut labels = Array3::<u32>::zeros((nx, ny, nz));
    let mut sizes = Vec::new();
    let offsets = conn.offsets();
    let mut queue = VecDeque::new();
    for ((x, y, z), &on) in mask.indexed_iter() {
        if !on || labels[[x, y, z]] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        let mut size = 0;
        labels[[x, y, z]] = label;
        queue.push_back([x, y, z]);
        while let Some([cx, cy, cz]) = queue.pop_front() {
            size += 1;
            for [dx, dy, dz] in &offsets {
                let (px, py, pz) = (cx as isize + dx, cy as isize + dy, cz as isize + dz);
                if px < 0 || py < 0 || pz < 0 {
                    continue;
                }
                let p = [px as usize, py as usize, pz as usize];
                if p[0] >= nx || p[1] >= ny || p[2] >= nz {
                    continue;
                }
                if mask[p] && labels[p] == 0 {
                    labels[p] = label;
                    queue.push_back(p);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// The largest connected component; ties go to the component found first in
/// raster order.
pub fn largest_component(mask: &Array3<bool>, conn: Connectivity) -> Array3<bool> {
    let (labels, sizes) = label_components(mask, conn);
    let Some(best) = sizes.iter().enumerate().fold(None, |best: Option<(usize, usize)>, (i, &s)| match best {
        Some((_, bs)) if bs >= s => best,
        _ => Some((i, s)),
    }) else {
        return Array3::from_elem(mask.raw_dim(), false);
    };
    let keep = best.0 as u32 + 1;
    labels.mapv(|l| l == keep)
}

/// Keep mask voxels with uptake at least `suv_frac` of the in-mask maximum,
/// then only the largest connected component.
pub fn refine_mask(
    mask: &BinaryMask3D,
    vol: &PetVolume,
    suv_frac: f64,
    conn: Connectivity,
) -> Result<BinaryMask3D> {
    if !(0.0..=1.0).contains(&suv_frac) {
        return Err(Error::InvalidArgument(format!("suv_frac must lie in [0, 1], got {suv_frac}")));
    }
    if mask.data.shape() != vol.data().shape() {
        return Err(Error::Shape(format!("mask {:?} vs volume {:?}", mask.data.shape(), vol.data().shape())));
    }
    let mut provenance = mask.provenance.clone();
    provenance.suv_frac = Some(suv_frac);
    if mask.is_empty() {
        log::debug!("refine_mask received an empty mask");
        provenance.empty_input = true;
        return Ok(BinaryMask3D { data: mask.data.clone(), provenance });
    }
    let peak = Zip::from(&mask.data)
        .and(vol.data())
        .fold(f32::NEG_INFINITY, |acc, &m, &v| if m { acc.max(v) } else { acc });
    let cut = suv_frac * peak as f64;
    let hot = Zip::from(&mask.data).and(vol.data()).map_collect(|&m, &v| m && v as f64 >= cut);
    Ok(BinaryMask3D { data: largest_component(&hot, conn), provenance })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceScore {
    pub value: f64,
    /// Both masks were empty; `value` is 1 by convention.
    pub both_empty: bool,
}

/// `2|A∩B| / (|A| + |B|)`.
pub fn dice(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<DiceScore> {
    if pred.data.shape() != gt.data.shape() {
        return Err(Error::Shape(format!("pred {:?} vs gt {:?}", pred.data.shape(), gt.data.shape())));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    Zip::from(&pred.data).and(&gt.data).for_each(|&p, &g| {
        a += p as usize;
        b += g as usize;
        both += (p && g) as usize;
    });
    if a + b == 0 {
        return Ok(DiceScore { value: 1.0, both_empty: true });
    }
    Ok(DiceScore { value: 2.0 * both as f64 / (a + b) as f64, both_empty: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{project_center, Point3, Spacing};
    use ndarray::array;
    use proptest::prelude::*;

    fn cam(data: Array2<f64>, view: View) -> CamMap<f64> {
        CamMap { data, class: None, view: Some(view), degenerate: false }
    }

    fn m2(data: Array2<bool>, view: View) -> BinaryMask2D {
        BinaryMask2D { data, view }
    }

    #[test]
    fn threshold_examples() {
        let full = cam_to_mask(&cam(Array2::ones((3, 3)), View::Coronal), 0.4).unwrap();
        assert_eq!(full.count(), 9);

        let m = cam_to_mask(&cam(array![[0.2, 0.9], [0.5, 1.0]], View::Coronal), 0.5).unwrap();
        assert_eq!(m.data, array![[false, true], [true, true]]);

        let peaked = cam(array![[0.1, 0.3, 0.2], [0.05, 1.0, 0.7]], View::Sagittal);
        let m = cam_to_mask(&peaked, 0.999).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.data[[1, 1]]);

        let zero = cam_to_mask(&cam(Array2::zeros((2, 2)), View::Coronal), 0.4).unwrap();
        assert_eq!(zero.count(), 0);

        for bad in [0.0, 1.0, -0.2, 1.5] {
            assert!(matches!(cam_to_mask(&peaked, bad), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn backproject_enumerated_case() {
        let mut c = Array2::from_elem((2, 2), false);
        c[[0, 0]] = true;
        let mut s = Array2::from_elem((2, 2), false);
        s[[1, 0]] = true;
        let out = backproject(&m2(c, View::Coronal), &m2(s, View::Sagittal)).unwrap();
        for ((x, y, z), v) in out.data.indexed_iter() {
            assert_eq!(*v, (x, y, z) == (0, 1, 0));
        }
    }

    #[test]
    fn backproject_empty_and_full() {
        let empty = m2(Array2::from_elem((3, 4), false), View::Coronal);
        let full_s = m2(Array2::from_elem((5, 4), true), View::Sagittal);
        assert!(backproject(&empty, &full_s).unwrap().is_empty());
        let full_c = m2(Array2::from_elem((3, 4), true), View::Coronal);
        let all = backproject(&full_c, &full_s).unwrap();
        assert_eq!(all.count(), 3 * 5 * 4);
    }

    #[test]
    fn backproject_shape_errors() {
        let c = m2(Array2::from_elem((3, 4), true), View::Coronal);
        let s = m2(Array2::from_elem((3, 5), true), View::Sagittal);
        assert!(matches!(backproject(&c, &s), Err(Error::Shape(_))));
        assert!(matches!(backproject(&s, &c), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn center_round_trip_through_backprojection() {
        let shape = [6, 7, 9];
        let c = Point3::new(3, 5, 7);
        let mut cor = Array2::from_elem((6, 9), false);
        let mut sag = Array2::from_elem((7, 9), false);
        let pc = project_center(c, shape, View::Coronal).unwrap();
        let ps = project_center(c, shape, View::Sagittal).unwrap();
        cor[[pc.u, pc.v]] = true;
        sag[[ps.u, ps.v]] = true;
        let out = backproject(&m2(cor, View::Coronal), &m2(sag, View::Sagittal)).unwrap();
        let on: Vec<_> = out.data.indexed_iter().filter(|(_, v)| **v).map(|(i, _)| i).collect();
        assert_eq!(on, vec![(3, 5, 7)]);
    }

    fn flat_volume(shape: (usize, usize, usize), v: f32) -> PetVolume {
        PetVolume::new(Array3::from_elem(shape, v), Spacing::ISOTROPIC_2MM).unwrap()
    }

    #[test]
    fn refine_with_zero_fraction_keeps_largest_component() {
        let mut data = Array3::from_elem((6, 6, 6), false);
        data[[0, 0, 0]] = true;
        data[[0, 0, 1]] = true;
        for z in 0..4 {
            data[[4, 4, z]] = true;
        }
        let out = refine_mask(&BinaryMask3D::new(data), &flat_volume((6, 6, 6), 0.3), 0.0, Connectivity::Six).unwrap();
        assert_eq!(out.count(), 4);
        assert!(out.data[[4, 4, 0]]);
    }

    #[test]
    fn refine_single_voxel() {
        let mut data = Array3::from_elem((4, 4, 4), false);
        data[[1, 2, 3]] = true;
        let mask = BinaryMask3D::new(data.clone());
        for f in [0.0, 0.4, 0.99, 1.0] {
            let out = refine_mask(&mask, &flat_volume((4, 4, 4), 0.7), f, Connectivity::Six).unwrap();
            assert_eq!(out.data, data);
        }
    }

    #[test]
    fn refine_picks_nine_over_five_after_intensity_test() {
        // Two hot blobs (5 and 9 voxels) inside one box-shaped mask, joined only
        // through cold voxels that the intensity test removes.
        let shape = (10, 4, 4);
        let mut vol = Array3::from_elem(shape, 0.1f32);
        let mask = Array3::from_elem(shape, true);
        for x in 0..5 {
            vol[[x, 0, 0]] = 0.9;
        }
        for x in 6..9 {
            for y in 1..4 {
                vol[[x, y, 2]] = 0.8;
            }
        }
        let vol = PetVolume::new(vol, Spacing::ISOTROPIC_2MM).unwrap();
        let out = refine_mask(&BinaryMask3D::new(mask), &vol, 0.5, Connectivity::Six).unwrap();

        // Oracle: exhaustive flood fill over the thresholded set.
        let hot = vol.data().mapv(|v| v >= 0.45);
        let mut comps: Vec<Vec<(usize, usize, usize)>> = Vec::new();
        let mut seen = Array3::from_elem(shape, false);
        for (idx, &h) in hot.indexed_iter() {
            if !h || seen[idx] {
                continue;
            }
            let mut stack = vec![idx];
            let mut comp = Vec::new();
            seen[idx] = true;
            while let Some((x, y, z)) = stack.pop() {
                comp.push((x, y, z));
                for (a, b, c) in hot.indexed_iter().filter(|(_, v)| **v).map(|(i, _)| i) {
                    let d = x.abs_diff(a) + y.abs_diff(b) + z.abs_diff(c);
                    if d == 1 && !seen[(a, b, c)] {
                        seen[(a, b, c)] = true;
                        stack.push((a, b, c));
                    }
                }
            }
            comps.push(comp);
        }
        let mut sizes: Vec<usize> = comps.iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![5, 9]);
        let big = comps.iter().find(|c| c.len() == 9).unwrap();
        assert_eq!(out.count(), 9);
        assert!(big.iter().all(|&i| out.data[i]));
    }

    #[test]
    fn refine_empty_is_flagged() {
        let mask = BinaryMask3D::new(Array3::from_elem((3, 3, 3), false));
        let out = refine_mask(&mask, &flat_volume((3, 3, 3), 0.5), 0.4, Connectivity::Six).unwrap();
        assert!(out.is_empty());
        assert!(out.provenance.empty_input);
    }

    #[test]
    fn connectivity_neighbourhood_sizes() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::Eighteen.offsets().len(), 18);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
        let mut diag = Array3::from_elem((2, 2, 2), false);
        diag[[0, 0, 0]] = true;
        diag[[1, 1, 1]] = true;
        assert_eq!(label_components(&diag, Connectivity::Six).1.len(), 2);
        assert_eq!(label_components(&diag, Connectivity::TwentySix).1.len(), 1);
    }

    #[test]
    fn dice_examples() {
        let a = Array3::from_shape_fn((2, 2, 2), |(x, y, _)| x == 0 && y <= 1);
        let gt = BinaryMask3D::new(a.clone());
        assert_eq!(dice(&gt, &gt).unwrap().value, 1.0);

        let disjoint = BinaryMask3D::new(a.mapv(|v| !v));
        assert_eq!(dice(&gt, &disjoint).unwrap().value, 0.0);

        // |A| = 4, |B| = 4, |A∩B| = 2.
        let b = BinaryMask3D::new(Array3::from_shape_fn((2, 2, 2), |(_, y, _)| y == 0));
        assert_eq!(dice(&gt, &b).unwrap().value, 0.5);

        let empty = BinaryMask3D::new(Array3::from_elem((2, 2, 2), false));
        let both = dice(&empty, &empty).unwrap();
        assert_eq!(both.value, 1.0);
        assert!(both.both_empty);
        assert_eq!(dice(&empty, &gt).unwrap().value, 0.0);

        let other = BinaryMask3D::new(Array3::from_elem((2, 2, 3), false));
        assert!(matches!(dice(&gt, &other), Err(Error::Shape(_))));
    }

    fn arb_mask3() -> impl Strategy<Value = Array3<bool>> {
        proptest::collection::vec(any::<bool>(), 4 * 3 * 5).prop_map(|v| Array3::from_shape_vec((4, 3, 5), v).unwrap())
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_bounded(a in arb_mask3(), b in arb_mask3()) {
            let (a, b) = (BinaryMask3D::new(a), BinaryMask3D::new(b));
            let ab = dice(&a, &b).unwrap().value;
            prop_assert_eq!(ab, dice(&b, &a).unwrap().value);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn threshold_monotone(vals in proptest::collection::vec(0.0f64..1.0, 12), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let c = cam(Array2::from_shape_vec((3, 4), vals).unwrap(), View::Coronal);
            let a = cam_to_mask(&c, lo).unwrap();
            let b = cam_to_mask(&c, hi).unwrap();
            prop_assert!(Zip::from(&b.data).and(&a.data).all(|h, l| !*h || *l));
        }

        #[test]
        fn refine_is_subset(m in arb_mask3(), seed in 0u64..500, frac in 0.0f64..1.0) {
            let vol = Array3::from_shape_fn((4, 3, 5), |(x, y, z)| (((x * 15 + y * 5 + z) as u64 * 2_654_435_761 + seed) % 101) as f32 / 100.0);
            let vol = PetVolume::new(vol, Spacing::ISOTROPIC_2MM).unwrap();
            let mask = BinaryMask3D::new(m);
            let out = refine_mask(&mask, &vol, frac, Connectivity::Six).unwrap();
            prop_assert!(out.is_subset_of(&mask));
        }
    }
}
