//! Volume data model and the geometric operations that feed the classifier.
//!
//! Axis convention used throughout the crate:
//!
//! * `x`: left/right
//! * `y`: anterior/posterior
//! * `z`: inferior/superior
//!
//! The coronal ("face") view collapses `y`, giving `(x, z)`-indexed images.
//! The sagittal ("profile") view collapses `x`, giving `(y, z)`-indexed images.
//! Both views therefore share the `z` axis, which is what makes the two
//! silhouettes combinable in [`crate::localization::backproject`].

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical voxel size in millimeters, ordered `(x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub const ISOTROPIC_2MM: Spacing = Spacing([2.0, 2.0, 2.0]);

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("spacing must be strictly positive, got {:?}", self.0)))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    /// Face view: maximum over the anterior/posterior axis.
    Coronal,
    /// Profile view: maximum over the left/right axis.
    Sagittal,
}

impl View {
    pub const BOTH: [View; 2] = [View::Coronal, View::Sagittal];

    /// The volume axis collapsed by this view.
    pub fn projected_axis(self) -> Axis {
        match self {
            View::Coronal => Axis(1),
            View::Sagittal => Axis(0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Coronal => "coronal",
            View::Sagittal => "sagittal",
        }
    }
}

impl std::fmt::Display for View {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point3 {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Point3 {
    pub fn new(x: usize, y: usize, z: usize) -> Self {
        Point3 { x, y, z }
    }

    pub fn in_bounds(&self, shape: [usize; 3]) -> bool {
        self.x < shape[0] && self.y < shape[1] && self.z < shape[2]
    }
}

/// A pixel in one of the two projection views. `u` is the row (x or y),
/// `v` is the column (always z).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point2 {
    pub u: usize,
    pub v: usize,
    pub view: View,
}

/// A 3D PET scan in SUV units with physical voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct PetVolume {
    data: Array3<f32>,
    spacing: Spacing,
}

impl PetVolume {
    pub fn new(data: Array3<f32>, spacing: Spacing) -> Result<Self> {
        spacing.validate()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("volume contains non-finite values".into()));
        }
        Ok(PetVolume { data, spacing })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn shape(&self) -> [usize; 3] {
        let (nx, ny, nz) = self.data.dim();
        [nx, ny, nz]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// A maximum-intensity projection of a [`PetVolume`].
#[derive(Clone, Debug, PartialEq)]
pub struct MipImage {
    pub data: Array2<f32>,
    pub view: View,
    pub source_shape: [usize; 3],
}

impl MipImage {
    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

fn nearest_lookup(n_in: usize, src: f64, dst: f64) -> Vec<usize> {
    let n_out = round_half_up(n_in as f64 * src / dst).max(1);
    (0..n_out)
        .map(|i| {
            let idx = ((i as f64 + 0.5) * dst / src).floor() as usize;
            idx.min(n_in.saturating_sub(1))
        })
        .collect()
}

/// Nearest-neighbour resampling of any voxel grid (volumes and masks alike).
pub fn resample_grid<T: Clone>(data: &Array3<T>, src: Spacing, dst: Spacing) -> Result<Array3<T>> {
    src.validate()?;
    dst.validate()?;
    let (nx, ny, nz) = data.dim();
    let [lx, ly, lz] = [
        nearest_lookup(nx, src.0[0], dst.0[0]),
        nearest_lookup(ny, src.0[1], dst.0[1]),
        nearest_lookup(nz, src.0[2], dst.0[2]),
    ];
    Ok(Array3::from_shape_fn((lx.len(), ly.len(), lz.len()), |(i, j, k)| data[[lx[i], ly[j], lz[k]]].clone()))
}

/// Nearest-neighbour resampling onto a new voxel grid.
///
/// Each output voxel takes the value of the input voxel whose physical extent
/// contains the output voxel's center. Output extent per axis is
/// `round_half_up(n_in * s_in / s_out)`, never less than one voxel.
pub fn resample_volume(vol: &PetVolume, target: Spacing) -> Result<PetVolume> {
    target.validate()?;
    let data = resample_grid(&vol.data, vol.spacing, target)?;
    PetVolume::new(data, target)
}

/// Map a voxel index to the voxel containing its physical center on a new grid.
pub fn resample_point(p: Point3, src: Spacing, dst: Spacing, out_shape: [usize; 3]) -> Point3 {
    let map = |i: usize, a: usize| {
        let idx = ((i as f64 + 0.5) * src.0[a] / dst.0[a]).floor() as usize;
        idx.min(out_shape[a].saturating_sub(1))
    };
    Point3::new(map(p.x, 0), map(p.y, 1), map(p.z, 2))
}

/// Clip to `[0, max_suv]` and rescale to `[0, 1]`.
pub fn normalize_suv(vol: &PetVolume, max_suv: f32) -> Result<PetVolume> {
    if !(max_suv.is_finite() && max_suv > 0.0) {
        return Err(Error::InvalidArgument(format!("max_suv must be positive, got {max_suv}")));
    }
    if let Some(v) = vol.data.iter().find(|v| **v < 0.0) {
        return Err(Error::Validation(format!("SUV values must be non-negative, found {v}")));
    }
    let data = vol.data.mapv(|v| v.min(max_suv) / max_suv);
    Ok(PetVolume { data, spacing: vol.spacing })
}

pub fn mip_project(vol: &PetVolume, view: View) -> Result<MipImage> {
    if vol.is_empty() {
        return Err(Error::InvalidArgument("cannot project an empty volume".into()));
    }
    let data = vol
        .data
        .fold_axis(view.projected_axis(), f32::NEG_INFINITY, |acc, v| acc.max(*v));
    Ok(MipImage { data, view, source_shape: vol.shape() })
}

/// Express a voxel position in the pixel grid of one projection view.
pub fn project_center(c: Point3, shape: [usize; 3], view: View) -> Result<Point2> {
    if !c.in_bounds(shape) {
        return Err(Error::Validation(format!("point {c:?} outside volume of shape {shape:?}")));
    }
    Ok(match view {
        View::Coronal => Point2 { u: c.x, v: c.z, view },
        View::Sagittal => Point2 { u: c.y, v: c.z, view },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Zip;
    use proptest::prelude::*;

/// Element-wise `a <= b` over two equally shaped arrays.
fn pointwise_le<D: ndarray::Dimension>(
    a: &ndarray::Array<f32, D>,
    b: &ndarray::Array<f32, D>,
) -> bool {
    a.shape() == b.shape() && Zip::from(a).and(b).all(|x, y| x <= y)
}

    fn vol(data: Array3<f32>, s: [f64; 3]) -> PetVolume {
        PetVolume::new(data, Spacing(s)).unwrap()
    }

    fn ramp(shape: (usize, usize, usize)) -> Array3<f32> {
        Array3::from_shape_fn(shape, |(i, j, k)| (i * 10_000 + j * 100 + k) as f32)
    }

    /// Brute force: for every output voxel, scan every input index for the
    /// closest physical center. Ties resolve to the higher index.
    fn brute_force_nn(v: &PetVolume, target: [f64; 3]) -> Array3<f32> {
        let s = v.spacing().0;
        let n = v.shape();
        let out: Vec<usize> = (0..3)
            .map(|a| (n[a] as f64 * s[a] / target[a] + 0.5).floor() as usize)
            .collect();
        let nearest = |a: usize, i: usize| {
            let p = (i as f64 + 0.5) * target[a];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..n[a] {
                let d = ((j as f64 + 0.5) * s[a] - p).abs();
                if d <= best_d {
                    best = j;
                    best_d = d;
                }
            }
            best
        };
        Array3::from_shape_fn((out[0], out[1], out[2]), |(i, j, k)| {
            v.data()[[nearest(0, i), nearest(1, j), nearest(2, k)]]
        })
    }

    #[test]
    fn resample_clinical_spacing_to_isotropic() {
        let v = vol(ramp((10, 10, 10)), [4.06, 4.06, 2.0]);
        let r = resample_volume(&v, Spacing::ISOTROPIC_2MM).unwrap();
        assert_eq!(r.shape(), [20, 20, 10]);
        assert_eq!(r.spacing(), Spacing::ISOTROPIC_2MM);
        assert_eq!(r.data(), &brute_force_nn(&v, [2.0, 2.0, 2.0]));
    }

    #[test]
    fn resample_identity() {
        let v = vol(ramp((5, 6, 7)), [2.0, 2.0, 2.0]);
        let r = resample_volume(&v, Spacing([2.0, 2.0, 2.0])).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn resample_downsampling_matches_oracle() {
        let v = vol(ramp((9, 7, 5)), [1.0, 1.5, 3.0]);
        let r = resample_volume(&v, Spacing([2.5, 2.0, 1.7])).unwrap();
        assert_eq!(r.data(), &brute_force_nn(&v, [2.5, 2.0, 1.7]));
    }

    #[test]
    fn resample_rejects_bad_spacing() {
        let v = vol(ramp((2, 2, 2)), [1.0, 1.0, 1.0]);
        assert!(matches!(resample_volume(&v, Spacing([0.0, 1.0, 1.0])), Err(Error::InvalidArgument(_))));
        assert!(matches!(resample_volume(&v, Spacing([1.0, -2.0, 1.0])), Err(Error::InvalidArgument(_))));
        assert!(PetVolume::new(ramp((2, 2, 2)), Spacing([1.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn normalize_examples() {
        let data = Array3::from_shape_vec((1, 1, 4), vec![30.0, 45.0, 15.0, 0.0]).unwrap();
        let n = normalize_suv(&vol(data, [2.0; 3]), 30.0).unwrap();
        assert_eq!(n.data().as_slice().unwrap(), &[1.0, 1.0, 0.5, 0.0]);
    }

    #[test]
    fn normalize_rejects_negative() {
        let data = Array3::from_shape_vec((1, 1, 2), vec![1.0, -0.1]).unwrap();
        assert!(matches!(normalize_suv(&vol(data, [2.0; 3]), 30.0), Err(Error::Validation(_))));
        let ok = vol(Array3::zeros((1, 1, 1)), [2.0; 3]);
        assert!(matches!(normalize_suv(&ok, 0.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn mip_of_constant_volume() {
        let v = vol(Array3::from_elem((3, 4, 5), 0.7), [2.0; 3]);
        for view in View::BOTH {
            let m = mip_project(&v, view).unwrap();
            assert!(m.data.iter().all(|p| *p == 0.7));
        }
        assert_eq!(mip_project(&v, View::Coronal).unwrap().shape(), (3, 5));
        assert_eq!(mip_project(&v, View::Sagittal).unwrap().shape(), (4, 5));
    }

    #[test]
    fn mip_single_voxel() {
        let mut data = Array3::zeros((4, 5, 6));
        data[[1, 3, 4]] = 1.0;
        let m = mip_project(&vol(data, [2.0; 3]), View::Coronal).unwrap();
        for ((u, v), p) in m.data.indexed_iter() {
            assert_eq!(*p, if (u, v) == (1, 4) { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn mip_rejects_empty() {
        let v = vol(Array3::zeros((0, 3, 3)), [2.0; 3]);
        assert!(matches!(mip_project(&v, View::Coronal), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn project_center_examples() {
        let shape = [8, 8, 8];
        let c = Point3::new(3, 5, 7);
        let pc = project_center(c, shape, View::Coronal).unwrap();
        let ps = project_center(c, shape, View::Sagittal).unwrap();
        assert_eq!((pc.u, pc.v), (3, 7));
        assert_eq!((ps.u, ps.v), (5, 7));
        assert!(project_center(Point3::new(8, 0, 0), shape, View::Coronal).is_err());
    }

    fn arb_volume() -> impl Strategy<Value = Array3<f32>> {
        (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(a, b, c)| {
            proptest::collection::vec(0.0f32..10.0, a * b * c)
                .prop_map(move |v| Array3::from_shape_vec((a, b, c), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn mip_max_equals_volume_max(data in arb_volume()) {
            let v = vol(data, [2.0; 3]);
            for view in View::BOTH {
                prop_assert_eq!(mip_project(&v, view).unwrap().max_value(), v.max_value());
            }
        }

        #[test]
        fn mip_is_monotone(data in arb_volume(), bump in 0.0f32..3.0) {
            let lo = vol(data.clone(), [2.0; 3]);
            let hi = vol(data.mapv(|x| x + bump * (x * 7.0).sin().abs()), [2.0; 3]);
            for view in View::BOTH {
                let a = mip_project(&lo, view).unwrap();
                let b = mip_project(&hi, view).unwrap();
                prop_assert!(pointwise_le(&a.data, &b.data));
            }
        }

        #[test]
        fn normalize_idempotent_at_unit_max(data in arb_volume()) {
            let once = normalize_suv(&vol(data, [2.0; 3]), 30.0).unwrap();
            let twice = normalize_suv(&once, 1.0).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn resample_identity_any_spacing(data in arb_volume(), s in 0.5f64..5.0) {
            let v = vol(data, [s, s * 1.3, s * 0.7]);
            let r = resample_volume(&v, v.spacing()).unwrap();
            prop_assert_eq!(r, v);
        }
    }
}
