//! Synthetic PET phantoms with known ground truth.
//!
//! Each case holds one ellipsoidal tumor whose placement region and shape
//! depend on the class, plus a number of equally bright spherical
//! "physiological" hot spots centered outside every placement region. Everything is derived from a single
//! integer seed, so a case can be regenerated bit for bit.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Annotation};
use crate::volume::{PetVolume, Point3, Spacing};

/// Where and how a class's tumor is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Lower corner of the placement box (inclusive). The whole tumor lies inside.
    pub region_min: [usize; 3],
    /// Upper corner of the placement box (exclusive).
    pub region_max: [usize; 3],
    /// Per-axis semi-axis range in voxels, lower bound.
    pub radius_min: [f64; 3],
    pub radius_max: [f64; 3],
    /// Tumor uptake range in SUV.
    pub intensity: [f64; 2],
}

impl ClassSpec {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.region_min[a] && p[a] < self.region_max[a])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub classes: Vec<ClassSpec>,
    pub n_confounders: usize,
    pub confounder_radius: [f64; 2],
    pub confounder_intensity: [f64; 2],
    /// Minimum free space in voxels between a confounder and the tumor.
    pub confounder_gap: f64,
    /// Upper bound of the uniform background noise, in SUV.
    pub noise_level: f64,
    /// Gaussian blur width in voxels; 0 disables blurring.
    pub blur_sigma: f64,
    pub rng_seed: u64,
    pub max_retries: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            shape: [64, 64, 96],
            spacing: [2.0, 2.0, 2.0],
            classes: vec![
                ClassSpec {
                    name: "upper-thorax".into(),
                    region_min: [6, 12, 56],
                    region_max: [58, 52, 88],
                    radius_min: [3.5, 3.5, 3.0],
                    radius_max: [5.0, 5.0, 4.5],
                    intensity: [8.0, 14.0],
                },
                ClassSpec {
                    name: "mediastinal".into(),
                    region_min: [22, 20, 16],
                    region_max: [42, 44, 64],
                    radius_min: [2.5, 2.5, 7.0],
                    radius_max: [3.5, 3.5, 10.0],
                    intensity: [8.0, 14.0],
                },
            ],
            n_confounders: 3,
            confounder_radius: [2.5, 5.0],
            confounder_intensity: [8.0, 16.0],
            confounder_gap: 4.0,
            noise_level: 1.0,
            blur_sigma: 1.0,
            rng_seed: 20_190_101,
            max_retries: 200,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.shape.contains(&0) {
            return bad(format!("shape {:?} has an empty axis", self.shape));
        }
        Spacing(self.spacing).validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.classes.len() != 2 {
            return bad(format!("exactly two classes are supported, got {}", self.classes.len()));
        }
        if self.classes[0] == self.classes[1] {
            return bad("the two class specs must differ".into());
        }
        for c in &self.classes {
            for a in 0..3 {
                if c.region_min[a] >= c.region_max[a] || c.region_max[a] > self.shape[a] {
                    return bad(format!("class '{}' region is empty or outside the volume", c.name));
                }
                if !(c.radius_min[a] > 0.0 && c.radius_min[a] <= c.radius_max[a]) {
                    return bad(format!("class '{}' radius range must be positive", c.name));
                }
            }
            if !(c.intensity[0] <= c.intensity[1]) || c.intensity[0] <= self.noise_level {
                return bad(format!("class '{}' intensity must lie strictly above the noise ceiling", c.name));
            }
        }
        if self.n_confounders > 0 {
            let [lo, hi] = self.confounder_radius;
            if !(lo > 0.0 && lo <= hi) {
                return bad("confounder radius range must be positive".into());
            }
            let [lo, hi] = self.confounder_intensity;
            if !(lo <= hi) || lo <= self.noise_level {
                return bad("confounder intensity must lie strictly above the noise ceiling".into());
            }
        }
        if self.noise_level < 0.0 || self.blur_sigma < 0.0 || self.confounder_gap < 0.0 {
            return bad("noise level, blur and gap must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub mask: Array3<bool>,
    pub center: Point3,
    pub label: usize,
}

/// One labelled scan.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub volume: PetVolume,
    pub truth: GroundTruth,
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] as f64 - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn bounds(&self, shape: [usize; 3]) -> [(usize, usize); 3] {
        std::array::from_fn(|a| {
            let lo = (self.center[a] - self.radii[a]).floor().max(0.0) as usize;
            let hi = ((self.center[a] + self.radii[a]).ceil() as usize + 1).min(shape[a]);
            (lo, hi)
        })
    }

    fn bounding_radius(&self) -> f64 {
        self.radii.iter().copied().fold(0.0, f64::max)
    }

    /// Raise every voxel inside to at least `value`.
    fn stamp(&self, target: &mut Array3<f32>, value: f32) {
        let shape = [target.dim().0, target.dim().1, target.dim().2];
        let [(x0, x1), (y0, y1), (z0, z1)] = self.bounds(shape);
        for x in x0..x1 {
            for y in y0..y1 {
                for z in z0..z1 {
                    if self.contains([x, y, z]) {
                        let v = &mut target[[x, y, z]];
                        *v = v.max(value);
                    }
                }
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi { lo } else { rng.random_range(lo..=hi) }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| (w / sum) as f32).collect()
}

/// Separable Gaussian blur with zero padding.
pub fn gaussian_blur(data: &Array3<f32>, sigma: f64) -> Array3<f32> {
    if sigma <= 0.0 {
        return data.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let mut cur = data.clone();
    for axis in 0..3 {
        let mut next = Array3::zeros(cur.raw_dim());
        for (src, mut dst) in cur.lanes(Axis(axis)).into_iter().zip(next.lanes_mut(Axis(axis))) {
            let n = src.len() as isize;
            for i in 0..n {
                let mut acc = 0.0f32;
                for (k, w) in kernel.iter().enumerate() {
                    let j = i + k as isize - r;
                    if j >= 0 && j < n {
                        acc += w * src[j as usize];
                    }
                }
                dst[i as usize] = acc;
            }
        }
        cur = next;
    }
    cur
}

/// A spherical hot spot whose center lies outside every class placement box
/// and whose surface keeps `confounder_gap` voxels from the tumor's bounding
/// sphere. Projections may still overlap a box, which is what makes them
/// confusable with a tumor in a single view.
fn place_confounder(cfg: &PhantomConfig, tumor: &Ellipsoid, rng: &mut ChaCha8Rng) -> Option<Ellipsoid> {
    let shape = cfg.shape;
    for _ in 0..cfg.max_retries.max(1) {
        let radii = [uniform(rng, cfg.confounder_radius); 3];
        let c: [f64; 3] = std::array::from_fn(|a| {
            let m = radii[a].ceil();
            let hi = shape[a] as f64 - 1.0 - m;
            if hi <= m { shape[a] as f64 / 2.0 } else { rng.random_range(m..=hi).round() }
        });
        if cfg.classes.iter().any(|spec| spec.contains(c.map(|v| v as usize))) {
            continue;
        }
        let e = Ellipsoid { center: c, radii };
        let dist = (0..3).map(|a| (c[a] - tumor.center[a]).powi(2)).sum::<f64>().sqrt();
        if dist >= tumor.bounding_radius() + e.bounding_radius() + cfg.confounder_gap {
            return Some(e);
        }
    }
    None
}

/// Draw one case. Identical `(cfg, label, case_seed)` gives identical output.
pub fn generate_case(cfg: &PhantomConfig, label: usize, case_seed: u64) -> Result<(PetVolume, GroundTruth)> {
    cfg.validate()?;
    let spec = cfg
        .classes
        .get(label)
        .ok_or_else(|| Error::InvalidArgument(format!("label {label} has no class spec")))?;
    let shape = cfg.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed);

    // Tumor: integer center so the centroid is exactly a voxel.
    let radii: [f64; 3] = std::array::from_fn(|a| uniform(&mut rng, [spec.radius_min[a], spec.radius_max[a]]));
    let mut center = [0usize; 3];
    for a in 0..3 {
        let margin = radii[a].floor() as usize;
        let lo = spec.region_min[a] + margin;
        let hi = spec.region_max[a].checked_sub(margin + 1);
        match hi {
            Some(hi) if lo <= hi => center[a] = rng.random_range(lo..=hi),
            _ => {
                return Err(Error::Generation(format!(
                    "class '{}' region too small for radius {:.1} along axis {a}",
                    spec.name, radii[a]
                )))
            }
        }
    }
    let tumor = Ellipsoid { center: center.map(|c| c as f64), radii };
    let tumor_value = uniform(&mut rng, spec.intensity) as f32;

    let mut mask = Array3::from_elem((shape[0], shape[1], shape[2]), false);
    let [(x0, x1), (y0, y1), (z0, z1)] = tumor.bounds(shape);
    for x in x0..x1 {
        for y in y0..y1 {
            for z in z0..z1 {
                if tumor.contains([x, y, z]) {
                    mask[[x, y, z]] = true;
                }
            }
        }
    }

    let mut signal = Array3::<f32>::zeros(mask.raw_dim());
    tumor.stamp(&mut signal, tumor_value);

    for k in 0..cfg.n_confounders {
        let e = place_confounder(cfg, &tumor, &mut rng)
            .ok_or_else(|| Error::Generation(format!("could not place confounder {k} after {} attempts", cfg.max_retries)))?;
        let value = uniform(&mut rng, cfg.confounder_intensity) as f32;
        e.stamp(&mut signal, value);
    }

    let mut data = gaussian_blur(&signal, cfg.blur_sigma);
    if cfg.noise_level > 0.0 {
        let n = cfg.noise_level as f32;
        data.iter_mut().for_each(|v| *v += n * rng.random::<f32>());
    }

    let volume = PetVolume::new(data, Spacing(cfg.spacing))?;
    let center = Point3::new(center[0], center[1], center[2]);
    Ok((volume, GroundTruth { mask, center, label }))
}

/// Stable per-case seed from the dataset seed and the case index.
pub fn case_seed(dataset_seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = dataset_seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:04}")
}

/// `2 * n_per_class` cases with alternating labels, generated in memory.
pub fn generate_cases(cfg: &PhantomConfig, n_per_class: usize) -> Result<Vec<Case>> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be at least 1".into()));
    }
    cfg.validate()?;
    (0..2 * n_per_class)
        .map(|i| {
            let label = i % 2;
            let (volume, truth) = generate_case(cfg, label, case_seed(cfg.rng_seed, i))?;
            Ok(Case { id: case_id(i), volume, truth })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub label: usize,
    pub volume: PathBuf,
    pub mask: PathBuf,
    pub annotation: PathBuf,
}

/// Dataset index. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub cases: Vec<ManifestEntry>,
    pub config: Option<PhantomConfig>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Write cases as `<id>.nii.gz`, `<id>_mask.nii.gz`, `<id>.json` plus a manifest.
pub fn write_dataset(cases: &[Case], cfg: Option<&PhantomConfig>, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(cases.len());
    for case in cases {
        let entry = ManifestEntry {
            case_id: case.id.clone(),
            label: case.truth.label,
            volume: PathBuf::from(format!("{}.nii.gz", case.id)),
            mask: PathBuf::from(format!("{}_mask.nii.gz", case.id)),
            annotation: PathBuf::from(format!("{}.json", case.id)),
        };
        io::write_volume(&out_dir.join(&entry.volume), &case.volume)?;
        io::write_mask(&out_dir.join(&entry.mask), &case.truth.mask, case.volume.spacing())?;
        let c = case.truth.center;
        let ann = Annotation { case_id: case.id.clone(), class_label: case.truth.label, center_voxel: [c.x, c.y, c.z] };
        io::write_json(&out_dir.join(&entry.annotation), &ann)?;
        entries.push(entry);
    }
    let manifest = Manifest { cases: entries, config: cfg.cloned() };
    io::write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Generate and write a dataset; returns the in-memory cases.
pub fn generate_dataset(cfg: &PhantomConfig, n_per_class: usize, out_dir: &Path) -> Result<Vec<Case>> {
    let cases = generate_cases(cfg, n_per_class)?;
    write_dataset(&cases, Some(cfg), out_dir)?;
    Ok(cases)
}

/// Read a dataset back from its manifest (file or containing directory).
/// Cases whose mask file is missing are skipped with a warning.
pub fn load_dataset(path: &Path) -> Result<Vec<Case>> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let manifest: Manifest = io::read_json(&manifest_path)?;
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for e in &manifest.cases {
        let mask_path = dir.join(&e.mask);
        if !mask_path.exists() {
            log::warn!("{}: ground-truth mask missing, skipping case", e.case_id);
            continue;
        }
        let volume = io::read_volume(&dir.join(&e.volume))?;
        let mask = io::read_mask(&mask_path)?;
        let ann: Annotation = io::read_json(&dir.join(&e.annotation))?;
        if mask.shape() != volume.data().shape() {
            return Err(Error::format(&mask_path, "mask shape differs from volume shape"));
        }
        cases.push(Case {
            id: e.case_id.clone(),
            volume,
            truth: GroundTruth { mask, center: ann.center(), label: ann.class_label },
        });
    }
    Ok(cases)
}
