//! Reproducible synthetic volumetric datasets with organ-like structures.
//!
//! Volumes contain `K` ellipsoidal "organs" whose in-slice center and radius
//! drift smoothly with slice depth. The drift trajectories are a function of
//! the organ index (plus a small per-volume jitter), so slices at similar
//! normalized positions look structurally similar across volumes — the
//! property position-based pair mining exploits.

use ndarray::{Array2, Array3};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::util::{derive_seed, rng_from};

/// Opaque volume identifier. Derived from the generation seed.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct VolumeId(pub u64);

impl std::fmt::Display for VolumeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "v{:016x}", self.0)
    }
}

/// Parameters of the synthetic volume generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Number of slices D.
    pub depth: usize,
    /// Slice height H; slices are square (W = H).
    pub height: usize,
    /// Number of organ classes K; labels run 0 (background) ..= K.
    pub classes: usize,
    /// Gaussian intensity noise level, in [0, 0.5].
    pub noise_sigma: f64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return config_err("synth: classes must be >= 1");
        }
        if self.classes > 255 {
            return config_err("synth: classes must fit in u8 labels");
        }
        if self.depth < 2 {
            return config_err("synth: depth must be >= 2");
        }
        if self.height < 8 {
            return config_err("synth: height must be >= 8");
        }
        if !(0.0..=0.5).contains(&self.noise_sigma) {
            return config_err("synth: noise_sigma must be in [0, 0.5]");
        }
        Ok(())
    }
}

/// A synthetic 3D image with per-voxel labels.
#[derive(Debug, Clone)]
pub struct Volume {
    /// Intensities in [0, 1], shape (D, H, W).
    pub voxels: Array3<f32>,
    /// Class ids in 0..=K, shape (D, H, W).
    pub labels: Array3<u8>,
    pub volume_id: VolumeId,
    /// Per-axis physical size; unitless here.
    pub spacing: [f64; 3],
}

impl Volume {
    pub fn depth(&self) -> usize {
        self.voxels.shape()[0]
    }
}

/// One 2D slice with its mask and the normalized depth position that drives
/// pair construction.
#[derive(Debug, Clone)]
pub struct SliceSample {
    pub image: Array2<f32>,
    pub mask: Array2<u8>,
    pub volume_id: VolumeId,
    pub slice_index: usize,
    /// slice_index / (D - 1), so endpoints are exactly 0 and 1.
    pub position: f64,
}

/// In-slice ellipse of one organ at a given depth position.
#[derive(Debug, Clone, Copy)]
pub struct Ellipse {
    /// Center in normalized [0, 1] slice coordinates (x, y).
    pub cx: f64,
    pub cy: f64,
    /// Semi-axes in normalized units.
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    pub fn contains(&self, xf: f64, yf: f64) -> bool {
        let dx = (xf - self.cx) / self.rx;
        let dy = (yf - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Analytic description of one organ's trajectory through a volume.
#[derive(Debug, Clone)]
pub struct OrganTrack {
    pub label: u8,
    pub intensity: f64,
    angle: f64,
    z_center: f64,
    z_axis: f64,
    base_radius: f64,
    aspect: f64,
    jitter_x: f64,
    jitter_y: f64,
    jitter_r: f64,
    jitter_phase: f64,
}

impl OrganTrack {
    /// The organ's in-slice ellipse at normalized depth `p`, or `None` where
    /// the ellipsoid does not intersect the slice.
    pub fn ellipse_at(&self, p: f64) -> Option<Ellipse> {
        let t = (p - self.z_center) / self.z_axis;
        let profile = 1.0 - t * t;
        if profile <= 0.0 {
            return None;
        }
        let profile = profile.sqrt();
        let r = (self.base_radius * profile + self.jitter_r).max(0.0);
        if r < 0.02 {
            return None;
        }
        let ph = self.jitter_phase;
        let cx = 0.5
            + 0.24 * self.angle.cos()
            + 0.10 * (2.0 * std::f64::consts::PI * p + self.angle + ph).sin()
            + self.jitter_x;
        let cy = 0.5
            + 0.24 * self.angle.sin()
            + 0.10 * (2.0 * std::f64::consts::PI * p + 1.3 * self.angle + ph).cos()
            + self.jitter_y;
        Some(Ellipse {
            cx,
            cy,
            rx: r * (1.0 + self.aspect),
            ry: r / (1.0 + self.aspect),
        })
    }
}

/// The organ layout a given (seed, cfg) pair produces. `generate_volume`
/// paints exactly these tracks; tests scan them directly.
pub fn organ_layout(seed: u64, cfg: &SynthConfig) -> Result<Vec<OrganTrack>> {
    cfg.validate()?;
    let mut rng = rng_from(derive_seed(seed, "synth/layout"));
    let k_total = cfg.classes;
    let mut tracks = Vec::with_capacity(k_total);
    for ki in 0..k_total {
        let angle = 2.0 * std::f64::consts::PI * ki as f64 / k_total as f64;
        // Jitter draws are per-volume; kept small so cross-volume structural
        // similarity at equal positions dominates.
        let jitter_x = rng.random_range(-0.02..=0.02);
        let jitter_y = rng.random_range(-0.02..=0.02);
        let jitter_r = rng.random_range(-0.01..=0.01);
        let jitter_phase = rng.random_range(-0.15..=0.15);
        let frac = ki as f64 / k_total.max(1) as f64;
        tracks.push(OrganTrack {
            label: (ki + 1) as u8,
            intensity: 0.55 + 0.35 * ki as f64 / (k_total.saturating_sub(1).max(1)) as f64,
            angle,
            z_center: 0.30 + 0.40 * (ki as f64 + 0.5) / k_total as f64,
            z_axis: 0.55,
            base_radius: 0.16 - 0.05 * frac,
            aspect: 0.15 * (0.5 + 0.5 * (3.0 * angle).sin()),
            jitter_x,
            jitter_y,
            jitter_r,
            jitter_phase,
        });
    }
    Ok(tracks)
}

/// Background intensity before noise: a mild smooth gradient, everywhere
/// below the dimmest organ so organs stay strictly brighter at sigma = 0.
fn background_intensity(xf: f64, yf: f64) -> f64 {
    0.12 + 0.08 * xf + 0.05 * (2.0 * std::f64::consts::PI * yf).sin().abs()
}

/// Generate one volume. Pure function of (seed, cfg).
pub fn generate_volume(seed: u64, cfg: &SynthConfig) -> Result<Volume> {
    let tracks = organ_layout(seed, cfg)?;
    let (d, h) = (cfg.depth, cfg.height);
    let w = h;
    let mut voxels = Array3::<f32>::zeros((d, h, w));
    let mut labels = Array3::<u8>::zeros((d, h, w));
    let mut noise_rng = rng_from(derive_seed(seed, "synth/noise"));
    let normal = rand_distr::Normal::new(0.0f64, 1.0).expect("unit normal");
    for z in 0..d {
        let p = z as f64 / (d - 1) as f64;
        let ellipses: Vec<(u8, f64, Option<Ellipse>)> = tracks
            .iter()
            .map(|t| (t.label, t.intensity, t.ellipse_at(p)))
            .collect();
        for y in 0..h {
            let yf = (y as f64 + 0.5) / h as f64;
            for x in 0..w {
                let xf = (x as f64 + 0.5) / w as f64;
                let mut val = background_intensity(xf, yf);
                let mut lab = 0u8;
                for (label, intensity, ell) in &ellipses {
                    if let Some(e) = ell {
                        if e.contains(xf, yf) {
                            val = *intensity;
                            lab = *label;
                        }
                    }
                }
                if cfg.noise_sigma > 0.0 {
                    val += cfg.noise_sigma * noise_rng.sample(normal);
                }
                voxels[(z, y, x)] = val.clamp(0.0, 1.0) as f32;
                labels[(z, y, x)] = lab;
            }
        }
    }
    Ok(Volume {
        voxels,
        labels,
        volume_id: VolumeId(seed),
        spacing: [1.0, 1.0, 1.0],
    })
}

/// Cut a volume into its D slice samples with normalized positions.
pub fn slice_volume(v: &Volume) -> Vec<SliceSample> {
    let d = v.depth();
    (0..d)
        .map(|z| SliceSample {
            image: v.voxels.index_axis(ndarray::Axis(0), z).to_owned(),
            mask: v.labels.index_axis(ndarray::Axis(0), z).to_owned(),
            volume_id: v.volume_id,
            slice_index: z,
            position: z as f64 / (d - 1) as f64,
        })
        .collect()
}

/// N source slices drawn for one optimization step.
#[derive(Debug, Clone)]
pub struct BatchSpec {
    /// Indices into the dataset the batch was sampled from.
    pub indices: Vec<usize>,
}

impl BatchSpec {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Per-anchor metadata after augmentation doubles every source slice:
    /// rows 2i and 2i+1 both carry source i's (volume_id, position).
    pub fn expanded_meta(&self, dataset: &[SliceSample]) -> Vec<AnchorMeta> {
        let mut meta = Vec::with_capacity(2 * self.indices.len());
        for &idx in &self.indices {
            let s = &dataset[idx];
            let m = AnchorMeta {
                volume_id: s.volume_id,
                position: s.position,
            };
            meta.push(m.clone());
            meta.push(m);
        }
        meta
    }
}

/// Sample `n` distinct slices uniformly without replacement.
pub fn sample_batch<R: Rng>(
    dataset: &[SliceSample],
    n: usize,
    rng: &mut R,
) -> Result<BatchSpec> {
    if n > dataset.len() {
        return Err(Error::Sampling(format!(
            "batch size {n} exceeds dataset size {}",
            dataset.len()
        )));
    }
    let indices = rand::seq::index::sample(rng, dataset.len(), n).into_vec();
    Ok(BatchSpec { indices })
}

/// (volume, position) key of one augmented sample row.
#[derive(Debug, Clone)]
pub struct AnchorMeta {
    pub volume_id: VolumeId,
    pub position: f64,
}

/// Per-batch positive/negative structure over the 2N augmented samples.
#[derive(Debug, Clone)]
pub struct PairLabelMatrix {
    positives: Array2<bool>,
    anchor_meta: Vec<AnchorMeta>,
}

impl PairLabelMatrix {
    /// Build pair labels for 2N rows where rows 2i and 2i+1 are the two
    /// augmentations of source slice i. A pair is positive when it is such a
    /// sibling pair, or when the normalized positions differ by at most
    /// `theta_pos` (regardless of source volume). The diagonal is false.
    pub fn build(meta: &[AnchorMeta], theta_pos: f64) -> Result<Self> {
        if theta_pos < 0.0 {
            return config_err("theta_pos must be >= 0");
        }
        let n2 = meta.len();
        if n2 < 2 || n2 % 2 != 0 {
            return Err(Error::Contract(format!(
                "pair labels need an even number of rows >= 2, got {n2}"
            )));
        }
        let mut positives = Array2::<bool>::from_elem((n2, n2), false);
        for i in 0..n2 {
            for j in (i + 1)..n2 {
                let sibling = i / 2 == j / 2;
                let close = (meta[i].position - meta[j].position).abs() <= theta_pos;
                if sibling || close {
                    positives[(i, j)] = true;
                    positives[(j, i)] = true;
                }
            }
        }
        Ok(Self {
            positives,
            anchor_meta: meta.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.anchor_meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor_meta.is_empty()
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.positives[(i, j)]
    }

    /// Indices of the positive candidates of anchor `i`.
    pub fn positives_of(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.positives[(i, j)]).collect()
    }

    pub fn anchor_meta(&self) -> &[AnchorMeta] {
        &self.anchor_meta
    }
}

// ---------------------------------------------------------------------------
// Dataset persistence: manifest JSON plus raw little-endian grids.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeEntry {
    pub id: VolumeId,
    pub shape: [usize; 3],
    pub voxel_dtype: String,
    pub label_dtype: String,
    pub seed: u64,
    pub cfg: SynthConfig,
    pub voxel_file: String,
    pub label_file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub volumes: Vec<VolumeEntry>,
}

/// Generate `n_volumes` volumes from one base seed.
pub fn generate_dataset(base_seed: u64, cfg: &SynthConfig, n_volumes: usize) -> Result<Vec<Volume>> {
    if n_volumes == 0 {
        return config_err("dataset needs at least one volume");
    }
    (0..n_volumes)
        .map(|i| generate_volume(derive_seed(base_seed, &format!("dataset/volume/{i}")), cfg))
        .collect()
}

/// Flatten a dataset into slice samples, volume order preserved.
pub fn slices_of(volumes: &[Volume]) -> Vec<SliceSample> {
    volumes.iter().flat_map(slice_volume).collect()
}

pub fn save_dataset(dir: &std::path::Path, volumes: &[Volume], base_seed: u64, cfg: &SynthConfig) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(volumes.len());
    for (i, v) in volumes.iter().enumerate() {
        let voxel_file = format!("vol_{i:04}.voxels.f32");
        let label_file = format!("vol_{i:04}.labels.u8");
        let mut vbytes = Vec::with_capacity(v.voxels.len() * 4);
        for &x in v.voxels.iter() {
            vbytes.extend_from_slice(&x.to_le_bytes());
        }
        std::fs::write(dir.join(&voxel_file), vbytes)?;
        let lbytes: Vec<u8> = v.labels.iter().copied().collect();
        std::fs::write(dir.join(&label_file), lbytes)?;
        let s = v.voxels.shape();
        entries.push(VolumeEntry {
            id: v.volume_id,
            shape: [s[0], s[1], s[2]],
            voxel_dtype: "f32".to_string(),
            label_dtype: "u8".to_string(),
            seed: derive_seed(base_seed, &format!("dataset/volume/{i}")),
            cfg: cfg.clone(),
            voxel_file,
            label_file,
        });
    }
    let manifest = DatasetManifest { volumes: entries };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn load_dataset(dir: &std::path::Path) -> Result<Vec<Volume>> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut volumes = Vec::with_capacity(manifest.volumes.len());
    for e in &manifest.volumes {
        let [d, h, w] = e.shape;
        let vbytes = std::fs::read(dir.join(&e.voxel_file))?;
        if vbytes.len() != d * h * w * 4 {
            return Err(Error::Shape(format!(
                "voxel file {} has {} bytes, expected {}",
                e.voxel_file,
                vbytes.len(),
                d * h * w * 4
            )));
        }
        let voxels: Vec<f32> = vbytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let lbytes = std::fs::read(dir.join(&e.label_file))?;
        if lbytes.len() != d * h * w {
            return Err(Error::Shape(format!(
                "label file {} has {} bytes, expected {}",
                e.label_file,
                lbytes.len(),
                d * h * w
            )));
        }
        volumes.push(Volume {
            voxels: Array3::from_shape_vec((d, h, w), voxels)
                .map_err(|e| Error::Shape(e.to_string()))?,
            labels: Array3::from_shape_vec((d, h, w), lbytes)
                .map_err(|e| Error::Shape(e.to_string()))?,
            volume_id: e.id,
            spacing: [1.0, 1.0, 1.0],
        });
    }
    Ok(volumes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_cfg() -> SynthConfig {
        SynthConfig {
            depth: 6,
            height: 24,
            classes: 3,
            noise_sigma: 0.1,
        }
    }

    #[test]
    fn generate_volume_is_deterministic() {
        let cfg = test_cfg();
        let a = generate_volume(7, &cfg).unwrap();
        let b = generate_volume(7, &cfg).unwrap();
        assert_eq!(a.voxels, b.voxels);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.volume_id, b.volume_id);
    }

    #[test]
    fn generate_volume_is_seed_sensitive() {
        let cfg = test_cfg();
        let a = generate_volume(7, &cfg).unwrap();
        let b = generate_volume(8, &cfg).unwrap();
        assert_ne!(a.voxels, b.voxels);
    }

    #[test]
    fn organs_strictly_brighter_than_background_without_noise() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..test_cfg()
        };
        let v = generate_volume(7, &cfg).unwrap();
        let tracks = organ_layout(7, &cfg).unwrap();
        let (d, h, w) = (cfg.depth, cfg.height, cfg.height);
        let mut inside_min = f32::INFINITY;
        let mut outside_max = f32::NEG_INFINITY;
        let mut inside_seen = 0usize;
        for z in 0..d {
            let p = z as f64 / (d - 1) as f64;
            for y in 0..h {
                let yf = (y as f64 + 0.5) / h as f64;
                for x in 0..w {
                    let xf = (x as f64 + 0.5) / w as f64;
                    let inside = tracks
                        .iter()
                        .any(|t| t.ellipse_at(p).is_some_and(|e| e.contains(xf, yf)));
                    let val = v.voxels[(z, y, x)];
                    if inside {
                        inside_min = inside_min.min(val);
                        inside_seen += 1;
                    } else {
                        outside_max = outside_max.max(val);
                    }
                }
            }
        }
        assert!(inside_seen > 0, "expected some organ voxels");
        assert!(
            inside_min > outside_max,
            "organ min {inside_min} must exceed background max {outside_max}"
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = test_cfg();
        cfg.classes = 0;
        assert!(matches!(generate_volume(1, &cfg), Err(Error::Config(_))));
        let mut cfg = test_cfg();
        cfg.depth = 1;
        assert!(matches!(generate_volume(1, &cfg), Err(Error::Config(_))));
        let mut cfg = test_cfg();
        cfg.height = 4;
        assert!(matches!(generate_volume(1, &cfg), Err(Error::Config(_))));
        let mut cfg = test_cfg();
        cfg.noise_sigma = 0.9;
        assert!(matches!(generate_volume(1, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn slice_positions_cover_unit_interval() {
        let cfg = SynthConfig {
            depth: 5,
            ..test_cfg()
        };
        let v = generate_volume(3, &cfg).unwrap();
        let slices = slice_volume(&v);
        assert_eq!(slices.len(), 5);
        let positions: Vec<f64> = slices.iter().map(|s| s.position).collect();
        assert_eq!(positions, vec![0.0, 0.25, 0.5, 0.75, 1.0]);

        let cfg2 = SynthConfig {
            depth: 2,
            ..test_cfg()
        };
        let v2 = generate_volume(3, &cfg2).unwrap();
        let p2: Vec<f64> = slice_volume(&v2).iter().map(|s| s.position).collect();
        assert_eq!(p2, vec![0.0, 1.0]);
    }

    #[test]
    fn slice_positions_strictly_increasing() {
        let v = generate_volume(11, &test_cfg()).unwrap();
        let slices = slice_volume(&v);
        for pair in slices.windows(2) {
            assert!(pair[1].position > pair[0].position);
        }
    }

    #[test]
    fn sample_batch_contract() {
        let v = generate_volume(5, &test_cfg()).unwrap();
        let ds = slice_volume(&v);
        let mut rng = rng_from(42);
        let b = sample_batch(&ds, ds.len(), &mut rng).unwrap();
        let mut sorted = b.indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..ds.len()).collect::<Vec<_>>(), "permutation");

        let mut r1 = rng_from(9);
        let mut r2 = rng_from(9);
        assert_eq!(
            sample_batch(&ds, 3, &mut r1).unwrap().indices,
            sample_batch(&ds, 3, &mut r2).unwrap().indices
        );

        assert!(sample_batch(&ds, ds.len() + 1, &mut rng).is_err());
        assert!(sample_batch(&ds, 0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn pair_labels_rules() {
        let meta = |vid: u64, p: f64| AnchorMeta {
            volume_id: VolumeId(vid),
            position: p,
        };
        // Two source slices -> 4 rows. Siblings always positive even at
        // theta = 0; distinct positions 0.0 vs 0.5 stay negative.
        let m = PairLabelMatrix::build(
            &[meta(1, 0.0), meta(1, 0.0), meta(2, 0.5), meta(2, 0.5)],
            0.0,
        )
        .unwrap();
        assert!(m.is_positive(0, 1));
        assert!(m.is_positive(2, 3));
        assert!(!m.is_positive(0, 2));
        assert!(!m.is_positive(1, 3));

        // Positions 0.10 / 0.12 from different volumes, theta 0.05: positive.
        let m = PairLabelMatrix::build(
            &[meta(1, 0.10), meta(1, 0.10), meta(2, 0.12), meta(2, 0.12)],
            0.05,
        )
        .unwrap();
        assert!(m.is_positive(0, 2));
        assert!(m.is_positive(3, 1));

        assert!(PairLabelMatrix::build(&[meta(1, 0.0)], 0.05).is_err());
        assert!(matches!(
            PairLabelMatrix::build(
                &[meta(1, 0.0), meta(1, 0.0)],
                -0.1
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pair_labels_invariants_on_random_batches() {
        let cfg = test_cfg();
        let volumes = generate_dataset(77, &cfg, 3).unwrap();
        let ds = slices_of(&volumes);
        let mut rng = rng_from(123);
        for _ in 0..20 {
            let batch = sample_batch(&ds, 5, &mut rng).unwrap();
            let meta = batch.expanded_meta(&ds);
            let m = PairLabelMatrix::build(&meta, 0.05).unwrap();
            let n = m.len();
            for i in 0..n {
                assert!(!m.is_positive(i, i), "diagonal must be false");
                assert!(!m.positives_of(i).is_empty(), "sibling guarantees a positive");
                for j in 0..n {
                    assert_eq!(m.is_positive(i, j), m.is_positive(j, i), "symmetry");
                }
            }
        }
    }

    #[test]
    fn dataset_round_trips_and_regenerates() {
        let cfg = test_cfg();
        let volumes = generate_dataset(99, &cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(dir.path(), &volumes, 99, &cfg).unwrap();
        assert_eq!(manifest.volumes.len(), 2);
        let loaded = load_dataset(dir.path()).unwrap();
        for (a, b) in volumes.iter().zip(loaded.iter()) {
            assert_eq!(a.voxels, b.voxels);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.volume_id, b.volume_id);
        }
        // Regeneration from the manifest seeds is the canonical path.
        for (e, v) in manifest.volumes.iter().zip(volumes.iter()) {
            let regen = generate_volume(e.seed, &e.cfg).unwrap();
            assert_eq!(regen.voxels, v.voxels);
        }
    }
}
