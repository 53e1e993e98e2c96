//! Synthetic quadruplet generation.

use std::fs;
use std::path::{Path, PathBuf};

use irap_core::geometry::Homography;
use irap_core::image::{encode_png, load_image, Image};
use irap_core::irap::{
    exact_clicks, random_homography, synthesize_quadruplet, synthetic_scene, AnnotationRecord, ClickPair, DatasetManifest, ImageSet,
    Quadruplet, Scene, Status, SynthesisConfig, SyntheticQuadruplet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::CommandError;

/// Number of exact click pairs stored with each synthetic record.
pub const SYNTHETIC_CLICKS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizeOptions {
    pub count: usize,
    pub seed: u64,
    /// Probability that a quadruplet gets an identity ground truth.
    pub aligned_fraction: f64,
    /// Write draft records (clicks only) instead of accepted ones.
    pub draft: bool,
    pub config: SynthesisConfig,
}

impl Default for SynthesizeOptions {
    fn default() -> Self {
        Self { count: 10, seed: 0, aligned_fraction: 0.0, draft: false, config: SynthesisConfig::default() }
    }
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

/// Image files in `dir`, sorted by name.
pub fn list_base_images(dir: &Path) -> Result<Vec<PathBuf>, CommandError> {
    let entries = fs::read_dir(dir).map_err(|e| CommandError::Input(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && p.extension().and_then(|e| e.to_str()).is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CommandError::Input(format!("no base images in {}", dir.display())));
    }
    Ok(paths)
}

fn write_png(img: &Image, path: &Path) -> Result<(), CommandError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(anyhow::Error::from)?;
    }
    let bytes = encode_png(img).map_err(|source| CommandError::Image { path: path.display().to_string(), source })?;
    fs::write(path, bytes).map_err(anyhow::Error::from)?;
    Ok(())
}

fn record_for(id: &str, q: &SyntheticQuadruplet, draft: bool) -> AnnotationRecord {
    let clicks: Vec<ClickPair> = exact_clicks(&q.planted, q.a_rgb.width(), q.a_rgb.height(), SYNTHETIC_CLICKS)
        .into_iter()
        .map(|c| ClickPair { a: c.src, b: c.dst })
        .collect();
    let mut record = AnnotationRecord { clicks, ..AnnotationRecord::draft(id) };
    if !draft {
        record.h1 = Some(q.planted);
        record.h2 = Some(Homography::identity());
        record.h_gt = Some(q.planted);
        record.residual_inlier_count = record.clicks.len();
        record.status = Status::Accepted;
    }
    record
}

/// Generates `count` quadruplets from the base images in `base_dir` and
/// writes them with a manifest at `out`.
pub fn synthesize(base_dir: &Path, out: &Path, opts: &SynthesizeOptions) -> Result<DatasetManifest, CommandError> {
    if !(0.0..=1.0).contains(&opts.aligned_fraction) {
        return Err(CommandError::Argument(format!("aligned fraction {} outside [0, 1]", opts.aligned_fraction)));
    }
    let base_paths = list_base_images(base_dir)?;
    let bases = base_paths
        .iter()
        .map(|p| load_image(p).map_err(|source| CommandError::Image { path: p.display().to_string(), source }))
        .collect::<Result<Vec<_>, _>>()?;
    let root = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(root).map_err(anyhow::Error::from)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut scenes: Vec<Scene> = base_paths
        .iter()
        .map(|p| Scene {
            name: p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            illumination: "synthetic".into(),
            quadruplets: Vec::new(),
        })
        .collect();
    for k in 0..opts.count {
        let b = k % bases.len();
        let base = &bases[b];
        let planted = if rng.random_bool(opts.aligned_fraction) {
            Homography::identity()
        } else {
            random_homography(base.width(), base.height(), opts.config.max_corner_fraction, &mut rng)
        };
        let nir_seed: u64 = rng.random();
        let q = synthesize_quadruplet(base, planted, nir_seed, &opts.config)?;
        let id = format!("q{k:03}");
        let images = ImageSet {
            a_rgb: format!("{id}/a_rgb.png"),
            a_nir: format!("{id}/a_nir.png"),
            b_rgb: format!("{id}/b_rgb.png"),
            b_nir: format!("{id}/b_nir.png"),
        };
        for (img, rel) in [(&q.a_rgb, &images.a_rgb), (&q.a_nir, &images.a_nir), (&q.b_rgb, &images.b_rgb), (&q.b_nir, &images.b_nir)] {
            write_png(img, &root.join(rel))?;
        }
        let record = record_for(&id, &q, opts.draft);
        log::debug!("{id}: base {} planted {:?}", base_paths[b].display(), planted.to_row_major());
        scenes[b].quadruplets.push(Quadruplet { id, images, record, planted: Some(planted) });
    }
    scenes.retain(|s| !s.quadruplets.is_empty());
    let manifest = DatasetManifest::new(scenes)?;
    manifest.save(out)?;
    Ok(manifest)
}

/// Writes `count` seeded synthetic base scenes of `size x size` pixels.
pub fn generate_scenes(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>, CommandError> {
    if size < 16 {
        return Err(CommandError::Argument(format!("scene size {size} is below 16")));
    }
    (0..count)
        .map(|k| {
            let path = dir.join(format!("scene_{k:03}.png"));
            write_png(&synthetic_scene(size, size, seed.wrapping_add(k as u64)), &path)?;
            Ok(path)
        })
        .collect()
}
