//! Procedural "real vs synthetic" dataset: generation, manifests and loading.
//!
//! Layout under the dataset root:
//!
//! ```text
//! train.csv  val.csv  test.csv
//! {split}/{class}/{index}.pgm
//! maps/{split}/{class}/{index}.pgm
//! ```
//!
//! Train and validation synthetic images come from GEN_A and GEN_B only. The
//! test split adds the held-out GEN_C family: half of its synthetic images
//! are GEN_C and a quarter each are fresh GEN_A and GEN_B.

pub mod pgm;
pub mod scene;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

pub use pgm::GrayImage;
pub use scene::{Artifact, Class, GeneratorFamily, SceneParams, SceneSpec, IMAGE_SIZE};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::salience::{self, SalienceMap};

pub const MANIFEST_HEADER: [&str; 5] = ["path", "human_map", "label", "generator", "seed"];
/// Manifest generator value for real rows.
pub const REAL_GENERATOR: &str = "REAL";
/// Manifest value for an absent human map.
pub const NO_MAP: &str = "-";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn manifest_path(self, root: &Path) -> PathBuf {
        root.join(format!("{}.csv", self.as_str()))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split '{s}' (expected train, val or test)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    pub real: usize,
    pub synthetic: usize,
}

impl ClassCounts {
    /// Split a total into two classes differing by at most one.
    pub fn balanced(total: usize) -> Self {
        Self {
            real: total / 2,
            synthetic: total - total / 2,
        }
    }

    pub fn total(&self) -> usize {
        self.real + self.synthetic
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetCounts {
    pub train: ClassCounts,
    pub val: ClassCounts,
    pub test: ClassCounts,
}

impl DatasetCounts {
    pub fn balanced(train: usize, val: usize, test: usize) -> Self {
        Self {
            train: ClassCounts::balanced(train),
            val: ClassCounts::balanced(val),
            test: ClassCounts::balanced(test),
        }
    }

    pub fn get(&self, split: Split) -> ClassCounts {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

impl Default for DatasetCounts {
    fn default() -> Self {
        Self::balanced(1000, 400, 2000)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub seed: u64,
    pub counts: DatasetCounts,
    pub human_maps: bool,
    pub scene: SceneParams,
}

impl GenerateOptions {
    pub fn new(seed: u64, counts: DatasetCounts) -> Self {
        Self {
            seed,
            counts,
            human_maps: true,
            scene: SceneParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    /// image path relative to the dataset root
    pub path: String,
    pub human_map: Option<String>,
    pub label: usize,
    pub generator: Option<GeneratorFamily>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: Split,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn write(&self, root: &Path) -> Result<()> {
        let path = self.split.manifest_path(root);
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&path)
            .map_err(|e| csv_err(&path, e))?;
        w.write_record(MANIFEST_HEADER).map_err(|e| csv_err(&path, e))?;
        for r in &self.rows {
            let label = r.label.to_string();
            let seed = r.seed.to_string();
            w.write_record([
                r.path.as_str(),
                r.human_map.as_deref().unwrap_or(NO_MAP),
                &label,
                r.generator.map_or(REAL_GENERATOR, |g| g.as_str()),
                &seed,
            ])
            .map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn read(root: &Path, split: Split) -> Result<Self> {
        let path = split.manifest_path(root);
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(&path)
            .map_err(|e| csv_err(&path, e))?;
        let header = r.headers().map_err(|e| csv_err(&path, e))?;
        if header.iter().ne(MANIFEST_HEADER) {
            return Err(Error::format(
                &path,
                format!("malformed header, expected {}", MANIFEST_HEADER.join(",")),
            ));
        }
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(&path, e))?;
            let line = i + 2;
            let bad = |what: &str| Error::format(&path, format!("line {line}: {what}"));
            if rec.len() != MANIFEST_HEADER.len() {
                return Err(bad("wrong number of fields"));
            }
            let label: usize = rec[2].parse().map_err(|_| bad("bad label"))?;
            Class::from_label(label).map_err(|e| bad(&e.to_string()))?;
            let generator = match &rec[3] {
                REAL_GENERATOR => None,
                g => Some(g.parse::<GeneratorFamily>().map_err(|e| bad(&e.to_string()))?),
            };
            if (label == 1) != generator.is_some() {
                return Err(bad("label and generator disagree"));
            }
            rows.push(ManifestRow {
                path: rec[0].to_string(),
                human_map: (&rec[1] != NO_MAP).then(|| rec[1].to_string()),
                label,
                generator,
                seed: rec[4].parse().map_err(|_| bad("bad seed"))?,
            });
        }
        Ok(Self { split, rows })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::format(path, format!("{other:?}")),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-sample seed; distinct for every (split, class, index) of one dataset seed.
pub fn sample_seed(dataset_seed: u64, split: Split, class: Class, index: usize) -> u64 {
    let key = ((split as u64) << 60) | ((class.label() as u64) << 56) | index as u64;
    splitmix64(splitmix64(dataset_seed) ^ key)
}

fn family_for(split: Split, index: usize) -> GeneratorFamily {
    match split {
        Split::Test => [GeneratorFamily::GenC, GeneratorFamily::GenC, GeneratorFamily::GenA, GeneratorFamily::GenB][index % 4],
        _ => [GeneratorFamily::GenA, GeneratorFamily::GenB][index % 2],
    }
}

struct Job {
    split: Split,
    class: Class,
    index: usize,
    spec: SceneSpec,
}

impl Job {
    fn image_rel(&self) -> String {
        format!("{}/{}/{}.pgm", self.split, self.class.as_str(), self.index)
    }

    fn map_rel(&self) -> String {
        format!("maps/{}", self.image_rel())
    }
}

/// Generate all three splits under `root` and write their manifests.
pub fn generate_dataset(root: &Path, options: &GenerateOptions) -> Result<Vec<DatasetManifest>> {
    for split in Split::ALL {
        let c = options.counts.get(split);
        if c.real < 2 || c.synthetic < 2 {
            return Err(Error::Config(format!(
                "{split}: need at least 2 samples per class, got {} real and {} synthetic",
                c.real, c.synthetic
            )));
        }
    }

    let mut jobs = Vec::new();
    let mut seen = HashSet::new();
    for split in Split::ALL {
        let c = options.counts.get(split);
        for (class, n) in [(Class::Real, c.real), (Class::Synthetic, c.synthetic)] {
            for index in 0..n {
                let seed = sample_seed(options.seed, split, class, index);
                if !seen.insert(seed) {
                    return Err(Error::InvalidArgument(format!("sample seed collision at {split}/{index}")));
                }
                let generator = (class == Class::Synthetic).then(|| family_for(split, index));
                let spec = SceneSpec::new(seed, class, generator, &options.scene)?;
                jobs.push(Job {
                    split,
                    class,
                    index,
                    spec,
                });
            }
        }
    }

    for split in Split::ALL {
        for class in [Class::Real, Class::Synthetic] {
            let mut dirs = vec![root.join(split.as_str()).join(class.as_str())];
            if options.human_maps {
                dirs.push(root.join("maps").join(split.as_str()).join(class.as_str()));
            }
            for d in dirs {
                fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
        }
    }

    jobs.par_iter().try_for_each(|job| -> Result<()> {
        let img = job.spec.render_image(&options.scene);
        GrayImage::from_unit(IMAGE_SIZE, IMAGE_SIZE, &img)?.write(&root.join(job.image_rel()))?;
        if options.human_maps {
            let m = job.spec.render_human_map(&options.scene);
            GrayImage::from_unit(IMAGE_SIZE, IMAGE_SIZE, &m)?.write(&root.join(job.map_rel()))?;
        }
        Ok(())
    })?;

    let mut manifests = Vec::new();
    for split in Split::ALL {
        let rows = jobs
            .iter()
            .filter(|j| j.split == split)
            .map(|j| ManifestRow {
                path: j.image_rel(),
                human_map: options.human_maps.then(|| j.map_rel()),
                label: j.class.label(),
                generator: j.spec.generator,
                seed: j.spec.seed,
            })
            .collect();
        let m = DatasetManifest { split, rows };
        m.write(root)?;
        manifests.push(m);
    }
    Ok(manifests)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// 56×56 row-major, values in [0, 1]
    pub image: Vec<f64>,
    pub label: usize,
    /// 56×56 row-major human salience in [0, 1]
    pub human_map: Option<Vec<f64>>,
    pub generator: Option<GeneratorFamily>,
    pub seed: u64,
}

impl Sample {
    /// Human map area-downsampled to `h × w` and range-normalized.
    pub fn human_grid(&self, h: usize, w: usize) -> Result<Option<Tensor>> {
        let Some(m) = &self.human_map else { return Ok(None) };
        let full = Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE], m.clone())?;
        let small = SalienceMap::raw(salience::downsample_area(&full, h, w)?)?;
        Ok(Some(salience::normalize_range01(&small)?.grid().clone()))
    }
}

/// Stack sample images into a (K, 1, 56, 56) tensor.
pub fn image_batch<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut k = 0;
    for s in samples {
        data.extend_from_slice(&s.image);
        k += 1;
    }
    if k == 0 {
        return Err(Error::InvalidArgument("image_batch: no samples".into()));
    }
    Tensor::new(vec![k, 1, IMAGE_SIZE, IMAGE_SIZE], data)
}

/// Load every sample listed in `{root}/{split}.csv`.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let manifest = DatasetManifest::read(root, split)?;
    manifest
        .rows
        .par_iter()
        .map(|row| {
            let read = |rel: &str| -> Result<Vec<f64>> {
                let path = root.join(rel);
                let img = GrayImage::read(&path)?;
                if (img.width, img.height) != (IMAGE_SIZE, IMAGE_SIZE) {
                    return Err(Error::format(
                        &path,
                        format!("expected {IMAGE_SIZE}x{IMAGE_SIZE}, found {}x{}", img.width, img.height),
                    ));
                }
                Ok(img.to_unit())
            };
            Ok(Sample {
                image: read(&row.path)?,
                label: row.label,
                human_map: row.human_map.as_deref().map(read).transpose()?,
                generator: row.generator,
                seed: row.seed,
            })
        })
        .collect()
}

/// Mean entropy of the human maps in `samples`, each downsampled to 7×7 and
/// normalized the same way as model salience (range, then probability).
pub fn human_entropy_target(samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in samples {
        let Some(m) = &s.human_map else { continue };
        let full = Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE], m.clone())?;
        let small = SalienceMap::raw(salience::downsample_area(&full, 7, 7)?)?;
        let p = salience::normalize_probability(&salience::normalize_range01(&small)?)?;
        total += salience::shannon_entropy(&p)?.value();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("no human maps available to estimate the entropy target".into()));
    }
    Ok(total / n as f64)
}

/// Earth mover's distance between the 8-bit pixel histograms of two image
/// sets, in intensity units of [0, 1].
pub fn pixel_histogram_emd(a: &[&[f64]], b: &[&[f64]]) -> Result<f64> {
    let hist = |set: &[&[f64]]| -> Result<Vec<f64>> {
        let mut h = vec![0.0; 256];
        let mut n = 0.0;
        for img in set {
            for &v in img.iter() {
                h[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1.0;
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Err(Error::InvalidArgument("pixel_histogram_emd: empty image set".into()));
        }
        Ok(h.into_iter().map(|c| c / n).collect())
    };
    let (ha, hb) = (hist(a)?, hist(b)?);
    let mut cdf = 0.0;
    let mut emd = 0.0;
    for (x, y) in ha.iter().zip(&hb) {
        cdf += x - y;
        emd += cdf.abs();
    }
    Ok(emd / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GenerateOptions {
        GenerateOptions::new(
            7,
            DatasetCounts {
                train: ClassCounts { real: 3, synthetic: 4 },
                val: ClassCounts { real: 2, synthetic: 2 },
                test: ClassCounts { real: 2, synthetic: 4 },
            },
        )
    }

    #[test]
    fn balanced_counts() {
        assert_eq!(ClassCounts::balanced(7), ClassCounts { real: 3, synthetic: 4 });
        assert_eq!(ClassCounts::balanced(20).total(), 20);
    }

    #[test]
    fn split_names() {
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("dev".parse::<Split>().is_err());
    }

    #[test]
    fn seeds_unique_across_splits() {
        let mut seen = HashSet::new();
        for split in Split::ALL {
            for class in [Class::Real, Class::Synthetic] {
                for i in 0..2000 {
                    assert!(seen.insert(sample_seed(7, split, class, i)));
                }
            }
        }
    }

    #[test]
    fn generates_expected_rows() {
        let dir = tempfile::tempdir().unwrap();
        let ms = generate_dataset(dir.path(), &tiny()).unwrap();
        assert_eq!(ms[0].rows.len(), 7);
        assert_eq!(ms[2].rows.len(), 6);
        for m in &ms {
            let families: HashSet<_> = m.rows.iter().filter_map(|r| r.generator).collect();
            if m.split == Split::Test {
                assert!(families.contains(&GeneratorFamily::GenC));
            } else {
                assert!(!families.contains(&GeneratorFamily::GenC));
            }
            assert_eq!(DatasetManifest::read(dir.path(), m.split).unwrap(), *m);
        }
        let text = fs::read_to_string(dir.path().join("train.csv")).unwrap();
        assert!(text.starts_with("path,human_map,label,generator,seed\n"));
        assert!(!text.contains('\r'));
        assert!(text.contains("train/real/0.pgm,maps/train/real/0.pgm,0,REAL,"));
    }

    #[test]
    fn rejects_too_few_per_class() {
        let dir = tempfile::tempdir().unwrap();
        let mut o = tiny();
        o.counts.val.real = 1;
        assert!(generate_dataset(dir.path(), &o).unwrap_err().is_config());
    }

    #[test]
    fn load_roundtrip_is_pixel_exact() {
        let dir = tempfile::tempdir().unwrap();
        let o = tiny();
        generate_dataset(dir.path(), &o).unwrap();
        let samples = load_split(dir.path(), Split::Train).unwrap();
        for s in &samples {
            let class = Class::from_label(s.label).unwrap();
            let spec = SceneSpec::new(s.seed, class, s.generator, &o.scene).unwrap();
            let expect = GrayImage::from_unit(IMAGE_SIZE, IMAGE_SIZE, &spec.render_image(&o.scene))
                .unwrap()
                .to_unit();
            assert_eq!(s.image, expect);
            assert!(s.human_map.is_some());
        }
    }

    #[test]
    fn missing_maps_are_absent() {
        let dir = tempfile::tempdir().unwrap();
        let mut o = tiny();
        o.human_maps = false;
        generate_dataset(dir.path(), &o).unwrap();
        let samples = load_split(dir.path(), Split::Val).unwrap();
        assert!(samples.iter().all(|s| s.human_map.is_none()));
        assert!(human_entropy_target(&samples).unwrap_err().is_config());
        assert!(!dir.path().join("maps").exists());
    }

    #[test]
    fn errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), &tiny()).unwrap();
        let victim = dir.path().join("val/real/0.pgm");
        let mut bytes = fs::read(&victim).unwrap();
        bytes[1] = b'2';
        fs::write(&victim, bytes).unwrap();
        let e = load_split(dir.path(), Split::Val).unwrap_err().to_string();
        assert!(e.contains("val/real/0.pgm"), "{e}");

        fs::write(dir.path().join("test.csv"), "path,label\nx,0\n").unwrap();
        let e = load_split(dir.path(), Split::Test).unwrap_err().to_string();
        assert!(e.contains("test.csv") && e.contains("header"), "{e}");

        fs::remove_file(dir.path().join("train/synthetic/1.pgm")).unwrap();
        let e = load_split(dir.path(), Split::Train).unwrap_err().to_string();
        assert!(e.contains("train/synthetic/1.pgm"), "{e}");
    }

    fn sample_with_map(m: Vec<f64>) -> Sample {
        Sample {
            image: vec![0.0; IMAGE_SIZE * IMAGE_SIZE],
            label: 0,
            human_map: Some(m),
            generator: None,
            seed: 0,
        }
    }

    #[test]
    fn entropy_target_extremes() {
        let uniform = vec![sample_with_map(vec![1.0; 3136]); 3];
        assert!((human_entropy_target(&uniform).unwrap() - 49f64.ln()).abs() < 1e-12);
        let mut delta = vec![0.0; 3136];
        delta[0] = 1.0;
        let deltas = vec![sample_with_map(delta); 2];
        assert!(human_entropy_target(&deltas).unwrap().abs() < 1e-12);
    }

    #[test]
    fn emd_of_shifted_histograms() {
        let a = vec![0.0; 10];
        let b = vec![1.0; 10];
        assert!((pixel_histogram_emd(&[&a], &[&b]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pixel_histogram_emd(&[&a], &[&a]).unwrap(), 0.0);
    }
}
