//! Dataset ingestion, synthetic misalignment, augmentation and deterministic
//! train/test splitting.
//!
//! On disk a dataset is `<root>/<MODALITY-PAIR>/<index>/{mri.png, other.png}`
//! with `MODALITY-PAIR` one of `CT-MRI`, `PET-MRI`, `SPECT-MRI`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deformation::{invert_field, synthesize_deformation, warp, DeformationField, SyntheticDeformationSpec};
use crate::error::{io_err, Error, Result};
use crate::imaging::Image;
use crate::io::{load_png, save_png};

/// Fixed-point iterations used to turn a synthetic field into the field
/// that registers the deformed image back onto its label.
const INVERSE_ITERATIONS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Ct,
    Pet,
    Spect,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Ct, Modality::Pet, Modality::Spect];

    pub fn dir_name(self) -> &'static str {
        match self {
            Modality::Ct => "CT-MRI",
            Modality::Pet => "PET-MRI",
            Modality::Spect => "SPECT-MRI",
        }
    }

    pub fn from_dir_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.dir_name().eq_ignore_ascii_case(s))
    }

    /// Size of the held-out unaligned test set in the reference protocol.
    pub fn default_test_count(self) -> usize {
        match self {
            Modality::Ct => 20,
            Modality::Pet => 55,
            Modality::Spect => 77,
        }
    }

    /// Functional modalities are usually stored as colour images.
    pub fn is_functional(self) -> bool {
        !matches!(self, Modality::Ct)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// A strictly registered MRI / other-modality pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RegisteredPair {
    /// `<MODALITY-PAIR>/<index>`.
    pub id: String,
    pub modality: Modality,
    pub mri: Image,
    pub other: Image,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestFailure {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub loaded: Vec<String>,
    pub failures: Vec<IngestFailure>,
    pub warnings: Vec<String>,
}

impl IngestReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "loaded {} pairs, {} failures\n",
            self.loaded.len(),
            self.failures.len()
        );
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        for f in &self.failures {
            out.push_str(&format!("failed {}: {}\n", f.id, f.reason));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestOptions {
    /// Required `(height, width)`; `None` accepts any size.
    pub expected_dims: Option<(usize, usize)>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            expected_dims: Some((256, 256)),
        }
    }
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        if entry.path().is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every pair below `root`. Individual bad pairs are reported, not
/// fatal; only an unreadable root is an error.
pub fn ingest(root: &Path, opts: &IngestOptions) -> Result<(Vec<RegisteredPair>, IngestReport)> {
    if !root.is_dir() {
        return Err(Error::InvalidInput(format!("{} is not a directory", root.display())));
    }
    let mut pairs = Vec::new();
    let mut report = IngestReport::default();
    for mdir in sorted_dirs(root)? {
        let name = mdir.file_name().unwrap().to_string_lossy().to_string();
        let Some(modality) = Modality::from_dir_name(&name) else {
            report.warnings.push(format!("skipping unknown directory {name}"));
            continue;
        };
        for pdir in sorted_dirs(&mdir)? {
            let id = format!("{}/{}", modality.dir_name(), pdir.file_name().unwrap().to_string_lossy());
            match load_pair(&pdir, opts) {
                Ok((mri, other)) => {
                    report.loaded.push(id.clone());
                    pairs.push(RegisteredPair {
                        id,
                        modality,
                        mri,
                        other,
                    });
                }
                Err(e) => report.failures.push(IngestFailure {
                    id,
                    reason: e.to_string(),
                }),
            }
        }
    }
    if pairs.is_empty() {
        report.warnings.push(format!("no pairs found under {}", root.display()));
        log::warn!("no pairs found under {}", root.display());
    }
    Ok((pairs, report))
}

fn load_pair(dir: &Path, opts: &IngestOptions) -> Result<(Image, Image)> {
    let mri = load_png(&dir.join("mri.png"))?.luminance();
    let other = load_png(&dir.join("other.png"))?;
    if mri.dims() != other.dims() {
        return Err(Error::DimensionMismatch(format!(
            "mri {:?} vs other {:?}",
            mri.dims(),
            other.dims()
        )));
    }
    if let Some(exp) = opts.expected_dims {
        if mri.dims() != exp {
            return Err(Error::InvalidInput(format!(
                "expected {}x{}, found {}x{}",
                exp.0,
                exp.1,
                mri.height(),
                mri.width()
            )));
        }
    }
    Ok((mri, other))
}

/// Writes pairs in the ingest layout (used by tests and the synthetic generator).
pub fn write_dataset(root: &Path, pairs: &[RegisteredPair]) -> Result<()> {
    for p in pairs {
        let dir = root.join(&p.id);
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        save_png(&dir.join("mri.png"), &p.mri, &[])?;
        save_png(&dir.join("other.png"), &p.other, &[])?;
    }
    Ok(())
}

/// Flip/rotation applied identically to every image of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub flip_x: bool,
    pub flip_y: bool,
    /// Quarter turns (counter-clockwise); odd values need square images.
    pub quarter_turns: u8,
}

impl Augmentation {
    pub fn random(seed: u64, square: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip_x = rng.random();
        let flip_y = rng.random();
        let turns: u8 = rng.random_range(0..4);
        Self {
            flip_x,
            flip_y,
            quarter_turns: if square { turns } else { turns & 2 },
        }
    }

    /// Source pixel that lands on output `(x, y)`.
    fn source(&self, x: usize, y: usize, h: usize, w: usize) -> (usize, usize) {
        let (mut x, mut y) = (x, y);
        let (mut ch, mut cw) = (h, w);
        for _ in 0..self.quarter_turns % 4 {
            // Undo one counter-clockwise quarter turn.
            let (nx, ny) = (cw - 1 - y, x);
            x = nx;
            y = ny;
            std::mem::swap(&mut ch, &mut cw);
        }
        if self.flip_x {
            x = w - 1 - x;
        }
        if self.flip_y {
            y = h - 1 - y;
        }
        (x, y)
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        let (h, w) = img.dims();
        if self.quarter_turns % 2 == 1 && h != w {
            return Err(Error::InvalidInput("quarter turns need a square image".into()));
        }
        let n = h * w;
        let mut data = vec![0.0; img.channels() * n];
        for c in 0..img.channels() {
            let src = img.plane(c);
            for y in 0..h {
                for x in 0..w {
                    let (sx, sy) = self.source(x, y, h, w);
                    data[c * n + y * w + x] = src[sy * w + sx];
                }
            }
        }
        Image::new(img.channels(), h, w, data)
    }
}

/// One training/test example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    /// Deformed non-MRI image (`I_A`).
    pub moving: Image,
    /// MRI reference (`I_B`).
    pub reference: Image,
    /// Undeformed non-MRI image, aligned with the reference (`I′_A`).
    pub label: Image,
    /// Field that registers `moving` onto `label`: `warp(moving, gt_field) ≈ label`.
    pub gt_field: DeformationField,
    /// The synthetic field that produced `moving = warp(label, synthetic_field)`.
    pub synthetic_field: DeformationField,
}

/// Deforms `pair.other` with a field drawn from `spec`, after applying the
/// optional shared augmentation to both images.
pub fn make_sample(pair: &RegisteredPair, spec: &SyntheticDeformationSpec, aug_seed: Option<u64>) -> Result<TrainingSample> {
    let (h, w) = pair.mri.dims();
    let (mri, other) = match aug_seed {
        Some(s) => {
            let aug = Augmentation::random(s, h == w);
            (aug.apply(&pair.mri)?, aug.apply(&pair.other)?)
        }
        None => (pair.mri.clone(), pair.other.clone()),
    };
    let field = synthesize_deformation(spec, h, w)?;
    sample_from_field(&pair.id, mri, other, field)
}

/// Builds a sample from an already drawn synthetic field, as used for the
/// cached test set.
pub fn sample_with_field(pair: &RegisteredPair, field: &DeformationField) -> Result<TrainingSample> {
    if field.dims() != pair.mri.dims() {
        return Err(Error::DimensionMismatch(format!(
            "field {:?} vs image {:?}",
            field.dims(),
            pair.mri.dims()
        )));
    }
    sample_from_field(&pair.id, pair.mri.clone(), pair.other.clone(), field.clone())
}

fn sample_from_field(id: &str, mri: Image, other: Image, field: DeformationField) -> Result<TrainingSample> {
    let moving = warp(&other, &field)?;
    let gt_field = invert_field(&field, INVERSE_ITERATIONS)?;
    Ok(TrainingSample {
        id: id.to_string(),
        moving,
        reference: mri,
        label: other,
        gt_field,
        synthetic_field: field,
    })
}

/// Mixes a base seed with an epoch and sample index so sample generation
/// does not depend on iteration order or worker count.
pub fn derive_seed(base: u64, epoch: u64, index: u64) -> u64 {
    let mut z = base
        ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Train,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Test => "test",
        }
    }
}

/// Pair ids assigned to each role.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Per-modality random split. Ids are sorted before shuffling so the result
/// depends only on the id set and the seed.
pub fn split(pairs: &[RegisteredPair], test_counts: &BTreeMap<Modality, usize>, seed: u64) -> Result<Split> {
    let mut by_mod: BTreeMap<Modality, Vec<String>> = BTreeMap::new();
    for p in pairs {
        by_mod.entry(p.modality).or_default().push(p.id.clone());
    }
    let mut out = Split::default();
    for (m, mut ids) in by_mod {
        ids.sort();
        let n_test = test_counts.get(&m).copied().unwrap_or(0);
        if n_test > ids.len() {
            return Err(Error::InvalidInput(format!(
                "{m}: {n_test} test pairs requested but only {} available",
                ids.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, m as u64, 0));
        ids.shuffle(&mut rng);
        let (test, train) = ids.split_at(n_test);
        let mut test = test.to_vec();
        let mut train = train.to_vec();
        test.sort();
        train.sort();
        out.test.extend(test);
        out.train.extend(train);
    }
    for (m, _) in test_counts.iter().filter(|(_, n)| **n > 0) {
        if !pairs.iter().any(|p| p.modality == *m) {
            return Err(Error::InvalidInput(format!("{m}: test pairs requested but none ingested")));
        }
    }
    Ok(out)
}

/// Line-oriented split manifest: `#` comments, then `<pair id> <role>` lines.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub comments: Vec<String>,
    pub entries: Vec<(String, Role)>,
}

impl Manifest {
    pub fn from_split(split: &Split, comments: Vec<String>) -> Self {
        let mut entries: Vec<(String, Role)> = split
            .train
            .iter()
            .map(|id| (id.clone(), Role::Train))
            .chain(split.test.iter().map(|id| (id.clone(), Role::Test)))
            .collect();
        entries.sort();
        Self { comments, entries }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.comments {
            out.push_str(&format!("# {c}\n"));
        }
        for (id, role) in &self.entries {
            out.push_str(&format!("{id} {}\n", role.as_str()));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                m.comments.push(c.trim().to_string());
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(id), Some(role), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::InvalidInput(format!("manifest line {}: expected '<id> <role>'", n + 1)));
            };
            let role = match role {
                "train" => Role::Train,
                "test" => Role::Test,
                other => return Err(Error::InvalidInput(format!("manifest line {}: unknown role {other}", n + 1))),
            };
            m.entries.push((id.to_string(), role));
        }
        Ok(m)
    }

    pub fn ids(&self, role: Role) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, r)| *r == role)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn comment(&self, key: &str) -> Option<&str> {
        self.comments
            .iter()
            .find_map(|c| c.strip_prefix(key).and_then(|r| r.strip_prefix(':')).map(str::trim))
    }
}

/// File name for a cached test field: `/` in the id becomes `__`.
pub fn field_file_name(id: &str) -> String {
    format!("{}.dfld", id.replace('/', "__"))
}

/// Synthetic anatomy: a few overlapping ellipses with tissue labels, imaged
/// through two different intensity mappings so the pair has a genuine
/// modality gap (the second image is not an affine function of the first).
pub fn synthetic_shapes(modality: Modality, count: usize, size: usize, seed: u64) -> Result<Vec<RegisteredPair>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, modality as u64 + 1, i as u64));
            let s = size as f64;
            let n_shapes = rng.random_range(3..6);
            let shapes: Vec<(f64, f64, f64, f64, f64, usize)> = (0..n_shapes)
                .map(|k| {
                    let cx = s * rng.random_range(0.3..0.7);
                    let cy = s * rng.random_range(0.3..0.7);
                    let rx = s * rng.random_range(0.08..0.3);
                    let ry = s * rng.random_range(0.08..0.3);
                    let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
                    (cx, cy, rx, ry, th, k % 4 + 1)
                })
                .collect();
            let mri_lut = [0.05, 0.35, 0.6, 0.8, 0.95];
            let other_lut = match modality {
                Modality::Ct => [0.0, 0.9, 0.3, 0.15, 0.55],
                Modality::Pet => [0.1, 0.2, 0.95, 0.4, 0.7],
                Modality::Spect => [0.05, 0.6, 0.25, 0.9, 0.45],
            };
            let label = |x: usize, y: usize| {
                let mut t = 0;
                for &(cx, cy, rx, ry, th, tissue) in &shapes {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let (sn, cs) = th.sin_cos();
                    let u = (cs * dx + sn * dy) / rx;
                    let v = (-sn * dx + cs * dy) / ry;
                    if u * u + v * v <= 1.0 {
                        t = tissue;
                    }
                }
                t
            };
            let shade = |x: usize, y: usize| 0.04 * ((x as f64 * 0.31).sin() + (y as f64 * 0.23).cos());
            let mri = Image::from_fn(size, size, |x, y| mri_lut[label(x, y)] + shade(x, y))?;
            let other = Image::from_fn(size, size, |x, y| other_lut[label(x, y)] - shade(x, y))?;
            Ok(RegisteredPair {
                id: format!("{}/{:03}", modality.dir_name(), i),
                modality,
                mri,
                other,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformation::Interval;

    fn pairs(m: Modality, n: usize) -> Vec<RegisteredPair> {
        synthetic_shapes(m, n, 32, 9).unwrap()
    }

    #[test]
    fn zero_spec_leaves_image_unchanged() {
        let p = &pairs(Modality::Ct, 1)[0];
        let s = make_sample(p, &SyntheticDeformationSpec::identity(), Some(4)).unwrap();
        assert_eq!(s.moving, s.label);
        assert_eq!(s.gt_field.max_norm(), 0.0);
    }

    #[test]
    fn translation_sample_matches_index_shift() {
        let p = &pairs(Modality::Ct, 1)[0];
        let mut spec = SyntheticDeformationSpec::identity();
        spec.translation_x = Interval::fixed(5.0);
        let s = make_sample(p, &spec, None).unwrap();
        for y in 0..32 {
            for x in 0..27 {
                assert!((s.moving.get(x, y) - p.other.get(x + 5, y)).abs() < 1e-12);
            }
        }
        assert!(s.gt_field.dx().iter().all(|&v| v == -5.0));
    }

    #[test]
    fn samples_are_deterministic() {
        let p = &pairs(Modality::Pet, 1)[0];
        let spec = SyntheticDeformationSpec::default().with_seed(11);
        assert_eq!(make_sample(p, &spec, Some(2)).unwrap(), make_sample(p, &spec, Some(2)).unwrap());
    }

    #[test]
    fn augmentation_is_shared() {
        let p = &pairs(Modality::Spect, 1)[0];
        let aug = Augmentation::random(5, true);
        let s = make_sample(p, &SyntheticDeformationSpec::identity(), Some(5)).unwrap();
        assert_eq!(s.reference, aug.apply(&p.mri).unwrap());
        assert_eq!(s.label, aug.apply(&p.other).unwrap());
    }

    #[test]
    fn quarter_turns_compose_to_identity() {
        let img = Image::from_fn(6, 6, |x, y| (x * 6 + y) as f64 / 36.0).unwrap();
        let one = Augmentation {
            quarter_turns: 1,
            ..Default::default()
        };
        let mut cur = img.clone();
        for _ in 0..4 {
            cur = one.apply(&cur).unwrap();
        }
        assert_eq!(cur, img);
        assert_ne!(one.apply(&img).unwrap(), img);
    }

    #[test]
    fn split_counts_follow_request() {
        let mut all = pairs(Modality::Ct, 14);
        all.extend(pairs(Modality::Pet, 9));
        let counts = BTreeMap::from([(Modality::Ct, 4), (Modality::Pet, 3)]);
        let s = split(&all, &counts, 1).unwrap();
        assert_eq!(s.test.len(), 7);
        assert_eq!(s.train.len(), 16);
        assert!(s.test.iter().all(|t| !s.train.contains(t)));
        assert_eq!(split(&all, &counts, 1).unwrap(), s);
    }

    #[test]
    fn split_overflow_is_an_error() {
        let all = pairs(Modality::Ct, 3);
        let counts = BTreeMap::from([(Modality::Ct, 4)]);
        assert!(split(&all, &counts, 1).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let split = Split {
            train: vec!["CT-MRI/001".into()],
            test: vec!["CT-MRI/000".into()],
        };
        let m = Manifest::from_split(&split, vec!["seed: 3".into()]);
        let text = m.to_text();
        assert_eq!(text, "# seed: 3\nCT-MRI/000 test\nCT-MRI/001 train\n");
        let back = Manifest::parse(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.comment("seed"), Some("3"));
        assert!(Manifest::parse("a b c\n").is_err());
    }

    #[test]
    fn ingest_reports_bad_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let good = synthetic_shapes(Modality::Ct, 2, 32, 1).unwrap();
        write_dataset(dir.path(), &good).unwrap();
        let small = RegisteredPair {
            id: "CT-MRI/999".into(),
            modality: Modality::Ct,
            mri: Image::filled(16, 16, 0.5).unwrap(),
            other: Image::filled(16, 16, 0.5).unwrap(),
        };
        write_dataset(dir.path(), &[small]).unwrap();
        std::fs::create_dir_all(dir.path().join("CT-MRI/500")).unwrap();
        let opts = IngestOptions {
            expected_dims: Some((32, 32)),
        };
        let (loaded, report) = ingest(dir.path(), &opts).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(report.failures.len(), 2);
        assert!(report.failures.iter().any(|f| f.id == "CT-MRI/999"));
        assert!(report.failures.iter().any(|f| f.id == "CT-MRI/500"));
    }

    #[test]
    fn ingest_of_empty_dir_warns() {
        let dir = tempfile::tempdir().unwrap();
        let (loaded, report) = ingest(dir.path(), &IngestOptions::default()).unwrap();
        assert!(loaded.is_empty());
        assert_eq!(report.warnings.len(), 1);
        assert!(ingest(&dir.path().join("missing"), &IngestOptions::default()).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 1), derive_seed(1, 1, 0));
        assert_eq!(derive_seed(7, 3, 2), derive_seed(7, 3, 2));
    }
}
