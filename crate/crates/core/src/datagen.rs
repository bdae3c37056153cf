//! Synthetic multimodal cohorts with protocol-shaped missingness.
//!
//! Each subject has a latent `u ~ N(center_label, I)` in `R^{d_u}`; modality
//! `m` observes `x_m = A_m u + noise` through a fixed random map `A_m`.
//! Modality 0 is the small, low-noise, nearly always available "tabular"
//! view. Each imaging view of a subject is independently degraded with
//! probability `degraded_rate`, in which case its noise std is
//! `degraded_noise_std` instead of `noise_std`; view reliability therefore
//! varies from sample to sample, and only the features reveal it. Train and validation masks come from a categorical distribution
//! over the non-empty subsets; test subjects are fully observed.
//!
//! On disk a cohort is a directory holding `cohort.manifest` (`key=value`
//! lines) and `cohort.csv` with columns `id, split, label, m0..m{M-1},
//! x{m}_{j}...`; features of missing modalities are empty cells and values
//! are written with nine significant digits, which round-trips `f32` exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::encoders::{ModalityMask, Sample, MAX_MODALITIES};
use crate::error::{Error, Result};
use crate::rng::stream;

pub const MANIFEST_FILE: &str = "cohort.manifest";
pub const TABLE_FILE: &str = "cohort.csv";
pub const FORMAT_VERSION: u32 = 1;

/// Relative weight of a subset that lacks the tabular modality.
const NO_TABULAR_WEIGHT: f64 = 0.1;
/// Per-imaging-modality decay of the default subset weights.
const IMAGING_DECAY: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Split::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub num_classes: usize,
    /// Width of each modality; the length is `M`.
    pub input_dims: Vec<usize>,
    pub latent_dim: usize,
    /// Distance between any two class centers.
    pub separation: f64,
    /// Noise std of the imaging modalities.
    pub noise_std: f64,
    /// Noise std of modality 0.
    pub tabular_noise_std: f64,
    /// Probability that an imaging view of a subject is degraded (for
    /// example by motion), independently per view.
    pub degraded_rate: f64,
    /// Noise std of a degraded imaging view.
    pub degraded_noise_std: f64,
    /// Unnormalized weights over the non-empty masks in ascending bit order.
    /// `None` selects the default long-tailed distribution.
    pub subset_weights: Option<Vec<f64>>,
    pub n_samples: usize,
    /// Train:val:test proportions.
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            input_dims: vec![8, 32, 32, 32],
            latent_dim: 16,
            separation: 2.0,
            noise_std: 1.0,
            tabular_noise_std: 0.3,
            degraded_rate: 0.3,
            degraded_noise_std: 4.0,
            subset_weights: None,
            n_samples: 2850,
            split: [40.0, 7.0, 10.0],
            seed: 0,
        }
    }
}

/// Long-tailed default: `(tabular ? 1 : 0.1) · 0.5^k` with `k` observed
/// imaging modalities.
pub fn default_subset_weights(modalities: usize) -> Vec<f64> {
    ModalityMask::all_nonempty(modalities)
        .into_iter()
        .map(|mask| {
            let tab = if mask.is_observed(0) { 1.0 } else { NO_TABULAR_WEIGHT };
            let k = mask.observed().filter(|&m| m > 0).count();
            tab * IMAGING_DECAY.powi(k as i32)
        })
        .collect()
}

/// Parse `"40:7:10"`.
pub fn parse_split(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::Config(format!("split ratio must look like 40:7:10, got {s:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| bad())?;
    }
    validate_split(&out)?;
    Ok(out)
}

pub fn format_split(split: &[f64; 3]) -> String {
    format!("{}:{}:{}", split[0], split[1], split[2])
}

fn validate_split(split: &[f64; 3]) -> Result<()> {
    if split.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || split.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!(
            "split ratios must be non-negative with a positive sum, got {}",
            format_split(split)
        )));
    }
    Ok(())
}

impl GenConfig {
    pub fn num_modalities(&self) -> usize {
        self.input_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_modalities();
        if m == 0 || m > MAX_MODALITIES {
            return Err(Error::Config(format!("modality count {m} out of range")));
        }
        if self.input_dims.contains(&0) || self.latent_dim == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.num_classes < 2 || self.num_classes > self.latent_dim {
            return Err(Error::Config(format!(
                "need 2 ≤ classes ≤ latent dim, got {} classes, latent {}",
                self.num_classes, self.latent_dim
            )));
        }
        for (name, v) in [
            ("separation", self.separation),
            ("noise_std", self.noise_std),
            ("tabular_noise_std", self.tabular_noise_std),
            ("degraded_noise_std", self.degraded_noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.degraded_rate) {
            return Err(Error::Config(format!("degraded_rate must lie in [0, 1], got {}", self.degraded_rate)));
        }
        validate_split(&self.split)?;
        self.subset_distribution().map(|_| ())
    }

    /// Normalized subset probabilities in ascending mask order.
    pub fn subset_distribution(&self) -> Result<Vec<f64>> {
        let m = self.num_modalities();
        let weights = match &self.subset_weights {
            Some(w) => w.clone(),
            None => default_subset_weights(m),
        };
        let expected = (1usize << m) - 1;
        if weights.len() != expected {
            return Err(Error::Config(format!(
                "subset distribution needs {expected} weights, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("subset weights must be finite and non-negative".into()));
        }
        if weights[expected - 1] <= 0.0 {
            return Err(Error::Config("the full mask needs nonzero probability".into()));
        }
        let total: f64 = weights.iter().sum();
        Ok(weights.iter().map(|w| w / total).collect())
    }

    /// Per-modality availability implied by the subset distribution.
    pub fn expected_availability(&self) -> Result<Vec<f64>> {
        let p = self.subset_distribution()?;
        let masks = ModalityMask::all_nonempty(self.num_modalities());
        Ok((0..self.num_modalities())
            .map(|m| {
                masks
                    .iter()
                    .zip(&p)
                    .filter(|(mask, _)| mask.is_observed(m))
                    .map(|(_, p)| p)
                    .sum()
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub config: GenConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Cohort {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Split `total` in proportion to `weights` with the largest-remainder rule
/// (ties favour the lower index).
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Class × split counts with the given margins such that every cell is the
/// floor or ceiling of its proportional target `n_c · n_s / N`.
pub fn stratify(class_counts: &[usize], split_counts: &[usize]) -> Vec<Vec<usize>> {
    let n: usize = class_counts.iter().sum();
    debug_assert_eq!(n, split_counts.iter().sum::<usize>());
    if n == 0 {
        return vec![vec![0; split_counts.len()]; class_counts.len()];
    }
    let mut cells: Vec<Vec<usize>> = class_counts
        .iter()
        .map(|&nc| split_counts.iter().map(|&ns| nc * ns / n).collect())
        .collect();
    let mut row_left: Vec<usize> = class_counts
        .iter()
        .zip(&cells)
        .map(|(&nc, row)| nc - row.iter().sum::<usize>())
        .collect();
    let mut col_left: Vec<usize> = split_counts
        .iter()
        .enumerate()
        .map(|(s, &ns)| ns - cells.iter().map(|r| r[s]).sum::<usize>())
        .collect();
    // Residuals form a 0/1 matrix with the remaining margins. Rows with the
    // largest demand go first and take the columns with the most room,
    // preferring cells whose target is fractional.
    let mut rows: Vec<usize> = (0..class_counts.len()).collect();
    rows.sort_by(|&a, &b| row_left[b].cmp(&row_left[a]).then(a.cmp(&b)));
    for c in rows {
        for fractional_only in [true, false] {
            let mut cols: Vec<usize> = (0..split_counts.len())
                .filter(|&s| !fractional_only || n * cells[c][s] < class_counts[c] * split_counts[s])
                .collect();
            cols.sort_by(|&a, &b| col_left[b].cmp(&col_left[a]).then(a.cmp(&b)));
            for s in cols {
                if row_left[c] > 0 && col_left[s] > 0 && n * cells[c][s] < class_counts[c] * split_counts[s] + n {
                    cells[c][s] += 1;
                    row_left[c] -= 1;
                    col_left[s] -= 1;
                }
            }
        }
    }
    cells
}

fn gaussian(rng: &mut impl rand::Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draw a cohort. Identical configs give identical cohorts.
pub fn generate(config: &GenConfig) -> Result<Cohort> {
    config.validate()?;
    let (m_count, du, c_count) = (config.num_modalities(), config.latent_dim, config.num_classes);
    let seed = config.seed;

    let mut map_rng = stream(seed, "gen-maps", 0);
    let scale = 1.0 / (du as f64).sqrt();
    let maps: Vec<Vec<f64>> = config
        .input_dims
        .iter()
        .map(|&d| (0..d * du).map(|_| gaussian(&mut map_rng) * scale).collect())
        .collect();
    let center_scale = config.separation / std::f64::consts::SQRT_2;

    let class_counts = largest_remainder(config.n_samples, &vec![1.0; c_count]);
    let split_counts = largest_remainder(config.n_samples, &config.split);
    let cells = stratify(&class_counts, &split_counts);

    let mut assign_rng = stream(seed, "gen-assign", 0);
    let mut slots: Vec<(usize, Split)> = Vec::with_capacity(config.n_samples);
    for (c, row) in cells.iter().enumerate() {
        for (s, &k) in row.iter().enumerate() {
            slots.extend(std::iter::repeat_n((c, Split::ALL[s]), k));
        }
    }
    slots.shuffle(&mut assign_rng);

    let probs = config.subset_distribution()?;
    let masks = ModalityMask::all_nonempty(m_count);
    let chooser = WeightedIndex::new(&probs).map_err(|e| Error::Config(format!("subset distribution: {e}")))?;
    let mut mask_rng = stream(seed, "gen-masks", 0);
    let mut sample_rng = stream(seed, "gen-samples", 0);

    let mut cohort = Cohort {
        config: config.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (id, &(label, split)) in slots.iter().enumerate() {
        let u: Vec<f64> = (0..du)
            .map(|k| {
                let center = if k == label { center_scale } else { 0.0 };
                center + gaussian(&mut sample_rng)
            })
            .collect();
        // Every view is drawn so that the random stream does not depend on
        // which modalities end up observed.
        let views: Vec<Vec<f32>> = maps
            .iter()
            .enumerate()
            .map(|(m, a)| {
                let d = config.input_dims[m];
                let std = if m == 0 {
                    config.tabular_noise_std
                } else if sample_rng.random::<f64>() < config.degraded_rate {
                    config.degraded_noise_std
                } else {
                    config.noise_std
                };
                (0..d)
                    .map(|r| {
                        let signal: f64 = a[r * du..(r + 1) * du].iter().zip(&u).map(|(x, y)| x * y).sum();
                        (signal + std * gaussian(&mut sample_rng)) as f32
                    })
                    .collect()
            })
            .collect();
        let mask = match split {
            Split::Test => ModalityMask::full(m_count),
            _ => masks[chooser.sample(&mut mask_rng)],
        };
        let features = views
            .into_iter()
            .enumerate()
            .map(|(m, v)| mask.is_observed(m).then_some(v))
            .collect();
        let sample = Sample::new(id as u64, features, label);
        match split {
            Split::Train => cohort.train.push(sample),
            Split::Val => cohort.val.push(sample),
            Split::Test => cohort.test.push(sample),
        }
    }
    Ok(cohort)
}

/// Fraction of samples observing each modality.
pub fn availability(samples: &[Sample], modalities: usize) -> Vec<f64> {
    (0..modalities)
        .map(|m| {
            if samples.is_empty() {
                0.0
            } else {
                samples.iter().filter(|s| s.feature(m).is_some()).count() as f64 / samples.len() as f64
            }
        })
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn manifest_text(cohort: &Cohort) -> String {
    let c = &cohort.config;
    let mut s = String::new();
    let _ = writeln!(s, "format={FORMAT_VERSION}");
    let _ = writeln!(s, "num_modalities={}", c.num_modalities());
    let _ = writeln!(s, "input_dims={}", join(&c.input_dims));
    let _ = writeln!(s, "num_classes={}", c.num_classes);
    let _ = writeln!(s, "latent_dim={}", c.latent_dim);
    let _ = writeln!(s, "separation={}", c.separation);
    let _ = writeln!(s, "noise_std={}", c.noise_std);
    let _ = writeln!(s, "tabular_noise_std={}", c.tabular_noise_std);
    let _ = writeln!(s, "degraded_rate={}", c.degraded_rate);
    let _ = writeln!(s, "degraded_noise_std={}", c.degraded_noise_std);
    match &c.subset_weights {
        Some(w) => {
            let _ = writeln!(s, "subset_weights={}", join(w));
        }
        None => {
            let _ = writeln!(s, "subset_weights=default");
        }
    }
    let _ = writeln!(s, "n_samples={}", c.n_samples);
    let _ = writeln!(s, "split={}", format_split(&c.split));
    let _ = writeln!(s, "seed={}", c.seed);
    let _ = writeln!(s, "train_count={}", cohort.train.len());
    let _ = writeln!(s, "val_count={}", cohort.val.len());
    let _ = writeln!(s, "test_count={}", cohort.test.len());
    s
}

fn table_header(config: &GenConfig) -> Vec<String> {
    let mut header = vec!["id".to_string(), "split".into(), "label".into()];
    header.extend((0..config.num_modalities()).map(|m| format!("m{m}")));
    for (m, &d) in config.input_dims.iter().enumerate() {
        header.extend((0..d).map(|j| format!("x{m}_{j}")));
    }
    header
}

/// Write `cohort.manifest` and `cohort.csv` into `dir`, creating it if needed.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest_text(cohort)).map_err(|e| Error::io(&manifest_path, e))?;

    let table_path = dir.join(TABLE_FILE);
    let io_err = |e: csv::Error| Error::io(&table_path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(&table_path).map_err(io_err)?;
    w.write_record(table_header(&cohort.config)).map_err(io_err)?;
    let m_count = cohort.config.num_modalities();
    for split in Split::ALL {
        for s in cohort.split(split) {
            if s.num_modalities() != m_count {
                return Err(Error::Data(format!("sample {} has the wrong modality count", s.id)));
            }
            let mut rec = vec![s.id.to_string(), split.name().to_string(), s.label.to_string()];
            rec.extend((0..m_count).map(|m| if s.feature(m).is_some() { "1" } else { "0" }.to_string()));
            for (m, &d) in cohort.config.input_dims.iter().enumerate() {
                match s.feature(m) {
                    Some(values) => rec.extend(values.iter().map(|v| format!("{v:.8e}"))),
                    None => rec.extend(std::iter::repeat_n(String::new(), d)),
                }
            }
            w.write_record(&rec).map_err(io_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&table_path, e))
}

fn parse_manifest(text: &str, path: &Path) -> Result<(GenConfig, [usize; 3])> {
    let mut kv = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, i as u64 + 1, line, "expected key=value"))?;
        kv.insert(k.trim().to_string(), (i as u64 + 1, v.trim().to_string()));
    }
    let get = |key: &str| -> Result<(u64, &str)> {
        kv.get(key)
            .map(|(l, v)| (*l, v.as_str()))
            .ok_or_else(|| Error::parse(path, 0, key, "missing key"))
    };
    fn num<T: std::str::FromStr>(path: &Path, key: &str, (line, v): (u64, &str)) -> Result<T> {
        v.parse().map_err(|_| Error::parse(path, line, key, format!("bad value {v:?}")))
    }
    let list = |key: &str| -> Result<Vec<usize>> {
        let (line, v) = get(key)?;
        v.split(',').map(|x| num(path, key, (line, x))).collect()
    };
    let format: u32 = num(path, "format", get("format")?)?;
    if format != FORMAT_VERSION {
        return Err(Error::parse(path, get("format")?.0, "format", "unsupported format version"));
    }
    let subset_weights = match get("subset_weights")? {
        (_, "default") => None,
        (line, v) => Some(
            v.split(',')
                .map(|x| num(path, "subset_weights", (line, x)))
                .collect::<Result<Vec<f64>>>()?,
        ),
    };
    let config = GenConfig {
        num_classes: num(path, "num_classes", get("num_classes")?)?,
        input_dims: list("input_dims")?,
        latent_dim: num(path, "latent_dim", get("latent_dim")?)?,
        separation: num(path, "separation", get("separation")?)?,
        noise_std: num(path, "noise_std", get("noise_std")?)?,
        tabular_noise_std: num(path, "tabular_noise_std", get("tabular_noise_std")?)?,
        degraded_rate: num(path, "degraded_rate", get("degraded_rate")?)?,
        degraded_noise_std: num(path, "degraded_noise_std", get("degraded_noise_std")?)?,
        subset_weights,
        n_samples: num(path, "n_samples", get("n_samples")?)?,
        split: parse_split(get("split")?.1).map_err(|e| Error::parse(path, get("split").map_or(0, |x| x.0), "split", e.to_string()))?,
        seed: num(path, "seed", get("seed")?)?,
    };
    let m: usize = num(path, "num_modalities", get("num_modalities")?)?;
    if m != config.num_modalities() {
        return Err(Error::parse(path, get("num_modalities")?.0, "num_modalities", "disagrees with input_dims"));
    }
    let counts = [
        num(path, "train_count", get("train_count")?)?,
        num(path, "val_count", get("val_count")?)?,
        num(path, "test_count", get("test_count")?)?,
    ];
    Ok((config, counts))
}

/// Read a cohort directory written by [`write_cohort`].
pub fn read_cohort(dir: &Path) -> Result<Cohort> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let (config, counts) = parse_manifest(&text, &manifest_path)?;
    let m_count = config.num_modalities();

    let path = dir.join(TABLE_FILE);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(&path)
        .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    let header = table_header(&config);
    let mut records = reader.records();
    match records.next() {
        Some(Ok(rec)) if rec.iter().eq(header.iter().map(String::as_str)) => {}
        Some(Ok(_)) | None => return Err(Error::parse(&path, 1, "header", "unexpected column header")),
        Some(Err(e)) => return Err(Error::parse(&path, 1, "header", e.to_string())),
    }

    let mut cohort = Cohort {
        config: config.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(&path, line, "record", e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::parse(&path, line, "record", format!("expected {} fields, got {}", header.len(), rec.len())));
        }
        let bad = |col: usize, msg: &str| Error::parse(&path, line, header[col].clone(), msg);
        let id: u64 = rec[0].parse().map_err(|_| bad(0, "expected an integer id"))?;
        let split = Split::parse(&rec[1]).ok_or_else(|| bad(1, "expected train, val or test"))?;
        let label: usize = rec[2].parse().map_err(|_| bad(2, "expected an integer label"))?;
        if label >= config.num_classes {
            return Err(bad(2, "label out of range"));
        }
        let mut col = 3 + m_count;
        let mut features = Vec::with_capacity(m_count);
        for (m, &d) in config.input_dims.iter().enumerate() {
            let observed = match &rec[3 + m] {
                "1" => true,
                "0" => false,
                _ => return Err(bad(3 + m, "mask bit must be 0 or 1")),
            };
            if observed {
                let values = (col..col + d)
                    .map(|k| rec[k].parse::<f32>().map_err(|_| bad(k, "expected a number")))
                    .collect::<Result<Vec<f32>>>()?;
                features.push(Some(values));
            } else {
                if let Some(k) = (col..col + d).find(|&k| !rec[k].is_empty()) {
                    return Err(bad(k, "missing modality must have empty fields"));
                }
                features.push(None);
            }
            col += d;
        }
        let sample = Sample::new(id, features, label);
        match split {
            Split::Train => cohort.train.push(sample),
            Split::Val => cohort.val.push(sample),
            Split::Test => cohort.test.push(sample),
        }
    }
    let found = [cohort.train.len(), cohort.val.len(), cohort.test.len()];
    if found != counts {
        return Err(Error::parse(
            &manifest_path,
            0,
            "counts",
            format!("manifest lists {counts:?} samples per split, table has {found:?}"),
        ));
    }
    Ok(cohort)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_distribution_is_long_tailed() {
        let cfg = GenConfig::default();
        let p = cfg.subset_distribution().unwrap();
        assert_eq!(p.len(), 15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Mask bit 0 is tabular; tabular-only is the mode.
        let tab_only = p[0];
        assert!(p.iter().all(|&x| x <= tab_only));
        assert!(p[14] > 0.0);
        let avail = cfg.expected_availability().unwrap();
        assert!(avail[0] > 0.9);
        assert!(avail[1] < 0.5);
    }

    #[test]
    fn invalid_distributions_are_rejected() {
        let mut cfg = GenConfig::default();
        cfg.subset_weights = Some(vec![1.0; 14]);
        assert!(cfg.validate().is_err());
        let mut w = vec![1.0; 15];
        w[14] = 0.0;
        cfg.subset_weights = Some(w);
        assert!(cfg.validate().is_err());
        cfg.subset_weights = Some(vec![-1.0; 15]);
        assert!(cfg.validate().is_err());
        assert!(parse_split("1:2").is_err());
        assert!(parse_split("1:-2:3").is_err());
        assert!(parse_split("0:0:0").is_err());
        assert_eq!(parse_split("40:7:10").unwrap(), [40.0, 7.0, 10.0]);
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(2850, &[40.0, 7.0, 10.0]), vec![2000, 350, 500]);
        assert_eq!(largest_remainder(10, &[1.0; 3]), vec![4, 3, 3]);
        assert_eq!(largest_remainder(0, &[1.0, 2.0]), vec![0, 0]);
    }

    #[test]
    fn stratification_respects_margins_and_targets() {
        for (classes, splits) in [
            (vec![950, 950, 950], vec![2000, 350, 500]),
            (vec![4, 3, 3], vec![5, 2, 3]),
            (vec![7, 1, 2, 5], vec![3, 3, 9]),
            (vec![1, 1, 1], vec![1, 1, 1]),
        ] {
            let n: usize = classes.iter().sum();
            let cells = stratify(&classes, &splits);
            for (c, row) in cells.iter().enumerate() {
                assert_eq!(row.iter().sum::<usize>(), classes[c]);
                for (s, &k) in row.iter().enumerate() {
                    let target = classes[c] as f64 * splits[s] as f64 / n as f64;
                    assert!((k as f64 - target).abs() <= 1.0, "{classes:?} {splits:?} {cells:?}");
                }
            }
            for s in 0..splits.len() {
                assert_eq!(cells.iter().map(|r| r[s]).sum::<usize>(), splits[s]);
            }
        }
    }

    #[test]
    fn generated_cohort_shape() {
        let cfg = GenConfig {
            n_samples: 570,
            ..GenConfig::default()
        };
        let cohort = generate(&cfg).unwrap();
        assert_eq!((cohort.train.len(), cohort.val.len(), cohort.test.len()), (400, 70, 100));
        assert!(cohort.test.iter().all(|s| s.mask() == ModalityMask::full(4)));
        assert!(cohort.train.iter().chain(&cohort.val).all(|s| !s.mask().is_empty()));
        for s in cohort.train.iter().chain(&cohort.val).chain(&cohort.test) {
            s.validate(&cfg.input_dims, cfg.num_classes).unwrap();
        }
        assert_eq!(generate(&cfg).unwrap(), cohort);
    }

    #[test]
    fn availability_matches_distribution() {
        let cfg = GenConfig {
            n_samples: 4000,
            split: [1.0, 0.0, 0.0],
            ..GenConfig::default()
        };
        let cohort = generate(&cfg).unwrap();
        let got = availability(&cohort.train, 4);
        let want = cfg.expected_availability().unwrap();
        let tol = 3.0 / (cohort.train.len() as f64).sqrt();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < tol, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn nine_digit_text_round_trips_f32() {
        for v in [1.0f32 / 3.0, -1.2345679e-7, f32::MAX, f32::MIN_POSITIVE, 0.0, 123456.79] {
            let s = format!("{v:.8e}");
            assert_eq!(s.parse::<f32>().unwrap(), v, "{s}");
        }
    }
}
