//! Task-sequence construction: disjoint class splits, separable synthetic
//! generators, an IDX image-file loader, and synthetic event streams.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Input layout of a dataset's samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    /// Flat [C*H*W] pixels in [0,1].
    Image { channels: usize, height: usize, width: usize },
    /// Flat [T*channels] binary event frames.
    Events { timesteps: usize, channels: usize },
}

impl InputKind {
    pub fn sample_len(&self) -> usize {
        match *self {
            InputKind::Image { channels, height, width } => channels * height * width,
            InputKind::Events { timesteps, channels } => timesteps * channels,
        }
    }
}

/// Immutable labeled dataset with global class ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: InputKind,
    pub samples: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

// ── splits ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub total_classes: usize,
    pub num_tasks: usize,
    /// Permutation of 0..total_classes-1; tasks take contiguous groups.
    pub class_order: Vec<usize>,
}

impl SplitSpec {
    pub fn identity(total_classes: usize, num_tasks: usize) -> Self {
        SplitSpec { total_classes, num_tasks, class_order: (0..total_classes).collect() }
    }

    pub fn shuffled(total_classes: usize, num_tasks: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..total_classes).collect();
        let mut rng = SplitMix64::new(seed);
        rng.shuffle(&mut order);
        SplitSpec { total_classes, num_tasks, class_order: order }
    }

    pub fn classes_per_task(&self) -> usize {
        self.total_classes / self.num_tasks
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.total_classes % self.num_tasks != 0 {
            return Err(Error::Config(format!(
                "{} classes cannot split into {} equal tasks",
                self.total_classes, self.num_tasks
            )));
        }
        let mut seen = vec![false; self.total_classes];
        if self.class_order.len() != self.total_classes {
            return Err(Error::Config("class_order length mismatch".into()));
        }
        for &c in &self.class_order {
            if c >= self.total_classes || seen[c] {
                return Err(Error::Config(format!("class_order is not a permutation: {c}")));
            }
            seen[c] = true;
        }
        Ok(())
    }
}

/// One task's data: train/test subsets with global labels plus the
/// global-to-local label map.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub id: u32,
    /// Global class ids owned by this task, in local-label order.
    pub classes: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
}

impl TaskData {
    pub fn local_label(&self, global: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == global)
    }

    pub fn global_label(&self, local: usize) -> usize {
        self.classes[local]
    }
}

/// Ordered tasks with pairwise-disjoint label sets.
pub struct TaskSequence {
    pub tasks: Vec<TaskData>,
    pub classes_per_task: usize,
}

impl TaskSequence {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, k: u32) -> Result<&TaskData> {
        self.tasks
            .get(k as usize)
            .ok_or_else(|| Error::Lookup(format!("no task {k} in sequence")))
    }
}

/// Partition train/test datasets into tasks by class groups.
pub fn make_splits(train: &Dataset, test: &Dataset, spec: &SplitSpec) -> Result<TaskSequence> {
    spec.validate()?;
    for ds in [train, test] {
        if let Some(&bad) = ds.labels.iter().find(|&&l| l >= spec.total_classes) {
            return Err(Error::Data(format!(
                "label {bad} outside 0..{}",
                spec.total_classes
            )));
        }
    }
    let cpt = spec.classes_per_task();
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for k in 0..spec.num_tasks {
        let classes: Vec<usize> = spec.class_order[k * cpt..(k + 1) * cpt].to_vec();
        let filter = |ds: &Dataset, classes: &[usize]| -> Dataset {
            let mut samples = Vec::new();
            let mut labels = Vec::new();
            for (s, &l) in ds.samples.iter().zip(&ds.labels) {
                if classes.contains(&l) {
                    samples.push(s.clone());
                    labels.push(l);
                }
            }
            Dataset { kind: ds.kind, samples, labels }
        };
        let train_split = filter(train, &classes);
        let test_split = filter(test, &classes);
        tasks.push(TaskData { id: k as u32, classes, train: train_split, test: test_split });
    }
    Ok(TaskSequence { tasks, classes_per_task: cpt })
}

// ── synthetic clusters ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub kind: InputKind,
    /// Minimum pairwise distance between class means.
    pub margin: f32,
    pub noise_sigma: f32,
    pub samples_per_class: usize,
    pub seed: u64,
}

fn l2_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

/// Sample class means with pairwise distance >= margin. Image mode draws
/// binary-contrast patterns in {0.1, 0.9}; vector mode draws uniform points
/// in a cube scaled to the margin.
fn place_means(spec: &SyntheticSpec, rng: &mut SplitMix64) -> Result<Vec<Vec<f32>>> {
    let dim = spec.kind.sample_len();
    let image = matches!(spec.kind, InputKind::Image { .. });
    let mut means: Vec<Vec<f32>> = Vec::with_capacity(spec.classes);
    'outer: for _ in 0..1000 {
        let candidate: Vec<f32> = if image {
            (0..dim).map(|_| if rng.next_f32() < 0.5 { 0.1 } else { 0.9 }).collect()
        } else {
            let half = spec.margin * 2.0;
            (0..dim).map(|_| rng.uniform_sym(half)).collect()
        };
        for m in &means {
            if l2_dist(m, &candidate) < spec.margin {
                continue 'outer;
            }
        }
        means.push(candidate);
        if means.len() == spec.classes {
            return Ok(means);
        }
    }
    Err(Error::Data(format!(
        "could not place {} class means at margin {} after 1000 attempts",
        spec.classes, spec.margin
    )))
}

/// Gaussian clusters around margin-separated means; image mode clips samples
/// into [0,1].
pub fn synth_clusters(spec: &SyntheticSpec) -> Result<Dataset> {
    let mut rng = SplitMix64::new(spec.seed);
    let means = place_means(spec, &mut rng)?;
    let image = matches!(spec.kind, InputKind::Image { .. });
    let mut samples = Vec::with_capacity(spec.classes * spec.samples_per_class);
    let mut labels = Vec::with_capacity(samples.capacity());
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let mut s: Vec<f32> = mean
                .iter()
                .map(|&m| m + spec.noise_sigma * rng.next_gaussian() as f32)
                .collect();
            if image {
                for v in s.iter_mut() {
                    *v = v.clamp(0.0, 1.0);
                }
            }
            samples.push(s);
            labels.push(class);
        }
    }
    Ok(Dataset { kind: spec.kind, samples, labels })
}

/// Train/test pair from disjoint sub-seeds of the same mean placement.
pub fn synth_train_test(
    spec: &SyntheticSpec,
    test_per_class: usize,
) -> Result<(Dataset, Dataset)> {
    let train = synth_clusters(spec)?;
    // Same seed reproduces the same means; the test noise stream derives
    // from a different salt so test samples differ from train.
    let mut rng = SplitMix64::new(spec.seed);
    let means = place_means(spec, &mut rng)?;
    let mut noise = SplitMix64::stream(spec.seed, 0x7E57_DA7A);
    let image = matches!(spec.kind, InputKind::Image { .. });
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..test_per_class {
            let mut s: Vec<f32> = mean
                .iter()
                .map(|&m| m + spec.noise_sigma * noise.next_gaussian() as f32)
                .collect();
            if image {
                for v in s.iter_mut() {
                    *v = v.clamp(0.0, 1.0);
                }
            }
            samples.push(s);
            labels.push(class);
        }
    }
    Ok((train, Dataset { kind: spec.kind, samples, labels }))
}

// ── IDX loader ───────────────────────────────────────────────────────────

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    let start = *offset;
    r.read_exact(buf).map_err(|e| Error::Format {
        offset: start,
        msg: format!("truncated read of {} bytes: {e}", buf.len()),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

fn read_idx_u8(path: &Path, expect_ndim: u8) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut f = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut offset = 0u64;
    let mut magic = [0u8; 4];
    read_exact_at(&mut f, &mut magic, &mut offset)?;
    if magic[0] != 0 || magic[1] != 0 {
        return Err(Error::Format { offset: 0, msg: format!("bad IDX magic {magic:02x?}") });
    }
    if magic[2] != 0x08 {
        return Err(Error::Format {
            offset: 2,
            msg: format!("unsupported IDX dtype 0x{:02x} (only u8 supported)", magic[2]),
        });
    }
    let ndim = magic[3];
    if ndim != expect_ndim {
        return Err(Error::Format {
            offset: 3,
            msg: format!("expected {expect_ndim} dimensions, file has {ndim}"),
        });
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        let mut d = [0u8; 4];
        read_exact_at(&mut f, &mut d, &mut offset)?;
        dims.push(u32::from_be_bytes(d) as usize);
    }
    let total: usize = dims.iter().product();
    let mut payload = vec![0u8; total];
    read_exact_at(&mut f, &mut payload, &mut offset)?;
    let mut extra = [0u8; 1];
    if f.read(&mut extra).map_err(|e| Error::Format { offset, msg: e.to_string() })? != 0 {
        return Err(Error::Format { offset, msg: "trailing bytes after IDX payload".into() });
    }
    Ok((dims, payload))
}

/// Load an IDX3 image file and its IDX1 label companion; pixels scale to
/// [0,1] floats.
pub fn idx_load(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (idims, ipayload) = read_idx_u8(images_path, 3)?;
    let (ldims, lpayload) = read_idx_u8(labels_path, 1)?;
    let (n, h, w) = (idims[0], idims[1], idims[2]);
    if ldims[0] != n {
        return Err(Error::Format {
            offset: 4,
            msg: format!("{n} images but {} labels", ldims[0]),
        });
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let px = &ipayload[i * h * w..(i + 1) * h * w];
        samples.push(px.iter().map(|&b| b as f32 / 255.0).collect());
    }
    let labels = lpayload.iter().map(|&b| b as usize).collect();
    Ok(Dataset {
        kind: InputKind::Image { channels: 1, height: h, width: w },
        samples,
        labels,
    })
}

// ── synthetic event streams ──────────────────────────────────────────────

/// Bernoulli spike trains from disjoint per-class channel templates:
/// on-template channels fire with probability 0.8, others with 0.05.
pub fn synth_events(
    classes: usize,
    timesteps: usize,
    channels: usize,
    samples_per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    if timesteps < 2 {
        return Err(Error::Config(format!("event streams need T >= 2, got {timesteps}")));
    }
    if channels < classes {
        return Err(Error::Config(format!(
            "{channels} channels cannot host {classes} disjoint class templates"
        )));
    }
    let chunk = channels / classes;
    let mut rng = SplitMix64::new(seed);
    let mut samples = Vec::with_capacity(classes * samples_per_class);
    let mut labels = Vec::with_capacity(samples.capacity());
    for class in 0..classes {
        let on = class * chunk..(class + 1) * chunk;
        for _ in 0..samples_per_class {
            let mut s = Vec::with_capacity(timesteps * channels);
            for _t in 0..timesteps {
                for ch in 0..channels {
                    let p = if on.contains(&ch) { 0.8 } else { 0.05 };
                    s.push(if rng.next_f32() < p { 1.0 } else { 0.0 });
                }
            }
            samples.push(s);
            labels.push(class);
        }
    }
    Ok(Dataset { kind: InputKind::Events { timesteps, channels }, samples, labels })
}

// ── reference classifiers (oracles for tests and calibration) ────────────

/// Nearest-centroid classifier: fit per-class means on one set, report
/// accuracy on another. Independent of the model path.
pub fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset, classes: usize) -> f64 {
    let dim = train.samples[0].len();
    let mut centroids = vec![vec![0.0f64; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (s, &l) in train.samples.iter().zip(&train.labels) {
        for (c, &v) in centroids[l].iter_mut().zip(s) {
            *c += v as f64;
        }
        counts[l] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        if n > 0 {
            for v in c.iter_mut() {
                *v /= n as f64;
            }
        }
    }
    let mut correct = 0usize;
    for (s, &l) in test.samples.iter().zip(&test.labels) {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (k, c) in centroids.iter().enumerate() {
            let d: f64 = s.iter().zip(c).map(|(&x, &m)| (x as f64 - m) * (x as f64 - m)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        if best == l {
            correct += 1;
        }
    }
    correct as f64 / test.len() as f64
}
