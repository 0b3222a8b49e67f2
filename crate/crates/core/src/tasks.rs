//! Task construction: few-shot training units cut from datasets.
//!
//! Two task rules exist. The standard rule draws shots uniformly from a
//! dataset's pooled eligible slices, so one task can mix volumes. The
//! volume-based rule confines a task to a single volume and walks its
//! eligible slices with a fixed step, trading randomness for coverage of
//! the whole organ. Dataset choice is weighted so that organs scanned in
//! several modalities are not over-represented: each modality's rate is
//! the reciprocal of the organ's modality count, normalized over datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, SliceSample};
use crate::{Error, Result};

/// How a task's shots are selected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskRule {
    /// Uniform draws from the dataset's pooled slices.
    Standard,
    /// Stepped walk over one volume's eligible slices.
    VolumeBased,
}

impl std::fmt::Display for TaskRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskRule::Standard => "standard",
            TaskRule::VolumeBased => "volume",
        })
    }
}

impl std::str::FromStr for TaskRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(TaskRule::Standard),
            "volume" => Ok(TaskRule::VolumeBased),
            other => Err(Error::Config(format!(
                "unknown task rule '{other}' (expected standard or volume)"
            ))),
        }
    }
}

/// A few-shot training unit.
#[derive(Clone, Debug)]
pub struct Task {
    pub shots: Vec<SliceSample>,
    pub source_dataset: String,
    pub rule: TaskRule,
    /// Set exactly when the rule is volume-based.
    pub volume_id: Option<u32>,
}

/// Sampling view of one dataset: eligibility resolved once, reused for
/// every draw.
pub struct TaskSource<'a> {
    pub dataset: &'a Dataset,
    /// Pooled `(volume index, slice index)` pairs across the dataset.
    pool: Vec<(usize, usize)>,
    /// Eligible slice indices per volume.
    eligible: Vec<Vec<usize>>,
}

impl<'a> TaskSource<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        let eligible: Vec<Vec<usize>> =
            dataset.volumes.iter().map(|v| dataset.eligible_slices(v)).collect();
        let pool = eligible
            .iter()
            .enumerate()
            .flat_map(|(vi, slices)| slices.iter().map(move |&s| (vi, s)))
            .collect();
        Self { dataset, pool, eligible }
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    /// Indices of volumes that have at least one eligible slice.
    pub fn usable_volumes(&self) -> Vec<usize> {
        (0..self.eligible.len()).filter(|&v| !self.eligible[v].is_empty()).collect()
    }
}

/// Per-dataset selection probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingWeights {
    entries: Vec<(String, f64)>,
}

impl SamplingWeights {
    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn weight_of(&self, dataset_id: &str) -> Option<f64> {
        self.entries.iter().find(|(id, _)| id == dataset_id).map(|(_, w)| *w)
    }
}

/// Weights proportional to the reciprocal of each dataset's modality count,
/// normalized to sum one.
pub fn compute_sampling_weights(datasets: &[Dataset]) -> Result<SamplingWeights> {
    if datasets.is_empty() {
        return Err(Error::Config("cannot compute sampling weights of zero datasets".into()));
    }
    let raw: Vec<f64> = datasets
        .iter()
        .map(|d| {
            if d.z == 0 {
                Err(Error::Data(format!("dataset {}: modality count 0", d.id)))
            } else {
                Ok(1.0 / d.z as f64)
            }
        })
        .collect::<Result<_>>()?;
    let total: f64 = raw.iter().sum();
    Ok(SamplingWeights {
        entries: datasets.iter().zip(raw).map(|(d, r)| (d.id.clone(), r / total)).collect(),
    })
}

fn require_shots(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("shot count must be at least 1".into()));
    }
    Ok(())
}

/// Standard-rule task: `k` distinct pooled slices, uniformly at random.
pub fn sample_standard(src: &TaskSource, k: usize, seed: u64) -> Result<Task> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_standard_with(src, k, &mut rng)
}

/// Standard-rule task driven by an existing generator.
pub fn sample_standard_with(src: &TaskSource, k: usize, rng: &mut ChaCha8Rng) -> Result<Task> {
    require_shots(k)?;
    if src.pool.len() < k {
        return Err(Error::InsufficientData(format!(
            "dataset {}: pool of {} eligible slices cannot provide {k} shots",
            src.dataset.id,
            src.pool.len()
        )));
    }
    let picks = rand::seq::index::sample(rng, src.pool.len(), k);
    let shots = picks
        .iter()
        .map(|i| {
            let (vi, slice) = src.pool[i];
            src.dataset.volumes[vi].sample(slice)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Task {
        shots,
        source_dataset: src.dataset.id.clone(),
        rule: TaskRule::Standard,
        volume_id: None,
    })
}

/// Volume-based task: walk the volume's eligible slices with step
/// `ceil(n / k)`, starting at the first.
///
/// The stepped walk spreads shots over the whole organ. It yields at most
/// `k` shots — exactly `k` when `k` divides the eligible count — and never
/// fewer than half of `k` while the volume has at least `k` eligible
/// slices; volumes shorter than `k` contribute every eligible slice once.
pub fn sample_volume_based(src: &TaskSource, volume_index: usize, k: usize) -> Result<Task> {
    require_shots(k)?;
    let volume = src.dataset.volumes.get(volume_index).ok_or_else(|| {
        Error::Config(format!(
            "dataset {}: volume index {volume_index} out of range",
            src.dataset.id
        ))
    })?;
    let eligible = &src.eligible[volume_index];
    if eligible.is_empty() {
        return Err(Error::InsufficientData(format!(
            "dataset {} volume {}: no slices pass the presence threshold",
            src.dataset.id, volume.volume_id
        )));
    }
    let step = eligible.len().div_ceil(k);
    let shots = (0..eligible.len())
        .step_by(step)
        .take(k)
        .map(|i| volume.sample(eligible[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(Task {
        shots,
        source_dataset: src.dataset.id.clone(),
        rule: TaskRule::VolumeBased,
        volume_id: Some(volume.volume_id),
    })
}

/// Draw the tasks of one meta-epoch: `l` weighted dataset choices (with
/// replacement), one task each. A single sequential generator derived from
/// `seed` drives every draw, so the batch is a pure function of
/// `(sources, weights, l, k, rule, seed)`.
pub fn sample_meta_batch(
    sources: &[TaskSource],
    weights: &SamplingWeights,
    l: usize,
    k: usize,
    rule: TaskRule,
    seed: u64,
) -> Result<Vec<Task>> {
    if l == 0 {
        return Err(Error::Config("meta-batch needs at least 1 task".into()));
    }
    require_shots(k)?;
    let w: Vec<f64> = sources
        .iter()
        .map(|s| {
            weights.weight_of(&s.dataset.id).ok_or_else(|| {
                Error::Config(format!("no sampling weight for dataset {}", s.dataset.id))
            })
        })
        .collect::<Result<_>>()?;
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("sampling weights sum to zero over the given sources".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(l);
    for _ in 0..l {
        let r = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = sources.len() - 1;
        for (i, wi) in w.iter().enumerate() {
            acc += wi;
            if r < acc {
                chosen = i;
                break;
            }
        }
        let src = &sources[chosen];
        let task = match rule {
            TaskRule::Standard => sample_standard_with(src, k, &mut rng)?,
            TaskRule::VolumeBased => {
                let usable = src.usable_volumes();
                if usable.is_empty() {
                    return Err(Error::InsufficientData(format!(
                        "dataset {}: no volume has eligible slices",
                        src.dataset.id
                    )));
                }
                let vi = usable[rng.gen_range(0..usable.len())];
                sample_volume_based(src, vi, k)?
            }
        };
        tasks.push(task);
    }
    Ok(tasks)
}

/// Stack samples into `[N,1,H,W]` image and mask batches.
pub fn stack_samples<'a, I>(samples: I) -> Result<(crate::autodiff::Tensor<f32>, crate::autodiff::Tensor<f32>)>
where
    I: IntoIterator<Item = &'a SliceSample>,
{
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut hw: Option<(usize, usize)> = None;
    let mut n = 0usize;
    for s in samples {
        let shape = s.image.shape();
        let this = (shape[1], shape[2]);
        match hw {
            None => hw = Some(this),
            Some(prev) if prev != this => {
                return Err(Error::Dimension(format!(
                    "cannot stack {}x{} slice with {}x{}",
                    this.0, this.1, prev.0, prev.1
                )))
            }
            _ => {}
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
        n += 1;
    }
    let (h, w) = hw.ok_or_else(|| Error::InsufficientData("cannot stack zero samples".into()))?;
    Ok((
        crate::autodiff::Tensor::new(vec![n, 1, h, w], images)?,
        crate::autodiff::Tensor::new(vec![n, 1, h, w], masks)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Volume;
    use proptest::prelude::*;

    /// Dataset of `volumes` volumes, each with `slices` fully-eligible 4x4
    /// slices (masks all ones, threshold 0).
    fn toy_dataset(id: &str, z: u16, volumes: usize, slices: usize) -> Dataset {
        let vols = (0..volumes)
            .map(|v| {
                let n = slices * 16;
                let intensities: Vec<f32> =
                    (0..n).map(|i| (v * 1000 + i) as f32 * 0.01).collect();
                Volume::new(id.into(), v as u32, z, (slices, 4, 4), intensities, vec![1; n])
                    .unwrap()
            })
            .collect();
        Dataset { id: id.into(), family: id.into(), z, threshold: 0, volumes: vols }
    }

    #[test]
    fn standard_task_with_pool_sized_k_takes_the_whole_pool() {
        let d = toy_dataset("a", 1, 2, 3);
        let src = TaskSource::new(&d);
        let task = sample_standard(&src, 6, 1).unwrap();
        let mut got: Vec<(u32, usize)> =
            task.shots.iter().map(|s| (s.volume_id, s.slice_index)).collect();
        got.sort_unstable();
        let want: Vec<(u32, usize)> =
            (0..2).flat_map(|v| (0..3).map(move |s| (v as u32, s))).collect();
        assert_eq!(got, want);
        assert_eq!(task.rule, TaskRule::Standard);
        assert_eq!(task.volume_id, None);
    }

    #[test]
    fn standard_task_is_deterministic_per_seed() {
        let d = toy_dataset("a", 1, 4, 8);
        let src = TaskSource::new(&d);
        let a = sample_standard(&src, 5, 77).unwrap();
        let b = sample_standard(&src, 5, 77).unwrap();
        let key = |t: &Task| -> Vec<(u32, usize)> {
            t.shots.iter().map(|s| (s.volume_id, s.slice_index)).collect()
        };
        assert_eq!(key(&a), key(&b));
        let c = sample_standard(&src, 5, 78).unwrap();
        assert_ne!(key(&a), key(&c));
    }

    #[test]
    fn standard_task_draws_are_uniform() {
        // 1000 draws of 15 shots from a 100-slice pool: every slice's
        // inclusion frequency should sit within +-30% of 15/100.
        let d = toy_dataset("a", 1, 10, 10);
        let src = TaskSource::new(&d);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = vec![0usize; 100];
        for _ in 0..1000 {
            let task = sample_standard_with(&src, 15, &mut rng).unwrap();
            for s in &task.shots {
                counts[s.volume_id as usize * 10 + s.slice_index] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / 1000.0;
            assert!(
                (0.105..=0.195).contains(&freq),
                "slice {i} frequency {freq}"
            );
        }
    }

    #[test]
    fn standard_task_rejects_small_pools() {
        let d = toy_dataset("a", 1, 1, 3);
        let src = TaskSource::new(&d);
        assert!(matches!(
            sample_standard(&src, 4, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn volume_task_steps_over_thirty_slices() {
        let d = toy_dataset("a", 1, 1, 30);
        let src = TaskSource::new(&d);
        let task = sample_volume_based(&src, 0, 15).unwrap();
        let got: Vec<usize> = task.shots.iter().map(|s| s.slice_index).collect();
        let want: Vec<usize> = (0..30).step_by(2).collect();
        assert_eq!(got, want);
        assert_eq!(task.volume_id, Some(0));
        assert_eq!(task.rule, TaskRule::VolumeBased);
    }

    #[test]
    fn volume_task_takes_every_slice_when_counts_match() {
        let d = toy_dataset("a", 1, 1, 15);
        let src = TaskSource::new(&d);
        let task = sample_volume_based(&src, 0, 15).unwrap();
        let got: Vec<usize> = task.shots.iter().map(|s| s.slice_index).collect();
        assert_eq!(got, (0..15).collect::<Vec<_>>());
    }

    #[test]
    fn short_volume_yields_short_task() {
        let d = toy_dataset("a", 1, 1, 10);
        let src = TaskSource::new(&d);
        let task = sample_volume_based(&src, 0, 15).unwrap();
        assert_eq!(task.shots.len(), 10);
        let got: Vec<usize> = task.shots.iter().map(|s| s.slice_index).collect();
        assert_eq!(got, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn volume_task_is_deterministic_without_a_seed() {
        let d = toy_dataset("a", 1, 2, 24);
        let src = TaskSource::new(&d);
        let a = sample_volume_based(&src, 1, 7).unwrap();
        let b = sample_volume_based(&src, 1, 7).unwrap();
        let key = |t: &Task| -> Vec<usize> { t.shots.iter().map(|s| s.slice_index).collect() };
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn volume_task_requires_eligible_slices() {
        let mut d = toy_dataset("a", 1, 1, 4);
        d.threshold = 100; // nothing passes
        let src = TaskSource::new(&d);
        assert!(matches!(
            sample_volume_based(&src, 0, 5),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn weights_are_reciprocal_modality_counts_normalized() {
        let datasets = vec![
            toy_dataset("organ_a", 1, 1, 1),
            toy_dataset("organ_b_m0", 2, 1, 1),
            toy_dataset("organ_b_m1", 2, 1, 1),
        ];
        let w = compute_sampling_weights(&datasets).unwrap();
        assert_eq!(w.weight_of("organ_a"), Some(0.5));
        assert_eq!(w.weight_of("organ_b_m0"), Some(0.25));
        assert_eq!(w.weight_of("organ_b_m1"), Some(0.25));
        let sum: f64 = w.entries().iter().map(|(_, x)| x).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn weights_are_uniform_for_single_modality_organs() {
        let datasets =
            vec![toy_dataset("a", 1, 1, 1), toy_dataset("b", 1, 1, 1), toy_dataset("c", 1, 1, 1)];
        let w = compute_sampling_weights(&datasets).unwrap();
        for d in &datasets {
            assert!((w.weight_of(&d.id).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_dataset_gets_weight_one() {
        let datasets = vec![toy_dataset("only", 1, 1, 1)];
        let w = compute_sampling_weights(&datasets).unwrap();
        assert_eq!(w.weight_of("only"), Some(1.0));
    }

    #[test]
    fn meta_batch_has_l_tasks_of_at_most_k_shots() {
        let d1 = toy_dataset("a", 1, 3, 20);
        let d2 = toy_dataset("b", 1, 3, 9);
        let datasets = vec![d1, d2];
        let weights = compute_sampling_weights(&datasets).unwrap();
        let sources: Vec<TaskSource> = datasets.iter().map(TaskSource::new).collect();
        for rule in [TaskRule::Standard, TaskRule::VolumeBased] {
            let tasks = sample_meta_batch(&sources, &weights, 5, 15, rule, 3).unwrap();
            assert_eq!(tasks.len(), 5);
            for t in &tasks {
                assert!(t.shots.len() <= 15 && !t.shots.is_empty());
                // Shots never mix datasets; volume-based tasks never mix
                // volumes.
                match rule {
                    TaskRule::Standard => assert_eq!(t.volume_id, None),
                    TaskRule::VolumeBased => {
                        let vid = t.volume_id.unwrap();
                        assert!(t.shots.iter().all(|s| s.volume_id == vid));
                        let indices: Vec<usize> =
                            t.shots.iter().map(|s| s.slice_index).collect();
                        assert!(indices.windows(2).all(|p| p[0] < p[1]));
                    }
                }
            }
        }
    }

    #[test]
    fn zero_weight_datasets_are_never_drawn() {
        let d1 = toy_dataset("a", 1, 2, 20);
        let d2 = toy_dataset("b", 1, 2, 20);
        let weights = SamplingWeights {
            entries: vec![("a".into(), 1.0), ("b".into(), 0.0)],
        };
        let datasets = vec![d1, d2];
        let sources: Vec<TaskSource> = datasets.iter().map(TaskSource::new).collect();
        let tasks =
            sample_meta_batch(&sources, &weights, 20, 5, TaskRule::Standard, 9).unwrap();
        assert!(tasks.iter().all(|t| t.source_dataset == "a"));
    }

    #[test]
    fn meta_batches_follow_the_weights_empirically() {
        let datasets = vec![
            toy_dataset("organ_a", 1, 2, 10),
            toy_dataset("organ_b_m0", 2, 2, 10),
            toy_dataset("organ_b_m1", 2, 2, 10),
        ];
        let weights = compute_sampling_weights(&datasets).unwrap();
        let sources: Vec<TaskSource> = datasets.iter().map(TaskSource::new).collect();
        let mut counts = std::collections::HashMap::<String, usize>::new();
        for seed in 0..2000u64 {
            for t in sample_meta_batch(&sources, &weights, 3, 4, TaskRule::Standard, seed).unwrap()
            {
                *counts.entry(t.source_dataset).or_default() += 1;
            }
        }
        let total = 3.0 * 2000.0;
        for (id, want) in [("organ_a", 0.5), ("organ_b_m0", 0.25), ("organ_b_m1", 0.25)] {
            let got = counts[id] as f64 / total;
            assert!(
                (got - want).abs() / want < 0.1,
                "{id}: drawn {got}, weight {want}"
            );
        }
    }

    #[test]
    fn meta_batch_is_deterministic_per_seed() {
        let datasets = vec![toy_dataset("a", 1, 3, 12), toy_dataset("b", 1, 3, 12)];
        let weights = compute_sampling_weights(&datasets).unwrap();
        let sources: Vec<TaskSource> = datasets.iter().map(TaskSource::new).collect();
        let key = |ts: &[Task]| -> Vec<(String, Vec<usize>)> {
            ts.iter()
                .map(|t| {
                    (t.source_dataset.clone(), t.shots.iter().map(|s| s.slice_index).collect())
                })
                .collect()
        };
        let a = sample_meta_batch(&sources, &weights, 4, 6, TaskRule::VolumeBased, 11).unwrap();
        let b = sample_meta_batch(&sources, &weights, 4, 6, TaskRule::VolumeBased, 11).unwrap();
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn stacking_builds_batch_tensors() {
        let d = toy_dataset("a", 1, 1, 3);
        let src = TaskSource::new(&d);
        let task = sample_volume_based(&src, 0, 3).unwrap();
        let (images, masks) = stack_samples(task.shots.iter()).unwrap();
        assert_eq!(images.shape(), &[3, 1, 4, 4]);
        assert_eq!(masks.shape(), &[3, 1, 4, 4]);
        assert!(masks.data().iter().all(|&m| m == 0.0 || m == 1.0));
    }

    proptest! {
        #[test]
        fn stepped_selection_is_balanced(n in 1usize..200, k in 1usize..40) {
            let d = toy_dataset("a", 1, 1, n);
            let src = TaskSource::new(&d);
            let task = sample_volume_based(&src, 0, k).unwrap();
            let count = task.shots.len();
            prop_assert!(count <= k);
            prop_assert!(count <= n);
            if n >= k {
                // Within a factor two of the target, and exact on multiples.
                prop_assert!(2 * count > k, "n={n} k={k} count={count}");
                if n % k == 0 {
                    prop_assert_eq!(count, k);
                }
            } else {
                prop_assert_eq!(count, n);
            }
            // Fixed stride over the eligible list.
            let step = n.div_ceil(k);
            let indices: Vec<usize> = task.shots.iter().map(|s| s.slice_index).collect();
            let expect: Vec<usize> = (0..n).step_by(step).take(k).collect();
            prop_assert_eq!(indices, expect);
        }
    }
}
