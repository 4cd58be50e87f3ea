//! Dataset handling: IDX images for 2D experiments, the seeded synthetic
//! volume generator standing in for clinical CT data, stratified splits,
//! and slice extraction.

pub mod idx;
pub mod synth;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Idx,
    Synthetic,
}

/// One labeled sample: a [0,1]-normalized volume or image.
#[derive(Debug, Clone)]
pub struct VolumeSample {
    pub voxels: Tensor<f32>,
    /// 1 = nodule, 0 = non-nodule.
    pub label: u8,
    pub id: u64,
}

impl VolumeSample {
    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::InvalidArgument("label must be binary".into()));
        }
        if self.voxels.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(
                "voxel values must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// A typed handle over an in-memory dataset plus split assignments.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub samples: Vec<VolumeSample>,
    pub assignments: Vec<Split>,
    pub seed: u64,
    pub source: Source,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positive_fraction(&self) -> f64 {
        let pos = self.samples.iter().filter(|s| s.label == 1).count();
        pos as f64 / self.samples.len().max(1) as f64
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| (s == split).then_some(i))
            .collect()
    }

    /// Stack the given samples into a batch tensor [N, spatial...] and the
    /// label vector, optionally reducing 3D volumes to their middle slice
    /// along the given axis.
    pub fn batch(&self, indices: &[usize], slice_axis: Option<usize>) -> Result<(Tensor<f32>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let first = match slice_axis {
            Some(axis) => middle_slice(&self.samples[indices[0]], axis)?.voxels,
            None => self.samples[indices[0]].voxels.clone(),
        };
        let sp = first.dims().to_vec();
        let mut dims = vec![indices.len()];
        dims.extend_from_slice(&sp);
        let mut data = Vec::with_capacity(indices.len() * first.numel());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let v = match slice_axis {
                Some(axis) => middle_slice(&self.samples[i], axis)?.voxels,
                None => self.samples[i].voxels.clone(),
            };
            if v.dims() != sp {
                return Err(Error::shape("batch", format!("{sp:?}"), v.shape()));
            }
            data.extend_from_slice(v.data());
            labels.push(self.samples[i].label as usize);
        }
        Ok((Tensor::from_vec(&dims, data)?, labels))
    }
}

/// Slice a 3D sample at index floor(extent/2) along `axis`, keeping the label.
pub fn middle_slice(sample: &VolumeSample, axis: usize) -> Result<VolumeSample> {
    let dims = sample.voxels.dims();
    if dims.len() != 3 {
        return Err(Error::shape("middle_slice", "3D sample", sample.voxels.shape()));
    }
    if axis >= 3 {
        return Err(Error::InvalidArgument(format!("axis {axis} out of range")));
    }
    let mid = dims[axis] / 2;
    let out_dims: Vec<usize> = (0..3).filter(|&d| d != axis).map(|d| dims[d]).collect();
    let mut data = Vec::with_capacity(out_dims.iter().product());
    let strides = sample.voxels.shape().strides();
    for a in 0..out_dims[0] {
        for b in 0..out_dims[1] {
            let mut idx = [0usize; 3];
            idx[axis] = mid;
            let mut rest = [a, b].into_iter();
            for d in 0..3 {
                if d != axis {
                    idx[d] = rest.next().unwrap();
                }
            }
            let off = idx[0] * strides[0] + idx[1] * strides[1] + idx[2] * strides[2];
            data.push(sample.voxels.data()[off]);
        }
    }
    Ok(VolumeSample {
        voxels: Tensor::from_vec(&out_dims, data)?,
        label: sample.label,
        id: sample.id,
    })
}

/// Seeded stratified split. Fractions must sum to 1; split sizes follow
/// largest-remainder rounding of the totals, and the per-split class ratios
/// stay within one sample of the global ratio.
pub fn split(manifest: &mut DatasetManifest, fractions: (f64, f64, f64), seed: u64) -> Result<()> {
    let (ft, fv, fs) = fractions;
    if !(0.0..=1.0).contains(&ft) || !(0.0..=1.0).contains(&fv) || !(0.0..=1.0).contains(&fs) {
        return Err(Error::InvalidArgument("fractions must lie in [0, 1]".into()));
    }
    if (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "fractions must sum to 1, got {}",
            ft + fv + fs
        )));
    }
    let n = manifest.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }

    // split sizes by largest remainder over the totals
    let sizes = largest_remainder(n, &[ft, fv, fs]);

    // per-split positive counts: rounded to the global ratio, corrected to
    // the exact class total
    let pos_total = manifest.samples.iter().filter(|s| s.label == 1).count();
    let pos_counts = apportion_class(pos_total, n, &sizes);

    let mut rng = SplitMix64::new(seed).fork(0x73706c6974); // "split"
    let mut pos_idx: Vec<usize> = (0..n).filter(|&i| manifest.samples[i].label == 1).collect();
    let mut neg_idx: Vec<usize> = (0..n).filter(|&i| manifest.samples[i].label == 0).collect();
    rng.shuffle(&mut pos_idx);
    rng.shuffle(&mut neg_idx);

    let mut assignments = vec![Split::Train; n];
    let splits = [Split::Train, Split::Val, Split::Test];
    let mut p = 0usize;
    let mut q = 0usize;
    for (k, &split_kind) in splits.iter().enumerate() {
        let take_pos = pos_counts[k];
        let take_neg = sizes[k] - take_pos;
        for &i in &pos_idx[p..p + take_pos] {
            assignments[i] = split_kind;
        }
        for &i in &neg_idx[q..q + take_neg] {
            assignments[i] = split_kind;
        }
        p += take_pos;
        q += take_neg;
    }
    manifest.assignments = assignments;
    manifest.seed = seed;
    Ok(())
}

fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let mut leftover = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &k in &order {
        if leftover == 0 {
            break;
        }
        sizes[k] += 1;
        leftover -= 1;
    }
    sizes
}

/// Positive-class counts per split: round to the global ratio, then adjust
/// to hit the exact class total without exceeding any split size.
fn apportion_class(pos_total: usize, n: usize, sizes: &[usize]) -> Vec<usize> {
    let ratio = pos_total as f64 / n as f64;
    let mut counts: Vec<usize> = sizes
        .iter()
        .map(|&s| ((s as f64 * ratio).round() as usize).min(s))
        .collect();
    let mut diff = counts.iter().sum::<usize>() as isize - pos_total as isize;
    // shed or add one at a time, preferring the split whose count is
    // farthest from its exact share
    while diff != 0 {
        let mut best = 0usize;
        let mut best_err = f64::MIN;
        for (k, &c) in counts.iter().enumerate() {
            let exact = sizes[k] as f64 * ratio;
            let err = if diff > 0 {
                c as f64 - exact
            } else {
                exact - c as f64
            };
            let feasible = if diff > 0 { c > 0 } else { c < sizes[k] };
            if feasible && err > best_err {
                best_err = err;
                best = k;
            }
        }
        if diff > 0 {
            counts[best] -= 1;
            diff -= 1;
        } else {
            counts[best] += 1;
            diff += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_manifest(n: usize, pos_every: usize) -> DatasetManifest {
        let samples = (0..n)
            .map(|i| VolumeSample {
                voxels: Tensor::filled(&[4, 4, 4], 0.5).unwrap(),
                label: u8::from(i % pos_every == 0),
                id: i as u64,
            })
            .collect();
        DatasetManifest {
            samples,
            assignments: vec![Split::Train; n],
            seed: 0,
            source: Source::Synthetic,
        }
    }

    #[test]
    fn all_train_split() {
        let mut m = tiny_manifest(10, 2);
        split(&mut m, (1.0, 0.0, 0.0), 1).unwrap();
        assert!(m.assignments.iter().all(|&s| s == Split::Train));
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let mut m = tiny_manifest(100, 2);
        split(&mut m, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(m.indices_of(Split::Train).len(), 80);
        assert_eq!(m.indices_of(Split::Val).len(), 10);
        assert_eq!(m.indices_of(Split::Test).len(), 10);
    }

    #[test]
    fn split_is_stratified_within_one_sample() {
        for seed in [1u64, 2, 3] {
            let mut m = tiny_manifest(100, 3); // 34% positive
            split(&mut m, (0.7, 0.15, 0.15), seed).unwrap();
            let global = m.positive_fraction();
            for kind in [Split::Train, Split::Val, Split::Test] {
                let idx = m.indices_of(kind);
                let pos = idx.iter().filter(|&&i| m.samples[i].label == 1).count();
                let expect = global * idx.len() as f64;
                assert!(
                    (pos as f64 - expect).abs() <= 1.0,
                    "{kind:?}: {pos} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let mut m = tiny_manifest(10, 2);
        assert!(split(&mut m, (0.5, 0.2, 0.2), 1).is_err());
        assert!(split(&mut m, (1.2, -0.1, -0.1), 1).is_err());
    }

    #[test]
    fn middle_slice_picks_center_index() {
        let mut vox = Tensor::<f32>::zeros(&[32, 32, 32]).unwrap();
        // marker at (16, 3, 4)
        vox.data_mut()[(16 * 32 + 3) * 32 + 4] = 1.0;
        let s = VolumeSample { voxels: vox, label: 1, id: 0 };
        let sl = middle_slice(&s, 0).unwrap();
        assert_eq!(sl.voxels.dims(), &[32, 32]);
        assert_eq!(sl.voxels.data()[3 * 32 + 4], 1.0);
        assert_eq!(sl.voxels.data().iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(sl.label, 1);
    }

    #[test]
    fn middle_slice_of_symmetric_volume_is_flip_invariant() {
        let mut rng = crate::rng::SplitMix64::new(70);
        let mut vox = Tensor::<f32>::zeros(&[6, 6, 6]).unwrap();
        // symmetric under (y, z) swap
        for x in 0..6 {
            for y in 0..6 {
                for z in 0..=y {
                    let v = rng.next_f64() as f32;
                    vox.data_mut()[(x * 6 + y) * 6 + z] = v;
                    vox.data_mut()[(x * 6 + z) * 6 + y] = v;
                }
            }
        }
        let s = VolumeSample { voxels: vox, label: 0, id: 0 };
        let sl = middle_slice(&s, 0).unwrap();
        for y in 0..6 {
            for z in 0..6 {
                assert_eq!(sl.voxels.data()[y * 6 + z], sl.voxels.data()[z * 6 + y]);
            }
        }
    }

    #[test]
    fn middle_slice_rejects_bad_axis_and_2d() {
        let s = VolumeSample {
            voxels: Tensor::filled(&[4, 4, 4], 0.1).unwrap(),
            label: 0,
            id: 0,
        };
        assert!(middle_slice(&s, 3).is_err());
        let flat = middle_slice(&s, 0).unwrap();
        assert!(middle_slice(&flat, 0).is_err());
    }
}
