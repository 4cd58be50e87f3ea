//! Seeded synthetic nodule/non-nodule volumes.
//!
//! Positives are bright quasi-spherical blobs (random radius 3-8 voxels,
//! random center away from the border, smooth intensity falloff). Negatives
//! mimic vessel-like structures: full-length tubes and thin disc patches.
//! Gaussian noise is added everywhere and each volume is min-max normalized
//! to [0, 1]. Every byte is a pure function of (n, seed, params).

use super::{DatasetManifest, Source, Split, VolumeSample};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub size: usize,
    pub noise_sigma: f64,
    pub positive_prior: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            size: 32,
            noise_sigma: 0.04,
            positive_prior: 0.56,
        }
    }
}

/// Generate `n` labeled volumes. Positive fraction follows the class prior
/// sample by sample, so it concentrates near `positive_prior` for large n.
pub fn synth_nodules(n: usize, seed: u64, params: &SynthParams) -> Result<DatasetManifest> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples, got {n}"
        )));
    }
    if params.size < 16 {
        return Err(Error::InvalidArgument("volume size must be >= 16".into()));
    }
    if !(0.0..=1.0).contains(&params.positive_prior) {
        return Err(Error::InvalidArgument("positive_prior must lie in [0,1]".into()));
    }
    let base = SplitMix64::new(seed).fork(0x73796e7468); // "synth"
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = base.fork(i as u64);
        let label = u8::from(rng.next_f64() < params.positive_prior);
        let voxels = generate_volume(label, params, &mut rng)?;
        samples.push(VolumeSample {
            voxels,
            label,
            id: i as u64,
        });
    }
    Ok(DatasetManifest {
        samples,
        assignments: vec![Split::Train; n],
        seed,
        source: Source::Synthetic,
    })
}

fn generate_volume(label: u8, params: &SynthParams, rng: &mut SplitMix64) -> Result<Tensor<f32>> {
    let s = params.size;
    let mut vol = vec![0.0f64; s * s * s];

    if label == 1 {
        blob(&mut vol, s, rng);
    } else if rng.next_f64() < 0.5 {
        tube(&mut vol, s, rng);
    } else {
        disc(&mut vol, s, rng);
    }

    // additive Gaussian noise, then per-sample min-max into [0, 1]
    let sigma = params.noise_sigma;
    let mut k = 0;
    while k + 1 < vol.len() {
        let (a, b) = rng.next_gaussian_pair();
        vol[k] += sigma * a;
        vol[k + 1] += sigma * b;
        k += 2;
    }
    if k < vol.len() {
        vol[k] += sigma * rng.next_gaussian();
    }

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &vol {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = (hi - lo).max(1e-12);
    let data: Vec<f32> = vol.iter().map(|&v| ((v - lo) / range) as f32).collect();
    Tensor::from_vec(&[s, s, s], data)
}

/// Quasi-spherical bright blob: per-axis radii r * U(0.85, 1.15),
/// r in [3, 8], falloff exp(-2 d^2) in normalized ellipsoid distance.
/// Centers jitter around the volume middle, as cropped candidate boxes
/// center their finding; the jitter margin keeps the blob inside the
/// volume and touching the middle slices.
fn blob(vol: &mut [f64], s: usize, rng: &mut SplitMix64) {
    let r = rng.uniform(3.0, 8.0);
    let radii = [
        r * rng.uniform(0.85, 1.15),
        r * rng.uniform(0.85, 1.15),
        r * rng.uniform(0.85, 1.15),
    ];
    let c = s as f64 / 2.0;
    let center = [
        c + rng.uniform(-1.0, 1.0) * (c - radii[0] - 1.0).min(4.0),
        c + rng.uniform(-1.0, 1.0) * (c - radii[1] - 1.0).min(4.0),
        c + rng.uniform(-1.0, 1.0) * (c - radii[2] - 1.0).min(4.0),
    ];
    for x in 0..s {
        for y in 0..s {
            for z in 0..s {
                let d2 = sq((x as f64 - center[0]) / radii[0])
                    + sq((y as f64 - center[1]) / radii[1])
                    + sq((z as f64 - center[2]) / radii[2]);
                if d2 < 2.56 {
                    vol[(x * s + y) * s + z] += (-2.0 * d2).exp();
                }
            }
        }
    }
}

/// Full-length thin cylinder along a random direction.
fn tube(vol: &mut [f64], s: usize, rng: &mut SplitMix64) {
    let dir = random_unit(rng);
    let c = s as f64 / 2.0;
    let anchor = [
        c + rng.uniform(-6.0, 6.0),
        c + rng.uniform(-6.0, 6.0),
        c + rng.uniform(-6.0, 6.0),
    ];
    let radius = rng.uniform(1.0, 2.2);
    for x in 0..s {
        for y in 0..s {
            for z in 0..s {
                let p = [x as f64 - anchor[0], y as f64 - anchor[1], z as f64 - anchor[2]];
                let along = p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2];
                let d2 = sq(p[0] - along * dir[0])
                    + sq(p[1] - along * dir[1])
                    + sq(p[2] - along * dir[2]);
                let t2 = d2 / sq(radius);
                if t2 < 4.0 {
                    vol[(x * s + y) * s + z] += (-2.0 * t2).exp();
                }
            }
        }
    }
}

/// Thin disc patch: plate-like structure of limited extent.
fn disc(vol: &mut [f64], s: usize, rng: &mut SplitMix64) {
    let normal = random_unit(rng);
    let c = s as f64 / 2.0;
    let center = [
        c + rng.uniform(-5.0, 5.0),
        c + rng.uniform(-5.0, 5.0),
        c + rng.uniform(-5.0, 5.0),
    ];
    let thickness = rng.uniform(0.6, 1.2);
    let radius = rng.uniform(5.0, 9.0);
    for x in 0..s {
        for y in 0..s {
            for z in 0..s {
                let p = [x as f64 - center[0], y as f64 - center[1], z as f64 - center[2]];
                let off = p[0] * normal[0] + p[1] * normal[1] + p[2] * normal[2];
                let in_plane2 = sq(p[0]) + sq(p[1]) + sq(p[2]) - sq(off);
                let radial = in_plane2 / sq(radius);
                if radial < 1.0 && off.abs() < 3.0 * thickness {
                    let edge = 1.0 - radial;
                    vol[(x * s + y) * s + z] += (-2.0 * sq(off / thickness)).exp() * edge;
                }
            }
        }
    }
}

fn sq(v: f64) -> f64 {
    v * v
}

fn random_unit(rng: &mut SplitMix64) -> [f64; 3] {
    loop {
        let v = [
            rng.uniform(-1.0, 1.0),
            rng.uniform(-1.0, 1.0),
            rng.uniform(-1.0, 1.0),
        ];
        let n2 = sq(v[0]) + sq(v[1]) + sq(v[2]);
        if n2 > 1e-4 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seeds_give_bit_identical_datasets() {
        let p = SynthParams::default();
        let a = synth_nodules(20, 99, &p).unwrap();
        let b = synth_nodules(20, 99, &p).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.label, y.label);
            assert_eq!(
                x.voxels.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                y.voxels.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        let c = synth_nodules(20, 100, &p).unwrap();
        assert_ne!(
            a.samples[0].voxels.data(),
            c.samples[0].voxels.data()
        );
    }

    #[test]
    fn positive_fraction_stays_near_prior() {
        let p = SynthParams::default();
        let m = synth_nodules(1000, 7, &p).unwrap();
        let f = m.positive_fraction();
        assert!((0.53..=0.59).contains(&f), "positive fraction {f}");
    }

    #[test]
    fn samples_satisfy_range_and_label_invariants() {
        let p = SynthParams::default();
        let m = synth_nodules(30, 3, &p).unwrap();
        for s in &m.samples {
            s.validate().unwrap();
            assert_eq!(s.voxels.dims(), &[32, 32, 32]);
        }
    }

    #[test]
    fn positives_are_brighter_on_average() {
        let p = SynthParams::default();
        let m = synth_nodules(200, 11, &p).unwrap();
        let mean_of = |label: u8| {
            let picked: Vec<f64> = m
                .samples
                .iter()
                .filter(|s| s.label == label)
                .map(|s| {
                    s.voxels.data().iter().map(|&v| v as f64).sum::<f64>()
                        / s.voxels.numel() as f64
                })
                .collect();
            picked.iter().sum::<f64>() / picked.len() as f64
        };
        let (pos, neg) = (mean_of(1), mean_of(0));
        assert!(
            pos > neg + 0.005,
            "positive mean {pos} must clearly exceed negative mean {neg}"
        );
    }

    #[test]
    fn rejects_degenerate_requests() {
        let p = SynthParams::default();
        assert!(synth_nodules(1, 0, &p).is_err());
        let bad = SynthParams {
            positive_prior: 1.5,
            ..p
        };
        assert!(synth_nodules(10, 0, &bad).is_err());
    }
}
