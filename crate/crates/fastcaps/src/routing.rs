//! Dynamic routing by agreement, with the consistent (per-location) variant.
//!
//! Children vote for parents through learned transformation matrices; the
//! routing loop then tunes nonnegative coefficients, softmax-normalized per
//! child over parents, toward the parents that agree with the votes. The
//! consistent variant constrains all children at one pixel location to share
//! a coefficient row, shrinking the coefficient table from I*J to G*J.
//!
//! Identity grouping (every child its own group) reproduces the original
//! algorithm bit for bit; [`route_original`] is the ungrouped reference used
//! as the benchmark baseline.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::tape::squash_forward;
use crate::tensor::{ops, Tensor};

/// Prediction vectors û[child i, parent j, parent dim].
#[derive(Debug, Clone)]
pub struct PredictionTensor<T: Scalar> {
    values: Tensor<T>,
}

impl<T: Scalar> PredictionTensor<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.dims().len() != 3 {
            return Err(Error::shape("PredictionTensor", "[I, J, D]", values.shape()));
        }
        values.check_finite("PredictionTensor")?;
        Ok(PredictionTensor { values })
    }

    pub fn children(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn parents(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.values
    }
}

/// Assignment of children to coefficient groups (pixel locations).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingGrouping {
    group_of: Vec<usize>,
    groups: usize,
}

impl RoutingGrouping {
    /// Each child in its own group: the original routing.
    pub fn identity(children: usize) -> Self {
        RoutingGrouping {
            group_of: (0..children).collect(),
            groups: children,
        }
    }

    /// Children laid out location-major (`capsules_per_location` consecutive
    /// children share a pixel location). loc(i) = i / capsules_per_location.
    pub fn by_location(locations: usize, capsules_per_location: usize) -> Self {
        RoutingGrouping {
            group_of: (0..locations * capsules_per_location)
                .map(|i| i / capsules_per_location)
                .collect(),
            groups: locations,
        }
    }

    pub fn from_map(group_of: Vec<usize>) -> Result<Self> {
        if group_of.is_empty() {
            return Err(Error::InvalidArgument("empty group map".into()));
        }
        let groups = group_of.iter().max().unwrap() + 1;
        let mut seen = vec![false; groups];
        for &g in &group_of {
            seen[g] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::InvalidArgument(
                "group ids must cover 0..G with no empty group".into(),
            ));
        }
        Ok(RoutingGrouping { group_of, groups })
    }

    pub fn children(&self) -> usize {
        self.group_of.len()
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn group_of(&self) -> &[usize] {
        &self.group_of
    }

    pub fn is_identity(&self) -> bool {
        self.groups == self.group_of.len()
    }
}

/// Coefficient table state after routing.
#[derive(Debug, Clone)]
pub struct RoutingState<T: Scalar> {
    /// Logits b [G, J] after the final agreement update.
    pub logits: Tensor<T>,
    /// Coefficients c [G, J] used to form the returned output.
    pub coefficients: Tensor<T>,
    pub iterations: usize,
    /// Per-iteration snapshots when tracing is requested.
    pub trace: Vec<RoutingTraceStep<T>>,
}

/// One traced routing iteration: logits after the agreement update,
/// the coefficients used this iteration, and the resulting activations.
#[derive(Debug, Clone)]
pub struct RoutingTraceStep<T: Scalar> {
    pub logits: Tensor<T>,
    pub coefficients: Tensor<T>,
    pub activations: Tensor<T>,
    pub pre_squash: Tensor<T>,
}

/// Parent capsule activations.
#[derive(Debug, Clone)]
pub struct CapsuleOutput<T: Scalar> {
    /// v [J, D], each row with norm < 1.
    pub activations: Tensor<T>,
    /// Pre-squash weighted sums s [J, D].
    pub pre_squash: Tensor<T>,
}

/// Squash nonlinearity over the last axis:
/// v = (||s||^2 / (1 + ||s||^2)) * s / ||s||_eps.
pub fn squash<T: Scalar>(s: &Tensor<T>) -> Tensor<T> {
    squash_forward(s)
}

/// û[i,j,:] = u[i,:] @ W[i,j,:,:]
pub fn predict_votes<T: Scalar>(u: &Tensor<T>, w: &Tensor<T>) -> Result<PredictionTensor<T>> {
    let [i_cnt, d_in] = *u.dims() else {
        return Err(Error::shape("predict_votes u", "[I, D_in]", u.shape()));
    };
    let [wi, j_cnt, wd, d_out] = *w.dims() else {
        return Err(Error::shape("predict_votes W", "[I, J, D_in, D_out]", w.shape()));
    };
    if wi != i_cnt || wd != d_in {
        return Err(Error::shape(
            "predict_votes",
            format!("W [{i_cnt}, J, {d_in}, D_out]"),
            w.shape(),
        ));
    }
    let lhs = u.reshaped(&[i_cnt, 1, 1, d_in])?;
    let out = ops::matmul_batched(&lhs, w)?;
    PredictionTensor::new(out.reshaped(&[i_cnt, j_cnt, d_out])?)
}

/// Number of distinct (group, parent) coefficients: G * J.
pub fn coefficient_count(grouping: &RoutingGrouping, parents: usize) -> usize {
    grouping.groups() * parents
}

fn check_route_args<T: Scalar>(
    votes: &PredictionTensor<T>,
    grouping: &RoutingGrouping,
    iterations: usize,
) -> Result<()> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("routing needs >= 1 iteration".into()));
    }
    if grouping.children() != votes.children() {
        return Err(Error::shape(
            "route grouping",
            format!("{} children", votes.children()),
            grouping.children(),
        ));
    }
    Ok(())
}

/// One full routing pass over a single sample's votes.
///
/// b starts at zero (uniform coefficients); each iteration computes
/// c = softmax(b) over parents, s_j = Σ_i c[g(i), j] û_{j|i}, v = squash(s),
/// and b[g, j] += Σ_{i in g} û_{j|i} · v_j.
pub fn route<T: Scalar>(
    votes: &PredictionTensor<T>,
    grouping: &RoutingGrouping,
    iterations: usize,
) -> Result<(CapsuleOutput<T>, RoutingState<T>)> {
    route_impl(votes, grouping, iterations, false)
}

/// [`route`] with per-iteration (logits, coefficients) snapshots retained.
pub fn route_traced<T: Scalar>(
    votes: &PredictionTensor<T>,
    grouping: &RoutingGrouping,
    iterations: usize,
) -> Result<(CapsuleOutput<T>, RoutingState<T>)> {
    route_impl(votes, grouping, iterations, true)
}

fn route_impl<T: Scalar>(
    votes: &PredictionTensor<T>,
    grouping: &RoutingGrouping,
    iterations: usize,
    trace: bool,
) -> Result<(CapsuleOutput<T>, RoutingState<T>)> {
    check_route_args(votes, grouping, iterations)?;
    let (i_cnt, j_cnt, d) = (votes.children(), votes.parents(), votes.dim());
    let g_cnt = grouping.groups();
    let group_of = grouping.group_of();
    let vd = votes.tensor().data();

    let mut b = Tensor::<T>::zeros(&[g_cnt, j_cnt])?;
    let mut c = Tensor::<T>::zeros(&[g_cnt, j_cnt])?;
    let mut s = Tensor::<T>::zeros(&[j_cnt, d])?;
    let mut v = Tensor::<T>::zeros(&[j_cnt, d])?;
    let mut history = Vec::new();

    for _ in 0..iterations {
        c = ops::softmax(&b, 1)?;

        // s_j = Σ_i c[g(i), j] û_{j|i}
        s.data_mut().iter_mut().for_each(|x| *x = T::ZERO);
        {
            let cd = c.data();
            let sd = s.data_mut();
            for i in 0..i_cnt {
                let g = group_of[i];
                for j in 0..j_cnt {
                    let cij = cd[g * j_cnt + j];
                    let src = (i * j_cnt + j) * d;
                    let dst = j * d;
                    for k in 0..d {
                        sd[dst + k] += cij * vd[src + k];
                    }
                }
            }
        }
        v = squash_forward(&s);

        // b[g, j] += Σ_{i in g} û_{j|i} · v_j  (ascending child order)
        {
            let bd = b.data_mut();
            let vj = v.data();
            for i in 0..i_cnt {
                let g = group_of[i];
                for j in 0..j_cnt {
                    let src = (i * j_cnt + j) * d;
                    let mut dot = T::ZERO;
                    for k in 0..d {
                        dot += vd[src + k] * vj[j * d + k];
                    }
                    bd[g * j_cnt + j] += dot;
                }
            }
        }

        if trace {
            history.push(RoutingTraceStep {
                logits: b.clone(),
                coefficients: c.clone(),
                activations: v.clone(),
                pre_squash: s.clone(),
            });
        }
    }

    Ok((
        CapsuleOutput {
            activations: v,
            pre_squash: s,
        },
        RoutingState {
            logits: b,
            coefficients: c,
            iterations,
            trace: history,
        },
    ))
}

/// Original ungrouped dynamic routing: one coefficient row per child.
/// This is the baseline implementation the benchmarks compare against;
/// it carries no grouping indirection at all.
pub fn route_original<T: Scalar>(
    votes: &PredictionTensor<T>,
    iterations: usize,
) -> Result<(CapsuleOutput<T>, RoutingState<T>)> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("routing needs >= 1 iteration".into()));
    }
    let (i_cnt, j_cnt, d) = (votes.children(), votes.parents(), votes.dim());
    let vd = votes.tensor().data();

    let mut b = Tensor::<T>::zeros(&[i_cnt, j_cnt])?;
    let mut c = Tensor::<T>::zeros(&[i_cnt, j_cnt])?;
    let mut s = Tensor::<T>::zeros(&[j_cnt, d])?;
    let mut v = Tensor::<T>::zeros(&[j_cnt, d])?;

    for _ in 0..iterations {
        c = ops::softmax(&b, 1)?;
        s.data_mut().iter_mut().for_each(|x| *x = T::ZERO);
        {
            let cd = c.data();
            let sd = s.data_mut();
            for i in 0..i_cnt {
                for j in 0..j_cnt {
                    let cij = cd[i * j_cnt + j];
                    let src = (i * j_cnt + j) * d;
                    let dst = j * d;
                    for k in 0..d {
                        sd[dst + k] += cij * vd[src + k];
                    }
                }
            }
        }
        v = squash_forward(&s);
        {
            let bd = b.data_mut();
            let vj = v.data();
            for i in 0..i_cnt {
                for j in 0..j_cnt {
                    let src = (i * j_cnt + j) * d;
                    let mut dot = T::ZERO;
                    for k in 0..d {
                        dot += vd[src + k] * vj[j * d + k];
                    }
                    bd[i * j_cnt + j] += dot;
                }
            }
        }
    }

    Ok((
        CapsuleOutput {
            activations: v,
            pre_squash: s,
        },
        RoutingState {
            logits: b,
            coefficients: c,
            iterations,
            trace: Vec::new(),
        },
    ))
}

/// Route every sample of a batched vote tensor [N, I, J, D] and return the
/// final coefficients [N, G, J]. The coefficients feed the differentiable
/// weighted-sum node as constants.
pub fn route_batch_coefficients<T: Scalar>(
    votes: &Tensor<T>,
    grouping: &RoutingGrouping,
    iterations: usize,
) -> Result<Tensor<T>> {
    let [n, i_cnt, j_cnt, d] = *votes.dims() else {
        return Err(Error::shape("route_batch votes", "[N, I, J, D]", votes.shape()));
    };
    let g_cnt = grouping.groups();
    let mut out = Tensor::zeros(&[n, g_cnt, j_cnt])?;
    let per = i_cnt * j_cnt * d;
    for nn in 0..n {
        let sample = Tensor::from_vec(
            &[i_cnt, j_cnt, d],
            votes.data()[nn * per..(nn + 1) * per].to_vec(),
        )?;
        let (_, state) = route(&PredictionTensor::new(sample)?, grouping, iterations)?;
        out.data_mut()[nn * g_cnt * j_cnt..(nn + 1) * g_cnt * j_cnt]
            .copy_from_slice(state.coefficients.data());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_votes(i: usize, j: usize, d: usize, rng: &mut SplitMix64) -> PredictionTensor<f64> {
        let data = (0..i * j * d).map(|_| rng.uniform(-1.5, 1.5)).collect();
        PredictionTensor::new(Tensor::from_vec(&[i, j, d], data).unwrap()).unwrap()
    }

    #[test]
    fn single_parent_gets_everything() {
        // J = 1: softmax over one parent is 1, so v = squash(sum of votes)
        let mut rng = SplitMix64::new(20);
        let votes = random_votes(5, 1, 3, &mut rng);
        let (out, state) = route(&votes, &RoutingGrouping::identity(5), 3).unwrap();
        assert!(state.coefficients.data().iter().all(|&c| c == 1.0));
        let mut sum = vec![0.0; 3];
        for i in 0..5 {
            for k in 0..3 {
                sum[k] += votes.tensor().data()[i * 3 + k];
            }
        }
        let expect = squash(&Tensor::from_vec(&[1, 3], sum).unwrap());
        for (a, b) in out.activations.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn first_iteration_coefficients_are_uniform() {
        let mut rng = SplitMix64::new(21);
        let votes = random_votes(4, 3, 2, &mut rng);
        let (_, state) = route_traced(&votes, &RoutingGrouping::identity(4), 1).unwrap();
        // with a single iteration the returned c is softmax(0) = 1/J
        for &c in state.coefficients.data() {
            assert!((c - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(state.trace.len(), 1);
        assert_eq!(state.trace[0].activations.dims(), &[3, 2]);
    }

    #[test]
    fn coefficients_stay_normalized_across_iterations() {
        let mut rng = SplitMix64::new(22);
        for _ in 0..50 {
            let (i, j, d) = (
                1 + rng.next_below(16) as usize,
                1 + rng.next_below(6) as usize,
                1 + rng.next_below(8) as usize,
            );
            let votes = random_votes(i, j, d, &mut rng);
            let grouping = RoutingGrouping::identity(i);
            let iters = 1 + rng.next_below(5) as usize;
            let (out, state) = route_traced(&votes, &grouping, iters).unwrap();
            for step in &state.trace {
                for row in step.coefficients.data().chunks(j) {
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                    assert!(row.iter().all(|&v| v >= 0.0));
                }
            }
            for row in out.activations.data().chunks(d) {
                let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(norm < 1.0);
            }
        }
    }

    #[test]
    fn identity_grouping_is_bit_identical_to_original() {
        let mut rng = SplitMix64::new(23);
        for _ in 0..20 {
            let (i, j, d) = (
                1 + rng.next_below(32) as usize,
                1 + rng.next_below(5) as usize,
                1 + rng.next_below(10) as usize,
            );
            let votes = random_votes(i, j, d, &mut rng);
            let (out_g, st_g) = route(&votes, &RoutingGrouping::identity(i), 3).unwrap();
            let (out_o, st_o) = route_original(&votes, 3).unwrap();
            assert_eq!(out_g.activations.data(), out_o.activations.data());
            assert_eq!(out_g.pre_squash.data(), out_o.pre_squash.data());
            assert_eq!(st_g.logits.data(), st_o.logits.data());
            assert_eq!(st_g.coefficients.data(), st_o.coefficients.data());
        }
    }

    #[test]
    fn singleton_location_grouping_equals_identity() {
        let mut rng = SplitMix64::new(24);
        let votes = random_votes(64, 2, 16, &mut rng);
        let by_loc = RoutingGrouping::by_location(64, 1);
        assert!(by_loc.is_identity());
        let (a, _) = route(&votes, &by_loc, 3).unwrap();
        let (b, _) = route(&votes, &RoutingGrouping::identity(64), 3).unwrap();
        assert_eq!(a.activations.data(), b.activations.data());
    }

    #[test]
    fn parent_permutation_equivariance() {
        let mut rng = SplitMix64::new(25);
        let (i, j, d) = (6, 4, 3);
        let votes = random_votes(i, j, d, &mut rng);
        let perm = [2usize, 0, 3, 1];
        // permute parents in the vote tensor
        let mut permuted = vec![0.0; i * j * d];
        for ii in 0..i {
            for (jj_new, &jj_old) in perm.iter().enumerate() {
                for k in 0..d {
                    permuted[(ii * j + jj_new) * d + k] = votes.tensor().data()[(ii * j + jj_old) * d + k];
                }
            }
        }
        let votes_p =
            PredictionTensor::new(Tensor::from_vec(&[i, j, d], permuted).unwrap()).unwrap();
        let grouping = RoutingGrouping::identity(i);
        let (out_a, st_a) = route(&votes, &grouping, 3).unwrap();
        let (out_b, st_b) = route(&votes_p, &grouping, 3).unwrap();
        for (jj_new, &jj_old) in perm.iter().enumerate() {
            for k in 0..d {
                let a = out_a.activations.data()[jj_old * d + k];
                let b = out_b.activations.data()[jj_new * d + k];
                assert!((a - b).abs() < 1e-12);
            }
            for ii in 0..i {
                let a = st_a.coefficients.data()[ii * j + jj_old];
                let b = st_b.coefficients.data()[ii * j + jj_new];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unanimous_votes_raise_agreement_monotonically() {
        // all children vote identically for parent 0 and randomly elsewhere:
        // c[:, 0] must be non-decreasing across iterations
        let mut rng = SplitMix64::new(26);
        let (i, j, d) = (8, 3, 4);
        let shared: Vec<f64> = (0..d).map(|_| rng.uniform(0.5, 1.0)).collect();
        let mut data = vec![0.0; i * j * d];
        for ii in 0..i {
            for jj in 0..j {
                for k in 0..d {
                    data[(ii * j + jj) * d + k] = if jj == 0 {
                        shared[k]
                    } else {
                        rng.uniform(-0.5, 0.5)
                    };
                }
            }
        }
        let votes = PredictionTensor::new(Tensor::from_vec(&[i, j, d], data).unwrap()).unwrap();
        let (_, state) = route_traced(&votes, &RoutingGrouping::identity(i), 5).unwrap();
        for ii in 0..i {
            let mut prev = 0.0;
            for (it, step) in state.trace.iter().enumerate() {
                let cur = step.coefficients.data()[ii * j];
                assert!(
                    cur >= prev - 1e-12,
                    "child {ii} iteration {it}: {cur} < {prev}"
                );
                prev = cur;
            }
        }
    }

    #[test]
    fn coefficient_count_matches_paper_reductions() {
        // original 2D: 2048 children, identity -> 4096; fast: 64 groups -> 128
        let original = RoutingGrouping::identity(2048);
        let fast = RoutingGrouping::by_location(64, 1);
        assert_eq!(coefficient_count(&original, 2), 4096);
        assert_eq!(coefficient_count(&fast, 2), 128);
        assert_eq!(
            coefficient_count(&original, 2) / coefficient_count(&fast, 2),
            32
        );
        // grouped original: 2048 children in 64 location groups of 32
        let grouped = RoutingGrouping::by_location(64, 32);
        assert_eq!(grouped.children(), 2048);
        assert_eq!(coefficient_count(&grouped, 2), 128);
        // 3D: 23328 vs 512 children
        let r = coefficient_count(&RoutingGrouping::identity(23328), 2) as f64
            / coefficient_count(&RoutingGrouping::identity(512), 2) as f64;
        assert!((r - 45.5625).abs() < 1e-12);
        // degenerate
        assert_eq!(coefficient_count(&RoutingGrouping::identity(1), 1), 1);
    }

    #[test]
    fn predict_votes_identity_and_hand_case() {
        // identity W: every vote equals the input capsule
        let (i, j, d) = (3, 2, 4);
        let mut w = Tensor::<f64>::zeros(&[i, j, d, d]).unwrap();
        for ii in 0..i {
            for jj in 0..j {
                for k in 0..d {
                    w.data_mut()[((ii * j + jj) * d + k) * d + k] = 1.0;
                }
            }
        }
        let mut rng = SplitMix64::new(27);
        let u = Tensor::from_vec(&[i, d], (0..i * d).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .unwrap();
        let votes = predict_votes(&u, &w).unwrap();
        for ii in 0..i {
            for jj in 0..j {
                for k in 0..d {
                    assert_eq!(
                        votes.tensor().data()[(ii * 2 + jj) * d + k],
                        u.data()[ii * d + k]
                    );
                }
            }
        }

        // I=1, J=1, D_in=2, D_out=1, W = [1, 1], u = [2, 3] -> û = [5]
        let w = Tensor::from_vec(&[1, 1, 2, 1], vec![1.0, 1.0]).unwrap();
        let u = Tensor::from_vec(&[1, 2], vec![2.0, 3.0]).unwrap();
        let votes = predict_votes(&u, &w).unwrap();
        assert_eq!(votes.tensor().data(), &[5.0]);
    }

    #[test]
    fn predict_votes_fast2d_shape() {
        let u = Tensor::<f32>::zeros(&[64, 256]).unwrap();
        let w = Tensor::<f32>::zeros(&[64, 2, 256, 16]).unwrap();
        let votes = predict_votes(&u, &w).unwrap();
        assert_eq!(votes.tensor().dims(), &[64, 2, 16]);
    }

    #[test]
    fn route_rejects_bad_arguments() {
        let mut rng = SplitMix64::new(28);
        let votes = random_votes(4, 2, 3, &mut rng);
        assert!(route(&votes, &RoutingGrouping::identity(4), 0).is_err());
        assert!(route(&votes, &RoutingGrouping::identity(5), 3).is_err());
        assert!(RoutingGrouping::from_map(vec![]).is_err());
        assert!(RoutingGrouping::from_map(vec![0, 2]).is_err()); // group 1 empty
        assert!(RoutingGrouping::from_map(vec![0, 1, 1, 0]).is_ok());
    }
}
