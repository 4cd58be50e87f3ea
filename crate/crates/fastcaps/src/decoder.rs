//! Reconstruction heads.
//!
//! The convolutional decoder reads the prediction vectors û of the selected
//! class arranged on the PrimaryCaps grid, concatenates the one-hot class
//! replicated over space, and upsamples through two fractionally-strided
//! convolutions (16 then 1 filters, kernel 4, stride 2), ReLU between them,
//! sigmoid at the output, center-cropped to the input shape. The
//! feed-forward decoder from the original architecture is kept as the
//! baseline: masked class vectors through three dense layers.

use crate::error::{Error, Result};
use crate::routing::PredictionTensor;
use crate::scalar::Scalar;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Decoder input for one sample: the selected class's votes on the grid
/// plus the one-hot class vector to replicate over space.
#[derive(Debug, Clone)]
pub struct DecoderInput<T: Scalar> {
    /// û_{j*|i} arranged as [grid..., D_out].
    pub masked_votes: Tensor<T>,
    /// One-hot class indicator [J].
    pub class_onehot: Tensor<T>,
}

/// Pick the votes for class `class` and arrange them on the grid. Vote i
/// lands at grid position i in row-major order (capsule index equals its
/// pixel location for one-capsule-per-location layers).
pub fn select_class_votes<T: Scalar>(
    votes: &PredictionTensor<T>,
    class: usize,
    grid: &[usize],
) -> Result<DecoderInput<T>> {
    let (i_cnt, j_cnt, d) = (votes.children(), votes.parents(), votes.dim());
    if class >= j_cnt {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range (J={j_cnt})"
        )));
    }
    let grid_total: usize = grid.iter().product();
    if grid_total != i_cnt {
        return Err(Error::shape("select_class_votes grid", i_cnt, grid_total));
    }
    let mut out_dims = grid.to_vec();
    out_dims.push(d);
    let mut data = Vec::with_capacity(i_cnt * d);
    for i in 0..i_cnt {
        let src = (i * j_cnt + class) * d;
        data.extend_from_slice(&votes.tensor().data()[src..src + d]);
    }
    let mut onehot = Tensor::zeros(&[j_cnt])?;
    onehot.data_mut()[class] = T::ONE;
    Ok(DecoderInput {
        masked_votes: Tensor::from_vec(&out_dims, data)?,
        class_onehot: onehot,
    })
}

/// One-hot class channels replicated over the grid: [N, grid..., J].
fn replicated_onehot<T: Scalar>(classes: &[usize], grid: &[usize], j_cnt: usize) -> Result<Tensor<T>> {
    let n = classes.len();
    let grid_total: usize = grid.iter().product();
    let mut dims = vec![n];
    dims.extend_from_slice(grid);
    dims.push(j_cnt);
    let mut t = Tensor::zeros(&dims)?;
    for (nn, &c) in classes.iter().enumerate() {
        if c >= j_cnt {
            return Err(Error::InvalidArgument(format!(
                "class {c} out of range (J={j_cnt})"
            )));
        }
        for g in 0..grid_total {
            t.data_mut()[(nn * grid_total + g) * j_cnt + c] = T::ONE;
        }
    }
    Ok(t)
}

/// Append the convolutional decoder to a forward graph.
/// votes [N, I, J, D] -> reconstruction [N, 1, out_sp...].
#[allow(clippy::too_many_arguments)]
pub fn conv_decode_graph<T: Scalar>(
    tape: &mut Tape<T>,
    votes: NodeId,
    classes: &[usize],
    grid: &[usize],
    j_cnt: usize,
    deconv1_kernel: NodeId,
    deconv1_bias: NodeId,
    deconv2_kernel: NodeId,
    deconv2_bias: NodeId,
    out_sp: &[usize],
) -> Result<NodeId> {
    let [n, i_cnt, _, d] = *tape.value(votes).dims() else {
        return Err(Error::shape("conv_decode votes", "[N,I,J,D]", tape.value(votes).shape()));
    };
    let sel = tape.select_class_votes(votes, classes)?;
    let mut grid_dims = vec![n];
    grid_dims.extend_from_slice(grid);
    grid_dims.push(d);
    let on_grid = tape.reshape(sel, &grid_dims)?;
    let _ = i_cnt;

    let onehot = replicated_onehot::<T>(classes, grid, j_cnt)?;
    let cat = tape.concat_last_const(on_grid, onehot)?;

    // channels-last -> channels-first
    let perm: Vec<usize> = match grid.len() {
        2 => vec![0, 3, 1, 2],
        3 => vec![0, 4, 1, 2, 3],
        r => {
            return Err(Error::InvalidArgument(format!(
                "conv decoder supports 2 or 3 spatial axes, got {r}"
            )))
        }
    };
    let x = tape.permute(cat, &perm)?;
    let t1 = tape.conv_transpose(x, deconv1_kernel, deconv1_bias, crate::network::DECODER_STRIDE)?;
    let a1 = tape.relu(t1);
    let t2 = tape.conv_transpose(a1, deconv2_kernel, deconv2_bias, crate::network::DECODER_STRIDE)?;
    let sig = tape.sigmoid(t2);
    tape.crop_center(sig, out_sp)
}

/// Append the feed-forward decoder: class vectors [N, J, D] are masked to
/// the selected class, then passed through 512/1024/pixels dense layers.
#[allow(clippy::too_many_arguments)]
pub fn ff_decode_graph<T: Scalar>(
    tape: &mut Tape<T>,
    class_vectors: NodeId,
    classes: &[usize],
    fc1_w: NodeId,
    fc1_b: NodeId,
    fc2_w: NodeId,
    fc2_b: NodeId,
    fc3_w: NodeId,
    fc3_b: NodeId,
    out_sp: &[usize],
) -> Result<NodeId> {
    let [n, j_cnt, d] = *tape.value(class_vectors).dims() else {
        return Err(Error::shape(
            "ff_decode class vectors",
            "[N,J,D]",
            tape.value(class_vectors).shape(),
        ));
    };
    let flat = tape.reshape(class_vectors, &[n, j_cnt * d])?;
    let mut mask = Tensor::zeros(&[n, j_cnt * d])?;
    for (nn, &c) in classes.iter().enumerate() {
        if c >= j_cnt {
            return Err(Error::InvalidArgument(format!(
                "class {c} out of range (J={j_cnt})"
            )));
        }
        for k in 0..d {
            mask.data_mut()[nn * j_cnt * d + c * d + k] = T::ONE;
        }
    }
    let masked = tape.mul_const(flat, mask)?;
    let h1 = tape.affine(masked, fc1_w, fc1_b)?;
    let a1 = tape.relu(h1);
    let h2 = tape.affine(a1, fc2_w, fc2_b)?;
    let a2 = tape.relu(h2);
    let out = tape.affine(a2, fc3_w, fc3_b)?;
    let sig = tape.sigmoid(out);
    let mut dims = vec![n, 1];
    dims.extend_from_slice(out_sp);
    tape.reshape(sig, &dims)
}

/// Run the convolutional decoder on a single prepared input. Used directly
/// by reconstruction export and tests; training goes through
/// [`conv_decode_graph`].
pub fn conv_decode<T: Scalar>(
    input: &DecoderInput<T>,
    deconv1_kernel: &Tensor<T>,
    deconv1_bias: &Tensor<T>,
    deconv2_kernel: &Tensor<T>,
    deconv2_bias: &Tensor<T>,
    out_sp: &[usize],
) -> Result<Tensor<T>> {
    let dims = input.masked_votes.dims();
    let (grid, d) = (&dims[..dims.len() - 1], dims[dims.len() - 1]);
    let j_cnt = input.class_onehot.numel();
    let class = input
        .class_onehot
        .data()
        .iter()
        .position(|&v| v == T::ONE)
        .ok_or_else(|| Error::InvalidArgument("class_onehot has no 1".into()))?;

    let mut tape = Tape::new();
    let grid_total: usize = grid.iter().product();
    // rebuild a votes tensor holding the selected class only
    let mut votes = Tensor::zeros(&[1, grid_total, j_cnt, d])?;
    for i in 0..grid_total {
        let dst = (i * j_cnt + class) * d;
        votes.data_mut()[dst..dst + d]
            .copy_from_slice(&input.masked_votes.data()[i * d..(i + 1) * d]);
    }
    let votes_id = tape.leaf(votes);
    let k1 = tape.leaf(deconv1_kernel.clone());
    let b1 = tape.leaf(deconv1_bias.clone());
    let k2 = tape.leaf(deconv2_kernel.clone());
    let b2 = tape.leaf(deconv2_bias.clone());
    let out = conv_decode_graph(
        &mut tape,
        votes_id,
        &[class],
        grid,
        j_cnt,
        k1,
        b1,
        k2,
        b2,
        out_sp,
    )?;
    let mut dims = vec![];
    dims.extend_from_slice(out_sp);
    tape.value(out).reshaped(&dims)
}

/// Sum of squared differences over all voxels.
pub fn reconstruction_error<T: Scalar>(x: &Tensor<T>, xhat: &Tensor<T>) -> Result<T> {
    if x.dims() != xhat.dims() {
        return Err(Error::shape("reconstruction_error", x.shape(), xhat.shape()));
    }
    Ok(x.data()
        .iter()
        .zip(xhat.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_votes(i: usize, j: usize, d: usize, rng: &mut SplitMix64) -> PredictionTensor<f64> {
        let data = (0..i * j * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        PredictionTensor::new(Tensor::from_vec(&[i, j, d], data).unwrap()).unwrap()
    }

    #[test]
    fn select_shapes_match_fast2d() {
        let mut rng = SplitMix64::new(60);
        let votes = random_votes(64, 2, 16, &mut rng);
        let d = select_class_votes(&votes, 0, &[8, 8]).unwrap();
        assert_eq!(d.masked_votes.dims(), &[8, 8, 16]);
        assert_eq!(d.class_onehot.data(), &[1.0, 0.0]);
        let d = select_class_votes(&votes, 1, &[8, 8]).unwrap();
        assert_eq!(d.class_onehot.data(), &[0.0, 1.0]);
        assert!(select_class_votes(&votes, 2, &[8, 8]).is_err());
    }

    #[test]
    fn marker_vote_lands_at_its_grid_cell() {
        // plant a marker in capsule (r, c) = (3, 5) on an 8x8 grid
        let (i, j, d) = (64, 2, 16);
        let mut data = vec![0.0f64; i * j * d];
        let cap = 3 * 8 + 5;
        data[(cap * j) * d + 7] = 42.0; // class 0, dim 7
        let votes = PredictionTensor::new(Tensor::from_vec(&[i, j, d], data).unwrap()).unwrap();
        let sel = select_class_votes(&votes, 0, &[8, 8]).unwrap();
        assert_eq!(sel.masked_votes.data()[((3 * 8) + 5) * d + 7], 42.0);
        let nonzero = sel.masked_votes.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn selection_ignores_other_class_votes() {
        let mut rng = SplitMix64::new(61);
        let votes = random_votes(4, 3, 5, &mut rng);
        let before = select_class_votes(&votes, 1, &[2, 2]).unwrap();
        // perturb every vote of the other classes
        let mut data = votes.tensor().data().to_vec();
        for i in 0..4 {
            for j in [0usize, 2] {
                for k in 0..5 {
                    data[(i * 3 + j) * 5 + k] += rng.uniform(1.0, 2.0);
                }
            }
        }
        let votes2 = PredictionTensor::new(Tensor::from_vec(&[4, 3, 5], data).unwrap()).unwrap();
        let after = select_class_votes(&votes2, 1, &[2, 2]).unwrap();
        assert_eq!(before.masked_votes.data(), after.masked_votes.data());
    }

    #[test]
    fn zero_weight_decoder_outputs_half_everywhere() {
        let mut rng = SplitMix64::new(62);
        let votes = random_votes(4, 2, 4, &mut rng);
        let sel = select_class_votes(&votes, 0, &[2, 2]).unwrap();
        let k1 = Tensor::<f64>::zeros(&[6, 16, 4, 4]).unwrap();
        let b1 = Tensor::zeros(&[16]).unwrap();
        let k2 = Tensor::zeros(&[16, 1, 4, 4]).unwrap();
        let b2 = Tensor::zeros(&[1]).unwrap();
        let out = conv_decode(&sel, &k1, &b1, &k2, &b2, &[12, 12]).unwrap();
        assert_eq!(out.dims(), &[12, 12]);
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv_decoder_output_is_open_unit_interval() {
        let mut rng = SplitMix64::new(63);
        let votes = random_votes(4, 2, 4, &mut rng);
        let sel = select_class_votes(&votes, 1, &[2, 2]).unwrap();
        let mk = |dims: &[usize], fan: usize, rng: &mut SplitMix64| {
            Tensor::<f64>::uniform_init(dims, fan, rng).unwrap()
        };
        let k1 = mk(&[6, 16, 4, 4], 96, &mut rng);
        let b1 = mk(&[16], 16, &mut rng);
        let k2 = mk(&[16, 1, 4, 4], 256, &mut rng);
        let b2 = mk(&[1], 1, &mut rng);
        let out = conv_decode(&sel, &k1, &b1, &k2, &b2, &[12, 12]).unwrap();
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn reconstruction_error_cases() {
        let x = Tensor::<f64>::filled(&[32, 32], 0.0).unwrap();
        assert_eq!(reconstruction_error(&x, &x).unwrap(), 0.0);
        let xhat = Tensor::<f64>::filled(&[32, 32], 0.5).unwrap();
        let e = reconstruction_error(&x, &xhat).unwrap();
        assert!((e - 256.0).abs() < 1e-9);

        let mut rng = SplitMix64::new(64);
        let a_data: Vec<f64> = (0..100).map(|_| rng.next_f64()).collect();
        let b_data: Vec<f64> = (0..100).map(|_| rng.next_f64()).collect();
        let a = Tensor::from_vec(&[10, 10], a_data.clone()).unwrap();
        let b = Tensor::from_vec(&[10, 10], b_data.clone()).unwrap();
        let got = reconstruction_error(&a, &b).unwrap();
        let want: f64 = a_data
            .iter()
            .zip(&b_data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!((got - want).abs() < 1e-12);

        let c = Tensor::<f64>::zeros(&[5, 5]).unwrap();
        assert!(reconstruction_error(&a, &c).is_err());
    }
}
