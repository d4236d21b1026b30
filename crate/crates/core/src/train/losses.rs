use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

use super::TrainError;

/// Log floor applied before every logarithm in the losses.
pub const LOG_FLOOR: f64 = 1e-12;
/// Largest tolerated deviation of a probability row sum from 1.
pub const NORM_TOLERANCE: f64 = 1e-4;

fn check_rows<T: Scalar>(probs: &[T], width: usize) -> Result<(), TrainError> {
    for (i, row) in probs.chunks(width).enumerate() {
        let s: f64 = row.iter().map(|v| v.to_f64().unwrap()).sum();
        if !s.is_finite() || (s - 1.0).abs() > NORM_TOLERANCE {
            return Err(TrainError::NotNormalized { row: i, sum: s });
        }
    }
    Ok(())
}

/// `−Σ O_i log(max(P_i, 1e-12))` for a single prediction.
pub fn orientation_loss_value(probs: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    if probs.len() != 8 || target.len() != 8 {
        return Err(TrainError::ClassCount { expected: 8, got: probs.len().max(target.len()) });
    }
    check_rows(probs, 8)?;
    Ok(-probs.iter().zip(target).map(|(&p, &o)| o * p.max(LOG_FLOOR).ln()).sum::<f64>())
}

/// Batch mean of the categorical loss. `probs` and `target` are `[N, 8]`;
/// `target` rows are one-hot.
pub fn orientation_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, target: Var) -> Result<Var, TrainError> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 2 || shape[1] != 8 {
        return Err(TrainError::ClassCount { expected: 8, got: shape.last().copied().unwrap_or(0) });
    }
    if g.shape(target) != shape.as_slice() {
        return Err(TensorError::Shape { op: "orientation_loss", detail: format!("{:?} vs {shape:?}", g.shape(target)) }.into());
    }
    check_rows(g.value(probs).data(), 8)?;
    let logs = g.log(probs, LOG_FLOOR);
    let picked = g.mul(logs, target)?;
    let total = g.sum(picked);
    Ok(g.affine(total, -1.0 / shape[0] as f64, 0.0))
}

/// Weighted binary cross-entropy over the four class maps: summed over
/// classes, averaged over pixels and batch. `seg` and `target` are
/// `[N, 4, H, W]`; `target` is the one-hot class map.
pub fn segmentation_loss<T: Scalar>(g: &mut Graph<T>, seg: Var, target: &Tensor<T>, weights: &[f64]) -> Result<Var, TrainError> {
    let shape = g.shape(seg).to_vec();
    if shape.len() != 4 || shape[1] != 4 {
        return Err(TrainError::ClassCount { expected: 4, got: shape.get(1).copied().unwrap_or(0) });
    }
    if weights.len() != 4 {
        return Err(TrainError::ClassCount { expected: 4, got: weights.len() });
    }
    if target.shape() != shape.as_slice() {
        return Err(TensorError::Shape { op: "segmentation_loss", detail: format!("{:?} vs {shape:?}", target.shape()) }.into());
    }
    let plane = shape[2] * shape[3];
    let pixels = (shape[0] * plane) as f64;
    // per-element coefficients: −w_c / pixels on the matching log term
    let mut pos = Vec::with_capacity(target.numel());
    let mut neg = Vec::with_capacity(target.numel());
    for (i, &y) in target.data().iter().enumerate() {
        let c = (i / plane) % 4;
        let k = T::from_f64c(-weights[c] / pixels);
        pos.push(y * k);
        neg.push((T::one() - y) * k);
    }
    let pos = g.input(Tensor::new(shape.clone(), pos)?);
    let neg = g.input(Tensor::new(shape, neg)?);
    let log_p = g.log(seg, LOG_FLOOR);
    let one_minus = g.affine(seg, -1.0, 1.0);
    let log_q = g.log(one_minus, LOG_FLOOR);
    let a = g.mul(log_p, pos)?;
    let b = g.mul(log_q, neg)?;
    let both = g.add(a, b)?;
    Ok(g.sum(both))
}

/// `L_segmentation + L_orientation`, unweighted.
pub fn integral_loss<T: Scalar>(g: &mut Graph<T>, seg_loss: Var, orient_loss: Var) -> Result<Var, TrainError> {
    Ok(g.add(seg_loss, orient_loss)?)
}

pub fn integral_loss_value(seg_loss: f64, orient_loss: f64) -> f64 {
    seg_loss + orient_loss
}

/// One-hot `[N, 4, H, W]` target from class maps of equal size.
pub fn seg_target<'a, T: Scalar>(maps: impl IntoIterator<Item = ndarray::ArrayView2<'a, u8>>) -> Result<Tensor<T>, TrainError> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for m in maps {
        if *dims.get_or_insert(m.dim()) != m.dim() {
            return Err(TrainError::Data("segmentation maps differ in size".into()));
        }
        for c in 0..4u8 {
            data.extend(m.iter().map(|&v| if v == c { T::one() } else { T::zero() }));
        }
        n += 1;
    }
    let (h, w) = dims.ok_or_else(|| TrainError::Data("no segmentation maps".into()))?;
    Ok(Tensor::new(vec![n, 4, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orientation_values() {
        let mut o = [0.0; 8];
        o[3] = 1.0;
        let uniform = orientation_loss_value(&[0.125; 8], &o).unwrap();
        assert!((uniform - 8f64.ln()).abs() < 1e-12);
        assert!(orientation_loss_value(&o, &o).unwrap().abs() < 1e-12);
        let mut half = [0.5 / 7.0; 8];
        half[3] = 0.5;
        assert!((orientation_loss_value(&half, &o).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(orientation_loss_value(&[0.2; 8], &o), Err(TrainError::NotNormalized { .. })));
    }

    #[test]
    fn graph_loss_matches_value() {
        let mut g = Graph::<f64>::new();
        let mut p = vec![0.05; 16];
        p[2] = 0.65;
        p[8 + 7] = 0.65;
        let mut t = vec![0.0; 16];
        t[2] = 1.0;
        t[8 + 1] = 1.0;
        let pv = g.input(Tensor::new(vec![2, 8], p).unwrap());
        let tv = g.input(Tensor::new(vec![2, 8], t).unwrap());
        let l = orientation_loss(&mut g, pv, tv).unwrap();
        let expect = -(0.65f64.ln() + 0.05f64.ln()) / 2.0;
        assert!((g.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn bce_half_and_weights() {
        let maps = [ndarray::Array2::from_shape_fn((3, 5), |(i, j)| ((i + j) % 4) as u8)];
        let target = seg_target::<f64>(maps.iter().map(|m| m.view())).unwrap();
        let mut g = Graph::new();
        let seg = g.input(Tensor::full(&[1, 4, 3, 5], 0.5));
        let l = segmentation_loss(&mut g, seg, &target, &[1.0; 4]).unwrap();
        assert!((g.value(l).item() / 4.0 - 2f64.ln()).abs() < 1e-12);

        let probs: Vec<f64> = (0..60).map(|i| 0.1 + 0.8 * (i as f64 / 59.0)).collect();
        let seg = g.input(Tensor::new(vec![1, 4, 3, 5], probs).unwrap());
        let base = segmentation_loss(&mut g, seg, &target, &[1.0; 4]).unwrap();
        let only0 = segmentation_loss(&mut g, seg, &target, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let doubled = segmentation_loss(&mut g, seg, &target, &[2.0, 1.0, 1.0, 1.0]).unwrap();
        let (b, c0, d) = (g.value(base).item(), g.value(only0).item(), g.value(doubled).item());
        assert!((d - (b + c0)).abs() < 1e-12);
        assert!(segmentation_loss(&mut g, seg, &target, &[1.0; 3]).is_err());
    }
}
