use crate::error::{Error, Result};
use crate::numerics::{softmax, Activation, Matrix, Vector};

use super::{Padding, Pooling};

/// Number of window positions for region size `h` over `s` rows.
pub fn window_count(s: usize, h: usize, padding: Padding) -> Result<usize> {
    match padding {
        Padding::Wide if h >= 1 => Ok(s + h - 1),
        Padding::Narrow if h >= 1 && h <= s => Ok(s - h + 1),
        _ => Err(Error::Shape(format!(
            "region size {h} does not fit {s} rows with {padding:?} padding"
        ))),
    }
}

/// Row offset subtracted from a window position to find its first input row.
pub(crate) fn window_offset(h: usize, padding: Padding) -> usize {
    match padding {
        Padding::Wide => h - 1,
        Padding::Narrow => 0,
    }
}

/// Pre-activation responses (`O + b`) of one filter. Rows at or past
/// `real_rows` are known to be zero and skipped.
pub(crate) fn conv_pre(
    tensor: &[Matrix],
    filter: &[f64],
    bias: f64,
    h: usize,
    padding: Padding,
    real_rows: usize,
) -> Result<Vec<f64>> {
    let s = tensor.first().map_or(0, Matrix::rows);
    let d = tensor.first().map_or(0, Matrix::cols);
    if filter.len() != tensor.len() * h * d {
        return Err(Error::Shape(format!(
            "filter of {} values does not span {} channels x {h} rows x {d} dims",
            filter.len(),
            tensor.len()
        )));
    }
    let p = window_count(s, h, padding)?;
    let off = window_offset(h, padding);
    let limit = real_rows.min(s);
    let mut out = Vec::with_capacity(p);
    for q in 0..p {
        let mut acc = 0.0;
        for (k, a) in tensor.iter().enumerate() {
            for r in 0..h {
                let Some(t) = (q + r).checked_sub(off) else {
                    continue;
                };
                if t >= limit {
                    continue;
                }
                let w = &filter[(k * h + r) * d..(k * h + r + 1) * d];
                for (wc, ac) in w.iter().zip(a.row(t)) {
                    acc += wc * ac;
                }
            }
        }
        out.push(acc + bias);
    }
    Ok(out)
}

/// One filter's feature map: `f(filter . window + bias)` at every window
/// position. `tensor` holds one `s x d` matrix per channel and `filter` is laid
/// out `[channel][row][dim]`.
pub fn conv_region(
    tensor: &[Matrix],
    filter: &[f64],
    bias: f64,
    h: usize,
    activation: Activation,
    padding: Padding,
) -> Result<Vector> {
    let s = tensor.first().map_or(0, Matrix::rows);
    let pre = conv_pre(tensor, filter, bias, h, padding, s)?;
    Ok(pre
        .into_iter()
        .map(|x| activation.apply(x))
        .collect::<Vec<_>>()
        .into())
}

/// Intermediate values of one region's attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct Attended {
    /// `p x m` column-stacked feature maps.
    pub features: Matrix,
    /// `p x k_a`, `tanh(X W + b)`.
    pub hidden: Matrix,
    /// Softmax-normalized position weights, length `p`.
    pub weights: Vec<f64>,
    /// `p x m`, each row of `features` scaled by its weight.
    pub attended: Matrix,
}

pub(crate) fn attend(features: Matrix, w: &Matrix, b: &[f64], u: &[f64]) -> Result<Attended> {
    let (p, m) = features.shape();
    let ka = u.len();
    if w.shape() != (m, ka) || b.len() != ka {
        return Err(Error::Shape(format!(
            "attention weights {}x{} / bias {} do not match {m} filters and context {ka}",
            w.rows(),
            w.cols(),
            b.len()
        )));
    }
    let mut hidden = crate::numerics::matmul(&features, w)?;
    let mut scores = Vec::with_capacity(p);
    for q in 0..p {
        let row = hidden.row_mut(q);
        let mut score = 0.0;
        for ((z, bias), ul) in row.iter_mut().zip(b).zip(u) {
            *z = (*z + bias).tanh();
            score += *z * ul;
        }
        scores.push(score);
    }
    let weights = softmax(&scores);
    let mut attended = features.clone();
    for (q, &a) in weights.iter().enumerate() {
        for x in attended.row_mut(q) {
            *x *= a;
        }
    }
    Ok(Attended {
        features,
        hidden,
        weights,
        attended,
    })
}

/// Attention over `m` feature maps of equal length `p`.
pub fn attend_region(maps: &[Vec<f64>], w: &Matrix, b: &[f64], u: &[f64]) -> Result<Attended> {
    let p = maps.first().map_or(0, Vec::len);
    if p == 0 {
        return Err(Error::Shape("feature maps must be non-empty".into()));
    }
    if let Some(bad) = maps.iter().find(|m| m.len() != p) {
        return Err(Error::Shape(format!(
            "feature map lengths differ ({} vs {p})",
            bad.len()
        )));
    }
    let mut x = Matrix::zeros(p, maps.len());
    for (j, map) in maps.iter().enumerate() {
        for (q, &v) in map.iter().enumerate() {
            x[(q, j)] = v;
        }
    }
    attend(x, w, b, u)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pooled {
    pub values: Vec<f64>,
    /// Selected row per column for max/min pooling; empty for average.
    pub rows: Vec<usize>,
}

/// Column-wise pooling of a `p x m` matrix.
pub fn pool_region(x: &Matrix, pooling: Pooling) -> Pooled {
    let (p, m) = x.shape();
    assert!(p > 0, "pooling over zero rows");
    match pooling {
        Pooling::Average => Pooled {
            values: (0..m)
                .map(|j| (0..p).map(|q| x[(q, j)]).sum::<f64>() / p as f64)
                .collect(),
            rows: Vec::new(),
        },
        Pooling::Max | Pooling::Min => {
            let better = |a: f64, b: f64| match pooling {
                Pooling::Max => a > b,
                _ => a < b,
            };
            let mut values = Vec::with_capacity(m);
            let mut rows = Vec::with_capacity(m);
            for j in 0..m {
                let mut best = 0;
                for q in 1..p {
                    if better(x[(q, j)], x[(best, j)]) {
                        best = q;
                    }
                }
                values.push(x[(best, j)]);
                rows.push(best);
            }
            Pooled { values, rows }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn conv_hand_examples() {
        let a = m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let h = [1.0; 4];
        let narrow = conv_region(
            std::slice::from_ref(&a),
            &h,
            0.0,
            2,
            Activation::Linear,
            Padding::Narrow,
        )
        .unwrap();
        assert_eq!(&narrow[..], &[2.0, 3.0]);
        let wide = conv_region(
            std::slice::from_ref(&a),
            &h,
            0.0,
            2,
            Activation::Linear,
            Padding::Wide,
        )
        .unwrap();
        assert_eq!(&wide[..], &[1.0, 2.0, 3.0, 2.0]);
        let zero = conv_region(&[a], &[0.0; 4], 0.0, 2, Activation::Relu, Padding::Wide).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn conv_errors() {
        let a = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(conv_region(
            std::slice::from_ref(&a),
            &[1.0; 6],
            0.0,
            3,
            Activation::Linear,
            Padding::Narrow
        )
        .is_err());
        assert!(conv_region(&[a], &[1.0; 5], 0.0, 2, Activation::Linear, Padding::Narrow).is_err());
    }

    #[test]
    fn zero_context_is_uniform() {
        let maps = vec![vec![1.0, -2.0, 3.5], vec![0.5, 0.1, 0.0]];
        let w = m(&[&[0.3, -0.2], &[1.1, 0.7]]);
        let out = attend_region(&maps, &w, &[0.1, -0.1], &[0.0, 0.0]).unwrap();
        for &a in &out.weights {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
        for q in 0..3 {
            for j in 0..2 {
                assert!((out.attended[(q, j)] - out.features[(q, j)] / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_hand_example() {
        // U = tanh([1, 3]); a = softmax(U); Xbar = a * X
        let out = attend_region(&[vec![1.0, 3.0]], &m(&[&[1.0]]), &[0.0], &[1.0]).unwrap();
        let u = [1f64.tanh(), 3f64.tanh()];
        assert!((out.hidden[(0, 0)] - 0.76159).abs() < 1e-5);
        assert!((out.hidden[(1, 0)] - 0.99505).abs() < 1e-5);
        let e0 = u[0].exp();
        let e1 = u[1].exp();
        let a0 = e0 / (e0 + e1);
        assert!((out.weights[0] - a0).abs() < 1e-15);
        // independently evaluated: a = [0.4418985, 0.5581015], Xbar = [0.4418985, 1.6743045]
        assert!((out.weights[0] - 0.4418985).abs() < 1e-7);
        assert!((out.weights[1] - 0.5581015).abs() < 1e-7);
        assert!((out.attended[(0, 0)] - 0.4418985).abs() < 1e-7);
        assert!((out.attended[(1, 0)] - 1.6743045).abs() < 1e-7);
        // rounded figures quoted for this example, good to 1e-4
        assert!((out.weights[0] - 0.44188).abs() < 1e-4);
        assert!((out.attended[(1, 0)] - 1.67437).abs() < 1e-4);
    }

    #[test]
    fn scaling_context_keeps_argmax() {
        let maps = vec![vec![0.2, 1.4, -0.3, 0.9], vec![1.0, 0.0, 0.5, -1.0]];
        let w = m(&[&[0.5, -0.3], &[0.2, 0.8]]);
        let argmax = |u: &[f64]| {
            let a = attend_region(&maps, &w, &[0.0, 0.0], u).unwrap().weights;
            (0..a.len()).max_by(|&i, &j| a[i].total_cmp(&a[j])).unwrap()
        };
        let base = argmax(&[0.7, -1.2]);
        for c in [0.01, 0.5, 3.0, 100.0] {
            assert_eq!(argmax(&[0.7 * c, -1.2 * c]), base);
        }
    }

    #[test]
    fn attend_rejects_ragged_maps() {
        let w = m(&[&[1.0], &[1.0]]);
        assert!(attend_region(&[vec![1.0, 2.0], vec![1.0]], &w, &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn pooling() {
        let x = m(&[&[1.0, 4.0], &[3.0, 2.0]]);
        assert_eq!(pool_region(&x, Pooling::Max).values, vec![3.0, 4.0]);
        assert_eq!(pool_region(&x, Pooling::Max).rows, vec![1, 0]);
        assert_eq!(pool_region(&x, Pooling::Average).values, vec![2.0, 3.0]);
        assert_eq!(pool_region(&x, Pooling::Min).values, vec![1.0, 2.0]);
        let single = m(&[&[5.0, -1.0]]);
        for p in [Pooling::Max, Pooling::Average, Pooling::Min] {
            assert_eq!(pool_region(&single, p).values, vec![5.0, -1.0]);
        }
    }


    mod props {
        use super::*;
        use crate::numerics::Rng;
        use proptest::prelude::*;

        fn draw(n: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
            (0..n).map(|_| rng.uniform(-scale, scale)).collect()
        }

        proptest! {
            #[test]
            fn attention_is_a_distribution(p in 1usize..12, m in 1usize..5, ka in 1usize..5, seed in any::<u64>()) {
                let mut rng = Rng::new(seed);
                let maps: Vec<Vec<f64>> = (0..m).map(|_| draw(p, 3.0, &mut rng)).collect();
                let w = Matrix::uniform(m, ka, 2.0, &mut rng);
                let b = draw(ka, 1.0, &mut rng);
                let u = draw(ka, 5.0, &mut rng);
                let att = attend_region(&maps, &w, &b, &u).unwrap();
                let sum: f64 = att.weights.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-9);
                prop_assert!(att.weights.iter().all(|a| (0.0..=1.0).contains(a)));
                let flat = attend_region(&maps, &w, &b, &vec![0.0; ka]).unwrap();
                let uniform = 1.0 / p as f64;
                prop_assert!(flat.weights.iter().all(|a| (a - uniform).abs() <= 1e-12));
            }

            #[test]
            fn wide_windows_cover_each_token_h_times(s in 1usize..10, h in 1usize..6, t in 0usize..10) {
                let t = t % s;
                let mut x = Matrix::zeros(s, 1);
                x[(t, 0)] = 1.0;
                let out = conv_region(&[x], &vec![1.0; h], 0.0, h, Activation::Linear, Padding::Wide).unwrap();
                prop_assert_eq!(out.len(), s + h - 1);
                prop_assert_eq!(out.iter().filter(|&&v| v == 1.0).count(), h);
            }
        }
    }
}
