//! Reduction of a stack of biased max-plus layers to a single layer.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;
use crate::tropical::{tropical_matmul, TropicalMode};

/// A biased max-plus layer `w0 v W (x) x`. Entries may be `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxPlusLayer {
    /// `[n_out x n_in]`
    pub w: Tensor,
    pub w0: Vec<f64>,
}

impl MaxPlusLayer {
    pub fn new(w: Tensor, w0: Vec<f64>) -> Result<Self> {
        if w.shape().len() != 2 || w.rows() != w0.len() {
            return Err(dim_err(format!("layer W {:?} with {} biases", w.shape(), w0.len())));
        }
        Ok(Self { w, w0 })
    }

    pub fn n_in(&self) -> usize {
        self.w.cols()
    }

    pub fn n_out(&self) -> usize {
        self.w.rows()
    }

    /// `y_i = w0_i v max_j (W_ij + x_j)`, with `-inf` absorbing.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_in() {
            return Err(dim_err(format!("layer expects {} inputs, got {}", self.n_in(), x.len())));
        }
        Ok((0..self.n_out())
            .map(|i| {
                self.w
                    .row(i)
                    .iter()
                    .zip(x)
                    .map(|(&w, &v)| tplus(w, v))
                    .fold(self.w0[i], f64::max)
            })
            .collect())
    }
}

/// Max-plus "multiplication": `-inf` absorbs.
fn tplus(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        a + b
    }
}

/// Single layer equivalent to a max-plus stack.
pub type CollapsedLayer = MaxPlusLayer;

/// Evaluates a stack layer by layer.
pub fn stack_forward(layers: &[MaxPlusLayer], x: &[f64]) -> Result<Vec<f64>> {
    let mut h = x.to_vec();
    for l in layers {
        h = l.eval(&h)?;
    }
    Ok(h)
}

/// Collapses `layers` (applied first to last) into `w_eq0 v W_eq (x) x`
/// with `W_eq = W_L (x) ... (x) W_1` and the bias propagated through the
/// later layers.
pub fn collapse_stack(layers: &[MaxPlusLayer]) -> Result<CollapsedLayer> {
    if layers.len() < 2 {
        return Err(Error::Spec(format!("collapse needs at least 2 layers, got {}", layers.len())));
    }
    for (k, pair) in layers.windows(2).enumerate() {
        if pair[1].n_in() != pair[0].n_out() {
            return Err(dim_err(format!(
                "layer {} outputs {} but layer {} takes {}",
                k,
                pair[0].n_out(),
                k + 1,
                pair[1].n_in()
            )));
        }
    }
    let mut w_eq = layers[0].w.clone();
    let mut b_eq = layers[0].w0.clone();
    for l in &layers[1..] {
        w_eq = tropical_matmul(&l.w, &w_eq, TropicalMode::MaxPlus)?;
        b_eq = l.eval(&b_eq)?;
    }
    MaxPlusLayer::new(w_eq, b_eq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tropical::tropical_identity;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Multiples of 1/64 in [-8, 8]: sums stay exact in `f64`.
    fn dyadic(rng: &mut ChaCha8Rng) -> f64 {
        rng.random_range(-512i32..=512) as f64 / 64.0
    }

    fn random_stack(widths: &[usize], rng: &mut ChaCha8Rng) -> Vec<MaxPlusLayer> {
        widths
            .windows(2)
            .map(|p| {
                let w = Tensor::new(vec![p[1], p[0]], (0..p[0] * p[1]).map(|_| dyadic(rng)).collect()).unwrap();
                let w0 = (0..p[1])
                    .map(|_| if rng.random_bool(0.3) { f64::NEG_INFINITY } else { dyadic(rng) })
                    .collect();
                MaxPlusLayer::new(w, w0).unwrap()
            })
            .collect()
    }

    #[test]
    fn identity_layers_collapse_to_identity() {
        let id = MaxPlusLayer::new(tropical_identity(3, TropicalMode::MaxPlus), vec![f64::NEG_INFINITY; 3]).unwrap();
        let c = collapse_stack(&[id.clone(), id]).unwrap();
        assert_eq!(c.w, tropical_identity(3, TropicalMode::MaxPlus));
        assert!(c.w0.iter().all(|b| *b == f64::NEG_INFINITY));
        assert_eq!(c.eval(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn dominating_biases_give_a_constant() {
        let l1 = MaxPlusLayer::new(Tensor::from_rows(&[vec![0.0, 1.0]]), vec![1e6]).unwrap();
        let l2 = MaxPlusLayer::new(Tensor::from_rows(&[vec![0.0], vec![-1.0]]), vec![5e6, 7e6]).unwrap();
        let c = collapse_stack(&[l1, l2]).unwrap();
        assert_eq!(c.w0, vec![5e6, 7e6]);
        for x in [[0.0, 0.0], [3.0, -9.0], [100.0, 250.0]] {
            assert_eq!(c.eval(&x).unwrap(), c.w0);
        }
    }

    #[test]
    fn random_stacks_collapse_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let stack = random_stack(&[4, 4, 4, 4], &mut rng);
        let c = collapse_stack(&stack).unwrap();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..4).map(|_| dyadic(&mut rng)).collect();
            assert_eq!(stack_forward(&stack, &x).unwrap(), c.eval(&x).unwrap());
        }
    }

    #[test]
    fn agrees_with_the_kernel_on_finite_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = MaxPlusLayer::new(
            Tensor::new(vec![3, 2], (0..6).map(|_| dyadic(&mut rng)).collect()).unwrap(),
            vec![0.5, -1.0, 2.0],
        )
        .unwrap();
        let x = [0.25, -3.5];
        let (k, _) = crate::tropical::tropical_vecmul(&l.w, &x, Some(&l.w0), TropicalMode::MaxPlus).unwrap();
        assert_eq!(l.eval(&x).unwrap(), k);
    }

    #[test]
    fn rejects_bad_stacks() {
        let l = MaxPlusLayer::new(Tensor::zeros(vec![2, 3]), vec![0.0; 2]).unwrap();
        assert!(collapse_stack(std::slice::from_ref(&l)).is_err());
        assert!(collapse_stack(&[l.clone(), l]).is_err());
        assert!(MaxPlusLayer::new(Tensor::zeros(vec![2, 3]), vec![0.0]).is_err());
    }
}
