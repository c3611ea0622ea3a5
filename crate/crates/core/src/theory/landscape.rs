//! Loss surfaces of tiny networks over two free weight entries.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::layers::{LayerSpec, NetworkSpec};
use crate::model::Network;
use crate::optim::mse;
use crate::tensor::Tensor;
use crate::tropical::TropicalMode;

use super::builders::assemble;

/// A free weight entry, written `"{param_id}[{flat_index}]"`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreeEntry {
    pub param: String,
    pub index: usize,
}

impl FreeEntry {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Spec(format!("free entry `{s}` is not of the form id[index]"));
        let (param, rest) = s.split_once('[').ok_or_else(bad)?;
        let index = rest.strip_suffix(']').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        Ok(Self {
            param: param.to_string(),
            index,
        })
    }
}

/// Evenly spaced values `lo, ..., hi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.lo];
        }
        let h = (self.hi - self.lo) / (self.points - 1) as f64;
        (0..self.points).map(|k| self.lo + k as f64 * h).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Landscape {
    pub entries: [String; 2],
    pub rows: Vec<f64>,
    pub cols: Vec<f64>,
    /// `loss[i][j]` at `(rows[i], cols[j])`.
    pub loss: Vec<Vec<f64>>,
}

impl Landscape {
    /// Header row holds the second entry's values, the first column the
    /// first entry's.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\\{}", self.entries[0], self.entries[1]);
        for c in &self.cols {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (r, row) in self.rows.iter().zip(&self.loss) {
            let _ = write!(s, "{r}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Grid point with the smallest loss: `(row, col, loss)`.
    pub fn global_min(&self) -> (f64, f64, f64) {
        let mut best = (self.rows[0], self.cols[0], f64::INFINITY);
        for (i, row) in self.loss.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v < best.2 {
                    best = (self.rows[i], self.cols[j], v);
                }
            }
        }
        best
    }

    /// Counts local minima of the grid surface: connected groups of points
    /// no higher than any of their 8 neighbours (within `tol`). A valley of
    /// equal values counts once.
    pub fn local_minima(&self, tol: f64) -> usize {
        let (n, m) = (self.rows.len(), self.cols.len());
        let neighbours = |i: usize, j: usize| {
            let mut v = Vec::with_capacity(8);
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (a, b) = (i as i64 + di, j as i64 + dj);
                    if (di, dj) != (0, 0) && a >= 0 && b >= 0 && (a as usize) < n && (b as usize) < m {
                        v.push((a as usize, b as usize));
                    }
                }
            }
            v
        };
        let is_min: Vec<Vec<bool>> = (0..n)
            .map(|i| {
                (0..m)
                    .map(|j| neighbours(i, j).iter().all(|&(p, q)| self.loss[i][j] <= self.loss[p][q] + tol))
                    .collect()
            })
            .collect();
        let mut seen = vec![vec![false; m]; n];
        let mut count = 0;
        for i in 0..n {
            for j in 0..m {
                if !is_min[i][j] || seen[i][j] {
                    continue;
                }
                count += 1;
                let mut stack = vec![(i, j)];
                seen[i][j] = true;
                while let Some((a, b)) = stack.pop() {
                    for (p, q) in neighbours(a, b) {
                        if is_min[p][q] && !seen[p][q] {
                            seen[p][q] = true;
                            stack.push((p, q));
                        }
                    }
                }
            }
        }
        count
    }
}

/// Mean squared error of `net` on `(x, y)` over a grid of the two `free`
/// entries; all other parameters stay as given.
pub fn landscape_grid(net: &Network, free: &[&str], axes: [Axis; 2], x: &Tensor, y: &Tensor) -> Result<Landscape> {
    if free.len() != 2 {
        return Err(Error::Spec(format!("landscape needs exactly 2 free entries, got {}", free.len())));
    }
    let e: Vec<FreeEntry> = free.iter().map(|s| FreeEntry::parse(s)).collect::<Result<_>>()?;
    for f in &e {
        let p = net.params.get(&f.param)?;
        if f.index >= p.value.len() {
            return Err(Error::Spec(format!("{}[{}] is out of range", f.param, f.index)));
        }
    }
    if e[0] == e[1] {
        return Err(Error::Spec("free entries must differ".into()));
    }
    let (rows, cols) = (axes[0].values(), axes[1].values());
    let mut net = net.clone();
    let mut loss = Vec::with_capacity(rows.len());
    for &r in &rows {
        let mut line = Vec::with_capacity(cols.len());
        for &c in &cols {
            net.params.get_mut(&e[0].param)?.value.data_mut()[e[0].index] = r;
            net.params.get_mut(&e[1].param)?.value.data_mut()[e[1].index] = c;
            let pred = net.predict(x)?;
            line.push(mse(pred.data(), y.data()).0);
        }
        loss.push(line);
    }
    Ok(Landscape {
        entries: [free[0].to_string(), free[1].to_string()],
        rows,
        cols,
        loss,
    })
}

/// Three 2-input samples on which a single max-plus unit has a lower
/// global minimum than a linear unit but a piecewise surface.
pub fn perceptron_samples() -> (Tensor, Tensor) {
    (
        Tensor::from_rows(&[vec![-1.7, 1.0], vec![5.0, -2.2], vec![1.0, 1.0]]),
        Tensor::from_rows(&[vec![2.3], vec![3.7], vec![4.7]]),
    )
}

/// Three 2-input samples for the two-unit hybrid surface.
pub fn hybrid_samples() -> (Tensor, Tensor) {
    (
        Tensor::from_rows(&[vec![1.2, -2.4], vec![-3.36, 2.34], vec![-2.1, -1.5]]),
        Tensor::from_rows(&[vec![1.4], vec![2.16], vec![2.4]]),
    )
}

/// Unbiased max-plus unit `max(w1 + x1, w2 + x2)`; free entries `0.W[0]`, `0.W[1]`.
pub fn mp_unit() -> Result<Network> {
    let spec = NetworkSpec::new(vec![2], vec![LayerSpec::mp(2, 1, TropicalMode::MaxPlus, false).output()]);
    assemble(spec, [("0.W".to_string(), Tensor::zeros(vec![1, 2]))].into())
}

/// Linear unit `w1 x1 + w2 x2` with its bias held at 0; free entries
/// `0.A[0]`, `0.A[1]`.
pub fn linear_unit() -> Result<Network> {
    let spec = NetworkSpec::new(vec![2], vec![LayerSpec::linear(2, 1).output()]);
    assemble(
        spec,
        [
            ("0.A".to_string(), Tensor::zeros(vec![1, 2])),
            ("0.b".to_string(), Tensor::zeros(vec![1])),
        ]
        .into(),
    )
}

/// Two unbiased max-plus units with the cross weights held at 0, summed by
/// a fixed linear output; free entries `0.W[0]`, `0.W[3]`.
pub fn hybrid_pair() -> Result<Network> {
    let spec = NetworkSpec::new(
        vec![2],
        vec![
            LayerSpec::mp(2, 2, TropicalMode::MaxPlus, false),
            LayerSpec::linear(2, 1).output(),
        ],
    );
    assemble(
        spec,
        [
            ("0.W".to_string(), Tensor::zeros(vec![2, 2])),
            ("1.A".to_string(), Tensor::from_rows(&[vec![1.0, 1.0]])),
            ("1.b".to_string(), Tensor::zeros(vec![1])),
        ]
        .into(),
    )
}
