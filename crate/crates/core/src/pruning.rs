//! Magnitude and SNIP pruning masks.
//!
//! A mask maps a prunable parameter id to keep flags (`true` = kept). Only
//! weight matrices are prunable; biases, scales, singular values and
//! mixing coefficients never are.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;

use crate::error::{dim_err, Error, Result};
use crate::model::{Network, Targets};
use crate::param::ParamSet;
use crate::tensor::Tensor;

pub type Masks = BTreeMap<String, Vec<bool>>;

/// Per layer, masks the `floor(r * count)` entries with the smallest
/// `|w|`; ties go to the lower index.
pub fn l1_masks(params: &ParamSet, ratio: f64) -> Result<Masks> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Parameter(format!("prune ratio {ratio} outside [0, 1)")));
    }
    let mut out = Masks::new();
    for p in params.iter().filter(|p| p.role.prunable()) {
        let v = p.value.data();
        let k = (ratio * v.len() as f64).floor() as usize;
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()));
        let mut mask = vec![true; v.len()];
        for &i in &order[..k] {
            mask[i] = false;
        }
        out.insert(p.id.clone(), mask);
    }
    Ok(out)
}

/// Connection sensitivity `|g * w|` of every prunable entry from one
/// backward pass of the training loss on `x`.
pub fn snip_scores(net: &Network, x: &Tensor, targets: Targets<'_>) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let (_, grads) = net.loss_and_grads(x, targets, false, &mut rng)?;
    let mut out = BTreeMap::new();
    for p in net.params.iter().filter(|p| p.role.prunable()) {
        let g = grads
            .params
            .get(&p.id)
            .ok_or_else(|| Error::MissingParameter(p.id.clone()))?;
        let s = p
            .value
            .data()
            .iter()
            .zip(g.data())
            .map(|(w, g)| {
                let v = (w * g).abs();
                if v.is_nan() {
                    0.0
                } else {
                    v
                }
            })
            .collect();
        out.insert(p.id.clone(), s);
    }
    Ok(out)
}

/// Keeps the globally `keep` most sensitive prunable entries. Equal scores
/// are ranked by parameter order, then index.
pub fn snip_masks(net: &Network, x: &Tensor, targets: Targets<'_>, keep: usize) -> Result<Masks> {
    if keep == 0 {
        return Err(Error::Spec("SNIP keep count must be positive".into()));
    }
    let scores = snip_scores(net, x, targets)?;
    let total: usize = scores.values().map(Vec::len).sum();
    if keep > total {
        return Err(Error::Spec(format!("keep count {keep} exceeds {total} prunable weights")));
    }
    let mut flat: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
    let ids: Vec<&String> = net.params.iter().filter(|p| p.role.prunable()).map(|p| &p.id).collect();
    for (pi, id) in ids.iter().enumerate() {
        for (k, &s) in scores[*id].iter().enumerate() {
            flat.push((s, pi, k));
        }
    }
    flat.select_nth_unstable_by(keep - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out: Masks = ids.iter().map(|id| ((*id).clone(), vec![false; scores[*id].len()])).collect();
    for &(_, pi, k) in &flat[..keep] {
        out.get_mut(ids[pi]).expect("id present")[k] = true;
    }
    Ok(out)
}

/// Installs masks, writing neutral values into removed entries.
pub fn apply_masks(params: &mut ParamSet, masks: &Masks) -> Result<()> {
    for (id, m) in masks {
        let p = params.get_mut(id)?;
        if !p.role.prunable() {
            return Err(Error::Parameter(format!("`{id}` is not prunable")));
        }
        if m.len() != p.value.len() {
            return Err(dim_err(format!("mask for `{id}` has {} entries, expected {}", m.len(), p.value.len())));
        }
        p.set_mask(m.clone())?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSparsity {
    pub id: String,
    pub kept: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsityReport {
    pub kept: usize,
    pub total: usize,
    pub layers: Vec<LayerSparsity>,
}

impl SparsityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,kept,total\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{}", l.id, l.kept, l.total);
        }
        let _ = writeln!(s, "all,{},{}", self.kept, self.total);
        s
    }
}

/// Kept and total prunable entries, per parameter and overall.
pub fn sparsity_report(params: &ParamSet) -> SparsityReport {
    let layers: Vec<LayerSparsity> = params
        .iter()
        .filter(|p| p.role.prunable())
        .map(|p| LayerSparsity {
            id: p.id.clone(),
            kept: p.kept_count(),
            total: p.value.len(),
        })
        .collect();
    SparsityReport {
        kept: layers.iter().map(|l| l.kept).sum(),
        total: layers.iter().map(|l| l.total).sum(),
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{init_network, InitScheme};
    use crate::layers::{LayerSpec, NetworkSpec};
    use crate::param::{ParamRole, Parameter};
    use crate::presets::preset;
    use proptest::prelude::*;

    fn one(values: Vec<f64>, role: ParamRole) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert(Parameter::new("0.W", Tensor::vector(values), role, true)).unwrap();
        ps
    }

    #[test]
    fn l1_sort_oracle() {
        let ps = one(vec![3.0, -1.0, 0.5, 2.0], ParamRole::LinearWeight);
        assert_eq!(l1_masks(&ps, 0.5).unwrap()["0.W"], vec![true, false, false, true]);
        assert!(l1_masks(&ps, 0.0).unwrap()["0.W"].iter().all(|&k| k));
        assert!(l1_masks(&ps, 1.0).is_err());
        // Ties: the lower index goes first.
        let ps = one(vec![1.0, -1.0, 1.0, 5.0], ParamRole::LinearWeight);
        assert_eq!(l1_masks(&ps, 0.5).unwrap()["0.W"], vec![false, false, true, true]);
    }

    proptest! {
        #[test]
        fn l1_permutation_equivariant(v in prop::collection::vec(-10.0f64..10.0, 1..40), seed in any::<u64>(), r in 0.0f64..0.99) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..v.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pv: Vec<f64> = perm.iter().map(|&i| v[i]).collect();
            let m = l1_masks(&one(v.clone(), ParamRole::LinearWeight), r).unwrap()["0.W"].clone();
            let pm = l1_masks(&one(pv.clone(), ParamRole::LinearWeight), r).unwrap()["0.W"].clone();
            // Same kept count and, away from magnitude ties, the same entries.
            prop_assert_eq!(m.iter().filter(|&&k| k).count(), pm.iter().filter(|&&k| k).count());
            let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
            mags.sort_by(f64::total_cmp);
            if mags.windows(2).all(|w| w[0] != w[1]) {
                for (j, &i) in perm.iter().enumerate() {
                    prop_assert_eq!(pm[j], m[i]);
                }
            }
        }
    }

    #[test]
    fn report_counts() {
        let spec = preset("mpm", &[784], 10).unwrap();
        let mut net = init_network(&spec, &InitScheme::default(), 0).unwrap();
        let r = sparsity_report(&net.params);
        assert_eq!(r.kept, r.total);
        // Everything except biases and scales is a prunable weight.
        assert_eq!(r.total, 469_268 - 5 * 3 * 256 - 2 * 10);
        let m = l1_masks(&net.params, 0.5).unwrap();
        apply_masks(&mut net.params, &m).unwrap();
        for l in sparsity_report(&net.params).layers {
            assert_eq!(l.kept, l.total.div_ceil(2));
        }
        assert!(sparsity_report(&net.params).to_csv().starts_with("id,kept,total\n0.W,"));
    }

    #[test]
    fn snip_prunes_dead_weight_first() {
        // Input 1 is constant zero and feeds only through A[*, 1] of a
        // linear layer, so those weights have zero sensitivity.
        let spec = NetworkSpec::new(vec![2], vec![LayerSpec::linear(2, 2).output()]);
        let mut net = init_network(&spec, &InitScheme::default(), 1).unwrap();
        net.params.get_mut("0.A").unwrap().value = Tensor::from_rows(&[vec![0.5, 0.7], vec![-0.3, 0.2]]);
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![-2.0, 0.0]]);
        let m = snip_masks(&net, &x, Targets::Classes(&[0, 1]), 2).unwrap();
        assert_eq!(m["0.A"], vec![true, false, true, false]);
        let all = snip_masks(&net, &x, Targets::Classes(&[0, 1]), 4).unwrap();
        assert!(all["0.A"].iter().all(|&k| k));
        assert!(snip_masks(&net, &x, Targets::Classes(&[0, 1]), 0).is_err());
    }

    #[test]
    fn masked_rows_fall_back_to_bias() {
        let spec = NetworkSpec::new(vec![2], vec![LayerSpec::mpm(2, 2).output()]);
        let mut net = init_network(&spec, &InitScheme::default(), 2).unwrap();
        let mut m = Masks::new();
        m.insert("0.W".into(), vec![false; 4]);
        apply_masks(&mut net.params, &m).unwrap();
        let y = net.predict(&Tensor::vector(vec![3.0, -8.0])).unwrap();
        let w0 = net.params.get("0.w0").unwrap().value.data().to_vec();
        let m0 = net.params.get("0.m0").unwrap().value.data().to_vec();
        assert_eq!(y.data(), &[w0[0] + m0[0], w0[1] + m0[1]]);
        let mut bad = Masks::new();
        bad.insert("0.w0".into(), vec![false; 2]);
        assert!(apply_masks(&mut net.params, &bad).is_err());
    }
}
