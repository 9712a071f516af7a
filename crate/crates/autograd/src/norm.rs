//! Group/layer normalization kernels. Both normalize disjoint element groups
//! to zero mean and unit variance (biased), then apply a per-channel affine.

use crate::Element;

/// x is viewed as `groups` consecutive slices of `group_elems` elements each
/// (group norm: a group of channels x H x W; layer norm: one row).
/// Returns per-group (mean, rstd).
pub fn normalize_groups<E: Element>(
    x: &[E],
    y: &mut [E],
    groups: usize,
    eps: E,
) -> (Vec<E>, Vec<E>) {
    assert_eq!(x.len() % groups, 0);
    let ge = x.len() / groups;
    let n = E::from_f64(ge as f64);
    let mut means = Vec::with_capacity(groups);
    let mut rstds = Vec::with_capacity(groups);
    for g in 0..groups {
        let xs = &x[g * ge..(g + 1) * ge];
        let mut sum = E::zero();
        for v in xs {
            sum += *v;
        }
        let mean = sum / n;
        let mut var = E::zero();
        for v in xs {
            let d = *v - mean;
            var += d * d;
        }
        var /= n;
        let rstd = (var + eps).sqrt().recip();
        let ys = &mut y[g * ge..(g + 1) * ge];
        for (o, v) in ys.iter_mut().zip(xs.iter()) {
            *o = (*v - mean) * rstd;
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (means, rstds)
}

/// Gradient of group normalization w.r.t. x, given the gradient of the
/// normalized output (after the affine has been peeled off by the caller).
pub fn normalize_groups_backward<E: Element>(
    x: &[E],
    dxhat: &[E],
    means: &[E],
    rstds: &[E],
    groups: usize,
) -> Vec<E> {
    let ge = x.len() / groups;
    let n = E::from_f64(ge as f64);
    let mut dx = vec![E::zero(); x.len()];
    for g in 0..groups {
        let xs = &x[g * ge..(g + 1) * ge];
        let ds = &dxhat[g * ge..(g + 1) * ge];
        let (mean, rstd) = (means[g], rstds[g]);
        let mut sum1 = E::zero();
        let mut sum2 = E::zero();
        for (d, v) in ds.iter().zip(xs.iter()) {
            let xhat = (*v - mean) * rstd;
            sum1 += *d;
            sum2 += *d * xhat;
        }
        let out = &mut dx[g * ge..(g + 1) * ge];
        for ((o, d), v) in out.iter_mut().zip(ds.iter()).zip(xs.iter()) {
            let xhat = (*v - mean) * rstd;
            *o = rstd * (*d - (sum1 + xhat * sum2) / n);
        }
    }
    dx
}
