//! Coherence losses over a batch of decisions `D[b,n]`.
//!
//! - explicit: mean per-sample entropy, pushes each decision away from uniform.
//! - consistent: mean over (class, auxiliary category) of the within-class
//!   sample variance of the decision scores.
//! - balance: `Σ_j m_j ln m_j` over column masses `m_j = Σ_k D_kj + δ`.
//!
//! The balance term is the unnormalized form, so its magnitude grows with the
//! batch size.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Graph, Real, Result, Tensor, Var};

/// Tolerance of the simplex precondition checked by [`loss_explicit`] and
/// [`loss_balance`]. Loose enough for finite-difference probes.
pub const SIMPLEX_TOL: f64 = 1e-4;

/// One-hot class membership of a batch, stored as labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndicatorMatrix {
    labels: Vec<usize>,
    n_categories: usize,
}

impl IndicatorMatrix {
    pub fn new(labels: &[usize], n_categories: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_categories) {
            return Err(Error::Dimension(format!(
                "label {bad} out of range for {n_categories} categories"
            )));
        }
        Ok(IndicatorMatrix {
            labels: labels.to_vec(),
            n_categories,
        })
    }

    /// Parses a dense `[b,N]` 0/1 matrix with exactly one 1 per row.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let [b, n] = t.dims2("indicator")?;
        let mut labels = Vec::with_capacity(b);
        for k in 0..b {
            let row = t.row(k);
            let ones: Vec<usize> = (0..n).filter(|&i| row[i] == T::one()).collect();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            if ones.len() != 1 || zeros != n - 1 {
                return Err(Error::Contract(format!("indicator row {k} is not one-hot")));
            }
            labels.push(ones[0]);
        }
        Ok(IndicatorMatrix { labels, n_categories: n })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn n_categories(&self) -> usize {
        self.n_categories
    }

    /// Samples per class, `Σ_k I_ki`.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_categories];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let n = self.n_categories;
        let mut t = Tensor::zeros(&[self.labels.len(), n]);
        for (k, &l) in self.labels.iter().enumerate() {
            t.data_mut()[k * n + l] = T::one();
        }
        t
    }
}

/// Loss weights and the divide-by-zero guard δ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_explicit: f64,
    pub lambda_consistent: f64,
    pub lambda_balance: f64,
    pub delta: f64,
}

impl LossWeights {
    /// One weight for all three terms.
    pub fn uniform(lambda: f64) -> Self {
        LossWeights {
            lambda_explicit: lambda,
            lambda_consistent: lambda,
            lambda_balance: lambda,
            delta: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ls = [self.lambda_explicit, self.lambda_consistent, self.lambda_balance];
        if ls.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {ls:?}")));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta must be positive, got {}", self.delta)));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    /// 0.1 for every term, δ = 1e-5.
    fn default() -> Self {
        Self::uniform(0.1)
    }
}

fn decision_dims<T: Real>(g: &Graph<T>, d: Var) -> Result<[usize; 2]> {
    g.value(d).dims2("decision batch")
}

/// Checks that every row is non-negative and sums to 1 within [`SIMPLEX_TOL`].
pub fn check_simplex<T: Real>(d: &Tensor<T>) -> Result<()> {
    let [b, _] = d.dims2("decision batch")?;
    let tol = SIMPLEX_TOL;
    for k in 0..b {
        let row = d.row(k);
        let s: f64 = row.iter().map(|v| v.to_f64_lossy()).sum();
        if (s - 1.0).abs() > tol || row.iter().any(|v| v.to_f64_lossy() < -tol) {
            return Err(Error::Contract(format!(
                "decision row {k} is off the simplex (sum {s})"
            )));
        }
    }
    Ok(())
}

/// `(1/b) Σ_k −Σ_j D_kj ln D_kj`, logs clamped at 1e-12.
pub fn loss_explicit<T: Real>(g: &mut Graph<T>, d: Var) -> Result<Var> {
    let [b, _] = decision_dims(g, d)?;
    check_simplex(g.value(d))?;
    let ln = g.ln_clamped(d);
    let plogp = g.mul(d, ln)?;
    let s = g.sum(plogp);
    Ok(g.scale(s, -T::one() / T::from_usize(b).unwrap()))
}

fn check_batch<T: Real>(g: &Graph<T>, d: Var, ind: &IndicatorMatrix) -> Result<[usize; 2]> {
    let [b, n] = decision_dims(g, d)?;
    if ind.batch_size() != b {
        return Err(Error::Dimension(format!(
            "indicator has {} rows for a batch of {b}",
            ind.batch_size()
        )));
    }
    Ok([b, n])
}

/// Consistent loss evaluated class by class: the class mean
/// `M_ij = Σ_k I_ki D_kj / (Σ_k I_ki + δ)`, then
/// `V_ij = Σ_k I_ki (D_kj − M_ij)² / (Σ_k I_ki − 1 + δ)`, averaged over `N·n`.
pub fn loss_consistent_naive<T: Real>(g: &mut Graph<T>, d: Var, ind: &IndicatorMatrix, delta: f64) -> Result<Var> {
    let [b, n] = check_batch(g, d, ind)?;
    let counts = ind.counts();
    let delta_t = T::from_f64_lossy(delta);
    let mut terms: Vec<Var> = Vec::new();
    for (i, &count) in counts.iter().enumerate() {
        // absent classes have a zero numerator
        if count == 0 {
            continue;
        }
        let mask = g.input(Tensor::from_fn(&[b, 1], |k| {
            if ind.labels()[k] == i {
                T::one()
            } else {
                T::zero()
            }
        }));
        let c = T::from_usize(count).unwrap();
        for j in 0..n {
            let col = g.column(d, j)?;
            let masked = g.mul(col, mask)?;
            let s = g.sum(masked);
            let m = g.scale(s, T::one() / (c + delta_t));
            let dev = g.sub_scalar_var(col, m)?;
            let sq = g.mul(dev, dev)?;
            let sq = g.mul(sq, mask)?;
            let num = g.sum(sq);
            terms.push(g.scale(num, T::one() / (c - T::one() + delta_t)));
        }
    }
    let scale = T::one() / T::from_usize(ind.n_categories() * n).unwrap();
    let total = match terms.split_first() {
        None => {
            let z = g.input(Tensor::scalar(T::zero()));
            return Ok(g.scale(z, scale));
        }
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = g.add(acc, t)?;
            }
            acc
        }
    };
    Ok(g.scale(total, scale))
}

/// Matrix form of the consistent loss.
///
/// With `A = Iᵀ(D⊙D)`, `S = IᵀD` and per-class counts `c_i`:
///
/// `V = A / (c − 1 + δ) − S⊙S ⊙ (c + 2δ) / ((c + δ)² (c − 1 + δ))`
///
/// which expands the class-by-class definition exactly, including its δ terms.
/// The shorter `S⊙S / ((c + δ)(c − 1 + δ))` second term only agrees with it as
/// δ → 0 and is badly off for singleton classes (`V ≈ D²` instead of `≈ δD²`).
pub fn loss_consistent_matrix<T: Real>(g: &mut Graph<T>, d: Var, ind: &IndicatorMatrix, delta: f64) -> Result<Var> {
    let [_, n] = check_batch(g, d, ind)?;
    let nc = ind.n_categories();
    let counts = ind.counts();
    let it = g.input(ind.to_tensor::<T>().transpose()?);
    let dd = g.mul(d, d)?;
    let a = g.matmul(it, dd)?;
    let s = g.matmul(it, d)?;
    let delta_t = T::from_f64_lossy(delta);
    let two = T::from_f64_lossy(2.0);
    let inv1 = g.input(Tensor::from_fn(&[nc, n], |idx| {
        let c = T::from_usize(counts[idx / n]).unwrap();
        T::one() / (c - T::one() + delta_t)
    }));
    let inv2 = g.input(Tensor::from_fn(&[nc, n], |idx| {
        let c = T::from_usize(counts[idx / n]).unwrap();
        (c + two * delta_t) / ((c + delta_t) * (c + delta_t) * (c - T::one() + delta_t))
    }));
    let first = g.mul(a, inv1)?;
    let ss = g.mul(s, s)?;
    let second = g.mul(ss, inv2)?;
    let v = g.sub(first, second)?;
    let total = g.sum(v);
    Ok(g.scale(total, T::one() / T::from_usize(nc * n).unwrap()))
}

/// `Σ_j m_j ln m_j` with `m_j = Σ_k D_kj + δ`.
pub fn loss_balance<T: Real>(g: &mut Graph<T>, d: Var, delta: f64) -> Result<Var> {
    decision_dims(g, d)?;
    check_simplex(g.value(d))?;
    let col = g.sum_rows(d)?;
    let m = g.add_scalar(col, T::from_f64_lossy(delta));
    let ln = g.ln_clamped(m);
    let mlogm = g.mul(m, ln)?;
    Ok(g.sum(mlogm))
}

/// The three loss nodes of one DPM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DpmLosses {
    pub explicit: Var,
    pub consistent: Var,
    pub balance: Var,
}

/// All three losses of one decision batch. The consistent term uses the matrix form.
pub fn dpm_losses<T: Real>(g: &mut Graph<T>, d: Var, ind: &IndicatorMatrix, delta: f64) -> Result<DpmLosses> {
    Ok(DpmLosses {
        explicit: loss_explicit(g, d)?,
        consistent: loss_consistent_matrix(g, d, ind, delta)?,
        balance: loss_balance(g, d, delta)?,
    })
}

fn mean_of<T: Real>(g: &mut Graph<T>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(g.scale(acc, T::one() / T::from_usize(vars.len()).unwrap()))
}

/// `ce + λe·mean(explicit) + λc·mean(consistent) + λb·mean(balance)`,
/// each mean taken over DPMs. With no DPMs this is `ce` itself.
pub fn total_loss<T: Real>(g: &mut Graph<T>, ce: Var, per_dpm: &[DpmLosses], w: &LossWeights) -> Result<Var> {
    if per_dpm.is_empty() {
        return Ok(ce);
    }
    let terms = [
        (per_dpm.iter().map(|l| l.explicit).collect::<Vec<_>>(), w.lambda_explicit),
        (per_dpm.iter().map(|l| l.consistent).collect(), w.lambda_consistent),
        (per_dpm.iter().map(|l| l.balance).collect(), w.lambda_balance),
    ];
    let mut acc = ce;
    for (vars, lambda) in terms {
        let m = mean_of(g, &vars)?;
        let weighted = g.scale(m, T::from_f64_lossy(lambda));
        acc = g.add(acc, weighted)?;
    }
    Ok(acc)
}
