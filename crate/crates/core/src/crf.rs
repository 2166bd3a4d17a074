//! Linear-chain CRF over emission scores `P` (`T×K`) and a transition matrix
//! `A` (`(K+2)×(K+2)`) whose last two indices are the START and END
//! sentinels. `A[i][j]` scores the move from tag `i` to tag `j`.
//!
//! All dynamic programs run in log space.

use rand::Rng;

use crate::autodiff::{glorot_uniform, lse, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Stand-in for −∞ on forbidden sentinel transitions.
pub const FORBIDDEN: f64 = -1e4;

/// Transition parameters with START = `K` and END = `K+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfParams {
    transitions: Tensor,
    num_tags: usize,
}

impl CrfParams {
    /// All-zero transitions apart from the masked sentinel entries.
    pub fn zeros(num_tags: usize) -> Self {
        let mut transitions = Tensor::zeros(&[num_tags + 2, num_tags + 2]);
        mask_sentinels(&mut transitions, num_tags);
        CrfParams {
            transitions,
            num_tags,
        }
    }

    pub fn random<R: Rng>(rng: &mut R, num_tags: usize) -> Self {
        let n = num_tags + 2;
        let mut transitions = glorot_uniform(rng, &[n, n], n, n);
        mask_sentinels(&mut transitions, num_tags);
        CrfParams {
            transitions,
            num_tags,
        }
    }

    pub fn from_tensor(mut transitions: Tensor) -> Result<Self> {
        let s = transitions.shape().to_vec();
        if s.len() != 2 || s[0] != s[1] || s[0] < 3 {
            return Err(Error::dim("crf transitions", &s, &[0, 0]));
        }
        let num_tags = s[0] - 2;
        mask_sentinels(&mut transitions, num_tags);
        Ok(CrfParams {
            transitions,
            num_tags,
        })
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    pub fn start_index(&self) -> usize {
        self.num_tags
    }

    pub fn end_index(&self) -> usize {
        self.num_tags + 1
    }

    pub fn transitions(&self) -> &Tensor {
        &self.transitions
    }

    pub fn into_tensor(self) -> Tensor {
        self.transitions
    }
}

/// Pins transitions into START and out of END to [`FORBIDDEN`].
pub fn mask_sentinels(a: &mut Tensor, num_tags: usize) {
    let n = num_tags + 2;
    let (start, end) = (num_tags, num_tags + 1);
    let v = a.values_mut();
    for i in 0..n {
        v[i * n + start] = FORBIDDEN;
        v[end * n + i] = FORBIDDEN;
    }
}

fn check(p: &Tensor, a: &Tensor) -> Result<(usize, usize)> {
    let ps = p.shape();
    if ps.len() != 2 {
        return Err(Error::dim("crf emissions", ps, &[0, 0]));
    }
    let (t, k) = (ps[0], ps[1]);
    if a.shape() != [k + 2, k + 2] {
        return Err(Error::dim("crf transitions", a.shape(), &[k + 2, k + 2]));
    }
    Ok((t, k))
}

fn check_tags(y: &[usize], t: usize, k: usize) -> Result<()> {
    if y.len() != t {
        return Err(Error::Contract(format!(
            "{} tags for {t} positions",
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&tag| tag >= k) {
        return Err(Error::Domain(format!("tag {bad} outside [0, {k})")));
    }
    Ok(())
}

/// `S(X, y) = Σ A[y_i][y_{i+1}] + Σ P[i][y_i]` with START and END padding.
pub fn sequence_score(p: &Tensor, a: &Tensor, y: &[usize]) -> Result<f64> {
    let (t, k) = check(p, a)?;
    check_tags(y, t, k)?;
    let n = k + 2;
    let av = a.values();
    let mut score = av[k * n + y[0]] + av[y[t - 1] * n + k + 1];
    for i in 0..t {
        score += p.at(i, y[i]);
        if i > 0 {
            score += av[y[i - 1] * n + y[i]];
        }
    }
    Ok(score)
}

/// Forward log-messages `α[t][j]`, including the emission at `t`.
fn forward(p: &Tensor, a: &Tensor, t: usize, k: usize) -> Vec<f64> {
    let n = k + 2;
    let av = a.values();
    let mut alpha = vec![0.0; t * k];
    for j in 0..k {
        alpha[j] = av[k * n + j] + p.at(0, j);
    }
    let mut buf = vec![0.0; k];
    for step in 1..t {
        for j in 0..k {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = alpha[(step - 1) * k + i] + av[i * n + j];
            }
            alpha[step * k + j] = lse(&buf) + p.at(step, j);
        }
    }
    alpha
}

/// Backward log-messages `β[t][i]`, excluding the emission at `t`.
fn backward(p: &Tensor, a: &Tensor, t: usize, k: usize) -> Vec<f64> {
    let n = k + 2;
    let av = a.values();
    let mut beta = vec![0.0; t * k];
    for i in 0..k {
        beta[(t - 1) * k + i] = av[i * n + k + 1];
    }
    let mut buf = vec![0.0; k];
    for step in (0..t - 1).rev() {
        for i in 0..k {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = av[i * n + j] + p.at(step + 1, j) + beta[(step + 1) * k + j];
            }
            beta[step * k + i] = lse(&buf);
        }
    }
    beta
}

fn finish(alpha: &[f64], a: &Tensor, t: usize, k: usize) -> f64 {
    let n = k + 2;
    let last: Vec<f64> = (0..k)
        .map(|j| alpha[(t - 1) * k + j] + a.values()[j * n + k + 1])
        .collect();
    lse(&last)
}

/// Log-partition `ln Σ_y exp S(X, y)` by the forward algorithm.
pub fn log_partition(p: &Tensor, a: &Tensor) -> Result<f64> {
    let (t, k) = check(p, a)?;
    let alpha = forward(p, a, t, k);
    Ok(finish(&alpha, a, t, k))
}

/// Negative log-likelihood `ln Z − S(X, y)`.
pub fn nll(p: &Tensor, a: &Tensor, y: &[usize]) -> Result<f64> {
    let score = sequence_score(p, a, y)?;
    Ok(log_partition(p, a)? - score)
}

/// Highest-scoring tag sequence and its score. Ties resolve to the lowest
/// tag index.
pub fn viterbi(p: &Tensor, a: &Tensor) -> Result<(Vec<usize>, f64)> {
    let (t, k) = check(p, a)?;
    let n = k + 2;
    let av = a.values();
    let mut delta: Vec<f64> = (0..k).map(|j| av[k * n + j] + p.at(0, j)).collect();
    let mut back = vec![0usize; t * k];
    let mut next = vec![0.0; k];
    for step in 1..t {
        for j in 0..k {
            let mut best = 0;
            let mut best_score = delta[0] + av[j];
            for (i, &d) in delta.iter().enumerate().skip(1) {
                let s = d + av[i * n + j];
                if s > best_score {
                    best_score = s;
                    best = i;
                }
            }
            back[step * k + j] = best;
            next[j] = best_score + p.at(step, j);
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut last = 0;
    let mut best_score = delta[0] + av[k + 1];
    for (j, &d) in delta.iter().enumerate().skip(1) {
        let s = d + av[j * n + k + 1];
        if s > best_score {
            best_score = s;
            last = j;
        }
    }
    let mut path = vec![0usize; t];
    path[t - 1] = last;
    for step in (1..t).rev() {
        path[step - 1] = back[step * k + path[step]];
    }
    Ok((path, best_score))
}

/// Posterior marginals `M[t][j] = p(y_t = j | X)` by forward-backward.
pub fn posterior_marginals(p: &Tensor, a: &Tensor) -> Result<Tensor> {
    let (t, k) = check(p, a)?;
    let alpha = forward(p, a, t, k);
    let beta = backward(p, a, t, k);
    let log_z = finish(&alpha, a, t, k);
    let values = alpha
        .iter()
        .zip(&beta)
        .map(|(x, y)| (x + y - log_z).exp())
        .collect();
    Tensor::matrix(t, k, values)
}

/// Loss plus its gradients with respect to `P` and `A`.
///
/// `∂/∂P[t][j] = M[t][j] − [y_t = j]`; the transition gradient is the
/// expected transition count minus the observed one.
pub fn nll_with_grad(p: &Tensor, a: &Tensor, y: &[usize]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (t, k) = check(p, a)?;
    check_tags(y, t, k)?;
    let n = k + 2;
    let (start, end) = (k, k + 1);
    let av = a.values();
    let alpha = forward(p, a, t, k);
    let beta = backward(p, a, t, k);
    let log_z = finish(&alpha, a, t, k);
    let loss = log_z - sequence_score(p, a, y)?;

    let mut dp: Vec<f64> = alpha
        .iter()
        .zip(&beta)
        .map(|(x, y)| (x + y - log_z).exp())
        .collect();
    let mut da = vec![0.0; n * n];
    for j in 0..k {
        da[start * n + j] += dp[j];
        da[j * n + end] += dp[(t - 1) * k + j];
    }
    for step in 1..t {
        for i in 0..k {
            let ai = alpha[(step - 1) * k + i];
            for j in 0..k {
                let x = ai + av[i * n + j] + p.at(step, j) + beta[step * k + j] - log_z;
                da[i * n + j] += x.exp();
            }
        }
    }

    for (step, &tag) in y.iter().enumerate() {
        dp[step * k + tag] -= 1.0;
        if step > 0 {
            da[y[step - 1] * n + tag] -= 1.0;
        }
    }
    da[start * n + y[0]] -= 1.0;
    da[y[t - 1] * n + end] -= 1.0;
    Ok((loss, dp, da))
}

/// Records the CRF negative log-likelihood as a differentiable graph node.
pub fn nll_node(g: &mut Graph, p: Var, a: Var, y: &[usize]) -> Result<Var> {
    let (loss, dp, da) = nll_with_grad(g.value(p), g.value(a), y)?;
    g.fused_scalar(loss, vec![(p, dp), (a, da)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeros(t: usize, k: usize) -> (Tensor, Tensor) {
        (Tensor::zeros(&[t, k]), Tensor::zeros(&[k + 2, k + 2]))
    }

    #[test]
    fn zero_instance_scores() {
        let (p, a) = zeros(2, 2);
        assert_eq!(sequence_score(&p, &a, &[0, 1]).unwrap(), 0.0);
        assert!((log_partition(&p, &a).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((nll(&p, &a, &[1, 1]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let m = posterior_marginals(&p, &a).unwrap();
        assert!(m.values().iter().all(|&x| (x - 0.5).abs() < 1e-12));
    }

    #[test]
    fn single_position_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = 3;
        let p = Tensor::matrix(1, k, (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let crf = CrfParams::random(&mut rng, k);
        let a = crf.transitions();
        let n = k + 2;
        let local: Vec<f64> = (0..k)
            .map(|j| a.values()[k * n + j] + p.at(0, j) + a.values()[j * n + k + 1])
            .collect();
        assert!((sequence_score(&p, a, &[2]).unwrap() - local[2]).abs() < 1e-12);
        assert!((log_partition(&p, a).unwrap() - lse(&local)).abs() < 1e-12);
        let m = posterior_marginals(&p, a).unwrap();
        let z = lse(&local);
        for j in 0..k {
            assert!((m.at(0, j) - (local[j] - z).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_tag_is_domain_error() {
        let (p, a) = zeros(2, 2);
        assert!(matches!(sequence_score(&p, &a, &[0, 2]), Err(Error::Domain(_))));
        assert!(sequence_score(&p, &a, &[0]).is_err());
        let bad = Tensor::zeros(&[3, 3]);
        assert!(matches!(log_partition(&p, &bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn peaked_emissions_decode_per_position() {
        let (mut p, a) = zeros(4, 3);
        let gold = [2, 0, 1, 1];
        for (t, &y) in gold.iter().enumerate() {
            p.values_mut()[t * 3 + y] = 30.0;
        }
        let (path, score) = viterbi(&p, &a).unwrap();
        assert_eq!(path, gold);
        assert_eq!(score, 120.0);
        assert!(nll(&p, &a, &gold).unwrap() < 1e-10);
    }

    #[test]
    fn single_tag_has_single_path() {
        let (p, a) = zeros(5, 1);
        assert_eq!(viterbi(&p, &a).unwrap().0, vec![0; 5]);
        assert!(log_partition(&p, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_lowest_index() {
        let (p, a) = zeros(3, 4);
        assert_eq!(viterbi(&p, &a).unwrap().0, vec![0, 0, 0]);
    }

    #[test]
    fn sentinel_mask_is_applied() {
        let crf = CrfParams::zeros(2);
        let a = crf.transitions();
        for i in 0..4 {
            assert_eq!(a.at(i, crf.start_index()), FORBIDDEN);
            assert_eq!(a.at(crf.end_index(), i), FORBIDDEN);
        }
        assert_eq!(a.at(crf.start_index(), 0), 0.0);
    }

    #[test]
    fn emission_shift_changes_partition_by_t_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (t, k) = (4, 3);
        let p = Tensor::matrix(t, k, (0..t * k).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let a = CrfParams::random(&mut rng, k).into_tensor();
        let c = 1.7;
        let shifted = Tensor::matrix(t, k, p.values().iter().map(|v| v + c).collect()).unwrap();
        let dz = log_partition(&shifted, &a).unwrap() - log_partition(&p, &a).unwrap();
        assert!((dz - t as f64 * c).abs() < 1e-10);
        assert_eq!(viterbi(&p, &a).unwrap().0, viterbi(&shifted, &a).unwrap().0);
        let (m0, m1) = (posterior_marginals(&p, &a).unwrap(), posterior_marginals(&shifted, &a).unwrap());
        for (x, y) in m0.values().iter().zip(m1.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn marginals_are_emission_derivatives_of_log_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t, k) = (3, 3);
        let p = Tensor::matrix(t, k, (0..t * k).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let a = CrfParams::random(&mut rng, k).into_tensor();
        let m = posterior_marginals(&p, &a).unwrap();
        let eps = 1e-5;
        for j in 0..k {
            let shift = |d: f64| {
                let mut q = p.clone();
                for step in 0..t {
                    q.values_mut()[step * k + j] += d;
                }
                log_partition(&q, &a).unwrap()
            };
            let fd = (shift(eps) - shift(-eps)) / (2.0 * eps);
            let expected: f64 = (0..t).map(|step| m.at(step, j)).sum();
            assert!((fd - expected).abs() < 1e-8);
        }
    }
}
